// Drives the patchforge executable end to end.

#include <doctest.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>

#include "fixtures.hpp"
#include "patchforge/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
namespace pipeline = patchforge::pipeline;

namespace {

const std::string kExe = PATCHFORGE_CLI_PATH;

const std::string kSmall =
    " --set phantom.width=96 phantom.height=96 phantom.max_lesions=3 phantom.max_lesion_radius=10 phantom.cases=8"
    " extract.target_per_class=60 train.epochs=2 train.batch_size=16 detect.stride=3";

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  Run r;
  const std::string cmd = kExe + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  std::size_t n = 0;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// phantom -> extract -> train -> detect once, shared by the tests below.
struct Pipeline {
  fs::path root = fixture::temp_dir("cli_pipeline");
  fs::path ds = root / "ds", ex = root / "ex", tr = root / "tr", det = root / "det";
  int codes[4] = {-1, -1, -1, -1};
  Pipeline() {
    codes[0] = run("phantom --out " + q(ds) + kSmall).code;
    codes[1] = run("extract --manifest " + q(ds / "manifest.json") + " --out " + q(ex) + kSmall).code;
    codes[2] = run("train --patches " + q(ex / "patches.pfpr") + " --out " + q(tr) + " --checkpoint-every 1" + kSmall).code;
    codes[3] = run("detect --manifest " + q(ds / "manifest.json") + " --model " + q(tr / "model.pfck") + " --out " +
                   q(det) + kSmall)
                   .code;
  }
};

const Pipeline& shared() {
  static Pipeline p;
  return p;
}

}  // namespace

TEST_CASE("info prints the default network's parameter counts") {
  const auto r = run("info");
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j.at("total_parameters").get<std::size_t>() == 295107);
  CHECK(j.at("branch_parameters").get<std::size_t>() == 143328);
}

TEST_CASE("phantom -> extract -> train -> detect -> eval completes with exit 0") {
  const auto& p = shared();
  for (int c : p.codes) CHECK(c == 0);
  const fs::path ev = p.root / "ev";
  CHECK(run("eval --manifest " + q(p.ds / "manifest.json") + " --detections " + q(p.det) + " --out " + q(ev)).code == 0);
  CHECK(fs::exists(ev / "report.json"));
  CHECK(fs::exists(ev / "report.csv"));
  CHECK(fs::exists(p.tr / "checkpoints" / "epoch_001.pfck"));
  CHECK(fs::exists(p.tr / "checkpoints" / "epoch_002.pfck"));
  CHECK(fs::exists(p.det / "case_000_overlay.ppm"));
  CHECK(fs::exists(p.det / "detect_summary.json"));
  for (const auto& d : {p.ds, p.ex, p.tr, p.det, ev}) CHECK(fs::exists(d / "effective_config.toml"));

  const auto train_log = slurp(p.tr / "train_log.csv");
  CHECK(train_log.rfind("epoch,lr,mean_loss,accuracy,seconds\n", 0) == 0);

  // info on the trained checkpoint matches the default architecture
  const auto info = run("info --model " + q(p.tr / "model.pfck"));
  REQUIRE(info.code == 0);
  CHECK(json::parse(info.out).at("total_parameters").get<std::size_t>() == 295107);
}

TEST_CASE("eval with cutoff 0 mm reports the same totals as no cutoff") {
  const auto& p = shared();
  const fs::path a = p.root / "ev_none", b = p.root / "ev_zero";
  REQUIRE(run("eval --manifest " + q(p.ds / "manifest.json") + " --detections " + q(p.det) + " --out " + q(a)).code == 0);
  REQUIRE(run("eval --manifest " + q(p.ds / "manifest.json") + " --detections " + q(p.det) + " --out " + q(b) +
              " --set eval.cutoff_mm=0")
              .code == 0);
  const auto ja = json::parse(slurp(a / "report.json"));
  const auto jb = json::parse(slurp(b / "report.json"));
  REQUIRE(jb.contains("stratified"));
  CHECK(jb.at("stratified") == ja.at("overall"));
  CHECK(jb.at("overall") == ja.at("overall"));
}

TEST_CASE("commands are idempotent apart from timing fields") {
  const auto& p = shared();
  const fs::path ds2 = p.root / "ds2", ex2 = p.root / "ex2", tr2 = p.root / "tr2", det2 = p.root / "det2";
  REQUIRE(run("phantom --out " + q(ds2) + kSmall).code == 0);
  for (const auto& e : fs::directory_iterator(p.ds)) {
    const auto name = e.path().filename();
    if (name == "effective_config.toml") continue;
    CHECK_MESSAGE(slurp(e.path()) == slurp(ds2 / name), name.string());
  }
  REQUIRE(run("extract --manifest " + q(p.ds / "manifest.json") + " --out " + q(ex2) + kSmall).code == 0);
  CHECK(slurp(p.ex / "patches.pfpr") == slurp(ex2 / "patches.pfpr"));
  CHECK(slurp(p.ex / "extract_summary.json") == slurp(ex2 / "extract_summary.json"));
  REQUIRE(run("train --patches " + q(p.ex / "patches.pfpr") + " --out " + q(tr2) + kSmall).code == 0);
  CHECK(slurp(p.tr / "model.pfck") == slurp(tr2 / "model.pfck"));
  CHECK(slurp(p.tr / "train_summary.json") == slurp(tr2 / "train_summary.json"));
  REQUIRE(run("detect --manifest " + q(p.ds / "manifest.json") + " --model " + q(p.tr / "model.pfck") + " --out " +
              q(det2) + kSmall + " detect.stride=3 workers=2")
              .code == 0);
  for (const auto& e : fs::directory_iterator(p.det)) {
    const auto name = e.path().filename();
    if (name == "effective_config.toml") continue;
    CHECK_MESSAGE(slurp(e.path()) == slurp(det2 / name), name.string());
  }
}

TEST_CASE("exit code 1 for validation errors, 2 for I/O errors") {
  const auto& p = shared();
  const fs::path out = p.root / "errs";
  CHECK(run("bogus").code == 1);
  CHECK(run("eval --manifest " + q(p.ds / "manifest.json")).code == 1);  // missing --detections
  CHECK(run("phantom --out " + q(out) + " --set no_such_key=1").code == 1);
  CHECK(run("phantom --out " + q(out) + " --threshold 1.5").code == 1);
  CHECK(run("detect --manifest " + q(p.ds / "manifest.json") + " --model " + q(p.tr / "model.pfck") + " --out " +
            q(out) + " --set model=binary")
            .code == 1);  // 3-class checkpoint used as a binary model
  CHECK(run("detect --manifest " + q(p.root / "missing.json") + " --model " + q(p.tr / "model.pfck") + " --out " +
            q(out))
            .code == 2);
  CHECK(run("phantom --config " + q(p.root / "missing.toml") + " --out " + q(out)).code == 2);
  {
    std::ofstream(p.root / "bad.pfck") << "not a checkpoint";
  }
  CHECK(run("info --model " + q(p.root / "bad.pfck")).code == 2);
  {
    std::ofstream(p.root / "bad_manifest.json") << "{ nope";
  }
  CHECK(run("eval --manifest " + q(p.root / "bad_manifest.json") + " --detections " + q(p.det) + " --out " + q(out))
            .code == 1);  // malformed manifest content
}

TEST_CASE("flags override the config file, which overrides defaults") {
  const auto& p = shared();
  const fs::path cfg = p.root / "run.toml";
  {
    std::ofstream f(cfg);
    f << "seed = 5\nworkers = 1\n[detect]\nthreshold = 0.3\nstride = 4\n[phantom]\ncases = 2\npatients = 1\n"
         "width = 64\nheight = 64\nmax_lesions = 1\nmax_lesion_radius = 6\n";
  }
  const fs::path out = p.root / "prec";
  REQUIRE(run("phantom --config " + q(cfg) + " --out " + q(out) + " --seed 9 --threshold 0.7").code == 0);
  pipeline::RunConfig echoed;
  echoed.load_file(out / "effective_config.toml");
  CHECK(echoed.seed == 9);                   // flag beats file
  CHECK(echoed.detect.threshold == 0.7);     // flag beats file
  CHECK(echoed.detect.stride == 4);          // file beats default
  CHECK(echoed.phantom_cases == 2);
  CHECK(echoed.train.epochs == pipeline::RunConfig{}.train.epochs);  // default

  // the echoed config alone reproduces the run
  const fs::path again = p.root / "prec_again";
  REQUIRE(run("phantom --config " + q(out / "effective_config.toml") + " --out " + q(again)).code == 0);
  CHECK(slurp(out / "manifest.json") == slurp(again / "manifest.json"));
  CHECK(slurp(out / "case_000_image.tnsr") == slurp(again / "case_000_image.tnsr"));
}
