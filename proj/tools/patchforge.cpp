// patchforge command-line tool.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "patchforge/errors.hpp"
#include "patchforge/pipeline.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace patchforge;
using pipeline::ModelKind;
using pipeline::RunConfig;

namespace {

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<double> threshold;
  std::optional<std::string> out;
  std::optional<int> checkpoint_every;
  std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config_path, "TOML-style run configuration");
  cmd->add_option("--seed", o.seed, "global seed");
  cmd->add_option("--workers", o.workers, "worker threads");
  cmd->add_option("--threshold", o.threshold, "lesion probability threshold");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--set", o.overrides, "override any config key, e.g. --set train.epochs=2")->take_all();
}

// defaults < file < flags
RunConfig resolve(const CommonOptions& o) {
  RunConfig c;
  if (!o.config_path.empty()) c.load_file(o.config_path);
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.workers) c.workers = *o.workers;
  if (o.threshold) c.detect.threshold = *o.threshold;
  if (o.out) c.out_dir = *o.out;
  if (o.checkpoint_every) c.checkpoint_every = *o.checkpoint_every;
  c.validate();
  return c;
}

void log_line(const std::string& cmd, const std::string& msg) { std::cerr << "[" << cmd << "] " << msg << std::endl; }

pipeline::Logger logger(const std::string& cmd) {
  return [cmd](const std::string& m) { log_line(cmd, m); };
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + p.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << "\n";
  if (!out) throw IoError("write failed: " + p.string());
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

// Every command starts by echoing the effective configuration.
fs::path prepare(const RunConfig& c, const std::string& cmd) {
  ensure_dir(c.out_dir);
  write_text(c.out_dir / "effective_config.toml", "# effective configuration for `patchforge " + cmd + "`\n" + c.to_text());
  return c.out_dir;
}

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError(what + " path is required");
  if (!fs::exists(p)) throw IoError(what + " not found: " + p.string());
}

net::Network load_model(const fs::path& p, std::size_t classes, const std::string& role) {
  require_file(p, role + " checkpoint");
  net::Network n = net::load_checkpoint(p);
  if (n.class_count() != classes) {
    throw CheckpointError(p.string() + ": " + role + " needs a " + std::to_string(classes) + "-class network, checkpoint has " +
                          std::to_string(n.class_count()) + " classes");
  }
  return n;
}

// --- commands -------------------------------------------------------------

int cmd_phantom(const RunConfig& c) {
  const auto out = prepare(c, "phantom");
  const auto entries =
      phantom::generate_dataset(c.phantom, c.phantom_cases, c.phantom_patients, c.stage_seed("phantom"), out);
  std::size_t lesions = 0;
  for (const auto& e : entries) lesions += e.lesion_masks.size();
  json s{{"cases", entries.size()},
         {"patients", c.phantom_patients},
         {"lesions", lesions},
         {"manifest", "manifest.json"}};
  write_text(out / "phantom_summary.json", s.dump(2));
  log_line("phantom", "wrote " + std::to_string(entries.size()) + " cases with " + std::to_string(lesions) +
                          " lesions to " + out.string());
  return 0;
}

struct ExtractJob {
  std::string suffix;
  patches::LabelScheme scheme;
  std::string stage;
};

std::vector<ExtractJob> extract_jobs(ModelKind kind) {
  switch (kind) {
    case ModelKind::MultiClass: return {{"", patches::LabelScheme::MultiClass, ""}};
    case ModelKind::Binary: return {{"", patches::LabelScheme::Binary, ""}};
    case ModelKind::Hierarchical:
      return {{"", patches::LabelScheme::Binary, ""}, {"_stage2", patches::LabelScheme::BoundaryOnly, "-stage2"}};
  }
  return {};
}

int cmd_extract(const RunConfig& c, const fs::path& manifest) {
  require_file(manifest, "manifest");
  const auto out = prepare(c, "extract");
  const auto cases = patches::load_cases(manifest);
  json summary = json::object();
  for (const auto& job : extract_jobs(c.model)) {
    const auto r = pipeline::extract_training_set(cases, c, job.scheme, c.stage_seed("extraction" + job.stage),
                                                  logger("extract"));
    const fs::path file = out / ("patches" + job.suffix + ".pfpr");
    patches::save_patch_records(file, r.samples);
    summary["patches" + job.suffix] = {{"file", file.filename().string()},
                                       {"samples", r.samples.size()},
                                       {"available", r.balance.available},
                                       {"chosen", r.balance.chosen},
                                       {"warnings", r.balance.warnings}};
    summary["intensity_mean"] = r.intensity_mean;
  }
  summary["model"] = to_string(c.model);
  summary["cases"] = cases.size();
  write_text(out / "extract_summary.json", summary.dump(2));
  return 0;
}

int cmd_train(const RunConfig& c, const fs::path& patches_path, const fs::path& stage2_path) {
  require_file(patches_path, "patch file");
  const fs::path summary_path = patches_path.parent_path() / "extract_summary.json";
  require_file(summary_path, "extraction summary (for the intensity mean)");
  const double mean = read_json(summary_path).at("intensity_mean").get<double>();
  const auto out = prepare(c, "train");

  struct Stage {
    fs::path patches;
    std::string suffix;
    net::NetworkSpec spec;
  };
  std::vector<Stage> stages;
  switch (c.model) {
    case ModelKind::MultiClass: stages.push_back({patches_path, "", net::parallel_multiclass_spec()}); break;
    case ModelKind::Binary: stages.push_back({patches_path, "", net::binary_spec()}); break;
    case ModelKind::Hierarchical: {
      const fs::path p2 = stage2_path.empty() ? patches_path.parent_path() / "patches_stage2.pfpr" : stage2_path;
      require_file(p2, "stage-2 patch file");
      stages.push_back({patches_path, "", net::binary_spec()});
      stages.push_back({p2, "_stage2", net::binary_spec()});
      break;
    }
  }
  json summary{{"model", to_string(c.model)}, {"intensity_mean", mean}};
  for (const auto& st : stages) {
    const auto samples = patches::load_patch_records(st.patches);
    const std::string tag = st.suffix.empty() ? "" : "-stage2";
    fs::path ckpt_dir = out / ("checkpoints" + st.suffix);
    auto on_epoch = [&](const train::EpochStats& e, const net::Network& n) {
      if (c.checkpoint_every > 0 && e.epoch % c.checkpoint_every == 0) {
        ensure_dir(ckpt_dir);
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.pfck", e.epoch);
        net::save_checkpoint(n, ckpt_dir / name);
      }
    };
    train::TrainLog tlog;
    const auto network = pipeline::train_network(st.spec, samples, mean, c, c.stage_seed("init" + tag),
                                                 c.stage_seed("shuffle" + tag), &tlog, on_epoch, logger("train"));
    net::save_checkpoint(network, out / ("model" + st.suffix + ".pfck"));
    tlog.save_csv(out / ("train_log" + st.suffix + ".csv"));
    const auto& last = tlog.epochs.back();
    summary["model" + st.suffix] = {{"checkpoint", "model" + st.suffix + ".pfck"},
                                    {"samples", samples.size()},
                                    {"epochs", tlog.epochs.size()},
                                    {"final_loss", last.mean_loss},
                                    {"final_accuracy", last.accuracy}};
  }
  write_text(out / "train_summary.json", summary.dump(2));
  return 0;
}

pipeline::TrainedModel load_trained(const RunConfig& c, const fs::path& model, const fs::path& stage2) {
  pipeline::TrainedModel m;
  m.kind = c.model;
  switch (c.model) {
    case ModelKind::MultiClass: m.primary = load_model(model, 3, "multi-class model"); break;
    case ModelKind::Binary: m.primary = load_model(model, 2, "binary model"); break;
    case ModelKind::Hierarchical: {
      m.primary = load_model(model, 2, "hierarchical stage 1");
      const fs::path p2 = stage2.empty() ? model.parent_path() / "model_stage2.pfck" : stage2;
      m.stage2 = load_model(p2, 2, "hierarchical stage 2");
      break;
    }
  }
  return m;
}

int cmd_detect(const RunConfig& c, const fs::path& manifest, const fs::path& model_path, const fs::path& stage2) {
  require_file(manifest, "manifest");
  const auto model = load_trained(c, model_path, stage2);
  const auto out = prepare(c, "detect");
  const auto cases = patches::load_cases(manifest);
  json per_case = json::array();
  for (const auto& cs : cases) {
    const auto d = pipeline::detect_case(model, cs, c);
    detect::save_probability_map(out / (cs.case_id + "_prob.tnsr"), d.map);
    detect::save_detection_map(out / (cs.case_id + "_detection.tnsr"), d.detection);
    detect::write_overlay_ppm(out / (cs.case_id + "_overlay.ppm"), cs, d.detection);
    per_case.push_back({{"case_id", cs.case_id}, {"components", d.detection.components.size()}});
    log_line("detect", cs.case_id + ": " + std::to_string(d.detection.components.size()) + " components");
  }
  json s{{"model", to_string(c.model)}, {"threshold", c.detect.threshold}, {"cases", per_case}};
  write_text(out / "detect_summary.json", s.dump(2));
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& manifest, const fs::path& detections) {
  require_file(manifest, "manifest");
  const auto cases = patches::load_cases(manifest);
  std::vector<eval::CaseMatch> matches;
  for (const auto& cs : cases) {
    const fs::path p = detections / (cs.case_id + "_detection.tnsr");
    require_file(p, "detection map");
    matches.push_back(eval::match_lesions(detect::load_detection_map(p), cs));
  }
  const auto out = prepare(c, "eval");
  const auto report = eval::aggregate(matches, c.eval.cutoff_mm);
  write_text(out / "report.json", report.to_json());
  write_text(out / "report.csv", report.to_csv());
  std::ostringstream msg;
  msg << "TPR " << report.overall.tpr << ", FPC " << report.overall.fpc << " over " << report.overall.cases << " cases";
  if (report.stratified) msg << "; > " << *report.cutoff_mm << " mm: TPR " << report.stratified->tpr << ", FPC " << report.stratified->fpc;
  log_line("eval", msg.str());
  return 0;
}

int cmd_xval(const RunConfig& c, const fs::path& manifest) {
  require_file(manifest, "manifest");
  const auto cases = patches::load_cases(manifest);
  const auto out = prepare(c, "xval");
  const auto r = pipeline::cross_validate(cases, c, logger("xval"));
  write_text(out / "xval_report.json", r.report.to_json());
  write_text(out / "xval_report.csv", r.report.to_csv());
  write_text(out / "xval_summary.json", pipeline::xval_summary_json(r, c));
  write_text(out / "sweep.csv", eval::sweep_to_csv(r.sweep));
  std::ostringstream msg;
  msg << "pooled TPR " << r.report.overall.tpr << ", FPC " << r.report.overall.fpc << " at t = " << c.detect.threshold;
  if (r.best) msg << "; best within FPC <= " << c.eval.max_fpc << ": t = " << r.best->threshold << ", TPR " << r.best->tpr << ", FPC " << r.best->fpc;
  log_line("xval", msg.str());
  return 0;
}

int cmd_sweep(const RunConfig& c, const fs::path& manifest, const fs::path& maps_dir) {
  require_file(manifest, "manifest");
  const auto cases = patches::load_cases(manifest);
  std::vector<detect::ProbabilityMap> maps;
  for (const auto& cs : cases) {
    const fs::path p = maps_dir / (cs.case_id + "_prob.tnsr");
    require_file(p, "probability map");
    maps.push_back(detect::load_probability_map(p));
  }
  const auto out = prepare(c, "sweep");
  const auto sweep = eval::threshold_sweep(maps, cases, c.eval.sweep_thresholds(), c.detect.min_area);
  write_text(out / "sweep.csv", eval::sweep_to_csv(sweep));
  const auto best = eval::best_operating_point(sweep, c.eval.max_fpc);
  json s{{"points", sweep.size()}, {"max_fpc", c.eval.max_fpc}};
  s["best_operating_point"] = best ? json{{"t", best->threshold}, {"tpr", best->tpr}, {"fpc", best->fpc}} : json(nullptr);
  write_text(out / "sweep_summary.json", s.dump(2));
  return 0;
}

int cmd_info(const fs::path& model_path) {
  net::Network n = model_path.empty() ? net::build_parallel_multiclass(0) : net::load_checkpoint(model_path);
  const auto& spec = n.spec();
  json j{{"source", model_path.empty() ? std::string("default multi-class network") : model_path.string()},
         {"classes", spec.class_names},
         {"total_parameters", net::param_count(spec)},
         {"branch_parameters", net::branch_param_count(spec)},
         {"head_parameters", net::head_param_count(spec)},
         {"intensity_mean", n.intensity_mean}};
  std::cout << j.dump(2) << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchforge: dual field-of-view patch CNN for liver lesion detection"};
  app.require_subcommand(1);
  CommonOptions opts;
  std::string manifest, model, stage2, patches_path, stage2_patches, detections, maps;

  auto* phantom_cmd = app.add_subcommand("phantom", "generate a synthetic dataset (manifest + TNSR files)");
  auto* extract_cmd = app.add_subcommand("extract", "balanced training patches from a manifest");
  auto* train_cmd = app.add_subcommand("train", "train a network on extracted patches");
  auto* detect_cmd = app.add_subcommand("detect", "probability and detection maps for every case");
  auto* eval_cmd = app.add_subcommand("eval", "lesion-level TPR / FPC from detection maps");
  auto* xval_cmd = app.add_subcommand("xval", "patient-level cross-validation: train, detect, evaluate per fold");
  auto* sweep_cmd = app.add_subcommand("sweep", "TPR / FPC over a threshold range from probability maps");
  auto* info_cmd = app.add_subcommand("info", "parameter counts of a checkpoint (or the default network)");
  for (auto* cmd : {phantom_cmd, extract_cmd, train_cmd, detect_cmd, eval_cmd, xval_cmd, sweep_cmd, info_cmd}) {
    add_common(cmd, opts);
  }
  for (auto* cmd : {extract_cmd, detect_cmd, eval_cmd, xval_cmd, sweep_cmd}) {
    cmd->add_option("--manifest", manifest, "dataset manifest (JSON)")->required();
  }
  train_cmd->add_option("--patches", patches_path, "patch file written by extract")->required();
  train_cmd->add_option("--checkpoint-every", opts.checkpoint_every, "save a checkpoint every N epochs");
  train_cmd->add_option("--stage2-patches", stage2_patches, "hierarchical stage-2 patch file");
  detect_cmd->add_option("--model", model, "checkpoint")->required();
  detect_cmd->add_option("--stage2", stage2, "hierarchical stage-2 checkpoint");
  info_cmd->add_option("--model", model, "checkpoint (default: freshly built multi-class network)");
  eval_cmd->add_option("--detections", detections, "directory with <case>_detection.tnsr files")->required();
  sweep_cmd->add_option("--maps", maps, "directory with <case>_prob.tnsr files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "info") return cmd_info(model);
    const RunConfig c = resolve(opts);
    if (name == "phantom") return cmd_phantom(c);
    if (name == "extract") return cmd_extract(c, manifest);
    if (name == "train") return cmd_train(c, patches_path, stage2_patches);
    if (name == "detect") return cmd_detect(c, manifest, model, stage2);
    if (name == "eval") return cmd_eval(c, manifest, detections);
    if (name == "xval") return cmd_xval(c, manifest);
    if (name == "sweep") return cmd_sweep(c, manifest, maps);
  } catch (const IoError& e) {
    log_line(name, std::string("I/O error: ") + e.what());
    return 2;
  } catch (const FormatError& e) {
    log_line(name, std::string("format error: ") + e.what());
    return 2;
  } catch (const Error& e) {
    log_line(name, std::string("error: ") + e.what());
    return 1;
  }
  return 1;
}
