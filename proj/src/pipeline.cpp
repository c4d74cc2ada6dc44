#include "patchforge/pipeline.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "patchforge/errors.hpp"
#include "patchforge/parallel.hpp"
#include "patchforge/seeding.hpp"

namespace patchforge::pipeline {

using json = nlohmann::json;
using patches::CaseRecord;
using patches::LabelScheme;

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::MultiClass: return "multiclass";
    case ModelKind::Binary: return "binary";
    case ModelKind::Hierarchical: return "hierarchical";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "multiclass") return ModelKind::MultiClass;
  if (name == "binary") return ModelKind::Binary;
  if (name == "hierarchical") return ModelKind::Hierarchical;
  throw ConfigError("model: unknown model \"" + name + "\" (expected multiclass, binary or hierarchical)");
}

std::vector<double> EvalConfig::sweep_thresholds() const {
  std::vector<double> ts;
  if (sweep_steps == 1) return {sweep_start};
  for (int i = 0; i < sweep_steps; ++i) {
    ts.push_back(sweep_start + (sweep_stop - sweep_start) * static_cast<double>(i) / (sweep_steps - 1));
  }
  return ts;
}

// --- configuration --------------------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";  // keep it visibly real
  return s;
}

template <class I>
I parse_int(const std::string& key, const std::string& v) {
  I out{};
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw ConfigError(key + ": expected an integer, got \"" + v + "\"");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size() || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a finite number, got \"" + v + "\"");
  }
  return out;
}

struct Field {
  const char* key;
  const char* doc;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define PF_INT(K, M, DOC)                                                                                 \
  Field {                                                                                                 \
    K, DOC, [](RunConfig& c, const std::string& v) { c.M = parse_int<decltype(c.M)>(K, v); },            \
        [](const RunConfig& c) { return std::to_string(c.M); }                                           \
  }
#define PF_REAL(K, M, DOC)                                                                                \
  Field {                                                                                                 \
    K, DOC, [](RunConfig& c, const std::string& v) { c.M = parse_double(K, v); },                         \
        [](const RunConfig& c) { return format_double(c.M); }                                            \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PF_INT("seed", seed, "global seed; every stage derives its own seed from it"),
      PF_INT("workers", workers, "worker threads; outputs do not depend on it"),
      Field{"out", "output directory",
            [](RunConfig& c, const std::string& v) { c.out_dir = v; },
            [](const RunConfig& c) { return "\"" + c.out_dir.string() + "\""; }},
      Field{"model", "multiclass | binary | hierarchical",
            [](RunConfig& c, const std::string& v) { c.model = model_kind_from_string(v); },
            [](const RunConfig& c) { return "\"" + to_string(c.model) + "\""; }},

      PF_INT("phantom.cases", phantom_cases, "number of generated cases"),
      PF_INT("phantom.patients", phantom_patients, "patients; case i belongs to patient i mod patients"),
      PF_INT("phantom.width", phantom.width, "image width in px"),
      PF_INT("phantom.height", phantom.height, "image height in px"),
      PF_REAL("phantom.liver_center_x", phantom.liver_center_x, "liver centre, fraction of width"),
      PF_REAL("phantom.liver_center_y", phantom.liver_center_y, "liver centre, fraction of height"),
      PF_REAL("phantom.liver_axis_x", phantom.liver_axis_x, "liver half-axis, fraction of width"),
      PF_REAL("phantom.liver_axis_y", phantom.liver_axis_y, "liver half-axis, fraction of height"),
      PF_REAL("phantom.liver_center_jitter", phantom.liver_center_jitter, "random centre offset, fraction of size"),
      PF_REAL("phantom.liver_roughness", phantom.liver_roughness, "relative amplitude of the boundary perturbation"),
      PF_INT("phantom.liver_harmonics", phantom.liver_harmonics, "number of boundary harmonics"),
      PF_REAL("phantom.background_mean", phantom.background_mean, "intensity outside the liver"),
      PF_REAL("phantom.liver_mean", phantom.liver_mean, "parenchyma intensity"),
      PF_REAL("phantom.lesion_mean", phantom.lesion_mean, "lesion intensity (below liver_mean)"),
      PF_REAL("phantom.noise_std", phantom.noise_std, "Gaussian pixel noise"),
      PF_REAL("phantom.texture_amplitude", phantom.texture_amplitude, "smooth parenchyma texture amplitude"),
      PF_INT("phantom.min_lesions", phantom.min_lesions, "fewest lesions per case"),
      PF_INT("phantom.max_lesions", phantom.max_lesions, "most lesions per case"),
      PF_REAL("phantom.min_lesion_radius", phantom.min_lesion_radius, "px"),
      PF_REAL("phantom.max_lesion_radius", phantom.max_lesion_radius, "px"),
      PF_REAL("phantom.lesion_roughness", phantom.lesion_roughness, "relative radial perturbation of lesions"),
      PF_REAL("phantom.lesion_edge_width", phantom.lesion_edge_width, "px of intensity blending at lesion rims"),
      PF_INT("phantom.liver_margin", phantom.liver_margin, "min px between lesions and the liver edge"),
      PF_INT("phantom.lesion_gap", phantom.lesion_gap, "min px between lesions"),
      PF_INT("phantom.max_attempts", phantom.max_attempts, "placement attempts per lesion"),

      PF_INT("extract.step", extract.step, "candidate lattice step in px"),
      PF_INT("extract.target_per_class", extract.target_per_class, "balanced samples per class"),

      PF_INT("train.epochs", train.epochs, "passes over the training patches"),
      PF_INT("train.batch_size", train.batch_size, "mini-batch size"),
      PF_REAL("train.base_lr", train.base_lr, "learning rate before decay"),
      PF_REAL("train.lr_decay_factor", train.lr_decay_factor, "multiplier applied at each decay step"),
      PF_INT("train.decay_start_epoch", train.decay_start_epoch, "first epoch at the reduced rate"),
      PF_INT("train.decay_every", train.decay_every, "epochs between further decays"),
      PF_REAL("train.momentum", train.momentum, "SGD momentum"),
      PF_REAL("train.weight_decay", train.weight_decay, "L2 weight decay"),
      PF_INT("train.checkpoint_every", checkpoint_every, "epochs between checkpoints (0 = final only)"),

      PF_REAL("detect.threshold", detect.threshold, "lesion probability threshold (stage 1 when hierarchical)"),
      PF_REAL("detect.stage2_threshold", detect.stage2_threshold, "hierarchical stage-2 threshold"),
      PF_INT("detect.stride", detect.stride, "scoring stride; skipped pixels copy the nearest score"),
      PF_INT("detect.min_area", detect.min_area, "drop components smaller than this (px)"),

      Field{"eval.cutoff_mm", "size stratification: ignore lesions with equivalent diameter <= cutoff (none = off)",
            [](RunConfig& c, const std::string& v) {
              if (v == "none") {
                c.eval.cutoff_mm.reset();
              } else {
                c.eval.cutoff_mm = parse_double("eval.cutoff_mm", v);
              }
            },
            [](const RunConfig& c) { return c.eval.cutoff_mm ? format_double(*c.eval.cutoff_mm) : std::string("\"none\""); }},
      PF_INT("eval.folds", eval.folds, "cross-validation folds when the manifest assigns none"),
      PF_REAL("eval.sweep_start", eval.sweep_start, "first swept threshold"),
      PF_REAL("eval.sweep_stop", eval.sweep_stop, "last swept threshold"),
      PF_INT("eval.sweep_steps", eval.sweep_steps, "number of swept thresholds"),
      PF_REAL("eval.max_fpc", eval.max_fpc, "false positives per liver allowed at the best operating point"),
  };
  return table;
}

#undef PF_INT
#undef PF_REAL

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& raw) {
  std::string value = trim(raw);
  if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key \"" + key + "\"");
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    // strip comments outside quotes
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(line.substr(0, eq));
    try {
      set(section.empty() ? key : section + "." + key, line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  load_text(buf.str(), path.string());
}

std::string RunConfig::to_text() const {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    const std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    if (sec != section) {
      out << "\n[" << sec << "]\n";
      section = sec;
    }
    out << name << " = " << f.get(*this) << "\n";
  }
  return out.str();
}

std::vector<std::pair<std::string, std::string>> RunConfig::documented_keys() {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) out.emplace_back(f.key, f.doc);
  return out;
}

void RunConfig::validate() const {
  if (workers < 1) throw ConfigError("workers: must be >= 1");
  phantom.validate();
  if (phantom_patients < 1 || phantom_patients > phantom_cases) {
    throw ConfigError("phantom.patients: need 1 <= patients <= cases");
  }
  if (extract.step < 1) throw ConfigError("extract.step: must be >= 1");
  if (extract.target_per_class < 1) throw ConfigError("extract.target_per_class: must be >= 1");
  train.validate();
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every: must be >= 0");
  auto unit = [](const char* key, double v) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(std::string(key) + ": must lie in [0, 1]");
  };
  unit("detect.threshold", detect.threshold);
  unit("detect.stage2_threshold", detect.stage2_threshold);
  if (detect.stride < 1) throw ConfigError("detect.stride: must be >= 1");
  if (eval.cutoff_mm && *eval.cutoff_mm < 0) throw ConfigError("eval.cutoff_mm: must be >= 0");
  if (eval.folds < 2) throw ConfigError("eval.folds: must be >= 2");
  unit("eval.sweep_start", eval.sweep_start);
  unit("eval.sweep_stop", eval.sweep_stop);
  if (eval.sweep_stop < eval.sweep_start) throw ConfigError("eval.sweep_stop: must be >= eval.sweep_start");
  if (eval.sweep_steps < 1) throw ConfigError("eval.sweep_steps: must be >= 1");
  if (eval.max_fpc < 0) throw ConfigError("eval.max_fpc: must be >= 0");
}

std::uint64_t RunConfig::stage_seed(const std::string& stage, int fold) const {
  const std::uint64_t s = derive_seed(seed, stage);
  return fold < 0 ? s : derive_seed(s, static_cast<std::uint64_t>(fold));
}

// --- stages ---------------------------------------------------------------

ExtractResult extract_training_set(std::span<const CaseRecord> cases, const RunConfig& config, LabelScheme scheme,
                                   std::uint64_t seed, const Logger& log) {
  if (cases.empty()) throw DataError("extract: no training cases");
  ExtractResult r;
  r.intensity_mean = patches::compute_mean_intensity(cases);
  std::vector<std::vector<patches::Candidate>> per_case(cases.size());
  parallel_for(cases.size(), config.workers,
               [&](std::size_t i) { per_case[i] = patches::enumerate_candidates(cases[i], config.extract.step); });
  r.balance = patches::balance_classes(per_case, config.extract.target_per_class, seed, scheme == LabelScheme::Binary);
  std::vector<patches::SampleRef> refs;
  for (const auto& ref : r.balance.selected) {
    if (scheme == LabelScheme::BoundaryOnly && ref.candidate.label == patches::PatchClass::NormalInterior) continue;
    refs.push_back(ref);
  }
  if (log) {
    for (const auto& w : r.balance.warnings) {
      if (scheme == LabelScheme::BoundaryOnly && w.find("normal-interior") != std::string::npos) continue;
      log("warning: " + w);
    }
    log("extracting " + std::to_string(refs.size()) + " patches from " + std::to_string(cases.size()) +
        " cases (lesion " + std::to_string(r.balance.chosen[0]) + ", interior " + std::to_string(r.balance.chosen[1]) +
        ", boundary " + std::to_string(r.balance.chosen[2]) + ")");
  }
  const auto raw = patches::materialize(cases, refs, r.intensity_mean, config.workers);
  r.samples = patches::relabel(raw, scheme);
  return r;
}

net::Network train_network(const net::NetworkSpec& spec, std::span<const patches::PatchSample> samples,
                           double intensity_mean, const RunConfig& config, std::uint64_t init_seed,
                           std::uint64_t shuffle_seed, train::TrainLog* log_out, const train::EpochCallback& on_epoch,
                           const Logger& log) {
  net::Network network = net::Network::build(spec, init_seed);
  network.intensity_mean = intensity_mean;
  train::TrainConfig tc = config.train;
  tc.seed = shuffle_seed;
  tc.workers = config.workers;
  auto callback = [&](const train::EpochStats& e, const net::Network& n) {
    if (log) {
      std::ostringstream s;
      s << "epoch " << e.epoch << "/" << tc.epochs << " lr " << e.lr << " loss " << e.mean_loss << " acc "
        << e.accuracy << " (" << e.seconds << " s)";
      log(s.str());
    }
    if (on_epoch) on_epoch(e, n);
  };
  auto tlog = train::train(network, samples, tc, callback);
  if (log_out) *log_out = std::move(tlog);
  return network;
}

TrainedModel train_model(std::span<const CaseRecord> train_cases, const RunConfig& config, int fold,
                         const Logger& log) {
  TrainedModel m;
  m.kind = config.model;
  auto stage = [&](const std::string& suffix, LabelScheme scheme, const net::NetworkSpec& spec) {
    const auto ex = extract_training_set(train_cases, config, scheme, config.stage_seed("extraction" + suffix, fold), log);
    train::TrainLog tlog;
    auto network = train_network(spec, ex.samples, ex.intensity_mean, config, config.stage_seed("init" + suffix, fold),
                                 config.stage_seed("shuffle" + suffix, fold), &tlog, {}, log);
    m.logs.push_back(std::move(tlog));
    return network;
  };
  switch (config.model) {
    case ModelKind::MultiClass:
      m.primary = stage("", LabelScheme::MultiClass, net::parallel_multiclass_spec());
      break;
    case ModelKind::Binary:
      m.primary = stage("", LabelScheme::Binary, net::binary_spec());
      break;
    case ModelKind::Hierarchical:
      m.primary = stage("", LabelScheme::Binary, net::binary_spec());
      m.stage2 = stage("-stage2", LabelScheme::BoundaryOnly, net::binary_spec());
      break;
  }
  return m;
}

CaseDetection detect_case(const TrainedModel& model, const CaseRecord& c, const RunConfig& config) {
  const double mean = model.intensity_mean();
  const CaseRecord normalized = patches::normalize_test_case(c, mean);
  CaseDetection d;
  if (model.kind == ModelKind::Hierarchical) {
    auto r = detect::hierarchical_detect(model.primary, model.stage2, normalized, mean, config.detect.threshold,
                                         config.detect.stage2_threshold, config.detect.stride, config.workers);
    d.map = std::move(r.stage2);
    d.detection = detect::threshold_map(d.map, config.detect.stage2_threshold, config.detect.min_area);
  } else {
    d.map = detect::infer_map(model.primary, normalized, mean, config.detect.stride, config.workers);
    d.detection = detect::threshold_map(d.map, config.detect.threshold, config.detect.min_area);
  }
  return d;
}

XvalResult cross_validate(std::span<const CaseRecord> cases, const RunConfig& config, const Logger& log) {
  config.validate();
  if (cases.empty()) throw DataError("xval: no cases");
  XvalResult r;
  const bool preassigned = std::all_of(cases.begin(), cases.end(), [](const CaseRecord& c) { return c.fold >= 0; });
  if (preassigned) {
    int k = 0;
    for (const auto& c : cases) {
      const auto [it, inserted] = r.plan.fold_of.emplace(c.patient_id, c.fold);
      if (!inserted && it->second != c.fold) {
        throw ConfigError("xval: patient " + c.patient_id + " appears in folds " + std::to_string(it->second) +
                          " and " + std::to_string(c.fold));
      }
      k = std::max(k, c.fold + 1);
    }
    if (k < 2) throw ConfigError("xval: the manifest assigns fewer than 2 folds");
    r.plan.k = k;
    r.plan.folds.resize(static_cast<std::size_t>(k));
    for (const auto& [patient, f] : r.plan.fold_of) r.plan.folds[static_cast<std::size_t>(f)].push_back(patient);
  } else {
    std::vector<std::string> patients;
    for (const auto& c : cases) patients.push_back(c.patient_id);
    r.plan = eval::make_folds(patients, config.eval.folds, config.stage_seed("folds"));
  }
  for (const auto& c : cases) r.case_fold.push_back(r.plan.fold_of.at(c.patient_id));

  r.maps.resize(cases.size());
  std::vector<eval::CaseMatch> matches(cases.size());
  for (int f = 0; f < r.plan.k; ++f) {
    std::vector<CaseRecord> train_cases;
    std::vector<std::size_t> test;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      if (r.case_fold[i] == f) {
        test.push_back(i);
      } else {
        train_cases.push_back(cases[i]);
      }
    }
    if (test.empty()) continue;
    if (log) {
      log("fold " + std::to_string(f + 1) + "/" + std::to_string(r.plan.k) + ": training " + to_string(config.model) +
          " on " + std::to_string(train_cases.size()) + " cases, testing on " + std::to_string(test.size()));
    }
    const TrainedModel model = train_model(train_cases, config, f, log);
    for (std::size_t i : test) {
      auto d = detect_case(model, cases[i], config);
      matches[i] = eval::match_lesions(d.detection, cases[i]);
      r.maps[i] = std::move(d.map);
    }
  }
  r.report = eval::aggregate(matches, config.eval.cutoff_mm);
  const auto ts = config.eval.sweep_thresholds();
  r.sweep = eval::threshold_sweep(r.maps, cases, ts, config.detect.min_area);
  r.best = eval::best_operating_point(r.sweep, config.eval.max_fpc);
  return r;
}

std::string xval_summary_json(const XvalResult& result, const RunConfig& config) {
  json j;
  j["model"] = to_string(config.model);
  j["seed"] = config.seed;
  j["threshold"] = config.detect.threshold;
  json folds = json::array();
  for (const auto& f : result.plan.folds) folds.push_back(f);
  j["folds"] = folds;
  j["report"] = json::parse(result.report.to_json());
  json sweep = json::array();
  for (const auto& p : result.sweep) sweep.push_back({{"t", p.threshold}, {"tpr", p.tpr}, {"fpc", p.fpc}});
  j["sweep"] = sweep;
  if (result.best) {
    j["best_operating_point"] = {{"t", result.best->threshold}, {"tpr", result.best->tpr}, {"fpc", result.best->fpc},
                                 {"max_fpc", config.eval.max_fpc}};
  } else {
    j["best_operating_point"] = nullptr;
  }
  return j.dump(2);
}

}  // namespace patchforge::pipeline
