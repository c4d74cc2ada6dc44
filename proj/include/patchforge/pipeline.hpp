#pragma once

// Run configuration and end-to-end stages shared by the command-line tool,
// the Python module and the acceptance suite.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "patchforge/detector.hpp"
#include "patchforge/evalkit.hpp"
#include "patchforge/network.hpp"
#include "patchforge/patchlab.hpp"
#include "patchforge/phantom.hpp"
#include "patchforge/trainer.hpp"

namespace patchforge::pipeline {

enum class ModelKind { MultiClass, Binary, Hierarchical };
std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct ExtractConfig {
  int step = 2;
  std::size_t target_per_class = 140000;
};

struct DetectConfig {
  double threshold = 0.5;
  double stage2_threshold = 0.5;
  int stride = 1;
  std::size_t min_area = 0;
};

struct EvalConfig {
  std::optional<double> cutoff_mm;
  int folds = 3;
  double sweep_start = 0.0;
  double sweep_stop = 1.0;
  int sweep_steps = 21;
  double max_fpc = 2.0;  // budget for the best operating point

  std::vector<double> sweep_thresholds() const;
};

struct RunConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  std::filesystem::path out_dir = "patchforge_out";
  ModelKind model = ModelKind::MultiClass;

  phantom::PhantomConfig phantom;
  std::size_t phantom_cases = 8;
  std::size_t phantom_patients = 4;

  ExtractConfig extract;
  train::TrainConfig train;  // train.seed and train.workers are derived, not read
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only
  DetectConfig detect;
  EvalConfig eval;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  /// Applies one "section.key = value" assignment (top-level keys have no
  /// section). Throws ConfigError for unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  /// Parses a TOML-style file: "[section]" headers, "key = value" lines,
  /// '#' comments, optional double quotes around strings.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "<text>");

  /// The fully resolved configuration in the same format; feeding it back
  /// through load_text reproduces this config.
  std::string to_text() const;

  /// Every settable key with its documentation, in file order.
  static std::vector<std::pair<std::string, std::string>> documented_keys();

  /// Seed of a named stage ("phantom", "extraction", "init", "shuffle"),
  /// optionally specialised per fold.
  std::uint64_t stage_seed(const std::string& stage, int fold = -1) const;
};

using Logger = std::function<void(const std::string&)>;

// --- stages ---------------------------------------------------------------

struct ExtractResult {
  std::vector<patches::PatchSample> samples;  // labels already mapped to the scheme
  double intensity_mean = 0.0;
  patches::BalanceResult balance;
};

/// Candidates, balancing and patch extraction from training cases.
/// `scheme` selects the label mapping; Binary uses the merged normal pool.
ExtractResult extract_training_set(std::span<const patches::CaseRecord> cases, const RunConfig& config,
                                   patches::LabelScheme scheme, std::uint64_t seed, const Logger& log = {});

/// Network built from `init_seed` and trained on `samples`.
net::Network train_network(const net::NetworkSpec& spec, std::span<const patches::PatchSample> samples,
                           double intensity_mean, const RunConfig& config, std::uint64_t init_seed,
                           std::uint64_t shuffle_seed, train::TrainLog* log_out = nullptr,
                           const train::EpochCallback& on_epoch = {}, const Logger& log = {});

/// One or two trained networks, depending on the model kind.
struct TrainedModel {
  ModelKind kind = ModelKind::MultiClass;
  net::Network primary;  // multi-class, binary, or hierarchical stage 1
  net::Network stage2;   // hierarchical only
  std::vector<train::TrainLog> logs;
  double intensity_mean() const { return primary.intensity_mean; }
};

TrainedModel train_model(std::span<const patches::CaseRecord> train_cases, const RunConfig& config, int fold = -1,
                         const Logger& log = {});

struct CaseDetection {
  detect::ProbabilityMap map;  // final-stage map
  detect::DetectionMap detection;
};

/// Normalizes the case to the model's intensity mean, then maps and
/// thresholds it.
CaseDetection detect_case(const TrainedModel& model, const patches::CaseRecord& c, const RunConfig& config);

struct XvalResult {
  eval::FoldPlan plan;
  std::vector<int> case_fold;                 // per input case
  std::vector<detect::ProbabilityMap> maps;   // per input case
  eval::DetectionReport report;               // at config.detect.threshold
  std::vector<eval::SweepPoint> sweep;
  std::optional<eval::SweepPoint> best;       // within eval.max_fpc
};

/// Patient-level cross-validation: folds come from the cases' fold fields
/// when all are set, otherwise from make_folds(eval.folds).
XvalResult cross_validate(std::span<const patches::CaseRecord> cases, const RunConfig& config, const Logger& log = {});

/// JSON summary of an xval result without timing fields.
std::string xval_summary_json(const XvalResult& result, const RunConfig& config);

}  // namespace patchforge::pipeline
