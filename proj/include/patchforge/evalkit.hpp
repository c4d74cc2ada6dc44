#pragma once

// Lesion-level matching, TPR / false positives per liver, size
// stratification, patient-level folds and threshold sweeps.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchforge/detector.hpp"
#include "patchforge/patchlab.hpp"

namespace patchforge::eval {

inline constexpr double kPixelSpacingMm = 0.71;

/// Published clinical figures for the parallel multi-class system, kept for
/// reference only; desk-scale phantom runs are not expected to match them.
struct ReferenceResult {
  const char* label;
  double tpr_percent;
  double fpc;
};
inline constexpr ReferenceResult kReferenceAllSizes43 = {"43-liver set, all sizes", 98.4, 1.0};
inline constexpr ReferenceResult kReferenceAllSizes = {"2-fold set, all sizes", 85.9, 1.9};
inline constexpr ReferenceResult kReferenceOver10mm = {"2-fold set, lesions > 10 mm", 93.0, 1.5};

/// 2 * sqrt(area / pi) * spacing.
double equivalent_diameter_mm(std::size_t area_px, double spacing_mm = kPixelSpacingMm);

struct CaseMatch {
  std::string case_id;
  std::string patient_id;
  std::vector<std::int64_t> lesion_hit_by;     // first intersecting component, or -1
  std::vector<double> lesion_diameter_mm;
  std::vector<std::uint8_t> component_is_tp;   // per detection component
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
};

/// A lesion is a TP if any component overlaps it; a component overlapping
/// no lesion is one FP. Throws DimensionError on size mismatch.
CaseMatch match_lesions(const detect::DetectionMap& detection, const patches::CaseRecord& c);

struct Totals {
  std::size_t cases = 0;
  std::size_t lesions = 0;
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  double tpr = 0.0;  // tp / lesions (0 when there are no lesions)
  double fpc = 0.0;  // fp / cases
};

struct DetectionReport {
  std::vector<CaseMatch> cases;
  Totals overall;
  /// Present when a size cutoff was requested: lesions with equivalent
  /// diameter <= cutoff are left out of TP/FN; FP counts are unchanged.
  std::optional<double> cutoff_mm;
  std::optional<Totals> stratified;

  std::string to_json() const;
  /// One row per case plus a final "all" row (and "stratified" if present).
  std::string to_csv() const;
};

DetectionReport aggregate(std::span<const CaseMatch> matches, std::optional<double> min_lesion_diameter_mm = {});

struct FoldPlan {
  int k = 0;
  std::map<std::string, int> fold_of;  // patient id -> fold
  std::vector<std::vector<std::string>> folds;
};

/// Seeded random partition of the distinct patient ids into k folds whose
/// sizes differ by at most one.
FoldPlan make_folds(std::span<const std::string> patients, int k, std::uint64_t seed);

struct SweepPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpc = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
};

/// Aggregate metrics of threshold_map(map, t, min_area) for each t.
std::vector<SweepPoint> threshold_sweep(std::span<const detect::ProbabilityMap> maps,
                                        std::span<const patches::CaseRecord> cases, std::span<const double> thresholds,
                                        std::size_t min_area_px = 0);

/// Highest TPR among points with FPC <= max_fpc (ties go to the lower FPC,
/// then the lower threshold). Empty when no point qualifies.
std::optional<SweepPoint> best_operating_point(std::span<const SweepPoint> sweep, double max_fpc);

std::string sweep_to_csv(std::span<const SweepPoint> sweep);

}  // namespace patchforge::eval
