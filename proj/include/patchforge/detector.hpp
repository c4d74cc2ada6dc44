#pragma once

// Sliding-window lesion probability maps, thresholding into connected
// components, and the two-stage hierarchical variant.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "patchforge/network.hpp"
#include "patchforge/patchlab.hpp"

namespace patchforge::detect {

struct FusedProbability {
  double lesion = 0.0;
  double non_lesion = 0.0;
};

/// Tolerance on the sum of a probability vector.
inline constexpr double kSimplexTolerance = 1e-5;

/// Lesion probability (entry 0) and the summed probability of every other
/// class. Throws DomainError unless `p` is a probability vector.
FusedProbability fuse_non_lesion(std::span<const double> p);

struct ProbabilityMap {
  Tensor lesion_prob;         // {H, W}, 0 where not evaluated
  patches::Mask evaluated;    // pixels that carry a probability

  std::size_t height() const { return evaluated.height; }
  std::size_t width() const { return evaluated.width; }
};

struct Component {
  std::vector<std::uint32_t> pixels;  // flat indices y * W + x, ascending
  std::uint32_t min_x = 0, min_y = 0, max_x = 0, max_y = 0;
  std::size_t area() const { return pixels.size(); }
};

struct DetectionMap {
  patches::Mask binary;
  std::vector<Component> components;  // ordered by first pixel in raster order
};

/// 8-connected components of the set bits of `mask`.
std::vector<Component> connected_components(const patches::Mask& mask);

/// Rebuilds `binary` from components of at least `min_area` pixels.
DetectionMap make_detection(const patches::Mask& mask, std::size_t min_area = 0);

/// Scores every pixel of `region` on the `stride` lattice anchored at the
/// region's bounding-box corner; the remaining region pixels copy their
/// nearest scored pixel (ties resolved in raster order). `c` must already be
/// intensity-normalized; `intensity_mean` is subtracted from each patch.
ProbabilityMap infer_region(const net::Network& network, const patches::CaseRecord& c, const patches::Mask& region,
                            double intensity_mean, int stride = 1, int workers = 1);

/// infer_region over the whole liver.
ProbabilityMap infer_map(const net::Network& network, const patches::CaseRecord& c, double intensity_mean,
                         int stride = 1, int workers = 1);

/// Pixels with lesion_prob > t, grouped into 8-connected components;
/// components smaller than min_area_px are dropped.
DetectionMap threshold_map(const ProbabilityMap& map, double t = 0.5, std::size_t min_area_px = 0);

struct HierarchicalResult {
  ProbabilityMap stage1;
  ProbabilityMap stage2;  // evaluated on the stage-1 candidate pixels only
  DetectionMap detection;
};

/// Stage 1 proposes components at threshold t1; stage 2 re-scores their
/// pixels and keeps those above t2; components are then recomputed.
HierarchicalResult hierarchical_detect(const net::Network& stage1, const net::Network& stage2,
                                       const patches::CaseRecord& c, double intensity_mean, double t1, double t2,
                                       int stride = 1, int workers = 1);

// --- files ----------------------------------------------------------------

/// TNSR {H, W, 2}: channel 0 lesion probability, channel 1 evaluated flag.
void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& map);
ProbabilityMap load_probability_map(const std::filesystem::path& path);

/// TNSR {H, W} of component ids (0 = background, k + 1 = component k).
void save_detection_map(const std::filesystem::path& path, const DetectionMap& detection);
DetectionMap load_detection_map(const std::filesystem::path& path);

/// Binary PPM of the case image (liver mean mapped to mid-gray) with
/// components that hit a lesion in green, other components in red and
/// missed lesions in blue.
void write_overlay_ppm(const std::filesystem::path& path, const patches::CaseRecord& c, const DetectionMap& detection);

}  // namespace patchforge::detect
