#include "patchforge/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "patchforge/errors.hpp"
#include "patchforge/parallel.hpp"

namespace patchforge::detect {

using patches::CaseRecord;
using patches::Mask;

FusedProbability fuse_non_lesion(std::span<const double> p) {
  if (p.size() < 2) throw DomainError("fuse_non_lesion: need at least two class probabilities");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("fuse_non_lesion: probability outside [0, 1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSimplexTolerance) {
    throw DomainError("fuse_non_lesion: probabilities sum to " + std::to_string(sum) + ", not 1");
  }
  FusedProbability f;
  f.lesion = p[0];
  for (std::size_t k = 1; k < p.size(); ++k) f.non_lesion += p[k];
  f.non_lesion = std::min(f.non_lesion, 1.0);  // rounding can push the sum past 1
  return f;
}

namespace {

// Union-find over pixel indices with path halving.
struct DisjointSet {
  std::vector<std::uint32_t> parent;
  explicit DisjointSet(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;  // root is always the smallest index
  }
};

}  // namespace

std::vector<Component> connected_components(const Mask& mask) {
  const std::size_t h = mask.height, w = mask.width;
  DisjointSet sets(h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!mask.at(y, x)) continue;
      const auto i = static_cast<std::uint32_t>(y * w + x);
      // already visited neighbours: W, NW, N, NE
      if (x > 0 && mask.at(y, x - 1)) sets.unite(i, i - 1);
      if (y > 0) {
        const auto up = static_cast<std::uint32_t>(i - w);
        if (x > 0 && mask.at(y - 1, x - 1)) sets.unite(i, up - 1);
        if (mask.at(y - 1, x)) sets.unite(i, up);
        if (x + 1 < w && mask.at(y - 1, x + 1)) sets.unite(i, up + 1);
      }
    }
  std::vector<Component> out;
  std::vector<std::int64_t> slot(h * w, -1);
  for (std::size_t i = 0; i < h * w; ++i) {
    if (!mask.bits[i]) continue;
    const std::uint32_t root = sets.find(static_cast<std::uint32_t>(i));
    if (slot[root] < 0) {
      slot[root] = static_cast<std::int64_t>(out.size());
      Component c;
      c.min_x = c.max_x = static_cast<std::uint32_t>(i % w);
      c.min_y = c.max_y = static_cast<std::uint32_t>(i / w);
      out.push_back(std::move(c));
    }
    Component& c = out[static_cast<std::size_t>(slot[root])];
    const auto x = static_cast<std::uint32_t>(i % w), y = static_cast<std::uint32_t>(i / w);
    c.pixels.push_back(static_cast<std::uint32_t>(i));
    c.min_x = std::min(c.min_x, x);
    c.max_x = std::max(c.max_x, x);
    c.min_y = std::min(c.min_y, y);
    c.max_y = std::max(c.max_y, y);
  }
  return out;
}

DetectionMap make_detection(const Mask& mask, std::size_t min_area) {
  DetectionMap d;
  d.binary = Mask(mask.height, mask.width);
  for (auto& c : connected_components(mask)) {
    if (c.area() < min_area) continue;
    for (auto i : c.pixels) d.binary.bits[i] = 1;
    d.components.push_back(std::move(c));
  }
  return d;
}

namespace {

double lesion_probability(const Tensor& probs) {
  std::vector<double> p(probs.data().begin(), probs.data().end());
  return fuse_non_lesion(p).lesion;
}

}  // namespace

ProbabilityMap infer_region(const net::Network& network, const CaseRecord& c, const Mask& region,
                            double intensity_mean, int stride, int workers) {
  if (stride < 1) throw DomainError("infer_region: stride must be >= 1");
  if (network.class_count() < 2 || network.param_count() == 0) {
    throw CheckpointError("infer_region: network has no usable classifier (" +
                          std::to_string(network.class_count()) + " classes, " +
                          std::to_string(network.param_count()) + " parameters)");
  }
  const std::size_t h = c.height(), w = c.width();
  if (region.height != h || region.width != w) throw DimensionError("infer_region: region does not match the case");
  ProbabilityMap map{Tensor({h, w}), Mask(h, w)};

  long min_x = static_cast<long>(w), min_y = static_cast<long>(h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (region.at(y, x)) {
        min_x = std::min(min_x, static_cast<long>(x));
        min_y = std::min(min_y, static_cast<long>(y));
      }
  std::vector<std::uint32_t> scored;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (region.at(y, x) && (static_cast<long>(x) - min_x) % stride == 0 && (static_cast<long>(y) - min_y) % stride == 0) {
        scored.push_back(static_cast<std::uint32_t>(y * w + x));
      }

  parallel_for(scored.size(), workers, [&](std::size_t k) {
    const std::size_t i = scored[k];
    const long x = static_cast<long>(i % w), y = static_cast<long>(i / w);
    const auto sample = patches::extract_patch_pair(c, x, y, intensity_mean);
    map.lesion_prob[i] = static_cast<float>(lesion_probability(network.forward(sample.small, sample.large)));
  });
  for (auto i : scored) map.evaluated.bits[i] = 1;

  if (stride > 1) {
    Mask is_scored = map.evaluated;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (!region.at(y, x) || is_scored.at(y, x)) continue;
        // nearest scored pixel, searching square rings of growing radius
        long best = -1, best_d2 = 0;
        const long reach = static_cast<long>(std::max(h, w));
        for (long r = 1; r <= reach && (best < 0 || (r - 1) * (r - 1) <= best_d2); ++r) {
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              if (std::max(std::abs(dx), std::abs(dy)) != r) continue;
              const long xx = static_cast<long>(x) + dx, yy = static_cast<long>(y) + dy;
              if (!is_scored.contains(xx, yy)) continue;
              const long d2 = dx * dx + dy * dy;
              const long idx = yy * static_cast<long>(w) + xx;
              if (best < 0 || d2 < best_d2 || (d2 == best_d2 && idx < best)) {
                best = idx;
                best_d2 = d2;
              }
            }
        }
        if (best < 0) continue;
        map.lesion_prob.at(y, x) = map.lesion_prob[static_cast<std::size_t>(best)];
        map.evaluated.set(y, x);
      }
  }
  return map;
}

ProbabilityMap infer_map(const net::Network& network, const CaseRecord& c, double intensity_mean, int stride,
                         int workers) {
  return infer_region(network, c, c.liver, intensity_mean, stride, workers);
}

DetectionMap threshold_map(const ProbabilityMap& map, double t, std::size_t min_area_px) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("threshold_map: threshold must lie in [0, 1]");
  Mask above(map.height(), map.width());
  for (std::size_t i = 0; i < above.bits.size(); ++i) {
    above.bits[i] = map.evaluated.bits[i] && static_cast<double>(map.lesion_prob[i]) > t;
  }
  return make_detection(above, min_area_px);
}

HierarchicalResult hierarchical_detect(const net::Network& stage1, const net::Network& stage2, const CaseRecord& c,
                                       double intensity_mean, double t1, double t2, int stride, int workers) {
  HierarchicalResult r;
  r.stage1 = infer_map(stage1, c, intensity_mean, stride, workers);
  const DetectionMap candidates = threshold_map(r.stage1, t1);
  r.stage2 = infer_region(stage2, c, candidates.binary, intensity_mean, stride, workers);
  r.detection = threshold_map(r.stage2, t2);
  return r;
}

// --- files ----------------------------------------------------------------

void save_probability_map(const std::filesystem::path& path, const ProbabilityMap& map) {
  Tensor t({map.height(), map.width(), 2});
  for (std::size_t i = 0; i < map.evaluated.bits.size(); ++i) {
    t[2 * i] = map.lesion_prob[i];
    t[2 * i + 1] = map.evaluated.bits[i] ? 1.0f : 0.0f;
  }
  save_tensor(path, t);
}

ProbabilityMap load_probability_map(const std::filesystem::path& path) {
  const Tensor t = load_tensor(path);
  if (t.rank() != 3 || t.dim(2) != 2) {
    throw DimensionError("probability map " + path.string() + " must have shape {H,W,2}, got " + shape_string(t.shape()));
  }
  ProbabilityMap map{Tensor({t.dim(0), t.dim(1)}), Mask(t.dim(0), t.dim(1))};
  for (std::size_t i = 0; i < map.evaluated.bits.size(); ++i) {
    map.lesion_prob[i] = t[2 * i];
    map.evaluated.bits[i] = t[2 * i + 1] > 0.5f;
  }
  return map;
}

void save_detection_map(const std::filesystem::path& path, const DetectionMap& detection) {
  Tensor t({detection.binary.height, detection.binary.width});
  for (std::size_t k = 0; k < detection.components.size(); ++k)
    for (auto i : detection.components[k].pixels) t[i] = static_cast<float>(k + 1);
  save_tensor(path, t);
}

DetectionMap load_detection_map(const std::filesystem::path& path) {
  const Tensor t = load_tensor(path);
  if (t.rank() != 2) throw DimensionError("detection map " + path.string() + " must have shape {H,W}");
  return make_detection(Mask::from_tensor(t));
}

void write_overlay_ppm(const std::filesystem::path& path, const CaseRecord& c, const DetectionMap& detection) {
  const std::size_t h = c.height(), w = c.width();
  if (detection.binary.height != h || detection.binary.width != w) {
    throw DimensionError("overlay: detection map does not match case " + c.case_id);
  }
  const double center = patches::liver_mean(c);
  std::vector<std::uint8_t> rgb(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double g = std::clamp(128.0 + (static_cast<double>(c.image[i]) - center), 0.0, 255.0);
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = static_cast<std::uint8_t>(g);
  }
  auto paint = [&](std::size_t i, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    rgb[3 * i] = r;
    rgb[3 * i + 1] = g;
    rgb[3 * i + 2] = b;
  };
  std::vector<std::uint8_t> lesion_hit(c.lesions.size(), 0);
  for (const auto& comp : detection.components) {
    bool hit = false;
    for (std::size_t k = 0; k < c.lesions.size(); ++k)
      for (auto i : comp.pixels)
        if (c.lesions[k].bits[i]) {
          hit = true;
          lesion_hit[k] = 1;
          break;
        }
    for (auto i : comp.pixels) hit ? paint(i, 0, 200, 0) : paint(i, 220, 0, 0);
  }
  for (std::size_t k = 0; k < c.lesions.size(); ++k) {
    if (lesion_hit[k]) continue;
    for (std::size_t i = 0; i < h * w; ++i)
      if (c.lesions[k].bits[i]) paint(i, 0, 0, 230);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace patchforge::detect
