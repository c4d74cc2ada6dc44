#include "patchforge/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "patchforge/seeding.hpp"

namespace patchforge::phantom {

using patches::CaseRecord;
using patches::Mask;

void PhantomConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("phantom." + field + ": " + why);
  };
  if (width < 16 || height < 16) fail("width/height", "image must be at least 16 x 16");
  if (liver_axis_x <= 0 || liver_axis_y <= 0) fail("liver_axis", "axes must be positive");
  if (liver_roughness < 0 || liver_roughness >= 0.5) fail("liver_roughness", "must lie in [0, 0.5)");
  if (liver_harmonics < 0) fail("liver_harmonics", "must be >= 0");
  if (!(lesion_mean < liver_mean)) fail("lesion_mean", "lesions must be darker than the liver");
  if (noise_std < 0) fail("noise_std", "must be >= 0");
  if (min_lesions < 0 || max_lesions < min_lesions) fail("min_lesions/max_lesions", "need 0 <= min <= max");
  if (min_lesion_radius < 1 || max_lesion_radius < min_lesion_radius) {
    fail("min_lesion_radius/max_lesion_radius", "need 1 <= min <= max");
  }
  if (lesion_roughness < 0 || lesion_roughness >= 0.5) fail("lesion_roughness", "must lie in [0, 0.5)");
  if (liver_margin < 0 || lesion_gap < 0) fail("liver_margin/lesion_gap", "must be >= 0");
  if (max_attempts < 1) fail("max_attempts", "must be >= 1");
}

namespace {

struct Harmonic {
  int order;
  double amplitude;
  double phase;
};

double radial_factor(const std::vector<Harmonic>& hs, double theta) {
  double f = 1.0;
  for (const auto& h : hs) f += h.amplitude * std::cos(h.order * theta + h.phase);
  return f;
}

std::vector<Harmonic> draw_harmonics(std::mt19937_64& rng, int first, int count, double roughness) {
  std::uniform_real_distribution<double> amp(0.3, 1.0), phase(0.0, 2 * std::numbers::pi);
  std::vector<Harmonic> hs;
  for (int k = 0; k < count; ++k) {
    const double a = amp(rng) * roughness / std::max(1, count);
    hs.push_back({first + k, a, phase(rng)});
  }
  return hs;
}

// Marks every pixel within Euclidean distance `radius` of a set pixel.
void dilate_into(const Mask& src, int radius, Mask& dst) {
  const long h = static_cast<long>(src.height), w = static_cast<long>(src.width);
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      if (!src.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) continue;
      for (long dy = -radius; dy <= radius; ++dy)
        for (long dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > radius * radius) continue;
          const long yy = y + dy, xx = x + dx;
          if (yy >= 0 && xx >= 0 && yy < h && xx < w) dst.set(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
        }
    }
}

}  // namespace

CaseRecord generate_case(const PhantomConfig& config, std::uint64_t seed, std::string case_id,
                         std::string patient_id) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const std::size_t h = config.height, w = config.width;

  // liver
  const double cx = static_cast<double>(w) * (config.liver_center_x + config.liver_center_jitter * unit(rng));
  const double cy = static_cast<double>(h) * (config.liver_center_y + config.liver_center_jitter * unit(rng));
  const double ax = static_cast<double>(w) * config.liver_axis_x;
  const double ay = static_cast<double>(h) * config.liver_axis_y;
  const auto liver_shape = draw_harmonics(rng, 2, config.liver_harmonics, config.liver_roughness);

  CaseRecord c;
  c.case_id = std::move(case_id);
  c.patient_id = std::move(patient_id);
  c.liver = Mask(h, w);
  std::vector<std::size_t> liver_pixels;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double dx = (static_cast<double>(x) - cx) / ax, dy = (static_cast<double>(y) - cy) / ay;
      const double f = radial_factor(liver_shape, std::atan2(dy, dx));
      if (dx * dx + dy * dy <= f * f) {
        c.liver.set(y, x);
        liver_pixels.push_back(y * w + x);
      }
    }
  if (liver_pixels.empty()) throw GenerationError("phantom: liver ellipse does not cover any pixel");

  // lesion placement: forbidden = near the liver edge or near another lesion
  Mask forbidden(h, w);
  {
    Mask outside(h, w);
    for (std::size_t i = 0; i < outside.bits.size(); ++i) outside.bits[i] = c.liver.bits[i] ? 0 : 1;
    forbidden = outside;
    dilate_into(outside, config.liver_margin, forbidden);
  }
  const int n_lesions = std::uniform_int_distribution<int>(config.min_lesions, config.max_lesions)(rng);
  std::uniform_real_distribution<double> radius_dist(config.min_lesion_radius, config.max_lesion_radius);
  std::uniform_int_distribution<std::size_t> pick(0, liver_pixels.size() - 1);
  std::vector<Mask> lesions;
  std::vector<std::vector<std::pair<std::size_t, double>>> lesion_pixels;  // (index, rim blending weight)
  for (int k = 0; k < n_lesions; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < config.max_attempts && !placed; ++attempt) {
      const double radius = radius_dist(rng);
      const std::size_t center = liver_pixels[pick(rng)];
      const double lx = static_cast<double>(center % w), ly = static_cast<double>(center / w);
      const auto shape = draw_harmonics(rng, 2, 2, config.lesion_roughness);
      const long reach = static_cast<long>(std::ceil(radius * (1 + config.lesion_roughness))) + 1;
      std::vector<std::pair<std::size_t, double>> pixels;
      bool ok = true;
      for (long y = static_cast<long>(ly) - reach; ok && y <= static_cast<long>(ly) + reach; ++y)
        for (long x = static_cast<long>(lx) - reach; x <= static_cast<long>(lx) + reach; ++x) {
          const double dx = x - lx, dy = y - ly;
          const double rim = radius * radial_factor(shape, std::atan2(dy, dx));
          const double rho = std::sqrt(dx * dx + dy * dy);
          if (rho > rim) continue;
          if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w) ||
              forbidden.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x))) {
            ok = false;
            break;
          }
          const auto idx = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
          const double depth = config.lesion_edge_width > 0 ? (rim - rho) / config.lesion_edge_width : 1.0;
          const double t = std::clamp(0.5 + depth, 0.0, 1.0);
          pixels.emplace_back(idx, t * t * (3 - 2 * t));
        }
      if (!ok || pixels.empty()) continue;
      Mask m(h, w);
      for (const auto& px : pixels) m.bits[px.first] = 1;
      dilate_into(m, config.lesion_gap, forbidden);
      lesions.push_back(std::move(m));
      lesion_pixels.push_back(std::move(pixels));
      placed = true;
    }
    if (!placed) {
      throw GenerationError("phantom: could not place lesion " + std::to_string(k + 1) + " of " +
                            std::to_string(n_lesions) + " after " + std::to_string(config.max_attempts) +
                            " attempts (seed " + std::to_string(seed) +
                            "); try a smaller max_lesion_radius or fewer lesions");
    }
  }

  // intensities
  std::uniform_real_distribution<double> period(30.0, 80.0), phase(0.0, 2 * std::numbers::pi), angle(0.0, std::numbers::pi);
  struct Wave {
    double kx, ky, phase;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 3; ++i) {
    const double k = 2 * std::numbers::pi / period(rng), a = angle(rng);
    waves.push_back({k * std::cos(a), k * std::sin(a), phase(rng)});
  }
  std::vector<double> lesion_weight(h * w, 0.0);
  for (const auto& pixels : lesion_pixels)
    for (const auto& [idx, wt] : pixels) lesion_weight[idx] = wt;
  std::normal_distribution<double> noise(0.0, 1.0);
  c.image = Tensor({h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t idx = y * w + x;
      double v = config.background_mean;
      if (c.liver.bits[idx]) {
        double texture = 0;
        for (const auto& wv : waves) texture += std::sin(wv.kx * x + wv.ky * y + wv.phase);
        v = config.liver_mean + config.texture_amplitude * texture / 3.0;
        v += (config.lesion_mean - v) * lesion_weight[idx];
      }
      c.image[idx] = static_cast<float>(v + config.noise_std * noise(rng));
    }
  c.lesions = std::move(lesions);
  c.validate();
  return c;
}

namespace {

void check_counts(std::size_t n_cases, std::size_t n_patients) {
  if (n_patients < 1 || n_patients > n_cases) {
    throw ConfigError("phantom: need 1 <= n_patients <= n_cases (got " + std::to_string(n_patients) + " patients for " +
                      std::to_string(n_cases) + " cases)");
  }
}

}  // namespace

std::vector<CaseRecord> generate_cases(const PhantomConfig& config, std::size_t n_cases, std::size_t n_patients,
                                       std::uint64_t seed) {
  check_counts(n_cases, n_patients);
  std::vector<CaseRecord> out;
  char case_id[32], patient_id[32];
  for (std::size_t i = 0; i < n_cases; ++i) {
    std::snprintf(case_id, sizeof case_id, "case_%03zu", i);
    std::snprintf(patient_id, sizeof patient_id, "patient_%03zu", i % n_patients);
    out.push_back(generate_case(config, derive_seed(seed, i), case_id, patient_id));
  }
  return out;
}

std::vector<patches::ManifestEntry> generate_dataset(const PhantomConfig& config, std::size_t n_cases,
                                                     std::size_t n_patients, std::uint64_t seed,
                                                     const std::filesystem::path& out_dir) {
  check_counts(n_cases, n_patients);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create directory " + out_dir.string() + ": " + ec.message());

  std::vector<patches::ManifestEntry> entries;
  for (const CaseRecord& c : generate_cases(config, n_cases, n_patients, seed)) {
    patches::ManifestEntry e;
    e.case_id = c.case_id;
    e.patient_id = c.patient_id;
    e.image = c.case_id + "_image.tnsr";
    e.liver_mask = c.case_id + "_liver.tnsr";
    save_tensor(out_dir / e.image, c.image);
    save_tensor(out_dir / e.liver_mask, c.liver.to_tensor());
    for (std::size_t k = 0; k < c.lesions.size(); ++k) {
      e.lesion_masks.push_back(c.case_id + "_lesion_" + std::to_string(k) + ".tnsr");
      save_tensor(out_dir / e.lesion_masks.back(), c.lesions[k].to_tensor());
    }
    entries.push_back(std::move(e));
  }
  patches::save_manifest(out_dir / "manifest.json", entries);
  return entries;
}

}  // namespace patchforge::phantom
