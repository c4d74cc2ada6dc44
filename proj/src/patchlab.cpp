#include "patchforge/patchlab.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numbers>
#include <random>

#include "binary_io.hpp"
#include "patchforge/parallel.hpp"

namespace patchforge::patches {

using json = nlohmann::json;

std::size_t Mask::count() const {
  std::size_t n = 0;
  for (auto b : bits) n += b != 0;
  return n;
}

Tensor Mask::to_tensor() const {
  Tensor t({height, width});
  for (std::size_t i = 0; i < bits.size(); ++i) t[i] = bits[i] ? 1.0f : 0.0f;
  return t;
}

Mask Mask::from_tensor(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("mask tensor must be rank 2 {H,W}, got " + shape_string(t.shape()));
  Mask m(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < t.size(); ++i) m.bits[i] = t[i] > 0.5f ? 1 : 0;
  return m;
}

std::string to_string(PatchClass c) {
  switch (c) {
    case PatchClass::Lesion: return "lesion";
    case PatchClass::NormalInterior: return "normal-interior";
    case PatchClass::NormalBoundary: return "normal-boundary";
  }
  return "?";
}

void CaseRecord::validate() const {
  const std::string who = "case \"" + case_id + "\": ";
  if (image.rank() != 2) throw ConfigError(who + "image must be rank 2 {H,W}, got " + shape_string(image.shape()));
  const std::size_t h = height(), w = width();
  if (liver.height != h || liver.width != w) throw ConfigError(who + "liver mask does not match image size");
  std::vector<std::uint8_t> owner(h * w, 0);
  for (std::size_t k = 0; k < lesions.size(); ++k) {
    const Mask& m = lesions[k];
    if (m.height != h || m.width != w) {
      throw ConfigError(who + "lesion mask " + std::to_string(k) + " does not match image size");
    }
    for (std::size_t i = 0; i < m.bits.size(); ++i) {
      if (!m.bits[i]) continue;
      if (!liver.bits[i]) throw ConfigError(who + "lesion " + std::to_string(k) + " extends outside the liver");
      if (owner[i]) throw ConfigError(who + "lesions " + std::to_string(owner[i] - 1) + " and " + std::to_string(k) +
                                      " overlap");
      owner[i] = static_cast<std::uint8_t>(std::min<std::size_t>(k + 1, 255));
    }
  }
}

bool CaseRecord::in_lesion(long x, long y) const {
  for (const auto& m : lesions)
    if (m.contains(x, y)) return true;
  return false;
}

PatchClass label_pixel(const CaseRecord& c, long x, long y) {
  if (!c.liver.contains(x, y)) {
    throw DomainError("label_pixel: (" + std::to_string(x) + ", " + std::to_string(y) + ") is outside the liver of case " +
                      c.case_id);
  }
  if (c.in_lesion(x, y)) return PatchClass::Lesion;
  const long half = kBoundaryWindow / 2;
  for (long yy = y - half; yy < y - half + kBoundaryWindow; ++yy)
    for (long xx = x - half; xx < x - half + kBoundaryWindow; ++xx)
      if (!c.liver.contains(xx, yy)) return PatchClass::NormalBoundary;
  return PatchClass::NormalInterior;
}

Tensor crop_window(const Tensor& image, long cx, long cy, int size) {
  if (image.rank() != 2) throw DimensionError("crop_window: image must be rank 2");
  const long h = static_cast<long>(image.dim(0)), w = static_cast<long>(image.dim(1));
  const auto s = static_cast<std::size_t>(size);
  Tensor crop({s, s});
  const long x0 = cx - size / 2, y0 = cy - size / 2;
  for (long r = 0; r < size; ++r) {
    const long y = y0 + r;
    if (y < 0 || y >= h) continue;
    for (long k = 0; k < size; ++k) {
      const long x = x0 + k;
      if (x < 0 || x >= w) continue;
      crop.at(static_cast<std::size_t>(r), static_cast<std::size_t>(k)) =
          image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
    }
  }
  return crop;
}

Tensor resample_patch(const Tensor& crop, int out, const PatchTransform& transform) {
  if (crop.rank() != 2 || crop.dim(0) != crop.dim(1)) {
    throw DimensionError("resample_patch: crop must be square rank 2, got " + shape_string(crop.shape()));
  }
  if (out < 1) throw DomainError("resample_patch: output size must be >= 1");
  const double size = static_cast<double>(crop.dim(0));
  const long last = static_cast<long>(crop.dim(0)) - 1;
  const double scale = size / out;
  const double theta = transform.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const bool rotated = transform.angle_deg != 0.0;

  Tensor result({static_cast<std::size_t>(out), static_cast<std::size_t>(out), 1});
  for (int i = 0; i < out; ++i) {
    for (int j = 0; j < out; ++j) {
      // destination offset from the crop center, in native pixels
      const double u = (j + 0.5) * scale - size / 2;
      const double v = (i + 0.5) * scale - size / 2;
      double us = u, vs = v;
      if (rotated) {
        us = u * cs - v * sn;
        vs = u * sn + v * cs;
      }
      if (transform.flip) us = -us;
      double px = us + size / 2 - 0.5;
      double py = vs + size / 2 - 0.5;
      if (px < -0.5 || py < -0.5 || px > size - 0.5 || py > size - 0.5) continue;  // zero fill
      px = std::clamp(px, 0.0, static_cast<double>(last));
      py = std::clamp(py, 0.0, static_cast<double>(last));
      const long x0 = std::min(static_cast<long>(std::floor(px)), last);
      const long y0 = std::min(static_cast<long>(std::floor(py)), last);
      const long x1 = std::min(x0 + 1, last), y1 = std::min(y0 + 1, last);
      const double fx = px - x0, fy = py - y0;
      auto at = [&](long yy, long xx) {
        return static_cast<double>(crop.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)));
      };
      const double top = at(y0, x0) * (1 - fx) + at(y0, x1) * fx;
      const double bottom = at(y1, x0) * (1 - fx) + at(y1, x1) * fx;
      result.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j), 0) =
          static_cast<float>(top * (1 - fy) + bottom * fy);
    }
  }
  return result;
}

PatchSample extract_patch_pair(const CaseRecord& c, long x, long y, double intensity_mean,
                               const PatchTransform& transform) {
  PatchSample s;
  s.small = resample_patch(crop_window(c.image, x, y, kSmallFov), kPatchSize, transform);
  s.large = resample_patch(crop_window(c.image, x, y, kLargeFov), kPatchSize, transform);
  const auto shift = static_cast<float>(intensity_mean);
  for (float& v : s.small.data()) v -= shift;
  for (float& v : s.large.data()) v -= shift;
  s.x = static_cast<std::uint32_t>(x);
  s.y = static_cast<std::uint32_t>(y);
  s.case_id = c.case_id;
  s.label = c.liver.contains(x, y) ? static_cast<std::uint8_t>(label_pixel(c, x, y)) : kUnlabeled;
  return s;
}

std::vector<Candidate> enumerate_candidates(const CaseRecord& c, int step) {
  if (step < 1) throw DomainError("enumerate_candidates: step must be >= 1");
  const long h = static_cast<long>(c.height()), w = static_cast<long>(c.width());
  long min_x = w, min_y = h, max_x = -1, max_y = -1;
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      if (c.liver.contains(x, y)) {
        min_x = std::min(min_x, x);
        min_y = std::min(min_y, y);
        max_x = std::max(max_x, x);
        max_y = std::max(max_y, y);
      }
  std::vector<Candidate> out;
  if (max_x < 0) return out;

  // summed-area table of liver pixels, for window-fully-inside tests
  std::vector<long> sat(static_cast<std::size_t>((h + 1) * (w + 1)), 0);
  auto S = [&](long y, long x) -> long& { return sat[static_cast<std::size_t>(y * (w + 1) + x)]; };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) S(y + 1, x + 1) = c.liver.contains(x, y) + S(y, x + 1) + S(y + 1, x) - S(y, x);

  std::vector<std::uint8_t> lesion(static_cast<std::size_t>(h * w), 0);
  for (const auto& m : c.lesions)
    for (std::size_t i = 0; i < m.bits.size(); ++i) lesion[i] |= m.bits[i];

  const long half = kBoundaryWindow / 2;
  for (long y = min_y; y <= max_y; y += step) {
    for (long x = min_x; x <= max_x; x += step) {
      if (!c.liver.contains(x, y)) continue;
      PatchClass label = PatchClass::NormalInterior;
      if (lesion[static_cast<std::size_t>(y * w + x)]) {
        label = PatchClass::Lesion;
      } else {
        const long x0 = x - half, y0 = y - half, x1 = x0 + kBoundaryWindow, y1 = y0 + kBoundaryWindow;
        const bool inside_image = x0 >= 0 && y0 >= 0 && x1 <= w && y1 <= h;
        const long liver_px = inside_image ? S(y1, x1) - S(y0, x1) - S(y1, x0) + S(y0, x0) : 0;
        if (liver_px < static_cast<long>(kBoundaryWindow) * kBoundaryWindow) label = PatchClass::NormalBoundary;
      }
      out.push_back({static_cast<std::uint32_t>(x), static_cast<std::uint32_t>(y), label});
    }
  }
  return out;
}

std::vector<PatchSample> augment_lesion(const CaseRecord& c, const PatchSample& sample, double intensity_mean) {
  if (sample.label != static_cast<std::uint8_t>(PatchClass::Lesion)) {
    throw DomainError("augment_lesion: only lesion samples are augmented (got label " +
                      std::to_string(sample.label) + ")");
  }
  std::vector<PatchSample> out;
  out.reserve(kLesionAugmentations.size());
  for (const auto& t : kLesionAugmentations) {
    PatchSample s = extract_patch_pair(c, sample.x, sample.y, intensity_mean, t);
    s.label = sample.label;
    out.push_back(std::move(s));
  }
  return out;
}

BalanceResult balance_classes(std::span<const std::vector<Candidate>> per_case, std::size_t target_per_class,
                              std::uint64_t seed, bool merge_normal) {
  if (target_per_class < 1) throw DomainError("balance_classes: target per class must be >= 1");
  std::array<std::vector<SampleRef>, kClassCount> pools;
  for (std::size_t ci = 0; ci < per_case.size(); ++ci) {
    for (const Candidate& cand : per_case[ci]) {
      auto k = static_cast<std::size_t>(cand.label);
      if (merge_normal && cand.label == PatchClass::NormalBoundary) k = static_cast<std::size_t>(PatchClass::NormalInterior);
      if (cand.label == PatchClass::Lesion) {
        for (std::size_t v = 0; v < kLesionAugmentations.size(); ++v) {
          pools[k].push_back({static_cast<std::uint32_t>(ci), cand, static_cast<std::uint8_t>(v)});
        }
      } else {
        pools[k].push_back({static_cast<std::uint32_t>(ci), cand, 0});
      }
    }
  }
  BalanceResult result;
  for (std::size_t k = 0; k < kClassCount; ++k) {
    auto& pool = pools[k];
    result.available[k] = pool.size();
    if (merge_normal && k == static_cast<std::size_t>(PatchClass::NormalBoundary)) continue;
    if (pool.empty()) {
      result.warnings.push_back("class " + to_string(static_cast<PatchClass>(k)) + " has no candidates");
      continue;
    }
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t take = std::min(target_per_class, pool.size());
    if (take < pool.size()) {
      std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + k + 1);
      for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + std::uniform_int_distribution<std::size_t>(0, pool.size() - 1 - i)(rng);
        std::swap(order[i], order[j]);
      }
      order.resize(take);
      std::sort(order.begin(), order.end());
    } else if (pool.size() < target_per_class) {
      result.warnings.push_back("class " + to_string(static_cast<PatchClass>(k)) + " has only " +
                                std::to_string(pool.size()) + " samples (target " +
                                std::to_string(target_per_class) + ")");
    }
    for (std::size_t i : order) result.selected.push_back(pool[i]);
    result.chosen[k] = take;
  }
  return result;
}

std::vector<PatchSample> materialize(std::span<const CaseRecord> cases, std::span<const SampleRef> refs,
                                     double intensity_mean, int workers) {
  std::vector<PatchSample> out(refs.size());
  parallel_for(refs.size(), workers, [&](std::size_t i) {
    const SampleRef& r = refs[i];
    if (r.case_index >= cases.size()) throw IndexError("materialize: case index out of range");
    if (r.variant >= kLesionAugmentations.size()) throw IndexError("materialize: augmentation variant out of range");
    out[i] = extract_patch_pair(cases[r.case_index], r.candidate.x, r.candidate.y, intensity_mean,
                                kLesionAugmentations[r.variant]);
    out[i].label = static_cast<std::uint8_t>(r.candidate.label);
  });
  return out;
}

std::vector<PatchSample> relabel(std::span<const PatchSample> samples, LabelScheme scheme) {
  std::vector<PatchSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    const auto cls = static_cast<PatchClass>(s.label);
    PatchSample copy = s;
    switch (scheme) {
      case LabelScheme::MultiClass: break;
      case LabelScheme::Binary: copy.label = cls == PatchClass::Lesion ? 0 : 1; break;
      case LabelScheme::BoundaryOnly:
        if (cls == PatchClass::NormalInterior) continue;
        copy.label = cls == PatchClass::Lesion ? 0 : 1;
        break;
    }
    out.push_back(std::move(copy));
  }
  return out;
}

double liver_mean(const CaseRecord& c) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < c.liver.bits.size(); ++i) {
    if (!c.liver.bits[i]) continue;
    sum += static_cast<double>(c.image[i]);
    ++n;
  }
  if (n == 0) throw DomainError("case \"" + c.case_id + "\" has an empty liver mask");
  return sum / static_cast<double>(n);
}

double compute_mean_intensity(std::span<const CaseRecord> cases) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& c : cases) {
    for (std::size_t i = 0; i < c.liver.bits.size(); ++i) {
      if (!c.liver.bits[i]) continue;
      sum += static_cast<double>(c.image[i]);
      ++n;
    }
  }
  if (n == 0) throw DomainError("compute_mean_intensity: no liver pixels in the training cases");
  return sum / static_cast<double>(n);
}

CaseRecord normalize_test_case(const CaseRecord& c, double intensity_mean) {
  const double shift = intensity_mean - liver_mean(c);
  CaseRecord out = c;
  for (float& v : out.image.data()) v = static_cast<float>(static_cast<double>(v) + shift);
  return out;
}

// --- files ----------------------------------------------------------------

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("malformed manifest " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ConfigError("manifest " + path.string() + " must be a JSON list of cases");
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    try {
      ManifestEntry m;
      m.case_id = e.at("case_id").get<std::string>();
      m.patient_id = e.at("patient_id").get<std::string>();
      m.image = e.at("image").get<std::string>();
      m.liver_mask = e.at("liver_mask").get<std::string>();
      m.lesion_masks = e.at("lesion_masks").get<std::vector<std::string>>();
      m.fold = e.value("fold", -1);
      entries.push_back(std::move(m));
    } catch (const json::exception& ex) {
      throw ConfigError("manifest " + path.string() + " entry " + std::to_string(i) + ": " + ex.what());
    }
  }
  return entries;
}

void save_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries) {
  json j = json::array();
  for (const auto& m : entries) {
    j.push_back({{"case_id", m.case_id},
                 {"patient_id", m.patient_id},
                 {"image", m.image},
                 {"liver_mask", m.liver_mask},
                 {"lesion_masks", m.lesion_masks},
                 {"fold", m.fold}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << j.dump(2) << "\n";
}

CaseRecord load_case(const ManifestEntry& entry, const std::filesystem::path& base_dir) {
  CaseRecord c;
  c.case_id = entry.case_id;
  c.patient_id = entry.patient_id;
  c.fold = entry.fold;
  c.image = load_tensor(base_dir / entry.image);
  c.liver = Mask::from_tensor(load_tensor(base_dir / entry.liver_mask));
  for (const auto& p : entry.lesion_masks) c.lesions.push_back(Mask::from_tensor(load_tensor(base_dir / p)));
  c.validate();
  return c;
}

std::vector<CaseRecord> load_cases(const std::filesystem::path& manifest_path) {
  const auto entries = load_manifest(manifest_path);
  std::vector<CaseRecord> cases;
  cases.reserve(entries.size());
  for (const auto& e : entries) cases.push_back(load_case(e, manifest_path.parent_path()));
  return cases;
}

void save_patch_records(const std::filesystem::path& path, std::span<const PatchSample> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write("PFPR", 4);
  detail::put_le<std::uint16_t>(out, kPatchRecordVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(samples.size()));
  const Shape patch{kPatchSize, kPatchSize, 1};
  for (const auto& s : samples) {
    if (s.small.shape() != patch || s.large.shape() != patch) {
      throw DimensionError("patch records need 32x32x1 patches, got " + shape_string(s.small.shape()));
    }
    detail::put_le<std::uint8_t>(out, s.label);
    detail::put_le<std::uint32_t>(out, s.x);
    detail::put_le<std::uint32_t>(out, s.y);
    for (float v : s.small.data()) detail::put_f32(out, v);
    for (float v : s.large.data()) detail::put_f32(out, v);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<PatchSample> load_patch_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    detail::Reader r(in, 0);
    r.expect_magic("PFPR");
    const std::uint64_t version_at = r.offset();
    const auto version = r.le<std::uint16_t>("PFPR version");
    if (version != kPatchRecordVersion) {
      throw FormatError("unsupported PFPR version " + std::to_string(version), version_at);
    }
    const auto count = r.le<std::uint32_t>("record count");
    std::vector<PatchSample> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
      PatchSample s;
      s.label = r.le<std::uint8_t>("record label");
      s.x = r.le<std::uint32_t>("record x");
      s.y = r.le<std::uint32_t>("record y");
      s.small = Tensor({kPatchSize, kPatchSize, 1});
      s.large = Tensor({kPatchSize, kPatchSize, 1});
      for (float& v : s.small.data()) v = r.f32("small patch");
      for (float& v : s.large.data()) v = r.f32("large patch");
      out.push_back(std::move(s));
    }
    return out;
  } catch (const FormatError& e) {
    throw e.in_file(path.string());
  }
}

}  // namespace patchforge::patches
