#pragma once

// Case model, pixel labeling, dual field-of-view patch extraction,
// augmentation, class balancing and intensity normalization.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "patchforge/tensor.hpp"

namespace patchforge::patches {

/// Binary H x W mask, row-major.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  bool at(std::size_t y, std::size_t x) const { return bits[y * width + x] != 0; }
  void set(std::size_t y, std::size_t x, bool v = true) { bits[y * width + x] = v ? 1 : 0; }
  bool contains(long x, long y) const {
    return x >= 0 && y >= 0 && static_cast<std::size_t>(x) < width && static_cast<std::size_t>(y) < height &&
           at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  }
  std::size_t count() const;

  Tensor to_tensor() const;
  /// Pixels > 0.5 are set.
  static Mask from_tensor(const Tensor& t);
  bool operator==(const Mask&) const = default;
};

enum class PatchClass : std::uint8_t { Lesion = 0, NormalInterior = 1, NormalBoundary = 2 };
inline constexpr std::size_t kClassCount = 3;
/// Label of a patch centered outside the liver.
inline constexpr std::uint8_t kUnlabeled = 255;
std::string to_string(PatchClass c);

inline constexpr int kSmallFov = 20;
inline constexpr int kLargeFov = 50;
inline constexpr int kPatchSize = 32;
inline constexpr int kBoundaryWindow = 20;

struct CaseRecord {
  Tensor image;  // {H, W}
  Mask liver;
  std::vector<Mask> lesions;
  std::string patient_id;
  std::string case_id;
  int fold = -1;

  std::size_t height() const { return image.empty() ? 0 : image.dim(0); }
  std::size_t width() const { return image.empty() ? 0 : image.dim(1); }
  /// Throws ConfigError if masks and image disagree in size, a lesion
  /// leaves the liver, or two lesions overlap.
  void validate() const;
  bool in_lesion(long x, long y) const;
};

/// lesion if (x, y) lies in a lesion; normal-boundary if the 20 x 20
/// window around it touches a non-liver pixel (or leaves the image);
/// otherwise normal-interior. The window spans [x - 10, x + 9].
PatchClass label_pixel(const CaseRecord& c, long x, long y);

struct PatchSample {
  Tensor small;  // {32, 32, 1}, from the 20 x 20 field of view
  Tensor large;  // {32, 32, 1}, from the 50 x 50 field of view
  std::uint8_t label = 0;
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  std::string case_id;
};

/// Geometric transform applied at native field-of-view resolution.
/// Rotation is counter-clockwise as displayed (y axis pointing down);
/// a flip mirrors left/right before the rotation.
struct PatchTransform {
  bool flip = false;
  double angle_deg = 0.0;
};

/// identity, left/right flip, rotations by 5, 130 and 300 degrees.
inline const std::array<PatchTransform, 5> kLesionAugmentations = {
    PatchTransform{false, 0.0}, PatchTransform{true, 0.0}, PatchTransform{false, 5.0}, PatchTransform{false, 130.0},
    PatchTransform{false, 300.0}};

/// size x size window whose pixel k maps to image column cx - size/2 + k;
/// pixels outside the image read as 0.
Tensor crop_window(const Tensor& image, long cx, long cy, int size);

/// Bilinear resampling of a square crop to out x out, after applying
/// `transform` about the crop center. Samples that fall outside the crop
/// after the transform read as 0; samples inside are clamped to the edge
/// pixels. Returns {out, out, 1}.
Tensor resample_patch(const Tensor& crop, int out, const PatchTransform& transform = {});

/// Crops both fields of view around (x, y), resamples each to 32 x 32 and
/// subtracts `intensity_mean`.
PatchSample extract_patch_pair(const CaseRecord& c, long x, long y, double intensity_mean,
                               const PatchTransform& transform = {});

struct Candidate {
  std::uint32_t x = 0;
  std::uint32_t y = 0;
  PatchClass label = PatchClass::NormalInterior;
  bool operator==(const Candidate&) const = default;
};

/// Every liver pixel on the step lattice anchored at the liver bounding
/// box's top-left corner, in raster order.
std::vector<Candidate> enumerate_candidates(const CaseRecord& c, int step = 2);

/// The five augmented variants of a lesion sample (identity first).
std::vector<PatchSample> augment_lesion(const CaseRecord& c, const PatchSample& sample, double intensity_mean);

struct SampleRef {
  std::uint32_t case_index = 0;
  Candidate candidate;
  std::uint8_t variant = 0;  // index into kLesionAugmentations
};

struct BalanceResult {
  std::vector<SampleRef> selected;  // grouped by class, pool order within a class
  std::array<std::size_t, kClassCount> available{};
  std::array<std::size_t, kClassCount> chosen{};
  std::vector<std::string> warnings;
};

/// Draws min(target, available) samples per class without replacement.
/// Lesion candidates count once per augmentation variant. With
/// `merge_normal` both normal classes share one pool (reported under
/// normal-interior), giving a lesion vs non-lesion balance; the selected
/// candidates keep their original labels.
BalanceResult balance_classes(std::span<const std::vector<Candidate>> per_case, std::size_t target_per_class,
                              std::uint64_t seed, bool merge_normal = false);

/// Extracts the referenced patches (augmentations applied) in order.
std::vector<PatchSample> materialize(std::span<const CaseRecord> cases, std::span<const SampleRef> refs,
                                     double intensity_mean, int workers = 1);

/// How raw patch classes map onto network outputs.
enum class LabelScheme {
  MultiClass,    // lesion / normal-interior / normal-boundary
  Binary,        // lesion / non-lesion
  BoundaryOnly,  // lesion / normal-boundary; interior samples dropped
};

std::vector<PatchSample> relabel(std::span<const PatchSample> samples, LabelScheme scheme);

/// Pooled mean over all liver pixels of all cases.
double compute_mean_intensity(std::span<const CaseRecord> cases);
/// Copy of `c` with intensities shifted so its liver mean equals
/// `intensity_mean`.
CaseRecord normalize_test_case(const CaseRecord& c, double intensity_mean);
double liver_mean(const CaseRecord& c);

// --- files ----------------------------------------------------------------

struct ManifestEntry {
  std::string case_id;
  std::string patient_id;
  std::string image;
  std::string liver_mask;
  std::vector<std::string> lesion_masks;
  int fold = -1;
};

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, std::span<const ManifestEntry> entries);
/// Paths in `entry` are resolved against `base_dir`.
CaseRecord load_case(const ManifestEntry& entry, const std::filesystem::path& base_dir);
std::vector<CaseRecord> load_cases(const std::filesystem::path& manifest_path);

// PFPR: "PFPR", u16 version, u32 count, then per record u8 label, u32 x,
// u32 y, 1024 f32 small patch, 1024 f32 large patch.
inline constexpr std::uint16_t kPatchRecordVersion = 1;

void save_patch_records(const std::filesystem::path& path, std::span<const PatchSample> samples);
std::vector<PatchSample> load_patch_records(const std::filesystem::path& path);

}  // namespace patchforge::patches
