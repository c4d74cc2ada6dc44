#pragma once

// Deterministic synthetic liver slices with known liver and lesion masks.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "patchforge/patchlab.hpp"

namespace patchforge::phantom {

struct PhantomConfig {
  std::size_t width = 256;
  std::size_t height = 256;

  // liver: an ellipse (fractions of the image size) with a low-frequency
  // radial perturbation of relative amplitude `liver_roughness`
  double liver_center_x = 0.5;
  double liver_center_y = 0.5;
  double liver_axis_x = 0.38;
  double liver_axis_y = 0.30;
  double liver_center_jitter = 0.03;
  double liver_roughness = 0.06;
  int liver_harmonics = 5;

  double background_mean = 40.0;
  double liver_mean = 120.0;
  double lesion_mean = 70.0;  // hypodense
  double noise_std = 10.0;
  double texture_amplitude = 4.0;  // smooth parenchyma texture

  int min_lesions = 1;
  int max_lesions = 10;
  double min_lesion_radius = 4.0;  // px
  double max_lesion_radius = 30.0;
  double lesion_roughness = 0.15;
  double lesion_edge_width = 1.5;  // px of intensity blending at lesion rims
  int liver_margin = 2;            // min px between a lesion and the liver edge
  int lesion_gap = 2;              // min px between lesions
  int max_attempts = 400;          // placement attempts per lesion

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Same (config, seed) always yields a bit-identical case.
patches::CaseRecord generate_case(const PhantomConfig& config, std::uint64_t seed, std::string case_id = "case",
                                  std::string patient_id = "patient");

/// The cases generate_dataset writes, in memory: case i is "case_NNN" with
/// seed derive_seed(seed, i) and patient "patient_MMM" (i mod n_patients).
std::vector<patches::CaseRecord> generate_cases(const PhantomConfig& config, std::size_t n_cases,
                                                std::size_t n_patients, std::uint64_t seed);

/// Writes `n_cases` cases (TNSR files) plus manifest.json into `out_dir`;
/// case i belongs to patient i mod n_patients. Returns the manifest entries.
std::vector<patches::ManifestEntry> generate_dataset(const PhantomConfig& config, std::size_t n_cases,
                                                     std::size_t n_patients, std::uint64_t seed,
                                                     const std::filesystem::path& out_dir);

}  // namespace patchforge::phantom
