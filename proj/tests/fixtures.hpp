#pragma once

// Small hand-built cases shared by several test files.

#include <filesystem>
#include <random>
#include <string>

#include "patchforge/patchlab.hpp"

namespace fixture {

using patchforge::Tensor;
using patchforge::patches::CaseRecord;
using patchforge::patches::Mask;

/// h x w image, liver = axis-aligned rectangle [x0, x1) x [y0, y1), constant intensity.
inline CaseRecord rect_case(std::size_t h, std::size_t w, long x0, long y0, long x1, long y1, float value = 100.0f,
                            std::string id = "rect") {
  CaseRecord c;
  c.case_id = id;
  c.patient_id = "p-" + id;
  c.image = Tensor({h, w}, value);
  c.liver = Mask(h, w);
  for (long y = y0; y < y1; ++y)
    for (long x = x0; x < x1; ++x) c.liver.set(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  return c;
}

/// Adds a filled disk lesion centered at (cx, cy).
inline void add_disk_lesion(CaseRecord& c, double cx, double cy, double r) {
  Mask m(c.height(), c.width());
  for (std::size_t y = 0; y < m.height; ++y)
    for (std::size_t x = 0; x < m.width; ++x) {
      const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
      if (dx * dx + dy * dy <= r * r) m.set(y, x);
    }
  c.lesions.push_back(std::move(m));
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("patchforge_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixture
