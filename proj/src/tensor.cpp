#include "patchforge/tensor.hpp"

#include <fstream>
#include <limits>

#include "binary_io.hpp"

namespace patchforge {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_volume(const Shape& shape) {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void write_tensor(std::ostream& out, const Tensor& tensor) {
  if (tensor.rank() > std::numeric_limits<std::uint8_t>::max()) {
    throw DimensionError("tensor rank too large for TNSR: " + std::to_string(tensor.rank()));
  }
  out.write("TNSR", 4);
  detail::put_le<std::uint16_t>(out, kTensorFormatVersion);
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(tensor.rank()));
  for (std::size_t d : tensor.shape()) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw DimensionError("tensor dimension exceeds u32");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  }
  for (float v : tensor.data()) detail::put_f32(out, v);
}

Tensor read_tensor(std::istream& in, std::uint64_t origin) {
  detail::Reader r(in, origin);
  r.expect_magic("TNSR");
  const std::uint64_t version_at = r.offset();
  const auto version = r.le<std::uint16_t>("TNSR version");
  if (version != kTensorFormatVersion) {
    throw FormatError("unsupported TNSR version " + std::to_string(version), version_at);
  }
  const auto rank = r.le<std::uint8_t>("TNSR rank");
  Shape shape(rank);
  for (auto& d : shape) {
    const std::uint64_t at = r.offset();
    d = r.le<std::uint32_t>("TNSR dimension");
    if (d == 0) throw FormatError("TNSR dimension is zero", at);
  }
  const std::size_t n = rank == 0 ? 0 : shape_volume(shape);
  std::vector<float> data(n);
  for (auto& v : data) v = r.f32("TNSR payload");
  if (rank == 0) return {};
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::filesystem::path& path, const Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  write_tensor(out, tensor);
  if (!out) throw IoError("write failed: " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  try {
    return read_tensor(in);
  } catch (const FormatError& e) {
    throw e.in_file(path.string());
  }
}

}  // namespace patchforge
