#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sigma/rng.hpp"

namespace sigma {

// Row-major dense matrix of doubles. A Vec is a 1 x n or n x 1 view in
// spirit; plain std::vector<double> is used where a vector is enough.
struct Mat {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> d;

  Mat() = default;
  Mat(std::int64_t r, std::int64_t c) : rows(r), cols(c), d(r * c, 0.0) {}

  double& at(std::int64_t r, std::int64_t c) { return d[r * cols + c]; }
  double at(std::int64_t r, std::int64_t c) const { return d[r * cols + c]; }
  double* row(std::int64_t r) { return d.data() + r * cols; }
  const double* row(std::int64_t r) const { return d.data() + r * cols; }
  std::int64_t size() const { return rows * cols; }

  void fill(double v) { std::fill(d.begin(), d.end(), v); }
  void randn(Rng& rng, double scale) {
    for (auto& x : d) x = rng.normal() * scale;
  }
};

// Shared binary tensor format: magic "SGMA", u32 version, u8 dtype
// (0 = f32, 1 = f64), u8 rank, dims as u64 little-endian, row-major payload.
void write_tensor(const std::filesystem::path& path,
                  const std::vector<std::uint64_t>& dims, const double* data,
                  bool as_f32 = false);
void write_tensor(const std::filesystem::path& path, const Mat& m,
                  bool as_f32 = false);

struct TensorFile {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;  // widened to double on read
  std::uint8_t dtype = 1;
};
TensorFile read_tensor(const std::filesystem::path& path);
Mat read_matrix(const std::filesystem::path& path);

// Small file helpers shared by the pipeline stages.
void write_text(const std::filesystem::path& path, const std::string& body);
std::string read_text(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);
std::uint64_t fnv1a_file(const std::filesystem::path& path);
std::uint64_t fnv1a(const void* data, std::size_t n,
                    std::uint64_t h = 1469598103934665603ULL);

// Fixed-width formatting so emitted artifacts are byte-stable.
std::string fmt_double(double v);

std::vector<std::string> split(const std::string& s, char sep);

}  // namespace sigma
