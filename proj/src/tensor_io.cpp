#include "sigma/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sigma {

namespace {
constexpr char kMagic[4] = {'S', 'G', 'M', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("tensor file truncated");
  return v;
}
}  // namespace

void write_tensor(const std::filesystem::path& path,
                  const std::vector<std::uint64_t>& dims, const double* data,
                  bool as_f32) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint8_t>(os, as_f32 ? 0 : 1);
  put<std::uint8_t>(os, static_cast<std::uint8_t>(dims.size()));
  std::uint64_t count = 1;
  for (auto d : dims) {
    put<std::uint64_t>(os, d);
    count *= d;
  }
  if (as_f32) {
    for (std::uint64_t i = 0; i < count; ++i)
      put<float>(os, static_cast<float>(data[i]));
  } else {
    os.write(reinterpret_cast<const char*>(data), count * sizeof(double));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void write_tensor(const std::filesystem::path& path, const Mat& m,
                  bool as_f32) {
  write_tensor(path,
               {static_cast<std::uint64_t>(m.rows),
                static_cast<std::uint64_t>(m.cols)},
               m.d.data(), as_f32);
}

TensorFile read_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("bad tensor magic in " + path.string());
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    throw std::runtime_error("unsupported tensor version in " + path.string());
  TensorFile t;
  t.dtype = get<std::uint8_t>(is);
  if (t.dtype > 1) throw std::runtime_error("bad dtype in " + path.string());
  const auto rank = get<std::uint8_t>(is);
  std::uint64_t count = 1;
  for (int i = 0; i < rank; ++i) {
    t.dims.push_back(get<std::uint64_t>(is));
    count *= t.dims.back();
  }
  t.data.resize(count);
  if (t.dtype == 0) {
    for (std::uint64_t i = 0; i < count; ++i) t.data[i] = get<float>(is);
  } else {
    is.read(reinterpret_cast<char*>(t.data.data()), count * sizeof(double));
    if (!is) throw std::runtime_error("tensor file truncated: " + path.string());
  }
  return t;
}

Mat read_matrix(const std::filesystem::path& path) {
  TensorFile t = read_tensor(path);
  if (t.dims.size() != 2)
    throw std::runtime_error("expected rank-2 tensor in " + path.string());
  Mat m(static_cast<std::int64_t>(t.dims[0]),
        static_cast<std::int64_t>(t.dims[1]));
  m.d = std::move(t.data);
  return m;
}

void write_text(const std::filesystem::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for write: " + path.string());
  os << body;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(is)),
                std::istreambuf_iterator<char>());
  return s;
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a_file(const std::filesystem::path& path) {
  const std::string body = read_text(path);
  return fnv1a(body.data(), body.size());
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace sigma
