#include "mmdg/serialize.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

namespace mmdg {

void write_u64(std::ostream& os, std::uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, 8);
}

std::uint64_t read_u64(std::istream& is) {
  char buf[8];
  is.read(buf, 8);
  if (is.gcount() != 8) throw InputError("truncated stream while reading u64");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[i])) << (8 * i);
  }
  return v;
}

void write_f64(std::ostream& os, double v) {
  write_u64(os, std::bit_cast<std::uint64_t>(v));
}

double read_f64(std::istream& is) { return std::bit_cast<double>(read_u64(is)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const std::uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::uint64_t>(is.gcount()) != n) {
    throw InputError("truncated stream while reading string");
  }
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u64(os, t.rank());
  for (std::size_t d : t.shape()) write_u64(os, d);
  for (double v : t.values()) write_f64(os, v);
}

Tensor read_tensor(std::istream& is) {
  const std::uint64_t rank = read_u64(is);
  if (rank > 8) throw InputError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = read_u64(is);
  const std::size_t n = shape_numel(shape);
  std::vector<double> values(n);
  for (auto& v : values) v = read_f64(is);
  return Tensor::from(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw InputError("write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace mmdg
