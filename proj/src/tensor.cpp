// SPDX-License-Identifier: Apache-2.0
#include "repiln/tensor.hpp"

#include <algorithm>
#include <charconv>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace repiln {

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

template <typename T>
T Tensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void Tensor<T>::check_finite(const std::string& what) const {
  if (!all_finite()) throw std::domain_error("non-finite values in " + what);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace {

constexpr char kTensorMagic[4] = {'R', 'P', 'T', '1'};

template <typename U>
void put_le(std::ostream& os, U v) {
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf, sizeof(U));
}

struct Reader {
  std::istream& is;
  std::size_t offset;

  void read(char* dst, std::size_t n, const char* what) {
    is.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is.gcount()) != n)
      throw FormatError(std::string("truncated tensor while reading ") + what + " at offset " +
                        std::to_string(offset + static_cast<std::size_t>(is.gcount())));
    offset += n;
  }
  template <typename U>
  U get_le(const char* what) {
    unsigned char buf[sizeof(U)];
    read(reinterpret_cast<char*>(buf), sizeof(U), what);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
  }
};

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("rank exceeds 255");
  os.write(kTensorMagic, 4);
  os.put(static_cast<char>(dtype_of<T>()));
  os.put(static_cast<char>(t.rank()));
  for (auto d : t.shape()) {
    if (d > 0xFFFFFFFFu) throw ShapeError("dimension exceeds u32");
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>)
      put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(v));
    else
      put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
  }
}

template <typename T>
Tensor<T> read_tensor(std::istream& is, std::size_t base_offset) {
  Reader r{is, base_offset};
  char magic[4];
  const std::size_t magic_at = r.offset;
  r.read(magic, 4, "magic");
  if (!std::equal(magic, magic + 4, kTensorMagic))
    throw FormatError("bad tensor magic at offset " + std::to_string(magic_at));
  const auto dtype = r.get_le<std::uint8_t>("dtype");
  if (dtype > 1)
    throw FormatError("unknown dtype " + std::to_string(dtype) + " at offset " + std::to_string(r.offset - 1));
  const auto rank = r.get_le<std::uint8_t>("rank");
  Shape shape(rank);
  for (auto& d : shape) {
    d = r.get_le<std::uint32_t>("shape");
    if (d == 0) throw FormatError("zero dimension at offset " + std::to_string(r.offset - 4));
  }
  const std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (dtype == 0)
      data[i] = static_cast<T>(std::bit_cast<float>(r.get_le<std::uint32_t>("data")));
    else
      data[i] = static_cast<T>(std::bit_cast<double>(r.get_le<std::uint64_t>("data")));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  try {
    return read_tensor<T>(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

#define REPILN_INSTANTIATE(T)                                         \
  template class Tensor<T>;                                           \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);        \
  template void write_tensor(std::ostream&, const Tensor<T>&);        \
  template Tensor<T> read_tensor(std::istream&, std::size_t);         \
  template void save_tensor(const std::string&, const Tensor<T>&);    \
  template Tensor<T> load_tensor(const std::string&);

REPILN_INSTANTIATE(float)
REPILN_INSTANTIATE(double)

}  // namespace repiln
