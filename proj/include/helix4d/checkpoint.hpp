#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "helix4d/common.hpp"
#include "helix4d/flow_model.hpp"
#include "helix4d/seq_io.hpp"

namespace helix4d {

// Layout (little-endian):
//   "HLX4D\0"  u32 version  u32 tensor_count
//   per tensor: u32 name_len, name bytes (UTF-8), u32 ndim, u64 dims[ndim],
//               f64 data in row-major order

inline constexpr char kCheckpointMagic[6] = {'H', 'L', 'X', '4', 'D', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<double> data;
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensors(const std::vector<NamedTensor>& tensors) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (const auto d : t.shape) detail::put<std::uint64_t>(out, d);
    for (const double v : t.data) detail::put<double>(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_tensors(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.get_string(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw IoError("not a HLX4D checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.get_string(r.get<std::uint32_t>());
    const auto ndim = r.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < ndim; ++k) {
      t.shape.push_back(r.get<std::uint64_t>());
      n *= t.shape.back();
    }
    t.data.resize(n);
    for (auto& v : t.data) v = r.get<double>();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes");
  return out;
}

template <typename Scalar>
std::vector<NamedTensor> to_tensors(const DenoiserParams<Scalar>& p) {
  std::vector<NamedTensor> out;
  p.visit([&](const std::string& name, const Mat<Scalar>& m) {
    NamedTensor t{name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
    t.data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) t.data.push_back(static_cast<double>(m.data()[i]));
    out.push_back(std::move(t));
  });
  return out;
}

/// Fills a parameter set built from `cfg`; names and shapes must match exactly.
template <typename Scalar>
DenoiserParams<Scalar> from_tensors(const std::vector<NamedTensor>& tensors, const DenoiserConfig& cfg) {
  auto p = DenoiserParams<Scalar>::zeros(cfg);
  std::size_t i = 0;
  p.visit([&](const std::string& name, Mat<Scalar>& m) {
    if (i >= tensors.size()) throw IoError("checkpoint is missing tensor " + name);
    const auto& t = tensors[i++];
    if (t.name != name) throw IoError("checkpoint tensor '" + t.name + "' found where '" + name + "' was expected");
    if (t.shape.size() != 2 || t.shape[0] != static_cast<std::uint64_t>(m.rows()) ||
        t.shape[1] != static_cast<std::uint64_t>(m.cols())) {
      throw IoError("checkpoint tensor '" + name + "' has the wrong shape for this configuration");
    }
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<Scalar>(t.data[static_cast<std::size_t>(k)]);
  });
  if (i != tensors.size()) throw IoError("checkpoint has extra tensors for this configuration");
  return p;
}

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const DenoiserParams<Scalar>& p) {
  detail::write_atomically(path, encode_tensors(to_tensors(p)), true);
}

template <typename Scalar>
DenoiserParams<Scalar> load_checkpoint(const std::filesystem::path& path, const DenoiserConfig& cfg) {
  return from_tensors<Scalar>(decode_tensors(detail::read_file(path, true)), cfg);
}

}  // namespace helix4d
