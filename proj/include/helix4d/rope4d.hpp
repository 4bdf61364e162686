#pragma once

#include <cmath>
#include <concepts>
#include <span>
#include <string>
#include <vector>

#include "helix4d/common.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

/// Per-axis rotary frequencies omega_i = theta^(-2(i-1)/M), i = 1..M.
struct FrequencySchedule {
  int pairs = 0;
  double theta = 10000.0;
  std::vector<double> omegas;

  /// Same formula continued past i = M; used when the temporal band needs
  /// more planes than one axis owns (alpha < 2/3).
  double omega(int i) const {
    if (i >= 1 && i <= pairs) return omegas[static_cast<std::size_t>(i - 1)];
    return std::pow(theta, -2.0 * (i - 1) / pairs);
  }
};

inline FrequencySchedule build_schedule(int pairs, double theta = 10000.0) {
  if (pairs < 1) throw ConfigError("build_schedule: need at least one frequency pair, got " + std::to_string(pairs));
  if (!(theta > 1.0)) throw ConfigError("build_schedule: theta must exceed 1");
  FrequencySchedule s;
  s.pairs = pairs;
  s.theta = theta;
  s.omegas.resize(static_cast<std::size_t>(pairs));
  for (int i = 1; i <= pairs; ++i) s.omegas[static_cast<std::size_t>(i - 1)] = std::pow(theta, -2.0 * (i - 1) / pairs);
  return s;
}

/// 2x2 rotation R(phi) written into `out` at (row, row).
template <typename Derived>
void put_plane(Eigen::MatrixBase<Derived>& out, Eigen::Index row, double phi) {
  const double c = std::cos(phi);
  const double s = std::sin(phi);
  out(row, row) = c;
  out(row, row + 1) = -s;
  out(row + 1, row) = s;
  out(row + 1, row + 1) = c;
}

/// Block-diagonal 2M x 2M matrix whose i-th block rotates by omega_i * p.
inline Mat<double> axis_rotary(int p, const FrequencySchedule& schedule) {
  Mat<double> r = Mat<double>::Zero(2 * schedule.pairs, 2 * schedule.pairs);
  for (int i = 0; i < schedule.pairs; ++i) put_plane(r, 2 * i, schedule.omegas[static_cast<std::size_t>(i)] * p);
  return r;
}

inline Mat<double> block_diagonal(std::span<const Mat<double>> blocks) {
  Eigen::Index n = 0;
  for (const auto& b : blocks) n += b.rows();
  Mat<double> out = Mat<double>::Zero(n, n);
  Eigen::Index at = 0;
  for (const auto& b : blocks) {
    out.block(at, at, b.rows(), b.cols()) = b;
    at += b.rows();
  }
  return out;
}

/// x, then y, then z per-axis blocks; D_head = 6M.
inline Mat<double> spatial_rotary_3d(const VoxelCoord& coord, const FrequencySchedule& schedule) {
  const Mat<double> blocks[] = {axis_rotary(coord.x, schedule), axis_rotary(coord.y, schedule),
                                axis_rotary(coord.z, schedule)};
  return block_diagonal(blocks);
}

namespace detail {

inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5 + 1e-9)); }

}  // namespace detail

/// Per-axis rotary with the low-frequency tail replaced by identity planes:
/// the first `kept` planes (largest omega) rotate, the remaining M - kept do not.
struct TruncatedAxisRotary {
  FrequencySchedule schedule;
  int kept = 0;

  Mat<double> matrix(int p) const {
    Mat<double> r = Mat<double>::Identity(2 * schedule.pairs, 2 * schedule.pairs);
    for (int i = 0; i < kept; ++i) put_plane(r, 2 * i, schedule.omegas[static_cast<std::size_t>(i)] * p);
    return r;
  }
};

inline TruncatedAxisRotary truncate_low_frequencies(const FrequencySchedule& schedule, double alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) throw ConfigError("truncate_low_frequencies: alpha must lie in (0, 1]");
  return {schedule, std::min(schedule.pairs, detail::round_half_up(alpha * schedule.pairs))};
}

/// Anything that assigns D_head/2 rotation angles to a (voxel, frame) position.
template <typename T>
concept RotaryEncoding = requires(const T& r, const VoxelCoord& c, int t, std::span<double> out) {
  { r.plane_count() } -> std::convertible_to<int>;
  r.fill_angles(c, t, out);
};

/// Spatial-only 3D rotary with per-axis truncation kept in place
/// (x: [high | I], y: [high | I], z: [high | I]). `kept_per_axis == M` is the
/// untruncated baseline; 0 disables positional rotation entirely.
class TruncatedSpatialRotary {
 public:
  TruncatedSpatialRotary(FrequencySchedule schedule, int kept_per_axis)
      : schedule_(std::move(schedule)), kept_(kept_per_axis) {
    if (kept_ < 0 || kept_ > schedule_.pairs) throw ConfigError("TruncatedSpatialRotary: kept planes out of range");
  }

  /// Ratio form used by the RoPE-ratio sweep; alpha = 0 keeps no planes.
  static TruncatedSpatialRotary from_ratio(const FrequencySchedule& schedule, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("rope ratio must lie in [0, 1]");
    const int kept = alpha == 0.0 ? 0 : truncate_low_frequencies(schedule, alpha).kept;
    return {schedule, kept};
  }

  int plane_count() const { return 3 * schedule_.pairs; }
  int kept_per_axis() const { return kept_; }
  const FrequencySchedule& schedule() const { return schedule_; }

  void fill_angles(const VoxelCoord& c, int /*t*/, std::span<double> out) const {
    const int m = schedule_.pairs;
    for (int a = 0; a < 3; ++a) {
      for (int i = 0; i < m; ++i) {
        out[static_cast<std::size_t>(a * m + i)] = i < kept_ ? schedule_.omegas[static_cast<std::size_t>(i)] * c[a] : 0.0;
      }
    }
  }

 private:
  FrequencySchedule schedule_;
  int kept_ = 0;
};

/// Spatiotemporal rotary: per-axis top-frequency spatial planes
/// (x high, y high, z high) followed by a temporal block whose frequencies
/// are the leading entries of the per-axis schedule scaled by N/T.
class Rotary4D {
 public:
  static Rotary4D make(int d_head, double alpha, double theta, int grid_n, int frames_t) {
    if (d_head <= 0 || d_head % 6 != 0) {
      throw ConfigError("d_head=" + std::to_string(d_head) + " must be a positive multiple of 6 (M = d_head/6 pairs per axis)");
    }
    if (!(alpha > 0.0) || alpha > 1.0) throw ConfigError("alpha must lie in (0, 1]");
    if (std::abs(alpha - 0.75) < 1e-12 && d_head % 24 != 0) {
      throw ConfigError("d_head=" + std::to_string(d_head) +
                        " must be divisible by 24 for alpha=0.75 (3*alpha*M spatial planes must be integral)");
    }
    if (grid_n < 1 || frames_t < 1) throw ConfigError("grid_n and frames_t must be >= 1");
    Rotary4D r;
    r.d_head_ = d_head;
    r.alpha_ = alpha;
    r.grid_n_ = grid_n;
    r.frames_t_ = frames_t;
    r.schedule_ = build_schedule(d_head / 6, theta);
    r.spatial_ = truncate_low_frequencies(r.schedule_, alpha).kept;
    r.temporal_ = d_head / 2 - 3 * r.spatial_;
    const double ratio = static_cast<double>(grid_n) / frames_t;
    for (int j = 1; j <= r.temporal_; ++j) r.temporal_omegas_.push_back(ratio * r.schedule_.omega(j));
    return r;
  }

  int d_head() const { return d_head_; }
  double alpha() const { return alpha_; }
  int grid_n() const { return grid_n_; }
  int frames_t() const { return frames_t_; }
  int spatial_pairs_per_axis() const { return spatial_; }
  int temporal_pairs() const { return temporal_; }
  const FrequencySchedule& schedule() const { return schedule_; }
  const std::vector<double>& temporal_omegas() const { return temporal_omegas_; }
  int plane_count() const { return d_head_ / 2; }

  void check_position(const VoxelCoord& c, int t) const {
    if (!c.in_grid(grid_n_)) throw std::out_of_range("rotary: voxel coordinate outside [0, N-1]^3");
    if (t < 0 || t >= frames_t_) {
      throw std::out_of_range("rotary: frame index " + std::to_string(t) + " outside [0, " + std::to_string(frames_t_ - 1) + "]");
    }
  }

  void fill_angles(const VoxelCoord& c, int t, std::span<double> out) const {
    for (int a = 0; a < 3; ++a) {
      for (int i = 0; i < spatial_; ++i) {
        out[static_cast<std::size_t>(a * spatial_ + i)] = schedule_.omegas[static_cast<std::size_t>(i)] * c[a];
      }
    }
    for (int j = 0; j < temporal_; ++j) {
      out[static_cast<std::size_t>(3 * spatial_ + j)] = temporal_omegas_[static_cast<std::size_t>(j)] * t;
    }
  }

 private:
  int d_head_ = 0;
  double alpha_ = 1.0;
  int grid_n_ = 1;
  int frames_t_ = 1;
  int spatial_ = 0;
  int temporal_ = 0;
  FrequencySchedule schedule_;
  std::vector<double> temporal_omegas_;
};

/// Dense D_head x D_head rotation for (coord, t).
inline Mat<double> rotary_4d(const VoxelCoord& coord, int t, const Rotary4D& cfg) {
  cfg.check_position(coord, t);
  std::vector<double> angles(static_cast<std::size_t>(cfg.plane_count()));
  cfg.fill_angles(coord, t, angles);
  Mat<double> r = Mat<double>::Zero(cfg.d_head(), cfg.d_head());
  for (int i = 0; i < cfg.plane_count(); ++i) put_plane(r, 2 * i, angles[static_cast<std::size_t>(i)]);
  return r;
}

inline Vec<double> apply_rotary(const Vec<double>& v, const Mat<double>& rotation) {
  if (rotation.cols() != v.size() || rotation.rows() != v.size()) {
    throw std::invalid_argument("apply_rotary: vector has " + std::to_string(v.size()) +
                                " entries, rotation is " + std::to_string(rotation.rows()) + "x" +
                                std::to_string(rotation.cols()));
  }
  return rotation * v;
}

/// Cached per-token (cos, sin) for every rotation plane; S x P each.
struct RotaryTable {
  Mat<double> cos;
  Mat<double> sin;

  int planes() const { return static_cast<int>(cos.cols()); }
  Eigen::Index tokens() const { return cos.rows(); }
};

template <RotaryEncoding Encoding>
RotaryTable make_rotary_table(const SpacetimeSequence& seq, const Encoding& enc) {
  const int planes = enc.plane_count();
  RotaryTable table;
  table.cos.resize(static_cast<Eigen::Index>(seq.total_length()), planes);
  table.sin.resize(static_cast<Eigen::Index>(seq.total_length()), planes);
  std::vector<double> angles(static_cast<std::size_t>(planes));
  for (std::size_t i = 0; i < seq.total_length(); ++i) {
    const auto& tok = seq[i];
    if constexpr (requires { enc.check_position(tok.coord, tok.frame); }) enc.check_position(tok.coord, tok.frame);
    enc.fill_angles(tok.coord, tok.frame, angles);
    for (int p = 0; p < planes; ++p) {
      table.cos(static_cast<Eigen::Index>(i), p) = std::cos(angles[static_cast<std::size_t>(p)]);
      table.sin(static_cast<Eigen::Index>(i), p) = std::sin(angles[static_cast<std::size_t>(p)]);
    }
  }
  return table;
}

/// In-place plane-wise rotation of one head-sized row by token `tok` of the
/// table; `inverse` applies R^T.
template <typename Scalar>
void rotate_planes(Scalar* v, const RotaryTable& table, Eigen::Index tok, bool inverse = false) {
  const int planes = table.planes();
  for (int p = 0; p < planes; ++p) {
    const Scalar c = static_cast<Scalar>(table.cos(tok, p));
    const Scalar s = inverse ? static_cast<Scalar>(-table.sin(tok, p)) : static_cast<Scalar>(table.sin(tok, p));
    const Scalar a = v[2 * p];
    const Scalar b = v[2 * p + 1];
    v[2 * p] = a * c - b * s;
    v[2 * p + 1] = a * s + b * c;
  }
}

}  // namespace helix4d
