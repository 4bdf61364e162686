#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "helix4d/common.hpp"

namespace helix4d {

/// Integer voxel index on an N^3 grid.
struct VoxelCoord {
  int x = 0;
  int y = 0;
  int z = 0;

  friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;

  int operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }

  bool in_grid(int n) const { return x >= 0 && y >= 0 && z >= 0 && x < n && y < n && z < n; }

  std::uint64_t key(int n) const {
    return (static_cast<std::uint64_t>(x) * n + static_cast<std::uint64_t>(y)) * n +
           static_cast<std::uint64_t>(z);
  }
};

/// One token of the sequence-of-sequences. `slot` is 1-based within its frame.
struct SpacetimeToken {
  int frame = 0;
  int slot = 1;
  VoxelCoord coord;
  std::vector<double> feature;
};

/// Immutable frame-major token sequence with ragged per-frame lengths.
///
/// Flat index of token (f, s) is sum_{f' < f} S_{f'} + (s - 1).
class SpacetimeSequence {
 public:
  SpacetimeSequence() = default;

  int grid_resolution() const { return grid_n_; }
  int num_frames() const { return static_cast<int>(frame_lengths_.size()); }
  int temporal_extent() const { return temporal_extent_; }
  int feature_dim() const { return feature_dim_; }
  std::size_t total_length() const { return tokens_.size(); }

  const std::vector<std::size_t>& frame_lengths() const { return frame_lengths_; }
  /// F + 1 prefix offsets; frame f occupies [offsets[f], offsets[f+1]).
  const std::vector<std::size_t>& frame_offsets() const { return frame_offsets_; }

  std::size_t flat_index(int frame, int slot) const {
    if (frame < 0 || frame >= num_frames() || slot < 1 ||
        static_cast<std::size_t>(slot) > frame_lengths_[frame]) {
      throw std::out_of_range("token (" + std::to_string(frame) + "," +
                              std::to_string(slot) + ") is outside the sequence");
    }
    return frame_offsets_[frame] + static_cast<std::size_t>(slot - 1);
  }

  const SpacetimeToken& token(int frame, int slot) const { return tokens_[flat_index(frame, slot)]; }
  const SpacetimeToken& operator[](std::size_t flat) const { return tokens_[flat]; }
  const std::vector<SpacetimeToken>& tokens() const { return tokens_; }

  int frame_of(std::size_t flat) const { return tokens_[flat].frame; }

  /// S x D feature matrix in flat order.
  Mat<double> feature_matrix() const {
    Mat<double> out(static_cast<Eigen::Index>(tokens_.size()), feature_dim_);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      for (int d = 0; d < feature_dim_; ++d) out(static_cast<Eigen::Index>(i), d) = tokens_[i].feature[d];
    }
    return out;
  }

  /// Regroups the flat token list by frame.
  std::vector<std::vector<SpacetimeToken>> frames() const {
    std::vector<std::vector<SpacetimeToken>> out(frame_lengths_.size());
    for (std::size_t f = 0; f < frame_lengths_.size(); ++f) {
      out[f].assign(tokens_.begin() + static_cast<std::ptrdiff_t>(frame_offsets_[f]),
                    tokens_.begin() + static_cast<std::ptrdiff_t>(frame_offsets_[f + 1]));
    }
    return out;
  }

  /// Same layout, new features (one row per token).
  template <typename Derived>
  SpacetimeSequence with_features(const Eigen::MatrixBase<Derived>& features) const {
    if (features.rows() != static_cast<Eigen::Index>(tokens_.size())) {
      throw std::invalid_argument("with_features: row count does not match token count");
    }
    SpacetimeSequence out = *this;
    out.feature_dim_ = static_cast<int>(features.cols());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      auto& feat = out.tokens_[i].feature;
      feat.resize(static_cast<std::size_t>(features.cols()));
      for (Eigen::Index d = 0; d < features.cols(); ++d) {
        feat[static_cast<std::size_t>(d)] = static_cast<double>(features(static_cast<Eigen::Index>(i), d));
      }
    }
    return out;
  }

  friend SpacetimeSequence concatenate_frames(std::vector<std::vector<SpacetimeToken>> per_frame,
                                              int grid_n, std::optional<int> temporal_extent);

 private:
  int grid_n_ = 0;
  int temporal_extent_ = 0;
  int feature_dim_ = 0;
  std::vector<std::size_t> frame_lengths_;
  std::vector<std::size_t> frame_offsets_;
  std::vector<SpacetimeToken> tokens_;
};

/// Builds the frame-major sequence. Frame and slot fields of the input tokens
/// are overwritten with their position in `per_frame`.
inline SpacetimeSequence concatenate_frames(std::vector<std::vector<SpacetimeToken>> per_frame,
                                            int grid_n,
                                            std::optional<int> temporal_extent = std::nullopt) {
  if (per_frame.empty()) throw std::invalid_argument("concatenate_frames: no frames given");
  if (grid_n < 1) throw std::invalid_argument("concatenate_frames: grid resolution must be >= 1");

  SpacetimeSequence seq;
  seq.grid_n_ = grid_n;
  seq.temporal_extent_ = temporal_extent.value_or(static_cast<int>(per_frame.size()));
  if (seq.temporal_extent_ < static_cast<int>(per_frame.size())) {
    throw std::invalid_argument("concatenate_frames: temporal extent smaller than frame count");
  }
  seq.feature_dim_ = -1;
  seq.frame_offsets_.push_back(0);

  for (std::size_t f = 0; f < per_frame.size(); ++f) {
    auto& frame = per_frame[f];
    if (frame.empty()) {
      throw std::invalid_argument("concatenate_frames: frame " + std::to_string(f) + " is empty");
    }
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(frame.size());
    for (std::size_t s = 0; s < frame.size(); ++s) {
      auto& tok = frame[s];
      const int dim = static_cast<int>(tok.feature.size());
      if (seq.feature_dim_ < 0) seq.feature_dim_ = dim;
      if (dim != seq.feature_dim_) {
        throw std::invalid_argument("concatenate_frames: frame " + std::to_string(f) + " slot " +
                                    std::to_string(s + 1) + " has feature dimension " +
                                    std::to_string(dim) + ", expected " +
                                    std::to_string(seq.feature_dim_));
      }
      if (!tok.coord.in_grid(grid_n)) {
        throw std::invalid_argument("concatenate_frames: frame " + std::to_string(f) +
                                    " has a coordinate outside [0, N-1]^3");
      }
      if (!seen.insert(tok.coord.key(grid_n)).second) {
        throw std::invalid_argument("concatenate_frames: frame " + std::to_string(f) +
                                    " contains a duplicated voxel coordinate");
      }
      tok.frame = static_cast<int>(f);
      tok.slot = static_cast<int>(s + 1);
    }
    seq.frame_lengths_.push_back(frame.size());
    seq.frame_offsets_.push_back(seq.frame_offsets_.back() + frame.size());
    std::move(frame.begin(), frame.end(), std::back_inserter(seq.tokens_));
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Normalization

struct BoxNormalization {
  double scale = 1.0;
  Vec3 offset = Vec3::Zero();
  std::vector<std::vector<Vec3>> point_sets;

  Vec3 apply(const Vec3& p) const { return scale * p + offset; }
};

/// Fits the union bounding box of all frames into [-0.5, 0.5]^3 with one
/// isotropic scale and translation shared by every frame. The longest axis
/// spans exactly [-0.5, 0.5].
inline BoxNormalization normalize_sequence_bbox(const std::vector<std::vector<Vec3>>& point_sets) {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  bool any = false;
  for (const auto& frame : point_sets) {
    for (const auto& p : frame) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
      any = true;
    }
  }
  if (!any) throw std::invalid_argument("normalize_sequence_bbox: all frames are empty");

  const double longest = (hi - lo).maxCoeff();
  if (!(longest > 0.0)) {
    throw std::invalid_argument("normalize_sequence_bbox: union bounding box is degenerate");
  }

  BoxNormalization out;
  out.scale = 1.0 / longest;
  const Vec3 center = 0.5 * (lo + hi);
  out.offset = -out.scale * center;
  out.point_sets.reserve(point_sets.size());
  for (const auto& frame : point_sets) {
    auto& dst = out.point_sets.emplace_back();
    dst.reserve(frame.size());
    for (const auto& p : frame) dst.push_back(out.scale * (p - center));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic moving-blob data

struct SyntheticConfig {
  int grid_n = 16;
  int frames = 8;
  double radius = 2.0;
  /// Extra rim (in voxels) of unoccupied tokens around the blob; 0 yields
  /// tokens exactly at the occupied voxels.
  double shell = 0.0;
  /// Displacement per frame, in voxels.
  double speed = 1.0;
  /// Magnitude of constant acceleration bending the path.
  double curvature = 0.15;
  int feature_dim = 4;
  std::uint64_t seed = 0;
};

struct SyntheticSample {
  SpacetimeSequence sequence;
  /// Per frame, N^3 occupancy flags indexed by VoxelCoord::key.
  std::vector<std::vector<std::uint8_t>> occupancy;
  /// Continuous blob centre per frame.
  std::vector<Vec3> centers;
  /// Integer voxel the sphere is rasterized around, per frame.
  std::vector<VoxelCoord> raster_centers;
};

namespace detail {

// Triangle-wave fold of x into [lo, hi].
inline double reflect_into(double x, double lo, double hi) {
  if (hi <= lo) return lo;
  const double span = hi - lo;
  double r = std::fmod(x - lo, 2.0 * span);
  if (r < 0.0) r += 2.0 * span;
  return r <= span ? lo + r : hi - (r - span);
}

}  // namespace detail

/// Sphere of radius `radius` moving on a smooth random path, rasterized
/// around the nearest voxel to its centre. Features per token are
/// [occupancy, offset_x, offset_y, offset_z, 0, ...] where offsets point from
/// the voxel centre to the blob centre, divided by (radius + shell + 1).
inline SyntheticSample synthesize_moving_blob(const SyntheticConfig& cfg) {
  if (cfg.grid_n < 1 || cfg.frames < 1) throw std::invalid_argument("synthesize_moving_blob: empty grid or no frames");
  if (cfg.radius < 0.0 || cfg.shell < 0.0) throw std::invalid_argument("synthesize_moving_blob: negative radius");
  if (cfg.feature_dim < 4) throw std::invalid_argument("synthesize_moving_blob: feature_dim must be >= 4");

  const int n = cfg.grid_n;
  const double reach = cfg.radius + cfg.shell;
  // Keep the whole token footprint inside the grid when it fits.
  const double lo = (n - 1 > 2.0 * reach) ? std::ceil(reach) : 0.0;
  const double hi = (n - 1 > 2.0 * reach) ? (n - 1) - std::ceil(reach) : n - 1.0;

  auto rng = substream(cfg.seed, "synthetic-blob");
  Vec3 start;
  for (int a = 0; a < 3; ++a) start[a] = lo + uniform01(rng) * (hi - lo);
  auto random_unit = [&rng]() {
    Vec3 v(standard_normal(rng), standard_normal(rng), standard_normal(rng));
    const double len = v.norm();
    return len > 0.0 ? Vec3(v / len) : Vec3(1.0, 0.0, 0.0);
  };
  const Vec3 velocity = cfg.speed * random_unit();
  const Vec3 accel = cfg.curvature * random_unit();

  SyntheticSample out;
  std::vector<std::vector<SpacetimeToken>> per_frame(static_cast<std::size_t>(cfg.frames));
  const int ext = static_cast<int>(std::floor(reach));
  const double norm = reach + 1.0;

  for (int f = 0; f < cfg.frames; ++f) {
    Vec3 c = start + velocity * f + 0.5 * accel * (static_cast<double>(f) * f);
    for (int a = 0; a < 3; ++a) c[a] = detail::reflect_into(c[a], lo, hi);
    const VoxelCoord rc{static_cast<int>(std::lround(c.x())), static_cast<int>(std::lround(c.y())),
                        static_cast<int>(std::lround(c.z()))};
    out.centers.push_back(c);
    out.raster_centers.push_back(rc);

    auto& occ = out.occupancy.emplace_back(static_cast<std::size_t>(n) * n * n, std::uint8_t{0});
    auto& tokens = per_frame[static_cast<std::size_t>(f)];
    for (int dx = -ext; dx <= ext; ++dx) {
      for (int dy = -ext; dy <= ext; ++dy) {
        for (int dz = -ext; dz <= ext; ++dz) {
          const VoxelCoord v{rc.x + dx, rc.y + dy, rc.z + dz};
          if (!v.in_grid(n)) continue;
          const double d2 = static_cast<double>(dx * dx + dy * dy + dz * dz);
          if (d2 > reach * reach) continue;
          const bool inside = d2 <= cfg.radius * cfg.radius;
          if (inside) occ[v.key(n)] = 1;
          SpacetimeToken tok;
          tok.coord = v;
          tok.feature.assign(static_cast<std::size_t>(cfg.feature_dim), 0.0);
          tok.feature[0] = inside ? 1.0 : 0.0;
          tok.feature[1] = (c.x() - v.x) / norm;
          tok.feature[2] = (c.y() - v.y) / norm;
          tok.feature[3] = (c.z() - v.z) / norm;
          tokens.push_back(std::move(tok));
        }
      }
    }
  }
  out.sequence = concatenate_frames(std::move(per_frame), n);
  return out;
}

}  // namespace helix4d
