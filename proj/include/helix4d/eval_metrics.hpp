#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "helix4d/common.hpp"

namespace helix4d {

using PointCloud = std::vector<Vec3>;

struct PointCloudSequence {
  std::vector<PointCloud> frames;
};

// ---------------------------------------------------------------------------
// Exact nearest neighbour

/// Static 3-d tree over a point cloud; queries return the exact nearest point.
class KdTree {
 public:
  explicit KdTree(const PointCloud& points) : points_(&points), order_(points.size()) {
    std::iota(order_.begin(), order_.end(), 0u);
    if (!order_.empty()) build(0, order_.size(), 0);
  }

  struct Hit {
    std::size_t index = 0;
    double dist2 = std::numeric_limits<double>::infinity();
  };

  Hit nearest(const Vec3& q) const {
    Hit best;
    if (!order_.empty()) search(0, order_.size(), 0, q, best);
    return best;
  }

 private:
  void build(std::size_t lo, std::size_t hi, int depth) {
    if (hi - lo <= kLeaf) return;
    const int axis = depth % 3;
    const std::size_t mid = lo + (hi - lo) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(lo), order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(hi), [&](std::uint32_t a, std::uint32_t b) {
                       return (*points_)[a][axis] < (*points_)[b][axis];
                     });
    build(lo, mid, depth + 1);
    build(mid + 1, hi, depth + 1);
  }

  void search(std::size_t lo, std::size_t hi, int depth, const Vec3& q, Hit& best) const {
    if (hi - lo <= kLeaf) {
      for (std::size_t i = lo; i < hi; ++i) consider(order_[i], q, best);
      return;
    }
    const int axis = depth % 3;
    const std::size_t mid = lo + (hi - lo) / 2;
    const std::uint32_t pivot = order_[mid];
    consider(pivot, q, best);
    const double delta = q[axis] - (*points_)[pivot][axis];
    const bool left_first = delta < 0.0;
    if (left_first) {
      search(lo, mid, depth + 1, q, best);
      if (delta * delta <= best.dist2) search(mid + 1, hi, depth + 1, q, best);
    } else {
      search(mid + 1, hi, depth + 1, q, best);
      if (delta * delta <= best.dist2) search(lo, mid, depth + 1, q, best);
    }
  }

  void consider(std::uint32_t i, const Vec3& q, Hit& best) const {
    const double d2 = ((*points_)[i] - q).squaredNorm();
    if (d2 < best.dist2 || (d2 == best.dist2 && i < best.index)) best = {i, d2};
  }

  static constexpr std::size_t kLeaf = 8;
  const PointCloud* points_;
  std::vector<std::uint32_t> order_;
};

// ---------------------------------------------------------------------------
// Farthest point sampling

/// Greedy FPS: the first index comes from `seed`, each next point maximizes
/// its distance to the chosen set (ties go to the lowest index).
inline std::vector<std::size_t> farthest_point_indices(const PointCloud& points, std::size_t k, std::uint64_t seed = 0) {
  if (k > points.size()) {
    throw std::invalid_argument("farthest_point_sample: k=" + std::to_string(k) + " exceeds " +
                                std::to_string(points.size()) + " points");
  }
  std::vector<std::size_t> chosen;
  if (k == 0) return chosen;
  chosen.reserve(k);
  auto rng = substream(seed, "fps");
  std::size_t next = uniform_index(rng, points.size());
  std::vector<double> min_d2(points.size(), std::numeric_limits<double>::infinity());
  for (std::size_t round = 0; round < k; ++round) {
    chosen.push_back(next);
    const Vec3& c = points[next];
    double best = -1.0;
    std::size_t best_i = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      min_d2[i] = std::min(min_d2[i], (points[i] - c).squaredNorm());
      if (min_d2[i] > best) {
        best = min_d2[i];
        best_i = i;
      }
    }
    next = best_i;
  }
  return chosen;
}

inline PointCloud farthest_point_sample(const PointCloud& points, std::size_t k, std::uint64_t seed = 0) {
  PointCloud out;
  for (const auto i : farthest_point_indices(points, k, seed)) out.push_back(points[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Chamfer

enum class ChamferConvention { Average, Sum };

/// Mean nearest-neighbour distance from each point of `from` to `to`.
inline double directed_mean_distance(const PointCloud& from, const PointCloud& to) {
  const KdTree tree(to);
  double sum = 0.0;
  for (const auto& p : from) sum += std::sqrt(tree.nearest(p).dist2);
  return sum / static_cast<double>(from.size());
}

/// (mean_a min_b |a-b| + mean_b min_a |b-a|) / 2, or the plain sum.
inline double chamfer_distance(const PointCloud& a, const PointCloud& b,
                               ChamferConvention conv = ChamferConvention::Average) {
  if (a.empty() || b.empty()) throw std::invalid_argument("chamfer_distance: empty point cloud");
  const double ab = directed_mean_distance(a, b);
  const double ba = directed_mean_distance(b, a);
  // Sorted addition keeps the result symmetric in (a, b) to the bit.
  const double total = std::min(ab, ba) + std::max(ab, ba);
  return conv == ChamferConvention::Average ? 0.5 * total : total;
}

// ---------------------------------------------------------------------------
// Rigid registration

struct RigidTransform {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }

  PointCloud apply(const PointCloud& pts) const {
    PointCloud out;
    out.reserve(pts.size());
    for (const auto& p : pts) out.push_back(apply(p));
    return out;
  }
};

inline Vec3 centroid(const PointCloud& pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  return c / static_cast<double>(pts.size());
}

struct RigidFit {
  RigidTransform transform;
  bool degenerate = false;
};

/// Closed-form least-squares rigid (optionally similarity) fit mapping
/// src[i] onto dst[i]; reflection-corrected SVD of the cross covariance.
inline RigidFit fit_rigid(const PointCloud& src, const PointCloud& dst, bool estimate_scale = false) {
  if (src.size() != dst.size() || src.empty()) throw std::invalid_argument("fit_rigid: need equally sized nonempty sets");
  const Vec3 cs = centroid(src);
  const Vec3 cd = centroid(dst);
  Mat3 cov = Mat3::Zero();
  double var_src = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const Vec3 a = src[i] - cs;
    cov += (dst[i] - cd) * a.transpose();
    var_src += a.squaredNorm();
  }
  RigidFit fit;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  const double tiny = 1e-12 * std::max(1.0, sv[0]);
  if (src.size() < 3 || sv[1] <= tiny) {
    fit.degenerate = true;
    fit.transform.translation = cd - cs;
    return fit;
  }
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
  double s = 1.0;
  if (estimate_scale && var_src > 0.0) s = (sv.asDiagonal() * d).trace() / var_src;
  fit.transform.rotation = r;
  fit.transform.scale = s;
  fit.transform.translation = cd - s * (r * cs);
  return fit;
}

struct IcpOptions {
  int max_iters = 100;
  double tolerance = 1e-10;
  /// Fraction of worst correspondences dropped per iteration; 0 disables.
  double trim_fraction = 0.0;
  bool estimate_scale = false;
};

struct IcpResult {
  RigidTransform transform;
  /// Mean squared nearest-neighbour distance before the first update and
  /// after each accepted iteration.
  std::vector<double> objective;
  int iterations = 0;
  bool degenerate = false;
};

/// Point-to-point ICP. Starts from the centroid-aligned identity, alternates
/// exact nearest-neighbour matching with a closed-form rigid fit, and stops
/// once the relative objective improvement falls below `tolerance`.
inline IcpResult icp_align(const PointCloud& source, const PointCloud& target, const IcpOptions& opt = {}) {
  if (source.empty() || target.empty()) throw std::invalid_argument("icp_align: empty point cloud");
  const KdTree tree(target);
  IcpResult res;
  res.transform.translation = centroid(target) - centroid(source);
  {
    // A collinear (or single-point) source leaves the rotation unidentifiable.
    const Vec3 c = centroid(source);
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : source) cov += (p - c) * (p - c).transpose();
    const Vec3 sv = Eigen::JacobiSVD<Eigen::Matrix3d>(cov).singularValues();
    res.degenerate = source.size() < 3 || sv[1] <= 1e-12 * std::max(1.0, sv[0]);
  }

  auto match = [&](const RigidTransform& tf, PointCloud* src_out, PointCloud* dst_out) {
    std::vector<std::pair<double, std::size_t>> hits;
    hits.reserve(source.size());
    std::vector<std::size_t> nn(source.size());
    for (std::size_t i = 0; i < source.size(); ++i) {
      const auto h = tree.nearest(tf.apply(source[i]));
      nn[i] = h.index;
      hits.emplace_back(h.dist2, i);
    }
    std::size_t keep = hits.size();
    if (opt.trim_fraction > 0.0) {
      keep = std::max<std::size_t>(3, static_cast<std::size_t>(std::ceil((1.0 - opt.trim_fraction) * hits.size())));
      keep = std::min(keep, hits.size());
      std::nth_element(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep - 1), hits.end());
      std::sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(keep),
                [](const auto& a, const auto& b) { return a.second < b.second; });
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < keep; ++j) {
      sum += hits[j].first;
      if (src_out != nullptr) {
        src_out->push_back(source[hits[j].second]);
        dst_out->push_back(target[nn[hits[j].second]]);
      }
    }
    return sum / static_cast<double>(keep);
  };

  double current = match(res.transform, nullptr, nullptr);
  res.objective.push_back(current);
  for (int it = 0; it < opt.max_iters && current > 0.0; ++it) {
    PointCloud src, dst;
    match(res.transform, &src, &dst);
    const RigidFit fit = fit_rigid(src, dst, opt.estimate_scale);
    if (fit.degenerate) {
      res.degenerate = true;
      RigidTransform shifted = res.transform;
      shifted.translation += centroid(dst) - centroid(res.transform.apply(src));
      const double e = match(shifted, nullptr, nullptr);
      if (e <= current) {
        res.transform = shifted;
        res.objective.push_back(e);
      }
      ++res.iterations;
      break;
    }
    const double next = match(fit.transform, nullptr, nullptr);
    ++res.iterations;
    if (next > current) break;  // numerical noise at convergence
    res.transform = fit.transform;
    res.objective.push_back(next);
    const double improvement = (current - next) / std::max(current, std::numeric_limits<double>::min());
    current = next;
    if (improvement < opt.tolerance) break;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Sequence metrics

struct SequenceMetric {
  double value = 0.0;
  std::vector<double> per_frame;
};

struct MetricOptions {
  IcpOptions icp;
  ChamferConvention chamfer = ChamferConvention::Average;
};

namespace detail {

inline void check_sequences(const PointCloudSequence& pred, const PointCloudSequence& gt) {
  if (pred.frames.size() != gt.frames.size() || gt.frames.empty()) {
    throw std::invalid_argument("sequence metric: frame counts differ or are zero");
  }
  for (std::size_t f = 0; f < gt.frames.size(); ++f) {
    if (pred.frames[f].empty() || gt.frames[f].empty()) {
      throw std::invalid_argument("sequence metric: frame " + std::to_string(f) + " is empty");
    }
  }
}

inline SequenceMetric mean_metric(std::vector<double> per_frame) {
  SequenceMetric m;
  for (const double v : per_frame) m.value += v;
  m.value /= static_cast<double>(per_frame.size());
  m.per_frame = std::move(per_frame);
  return m;
}

}  // namespace detail

/// Mean per-frame Chamfer after aligning each predicted frame separately.
inline SequenceMetric cd3d(const PointCloudSequence& pred, const PointCloudSequence& gt, const MetricOptions& opt = {}) {
  detail::check_sequences(pred, gt);
  std::vector<double> per_frame;
  for (std::size_t f = 0; f < gt.frames.size(); ++f) {
    const auto tf = icp_align(pred.frames[f], gt.frames[f], opt.icp).transform;
    per_frame.push_back(chamfer_distance(tf.apply(pred.frames[f]), gt.frames[f], opt.chamfer));
  }
  return detail::mean_metric(std::move(per_frame));
}

/// Mean per-frame Chamfer after one alignment estimated on frame 0 and
/// applied to every frame.
inline SequenceMetric cd4d(const PointCloudSequence& pred, const PointCloudSequence& gt, const MetricOptions& opt = {}) {
  detail::check_sequences(pred, gt);
  const auto tf = icp_align(pred.frames[0], gt.frames[0], opt.icp).transform;
  std::vector<double> per_frame;
  for (std::size_t f = 0; f < gt.frames.size(); ++f) {
    per_frame.push_back(chamfer_distance(tf.apply(pred.frames[f]), gt.frames[f], opt.chamfer));
  }
  return detail::mean_metric(std::move(per_frame));
}

/// (W + T/2) / (W + L + T).
inline double win_rate(std::uint64_t wins, std::uint64_t losses, std::uint64_t ties) {
  const std::uint64_t n = wins + losses + ties;
  if (n == 0) throw std::invalid_argument("win_rate: no comparisons");
  return (static_cast<double>(wins) + 0.5 * static_cast<double>(ties)) / static_cast<double>(n);
}

}  // namespace helix4d
