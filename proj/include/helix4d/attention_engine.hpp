#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "helix4d/attention_masks.hpp"
#include "helix4d/common.hpp"
#include "helix4d/rope4d.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

struct ExecutionOptions {
  /// Serial execution in a fixed reduction order.
  bool deterministic = true;
  int threads = 1;
};

/// Multi-head self-attention weights. Tokens are rows: Q = X * wq.
template <typename Scalar>
struct AttentionLayerParams {
  Mat<Scalar> wq, wk, wv, wo;
  int heads = 1;

  int d_model() const { return static_cast<int>(wq.rows()); }
  int d_head() const { return d_model() / heads; }

  void validate() const {
    const auto d = wq.rows();
    if (heads < 1 || d % heads != 0) {
      throw ConfigError("d_model=" + std::to_string(d) + " is not divisible by heads=" + std::to_string(heads));
    }
    for (const Mat<Scalar>* w : {&wq, &wk, &wv, &wo}) {
      if (w->rows() != d || w->cols() != d) throw ConfigError("attention weights must all be d_model x d_model");
    }
  }
};

/// Saved forward state for the backward pass.
template <typename Scalar>
struct AttentionCache {
  Mat<Scalar> x, q, k, v, o;  // q, k already rotated
  std::vector<AttentionGroup> groups;
  // probs[g * heads + h]: |queries| x |keys| softmax weights.
  std::vector<Mat<Scalar>> probs;
};

template <typename Scalar>
struct AttentionGrads {
  Mat<Scalar> wq, wk, wv, wo;
  Mat<Scalar> dx;
};

namespace detail {

template <typename Scalar>
void rotate_heads(Mat<Scalar>& m, const RotaryTable& table, int heads, int d_head, bool inverse) {
  if (table.planes() * 2 != d_head) {
    throw ConfigError("rotary table has " + std::to_string(table.planes()) + " planes, head dimension " +
                      std::to_string(d_head) + " needs " + std::to_string(d_head / 2));
  }
  if (table.tokens() != m.rows()) throw std::invalid_argument("rotary table does not cover every token");
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (int h = 0; h < heads; ++h) rotate_planes(m.data() + i * m.cols() + h * d_head, table, i, inverse);
  }
}

template <typename Scalar>
void attend_group(const AttentionGroup& g, const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                  int heads, int d_head, Scalar scale, Mat<Scalar>& o, Mat<Scalar>* probs_out) {
  if (g.keys.empty()) throw std::logic_error("attention: a query has no allowed keys (mask is not reflexive)");
  for (int h = 0; h < heads; ++h) {
    const auto cols = Eigen::seqN(h * d_head, d_head);
    const Mat<Scalar> qg = q(g.queries, cols);
    const Mat<Scalar> kg = k(g.keys, cols);
    Mat<Scalar> p = (qg * kg.transpose()) * scale;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
      auto row = p.row(r);
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    o(g.queries, cols) = p * v(g.keys, cols);
    if (probs_out != nullptr) probs_out[h] = std::move(p);
  }
}

}  // namespace detail

/// Sparse masked attention on a token feature matrix X (S x D). Each group
/// computes a dense softmax only over its allowed keys; no S x S buffer is
/// formed. Output is (softmax(QK^T / sqrt(d_head)) V) * wo per head.
template <typename Scalar>
Mat<Scalar> attention_forward(const Mat<Scalar>& x, const AttentionLayerParams<Scalar>& params,
                              const std::vector<AttentionGroup>& groups, const RotaryTable& table,
                              AttentionCache<Scalar>* cache = nullptr, const ExecutionOptions& exec = {}) {
  const int heads = params.heads;
  const int dh = params.d_head();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  Mat<Scalar> q = x * params.wq;
  Mat<Scalar> k = x * params.wk;
  Mat<Scalar> v = x * params.wv;
  detail::rotate_heads(q, table, heads, dh, false);
  detail::rotate_heads(k, table, heads, dh, false);

  Mat<Scalar> o(x.rows(), x.cols());
  std::vector<Mat<Scalar>> probs;
  if (cache != nullptr) probs.resize(groups.size() * static_cast<std::size_t>(heads));

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t gi = begin; gi < end; ++gi) {
      detail::attend_group(groups[gi], q, k, v, heads, dh, scale, o,
                           cache != nullptr ? probs.data() + gi * static_cast<std::size_t>(heads) : nullptr);
    }
  };
  const int threads = exec.deterministic ? 1 : std::max(1, exec.threads);
  if (threads == 1 || groups.size() < 2) {
    run_range(0, groups.size());
  } else {
    // Groups write disjoint query rows, so the split does not change results.
    std::vector<std::thread> pool;
    const std::size_t chunk = (groups.size() + static_cast<std::size_t>(threads) - 1) / static_cast<std::size_t>(threads);
    for (std::size_t b = 0; b < groups.size(); b += chunk) {
      pool.emplace_back(run_range, b, std::min(groups.size(), b + chunk));
    }
    for (auto& t : pool) t.join();
  }

  Mat<Scalar> y = o * params.wo;
  if (cache != nullptr) {
    cache->x = x;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->groups = groups;
    cache->probs = std::move(probs);
  }
  return y;
}

template <typename Scalar>
AttentionGrads<Scalar> attention_backward(const Mat<Scalar>& dy, const AttentionLayerParams<Scalar>& params,
                                          const AttentionCache<Scalar>& cache, const RotaryTable& table) {
  const int heads = params.heads;
  const int dh = params.d_head();
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));

  AttentionGrads<Scalar> g;
  g.wo = cache.o.transpose() * dy;
  const Mat<Scalar> d_o = dy * params.wo.transpose();

  Mat<Scalar> dq = Mat<Scalar>::Zero(cache.q.rows(), cache.q.cols());
  Mat<Scalar> dk = Mat<Scalar>::Zero(cache.k.rows(), cache.k.cols());
  Mat<Scalar> dv = Mat<Scalar>::Zero(cache.v.rows(), cache.v.cols());

  for (std::size_t gi = 0; gi < cache.groups.size(); ++gi) {
    const auto& grp = cache.groups[gi];
    for (int h = 0; h < heads; ++h) {
      const auto cols = Eigen::seqN(h * dh, dh);
      const Mat<Scalar>& p = cache.probs[gi * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
      const Mat<Scalar> dog = d_o(grp.queries, cols);
      const Mat<Scalar> vg = cache.v(grp.keys, cols);
      const Mat<Scalar> kg = cache.k(grp.keys, cols);
      const Mat<Scalar> qg = cache.q(grp.queries, cols);

      Mat<Scalar> dp = dog * vg.transpose();
      const Vec<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum();
      Mat<Scalar> ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;

      const Mat<Scalar> dv_g = p.transpose() * dog;
      const Mat<Scalar> dk_g = ds.transpose() * qg;
      dq(grp.queries, cols) += ds * kg;
      // Key lists hold no duplicates within one group.
      dk(grp.keys, cols) += dk_g;
      dv(grp.keys, cols) += dv_g;
    }
  }

  detail::rotate_heads(dq, table, heads, dh, true);
  detail::rotate_heads(dk, table, heads, dh, true);

  g.wq = cache.x.transpose() * dq;
  g.wk = cache.x.transpose() * dk;
  g.wv = cache.x.transpose() * dv;
  g.dx = dq * params.wq.transpose() + dk * params.wk.transpose() + dv * params.wv.transpose();
  return g;
}

/// Convenience entry point over a sequence: features are the attention input.
template <RotaryEncoding Encoding>
Mat<double> masked_attention(const SpacetimeSequence& seq, const AttentionLayerParams<double>& params,
                             const AttentionMask& mask, const Encoding& rotary, const ExecutionOptions& exec = {}) {
  params.validate();
  if (mask.frame_lengths() != seq.frame_lengths()) {
    throw std::invalid_argument("masked_attention: mask frame lengths do not match the sequence");
  }
  const RotaryTable table = make_rotary_table(seq, rotary);
  return attention_forward<double>(seq.feature_matrix(), params, mask.groups(), table, nullptr, exec);
}

// ---------------------------------------------------------------------------
// Dense reference

struct DenseAttentionResult {
  Mat<double> output;
  /// Per head, S x S attention weights (zeros at masked entries).
  std::vector<Mat<double>> weights;
};

inline constexpr std::size_t kDenseReferenceMaxTokens = 4096;

/// Naive oracle: explicit per-token rotation matrices, explicit S x S score
/// matrix with -inf at masked entries, full-row softmax.
inline DenseAttentionResult dense_reference_attention(const SpacetimeSequence& seq,
                                                      const AttentionLayerParams<double>& params,
                                                      const AttentionMask& mask, const Rotary4D& rotary) {
  const std::size_t s = seq.total_length();
  if (s > kDenseReferenceMaxTokens) {
    throw std::invalid_argument("dense_reference_attention: refusing S=" + std::to_string(s) + " > 4096");
  }
  params.validate();
  const int heads = params.heads;
  const int dh = params.d_head();
  const auto n = static_cast<Eigen::Index>(s);
  const Mat<double> x = seq.feature_matrix();
  Mat<double> q = x * params.wq;
  Mat<double> k = x * params.wk;
  const Mat<double> v = x * params.wv;

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& tok = seq[static_cast<std::size_t>(i)];
    const Mat<double> r = rotary_4d(tok.coord, tok.frame, rotary);
    for (int h = 0; h < heads; ++h) {
      q.row(i).segment(h * dh, dh) = (r * q.row(i).segment(h * dh, dh).transpose()).transpose();
      k.row(i).segment(h * dh, dh) = (r * k.row(i).segment(h * dh, dh).transpose()).transpose();
    }
  }

  DenseAttentionResult res;
  Mat<double> o(n, x.cols());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (int h = 0; h < heads; ++h) {
    Mat<double> scores = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (!mask.allowed(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) scores(i, j) = neg_inf;
      }
      const double mx = scores.row(i).maxCoeff();
      scores.row(i) = (scores.row(i).array() - mx).exp().matrix();
      scores.row(i) /= scores.row(i).sum();
    }
    o.middleCols(h * dh, dh) = scores * v.middleCols(h * dh, dh);
    res.weights.push_back(std::move(scores));
  }
  res.output = o * params.wo;
  return res;
}

// ---------------------------------------------------------------------------
// Transformer block

namespace detail {

inline constexpr double kLayerNormEps = 1e-6;

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, Vec<Scalar>* inv_std_out = nullptr) {
  Mat<Scalar> out(x.rows(), x.cols());
  if (inv_std_out != nullptr) inv_std_out->resize(x.rows());
  const Scalar eps = static_cast<Scalar>(kLayerNormEps);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Scalar mean = x.row(i).mean();
    const auto centered = x.row(i).array() - mean;
    const Scalar var = centered.square().mean();
    const Scalar inv = Scalar(1) / std::sqrt(var + eps);
    out.row(i) = (centered * inv).matrix();
    if (inv_std_out != nullptr) (*inv_std_out)(i) = inv;
  }
  return out;
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xhat, const Vec<Scalar>& inv_std) {
  Mat<Scalar> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const Scalar mean_dy = dy.row(i).mean();
    const Scalar mean_dy_xhat = dy.row(i).cwiseProduct(xhat.row(i)).mean();
    dx.row(i) = ((dy.row(i).array() - mean_dy - xhat.row(i).array() * mean_dy_xhat) * inv_std(i)).matrix();
  }
  return dx;
}

template <typename Scalar>
Scalar gelu(Scalar u) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return Scalar(0.5) * u * (Scalar(1) + std::tanh(Scalar(k) * (u + Scalar(0.044715) * u * u * u)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar u) {
  constexpr double k = 0.7978845608028654;
  const Scalar t = std::tanh(Scalar(k) * (u + Scalar(0.044715) * u * u * u));
  return Scalar(0.5) * (Scalar(1) + t) +
         Scalar(0.5) * u * (Scalar(1) - t * t) * Scalar(k) * (Scalar(1) + Scalar(3 * 0.044715) * u * u);
}

}  // namespace detail

template <typename Scalar>
struct BlockParams {
  AttentionLayerParams<Scalar> attn;
  Mat<Scalar> w1, b1, w2, b2;  // MLP: D -> hidden -> D; biases are 1 x n
};

/// Per-token adaptive modulation, each S x D: LN(x) * (1 + scale) + shift.
template <typename Scalar>
struct BlockModulation {
  Mat<Scalar> shift1, scale1, shift2, scale2;
};

template <typename Scalar>
struct BlockCache {
  Mat<Scalar> xhat1, a1, xhat2, b1, pre, act;
  Vec<Scalar> inv1, inv2;
  AttentionCache<Scalar> attn;
};

template <typename Scalar>
struct BlockGrads {
  AttentionGrads<Scalar> attn;
  Mat<Scalar> w1, b1, w2, b2;
  BlockModulation<Scalar> mod;
  Mat<Scalar> dx;
};

/// Pre-norm residual unit: x + Attn(mod1(LN x)), then x + MLP(mod2(LN x)).
template <typename Scalar>
Mat<Scalar> transformer_block(const Mat<Scalar>& x, const BlockParams<Scalar>& p, const BlockModulation<Scalar>& mod,
                              const std::vector<AttentionGroup>& groups, const RotaryTable& table,
                              BlockCache<Scalar>* cache = nullptr, const ExecutionOptions& exec = {}) {
  Vec<Scalar> inv1, inv2;
  Mat<Scalar> xhat1 = detail::layer_norm(x, &inv1);
  Mat<Scalar> a1 = (xhat1.array() * (mod.scale1.array() + Scalar(1)) + mod.shift1.array()).matrix();
  Mat<Scalar> x2 = x + attention_forward(a1, p.attn, groups, table, cache ? &cache->attn : nullptr, exec);

  Mat<Scalar> xhat2 = detail::layer_norm(x2, &inv2);
  Mat<Scalar> b1 = (xhat2.array() * (mod.scale2.array() + Scalar(1)) + mod.shift2.array()).matrix();
  Mat<Scalar> pre = (b1 * p.w1).rowwise() + p.b1.row(0);
  Mat<Scalar> act = pre.unaryExpr([](Scalar u) { return detail::gelu(u); });
  Mat<Scalar> y = x2 + ((act * p.w2).rowwise() + p.b2.row(0));

  if (cache != nullptr) {
    cache->xhat1 = std::move(xhat1);
    cache->a1 = std::move(a1);
    cache->inv1 = std::move(inv1);
    cache->xhat2 = std::move(xhat2);
    cache->b1 = std::move(b1);
    cache->inv2 = std::move(inv2);
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename Scalar>
BlockGrads<Scalar> transformer_block_backward(const Mat<Scalar>& dy, const BlockParams<Scalar>& p,
                                              const BlockModulation<Scalar>& mod, const BlockCache<Scalar>& c,
                                              const RotaryTable& table) {
  BlockGrads<Scalar> g;
  // MLP branch
  g.w2 = c.act.transpose() * dy;
  g.b2 = dy.colwise().sum();
  const Mat<Scalar> dact = dy * p.w2.transpose();
  const Mat<Scalar> dpre = dact.cwiseProduct(c.pre.unaryExpr([](Scalar u) { return detail::gelu_grad(u); }));
  g.w1 = c.b1.transpose() * dpre;
  g.b1 = dpre.colwise().sum();
  const Mat<Scalar> db1 = dpre * p.w1.transpose();
  g.mod.shift2 = db1;
  g.mod.scale2 = db1.cwiseProduct(c.xhat2);
  const Mat<Scalar> dxhat2 = (db1.array() * (mod.scale2.array() + Scalar(1))).matrix();
  const Mat<Scalar> dx2 = dy + detail::layer_norm_backward(dxhat2, c.xhat2, c.inv2);

  // Attention branch
  g.attn = attention_backward(dx2, p.attn, c.attn, table);
  g.mod.shift1 = g.attn.dx;
  g.mod.scale1 = g.attn.dx.cwiseProduct(c.xhat1);
  const Mat<Scalar> dxhat1 = (g.attn.dx.array() * (mod.scale1.array() + Scalar(1))).matrix();
  g.dx = dx2 + detail::layer_norm_backward(dxhat1, c.xhat1, c.inv1);
  return g;
}

}  // namespace helix4d
