#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "helix4d/common.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

enum class MaskPattern { Full, Causal, SlidingWindow, SpatialBlock, SlidingWindowAnchor };

inline const char* pattern_name(MaskPattern p) {
  switch (p) {
    case MaskPattern::Full: return "full";
    case MaskPattern::Causal: return "causal";
    case MaskPattern::SlidingWindow: return "sliding";
    case MaskPattern::SpatialBlock: return "spatial";
    case MaskPattern::SlidingWindowAnchor: return "anchor";
  }
  return "?";
}

inline MaskPattern parse_pattern(const std::string& name) {
  if (name == "full") return MaskPattern::Full;
  if (name == "causal") return MaskPattern::Causal;
  if (name == "sliding") return MaskPattern::SlidingWindow;
  if (name == "spatial") return MaskPattern::SpatialBlock;
  if (name == "anchor") return MaskPattern::SlidingWindowAnchor;
  throw ConfigError("unknown attention pattern '" + name + "' (expected full|causal|sliding|spatial|anchor)");
}

/// Query/key tokens that share one allowed-key set. Every query of the
/// sequence belongs to exactly one group.
struct AttentionGroup {
  std::vector<int> queries;
  std::vector<int> keys;
};

/// Cross-frame attention mask stored as an F x F frame-block matrix plus,
/// for the spatial pattern, one block id per token. Never materialized as
/// an S x S bitmap.
class AttentionMask {
 public:
  MaskPattern pattern() const { return pattern_; }
  int window() const { return window_; }
  int block_edge() const { return block_edge_; }
  int num_frames() const { return static_cast<int>(frame_lengths_.size()); }
  const std::vector<std::size_t>& frame_lengths() const { return frame_lengths_; }
  std::size_t total_length() const { return frame_offsets_.back(); }
  std::uint64_t pair_count() const { return pair_count_; }

  bool frame_allowed(int f_query, int f_key) const {
    return frame_map_[static_cast<std::size_t>(f_query) * frame_lengths_.size() + static_cast<std::size_t>(f_key)] != 0;
  }

  int frame_of(std::size_t flat) const {
    const auto it = std::upper_bound(frame_offsets_.begin(), frame_offsets_.end(), flat);
    return static_cast<int>(it - frame_offsets_.begin()) - 1;
  }

  /// M_{q,k} on flat token indices.
  bool allowed(std::size_t q, std::size_t k) const {
    if (pattern_ == MaskPattern::SpatialBlock) return block_ids_[q] == block_ids_[k];
    return frame_allowed(frame_of(q), frame_of(k));
  }

  std::vector<AttentionGroup> groups() const {
    std::vector<AttentionGroup> out;
    if (pattern_ == MaskPattern::SpatialBlock) {
      std::map<std::uint64_t, std::size_t> slot;
      for (std::size_t i = 0; i < block_ids_.size(); ++i) {
        auto [it, fresh] = slot.try_emplace(block_ids_[i], out.size());
        if (fresh) out.emplace_back();
        out[it->second].queries.push_back(static_cast<int>(i));
      }
      for (auto& g : out) g.keys = g.queries;
      return out;
    }
    const int nf = num_frames();
    out.resize(static_cast<std::size_t>(nf));
    for (int f = 0; f < nf; ++f) {
      auto& g = out[static_cast<std::size_t>(f)];
      g.queries.resize(frame_lengths_[static_cast<std::size_t>(f)]);
      std::iota(g.queries.begin(), g.queries.end(), static_cast<int>(frame_offsets_[static_cast<std::size_t>(f)]));
      for (int fk = 0; fk < nf; ++fk) {
        if (!frame_allowed(f, fk)) continue;
        for (std::size_t k = frame_offsets_[static_cast<std::size_t>(fk)]; k < frame_offsets_[static_cast<std::size_t>(fk) + 1]; ++k) {
          g.keys.push_back(static_cast<int>(k));
        }
      }
    }
    return out;
  }

  template <typename Pred>
  static AttentionMask from_frame_rule(MaskPattern pattern, std::vector<std::size_t> frame_lengths, Pred rule,
                                       int window = 0) {
    if (frame_lengths.empty()) throw std::invalid_argument("attention mask: need at least one frame");
    AttentionMask m;
    m.pattern_ = pattern;
    m.window_ = window;
    m.set_lengths(std::move(frame_lengths));
    const std::size_t nf = m.frame_lengths_.size();
    m.frame_map_.assign(nf * nf, 0);
    m.pair_count_ = 0;
    for (std::size_t f = 0; f < nf; ++f) {
      for (std::size_t fk = 0; fk < nf; ++fk) {
        if (!rule(static_cast<int>(f), static_cast<int>(fk))) continue;
        m.frame_map_[f * nf + fk] = 1;
        m.pair_count_ += static_cast<std::uint64_t>(m.frame_lengths_[f]) * m.frame_lengths_[fk];
      }
    }
    return m;
  }

  static AttentionMask from_block_ids(std::vector<std::size_t> frame_lengths, std::vector<std::uint64_t> block_ids,
                                      int block_edge) {
    AttentionMask m;
    m.pattern_ = MaskPattern::SpatialBlock;
    m.block_edge_ = block_edge;
    m.set_lengths(std::move(frame_lengths));
    if (block_ids.size() != m.total_length()) throw std::invalid_argument("attention mask: one block id per token required");
    const std::size_t nf = m.frame_lengths_.size();
    m.frame_map_.assign(nf * nf, 1);
    m.block_ids_ = std::move(block_ids);
    std::map<std::uint64_t, std::uint64_t> counts;
    for (const auto id : m.block_ids_) ++counts[id];
    m.pair_count_ = 0;
    for (const auto& [id, c] : counts) m.pair_count_ += c * c;
    return m;
  }

 private:
  void set_lengths(std::vector<std::size_t> lengths) {
    frame_lengths_ = std::move(lengths);
    frame_offsets_.assign(1, 0);
    for (const auto len : frame_lengths_) frame_offsets_.push_back(frame_offsets_.back() + len);
  }

  MaskPattern pattern_ = MaskPattern::Full;
  int window_ = 0;
  int block_edge_ = 0;
  std::vector<std::size_t> frame_lengths_;
  std::vector<std::size_t> frame_offsets_{0};
  std::vector<std::uint8_t> frame_map_;
  std::vector<std::uint64_t> block_ids_;
  std::uint64_t pair_count_ = 0;
};

inline AttentionMask full_mask(std::vector<std::size_t> frame_lengths) {
  return AttentionMask::from_frame_rule(MaskPattern::Full, std::move(frame_lengths), [](int, int) { return true; });
}

inline AttentionMask causal_mask(std::vector<std::size_t> frame_lengths) {
  return AttentionMask::from_frame_rule(MaskPattern::Causal, std::move(frame_lengths),
                                        [](int f, int fk) { return fk <= f; });
}

/// |f - f'| <= w.
inline AttentionMask sliding_mask(std::vector<std::size_t> frame_lengths, int w) {
  if (w < 0) throw ConfigError("sliding window half-width must be >= 0");
  return AttentionMask::from_frame_rule(
      MaskPattern::SlidingWindow, std::move(frame_lengths), [w](int f, int fk) { return std::abs(f - fk) <= w; }, w);
}

/// |f - f'| <= w or f' = 0.
inline AttentionMask anchor_mask(std::vector<std::size_t> frame_lengths, int w) {
  if (w < 0) throw ConfigError("sliding window half-width must be >= 0");
  return AttentionMask::from_frame_rule(
      MaskPattern::SlidingWindowAnchor, std::move(frame_lengths),
      [w](int f, int fk) { return std::abs(f - fk) <= w || fk == 0; }, w);
}

/// Tokens attend, across all frames, only to tokens whose voxel lies in the
/// same b x b x b block.
inline AttentionMask spatial_block_mask(const SpacetimeSequence& seq, int block_edge) {
  const int n = seq.grid_resolution();
  if (block_edge < 1 || n % block_edge != 0) {
    throw ConfigError("spatial block edge " + std::to_string(block_edge) + " does not divide grid resolution " +
                      std::to_string(n));
  }
  const std::uint64_t per_axis = static_cast<std::uint64_t>(n / block_edge);
  std::vector<std::uint64_t> ids;
  ids.reserve(seq.total_length());
  for (const auto& tok : seq.tokens()) {
    const auto bx = static_cast<std::uint64_t>(tok.coord.x / block_edge);
    const auto by = static_cast<std::uint64_t>(tok.coord.y / block_edge);
    const auto bz = static_cast<std::uint64_t>(tok.coord.z / block_edge);
    ids.push_back((bx * per_axis + by) * per_axis + bz);
  }
  return AttentionMask::from_block_ids(seq.frame_lengths(), std::move(ids), block_edge);
}

inline std::uint64_t count_pairs(const AttentionMask& mask) { return mask.pair_count(); }

inline double cost_ratio(const AttentionMask& a, const AttentionMask& b) {
  if (a.frame_lengths() != b.frame_lengths()) throw std::invalid_argument("cost_ratio: masks cover different sequences");
  return static_cast<double>(a.pair_count()) / static_cast<double>(b.pair_count());
}

struct MaskSettings {
  MaskPattern pattern = MaskPattern::SlidingWindowAnchor;
  int window_halfwidth = 2;
  int blocks_per_axis = 8;
  /// Overrides blocks_per_axis when > 0.
  int block_edge = 0;

  int edge_for(int grid_n) const {
    if (block_edge > 0) return block_edge;
    if (blocks_per_axis < 1 || grid_n % blocks_per_axis != 0) {
      throw ConfigError("attention.blocks_per_axis=" + std::to_string(blocks_per_axis) +
                        " does not divide grid_n=" + std::to_string(grid_n));
    }
    return grid_n / blocks_per_axis;
  }
};

inline AttentionMask make_mask(const MaskSettings& s, const SpacetimeSequence& seq) {
  switch (s.pattern) {
    case MaskPattern::Full: return full_mask(seq.frame_lengths());
    case MaskPattern::Causal: return causal_mask(seq.frame_lengths());
    case MaskPattern::SlidingWindow: return sliding_mask(seq.frame_lengths(), s.window_halfwidth);
    case MaskPattern::SlidingWindowAnchor: return anchor_mask(seq.frame_lengths(), s.window_halfwidth);
    case MaskPattern::SpatialBlock: return spatial_block_mask(seq, s.edge_for(seq.grid_resolution()));
  }
  throw ConfigError("unreachable mask pattern");
}

}  // namespace helix4d
