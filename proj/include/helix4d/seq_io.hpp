#pragma once

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "helix4d/common.hpp"
#include "helix4d/token_model.hpp"

namespace helix4d {

namespace detail {

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
inline void write_atomically(const std::filesystem::path& path, const std::string& contents,
                             bool binary = false) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary | std::ios::trunc : std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path, bool binary = false) {
  std::ifstream is(path, binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

// HELIX-SEQ v1: header `HELIX-SEQ v1 N=<N> F=<F> D=<D>`, then one token per
// line `f s x y z feat_0 ... feat_{D-1}`. %.17g makes the round trip exact.

inline std::string serialize_sequence(const SpacetimeSequence& seq) {
  std::string out = "HELIX-SEQ v1 N=" + std::to_string(seq.grid_resolution()) +
                    " F=" + std::to_string(seq.num_frames()) +
                    " D=" + std::to_string(seq.feature_dim()) + "\n";
  for (const auto& tok : seq.tokens()) {
    out += std::to_string(tok.frame) + ' ' + std::to_string(tok.slot) + ' ' +
           std::to_string(tok.coord.x) + ' ' + std::to_string(tok.coord.y) + ' ' +
           std::to_string(tok.coord.z);
    for (const double v : tok.feature) {
      out += ' ';
      out += detail::format_g17(v);
    }
    out += '\n';
  }
  return out;
}

inline SpacetimeSequence parse_sequence(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw IoError("HELIX-SEQ: empty input");
  int n = 0, f = 0, d = 0;
  if (std::sscanf(line.c_str(), "HELIX-SEQ v1 N=%d F=%d D=%d", &n, &f, &d) != 3 || n < 1 || f < 1 || d < 0) {
    throw IoError("HELIX-SEQ: malformed header: " + line);
  }
  std::vector<std::vector<SpacetimeToken>> frames(static_cast<std::size_t>(f));
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    SpacetimeToken tok;
    if (!(ls >> tok.frame >> tok.slot >> tok.coord.x >> tok.coord.y >> tok.coord.z)) {
      throw IoError("HELIX-SEQ: malformed token on line " + std::to_string(line_no));
    }
    tok.feature.resize(static_cast<std::size_t>(d));
    for (int k = 0; k < d; ++k) {
      std::string word;
      if (!(ls >> word)) throw IoError("HELIX-SEQ: missing feature on line " + std::to_string(line_no));
      const auto res = std::from_chars(word.data(), word.data() + word.size(), tok.feature[static_cast<std::size_t>(k)]);
      if (res.ec != std::errc{} || res.ptr != word.data() + word.size()) {
        throw IoError("HELIX-SEQ: bad number '" + word + "' on line " + std::to_string(line_no));
      }
    }
    if (tok.frame < 0 || tok.frame >= f) {
      throw IoError("HELIX-SEQ: frame index out of range on line " + std::to_string(line_no));
    }
    auto& dst = frames[static_cast<std::size_t>(tok.frame)];
    if (tok.slot != static_cast<int>(dst.size()) + 1) {
      throw IoError("HELIX-SEQ: slots must be consecutive from 1 (line " + std::to_string(line_no) + ")");
    }
    dst.push_back(std::move(tok));
  }
  try {
    return concatenate_frames(std::move(frames), n);
  } catch (const std::invalid_argument& e) {
    throw IoError(std::string("HELIX-SEQ: ") + e.what());
  }
}

inline void write_sequence(const std::filesystem::path& path, const SpacetimeSequence& seq) {
  detail::write_atomically(path, serialize_sequence(seq));
}

inline SpacetimeSequence read_sequence(const std::filesystem::path& path) {
  return parse_sequence(detail::read_file(path));
}

}  // namespace helix4d
