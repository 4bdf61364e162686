#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "helix4d/eval_metrics.hpp"
#include "helix4d/seq_io.hpp"

namespace helix4d {

// ASCII XYZ: one "x y z" triple per line. Blank lines and '#' comments are skipped.

inline PointCloud parse_xyz(const std::string& text, const std::string& origin = "<xyz>") {
  PointCloud out;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Vec3 p;
    if (!(ls >> p.x() >> p.y() >> p.z())) {
      throw IoError(origin + ":" + std::to_string(line_no) + ": expected 'x y z'");
    }
    out.push_back(p);
  }
  return out;
}

inline std::string serialize_xyz(const PointCloud& pts) {
  std::string out;
  for (const auto& p : pts) {
    out += detail::format_g17(p.x()) + ' ' + detail::format_g17(p.y()) + ' ' + detail::format_g17(p.z()) + '\n';
  }
  return out;
}

inline PointCloud read_xyz(const std::filesystem::path& path) { return parse_xyz(detail::read_file(path), path.string()); }

inline void write_xyz(const std::filesystem::path& path, const PointCloud& pts) {
  detail::write_atomically(path, serialize_xyz(pts));
}

/// Manifest: one XYZ path per line, frame order; relative paths resolve
/// against the manifest's directory.
inline PointCloudSequence read_manifest(const std::filesystem::path& manifest) {
  PointCloudSequence seq;
  std::istringstream is(detail::read_file(manifest));
  std::string line;
  while (std::getline(is, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::filesystem::path p(line);
    if (p.is_relative()) p = manifest.parent_path() / p;
    seq.frames.push_back(read_xyz(p));
  }
  if (seq.frames.empty()) throw IoError(manifest.string() + ": manifest lists no frames");
  return seq;
}

inline void write_manifest(const std::filesystem::path& manifest, const std::vector<std::string>& frame_files) {
  std::string out;
  for (const auto& f : frame_files) out += f + '\n';
  detail::write_atomically(manifest, out);
}

}  // namespace helix4d
