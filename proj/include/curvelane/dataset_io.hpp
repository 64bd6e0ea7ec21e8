#pragma once

// Sequence annotations as JSON (one file per sequence) plus lossless PNG
// rasters. Schema:
//
//   { "sequence_id": str, "frames": [ {
//       "index": int, "image_file": str, "mask_file": str (optional),
//       "intrinsics": [[f,0,cx],[0,f,cy],[0,0,1]],
//       "ground_to_camera": 4x4 row-major,
//       "ego_motion_from_prev": 4x4 row-major,
//       "lanes": [ { "track_id": int, "category": int, "points": [[x,y,z], ...] } ] } ] }

#include "curvelane/image.hpp"
#include "curvelane/synthetic.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace curvelane {

using json = nlohmann::json;
namespace fs = std::filesystem;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Sequence {
  std::string sequence_id;
  std::vector<FrameSample> frames;
};

namespace detail {

inline json matrix_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (int r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

inline const json& require(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object()) throw DatasetError(path + ": expected an object");
  auto it = j.find(key);
  if (it == j.end()) throw DatasetError(path + ": missing required field \"" + key + "\"");
  return *it;
}

inline double as_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw DatasetError(path + ": expected a number");
  return j.get<double>();
}

inline int as_int(const json& j, const std::string& path) {
  if (!j.is_number_integer()) throw DatasetError(path + ": expected an integer");
  return j.get<int>();
}

inline Eigen::MatrixXd matrix_from_json(const json& j, int rows, int cols, const std::string& path) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) {
    throw DatasetError(path + ": expected a " + std::to_string(rows) + "x" + std::to_string(cols) + " matrix");
  }
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r) {
    const std::string rp = path + "[" + std::to_string(r) + "]";
    if (!j[r].is_array() || static_cast<int>(j[r].size()) != cols) {
      throw DatasetError(rp + ": expected " + std::to_string(cols) + " entries");
    }
    for (int c = 0; c < cols; ++c) m(r, c) = as_number(j[r][c], rp + "[" + std::to_string(c) + "]");
  }
  return m;
}

inline std::string frame_stem(const std::string& seq, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%05d", index);
  return seq + buf;
}

}  // namespace detail

inline json lane_to_json(const GroundTruthLane& lane) {
  json pts = json::array();
  for (const auto& p : lane.points) pts.push_back({p.x(), p.y(), p.z()});
  json j{{"category", lane.category}, {"points", pts}};
  if (lane.track_id) j["track_id"] = *lane.track_id;
  return j;
}

inline GroundTruthLane lane_from_json(const json& j, const std::string& path) {
  GroundTruthLane lane;
  const json& pts = detail::require(j, "points", path);
  if (!pts.is_array()) throw DatasetError(path + ".points: expected an array");
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const std::string pp = path + ".points[" + std::to_string(i) + "]";
    if (!pts[i].is_array() || pts[i].size() != 3) throw DatasetError(pp + ": expected [x, y, z]");
    lane.points.emplace_back(detail::as_number(pts[i][0], pp + "[0]"), detail::as_number(pts[i][1], pp + "[1]"),
                             detail::as_number(pts[i][2], pp + "[2]"));
  }
  if (auto it = j.find("category"); it != j.end()) lane.category = detail::as_int(*it, path + ".category");
  if (auto it = j.find("track_id"); it != j.end()) lane.track_id = detail::as_int(*it, path + ".track_id");
  try {
    lane.validate();
  } catch (const std::exception& e) {
    throw DatasetError(path + ": " + e.what());
  }
  return lane;
}

inline json sequence_to_json(const Sequence& seq, const std::vector<std::string>& image_files,
                             const std::vector<std::string>& mask_files) {
  json frames = json::array();
  for (std::size_t i = 0; i < seq.frames.size(); ++i) {
    const auto& f = seq.frames[i];
    json lanes = json::array();
    for (const auto& l : f.lanes) lanes.push_back(lane_to_json(l));
    json jf{{"index", f.index},
            {"image_file", image_files.at(i)},
            {"intrinsics", detail::matrix_to_json(f.rig.intrinsics())},
            {"ground_to_camera", detail::matrix_to_json(f.rig.ground_to_camera())},
            {"ego_motion_from_prev", detail::matrix_to_json(f.ego_motion_from_prev.matrix())},
            {"lanes", lanes}};
    if (!mask_files.empty()) jf["mask_file"] = mask_files.at(i);
    frames.push_back(std::move(jf));
  }
  return json{{"sequence_id", seq.sequence_id}, {"frames", frames}};
}

/// Parses one annotation document. Rasters are loaded from `root` when
/// `load_rasters` is set; the image size of the rig comes from the PNG header
/// or, when rasters are skipped, from `fallback_size`.
inline Sequence sequence_from_json(const json& j, const fs::path& root, bool load_rasters,
                                   ImageSize fallback_size = {360, 480}) {
  Sequence seq;
  const json& id = detail::require(j, "sequence_id", "$");
  if (!id.is_string()) throw DatasetError("$.sequence_id: expected a string");
  seq.sequence_id = id.get<std::string>();
  const json& frames = detail::require(j, "frames", "$");
  if (!frames.is_array()) throw DatasetError("$.frames: expected an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string fp = "$.frames[" + std::to_string(i) + "]";
    const json& jf = frames[i];
    FrameSample f;
    f.sequence_id = seq.sequence_id;
    f.index = detail::as_int(detail::require(jf, "index", fp), fp + ".index");
    const json& image_file = detail::require(jf, "image_file", fp);
    if (!image_file.is_string()) throw DatasetError(fp + ".image_file: expected a string");
    const Mat3 k = detail::matrix_from_json(detail::require(jf, "intrinsics", fp), 3, 3, fp + ".intrinsics");
    const Mat4 g2c =
        detail::matrix_from_json(detail::require(jf, "ground_to_camera", fp), 4, 4, fp + ".ground_to_camera");
    const Mat4 ego = detail::matrix_from_json(detail::require(jf, "ego_motion_from_prev", fp), 4, 4,
                                              fp + ".ego_motion_from_prev");
    const json& lanes = detail::require(jf, "lanes", fp);
    if (!lanes.is_array()) throw DatasetError(fp + ".lanes: expected an array");
    for (std::size_t li = 0; li < lanes.size(); ++li) {
      f.lanes.push_back(lane_from_json(lanes[li], fp + ".lanes[" + std::to_string(li) + "]"));
    }
    ImageSize size = fallback_size;
    if (load_rasters) {
      f.image = read_png_image((root / image_file.get<std::string>()).string());
      size = {f.image.height, f.image.width};
      if (auto it = jf.find("mask_file"); it != jf.end() && it->is_string()) {
        f.seg_mask = read_png_mask((root / it->get<std::string>()).string());
      }
    }
    try {
      f.rig = CameraRig(k, g2c, size);
      f.ego_motion_from_prev = EgoMotion(ego);
    } catch (const GeometryError& e) {
      throw DatasetError(fp + ": " + e.what());
    }
    seq.frames.push_back(std::move(f));
  }
  return seq;
}

/// Writes `<dir>/<sequence_id>.json` plus PNG rasters under `<dir>/images`.
inline void save_sequence(const Sequence& seq, const fs::path& dir) {
  fs::create_directories(dir / "images");
  std::vector<std::string> image_files, mask_files;
  for (const auto& f : seq.frames) {
    const std::string stem = detail::frame_stem(seq.sequence_id, f.index);
    const std::string img_rel = "images/" + stem + ".png";
    const std::string mask_rel = "images/" + stem + "_mask.png";
    if (!f.image.empty()) write_png((dir / img_rel).string(), f.image);
    if (!f.seg_mask.data.empty()) write_png((dir / mask_rel).string(), f.seg_mask);
    image_files.push_back(img_rel);
    if (!f.seg_mask.data.empty()) mask_files.push_back(mask_rel);
  }
  if (!mask_files.empty() && mask_files.size() != image_files.size()) mask_files.clear();
  std::ofstream out(dir / (seq.sequence_id + ".json"));
  if (!out) throw DatasetError("cannot write annotations for " + seq.sequence_id);
  out << sequence_to_json(seq, image_files, mask_files).dump(1) << "\n";
}

inline void save_dataset(const std::vector<Sequence>& sequences, const fs::path& dir) {
  for (const auto& s : sequences) save_sequence(s, dir);
}

inline Sequence load_sequence(const fs::path& file, bool load_rasters = true) {
  std::ifstream in(file);
  if (!in) throw DatasetError("cannot open " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DatasetError(file.string() + ": invalid JSON: " + e.what());
  }
  try {
    return sequence_from_json(j, file.parent_path(), load_rasters);
  } catch (const DatasetError& e) {
    throw DatasetError(file.filename().string() + ": " + e.what());
  }
}

/// Loads every `*.json` annotation file in `dir` (manifest.json excluded),
/// sorted by file name.
inline std::vector<Sequence> load_dataset(const fs::path& dir, bool load_rasters = true) {
  if (!fs::is_directory(dir)) throw DatasetError("dataset directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json" && e.path().filename() != "manifest.json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Sequence> out;
  for (const auto& f : files) out.push_back(load_sequence(f, load_rasters));
  return out;
}

}  // namespace curvelane
