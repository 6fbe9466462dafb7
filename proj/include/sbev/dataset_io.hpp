// Copyright 2026 The SBEV Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// On-disk dataset formats.
//
//   images         binary PPM (P6, maxval 255)
//   layouts/masks  binary PGM (P5, maxval 255); layouts hold class indices,
//                  masks hold 0 / 255
//   depth          "DPTH", u16 width, u16 height (little-endian), then
//                  width*height little-endian IEEE float32 metres
//   manifest       JSON, see write_manifest()

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbev/checkpoint.hpp"
#include "sbev/scenesim.hpp"

namespace sbev {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Netpbm

namespace detail {

inline std::string pnm_header(const char* magic, int w, int h) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

// Parses a P5/P6 header; returns the payload offset.
inline std::size_t parse_pnm(const std::string& bytes, const std::string& magic, int& w, int& h,
                             const std::string& what) {
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != magic) throw DataError(what + ": expected " + magic + " header");
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    if (std::stoi(token()) != 255) throw DataError(what + ": maxval must be 255");
  } catch (const std::logic_error&) {
    throw DataError(what + ": malformed " + magic + " header");
  }
  if (w <= 0 || h <= 0 || w > 65535 || h > 65535) throw DataError(what + ": invalid dimensions");
  if (pos >= bytes.size()) throw DataError(what + ": truncated header");
  return pos + 1;  // single whitespace after maxval
}

}  // namespace detail

inline void write_ppm(const fs::path& path, const RgbImage& img) {
  std::string bytes = detail::pnm_header("P6", img.width, img.height);
  bytes.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  write_file_atomic(path, bytes);
}

inline RgbImage read_ppm(const fs::path& path) {
  const std::string bytes = read_file_bytes(path);
  int w = 0, h = 0;
  const std::size_t off = detail::parse_pnm(bytes, "P6", w, h, path.string());
  RgbImage img(w, h);
  if (bytes.size() - off != img.pixels.size()) {
    throw DataError(path.string() + ": expected " + std::to_string(img.pixels.size()) + " pixel bytes, found " +
                    std::to_string(bytes.size() - off));
  }
  std::memcpy(img.pixels.data(), bytes.data() + off, img.pixels.size());
  return img;
}

inline void write_pgm(const fs::path& path, int w, int h, std::span<const std::uint8_t> values) {
  if (values.size() != std::size_t(w) * h) throw std::invalid_argument("write_pgm: size mismatch");
  std::string bytes = detail::pnm_header("P5", w, h);
  bytes.append(reinterpret_cast<const char*>(values.data()), values.size());
  write_file_atomic(path, bytes);
}

inline std::vector<std::uint8_t> read_pgm(const fs::path& path, int& w, int& h) {
  const std::string bytes = read_file_bytes(path);
  const std::size_t off = detail::parse_pnm(bytes, "P5", w, h, path.string());
  const std::size_t n = std::size_t(w) * h;
  if (bytes.size() - off != n) {
    throw DataError(path.string() + ": expected " + std::to_string(n) + " pixel bytes, found " +
                    std::to_string(bytes.size() - off));
  }
  return {bytes.begin() + std::ptrdiff_t(off), bytes.end()};
}

// ---------------------------------------------------------------------------
// Depth maps

inline void write_depth(const fs::path& path, int w, int h, std::span<const float> depth) {
  if (depth.size() != std::size_t(w) * h) throw std::invalid_argument("write_depth: size mismatch");
  if (w > 65535 || h > 65535) throw std::invalid_argument("write_depth: dimensions exceed u16");
  std::string bytes = "DPTH";
  le::put<std::uint16_t>(bytes, std::uint16_t(w));
  le::put<std::uint16_t>(bytes, std::uint16_t(h));
  for (float v : depth) le::put<std::uint32_t>(bytes, std::bit_cast<std::uint32_t>(v));
  write_file_atomic(path, bytes);
}

inline std::vector<float> read_depth(const fs::path& path, int& w, int& h) {
  const std::string bytes = read_file_bytes(path);
  le::Reader r(bytes, path.string());
  if (r.bytes(4) != "DPTH") throw DataError(path.string() + ": bad depth magic");
  w = r.get<std::uint16_t>();
  h = r.get<std::uint16_t>();
  const std::size_t n = std::size_t(w) * h;
  if (bytes.size() != 8 + 4 * n) {
    throw DataError(path.string() + ": depth payload holds " + std::to_string(bytes.size() - 8) +
                    " bytes, header promises " + std::to_string(4 * n));
  }
  std::vector<float> out(n);
  for (auto& v : out) v = std::bit_cast<float>(r.get<std::uint32_t>());
  return out;
}

// ---------------------------------------------------------------------------
// JSON for geometry and scenes

inline json to_json(const StereoRig& r) {
  return {{"f", r.f}, {"cx", r.cx}, {"cy", r.cy}, {"baseline", r.baseline},
          {"image_w", r.image_w}, {"image_h", r.image_h}};
}
inline json to_json(const GroundPlane& p) { return {{"a", p.a}, {"b", p.b}, {"c", p.c}}; }
inline json to_json(const LayoutSpec& l) {
  return {{"x_min", l.x_min}, {"x_max", l.x_max}, {"y_min", l.y_min}, {"y_max", l.y_max},
          {"nx", l.nx},       {"ny", l.ny},       {"n_classes", l.n_classes}};
}

namespace detail {
template <typename T>
T field(const json& j, const char* key, const std::string& what) {
  if (!j.contains(key)) throw DataError(what + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw DataError(what + ": field '" + key + "' has wrong type: " + e.what());
  }
}
}  // namespace detail

inline StereoRig rig_from_json(const json& j, const std::string& what = "rig") {
  StereoRig r;
  r.f = detail::field<double>(j, "f", what);
  r.cx = detail::field<double>(j, "cx", what);
  r.cy = detail::field<double>(j, "cy", what);
  r.baseline = detail::field<double>(j, "baseline", what);
  r.image_w = detail::field<int>(j, "image_w", what);
  r.image_h = detail::field<int>(j, "image_h", what);
  return r;
}
inline GroundPlane plane_from_json(const json& j, const std::string& what = "plane") {
  return {detail::field<double>(j, "a", what), detail::field<double>(j, "b", what),
          detail::field<double>(j, "c", what)};
}
inline LayoutSpec layout_from_json(const json& j, const std::string& what = "layout") {
  LayoutSpec l;
  l.x_min = detail::field<double>(j, "x_min", what);
  l.x_max = detail::field<double>(j, "x_max", what);
  l.y_min = detail::field<double>(j, "y_min", what);
  l.y_max = detail::field<double>(j, "y_max", what);
  l.nx = detail::field<int>(j, "nx", what);
  l.ny = detail::field<int>(j, "ny", what);
  l.n_classes = detail::field<int>(j, "n_classes", what);
  return l;
}

inline json to_json(const SceneSpec& s) {
  json boxes = json::array(), strips = json::array();
  for (const auto& b : s.boxes) {
    boxes.push_back({{"class", b.cls}, {"center", {b.cx, b.cy}}, {"size", {b.w, b.l, b.h}},
                     {"yaw", b.yaw}, {"color", b.color}});
  }
  for (const auto& r : s.road_strips) {
    strips.push_back({{"class", r.cls}, {"bounds", {r.x0, r.x1, r.y0, r.y1}}});
  }
  return {{"ground_class", s.ground_class}, {"boxes", boxes}, {"road_strips", strips},
          {"texture_seed", s.texture_seed}};
}

inline SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  try {
    s.ground_class = j.at("ground_class").get<std::uint8_t>();
    s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
    for (const auto& b : j.at("boxes")) {
      Box box;
      box.cls = b.at("class").get<std::uint8_t>();
      box.cx = b.at("center").at(0);
      box.cy = b.at("center").at(1);
      box.w = b.at("size").at(0);
      box.l = b.at("size").at(1);
      box.h = b.at("size").at(2);
      box.yaw = b.at("yaw");
      box.color = b.at("color").get<std::array<double, 3>>();
      s.boxes.push_back(box);
    }
    for (const auto& r : j.at("road_strips")) {
      const auto bd = r.at("bounds");
      s.road_strips.push_back({r.at("class").get<std::uint8_t>(), bd.at(0), bd.at(1), bd.at(2), bd.at(3)});
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("scene JSON: ") + e.what());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Manifest

inline constexpr int kManifestVersion = 1;

struct SampleRecord {
  std::string id;
  std::uint64_t seed = 0;
  std::string left, right, depth, gt, mask, scene, front;  // relative to the manifest directory
  bool operator==(const SampleRecord&) const = default;
};

struct DatasetManifest {
  int format_version = kManifestVersion;
  std::string split;
  StereoRig rig;
  GroundPlane plane;
  LayoutSpec layout;
  std::vector<std::string> class_names;
  std::vector<Rgb> palette;
  std::vector<SampleRecord> samples;
  fs::path root;  // directory the relative paths resolve against; not serialized
};

inline json to_json(const DatasetManifest& m) {
  json classes = json::array();
  for (std::size_t i = 0; i < m.class_names.size(); ++i) {
    classes.push_back({{"name", m.class_names[i]}, {"color", m.palette.at(i)}});
  }
  json samples = json::array();
  for (const auto& s : m.samples) {
    samples.push_back({{"id", s.id}, {"seed", s.seed}, {"left", s.left}, {"right", s.right},
                       {"depth", s.depth}, {"gt", s.gt}, {"mask", s.mask}, {"scene", s.scene},
                       {"front", s.front}});
  }
  return {{"format_version", m.format_version}, {"split", m.split}, {"rig", to_json(m.rig)},
          {"plane", to_json(m.plane)}, {"layout", to_json(m.layout)}, {"classes", classes},
          {"samples", samples}};
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  write_file_atomic(path, to_json(m).dump(2) + "\n");
}

namespace detail {
inline void warn_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(known.begin(), known.end(), [&](const char* k) { return key == k; }) == known.end()) {
      std::cerr << "warning: " << what << ": ignoring unknown field '" << key << "'\n";
    }
  }
}
}  // namespace detail

// Parses and validates a manifest; every referenced file must exist.
inline DatasetManifest read_manifest(const fs::path& path) {
  const std::string what = path.string();
  json j;
  try {
    j = json::parse(read_file_bytes(path));
  } catch (const json::parse_error& e) {
    throw DataError(what + ": invalid JSON: " + e.what());
  }
  if (!j.is_object()) throw DataError(what + ": manifest must be a JSON object");
  detail::warn_unknown(j, {"format_version", "split", "rig", "plane", "layout", "classes", "samples"}, what);
  DatasetManifest m;
  m.format_version = detail::field<int>(j, "format_version", what);
  if (m.format_version != kManifestVersion) {
    throw DataError(what + ": unsupported manifest version " + std::to_string(m.format_version));
  }
  m.split = detail::field<std::string>(j, "split", what);
  m.rig = rig_from_json(detail::field<json>(j, "rig", what), what + " rig");
  m.plane = plane_from_json(detail::field<json>(j, "plane", what), what + " plane");
  m.layout = layout_from_json(detail::field<json>(j, "layout", what), what + " layout");
  try {
    m.rig.validate();
    m.plane.validate();
    m.layout.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(what + ": " + e.what());
  }
  for (const auto& c : detail::field<json>(j, "classes", what)) {
    m.class_names.push_back(detail::field<std::string>(c, "name", what + " class"));
    m.palette.push_back(detail::field<Rgb>(c, "color", what + " class"));
  }
  if (int(m.palette.size()) != m.layout.n_classes) {
    throw DataError(what + ": palette has " + std::to_string(m.palette.size()) + " entries for " +
                    std::to_string(m.layout.n_classes) + " classes");
  }
  m.root = path.parent_path();
  const json samples = detail::field<json>(j, "samples", what);
  if (!samples.is_array()) throw DataError(what + ": 'samples' must be an array");
  for (const auto& s : samples) {
    detail::warn_unknown(s, {"id", "seed", "left", "right", "depth", "gt", "mask", "scene", "front"}, what + " sample");
    SampleRecord r;
    r.id = detail::field<std::string>(s, "id", what);
    r.seed = detail::field<std::uint64_t>(s, "seed", what);
    r.left = detail::field<std::string>(s, "left", what);
    r.right = detail::field<std::string>(s, "right", what);
    r.depth = detail::field<std::string>(s, "depth", what);
    r.gt = detail::field<std::string>(s, "gt", what);
    r.mask = detail::field<std::string>(s, "mask", what);
    r.scene = detail::field<std::string>(s, "scene", what);
    r.front = s.value("front", std::string{});
    for (const std::string* p : {&r.left, &r.right, &r.depth, &r.gt, &r.mask, &r.scene}) {
      if (!fs::exists(m.root / *p)) throw DataError(what + ": sample " + r.id + " references missing file " + *p);
    }
    if (!r.front.empty() && !fs::exists(m.root / r.front)) {
      throw DataError(what + ": sample " + r.id + " references missing file " + r.front);
    }
    m.samples.push_back(std::move(r));
  }
  return m;
}

// First ceil(fraction * n) samples, preserving order.
inline DatasetManifest take_fraction(const DatasetManifest& m, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("take_fraction: fraction must be in (0, 1]");
  DatasetManifest out = m;
  const auto keep = std::size_t(std::ceil(fraction * double(m.samples.size()) - 1e-9));
  out.samples.resize(std::min(keep, m.samples.size()));
  return out;
}

// Manifests carry one split tag; returns m unchanged when it matches, else an empty copy.
inline DatasetManifest filter_split(const DatasetManifest& m, const std::string& split) {
  DatasetManifest out = m;
  if (m.split != split) out.samples.clear();
  return out;
}

// ---------------------------------------------------------------------------
// Samples

struct Sample {
  std::string id;
  RgbImage left;
  RgbImage right;
  int depth_w = 0;
  int depth_h = 0;
  std::vector<float> depth;
  std::vector<std::uint8_t> front;  // reference front-view classes (may be empty)
  SemanticMap gt;
  bool operator==(const Sample&) const = default;
};

// Writes all files named by `rec` below `root`.
inline void write_sample(const fs::path& root, const SampleRecord& rec, const Sample& s, const SceneSpec* scene) {
  write_ppm(root / rec.left, s.left);
  write_ppm(root / rec.right, s.right);
  write_depth(root / rec.depth, s.depth_w, s.depth_h, s.depth);
  write_pgm(root / rec.gt, s.gt.nx, s.gt.ny, s.gt.classes);
  std::vector<std::uint8_t> mask(s.gt.mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = s.gt.mask[i] ? 255 : 0;
  write_pgm(root / rec.mask, s.gt.nx, s.gt.ny, mask);
  if (!rec.front.empty()) write_pgm(root / rec.front, s.depth_w, s.depth_h, s.front);
  write_file_atomic(root / rec.scene, (scene ? to_json(*scene) : json::object()).dump(1) + "\n");
}

// Reads and validates one sample. Nothing is returned on any error.
inline Sample read_sample(const fs::path& root, const SampleRecord& rec, int n_classes) {
  Sample s;
  s.id = rec.id;
  s.left = read_ppm(root / rec.left);
  s.right = read_ppm(root / rec.right);
  if (s.left.width != s.right.width || s.left.height != s.right.height) {
    throw DataError((root / rec.right).string() + ": stereo images differ in size");
  }
  s.depth = read_depth(root / rec.depth, s.depth_w, s.depth_h);
  if (s.depth_w != s.left.width || s.depth_h != s.left.height) {
    throw DataError((root / rec.depth).string() + ": depth dimensions do not match the images");
  }
  int w = 0, h = 0;
  s.gt.classes = read_pgm(root / rec.gt, w, h);
  s.gt.nx = w;
  s.gt.ny = h;
  for (auto c : s.gt.classes) {
    if (c >= n_classes) {
      throw DataError((root / rec.gt).string() + ": class value " + std::to_string(c) + " >= N_C=" +
                      std::to_string(n_classes));
    }
  }
  int mw = 0, mh = 0;
  auto mask = read_pgm(root / rec.mask, mw, mh);
  if (mw != w || mh != h) throw DataError((root / rec.mask).string() + ": mask dimensions differ from layout");
  s.gt.mask.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] != 0 && mask[i] != 255) throw DataError((root / rec.mask).string() + ": mask values must be 0 or 255");
    s.gt.mask[i] = mask[i] ? 1 : 0;
  }
  if (!rec.front.empty()) {
    int fw = 0, fh = 0;
    s.front = read_pgm(root / rec.front, fw, fh);
    if (fw != s.left.width || fh != s.left.height) throw DataError((root / rec.front).string() + ": size mismatch");
  }
  return s;
}

inline std::vector<Sample> read_all_samples(const DatasetManifest& m) {
  std::vector<Sample> out;
  out.reserve(m.samples.size());
  for (const auto& rec : m.samples) out.push_back(read_sample(m.root, rec, m.layout.n_classes));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation

// Scene seeds of different splits occupy disjoint ranges.
inline std::uint64_t scene_seed(std::uint64_t run_seed, const std::string& split, std::size_t index) {
  const std::uint64_t split_bit = split == "train" ? 0 : 1;
  return (run_seed << 21) | (split_bit << 20) | std::uint64_t(index & 0xFFFFF);
}

// Renders one scene into a Sample.
inline Sample synthesize_sample(const std::string& id, const SceneSpec& scene, const StereoRig& rig,
                                const GroundPlane& plane, const LayoutSpec& layout) {
  Sample s;
  s.id = id;
  StereoFrame frame = render_stereo(scene, rig, plane);
  s.left = std::move(frame.left);
  s.right = std::move(frame.right);
  s.depth.assign(frame.depth.begin(), frame.depth.end());  // stored as float32
  s.front = std::move(frame.classes);
  s.depth_w = rig.image_w;
  s.depth_h = rig.image_h;
  s.gt.nx = layout.nx;
  s.gt.ny = layout.ny;
  s.gt.classes = gt_layout(scene, layout);
  s.gt.mask = visibility_mask(s.gt.classes, layout, default_opaque_classes(), rig.hfov_deg());
  return s;
}

// Generates n samples into out_dir/<split>/ and writes out_dir/<split>.json.
inline DatasetManifest make_dataset(std::size_t n, std::uint64_t seed, const StereoRig& rig,
                                    const GroundPlane& plane, const LayoutSpec& layout, const fs::path& out_dir,
                                    const std::string& split, const SceneParams& params = {}) {
  fs::create_directories(out_dir / split);
  DatasetManifest m;
  m.split = split;
  m.rig = rig;
  m.plane = plane;
  m.layout = layout;
  m.class_names = default_class_names();
  m.palette = default_palette();
  m.class_names.resize(std::size_t(layout.n_classes), "class");
  m.palette.resize(std::size_t(layout.n_classes), Rgb{128, 128, 128});
  m.root = out_dir;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06zu", i);
    SampleRecord rec;
    rec.id = buf;
    rec.seed = scene_seed(seed, split, i);
    const std::string stem = split + "/" + rec.id;
    rec.left = stem + "_left.ppm";
    rec.right = stem + "_right.ppm";
    rec.depth = stem + "_depth.bin";
    rec.gt = stem + "_gt.pgm";
    rec.mask = stem + "_mask.pgm";
    rec.scene = stem + "_scene.json";
    rec.front = stem + "_front.pgm";
    const SceneSpec scene = sample_scene(rec.seed, params, layout, rig);
    write_sample(out_dir, rec, synthesize_sample(rec.id, scene, rig, plane, layout), &scene);
    m.samples.push_back(rec);
  }
  write_manifest(out_dir / (split + ".json"), m);
  return m;
}

}  // namespace sbev
