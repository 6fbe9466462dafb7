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

// Procedural street scenes: ground with painted road/sidewalk strips and
// box-shaped cars and buildings. Provides the stereo renderer, the analytic
// top-down ground truth and the ray-cast visibility mask.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sbev/geometry.hpp"

namespace sbev {

enum SemanticClass : std::uint8_t {
  kGround = 0,
  kRoad = 1,
  kSidewalk = 2,
  kCar = 3,
  kBuilding = 4,
};

inline constexpr int kDefaultClassCount = 5;

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"ground", "road", "sidewalk", "car", "building"};
  return names;
}

using Rgb = std::array<std::uint8_t, 3>;

inline const std::vector<Rgb>& default_palette() {
  static const std::vector<Rgb> palette{
      {70, 130, 60}, {90, 90, 100}, {200, 190, 170}, {220, 40, 40}, {140, 90, 200}};
  return palette;
}

struct Box {
  std::uint8_t cls = kCar;
  double cx = 0.0, cy = 10.0;       // footprint centre, metres
  double w = 1.8, l = 4.2, h = 1.5;  // extents along local x, local y, up
  double yaw = 0.0;                  // radians, rotates local x towards +y
  std::array<double, 3> color{0.7, 0.1, 0.1};

  // Footprint containment test for a BEV point.
  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double cs = std::cos(yaw), sn = std::sin(yaw);
    const double lx = cs * dx + sn * dy;
    const double ly = -sn * dx + cs * dy;
    return std::abs(lx) <= 0.5 * w && std::abs(ly) <= 0.5 * l;
  }

  // Footprint corners, counter-clockwise.
  std::array<Point2, 4> corners() const {
    const double cs = std::cos(yaw), sn = std::sin(yaw);
    std::array<Point2, 4> out;
    const double sx[4] = {-1, 1, 1, -1}, sy[4] = {-1, -1, 1, 1};
    for (int k = 0; k < 4; ++k) {
      const double lx = 0.5 * w * sx[k], ly = 0.5 * l * sy[k];
      out[k] = {cx + cs * lx - sn * ly, cy + sn * lx + cs * ly};
    }
    return out;
  }
};

struct Strip {
  std::uint8_t cls = kRoad;
  double x0 = -4.0, x1 = 4.0, y0 = 0.0, y1 = 60.0;

  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct SceneSpec {
  std::uint8_t ground_class = kGround;
  std::vector<Box> boxes;
  std::vector<Strip> road_strips;  // later strips paint over earlier ones
  std::uint64_t texture_seed = 0;

  // Class of the ground surface at a BEV point.
  std::uint8_t surface_class(double x, double y) const {
    std::uint8_t cls = ground_class;
    for (const auto& s : road_strips) {
      if (s.contains(x, y)) cls = s.cls;
    }
    return cls;
  }
};

struct SceneParams {
  int min_cars = 2;
  int max_cars = 8;
  int min_buildings = 0;
  int max_buildings = 4;
  bool roads = true;
  double cross_road_prob = 0.3;

  static SceneParams ground_only() {
    SceneParams p;
    p.min_cars = p.max_cars = 0;
    p.min_buildings = p.max_buildings = 0;
    p.roads = false;
    return p;
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline double lattice(std::int64_t ix, std::int64_t iy, std::uint64_t seed) {
  std::uint64_t h = splitmix64(seed ^ splitmix64(std::uint64_t(ix) * 0x632BE59BD9B4E019ULL ^
                                                 std::uint64_t(iy) * 0x85157AF5ULL));
  return double(h >> 11) * (2.0 / 9007199254740992.0) - 1.0;  // [-1, 1)
}

// Smooth value noise in [-1, 1] on a unit lattice.
inline double value_noise(double s, double t, std::uint64_t seed) {
  const double fs = std::floor(s), ft = std::floor(t);
  const auto is = std::int64_t(fs), it = std::int64_t(ft);
  double a = s - fs, b = t - ft;
  a = a * a * (3.0 - 2.0 * a);
  b = b * b * (3.0 - 2.0 * b);
  const double n00 = lattice(is, it, seed), n10 = lattice(is + 1, it, seed);
  const double n01 = lattice(is, it + 1, seed), n11 = lattice(is + 1, it + 1, seed);
  return (n00 * (1 - a) + n10 * a) * (1 - b) + (n01 * (1 - a) + n11 * a) * b;
}

// Two-octave surface texture in [-1, 1].
inline double surface_texture(double s, double t, std::uint64_t seed) {
  return 0.6 * value_noise(s / 0.5, t / 0.5, seed) + 0.4 * value_noise(s / 0.2, t / 0.2, seed + 7);
}

}  // namespace detail

// Base colours of the ground classes (linear RGB in [0, 1]).
inline std::array<double, 3> surface_color(std::uint8_t cls) {
  switch (cls) {
    case kRoad: return {0.32, 0.32, 0.36};
    case kSidewalk: return {0.72, 0.68, 0.60};
    default: return {0.28, 0.52, 0.22};
  }
}

inline constexpr double kTextureAmplitude = 0.3;

inline SceneSpec sample_scene(std::uint64_t seed, const SceneParams& params, const LayoutSpec& layout,
                              const StereoRig& rig) {
  std::mt19937_64 rng(detail::splitmix64(seed));
  auto uni = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  SceneSpec scene;
  scene.ground_class = kGround;
  scene.texture_seed = detail::splitmix64(seed ^ 0xA5A5A5A5ULL);
  const double y_far = layout.y_max + 40.0;
  const double half_fov = 0.5 * rig.hfov_deg() * M_PI / 180.0;

  double road_x0 = 0.0, road_x1 = 0.0, walk_l = 0.0, walk_r = 0.0;
  bool cross = false;
  double cross_y0 = 0.0, cross_y1 = 0.0;
  if (params.roads) {
    const double center = uni(-3.0, 3.0);
    const double width = uni(6.0, 10.0);
    road_x0 = center - 0.5 * width;
    road_x1 = center + 0.5 * width;
    walk_l = uni(2.0, 3.5);
    walk_r = uni(2.0, 3.5);
    scene.road_strips.push_back({kSidewalk, road_x0 - walk_l, road_x0, -5.0, y_far});
    scene.road_strips.push_back({kSidewalk, road_x1, road_x1 + walk_r, -5.0, y_far});
    cross = uni(0.0, 1.0) < params.cross_road_prob;
    if (cross) {
      const double cy = uni(11.0, 22.0), cw = uni(6.0, 8.0);
      cross_y0 = cy - 0.5 * cw;
      cross_y1 = cy + 0.5 * cw;
      scene.road_strips.push_back({kSidewalk, -200.0, 200.0, cross_y0 - 2.5, cross_y1 + 2.5});
    }
    scene.road_strips.push_back({kRoad, road_x0, road_x1, -5.0, y_far});
    if (cross) scene.road_strips.push_back({kRoad, -200.0, 200.0, cross_y0, cross_y1});
  }

  auto overlaps = [&](const Box& b, double margin) {
    for (const auto& o : scene.boxes) {
      const double r1 = 0.5 * std::hypot(b.w, b.l), r2 = 0.5 * std::hypot(o.w, o.l);
      if (std::hypot(b.cx - o.cx, b.cy - o.cy) < r1 + r2 + margin) return true;
    }
    return false;
  };
  auto in_frustum = [&](const Box& b) {
    return b.cy > layout.y_min && b.cy < layout.y_max && b.cx > layout.x_min && b.cx < layout.x_max &&
           std::abs(std::atan2(b.cx, b.cy)) < half_fov;
  };
  auto car_color = [&] {
    static const std::array<std::array<double, 3>, 6> colors{{{0.75, 0.08, 0.08},
                                                              {0.10, 0.20, 0.70},
                                                              {0.85, 0.85, 0.88},
                                                              {0.08, 0.08, 0.10},
                                                              {0.85, 0.65, 0.05},
                                                              {0.20, 0.55, 0.65}}};
    return colors[std::size_t(pick(0, int(colors.size()) - 1))];
  };
  auto make_car = [&](bool force_frustum) {
    Box car;
    car.cls = kCar;
    car.w = uni(1.7, 2.0);
    car.l = uni(3.8, 4.6);
    car.h = uni(1.35, 1.6);
    car.color = car_color();
    const bool on_cross = cross && !force_frustum && uni(0.0, 1.0) < 0.3;
    if (on_cross) {
      car.yaw = 0.5 * M_PI + uni(-0.15, 0.15);
      car.cy = uni(cross_y0 + 1.2, cross_y1 - 1.2);
      car.cx = uni(layout.x_min + 2.0, layout.x_max - 2.0);
    } else {
      car.yaw = uni(-0.15, 0.15);
      const double lo = params.roads ? road_x0 + 1.2 : -6.0;
      const double hi = params.roads ? road_x1 - 1.2 : 6.0;
      car.cx = uni(lo, hi);
      car.cy = force_frustum ? uni(6.0, 15.0) : uni(layout.y_min + 2.5, layout.y_max);
    }
    return car;
  };

  const int n_cars = params.max_cars > 0 ? pick(params.min_cars, params.max_cars) : 0;
  for (int k = 0, tries = 0; k < n_cars && tries < 200; ++tries) {
    Box car = make_car(false);
    if (overlaps(car, 0.6)) continue;
    scene.boxes.push_back(car);
    ++k;
  }
  const int n_buildings = params.max_buildings > 0 ? pick(params.min_buildings, params.max_buildings) : 0;
  for (int k = 0, tries = 0; k < n_buildings && tries < 200; ++tries) {
    Box bld;
    bld.cls = kBuilding;
    bld.w = uni(4.0, 8.0);
    bld.l = uni(5.0, 12.0);
    bld.h = uni(4.0, 10.0);
    bld.yaw = 0.0;
    const double shade = uni(0.0, 1.0);
    bld.color = {0.55 + 0.2 * shade, 0.40 + 0.1 * shade, 0.32};
    const bool left = uni(0.0, 1.0) < 0.5;
    const double edge = params.roads ? (left ? road_x0 - walk_l : road_x1 + walk_r) : (left ? -4.0 : 4.0);
    const double gap = uni(0.5, 3.0);
    bld.cx = left ? edge - gap - 0.5 * bld.w : edge + gap + 0.5 * bld.w;
    bld.cy = uni(layout.y_min + 3.0, layout.y_max + 2.0);
    if (cross && bld.cy + 0.5 * bld.l > cross_y0 - 2.5 && bld.cy - 0.5 * bld.l < cross_y1 + 2.5) continue;
    // Every box must touch the layout region.
    if (bld.cx - 0.5 * bld.w > layout.x_max || bld.cx + 0.5 * bld.w < layout.x_min) continue;
    if (overlaps(bld, 0.3)) continue;
    scene.boxes.push_back(bld);
    ++k;
  }
  const bool any_object = n_cars + n_buildings > 0;
  if (any_object && std::none_of(scene.boxes.begin(), scene.boxes.end(), in_frustum)) {
    for (int tries = 0; tries < 200; ++tries) {
      Box car = make_car(true);
      if (!in_frustum(car)) continue;
      // Replace whatever it collides with.
      std::erase_if(scene.boxes, [&](const Box& o) {
        return std::hypot(car.cx - o.cx, car.cy - o.cy) <
               0.5 * std::hypot(car.w, car.l) + 0.5 * std::hypot(o.w, o.l) + 0.6;
      });
      scene.boxes.push_back(car);
      break;
    }
  }
  return scene;
}

// 8-bit interleaved RGB image.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(std::size_t(w) * h * 3, 0) {}
  std::uint8_t* at(int row, int col) { return pixels.data() + (std::size_t(row) * width + col) * 3; }
  const std::uint8_t* at(int row, int col) const {
    return pixels.data() + (std::size_t(row) * width + col) * 3;
  }
  bool operator==(const RgbImage&) const = default;
};

// Argmax BEV layout with its visibility mask (both ny x nx, row 0 nearest).
struct SemanticMap {
  int nx = 0;
  int ny = 0;
  std::vector<std::uint8_t> classes;
  std::vector<std::uint8_t> mask;  // 0 / 1
  bool operator==(const SemanticMap&) const = default;
};

struct StereoFrame {
  RgbImage left;   // reference image I_R
  RgbImage right;  // target image I_T
  std::vector<double> depth;           // reference forward depth in metres; 0 where the ray hits nothing
  std::vector<std::uint8_t> classes;   // reference front-view semantic class per pixel
};

namespace detail {

struct Hit {
  double t = std::numeric_limits<double>::infinity();  // forward depth
  std::uint8_t cls = 0;
  std::array<double, 3> rgb{0.0, 0.0, 0.0};
  bool any = false;
};

inline constexpr std::array<double, 3> kSkyColor{0.55, 0.70, 0.90};

// Shades a ground hit at BEV point (x, y).
inline std::array<double, 3> shade_ground(const SceneSpec& scene, double x, double y, std::uint8_t cls) {
  const auto base = surface_color(cls);
  const double n = surface_texture(x, y, scene.texture_seed);
  std::array<double, 3> c;
  for (int k = 0; k < 3; ++k) c[k] = base[k] * (1.0 + kTextureAmplitude * n);
  return c;
}

// Intersects a ray from camera (cam_x, drop 0, y 0) with direction
// (dx, ddrop, 1) against box `b`. Returns the entry depth and face.
inline bool intersect_box(const Box& b, const GroundPlane& plane, double cam_x, double dx, double ddrop,
                          double& t_hit, int& face, double& s_tex, double& t_tex) {
  const double cs = std::cos(b.yaw), sn = std::sin(b.yaw);
  // Ray in box-local coordinates: origin o, direction r (x, y, drop).
  const double ox = cam_x - b.cx, oy = -b.cy;
  const double lo_x = cs * ox + sn * oy, lo_y = -sn * ox + cs * oy;
  const double lr_x = cs * dx + sn * 1.0, lr_y = -sn * dx + cs * 1.0;
  const double base = plane.drop(b.cx, b.cy);
  const double lo[3] = {-0.5 * b.w, -0.5 * b.l, base - b.h};
  const double hi[3] = {0.5 * b.w, 0.5 * b.l, base};
  const double o[3] = {lo_x, lo_y, 0.0};
  const double r[3] = {lr_x, lr_y, ddrop};
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  int enter_axis = -1;
  bool enter_hi = false;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(r[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / r[a], tb = (hi[a] - o[a]) / r[a];
    bool from_hi = false;
    if (ta > tb) {
      std::swap(ta, tb);
      from_hi = true;
    }
    if (ta > t0) {
      t0 = ta;
      enter_axis = a;
      enter_hi = from_hi;
    }
    t1 = std::min(t1, tb);
  }
  if (!(t0 <= t1) || t0 <= 1e-9 || enter_axis < 0) return false;
  t_hit = t0;
  face = enter_axis * 2 + (enter_hi ? 1 : 0);
  const double p[3] = {o[0] + t0 * r[0], o[1] + t0 * r[1], o[2] + t0 * r[2]};
  // Face-local texture coordinates.
  if (enter_axis == 0) {
    s_tex = p[1];
    t_tex = p[2];
  } else if (enter_axis == 1) {
    s_tex = p[0];
    t_tex = p[2];
  } else {
    s_tex = p[0];
    t_tex = p[1];
  }
  return true;
}

inline double face_shade(int face) {
  switch (face / 2) {
    case 2: return 1.15;  // roof (entered from its top side: smaller drop)
    case 0: return 0.85;
    default: return 1.0;
  }
}

// Screen-space bounding rectangle of a box for one camera; whole image when a
// corner is at or behind the image plane.
inline std::array<int, 4> box_screen_bounds(const Box& b, const GroundPlane& plane, const StereoRig& rig,
                                            double cam_x) {
  const auto fp = b.corners();
  const double base = plane.drop(b.cx, b.cy);
  double umin = 1e300, umax = -1e300, vmin = 1e300, vmax = -1e300;
  for (const auto& c : fp) {
    for (double drop : {base, base - b.h}) {
      if (c.y < 0.05) return {0, rig.image_w - 1, 0, rig.image_h - 1};
      const auto uv = project_point(c.x, c.y, drop, rig, cam_x);
      umin = std::min(umin, uv[0]);
      umax = std::max(umax, uv[0]);
      vmin = std::min(vmin, uv[1]);
      vmax = std::max(vmax, uv[1]);
    }
  }
  auto clampi = [](double v, int lo, int hi) { return int(std::clamp(v, double(lo), double(hi))); };
  return {clampi(std::floor(umin) - 1, 0, rig.image_w - 1), clampi(std::ceil(umax) + 1, 0, rig.image_w - 1),
          clampi(std::floor(vmin) - 1, 0, rig.image_h - 1), clampi(std::ceil(vmax) + 1, 0, rig.image_h - 1)};
}

// Z-buffered render of one camera. Each primitive (ground, then every box)
// is rasterised over its screen bounds with per-sample depth testing;
// `samples` x `samples` jittered sub-pixel rays are averaged for colour,
// depth and class come from the centre sample.
inline void render_camera(const SceneSpec& scene, const StereoRig& rig, const GroundPlane& plane, double cam_x,
                          int samples, RgbImage& image, std::vector<double>* depth,
                          std::vector<std::uint8_t>* classes) {
  const int w = rig.image_w, h = rig.image_h;
  image = RgbImage(w, h);
  const int ns = samples * samples + 1;  // sub-samples plus the centre sample (last)
  std::vector<Hit> zbuf(std::size_t(w) * h * ns);
  auto offset = [&](int k) -> std::array<double, 2> {
    if (k == ns - 1) return {0.0, 0.0};
    const int sx = k % samples, sy = k / samples;
    return {(sx + 0.5) / samples - 0.5, (sy + 0.5) / samples - 0.5};
  };

  // Ground plane covers the whole image.
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      for (int k = 0; k < ns; ++k) {
        const auto off = offset(k);
        const double du = (u + off[0] - rig.cx) / rig.f, dv = (v + off[1] - rig.cy) / rig.f;
        const double denom = dv - plane.a * du - plane.b;
        if (denom < 1e-9) continue;
        const double t = (plane.a * cam_x + plane.c) / denom;
        if (!(t > 0.0)) continue;
        Hit& hit = zbuf[(std::size_t(v) * w + u) * ns + k];
        if (t >= hit.t) continue;
        const double x = cam_x + t * du, y = t;
        const auto cls = scene.surface_class(x, y);
        hit = {t, cls, shade_ground(scene, x, y, cls), true};
      }
    }
  }

  for (std::size_t bi = 0; bi < scene.boxes.size(); ++bi) {
    const Box& b = scene.boxes[bi];
    const auto bounds = box_screen_bounds(b, plane, rig, cam_x);
    const std::uint64_t tex_seed = detail::splitmix64(scene.texture_seed + 1000 + bi);
    for (int v = bounds[2]; v <= bounds[3]; ++v) {
      for (int u = bounds[0]; u <= bounds[1]; ++u) {
        for (int k = 0; k < ns; ++k) {
          const auto off = offset(k);
          const double du = (u + off[0] - rig.cx) / rig.f, dv = (v + off[1] - rig.cy) / rig.f;
          double t = 0.0, s_tex = 0.0, t_tex = 0.0;
          int face = 0;
          if (!intersect_box(b, plane, cam_x, du, dv, t, face, s_tex, t_tex)) continue;
          Hit& hit = zbuf[(std::size_t(v) * w + u) * ns + k];
          if (t >= hit.t) continue;
          const double n = surface_texture(s_tex, t_tex, tex_seed);
          const double shade = face_shade(face);
          std::array<double, 3> c;
          for (int q = 0; q < 3; ++q) c[q] = b.color[q] * shade * (1.0 + kTextureAmplitude * n) + 0.04 * n;
          hit = {t, b.cls, c, true};
        }
      }
    }
  }

  if (depth) depth->assign(std::size_t(w) * h, 0.0);
  if (classes) classes->assign(std::size_t(w) * h, scene.ground_class);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const Hit* px = &zbuf[(std::size_t(v) * w + u) * ns];
      std::array<double, 3> acc{0.0, 0.0, 0.0};
      for (int k = 0; k < ns - 1; ++k) {
        const auto& c = px[k].any ? px[k].rgb : kSkyColor;
        for (int q = 0; q < 3; ++q) acc[q] += c[q];
      }
      std::uint8_t* dst = image.at(v, u);
      for (int q = 0; q < 3; ++q) {
        const double val = std::clamp(acc[q] / (ns - 1), 0.0, 1.0);
        dst[q] = std::uint8_t(std::lround(val * 255.0));
      }
      const Hit& centre = px[ns - 1];
      const std::size_t i = std::size_t(v) * w + u;
      if (depth && centre.any) (*depth)[i] = centre.t;
      if (classes && centre.any) (*classes)[i] = centre.cls;
    }
  }
}

}  // namespace detail

// Renders the rectified pair. The target camera is the reference camera
// translated by +baseline along x.
inline StereoFrame render_stereo(const SceneSpec& scene, const StereoRig& rig, const GroundPlane& plane,
                                 int supersample = 2) {
  rig.validate();
  plane.validate();
  StereoFrame frame;
  detail::render_camera(scene, rig, plane, 0.0, supersample, frame.left, &frame.depth, &frame.classes);
  detail::render_camera(scene, rig, plane, rig.baseline, supersample, frame.right, nullptr, nullptr);
  return frame;
}

// Occlusion-free top-down class grid (ny x nx, row 0 nearest).
inline std::vector<std::uint8_t> gt_layout(const SceneSpec& scene, const LayoutSpec& layout) {
  layout.validate();
  std::vector<std::uint8_t> grid(layout.cells());
  for (int j = 0; j < layout.ny; ++j) {
    const double y = layout.y_center(j);
    for (int i = 0; i < layout.nx; ++i) {
      const double x = layout.x_center(i);
      std::uint8_t cls = scene.surface_class(x, y);
      double tallest = -1.0;
      for (const auto& b : scene.boxes) {
        if (b.h > tallest && b.contains(x, y)) {
          tallest = b.h;
          cls = b.cls;
        }
      }
      grid[std::size_t(j) * layout.nx + i] = cls;
    }
  }
  return grid;
}

inline const std::set<std::uint8_t>& default_opaque_classes() {
  static const std::set<std::uint8_t> opaque{kCar, kBuilding};
  return opaque;
}

// 2D visibility from the BEV origin. A cell is visible when its centre lies in
// the horizontal field of view and the segment from the origin to that centre
// crosses no opaque cell before reaching it. Cells are walked exactly
// (Amanatides-Woo traversal).
inline std::vector<std::uint8_t> visibility_mask(std::span<const std::uint8_t> gt, const LayoutSpec& layout,
                                                 const std::set<std::uint8_t>& opaque, double fov_deg) {
  layout.validate();
  if (gt.size() != layout.cells()) throw std::invalid_argument("visibility_mask: grid size mismatch");
  const double half_fov = 0.5 * fov_deg * M_PI / 180.0;
  const double cw = layout.cell_w(), ch = layout.cell_h();
  // Origin in grid units.
  const double ox = (0.0 - layout.x_min) / cw, oy = (0.0 - layout.y_min) / ch;
  std::vector<std::uint8_t> mask(layout.cells(), 0);

  for (int j = 0; j < layout.ny; ++j) {
    for (int i = 0; i < layout.nx; ++i) {
      const double x = layout.x_center(i), y = layout.y_center(j);
      if (!(y > 0.0) || std::abs(std::atan2(x, y)) > half_fov) continue;
      const double tx = i + 0.5, ty = j + 0.5;
      const double dx = tx - ox, dy = ty - oy;
      // Clip the parametric segment origin + s*(dx, dy), s in [0, 1], to the grid box.
      double s0 = 0.0, s1 = 1.0;
      auto clip = [&](double o, double d, double lo, double hi) {
        if (std::abs(d) < 1e-15) return o >= lo && o <= hi;
        double a = (lo - o) / d, b = (hi - o) / d;
        if (a > b) std::swap(a, b);
        s0 = std::max(s0, a);
        s1 = std::min(s1, b);
        return s0 <= s1;
      };
      if (!clip(ox, dx, 0.0, layout.nx) || !clip(oy, dy, 0.0, layout.ny)) continue;
      const double px = ox + s0 * dx, py = oy + s0 * dy;
      const int step_x = dx > 0 ? 1 : (dx < 0 ? -1 : 0);
      const int step_y = dy > 0 ? 1 : (dy < 0 ? -1 : 0);
      int cx = std::clamp(int(std::floor(px)), 0, layout.nx - 1);
      int cy = std::clamp(int(std::floor(py)), 0, layout.ny - 1);
      // On an exact boundary while moving negatively, the entry cell is the lower one.
      if (step_x < 0 && px == std::floor(px) && cx > 0 && px < layout.nx) cx = std::clamp(int(px) - 1, 0, layout.nx - 1);
      if (step_y < 0 && py == std::floor(py) && cy > 0 && py < layout.ny) cy = std::clamp(int(py) - 1, 0, layout.ny - 1);
      const bool start_has_origin = s0 == 0.0;
      const double inf = std::numeric_limits<double>::infinity();
      double t_max_x = step_x > 0 ? (cx + 1 - ox) / dx : (step_x < 0 ? (cx - ox) / dx : inf);
      double t_max_y = step_y > 0 ? (cy + 1 - oy) / dy : (step_y < 0 ? (cy - oy) / dy : inf);
      const double t_dx = step_x != 0 ? 1.0 / std::abs(dx) : inf;
      const double t_dy = step_y != 0 ? 1.0 / std::abs(dy) : inf;
      bool blocked = false;
      bool first = true;
      for (int guard = 0; guard < 4 * (layout.nx + layout.ny); ++guard) {
        if (cx == i && cy == j) break;
        const bool skip = first && start_has_origin;
        first = false;
        if (!skip && opaque.count(gt[std::size_t(cy) * layout.nx + cx])) {
          blocked = true;
          break;
        }
        if (t_max_x < t_max_y) {
          cx += step_x;
          t_max_x += t_dx;
        } else {
          cy += step_y;
          t_max_y += t_dy;
        }
        if (cx < 0 || cx >= layout.nx || cy < 0 || cy >= layout.ny) break;
      }
      if (!blocked) mask[std::size_t(j) * layout.nx + i] = 1;
    }
  }
  return mask;
}

}  // namespace sbev
