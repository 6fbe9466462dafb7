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

// Camera geometry for stereo bird's-eye-view mapping.
//
// Conventions (normative for the whole library):
//  * BEV frame: x lateral to the right, y forward, both in metres, origin at
//    the reference camera's optical centre projected onto the BEV plane.
//  * Image: u grows to the right, v grows downward; integer (u, v) are pixel
//    centres.
//  * Ground plane: drop(x, y) = a*x + b*y + c is the vertical distance of the
//    ground below the reference camera centre at BEV position (x, y). With
//    a = b = 0, c is the camera height.
//
// A pixel ray is (x, drop, y) = t * ((u - c_x)/f, (v - c_y)/f, 1) with t the
// forward depth. Intersecting it with the plane gives
//   y = c*f / (a*c_x - a*u - b*f - c_y + v),   x = (u - c_x) * y / f.

#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "sbev/error.hpp"
#include "sbev/tensor.hpp"

namespace sbev {

struct StereoRig {
  double f = 100.0;
  double cx = 64.0;
  double cy = 48.0;
  double baseline = 0.4;  // T_x, metres; the target camera sits at +baseline along x
  int image_w = 128;
  int image_h = 96;

  void validate() const {
    if (!(f > 0.0)) throw std::invalid_argument("StereoRig: focal length must be positive");
    if (!(baseline > 0.0)) throw std::invalid_argument("StereoRig: baseline must be positive");
    if (!(cx > 0.0 && cx < image_w)) throw std::invalid_argument("StereoRig: c_x outside (0, image_w)");
    if (!(cy > 0.0 && cy < image_h)) throw std::invalid_argument("StereoRig: c_y outside (0, image_h)");
  }

  // Horizontal field of view in degrees.
  double hfov_deg() const {
    return 2.0 * std::atan(double(image_w) / (2.0 * f)) * 180.0 / M_PI;
  }
};

struct GroundPlane {
  double a = 0.0;
  double b = 0.0;
  double c = 1.5;

  void validate() const {
    if (!(c > 0.0)) throw std::invalid_argument("GroundPlane: camera must be above the ground (c > 0)");
    if (!(std::abs(a) < 1.0 && std::abs(b) < 1.0)) {
      throw std::invalid_argument("GroundPlane: |a|, |b| must be below 1");
    }
  }

  double drop(double x, double y) const { return a * x + b * y + c; }
};

struct LayoutSpec {
  double x_min = -12.0;
  double x_max = 12.0;
  double y_min = 2.0;
  double y_max = 26.0;
  int nx = 48;
  int ny = 48;
  int n_classes = 5;

  void validate() const {
    if (!(x_min < x_max && y_min < y_max)) throw std::invalid_argument("LayoutSpec: empty bounds");
    if (nx < 1 || ny < 1) throw std::invalid_argument("LayoutSpec: grid must be non-empty");
    if (n_classes < 1 || n_classes > 255) throw std::invalid_argument("LayoutSpec: class count out of range");
  }

  double cell_w() const { return (x_max - x_min) / nx; }
  double cell_h() const { return (y_max - y_min) / ny; }
  // Column i / row j cell centres. Row 0 is nearest to the camera.
  double x_center(int i) const { return x_min + (i + 0.5) * cell_w(); }
  double y_center(int j) const { return y_min + (j + 0.5) * cell_h(); }
  std::size_t cells() const { return std::size_t(nx) * std::size_t(ny); }
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct PixelDisparity {
  double u = 0.0;
  double d = 0.0;
};

// (u, d) -> BEV (x', y'): x' = (u - c_x) T_x / d, y' = f T_x / d.
inline Point2 disparity_to_bev(double u, double d, const StereoRig& rig) {
  if (!(d > 0.0)) throw std::domain_error("disparity_to_bev: disparity must be positive, got " + std::to_string(d));
  return {(u - rig.cx) * rig.baseline / d, rig.f * rig.baseline / d};
}

inline PixelDisparity bev_to_disparity(double x, double y, const StereoRig& rig) {
  if (!(y > 0.0)) throw std::domain_error("bev_to_disparity: point must be in front of the camera, y=" + std::to_string(y));
  return {rig.cx + rig.f * x / y, rig.f * rig.baseline / y};
}

// Ray-plane intersection for pixel (u, v). Throws HorizonError when the ray
// runs parallel to the ground or meets it behind the camera.
inline Point2 ipm_pixel_to_ground(double u, double v, const StereoRig& rig, const GroundPlane& plane) {
  const double denom = plane.a * rig.cx - plane.a * u - plane.b * rig.f - rig.cy + v;
  if (denom < 1e-9) {
    throw HorizonError("ipm_pixel_to_ground: pixel (" + std::to_string(u) + ", " + std::to_string(v) +
                       ") is at or above the horizon");
  }
  const double y = plane.c * rig.f / denom;
  return {(u - rig.cx) * y / rig.f, y};
}

// Projects a BEV ground point with the given drop below the camera.
inline std::array<double, 2> project_point(double x, double y, double drop, const StereoRig& rig,
                                           double camera_x = 0.0) {
  return {rig.cx + rig.f * (x - camera_x) / y, rig.cy + rig.f * drop / y};
}

using Mat3 = std::array<double, 9>;  // row-major

// H maps homogeneous ground coordinates (x', y', 1) to homogeneous pixels:
//   u*y' = f x' + c_x y',  v*y' = f a x' + (c_y + f b) y' + f c,  w = y'.
inline Mat3 homography_ground_to_image(const StereoRig& rig, const GroundPlane& plane) {
  Mat3 h{rig.f, rig.cx, 0.0,
         rig.f * plane.a, rig.cy + rig.f * plane.b, rig.f * plane.c,
         0.0, 1.0, 0.0};
  const double det = h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6]) +
                     h[2] * (h[3] * h[7] - h[4] * h[6]);
  if (std::abs(det) < 1e-12) throw std::invalid_argument("homography_ground_to_image: degenerate plane");
  return h;
}

// Applies H and dehomogenises. Returns false when w <= 0 (point behind the camera).
inline bool apply_homography(const Mat3& h, double x, double y, double& u, double& v) {
  const double w = h[6] * x + h[7] * y + h[8];
  if (!(w > 0.0)) return false;
  u = (h[0] * x + h[1] * y + h[2]) / w;
  v = (h[3] * x + h[4] * y + h[5]) / w;
  return true;
}

// Per-cell source coordinates for grid_sample_bilinear.
struct SamplingGrid {
  static constexpr double kInvalid = -2.0;  // every bilinear tap falls outside

  int h_out = 0;
  int w_out = 0;
  std::vector<double> coords;  // h_out * w_out * 2 as (col, row)
  std::vector<std::uint8_t> valid;

  SamplingGrid() = default;
  SamplingGrid(int h, int w)
      : h_out(h), w_out(w), coords(std::size_t(h) * w * 2, kInvalid), valid(std::size_t(h) * w, 0) {}

  void set(int row, int col, double src_col, double src_row) {
    const std::size_t i = std::size_t(row) * w_out + col;
    coords[2 * i] = src_col;
    coords[2 * i + 1] = src_row;
    valid[i] = 1;
  }

  // 1 x H_out x W_out x 2 constant tensor.
  Tensor as_tensor() const {
    return Tensor::from({1, std::size_t(h_out), std::size_t(w_out), 2}, coords);
  }
};

// Maps every BEV cell into the reduced stereo volume (width = image columns /
// feat_downsample, height = disparity planes of disp_step pixels each).
inline SamplingGrid make_stereo_bev_grid(const StereoRig& rig, const LayoutSpec& layout, int vol_w,
                                         int vol_d, int feat_downsample, double disp_step) {
  rig.validate();
  layout.validate();
  if (feat_downsample < 1) throw std::invalid_argument("make_stereo_bev_grid: feat_downsample must be >= 1");
  if (!(disp_step > 0.0)) throw std::invalid_argument("make_stereo_bev_grid: disp_step must be positive");
  if (vol_w < 1 || vol_d < 1) throw std::invalid_argument("make_stereo_bev_grid: empty volume");
  SamplingGrid grid(layout.ny, layout.nx);
  for (int j = 0; j < layout.ny; ++j) {
    const double y = layout.y_center(j);
    if (!(y > 0.0)) continue;
    for (int i = 0; i < layout.nx; ++i) {
      const auto pd = bev_to_disparity(layout.x_center(i), y, rig);
      const double col = pd.u / feat_downsample;
      const double row = pd.d / disp_step;
      if (col >= 0.0 && col <= vol_w - 1 && row >= 0.0 && row <= vol_d - 1) grid.set(j, i, col, row);
    }
  }
  return grid;
}

// Maps every BEV cell onto the ground in a source image of src_w x src_h
// pixels sampled every src_downsample image pixels.
inline SamplingGrid make_ipm_grid(const StereoRig& rig, const GroundPlane& plane, const LayoutSpec& layout,
                                  int src_w, int src_h, int src_downsample) {
  rig.validate();
  plane.validate();
  layout.validate();
  if (src_downsample < 1) throw std::invalid_argument("make_ipm_grid: src_downsample must be >= 1");
  const Mat3 h = homography_ground_to_image(rig, plane);
  SamplingGrid grid(layout.ny, layout.nx);
  for (int j = 0; j < layout.ny; ++j) {
    for (int i = 0; i < layout.nx; ++i) {
      double u = 0.0, v = 0.0;
      if (!apply_homography(h, layout.x_center(i), layout.y_center(j), u, v)) continue;
      const double col = u / src_downsample;
      const double row = v / src_downsample;
      if (col >= 0.0 && col <= src_w - 1 && row >= 0.0 && row <= src_h - 1) grid.set(j, i, col, row);
    }
  }
  return grid;
}

}  // namespace sbev
