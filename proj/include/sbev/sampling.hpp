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

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sbev/ops.hpp"

namespace sbev {

namespace detail {

// Bilinear taps of one sample point: up to four (flat index, weight) pairs.
struct BilinearTaps {
  std::size_t index[4];
  double weight[4];
  int count = 0;
};

inline BilinearTaps bilinear_taps(double col, double row, std::size_t h, std::size_t w) {
  BilinearTaps taps;
  if (!std::isfinite(col) || !std::isfinite(row)) return taps;
  const double c0 = std::floor(col), r0 = std::floor(row);
  const double fc = col - c0, fr = row - r0;
  const long ic = long(c0), ir = long(r0);
  const long cs[2] = {ic, ic + 1};
  const long rs[2] = {ir, ir + 1};
  const double wc[2] = {1.0 - fc, fc};
  const double wr[2] = {1.0 - fr, fr};
  for (int a = 0; a < 2; ++a) {
    if (rs[a] < 0 || rs[a] >= long(h)) continue;
    for (int b = 0; b < 2; ++b) {
      if (cs[b] < 0 || cs[b] >= long(w)) continue;
      taps.index[taps.count] = std::size_t(rs[a]) * w + std::size_t(cs[b]);
      taps.weight[taps.count] = wr[a] * wc[b];
      ++taps.count;
    }
  }
  return taps;
}

}  // namespace detail

// Samples N x C x H x W at the continuous pixel coordinates stored in
// grid (N or 1) x H_out x W_out x 2 as (col, row). Integer coordinates hit
// pixel centres; taps outside the source read as zero. The grid is treated as
// a constant.
inline Tensor grid_sample_bilinear(const Tensor& input, const Tensor& grid) {
  if (input.rank() != 4) {
    throw std::invalid_argument("grid_sample_bilinear: input must be N x C x H x W, got " +
                                shape_str(input.shape()));
  }
  if (grid.rank() != 4 || grid.dim(3) != 2) {
    throw std::invalid_argument("grid_sample_bilinear: grid must be N x H_out x W_out x 2, got " +
                                shape_str(grid.shape()));
  }
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (grid.dim(0) != n && grid.dim(0) != 1) {
    throw std::invalid_argument("grid_sample_bilinear: grid batch " + std::to_string(grid.dim(0)) +
                                " does not match input batch " + std::to_string(n));
  }
  const std::size_t ho = grid.dim(1), wo = grid.dim(2), cells = ho * wo;

  // Taps are resolved once per grid batch and reused across channels.
  std::vector<detail::BilinearTaps> taps(grid.dim(0) * cells);
  for (std::size_t i = 0; i < taps.size(); ++i) {
    taps[i] = detail::bilinear_taps(grid[2 * i], grid[2 * i + 1], h, w);
  }

  Tape* tape = detail::recording_tape({&input});
  Tensor out = detail::make_output({n, c, ho, wo}, tape);
  auto x = input.data();
  auto z = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    const detail::BilinearTaps* tb = taps.data() + (grid.dim(0) == 1 ? 0 : b) * cells;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* src = x.data() + (b * c + ch) * h * w;
      double* dst = z.data() + (b * c + ch) * cells;
      for (std::size_t p = 0; p < cells; ++p) {
        double acc = 0.0;
        for (int t = 0; t < tb[p].count; ++t) acc += tb[p].weight[t] * src[tb[p].index[t]];
        dst[p] = acc;
      }
    }
  }
  if (tape) {
    tape->record("grid_sample_bilinear", [xi = input.shared(), oi = out.shared(),
                                          taps = std::move(taps), n, c, h, w, cells,
                                          gb = grid.dim(0)] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dx = xi->grad_buffer();
      for (std::size_t b = 0; b < n; ++b) {
        const detail::BilinearTaps* tb = taps.data() + (gb == 1 ? 0 : b) * cells;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double* dst = dx + (b * c + ch) * h * w;
          const double* go = g + (b * c + ch) * cells;
          for (std::size_t p = 0; p < cells; ++p) {
            for (int t = 0; t < tb[p].count; ++t) dst[tb[p].index[t]] += tb[p].weight[t] * go[p];
          }
        }
      }
    });
  }
  return out;
}

// Disparity feature volume. For reference/target features N x C x H x W it
// returns N x 2C x D x H x W where plane k is [ref ; target shifted right by
// k * step columns]. A shifted column u reads the target at u - k*step with
// linear interpolation; source positions left of column 0 read as zero, so
// plane k has exactly ceil(k*step) zero columns.
inline Tensor disparity_volume(const Tensor& ref, const Tensor& target, std::size_t planes,
                               double step) {
  if (ref.rank() != 4) {
    throw std::invalid_argument("disparity_volume: features must be N x C x H x W, got " +
                                shape_str(ref.shape()));
  }
  detail::require_same_shape("disparity_volume", ref, target);
  if (planes < 1) throw std::invalid_argument("disparity_volume: need at least one plane");
  if (!(step >= 0.0) || !std::isfinite(step)) {
    throw std::invalid_argument("disparity_volume: step must be finite and >= 0");
  }
  const std::size_t n = ref.dim(0), c = ref.dim(1), h = ref.dim(2), w = ref.dim(3);
  const std::size_t hw = h * w;

  // Per plane and output column: (left source col, weight left, weight right), or none.
  struct Tap {
    long col;
    double w0, w1;
  };
  std::vector<Tap> taps(planes * w);
  for (std::size_t k = 0; k < planes; ++k) {
    const double shift = double(k) * step;
    for (std::size_t u = 0; u < w; ++u) {
      const double p = double(u) - shift;
      Tap t{-1, 0.0, 0.0};
      if (p >= 0.0) {
        const double fl = std::floor(p);
        t.col = long(fl);
        t.w1 = p - fl;
        t.w0 = 1.0 - t.w1;
        if (t.col + 1 >= long(w)) t.w1 = 0.0;  // p == w-1 exactly
      }
      taps[k * w + u] = t;
    }
  }

  Tape* tape = detail::recording_tape({&ref, &target});
  Tensor out = detail::make_output({n, 2 * c, planes, h, w}, tape);
  auto z = out.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* r = ref.data().data() + (b * c + ch) * hw;
      const double* t = target.data().data() + (b * c + ch) * hw;
      for (std::size_t k = 0; k < planes; ++k) {
        double* zr = z.data() + ((b * 2 * c + ch) * planes + k) * hw;
        double* zt = z.data() + ((b * 2 * c + c + ch) * planes + k) * hw;
        std::copy_n(r, hw, zr);
        const Tap* tk = taps.data() + k * w;
        for (std::size_t row = 0; row < h; ++row) {
          const double* trow = t + row * w;
          for (std::size_t u = 0; u < w; ++u) {
            const Tap& tp = tk[u];
            if (tp.col < 0) continue;
            double v = tp.w0 * trow[tp.col];
            if (tp.w1 != 0.0) v += tp.w1 * trow[tp.col + 1];
            zt[row * w + u] = v;
          }
        }
      }
    }
  }
  if (tape) {
    tape->record("disparity_volume", [ri = ref.shared(), ti = target.shared(), oi = out.shared(),
                                      taps = std::move(taps), n, c, h, w, planes, hw] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t k = 0; k < planes; ++k) {
            const double* gr = g + ((b * 2 * c + ch) * planes + k) * hw;
            const double* gt = g + ((b * 2 * c + c + ch) * planes + k) * hw;
            if (ri->requires_grad) {
              double* dr = ri->grad_buffer() + (b * c + ch) * hw;
              for (std::size_t i = 0; i < hw; ++i) dr[i] += gr[i];
            }
            if (ti->requires_grad) {
              double* dt = ti->grad_buffer() + (b * c + ch) * hw;
              const auto* tk = taps.data() + k * w;
              for (std::size_t row = 0; row < h; ++row) {
                for (std::size_t u = 0; u < w; ++u) {
                  const auto& tp = tk[u];
                  if (tp.col < 0) continue;
                  dt[row * w + tp.col] += tp.w0 * gt[row * w + u];
                  if (tp.w1 != 0.0) dt[row * w + tp.col + 1] += tp.w1 * gt[row * w + u];
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

}  // namespace sbev
