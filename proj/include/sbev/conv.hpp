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

// 2D and 3D convolutions lowered to im2col + GEMM. The column buffer is
// rebuilt during backward instead of being kept alive on the tape.

#pragma once

#include <Eigen/Core>
#include <array>
#include <string>
#include <vector>

#include "sbev/ops.hpp"

namespace sbev {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

// Spatial geometry shared by the 2D (depth = 1) and 3D cases.
struct ConvGeom {
  std::size_t c_in, c_out, k, stride, pad;
  std::array<std::size_t, 3> in;   // D, H, W
  std::array<std::size_t, 3> out;  // Do, Ho, Wo
  std::array<std::size_t, 3> ks;   // kernel extents per axis (1 on the collapsed axis)
  std::array<std::size_t, 3> pads;
  std::array<std::size_t, 3> strides;

  std::size_t in_plane() const { return in[0] * in[1] * in[2]; }
  std::size_t out_plane() const { return out[0] * out[1] * out[2]; }
  std::size_t patch() const { return c_in * ks[0] * ks[1] * ks[2]; }
};

// cols is patch() x out_plane(), row-major.
inline void im2col(const ConvGeom& g, const double* x, double* cols) {
  const std::size_t op = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    const double* xc = x + c * g.in_plane();
    for (std::size_t kd = 0; kd < g.ks[0]; ++kd)
      for (std::size_t kh = 0; kh < g.ks[1]; ++kh)
        for (std::size_t kw = 0; kw < g.ks[2]; ++kw, ++row) {
          double* dst = cols + row * op;
          std::size_t o = 0;
          for (std::size_t od = 0; od < g.out[0]; ++od) {
            const long id = long(od * g.strides[0] + kd) - long(g.pads[0]);
            const bool dok = id >= 0 && id < long(g.in[0]);
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              const long ih = long(oh * g.strides[1] + kh) - long(g.pads[1]);
              const bool hok = dok && ih >= 0 && ih < long(g.in[1]);
              const double* src = hok ? xc + (std::size_t(id) * g.in[1] + std::size_t(ih)) * g.in[2] : nullptr;
              for (std::size_t ow = 0; ow < g.out[2]; ++ow, ++o) {
                const long iw = long(ow * g.strides[2] + kw) - long(g.pads[2]);
                dst[o] = (hok && iw >= 0 && iw < long(g.in[2])) ? src[iw] : 0.0;
              }
            }
          }
        }
  }
}

inline void col2im_add(const ConvGeom& g, const double* cols, double* dx) {
  const std::size_t op = g.out_plane();
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.c_in; ++c) {
    double* xc = dx + c * g.in_plane();
    for (std::size_t kd = 0; kd < g.ks[0]; ++kd)
      for (std::size_t kh = 0; kh < g.ks[1]; ++kh)
        for (std::size_t kw = 0; kw < g.ks[2]; ++kw, ++row) {
          const double* src = cols + row * op;
          std::size_t o = 0;
          for (std::size_t od = 0; od < g.out[0]; ++od) {
            const long id = long(od * g.strides[0] + kd) - long(g.pads[0]);
            const bool dok = id >= 0 && id < long(g.in[0]);
            for (std::size_t oh = 0; oh < g.out[1]; ++oh) {
              const long ih = long(oh * g.strides[1] + kh) - long(g.pads[1]);
              if (!(dok && ih >= 0 && ih < long(g.in[1]))) {
                o += g.out[2];
                continue;
              }
              double* dst = xc + (std::size_t(id) * g.in[1] + std::size_t(ih)) * g.in[2];
              for (std::size_t ow = 0; ow < g.out[2]; ++ow, ++o) {
                const long iw = long(ow * g.strides[2] + kw) - long(g.pads[2]);
                if (iw >= 0 && iw < long(g.in[2])) dst[iw] += src[o];
              }
            }
          }
        }
  }
}

inline std::size_t conv_out_extent(const char* op, const char* axis, std::size_t in,
                                   std::size_t k, std::size_t stride, std::size_t pad) {
  if (in + 2 * pad < k) {
    throw std::invalid_argument(std::string(op) + ": kernel " + std::to_string(k) +
                                " larger than padded " + axis + " extent " +
                                std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

inline Tensor conv_nd(const char* op, const Tensor& input, const Tensor& weight,
                      const Tensor& bias, std::size_t stride, std::size_t pad,
                      std::size_t spatial) {
  const std::size_t rank = 2 + spatial;
  if (input.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": input rank " + std::to_string(input.rank()) +
                                " != " + std::to_string(rank) + " (shape " + shape_str(input.shape()) + ")");
  }
  if (weight.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": weight rank " + std::to_string(weight.rank()) +
                                " != " + std::to_string(rank));
  }
  if (stride < 1) throw std::invalid_argument(std::string(op) + ": stride must be >= 1");
  const std::size_t k = weight.dim(2);
  for (std::size_t i = 2; i < rank; ++i) {
    if (weight.dim(i) != k) {
      throw std::invalid_argument(std::string(op) + ": kernel must be cubic/square, got " +
                                  shape_str(weight.shape()));
    }
  }
  if (k % 2 == 0) throw std::invalid_argument(std::string(op) + ": kernel size must be odd, got " + std::to_string(k));
  if (weight.dim(1) != input.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": weight C_in (" + std::to_string(weight.dim(1)) +
                                ") does not match input channels (" + std::to_string(input.dim(1)) + ")");
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw std::invalid_argument(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                                " does not match C_out (" + std::to_string(weight.dim(0)) + ")");
  }

  ConvGeom g{};
  g.c_in = input.dim(1);
  g.c_out = weight.dim(0);
  g.k = k;
  g.stride = stride;
  g.pad = pad;
  static constexpr const char* kAxes[3] = {"depth", "height", "width"};
  for (std::size_t a = 0; a < 3; ++a) {
    const bool active = a + spatial >= 3;
    g.in[a] = active ? input.dim(2 + a + spatial - 3) : 1;
    g.ks[a] = active ? k : 1;
    g.pads[a] = active ? pad : 0;
    g.strides[a] = active ? stride : 1;
    g.out[a] = active ? conv_out_extent(op, kAxes[a], g.in[a], k, stride, pad) : 1;
  }
  Shape out_shape{input.dim(0), g.c_out};
  for (std::size_t a = 3 - spatial; a < 3; ++a) out_shape.push_back(g.out[a]);

  Tape* tape = recording_tape({&input, &weight, &bias});
  Tensor out = make_output(out_shape, tape);

  const std::size_t n = input.dim(0);
  const std::size_t op_sz = g.out_plane();
  std::vector<double> cols(g.patch() * op_sz);
  ConstRowMap wmat(weight.data().data(), g.c_out, g.patch());
  for (std::size_t b = 0; b < n; ++b) {
    im2col(g, input.data().data() + b * g.c_in * g.in_plane(), cols.data());
    RowMap y(out.data().data() + b * g.c_out * op_sz, g.c_out, op_sz);
    y.noalias() = wmat * ConstRowMap(cols.data(), g.patch(), op_sz);
    for (std::size_t c = 0; c < g.c_out; ++c) y.row(c).array() += bias[c];
  }

  if (tape) {
    tape->record(op, [xi = input.shared(), wi = weight.shared(), bi = bias.shared(),
                      oi = out.shared(), g, n] {
      const double* gy = out_grad(oi);
      if (!gy) return;
      const std::size_t op_sz = g.out_plane();
      std::vector<double> cols(g.patch() * op_sz);
      ConstRowMap wmat(wi->data.data(), g.c_out, g.patch());
      for (std::size_t b = 0; b < n; ++b) {
        ConstRowMap dy(gy + b * g.c_out * op_sz, g.c_out, op_sz);
        if (bi->requires_grad) {
          double* db = bi->grad_buffer();
          // Plain loop: Eigen's vectorised redux depends on buffer alignment.
          for (std::size_t c = 0; c < g.c_out; ++c) {
            const double* row = gy + (b * g.c_out + c) * op_sz;
            double s = 0.0;
            for (std::size_t i = 0; i < op_sz; ++i) s += row[i];
            db[c] += s;
          }
        }
        if (wi->requires_grad) {
          im2col(g, xi->data.data() + b * g.c_in * g.in_plane(), cols.data());
          RowMap dw(wi->grad_buffer(), g.c_out, g.patch());
          dw.noalias() += dy * ConstRowMap(cols.data(), g.patch(), op_sz).transpose();
        }
        if (xi->requires_grad) {
          RowMap dcols(cols.data(), g.patch(), op_sz);
          dcols.noalias() = wmat.transpose() * dy;
          col2im_add(g, cols.data(), xi->grad_buffer() + b * g.c_in * g.in_plane());
        }
      }
    });
  }
  return out;
}

}  // namespace detail

// input N x C_in x H x W, weight C_out x C_in x k x k, bias C_out.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t pad = 0) {
  return detail::conv_nd("conv2d", input, weight, bias, stride, pad, 2);
}

// input N x C_in x D x H x W, weight C_out x C_in x k x k x k, bias C_out.
inline Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t pad = 0) {
  return detail::conv_nd("conv3d", input, weight, bias, stride, pad, 3);
}

}  // namespace sbev
