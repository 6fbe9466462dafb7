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

// Elementwise, reduction and layout ops with reverse-mode gradients.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "sbev/tensor.hpp"

namespace sbev {

namespace detail {

using ImplPtr = std::shared_ptr<TensorImpl>;

// Gradient of `out` if any reached it, else nullptr.
inline const double* out_grad(const ImplPtr& out) {
  return out->grad.empty() ? nullptr : out->grad.data();
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  Tape* tape = detail::recording_tape({&a, &b});
  Tensor out = detail::make_output(a.shape(), tape);
  auto x = a.data(), y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  if (tape) {
    tape->record("add", [ai = a.shared(), bi = b.shared(), oi = out.shared()] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      for (auto* in : {ai.get(), bi.get()}) {
        if (!in->requires_grad) continue;
        double* dst = in->grad_buffer();
        for (std::size_t i = 0; i < in->data.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  Tape* tape = detail::recording_tape({&a, &b});
  Tensor out = detail::make_output(a.shape(), tape);
  auto x = a.data(), y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  if (tape) {
    tape->record("mul", [ai = a.shared(), bi = b.shared(), oi = out.shared()] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      const std::size_t n = oi->data.size();
      if (ai->requires_grad) {
        double* dst = ai->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        double* dst = bi->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * ai->data[i];
      }
    });
  }
  return out;
}

inline Tensor scale(const Tensor& a, double s) {
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(a.shape(), tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * s;
  if (tape) {
    tape->record("scale", [ai = a.shared(), oi = out.shared(), s] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t i = 0; i < ai->data.size(); ++i) dst[i] += g[i] * s;
    });
  }
  return out;
}

// Sum of all elements as a [1] tensor.
inline Tensor sum(const Tensor& a) {
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output({1}, tape);
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out[0] = acc;
  if (tape) {
    tape->record("sum", [ai = a.shared(), oi = out.shared()] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t i = 0; i < ai->data.size(); ++i) dst[i] += g[0];
    });
  }
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(a.shape(), tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] > 0.0 ? x[i] : 0.0;
  if (tape) {
    tape->record("relu", [ai = a.shared(), oi = out.shared()] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t i = 0; i < ai->data.size(); ++i) {
        if (ai->data[i] > 0.0) dst[i] += g[i];
      }
    });
  }
  return out;
}

// Same data, new shape. Element order is unchanged.
inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) +
                                " as " + shape_str(shape));
  }
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(std::move(shape), tape);
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (tape) {
    tape->record("reshape", [ai = a.shared(), oi = out.shared()] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t i = 0; i < ai->data.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

// out.shape[i] = a.shape[perm[i]].
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const std::size_t r = a.rank();
  if (perm.size() != r) {
    throw std::invalid_argument("permute: permutation rank " + std::to_string(perm.size()) +
                                " does not match tensor rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || seen[perm[i]]) throw std::invalid_argument("permute: invalid permutation");
    seen[perm[i]] = true;
    shape[i] = a.dim(perm[i]);
  }
  // src_index[k] for every output element k.
  const auto in_strides = detail::strides_of(a.shape());
  std::vector<std::size_t> src(a.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t k = 0; k < src.size(); ++k) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[k] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(shape, tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t k = 0; k < src.size(); ++k) z[k] = x[src[k]];
  if (tape) {
    tape->record("permute", [ai = a.shared(), oi = out.shared(), src = std::move(src)] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t k = 0; k < src.size(); ++k) dst[src[k]] += g[k];
    });
  }
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw std::invalid_argument("concat: axis out of range");
  Shape shape = ref;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) {
        throw std::invalid_argument("concat: extent mismatch on axis " + std::to_string(i) +
                                    ": " + shape_str(p.shape()) + " vs " + shape_str(ref));
      }
    }
    shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];

  Tape* tape = Tape::current();
  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  if (!any_grad) tape = nullptr;

  Tensor out = detail::make_output(shape, tape);
  const std::size_t out_block = shape[axis] * inner;
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t block = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + o * block, block,
                  out.data().begin() + o * out_block + offset);
    }
    offset += block;
  }
  if (tape) {
    std::vector<detail::ImplPtr> ins;
    for (const auto& p : parts) ins.push_back(p.shared());
    tape->record("concat", [ins = std::move(ins), offsets = std::move(offsets),
                            oi = out.shared(), outer, out_block] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      for (std::size_t k = 0; k < ins.size(); ++k) {
        auto& in = ins[k];
        if (!in->requires_grad) continue;
        const std::size_t block = in->data.size() / outer;
        double* dst = in->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g + o * out_block + offsets[k];
          for (std::size_t i = 0; i < block; ++i) dst[o * block + i] += src[i];
        }
      }
    });
  }
  return out;
}

// Softmax along `axis`.
inline Tensor softmax(const Tensor& a, std::size_t axis) {
  if (axis >= a.rank()) throw std::invalid_argument("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  const std::size_t n = a.dim(axis);
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(a.shape(), tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        z[base + k * inner] = std::exp(x[base + k * inner] - mx);
        total += z[base + k * inner];
      }
      for (std::size_t k = 0; k < n; ++k) z[base + k * inner] /= total;
    }
  }
  if (tape) {
    tape->record("softmax", [ai = a.shared(), oi = out.shared(), outer, inner, n] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      const double* y = oi->data.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          double dot = 0.0;
          for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (std::size_t k = 0; k < n; ++k) {
            const std::size_t i = base + k * inner;
            dst[i] += y[i] * (g[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// Contracts `axis` against constant weights: out = sum_k a[..., k, ...] * values[k].
// With a softmax input this is the soft-argmax expectation.
inline Tensor expectation(const Tensor& a, std::size_t axis, std::vector<double> values) {
  if (axis >= a.rank()) throw std::invalid_argument("expectation: axis out of range");
  const std::size_t n = a.dim(axis);
  if (values.size() != n) {
    throw std::invalid_argument("expectation: " + std::to_string(values.size()) +
                                " values for axis of extent " + std::to_string(n));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  Shape shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis) shape.push_back(a.dim(i));
  }
  if (shape.empty()) shape.push_back(1);
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output(shape, tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < n; ++k) {
      const double w = values[k];
      const double* src = x.data() + (o * n + k) * inner;
      double* dst = z.data() + o * inner;
      for (std::size_t in = 0; in < inner; ++in) dst[in] += w * src[in];
    }
  }
  if (tape) {
    tape->record("expectation", [ai = a.shared(), oi = out.shared(), values = std::move(values),
                                 outer, inner, n] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < n; ++k) {
          for (std::size_t in = 0; in < inner; ++in) {
            dst[(o * n + k) * inner + in] += values[k] * g[o * inner + in];
          }
        }
      }
    });
  }
  return out;
}

// 2x2 max pooling with stride 2 over the last two axes of N x C x H x W.
// Odd trailing rows/columns are dropped. Ties resolve to the first maximum.
inline Tensor maxpool2d(const Tensor& a) {
  if (a.rank() != 4) throw std::invalid_argument("maxpool2d: expected N x C x H x W, got " + shape_str(a.shape()));
  const std::size_t nc = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  const std::size_t ho = h / 2, wo = w / 2;
  if (ho == 0 || wo == 0) throw std::invalid_argument("maxpool2d: spatial extent below 2");
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output({a.dim(0), a.dim(1), ho, wo}, tape);
  std::vector<std::size_t> argmax(out.numel());
  auto x = a.data();
  auto z = out.data();
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t i = 0; i < ho; ++i) {
      for (std::size_t j = 0; j < wo; ++j) {
        std::size_t best = p * h * w + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di) {
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t s = p * h * w + (2 * i + di) * w + 2 * j + dj;
            if (x[s] > x[best]) best = s;
          }
        }
        const std::size_t o = p * ho * wo + i * wo + j;
        z[o] = x[best];
        argmax[o] = best;
      }
    }
  }
  if (tape) {
    tape->record("maxpool2d", [ai = a.shared(), oi = out.shared(), argmax = std::move(argmax)] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t o = 0; o < argmax.size(); ++o) dst[argmax[o]] += g[o];
    });
  }
  return out;
}

// Nearest-neighbour 2x upsampling of N x C x H x W.
inline Tensor nearest_upsample2d(const Tensor& a) {
  if (a.rank() != 4) throw std::invalid_argument("nearest_upsample2d: expected N x C x H x W, got " + shape_str(a.shape()));
  const std::size_t nc = a.dim(0) * a.dim(1), h = a.dim(2), w = a.dim(3);
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output({a.dim(0), a.dim(1), 2 * h, 2 * w}, tape);
  auto x = a.data();
  auto z = out.data();
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t i = 0; i < 2 * h; ++i) {
      for (std::size_t j = 0; j < 2 * w; ++j) {
        z[(p * 2 * h + i) * 2 * w + j] = x[(p * h + i / 2) * w + j / 2];
      }
    }
  }
  if (tape) {
    tape->record("nearest_upsample2d", [ai = a.shared(), oi = out.shared(), nc, h, w] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t p = 0; p < nc; ++p) {
        for (std::size_t i = 0; i < 2 * h; ++i) {
          for (std::size_t j = 0; j < 2 * w; ++j) {
            dst[(p * h + i / 2) * w + j / 2] += g[(p * 2 * h + i) * 2 * w + j];
          }
        }
      }
    });
  }
  return out;
}

// Pads or crops the last two axes of N x C x H x W to (h, w), anchored top-left.
// Used by the U-Net decoder when an encoder level had an odd extent.
inline Tensor fit2d(const Tensor& a, std::size_t h, std::size_t w) {
  if (a.rank() != 4) throw std::invalid_argument("fit2d: expected rank 4");
  if (a.dim(2) == h && a.dim(3) == w) return a;
  const std::size_t nc = a.dim(0) * a.dim(1), ha = a.dim(2), wa = a.dim(3);
  Tape* tape = detail::recording_tape({&a});
  Tensor out = detail::make_output({a.dim(0), a.dim(1), h, w}, tape);
  const std::size_t hc = std::min(h, ha), wc = std::min(w, wa);
  for (std::size_t p = 0; p < nc; ++p)
    for (std::size_t i = 0; i < hc; ++i)
      for (std::size_t j = 0; j < wc; ++j) out[(p * h + i) * w + j] = a[(p * ha + i) * wa + j];
  if (tape) {
    tape->record("fit2d", [ai = a.shared(), oi = out.shared(), nc, ha, wa, h, w, hc, wc] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = ai->grad_buffer();
      for (std::size_t p = 0; p < nc; ++p)
        for (std::size_t i = 0; i < hc; ++i)
          for (std::size_t j = 0; j < wc; ++j) dst[(p * ha + i) * wa + j] += g[(p * h + i) * w + j];
    });
  }
  return out;
}

}  // namespace sbev
