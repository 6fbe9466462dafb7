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
#include <cstdint>
#include <span>
#include <string>

#include "sbev/ops.hpp"

namespace sbev {

namespace detail {

// Accepts C x H x W or 1 x C x H x W and returns (C, H*W).
inline std::pair<std::size_t, std::size_t> class_planes(const char* op, const Tensor& t) {
  if (t.rank() == 3) return {t.dim(0), t.dim(1) * t.dim(2)};
  if (t.rank() == 4 && t.dim(0) == 1) return {t.dim(1), t.dim(2) * t.dim(3)};
  throw std::invalid_argument(std::string(op) + ": expected C x H x W (or 1 x C x H x W), got " +
                              shape_str(t.shape()));
}

}  // namespace detail

// Cross entropy over the class axis, restricted to cells with mask != 0.
// With `normalize` the sum is divided by max(1, visible count); otherwise the
// plain masked sum is returned.
inline Tensor masked_softmax_ce(const Tensor& logits, std::span<const std::uint8_t> target,
                                std::span<const std::uint8_t> mask, bool normalize = true) {
  const auto [nc, cells] = detail::class_planes("masked_softmax_ce", logits);
  if (target.size() != cells || mask.size() != cells) {
    throw std::invalid_argument("masked_softmax_ce: target/mask hold " + std::to_string(target.size()) +
                                "/" + std::to_string(mask.size()) + " cells, logits hold " +
                                std::to_string(cells));
  }
  std::size_t visible = 0;
  for (std::size_t i = 0; i < cells; ++i) {
    if (target[i] >= nc) {
      throw std::invalid_argument("masked_softmax_ce: target class " + std::to_string(target[i]) +
                                  " at cell " + std::to_string(i) + " outside [0, " +
                                  std::to_string(nc) + ")");
    }
    if (mask[i]) ++visible;
  }
  const double norm = normalize ? 1.0 / double(std::max<std::size_t>(1, visible)) : 1.0;

  Tape* tape = detail::recording_tape({&logits});
  Tensor out = detail::make_output({1}, tape);
  auto x = logits.data();
  // Softmax probabilities of visible cells, kept for the backward pass.
  std::vector<double> prob(tape ? nc * cells : 0, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    if (!mask[i]) continue;
    double mx = x[i];
    for (std::size_t k = 1; k < nc; ++k) mx = std::max(mx, x[k * cells + i]);
    double z = 0.0;
    for (std::size_t k = 0; k < nc; ++k) z += std::exp(x[k * cells + i] - mx);
    const double lse = mx + std::log(z);
    total += lse - x[target[i] * cells + i];
    if (tape) {
      for (std::size_t k = 0; k < nc; ++k) prob[k * cells + i] = std::exp(x[k * cells + i] - lse);
    }
  }
  out[0] = total * norm;
  if (tape) {
    std::vector<std::uint8_t> tgt(target.begin(), target.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    tape->record("masked_softmax_ce", [li = logits.shared(), oi = out.shared(), prob = std::move(prob),
                                       tgt = std::move(tgt), msk = std::move(msk), nc, cells, norm] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = li->grad_buffer();
      const double s = g[0] * norm;
      for (std::size_t i = 0; i < cells; ++i) {
        if (!msk[i]) continue;
        for (std::size_t k = 0; k < nc; ++k) {
          dst[k * cells + i] += s * (prob[k * cells + i] - (k == tgt[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

// Mean absolute difference between the first k channels of a and b, which
// may differ in channel count but must agree spatially.
inline Tensor l1_first_k(const Tensor& a, const Tensor& b, std::size_t k) {
  if (k == 0) throw std::invalid_argument("l1_first_k: K must be positive");
  const auto [ca, pa] = detail::class_planes("l1_first_k", a);
  const auto [cb, pb] = detail::class_planes("l1_first_k", b);
  if (pa != pb) {
    throw std::invalid_argument("l1_first_k: spatial extents differ: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
  if (k > std::min(ca, cb)) {
    throw std::invalid_argument("l1_first_k: K=" + std::to_string(k) + " exceeds channel count " +
                                std::to_string(std::min(ca, cb)));
  }
  const std::size_t n = k * pa;
  Tape* tape = detail::recording_tape({&a, &b});
  Tensor out = detail::make_output({1}, tape);
  auto x = a.data(), y = b.data();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += std::abs(x[i] - y[i]);
  out[0] = total / double(n);
  if (tape) {
    tape->record("l1_first_k", [ai = a.shared(), bi = b.shared(), oi = out.shared(), n] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      const double s = g[0] / double(n);
      double* da = ai->requires_grad ? ai->grad_buffer() : nullptr;
      double* db = bi->requires_grad ? bi->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = ai->data[i] - bi->data[i];
        const double sg = d > 0.0 ? s : (d < 0.0 ? -s : 0.0);
        if (da) da[i] += sg;
        if (db) db[i] -= sg;
      }
    });
  }
  return out;
}

// Mean |pred - target| over cells where mask != 0 (0 when the mask is empty).
// pred and target share a shape; target is a constant.
inline Tensor masked_l1(const Tensor& pred, std::span<const double> target,
                        std::span<const std::uint8_t> mask) {
  if (target.size() != pred.numel() || mask.size() != pred.numel()) {
    throw std::invalid_argument("masked_l1: target/mask size does not match prediction " +
                                shape_str(pred.shape()));
  }
  std::size_t count = 0;
  for (auto m : mask) count += m ? 1 : 0;
  const double norm = 1.0 / double(std::max<std::size_t>(1, count));
  Tape* tape = detail::recording_tape({&pred});
  Tensor out = detail::make_output({1}, tape);
  double total = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) total += std::abs(pred[i] - target[i]);
  }
  out[0] = total * norm;
  if (tape) {
    std::vector<double> sign(pred.numel(), 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask[i]) continue;
      const double d = pred[i] - target[i];
      sign[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
    }
    tape->record("masked_l1", [pi = pred.shared(), oi = out.shared(), sign = std::move(sign), norm] {
      const double* g = detail::out_grad(oi);
      if (!g) return;
      double* dst = pi->grad_buffer();
      for (std::size_t i = 0; i < sign.size(); ++i) dst[i] += g[0] * norm * sign[i];
    });
  }
  return out;
}

}  // namespace sbev
