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

// Training loop, evaluation and the frozen-trunk disparity probe.

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <functional>
#include <numeric>
#include <random>
#include <thread>
#include <vector>

#include "sbev/metrics.hpp"
#include "sbev/network.hpp"

namespace sbev {

// Independent per-purpose seeds derived from one run seed.
enum class SeedPurpose : std::uint64_t { kInit = 1, kDataOrder = 2, kProbe = 3 };

inline std::uint64_t derive_seed(std::uint64_t seed, SeedPurpose purpose) {
  std::uint64_t s = seed ^ (0x9E3779B97F4A7C15ull * std::uint64_t(purpose));
  return detail::splitmix64(s);
}

// A dataset held in memory as network inputs plus ground truth.
struct LoadedSet {
  std::vector<std::string> ids;
  std::vector<ModelInput> inputs;
  std::vector<SemanticMap> gts;
  std::vector<std::vector<float>> depths;  // kept for the disparity probe
  std::size_t size() const { return inputs.size(); }
};

inline LoadedSet load_set(const std::vector<Sample>& samples, const ModelConfig& cfg) {
  LoadedSet set;
  for (const auto& s : samples) {
    set.ids.push_back(s.id);
    set.inputs.push_back(make_input(s, cfg));
    set.gts.push_back(s.gt);
    set.depths.push_back(s.depth);
  }
  return set;
}

struct TrainOptions {
  int epochs = 40;
  int batch_size = 2;
  double lr = 1e-3;              // initial rate
  double lr_final_ratio = 0.05;  // cosine decay to lr * ratio at the last epoch; 1 keeps it constant
  std::uint64_t seed = 0;
  bool eval_each_epoch = true;
};

inline double epoch_lr(const TrainOptions& o, int epoch) {
  if (o.epochs <= 1) return o.lr;
  const double t = double(epoch - 1) / double(o.epochs - 1);
  const double lo = o.lr * o.lr_final_ratio;
  return lo + 0.5 * (o.lr - lo) * (1.0 + std::cos(M_PI * t));
}

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double test_miou = std::nan("");
  double seconds = 0.0;
};

// Softmax probabilities, N_C x N_y x N_x channel-major, in inference mode.
inline std::vector<double> predict_probs(const SbevModel& model, const ModelInput& in) {
  const Tensor logits = model.forward(in, false).logits;
  const Tensor p = softmax(logits, 1);
  return std::vector<double>(p.data().begin(), p.data().end());
}

struct EvalOptions {
  std::vector<double> distance_thresholds{5.0, 10.0, 15.0, 20.0};
  bool pixel_ap = false;
};

// Evaluates precomputed probability maps (one per sample) against ground truth.
inline EvalReport evaluate_probs(const std::vector<std::vector<double>>& probs, const std::vector<SemanticMap>& gts,
                                 const LayoutSpec& layout, const EvalOptions& opts = {}) {
  if (probs.size() != gts.size()) throw std::invalid_argument("evaluate_probs: prediction/ground-truth count mismatch");
  IouCounts counts(layout.n_classes);
  DistanceBinner binner(layout, opts.distance_thresholds);
  PixelApAccumulator ap(layout.n_classes);
  for (std::size_t s = 0; s < probs.size(); ++s) {
    const auto pred = argmax_classes(probs[s], std::size_t(layout.n_classes));
    counts.add(pred, gts[s].classes, gts[s].mask);
    binner.add(pred, gts[s]);
    if (opts.pixel_ap) ap.add(probs[s], gts[s].classes, gts[s].mask);
  }
  EvalReport r = report_from_counts(counts);
  r.distance_bins = binner.bins();
  if (opts.pixel_ap) r.pixel_ap = ap.result();
  return r;
}

// Worker count for inference over many samples: SBEV_THREADS, default 1.
inline int worker_threads() {
  static const int n = [] {
    const char* env = std::getenv("SBEV_THREADS");
    const int v = env ? std::atoi(env) : 1;
    return std::clamp(v, 1, 256);
  }();
  return n;
}

// Inference is tape-free, so samples can run on independent threads.
inline std::vector<std::vector<double>> predict_all(const SbevModel& model, const LoadedSet& set) {
  std::vector<std::vector<double>> out(set.size());
  const std::size_t workers = std::min<std::size_t>(std::size_t(worker_threads()), std::max<std::size_t>(1, set.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < set.size(); ++i) out[i] = predict_probs(model, set.inputs[i]);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < set.size(); i = next++) out[i] = predict_probs(model, set.inputs[i]);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline EvalReport evaluate(const SbevModel& model, const LoadedSet& set, const EvalOptions& opts = {}) {
  return evaluate_probs(predict_all(model, set), set.gts, model.config().layout, opts);
}

// Loss of one sample, recorded on the current tape.
inline Tensor sample_loss(const SbevModel& model, const ModelInput& in, const SemanticMap& gt) {
  const ForwardResult out = model.forward(in, true);
  if (model.config().variant == Variant::kCmd) return loss_cmd(out.logits_ipm, out.logits, gt, out.l_kt);
  return loss_supervised(out.logits, gt);
}

// Mini-batch Adam training. Each batch accumulates per-sample gradients of
// loss / batch_size before one optimizer step. `on_epoch` runs after every
// epoch (logging, snapshots). Throws NumericError on a non-finite loss or
// gradient, before the offending step is applied.
inline std::vector<EpochLog> train_model(SbevModel& model, const LoadedSet& train, const LoadedSet* test,
                                         const TrainOptions& opts,
                                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  if (train.size() == 0) throw DataError("train: empty training set");
  if (opts.epochs < 0 || opts.batch_size < 1) throw std::invalid_argument("train: epochs >= 0 and batch_size >= 1");
  std::mt19937_64 order_rng(derive_seed(opts.seed, SeedPurpose::kDataOrder));
  AdamState adam;
  adam.lr = opts.lr;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochLog> logs;
  model.zero_grad();
  for (int epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    adam.lr = epoch_lr(opts, epoch);
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += std::size_t(opts.batch_size)) {
      const std::size_t end = std::min(order.size(), start + std::size_t(opts.batch_size));
      const double inv = 1.0 / double(end - start);
      for (std::size_t b = start; b < end; ++b) {
        Tape tape;
        const std::size_t idx = order[b];
        const Tensor loss = sample_loss(model, train.inputs[idx], train.gts[idx]);
        const double value = loss.item();
        if (!std::isfinite(value)) {
          model.zero_grad();
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " on sample " + train.ids[idx]);
        }
        loss_sum += value;
        tape.backward(scale(loss, inv));
      }
      adam_step(model.parameters(), adam);
      model.zero_grad();
    }
    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / double(train.size());
    if (test && opts.eval_each_epoch && test->size() > 0) log.test_miou = evaluate(model, *test).miou;
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    logs.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Disparity probe: a single 3D conv (C_v -> 1, 3x3x3) on the frozen refined
// volume, soft-argmax over the D planes, regressed with a masked L1 loss.

struct ProbeOptions {
  int epochs = 30;
  double lr = 1e-2;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double error = 0.0;               // three-pixel error of the probe on the test set
  double constant_error = 0.0;      // same for the constant-disparity baseline
  double constant_disparity = 0.0;  // median training disparity
  std::vector<double> train_loss;   // per epoch
};

// Ground-truth disparity (input pixels) at feature-pixel centres, i.e. image
// pixel (4 r, 4 c). Valid where the ray hits something within max_disparity.
inline void feature_disparity(std::span<const float> depth, const ModelConfig& cfg, std::vector<double>& disp,
                              std::vector<std::uint8_t>& valid) {
  const int hf = cfg.feat_h(), wf = cfg.feat_w(), ds = cfg.feat_downsample;
  disp.assign(std::size_t(hf) * wf, 0.0);
  valid.assign(std::size_t(hf) * wf, 0);
  for (int r = 0; r < hf; ++r) {
    for (int c = 0; c < wf; ++c) {
      const double z = depth[std::size_t(r * ds) * cfg.rig.image_w + std::size_t(c * ds)];
      if (!(z > 0.0)) continue;
      const double d = cfg.rig.f * cfg.rig.baseline / z;
      if (d > cfg.max_disparity) continue;
      disp[std::size_t(r) * wf + c] = d;
      valid[std::size_t(r) * wf + c] = 1;
    }
  }
}

class DisparityProbe {
 public:
  DisparityProbe(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    std::mt19937_64 rng(seed);
    const auto cv = std::size_t(cfg.volume_channels);
    weight_ = Tensor::zeros({1, cv, 3, 3, 3}, true);
    he_uniform(weight_, cv * 27, rng);
    bias_ = Tensor::zeros({1}, true);
    for (int k = 0; k < cfg.disparity_planes; ++k) values_.push_back(k * cfg.disp_step());
  }

  // refined: 1 x C_v x D x H' x W' -> H' x W' disparity in input pixels.
  Tensor operator()(const Tensor& refined) const {
    const Tensor cost = conv3d(refined, weight_, bias_, 1, 1);
    const Tensor planes = reshape(cost, {cost.dim(2), cost.dim(3), cost.dim(4)});
    return expectation(softmax(planes, 0), 0, values_);
  }

  std::vector<Tensor> parameters() const { return {weight_, bias_}; }

 private:
  ModelConfig cfg_;
  Tensor weight_, bias_;
  std::vector<double> values_;
};

// Trains a probe on `train` and reports three-pixel errors on `test`. The
// model is only run in inference mode, so its parameters stay untouched.
inline ProbeResult disparity_probe(const SbevModel& model, const LoadedSet& train, const LoadedSet& test,
                                   const ProbeOptions& opts) {
  const ModelConfig& cfg = model.config();
  if (!uses_stereo(cfg.variant)) throw std::invalid_argument("disparity_probe: model has no stereo trunk");
  struct Item {
    Tensor volume;
    std::vector<double> disp;
    std::vector<std::uint8_t> valid;
  };
  auto prepare = [&](const LoadedSet& set) {
    std::vector<Item> items;
    for (std::size_t i = 0; i < set.size(); ++i) {
      Item it;
      feature_disparity(set.depths[i], cfg, it.disp, it.valid);
      if (std::none_of(it.valid.begin(), it.valid.end(), [](auto v) { return v != 0; })) continue;
      it.volume = model.trunk_volume(set.inputs[i]);
      items.push_back(std::move(it));
    }
    return items;
  };
  const std::vector<Item> tr = prepare(train), te = prepare(test);
  if (tr.empty() || te.empty()) throw DataError("disparity_probe: no valid disparity pixels");

  std::vector<double> all;
  for (const auto& it : tr) {
    for (std::size_t k = 0; k < it.disp.size(); ++k) {
      if (it.valid[k]) all.push_back(it.disp[k]);
    }
  }
  std::nth_element(all.begin(), all.begin() + long(all.size() / 2), all.end());
  ProbeResult result;
  result.constant_disparity = all[all.size() / 2];

  DisparityProbe probe(cfg, derive_seed(opts.seed, SeedPurpose::kProbe));
  std::vector<Tensor> params = probe.parameters();
  AdamState adam;
  adam.lr = opts.lr;
  std::mt19937_64 rng(derive_seed(opts.seed, SeedPurpose::kDataOrder));
  std::vector<std::size_t> order(tr.size());
  std::iota(order.begin(), order.end(), 0);
  for (int e = 0; e < opts.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t idx : order) {
      Tape tape;
      const Tensor loss = masked_l1(probe(tr[idx].volume), tr[idx].disp, tr[idx].valid);
      sum += loss.item();
      tape.backward(loss);
      adam_step(params, adam);
      for (auto& p : params) p.zero_grad();
    }
    result.train_loss.push_back(sum / double(tr.size()));
  }

  std::vector<double> pred_all, gt_all, const_all;
  std::vector<std::uint8_t> valid_all;
  for (const auto& it : te) {
    const Tensor pred = probe(it.volume);
    pred_all.insert(pred_all.end(), pred.data().begin(), pred.data().end());
    gt_all.insert(gt_all.end(), it.disp.begin(), it.disp.end());
    valid_all.insert(valid_all.end(), it.valid.begin(), it.valid.end());
  }
  const_all.assign(gt_all.size(), result.constant_disparity);
  result.error = three_pixel_error(pred_all, gt_all, valid_all);
  result.constant_error = three_pixel_error(const_all, gt_all, valid_all);
  return result;
}

}  // namespace sbev
