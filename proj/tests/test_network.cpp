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

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "roundtrip_checks.hpp"
#include "sbev/train.hpp"
#include "test_util.hpp"

namespace sbev {
namespace {

Sample render_sample(std::uint64_t seed, const ModelConfig& cfg = {}) {
  return synthesize_sample("n", sample_scene(seed, SceneParams{}, cfg.layout, cfg.rig), cfg.rig, cfg.plane,
                           cfg.layout);
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = double(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i] / n;
    mb += b[i] / n;
  }
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

const std::vector<Variant> kAllVariants{Variant::kStereoOnly, Variant::kStereoRgbIpm, Variant::kStereoFeatIpm,
                                        Variant::kFull,       Variant::kCmd,          Variant::kIpmUNet,
                                        Variant::kPseudoLidarUNet};

TEST(Network, FeatureShapeAndWeightSharing) {
  ModelConfig cfg;
  const SbevModel model(cfg, 1);
  const Sample s = render_sample(4);
  const Tensor left = image_tensor(s.left);
  const Tensor f = model.extract_features(left);
  EXPECT_EQ(f.shape(), (Shape{1, std::size_t(cfg.channels), 24, 32}));
  EXPECT_TRUE(testing::same_bits(f, model.extract_features(left)));
  EXPECT_THROW(model.extract_features(Tensor::zeros({1, 3, 94, 128})), std::invalid_argument);
}

TEST(Network, ExtractorTranslationCovariance) {
  const SbevModel model(ModelConfig{}, 2);
  const Sample s = render_sample(5);
  const Tensor img = image_tensor(s.left);
  const std::size_t h = img.dim(2), w = img.dim(3);
  Tensor shifted = Tensor::zeros(img.shape());
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t u = 0; u < w; ++u) {
        shifted[(c * h + r) * w + u] = img[(c * h + r) * w + (u >= 4 ? u - 4 : 0)];
      }
    }
  }
  const Tensor a = model.extract_features(img), b = model.extract_features(shifted);
  const std::size_t ch = a.dim(1), hf = a.dim(2), wf = a.dim(3);
  std::vector<double> va, vb;
  for (std::size_t c = 0; c < ch; ++c) {
    for (std::size_t r = 2; r + 2 < hf; ++r) {
      for (std::size_t u = 3; u + 3 < wf; ++u) {
        va.push_back(a[(c * hf + r) * wf + u]);
        vb.push_back(b[(c * hf + r) * wf + u + 1]);
      }
    }
  }
  EXPECT_GE(pearson(va, vb), 0.9);
}

TEST(Network, FeatureVolumeZeroPlaneAndBorder) {
  ModelConfig cfg;
  const SbevModel model(cfg, 3);
  const Sample s = render_sample(6);
  const Tensor fr = model.extract_features(image_tensor(s.left));
  const Tensor ft = model.extract_features(image_tensor(s.right));
  const Tensor v = model.build_feature_volume(fr, ft);
  const std::size_t c = fr.dim(1), d = std::size_t(cfg.disparity_planes), hw = fr.dim(2) * fr.dim(3);
  const std::size_t w = fr.dim(3);
  ASSERT_EQ(v.shape(), (Shape{1, 2 * c, d, fr.dim(2), w}));
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) {
      ASSERT_EQ(v[(ch * d + 0) * hw + i], fr[ch * hw + i]);
      ASSERT_EQ(v[((c + ch) * d + 0) * hw + i], ft[ch * hw + i]);
    }
  }
  const auto zero_cols = std::size_t(std::ceil((d - 1) * cfg.disp_step_feat()));
  ASSERT_EQ(zero_cols, 12u);
  for (std::size_t u = 0; u < w; ++u) {
    bool all_zero = true;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t r = 0; r < fr.dim(2); ++r) all_zero &= v[((c + ch) * d + d - 1) * hw + r * w + u] == 0.0;
    }
    EXPECT_EQ(all_zero, u < zero_cols) << u;
  }
}

// A textured wall filling the view at depth z: the plane whose shift matches
// f T / z maximises the correlation between the two volume halves.
TEST(Network, WallCorrelationPeaksAtTrueDisparity) {
  ModelConfig cfg;
  const SbevModel model(cfg, 4);
  const double z = cfg.rig.f * cfg.rig.baseline / 12.0;  // 12 px, 3 feature px
  SceneSpec scene;
  scene.texture_seed = 77;
  Box wall;
  wall.cls = kBuilding;
  wall.cx = 0.0;
  wall.cy = z + 0.5;
  wall.w = 40.0;
  wall.l = 1.0;
  wall.h = 30.0;
  scene.boxes.push_back(wall);
  const StereoFrame frame = render_stereo(scene, cfg.rig, cfg.plane);
  const Tensor v = model.build_feature_volume(model.extract_features(image_tensor(frame.left)),
                                              model.extract_features(image_tensor(frame.right)));
  const std::size_t c = std::size_t(cfg.channels), d = std::size_t(cfg.disparity_planes);
  const std::size_t h = v.dim(3), w = v.dim(4), hw = h * w;
  int best = -1;
  double best_corr = -2.0;
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<double> a, b;
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t r = 1; r + 3 < h; ++r) {
        for (std::size_t u = 13; u + 1 < w; ++u) {
          a.push_back(v[(ch * d + k) * hw + r * w + u]);
          b.push_back(v[((c + ch) * d + k) * hw + r * w + u]);
        }
      }
    }
    const double corr = pearson(a, b);
    if (corr > best_corr) {
      best_corr = corr;
      best = int(k);
    }
  }
  EXPECT_EQ(best, int(std::lround(3.0 / cfg.disp_step_feat())));
}

TEST(Network, RefineAndReduceShapes) {
  ModelConfig cfg;
  const SbevModel model(cfg, 5);
  const Sample s = render_sample(7);
  const ModelInput in = make_input(s, cfg);
  const Tensor refined = model.trunk_volume(in);
  EXPECT_EQ(refined.shape(), (Shape{1, std::size_t(cfg.volume_channels), 32, 24, 32}));
  const Tensor folded = SbevModel::fold_height(refined);
  EXPECT_EQ(folded.shape(), (Shape{1, std::size_t(cfg.volume_channels) * 24, 32, 32}));
  // A pure permutation: the same multiset of values.
  std::vector<double> s1(refined.data().begin(), refined.data().end()), s2(folded.data().begin(), folded.data().end());
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  EXPECT_EQ(s1, s2);
  // Inverse permutation restores the refined volume exactly.
  const Tensor back = permute(reshape(folded, {1, refined.dim(1), refined.dim(3), refined.dim(2), refined.dim(4)}),
                              {0, 1, 3, 2, 4});
  EXPECT_TRUE(testing::same_bits(back, refined));
  const Tensor reduced = model.reduce_volume(refined);
  EXPECT_EQ(reduced.shape(), (Shape{1, std::size_t(cfg.reduced_channels), 32, 32}));
  const Tensor bev = model.stereo_bev(reduced);
  EXPECT_EQ(bev.shape(), (Shape{1, std::size_t(cfg.reduced_channels), 48, 48}));
}

TEST(Network, ZeroVolumeRefinesToBiasConstant) {
  ModelConfig cfg;
  const SbevModel model(cfg, 6);
  const Tensor zero = Tensor::zeros({1, 2 * std::size_t(cfg.channels), 32, 24, 32});
  const Tensor out = model.refine_volume(zero);
  const std::size_t n = 32 * 24 * 32;
  // Away from the borders the padded convolutions see only constants.
  for (std::size_t ch = 0; ch < out.dim(1); ++ch) {
    const double ref = out[ch * n + (16 * 24 + 12) * 32 + 16];
    for (std::size_t k = 2; k < 30; k += 5) {
      for (std::size_t r = 2; r < 22; r += 3) {
        for (std::size_t u = 2; u < 30; u += 3) EXPECT_EQ(out[ch * n + (k * 24 + r) * 32 + u], ref);
      }
    }
  }
}

TEST(Network, ConstantVolumeGivesConstantBevInsideFrustum) {
  ModelConfig cfg;
  const SbevModel model(cfg, 7);
  const Tensor reduced = Tensor::full({1, 2, 32, 32}, 0.75);
  const Tensor bev = model.stereo_bev(reduced);
  const SamplingGrid& g = model.stereo_grid();
  const std::size_t cells = cfg.layout.cells();
  int interior = 0;
  for (std::size_t k = 0; k < cells; ++k) {
    const double col = g.coords[2 * k], row = g.coords[2 * k + 1];
    if (!g.valid[k]) {
      EXPECT_EQ(bev[k], 0.0);
    } else if (col >= 0 && col <= 31 && row >= 0 && row <= 31) {
      ++interior;
      EXPECT_NEAR(bev[k], 0.75, 1e-12);
      EXPECT_NEAR(bev[cells + k], 0.75, 1e-12);
    }
  }
  EXPECT_GT(interior, 200);
}

TEST(Network, IpmCellsOutsideTheImageAreZero) {
  ModelConfig cfg;
  const SbevModel model(cfg, 8);
  const Tensor img = Tensor::full({1, 3, 96, 128}, 0.3);
  const auto [ipm_img, ipm_feat] = model.ipm_branch(img, Tensor{});
  const SamplingGrid& g = model.ipm_image_grid();
  int invalid = 0;
  for (std::size_t k = 0; k < cfg.layout.cells(); ++k) {
    if (!g.valid[k]) {
      ++invalid;
      EXPECT_EQ(ipm_img[k], 0.0);
    }
  }
  EXPECT_GT(invalid, 0);
  EXPECT_FALSE(ipm_feat.defined());
}

TEST(Network, IpmRoadStripLandsOnFootprint) {
  ModelConfig cfg;
  SceneSpec scene;
  scene.texture_seed = 3;
  scene.road_strips.push_back({kRoad, -2.0, 2.0, -5.0, 40.0});
  const StereoFrame frame = render_stereo(scene, cfg.rig, cfg.plane);
  // Road-coloured pixels: the rendered front classes mark them.
  RgbImage mask_img(cfg.rig.image_w, cfg.rig.image_h);
  for (std::size_t p = 0; p < frame.classes.size(); ++p) {
    for (int c = 0; c < 3; ++c) mask_img.pixels[p * 3 + std::size_t(c)] = frame.classes[p] == kRoad ? 255 : 0;
  }
  const SbevModel model(cfg, 9);
  const Tensor bev = model.ipm_branch(image_tensor(mask_img), Tensor{}).first;
  const auto gt = gt_layout(scene, cfg.layout);
  const SamplingGrid& g = model.ipm_image_grid();
  int inter = 0, uni = 0;
  for (std::size_t k = 0; k < cfg.layout.cells(); ++k) {
    if (!g.valid[k]) continue;
    const bool p = bev[k] > 0.0, t = gt[k] == kRoad;
    inter += p && t;
    uni += p || t;
  }
  ASSERT_GT(uni, 0);
  EXPECT_GE(double(inter) / uni, 0.8);
}

TEST(Network, LogitShapeForEveryVariant) {
  const Sample s = render_sample(10);
  for (Variant v : kAllVariants) {
    ModelConfig cfg;
    cfg.variant = v;
    const SbevModel model(cfg, 11);
    const ModelInput in = make_input(s, cfg);
    const ForwardResult r = model.forward(in);
    EXPECT_EQ(r.logits.shape(), (Shape{1, 5, 48, 48})) << variant_name(v);
    EXPECT_FALSE(r.l_kt.defined());
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(parse_variant("mono"), std::invalid_argument);
}

TEST(Network, CmdInferenceIgnoresIpmPath) {
  ModelConfig cfg;
  cfg.variant = Variant::kCmd;
  SbevModel model(cfg, 12);
  const ModelInput in = make_input(render_sample(11), cfg);
  const Tensor before = model.forward(in).logits;
  Tensor training_logits;
  {
    Tape tape;
    const ForwardResult r = model.forward(in, true);
    ASSERT_TRUE(r.logits_ipm.defined());
    ASSERT_TRUE(r.l_kt.defined());
    training_logits = r.logits.clone();
  }
  EXPECT_TRUE(testing::same_bits(before, training_logits));
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-50.0, 200.0);
  SamplingGrid garbage_img(cfg.layout.ny, cfg.layout.nx), garbage_feat(cfg.layout.ny, cfg.layout.nx);
  for (int r = 0; r < cfg.layout.ny; ++r) {
    for (int c = 0; c < cfg.layout.nx; ++c) {
      garbage_img.set(r, c, u(rng), u(rng));
      garbage_feat.set(r, c, u(rng), u(rng));
    }
  }
  model.set_ipm_grids(garbage_img, garbage_feat);
  EXPECT_TRUE(testing::same_bits(before, model.forward(in).logits));
  ModelInput noisy = in;
  noisy.planes = Tensor::full({1, 5, 48, 48}, std::nan(""));
  EXPECT_TRUE(testing::same_bits(before, model.forward(noisy).logits));
}

// Full with the IPM input channels of the first U-Net layer zeroed computes
// the StereoOnly network.
TEST(Network, FullWithZeroedIpmChannelsEqualsStereoOnly) {
  ModelConfig full_cfg, stereo_cfg;
  full_cfg.variant = Variant::kFull;
  stereo_cfg.variant = Variant::kStereoOnly;
  SbevModel full(full_cfg, 13);
  SbevModel stereo(stereo_cfg, 14);
  const auto& names = stereo.parameter_names();
  const auto& full_names = full.parameter_names();
  const std::size_t ipm_ch = std::size_t(full_cfg.channels) + 3, cr = std::size_t(full_cfg.reduced_channels);
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto it = std::find(full_names.begin(), full_names.end(), names[i]);
    ASSERT_NE(it, full_names.end()) << names[i];
    Tensor src = full.parameters()[std::size_t(it - full_names.begin())];
    Tensor dst = stereo.parameters()[i];
    if (names[i] == "unet.enc1.weight") {
      const std::size_t out = src.dim(0), k2 = 9;
      ASSERT_EQ(src.dim(1), ipm_ch + cr);
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t c = 0; c < ipm_ch + cr; ++c) {
          for (std::size_t t = 0; t < k2; ++t) {
            double& w = src[(o * (ipm_ch + cr) + c) * k2 + t];
            if (c < ipm_ch) {
              w = 0.0;
            } else {
              dst[(o * cr + c - ipm_ch) * k2 + t] = w;
            }
          }
        }
      }
    } else {
      ASSERT_EQ(src.shape(), dst.shape()) << names[i];
      std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    }
  }
  EXPECT_EQ(full.parameters().size(), stereo.parameters().size());
  const Sample s = render_sample(12);
  const Tensor a = full.forward(make_input(s, full_cfg)).logits;
  const Tensor b = stereo.forward(make_input(s, stereo_cfg)).logits;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  EXPECT_LE(worst, 1e-10);
}

TEST(Network, GradientsReachParametersForEveryVariant) {
  const Sample s = render_sample(13);
  for (Variant v : kAllVariants) {
    ModelConfig cfg;
    cfg.variant = v;
    SbevModel model(cfg, 15);
    const ModelInput in = make_input(s, cfg);
    {
      Tape tape;
      tape.backward(sample_loss(model, in, s.gt));
    }
    int nonzero = 0;
    for (const Tensor& p : model.parameters()) {
      bool any = false;
      for (double g : p.grad()) any |= g != 0.0;
      nonzero += any;
    }
    EXPECT_GE(double(nonzero), 0.95 * double(model.parameters().size())) << variant_name(v);
    model.zero_grad();
  }
}

TEST(Network, ExtractorGradientAccumulatesBothViews) {
  ModelConfig cfg;
  cfg.variant = Variant::kStereoOnly;
  SbevModel model(cfg, 16);
  const Sample s = render_sample(14);
  const Tensor l = image_tensor(s.left), r = image_tensor(s.right);
  std::mt19937_64 rng(3);
  std::vector<double> w(std::size_t(cfg.channels) * 24 * 32);
  for (auto& x : w) x = std::uniform_real_distribution<double>(-1, 1)(rng);
  auto grad_of = [&](bool use_l, bool use_r) {
    model.zero_grad();
    {
      Tape tape;
      Tensor loss = Tensor::scalar(0.0);
      if (use_l) loss = add(loss, testing::weighted_sum(model.extract_features(l), w));
      if (use_r) loss = add(loss, testing::weighted_sum(model.extract_features(r), w));
      tape.backward(loss);
    }
    const Tensor& p = model.parameters()[0];
    return std::vector<double>(p.grad().begin(), p.grad().end());
  };
  const auto gl = grad_of(true, false), gr = grad_of(false, true), gb = grad_of(true, true);
  ASSERT_EQ(model.parameter_names()[0], "extractor.conv1.weight");
  double norm_r = 0.0;
  for (std::size_t i = 0; i < gb.size(); ++i) {
    EXPECT_NEAR(gb[i], gl[i] + gr[i], 1e-9 * (1.0 + std::abs(gb[i])));
    norm_r += std::abs(gr[i]);
  }
  EXPECT_GT(norm_r, 0.0);
}

TEST(Network, CmdLossIsConnectedToBothHeads) {
  ModelConfig cfg;
  cfg.variant = Variant::kCmd;
  SbevModel model(cfg, 17);
  const Sample s = render_sample(15);
  {
    Tape tape;
    tape.backward(sample_loss(model, make_input(s, cfg), s.gt));
  }
  auto touched = [&](const std::string& prefix) {
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      if (model.parameter_names()[i].rfind(prefix, 0) != 0) continue;
      for (double g : model.parameters()[i].grad()) {
        if (g != 0.0) return true;
      }
    }
    return false;
  };
  EXPECT_TRUE(touched("unet_ipm."));
  EXPECT_TRUE(touched("unet_stereo."));
  EXPECT_TRUE(touched("extractor."));
  EXPECT_TRUE(touched("reduce."));
}

TEST(Network, CheckpointRoundTripAndMismatch) {
  const fs::path dir = testing::temp_dir("net_ckpt");
  for (Variant v : {Variant::kFull, Variant::kCmd, Variant::kPseudoLidarUNet}) {
    EXPECT_EQ(testing::checkpoint_roundtrip(dir, v, 21), "") << variant_name(v);
  }
  ModelConfig full_cfg;
  const SbevModel full(full_cfg, 1);
  save_checkpoint(dir / "full.ckpt", full);
  ModelConfig stereo_cfg;
  stereo_cfg.variant = Variant::kStereoOnly;
  SbevModel stereo(stereo_cfg, 1);
  EXPECT_THROW(load_checkpoint(dir / "full.ckpt", stereo), DataError);
  ModelConfig k_cfg;
  k_cfg.distill_channels = 2;
  SbevModel other(k_cfg, 1);
  EXPECT_THROW(load_checkpoint(dir / "full.ckpt", other), DataError);
  SbevModel same(full_cfg, 99);
  EXPECT_NO_THROW(load_checkpoint(dir / "full.ckpt", same));
  EXPECT_THROW(load_model(dir / "absent.ckpt"), DataError);
}

TEST(Network, ModelConfigJsonRoundTripAndValidation) {
  ModelConfig cfg;
  cfg.variant = Variant::kStereoFeatIpm;
  cfg.plane = GroundPlane{0.01, 0.02, 1.7};
  cfg.unet_widths = {8, 16, 32};
  EXPECT_EQ(to_json(model_config_from_json(to_json(cfg))), to_json(cfg));
  ModelConfig bad = cfg;
  bad.distill_channels = 9;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.rig.image_w = 130;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Network, PseudoLidarSinglePixelAndZeroDepth) {
  StereoRig rig;
  LayoutSpec layout;
  const std::size_t n = std::size_t(rig.image_w) * rig.image_h;
  std::vector<float> depth(n, 0.0f);
  std::vector<std::uint8_t> cls(n, 0);
  const std::size_t u = std::size_t(rig.cx), v = 70;
  depth[v * rig.image_w + u] = 10.1f;
  cls[v * rig.image_w + u] = kCar;
  cls[3] = kBuilding;  // zero depth, ignored
  const auto planes = pseudo_lidar_bev(depth, cls, rig, layout);
  const int i = int(std::floor((0.0 - layout.x_min) / layout.cell_w()));
  const int j = int(std::floor((10.1 - layout.y_min) / layout.cell_h()));
  const std::size_t cell = std::size_t(j) * layout.nx + i;
  double total = 0.0;
  for (double p : planes) total += p;
  EXPECT_EQ(total, 1.0);
  EXPECT_EQ(planes[kCar * layout.cells() + cell], 1.0);
}

TEST(Network, PseudoLidarCoversVisibleGroundWedge) {
  ModelConfig cfg;
  const SceneSpec scene = sample_scene(1, SceneParams::ground_only(), cfg.layout, cfg.rig);
  const Sample s = synthesize_sample("g", scene, cfg.rig, cfg.plane, cfg.layout);
  const auto planes = pseudo_lidar_bev(s.depth, s.front, cfg.rig, cfg.layout);
  const double tan_half = std::tan(0.5 * cfg.rig.hfov_deg() * M_PI / 180.0);
  int checked = 0, covered = 0;
  for (int j = 0; j < cfg.layout.ny; ++j) {
    for (int i = 0; i < cfg.layout.nx; ++i) {
      const double x = cfg.layout.x_center(i), y = cfg.layout.y_center(j);
      const std::size_t cell = std::size_t(j) * cfg.layout.nx + i;
      double votes = 0.0;
      for (int c = 0; c < cfg.n_classes(); ++c) votes += planes[std::size_t(c) * cfg.layout.cells() + cell];
      if (votes > 0.0) {
        EXPECT_NEAR(votes, 1.0, 1e-12);
        EXPECT_EQ(planes[std::size_t(kCar) * cfg.layout.cells() + cell], 0.0);
        EXPECT_EQ(planes[std::size_t(kBuilding) * cfg.layout.cells() + cell], 0.0);
      }
      if (y < 4.0 || y > 8.0 || std::abs(x) + 0.5 > (y - 0.5) * tan_half) continue;
      ++checked;
      covered += planes[std::size_t(scene.surface_class(x, y)) * cfg.layout.cells() + cell] > 0.0;
    }
  }
  ASSERT_GT(checked, 50);
  EXPECT_GE(double(covered) / checked, 0.95);
}

TEST(Network, ProbeShapeUniformAndOneHot) {
  ModelConfig cfg;
  DisparityProbe probe(cfg, 1);
  auto params = probe.parameters();
  std::fill(params[0].data().begin(), params[0].data().end(), 0.0);
  const Shape vshape{1, std::size_t(cfg.volume_channels), 32, 24, 32};
  Tensor vol = Tensor::zeros(vshape);
  const Tensor uniform = probe(vol);
  EXPECT_EQ(uniform.shape(), (Shape{24, 32}));
  EXPECT_NEAR(uniform[0], cfg.disp_step() * 31.0 / 2.0, 1e-12);
  params[0][13] = 1.0;  // centre tap of channel 0
  const std::size_t k0 = 9, plane = 24 * 32;
  for (std::size_t p = 0; p < plane; ++p) vol[k0 * plane + p] = 1000.0;
  const Tensor peaked = probe(vol);
  for (std::size_t p = 0; p < plane; ++p) ASSERT_NEAR(peaked[p], double(k0) * cfg.disp_step(), 1e-9);
}

TEST(Network, ProbeLeavesTrunkFrozen) {
  ModelConfig cfg;
  cfg.variant = Variant::kStereoOnly;
  SbevModel model(cfg, 18);
  std::vector<Sample> samples;
  for (std::uint64_t k = 0; k < 3; ++k) samples.push_back(render_sample(30 + k));
  const LoadedSet train = load_set({samples[0], samples[1]}, cfg), test = load_set({samples[2]}, cfg);
  std::vector<std::vector<double>> before;
  for (const Tensor& p : model.parameters()) before.emplace_back(p.data().begin(), p.data().end());
  ProbeOptions opts;
  opts.epochs = 2;
  const ProbeResult r = disparity_probe(model, train, test, opts);
  for (std::size_t i = 0; i < before.size(); ++i) {
    const Tensor& p = model.parameters()[i];
    EXPECT_TRUE(std::equal(before[i].begin(), before[i].end(), p.data().begin()));
    EXPECT_FALSE(p.has_grad());
  }
  EXPECT_EQ(r.train_loss.size(), 2u);
  EXPECT_GE(r.error, 0.0);
  EXPECT_LE(r.error, 1.0);
  EXPECT_GT(r.constant_disparity, 0.0);
}

TEST(Network, ShortTrainingReducesLoss) {
  ModelConfig cfg;
  std::vector<Sample> samples;
  for (std::uint64_t k = 0; k < 12; ++k) {
    samples.push_back(synthesize_sample("t", sample_scene(scene_seed(3, "train", k), SceneParams{}, cfg.layout, cfg.rig),
                                        cfg.rig, cfg.plane, cfg.layout));
  }
  SbevModel model(cfg, derive_seed(3, SeedPurpose::kInit));
  TrainOptions opts;
  opts.epochs = 5;
  opts.seed = 3;
  opts.eval_each_epoch = false;
  const auto logs = train_model(model, load_set(samples, cfg), nullptr, opts);
  ASSERT_EQ(logs.size(), 5u);
  EXPECT_LT(logs[4].train_loss, logs[0].train_loss);
}

TEST(Network, TrainingIsDeterministic) {
  ModelConfig cfg;
  cfg.variant = Variant::kCmd;
  std::vector<Sample> samples{render_sample(40), render_sample(41), render_sample(42)};
  const LoadedSet set = load_set(samples, cfg);
  TrainOptions opts;
  opts.epochs = 1;
  opts.seed = 9;
  opts.eval_each_epoch = false;
  SbevModel a(cfg, 1), b(cfg, 1);
  const auto la = train_model(a, set, nullptr, opts), lb = train_model(b, set, nullptr, opts);
  EXPECT_EQ(la[0].train_loss, lb[0].train_loss);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    EXPECT_TRUE(testing::same_bits(a.parameters()[i], b.parameters()[i])) << a.parameter_names()[i];
  }
}

TEST(Network, LearningRateDecaysFromInitialValue) {
  TrainOptions o;
  o.epochs = 11;
  EXPECT_DOUBLE_EQ(epoch_lr(o, 1), 1e-3);
  EXPECT_NEAR(epoch_lr(o, 11), 1e-3 * o.lr_final_ratio, 1e-18);
  for (int e = 2; e <= 11; ++e) EXPECT_LT(epoch_lr(o, e), epoch_lr(o, e - 1));
  o.lr_final_ratio = 1.0;
  EXPECT_DOUBLE_EQ(epoch_lr(o, 7), 1e-3);
}

}  // namespace
}  // namespace sbev
