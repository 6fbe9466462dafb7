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

// Stereo BEV layout network and its ablation variants.
//
//   images --shared extractor--> F_R, F_T
//   [F_R ; shift(F_T, d)] over D disparity planes --3D refine--> V_r
//   V_r with height folded into channels --2D reduce--> R_v (C' x D x W')
//   R_v --BEV warp--> R_stereo          I_R, F_R --IPM warp--> R_ipm_img, R_ipm_feat
//   concat of the variant's BEV maps --U-Net--> class logits

#pragma once

#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "sbev/autodiff.hpp"
#include "sbev/dataset_io.hpp"
#include "sbev/geometry.hpp"

namespace sbev {

enum class Variant {
  kStereoOnly,
  kStereoRgbIpm,
  kStereoFeatIpm,
  kFull,
  kCmd,
  kIpmUNet,          // baseline: RGB IPM only
  kPseudoLidarUNet,  // baseline: back-projected depth + front-view classes
};

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kStereoOnly: return "stereo";
    case Variant::kStereoRgbIpm: return "stereo_rgb_ipm";
    case Variant::kStereoFeatIpm: return "stereo_feat_ipm";
    case Variant::kFull: return "full";
    case Variant::kCmd: return "cmd";
    case Variant::kIpmUNet: return "ipm_unet";
    case Variant::kPseudoLidarUNet: return "pseudo_lidar_unet";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::kStereoOnly, Variant::kStereoRgbIpm, Variant::kStereoFeatIpm, Variant::kFull,
                    Variant::kCmd, Variant::kIpmUNet, Variant::kPseudoLidarUNet}) {
    if (s == variant_name(v)) return v;
  }
  throw std::invalid_argument("unknown variant '" + s + "'");
}

inline bool uses_stereo(Variant v) { return v != Variant::kIpmUNet && v != Variant::kPseudoLidarUNet; }
inline bool uses_ipm_image(Variant v) {
  return v == Variant::kStereoRgbIpm || v == Variant::kFull || v == Variant::kIpmUNet;
}
inline bool uses_ipm_features(Variant v) {
  return v == Variant::kStereoFeatIpm || v == Variant::kFull || v == Variant::kCmd;
}

struct ModelConfig {
  Variant variant = Variant::kFull;
  int channels = 8;          // C, extractor width
  int feat_downsample = 4;   // two stride-2 stages
  int disparity_planes = 32;  // D
  double max_disparity = 48.0;  // pixels at input resolution
  int volume_channels = 4;   // width of the 3D refiner
  int reduced_channels = 16;  // C'
  int distill_channels = 4;   // K
  std::vector<int> unet_widths{16, 32, 64};
  StereoRig rig;
  GroundPlane plane;
  LayoutSpec layout;

  int n_classes() const { return layout.n_classes; }
  int feat_w() const { return rig.image_w / feat_downsample; }
  int feat_h() const { return rig.image_h / feat_downsample; }
  // Disparity per volume plane, in input pixels and in feature pixels.
  double disp_step() const { return max_disparity / disparity_planes; }
  double disp_step_feat() const { return max_disparity / (double(feat_downsample) * disparity_planes); }

  void validate() const {
    rig.validate();
    plane.validate();
    layout.validate();
    if (feat_downsample != 4) throw std::invalid_argument("ModelConfig: the extractor downsamples by exactly 4");
    if (rig.image_w % feat_downsample || rig.image_h % feat_downsample) {
      throw std::invalid_argument("ModelConfig: image " + std::to_string(rig.image_w) + "x" +
                                  std::to_string(rig.image_h) + " not divisible by feat_downsample " +
                                  std::to_string(feat_downsample));
    }
    if (disparity_planes < 2) throw std::invalid_argument("ModelConfig: need D >= 2");
    if (!(max_disparity > 0.0 && max_disparity < rig.image_w)) {
      throw std::invalid_argument("ModelConfig: max_disparity must lie in (0, image_w)");
    }
    if (channels < 1 || volume_channels < 1 || reduced_channels < 1) {
      throw std::invalid_argument("ModelConfig: channel counts must be positive");
    }
    if (distill_channels < 1 || distill_channels > reduced_channels || distill_channels > channels) {
      throw std::invalid_argument("ModelConfig: K must satisfy 1 <= K <= min(C, C')");
    }
    if (unet_widths.size() != 3) throw std::invalid_argument("ModelConfig: U-Net has exactly three levels");
  }
};

inline json to_json(const ModelConfig& c) {
  return {{"variant", variant_name(c.variant)},
          {"channels", c.channels},
          {"feat_downsample", c.feat_downsample},
          {"disparity_planes", c.disparity_planes},
          {"max_disparity", c.max_disparity},
          {"volume_channels", c.volume_channels},
          {"reduced_channels", c.reduced_channels},
          {"distill_channels", c.distill_channels},
          {"unet_widths", c.unet_widths},
          {"rig", to_json(c.rig)},
          {"plane", to_json(c.plane)},
          {"layout", to_json(c.layout)}};
}

inline ModelConfig model_config_from_json(const json& j) {
  const std::string what = "model config";
  ModelConfig c;
  c.variant = parse_variant(detail::field<std::string>(j, "variant", what));
  c.channels = detail::field<int>(j, "channels", what);
  c.feat_downsample = detail::field<int>(j, "feat_downsample", what);
  c.disparity_planes = detail::field<int>(j, "disparity_planes", what);
  c.max_disparity = detail::field<double>(j, "max_disparity", what);
  c.volume_channels = detail::field<int>(j, "volume_channels", what);
  c.reduced_channels = detail::field<int>(j, "reduced_channels", what);
  c.distill_channels = detail::field<int>(j, "distill_channels", what);
  c.unet_widths = detail::field<std::vector<int>>(j, "unet_widths", what);
  c.rig = rig_from_json(detail::field<json>(j, "rig", what));
  c.plane = plane_from_json(detail::field<json>(j, "plane", what));
  c.layout = layout_from_json(detail::field<json>(j, "layout", what));
  return c;
}

// Per-sample network inputs, converted once.
struct ModelInput {
  Tensor left;    // 1 x 3 x H x W, values in [-0.5, 0.5]
  Tensor right;   // same
  Tensor planes;  // 1 x N_C x N_y x N_x pseudo-lidar planes (pseudo-lidar baseline only)
};

inline Tensor image_tensor(const RgbImage& img) {
  const std::size_t hw = std::size_t(img.width) * img.height;
  Tensor t = Tensor::zeros({1, 3, std::size_t(img.height), std::size_t(img.width)});
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + p] = img.pixels[p * 3 + c] / 255.0 - 0.5;
  }
  return t;
}

// Back-projects every pixel with positive depth, drops its height and
// accumulates front-view class votes per BEV cell; each cell's votes are
// normalised to sum to one. Returns N_C x N_y x N_x planes.
inline std::vector<double> pseudo_lidar_bev(std::span<const float> depth, std::span<const std::uint8_t> front_classes,
                                            const StereoRig& rig, const LayoutSpec& layout) {
  const std::size_t w = std::size_t(rig.image_w), h = std::size_t(rig.image_h);
  if (depth.size() != w * h || front_classes.size() != w * h) {
    throw std::invalid_argument("pseudo_lidar_bev: depth/classes must be image-sized");
  }
  const std::size_t cells = layout.cells();
  std::vector<double> planes(std::size_t(layout.n_classes) * cells, 0.0);
  std::vector<double> count(cells, 0.0);
  for (std::size_t v = 0; v < h; ++v) {
    for (std::size_t u = 0; u < w; ++u) {
      const double z = depth[v * w + u];
      if (!(z > 0.0)) continue;
      const double x = (double(u) - rig.cx) * z / rig.f;
      const int i = int(std::floor((x - layout.x_min) / layout.cell_w()));
      const int j = int(std::floor((z - layout.y_min) / layout.cell_h()));
      if (i < 0 || i >= layout.nx || j < 0 || j >= layout.ny) continue;
      const std::uint8_t cls = front_classes[v * w + u];
      if (cls >= layout.n_classes) throw std::invalid_argument("pseudo_lidar_bev: class out of range");
      const std::size_t cell = std::size_t(j) * layout.nx + i;
      planes[cls * cells + cell] += 1.0;
      count[cell] += 1.0;
    }
  }
  for (std::size_t c = 0; c < std::size_t(layout.n_classes); ++c) {
    for (std::size_t p = 0; p < cells; ++p) {
      if (count[p] > 0.0) planes[c * cells + p] /= count[p];
    }
  }
  return planes;
}

inline ModelInput make_input(const Sample& s, const ModelConfig& cfg) {
  ModelInput in;
  in.left = image_tensor(s.left);
  in.right = image_tensor(s.right);
  if (cfg.variant == Variant::kPseudoLidarUNet) {
    if (s.front.empty()) throw DataError("sample " + s.id + ": pseudo-lidar baseline needs front-view classes");
    in.planes = Tensor::from({1, std::size_t(cfg.n_classes()), std::size_t(cfg.layout.ny), std::size_t(cfg.layout.nx)},
                             pseudo_lidar_bev(s.depth, s.front, cfg.rig, cfg.layout));
  }
  return in;
}

struct ForwardResult {
  Tensor logits;      // 1 x N_C x N_y x N_x (stereo head for CMD)
  Tensor logits_ipm;  // CMD training only
  Tensor l_kt;        // CMD training only
};

class SbevModel {
 public:
  struct Conv {
    Tensor weight, bias;
    std::size_t stride = 1, pad = 0;
    Tensor operator()(const Tensor& x) const {
      return weight.rank() == 5 ? conv3d(x, weight, bias, stride, pad) : conv2d(x, weight, bias, stride, pad);
    }
  };

  struct UNet {
    Conv enc1, enc2, enc3, dec2, dec1, head;
  };

  SbevModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const auto c = std::size_t(cfg_.channels);
    if (uses_stereo(cfg_.variant) || uses_ipm_features(cfg_.variant)) {
      ext1_ = make_conv("extractor.conv1", c, 3, 3, 2, 2, rng);
      ext2_ = make_conv("extractor.conv2", c, c, 3, 2, 2, rng);
      ext3_ = make_conv("extractor.conv3", c, c, 3, 1, 2, rng);
    }
    if (uses_stereo(cfg_.variant)) {
      const auto cv = std::size_t(cfg_.volume_channels);
      const auto cr = std::size_t(cfg_.reduced_channels);
      vol_in_ = make_conv("refine.project", cv, 2 * c, 1, 1, 3, rng);
      vol_a_ = make_conv("refine.block1", cv, cv, 3, 1, 3, rng);
      vol_b_ = make_conv("refine.block2", cv, cv, 3, 1, 3, rng);
      red1_ = make_conv("reduce.conv1", cr, cv * std::size_t(cfg_.feat_h()), 1, 1, 2, rng);
      red2_ = make_conv("reduce.conv2", cr, cr, 3, 1, 2, rng);
    }
    if (cfg_.variant == Variant::kCmd) {
      unet_ = make_unet("unet_stereo", std::size_t(cfg_.reduced_channels), rng);
      unet_ipm_ = make_unet("unet_ipm", c, rng);
    } else {
      unet_ = make_unet("unet", bev_channels(), rng);
    }
    rebuild_grids();
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<std::string>& parameter_names() const { return names_; }

  // Channel count of the U-Net input for non-CMD variants.
  std::size_t bev_channels() const {
    std::size_t n = 0;
    if (uses_ipm_features(cfg_.variant)) n += std::size_t(cfg_.channels);
    if (uses_ipm_image(cfg_.variant)) n += 3;
    if (uses_stereo(cfg_.variant)) n += std::size_t(cfg_.reduced_channels);
    if (cfg_.variant == Variant::kPseudoLidarUNet) n += std::size_t(cfg_.n_classes());
    return n;
  }

  void rebuild_grids() {
    stereo_grid_ = make_stereo_bev_grid(cfg_.rig, cfg_.layout, cfg_.feat_w(), cfg_.disparity_planes,
                                        cfg_.feat_downsample, cfg_.disp_step());
    ipm_img_grid_ = make_ipm_grid(cfg_.rig, cfg_.plane, cfg_.layout, cfg_.rig.image_w, cfg_.rig.image_h, 1);
    ipm_feat_grid_ = make_ipm_grid(cfg_.rig, cfg_.plane, cfg_.layout, cfg_.feat_w(), cfg_.feat_h(),
                                   cfg_.feat_downsample);
    stereo_grid_t_ = stereo_grid_.as_tensor();
    ipm_img_grid_t_ = ipm_img_grid_.as_tensor();
    ipm_feat_grid_t_ = ipm_feat_grid_.as_tensor();
  }

  const SamplingGrid& stereo_grid() const { return stereo_grid_; }
  const SamplingGrid& ipm_image_grid() const { return ipm_img_grid_; }
  const SamplingGrid& ipm_feature_grid() const { return ipm_feat_grid_; }

  // Overrides the IPM sampling grids (testing the CMD inference path).
  void set_ipm_grids(const SamplingGrid& img, const SamplingGrid& feat) {
    ipm_img_grid_ = img;
    ipm_feat_grid_ = feat;
    ipm_img_grid_t_ = img.as_tensor();
    ipm_feat_grid_t_ = feat.as_tensor();
  }

  // 1 x 3 x H x W -> 1 x C x H/4 x W/4.
  Tensor extract_features(const Tensor& image) const {
    if (image.rank() != 4 || image.dim(2) % std::size_t(cfg_.feat_downsample) ||
        image.dim(3) % std::size_t(cfg_.feat_downsample)) {
      throw std::invalid_argument("extract_features: image " + shape_str(image.shape()) +
                                  " not divisible by the feature downsample");
    }
    const Tensor e1 = relu(ext1_(image));
    const Tensor e2 = relu(ext2_(e1));
    return add(e2, relu(ext3_(e2)));
  }

  // 1 x 2C x D x H' x W'.
  Tensor build_feature_volume(const Tensor& f_ref, const Tensor& f_target) const {
    return disparity_volume(f_ref, f_target, std::size_t(cfg_.disparity_planes), cfg_.disp_step_feat());
  }

  // Two residual 3D blocks after a 1x1x1 projection to the refiner width.
  Tensor refine_volume(const Tensor& volume) const {
    const Tensor v0 = relu(vol_in_(volume));
    const Tensor v1 = add(v0, relu(vol_a_(v0)));
    return add(v1, relu(vol_b_(v1)));
  }

  // Folds height into channels: 1 x Cv x D x H' x W' -> 1 x (Cv*H') x D x W'.
  static Tensor fold_height(const Tensor& refined) {
    const Tensor p = permute(refined, {0, 1, 3, 2, 4});
    return reshape(p, {1, refined.dim(1) * refined.dim(3), refined.dim(2), refined.dim(4)});
  }

  // 1 x C' x D x W'.
  Tensor reduce_volume(const Tensor& refined) const {
    return red2_(relu(red1_(fold_height(refined))));
  }

  Tensor stereo_bev(const Tensor& reduced) const {
    if (reduced.dim(2) != std::size_t(cfg_.disparity_planes) || reduced.dim(3) != std::size_t(cfg_.feat_w())) {
      throw std::invalid_argument("stereo_bev: reduced volume " + shape_str(reduced.shape()) +
                                  " does not match the BEV grid source extents");
    }
    return grid_sample_bilinear(reduced, stereo_grid_t_);
  }

  // IPM of the reference image and of its features.
  std::pair<Tensor, Tensor> ipm_branch(const Tensor& image, const Tensor& features) const {
    Tensor img = grid_sample_bilinear(image, ipm_img_grid_t_);
    Tensor feat = features.defined() ? grid_sample_bilinear(features, ipm_feat_grid_t_) : Tensor{};
    return {img, feat};
  }

  Tensor run_unet(const UNet& net, const Tensor& x) const {
    const Tensor e1 = relu(net.enc1(x));
    const Tensor e2 = relu(net.enc2(maxpool2d(e1)));
    const Tensor e3 = relu(net.enc3(maxpool2d(e2)));
    const Tensor u2 = fit2d(nearest_upsample2d(e3), e2.dim(2), e2.dim(3));
    const Tensor d2 = relu(net.dec2(concat({u2, e2}, 1)));
    const Tensor u1 = fit2d(nearest_upsample2d(d2), e1.dim(2), e1.dim(3));
    const Tensor d1 = relu(net.dec1(concat({u1, e1}, 1)));
    return net.head(d1);
  }

  // The stereo trunk up to the refined volume (used by the disparity probe).
  Tensor trunk_volume(const ModelInput& in) const {
    if (!uses_stereo(cfg_.variant)) throw std::invalid_argument("trunk_volume: variant has no stereo trunk");
    return refine_volume(build_feature_volume(extract_features(in.left), extract_features(in.right)));
  }

  // With training = false a CMD model evaluates only its stereo head.
  ForwardResult forward(const ModelInput& in, bool training = false) const {
    ForwardResult out;
    const Variant v = cfg_.variant;
    if (v == Variant::kPseudoLidarUNet) {
      if (!in.planes.defined()) throw std::invalid_argument("forward: pseudo-lidar variant needs BEV planes");
      out.logits = run_unet(unet_, in.planes);
      return out;
    }
    if (v == Variant::kIpmUNet) {
      out.logits = run_unet(unet_, ipm_branch(in.left, Tensor{}).first);
      return out;
    }
    if (!in.left.defined() || !in.right.defined()) throw std::invalid_argument("forward: stereo variant needs both images");
    const Tensor f_ref = extract_features(in.left);
    const Tensor f_tgt = extract_features(in.right);
    const Tensor r_stereo = stereo_bev(reduce_volume(refine_volume(build_feature_volume(f_ref, f_tgt))));
    if (v == Variant::kCmd) {
      out.logits = run_unet(unet_, r_stereo);
      if (training) {
        const Tensor r_ipm_feat = grid_sample_bilinear(f_ref, ipm_feat_grid_t_);
        out.logits_ipm = run_unet(unet_ipm_, r_ipm_feat);
        out.l_kt = l1_first_k(r_ipm_feat, r_stereo, std::size_t(cfg_.distill_channels));
      }
      return out;
    }
    std::vector<Tensor> parts;
    if (uses_ipm_features(v)) parts.push_back(grid_sample_bilinear(f_ref, ipm_feat_grid_t_));
    if (uses_ipm_image(v)) parts.push_back(grid_sample_bilinear(in.left, ipm_img_grid_t_));
    parts.push_back(r_stereo);
    out.logits = run_unet(unet_, parts.size() == 1 ? parts[0] : concat(parts, 1));
    return out;
  }

  NamedTensors named_parameters() const {
    NamedTensors out;
    for (std::size_t i = 0; i < params_.size(); ++i) out.emplace_back(names_[i], params_[i]);
    return out;
  }

  // Copies values from `tensors`; names and shapes must match exactly.
  void load_parameters(const NamedTensors& tensors) {
    if (tensors.size() != params_.size()) {
      throw DataError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, model expects " +
                      std::to_string(params_.size()));
    }
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& [name, t] = tensors[i];
      if (name != names_[i] || t.shape() != params_[i].shape()) {
        throw DataError("checkpoint tensor '" + name + "' " + shape_str(t.shape()) + " does not match '" + names_[i] +
                        "' " + shape_str(params_[i].shape()));
      }
      std::copy(t.data().begin(), t.data().end(), params_[i].data().begin());
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  Conv make_conv(const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k, std::size_t stride,
                 int spatial_rank_plus, std::mt19937_64& rng) {
    // spatial_rank_plus: 2 -> conv2d, 3 -> conv3d
    Shape shape{c_out, c_in, k, k};
    if (spatial_rank_plus == 3) shape.push_back(k);
    Conv conv;
    conv.weight = Tensor::zeros(shape, true);
    he_uniform(conv.weight, shape_numel(shape) / c_out, rng);
    conv.bias = Tensor::zeros({c_out}, true);
    conv.stride = stride;
    conv.pad = k / 2;
    params_.push_back(conv.weight);
    names_.push_back(name + ".weight");
    params_.push_back(conv.bias);
    names_.push_back(name + ".bias");
    return conv;
  }

  UNet make_unet(const std::string& name, std::size_t in_channels, std::mt19937_64& rng) {
    const auto w1 = std::size_t(cfg_.unet_widths[0]), w2 = std::size_t(cfg_.unet_widths[1]),
               w3 = std::size_t(cfg_.unet_widths[2]);
    UNet u;
    u.enc1 = make_conv(name + ".enc1", w1, in_channels, 3, 1, 2, rng);
    u.enc2 = make_conv(name + ".enc2", w2, w1, 3, 1, 2, rng);
    u.enc3 = make_conv(name + ".enc3", w3, w2, 3, 1, 2, rng);
    u.dec2 = make_conv(name + ".dec2", w2, w3 + w2, 3, 1, 2, rng);
    u.dec1 = make_conv(name + ".dec1", w1, w2 + w1, 3, 1, 2, rng);
    u.head = make_conv(name + ".head", std::size_t(cfg_.n_classes()), w1, 1, 1, 2, rng);
    return u;
  }

  ModelConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  Conv ext1_, ext2_, ext3_;
  Conv vol_in_, vol_a_, vol_b_;
  Conv red1_, red2_;
  UNet unet_, unet_ipm_;
  SamplingGrid stereo_grid_, ipm_img_grid_, ipm_feat_grid_;
  Tensor stereo_grid_t_, ipm_img_grid_t_, ipm_feat_grid_t_;
};

// Checkpoint = SBVK tensor archive plus "<path>.json" holding the ModelConfig.
inline void save_checkpoint(const fs::path& path, const SbevModel& model) {
  save_tensors(path, model.named_parameters());
  write_file_atomic(fs::path(path.string() + ".json"), to_json(model.config()).dump(2) + "\n");
}

inline ModelConfig read_checkpoint_config(const fs::path& path) {
  const fs::path sidecar(path.string() + ".json");
  try {
    return model_config_from_json(json::parse(read_file_bytes(sidecar)));
  } catch (const json::exception& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(sidecar.string() + ": " + e.what());
  }
}

// Loads parameters into `model`; the sidecar config must equal the model's.
inline void load_checkpoint(const fs::path& path, SbevModel& model) {
  const ModelConfig stored = read_checkpoint_config(path);
  if (to_json(stored) != to_json(model.config())) {
    throw DataError(path.string() + ": checkpoint config (variant " + variant_name(stored.variant) +
                    ") does not match the model (variant " + variant_name(model.config().variant) + ")");
  }
  model.load_parameters(load_tensors(path));
}

inline SbevModel load_model(const fs::path& path) {
  SbevModel model(read_checkpoint_config(path), 0);
  model.load_parameters(load_tensors(path));
  return model;
}

}  // namespace sbev
