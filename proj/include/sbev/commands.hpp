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

// Command implementations behind the sbev tool: run configuration handling,
// dataset generation, training, evaluation, prediction export, sweeps,
// ensembles and disparity probes. Every command writes the resolved run
// configuration next to its outputs.

#pragma once

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sbev/dataset_io.hpp"
#include "sbev/train.hpp"

namespace sbev::cli {

// Bad flags, unknown configuration keys, or values of the wrong type.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Run configuration

inline json default_run_config() {
  const ModelConfig m;
  return {
      {"seed", 1},
      {"data", "data"},
      {"out", "out"},
      {"force", false},
      {"n_train", 400},
      {"n_test", 100},
      {"fraction", 1.0},
      {"rig", to_json(StereoRig{})},
      {"plane", to_json(GroundPlane{})},
      {"layout", to_json(LayoutSpec{})},
      {"variant", "full"},
      {"channels", m.channels},
      {"disparity_planes", m.disparity_planes},
      {"max_disparity", m.max_disparity},
      {"volume_channels", m.volume_channels},
      {"reduced_channels", m.reduced_channels},
      {"distill_channels", m.distill_channels},
      {"unet_widths", m.unet_widths},
      {"epochs", 20},
      {"batch_size", 2},
      {"lr", 1e-3},
      {"lr_final_ratio", 0.05},
      {"eval_each_epoch", true},
      {"snapshot_every", 0},
      {"checkpoint", ""},
      {"members", json::array()},
      {"distance_thresholds", {5.0, 10.0, 15.0, 20.0}},
      {"pixel_ap", false},
      {"predict_limit", 0},
      {"sweep_fractions", {0.1, 0.25, 0.5, 1.0}},
      {"probe_epochs", 30},
      {"probe_lr", 1e-2},
  };
}

namespace detail {

inline json parse_scalar_like(const json& like, const std::string& key, const std::string& text) {
  auto fail = [&]() -> json { throw UsageError("--" + key + ": cannot use '" + text + "' as " + like.type_name()); };
  try {
    switch (like.type()) {
      case json::value_t::boolean:
        if (text == "true" || text == "1") return true;
        if (text == "false" || text == "0") return false;
        return fail();
      case json::value_t::number_integer:
      case json::value_t::number_unsigned: {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) return fail();
        return v;
      }
      case json::value_t::number_float: {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) return fail();
        return v;
      }
      case json::value_t::string:
        return text;
      default:
        return fail();
    }
  } catch (const std::logic_error&) {
    return fail();
  }
}

// Values from files must have the default's JSON kind (any number for numbers).
inline void check_kind(const json& like, const json& value, const std::string& key) {
  const bool ok = (like.is_number() && value.is_number() && (like.is_number_float() || value.is_number_integer())) ||
                  (like.is_boolean() && value.is_boolean()) || (like.is_string() && value.is_string()) ||
                  (like.is_array() && value.is_array()) || (like.is_object() && value.is_object());
  if (!ok) throw UsageError("config key '" + key + "' expects " + std::string(like.type_name()));
}

inline void merge_checked(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw UsageError("unknown config key '" + path + "'");
    check_kind(base[key], value, path);
    if (value.is_object()) {
      merge_checked(base[key], value, path);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace detail

// Applies --key value; dotted keys reach into objects ("layout.nx").
// Arrays take JSON ("[1,2]") or a comma-separated list.
inline void apply_override(json& cfg, const std::string& key, const std::string& value) {
  json* node = &cfg;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (!node->is_object() || !node->contains(part)) throw UsageError("unknown option --" + key);
    node = &(*node)[part];
  }
  if (node->is_object()) throw UsageError("--" + key + " is a group; set its fields individually");
  if (node->is_array()) {
    json arr = json::parse(value, nullptr, false);
    if (arr.is_discarded() || !arr.is_array()) {
      arr = json::array();
      std::stringstream items(value);
      std::string item;
      const json like = node->empty() ? json("") : (*node)[0];
      while (std::getline(items, item, ',')) {
        if (!item.empty()) arr.push_back(detail::parse_scalar_like(like, key, item));
      }
    }
    *node = std::move(arr);
    return;
  }
  *node = detail::parse_scalar_like(*node, key, value);
}

// Defaults, then the optional --config file, then --key value overrides.
inline json resolve_run_config(const std::optional<fs::path>& file,
                               const std::vector<std::pair<std::string, std::string>>& overrides) {
  json cfg = default_run_config();
  if (file) {
    json patch;
    try {
      patch = json::parse(read_file_bytes(*file));
    } catch (const json::parse_error& e) {
      throw UsageError(file->string() + ": invalid JSON: " + e.what());
    }
    detail::merge_checked(cfg, patch, "");
  }
  for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
  return cfg;
}

inline fs::path out_dir(const json& cfg) { return cfg.at("out").get<std::string>(); }
inline fs::path data_dir(const json& cfg) { return cfg.at("data").get<std::string>(); }

inline void write_resolved_config(const fs::path& dir, const std::string& command, const json& cfg) {
  fs::create_directories(dir);
  json j = cfg;
  j["command"] = command;
  write_file_atomic(dir / "resolved_config.json", j.dump(2) + "\n");
}

inline ModelConfig model_config_for(const json& cfg, const DatasetManifest& m) {
  ModelConfig c;
  try {
    c.variant = parse_variant(cfg.at("variant").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  c.channels = cfg.at("channels").get<int>();
  c.disparity_planes = cfg.at("disparity_planes").get<int>();
  c.max_disparity = cfg.at("max_disparity").get<double>();
  c.volume_channels = cfg.at("volume_channels").get<int>();
  c.reduced_channels = cfg.at("reduced_channels").get<int>();
  c.distill_channels = cfg.at("distill_channels").get<int>();
  c.unet_widths = cfg.at("unet_widths").get<std::vector<int>>();
  c.rig = m.rig;
  c.plane = m.plane;
  c.layout = m.layout;
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

inline TrainOptions train_options(const json& cfg) {
  TrainOptions o;
  o.epochs = cfg.at("epochs").get<int>();
  o.batch_size = cfg.at("batch_size").get<int>();
  o.lr = cfg.at("lr").get<double>();
  o.lr_final_ratio = cfg.at("lr_final_ratio").get<double>();
  o.seed = cfg.at("seed").get<std::uint64_t>();
  o.eval_each_epoch = cfg.at("eval_each_epoch").get<bool>();
  if (o.epochs < 0 || o.batch_size < 1 || !(o.lr > 0.0) || !(o.lr_final_ratio > 0.0 && o.lr_final_ratio <= 1.0)) {
    throw UsageError("need epochs >= 0, batch_size >= 1, lr > 0 and lr_final_ratio in (0, 1]");
  }
  return o;
}

inline EvalOptions eval_options(const json& cfg) {
  EvalOptions o;
  o.distance_thresholds = cfg.at("distance_thresholds").get<std::vector<double>>();
  o.pixel_ap = cfg.at("pixel_ap").get<bool>();
  return o;
}

// ---------------------------------------------------------------------------
// Shared pieces

struct Datasets {
  DatasetManifest train, test;
};

// Reads <data>/train.json (first `fraction` of it) and <data>/test.json.
inline Datasets read_datasets(const json& cfg, bool need_train = true) {
  Datasets d;
  const fs::path dir = data_dir(cfg);
  d.test = read_manifest(dir / "test.json");
  if (need_train) {
    const double f = cfg.at("fraction").get<double>();
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("--fraction must lie in (0, 1]");
    d.train = take_fraction(read_manifest(dir / "train.json"), f);
    if (to_json(d.train.rig) != to_json(d.test.rig) || to_json(d.train.layout) != to_json(d.test.layout) ||
        to_json(d.train.plane) != to_json(d.test.plane)) {
      throw DataError(dir.string() + ": train and test manifests disagree on rig, plane or layout");
    }
  }
  return d;
}

// Rejects a checkpoint whose geometry differs from the dataset's.
inline void check_compatible(const ModelConfig& m, const DatasetManifest& d, const std::string& what) {
  if (to_json(m.rig) != to_json(d.rig) || to_json(m.plane) != to_json(d.plane) ||
      to_json(m.layout) != to_json(d.layout)) {
    throw DataError(what + ": model geometry (rig, plane, layout) does not match the dataset");
  }
}

// Top-down rendering with the far edge at the top; cells outside the mask are black.
inline RgbImage render_bev(std::span<const std::uint8_t> classes, std::span<const std::uint8_t> mask,
                           const LayoutSpec& layout, const std::vector<Rgb>& palette) {
  RgbImage img(layout.nx, layout.ny);
  for (int j = 0; j < layout.ny; ++j) {
    for (int i = 0; i < layout.nx; ++i) {
      const std::size_t cell = std::size_t(j) * layout.nx + i;
      const std::size_t px = (std::size_t(layout.ny - 1 - j) * layout.nx + i) * 3;
      if (!mask[cell]) continue;
      const Rgb& c = palette.at(classes[cell]);
      img.pixels[px] = c[0];
      img.pixels[px + 1] = c[1];
      img.pixels[px + 2] = c[2];
    }
  }
  return img;
}

inline std::vector<std::uint8_t> flip_rows(std::span<const std::uint8_t> v, int nx, int ny, std::uint8_t on) {
  std::vector<std::uint8_t> out(v.size());
  for (int j = 0; j < ny; ++j) {
    for (int i = 0; i < nx; ++i) out[std::size_t(ny - 1 - j) * nx + i] = v[std::size_t(j) * nx + i] ? on : 0;
  }
  return out;
}

inline void write_report(const fs::path& dir, const std::string& stem, const EvalReport& r,
                         const std::vector<std::string>& names) {
  write_file_atomic(dir / (stem + ".json"), to_json(r, names).dump(2) + "\n");
  write_file_atomic(dir / (stem + ".csv"), to_csv(r, names));
}

inline std::string short_fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline std::string fmt(double v) {
  if (!std::isfinite(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// gen-data

inline Datasets run_gen_data(const json& cfg) {
  const fs::path out = out_dir(cfg);
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!cfg.at("force").get<bool>()) throw UsageError(out.string() + ": output directory is not empty (use --force)");
    fs::remove_all(out);
  }
  StereoRig rig;
  GroundPlane plane;
  LayoutSpec layout;
  try {
    rig = rig_from_json(cfg.at("rig"));
    plane = plane_from_json(cfg.at("plane"));
    layout = layout_from_json(cfg.at("layout"));
    rig.validate();
    plane.validate();
    layout.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto n_train = cfg.at("n_train").get<long>(), n_test = cfg.at("n_test").get<long>();
  const double f = cfg.at("fraction").get<double>();
  if (n_train < 1 || n_test < 1) throw UsageError("n_train and n_test must be positive");
  if (!(f > 0.0 && f <= 1.0)) throw UsageError("--fraction must lie in (0, 1]");
  // The train pool is indexed identically for every fraction; only its prefix is rendered.
  const auto keep = std::size_t(std::ceil(f * double(n_train) - 1e-9));
  const std::uint64_t seed = cfg.at("seed").get<std::uint64_t>();
  Datasets d;
  d.train = make_dataset(keep, seed, rig, plane, layout, out, "train");
  d.test = make_dataset(std::size_t(n_test), seed, rig, plane, layout, out, "test");
  write_resolved_config(out, "gen-data", cfg);
  return d;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  std::vector<EpochLog> logs;
  EvalReport report;
  fs::path checkpoint;
};

inline std::string loss_log_csv(const std::vector<EpochLog>& logs, const TrainOptions& o) {
  std::string s = "epoch,lr,train_loss,test_miou\n";
  for (const auto& l : logs) {
    s += std::to_string(l.epoch) + "," + fmt(epoch_lr(o, l.epoch)) + "," + fmt(l.train_loss) + "," +
         fmt(l.test_miou) + "\n";
  }
  return s;
}

inline TrainOutcome run_train(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const Datasets d = read_datasets(cfg);
  const ModelConfig mc = model_config_for(cfg, d.train);
  const TrainOptions opts = train_options(cfg);
  const int snapshot_every = cfg.at("snapshot_every").get<int>();
  write_resolved_config(out, "train", cfg);
  std::cerr << "train: " << variant_name(mc.variant) << ", " << d.train.samples.size() << " train / "
            << d.test.samples.size() << " test samples, " << opts.epochs << " epochs\n";
  const LoadedSet train = load_set(read_all_samples(d.train), mc);
  const LoadedSet test = load_set(read_all_samples(d.test), mc);

  SbevModel model(mc, derive_seed(opts.seed, SeedPurpose::kInit));
  TrainOutcome result;
  result.checkpoint = out / "model.ckpt";
  save_checkpoint(result.checkpoint, model);
  std::string timing = "epoch,seconds\n";
  if (snapshot_every > 0) fs::create_directories(out / "snapshots");
  auto on_epoch = [&](const EpochLog& log) {
    result.logs.push_back(log);
    save_checkpoint(result.checkpoint, model);  // last good state
    write_file_atomic(out / "loss_log.csv", loss_log_csv(result.logs, opts));
    timing += std::to_string(log.epoch) + "," + fmt(log.seconds) + "\n";
    write_file_atomic(out / "timing.csv", timing);
    std::cerr << "epoch " << log.epoch << " loss " << log.train_loss << " test mIoU " << log.test_miou << " ("
              << log.seconds << " s)\n";
    if (snapshot_every > 0 && log.epoch % snapshot_every == 0) {
      char stem[32];
      std::snprintf(stem, sizeof(stem), "epoch_%03d", log.epoch);
      save_checkpoint(out / "snapshots" / (std::string(stem) + ".ckpt"), model);
      const auto probs = predict_probs(model, test.inputs.front());
      const auto pred = argmax_classes(probs, std::size_t(mc.n_classes()));
      write_ppm(out / "snapshots" / (std::string(stem) + "_pred.ppm"),
                render_bev(pred, test.gts.front().mask, mc.layout, d.test.palette));
    }
  };
  try {
    train_model(model, train, &test, opts, on_epoch);
  } catch (const NumericError&) {
    write_file_atomic(out / "loss_log.csv", loss_log_csv(result.logs, opts));
    throw;
  }
  write_file_atomic(out / "loss_log.csv", loss_log_csv(result.logs, opts));
  result.report = evaluate(model, test, eval_options(cfg));
  write_report(out, "eval", result.report, d.test.class_names);
  return result;
}

// ---------------------------------------------------------------------------
// eval / predict

inline fs::path checkpoint_path(const json& cfg) {
  const std::string p = cfg.at("checkpoint").get<std::string>();
  if (p.empty()) throw UsageError("--checkpoint is required");
  return p;
}

// Loads the checkpoint and rejects a variant that differs from --variant.
inline SbevModel load_checked(const json& cfg, const fs::path& path, const DatasetManifest& data) {
  SbevModel model = load_model(path);
  const std::string want = cfg.at("variant").get<std::string>();
  const std::string have = variant_name(model.config().variant);
  if (want != have) {
    throw DataError(path.string() + ": checkpoint variant '" + have + "' does not match configured variant '" + want +
                    "'");
  }
  check_compatible(model.config(), data, path.string());
  return model;
}

inline EvalReport run_eval(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const Datasets d = read_datasets(cfg, false);
  const SbevModel model = load_checked(cfg, checkpoint_path(cfg), d.test);
  write_resolved_config(out, "eval", cfg);
  const LoadedSet test = load_set(read_all_samples(d.test), model.config());
  const EvalReport r = evaluate(model, test, eval_options(cfg));
  write_report(out, "eval", r, d.test.class_names);
  return r;
}

inline std::size_t run_predict(const json& cfg) {
  const fs::path out = out_dir(cfg);
  Datasets d = read_datasets(cfg, false);
  const SbevModel model = load_checked(cfg, checkpoint_path(cfg), d.test);
  write_resolved_config(out, "predict", cfg);
  const long limit = cfg.at("predict_limit").get<long>();
  if (limit > 0 && std::size_t(limit) < d.test.samples.size()) d.test.samples.resize(std::size_t(limit));
  const fs::path dir = out / "pred";
  fs::create_directories(dir);
  const ModelConfig& mc = model.config();
  for (const auto& rec : d.test.samples) {
    const Sample s = read_sample(d.test.root, rec, mc.n_classes());
    const auto pred = argmax_classes(predict_probs(model, make_input(s, mc)), std::size_t(mc.n_classes()));
    write_ppm(dir / (rec.id + "_pred.ppm"), render_bev(pred, s.gt.mask, mc.layout, d.test.palette));
    write_ppm(dir / (rec.id + "_gt.ppm"), render_bev(s.gt.classes, s.gt.mask, mc.layout, d.test.palette));
    write_pgm(dir / (rec.id + "_mask.pgm"), mc.layout.nx, mc.layout.ny,
              flip_rows(s.gt.mask, mc.layout.nx, mc.layout.ny, 255));
  }
  return d.test.samples.size();
}

// ---------------------------------------------------------------------------
// sweep-fraction

struct SweepRow {
  double fraction = 0.0;
  std::size_t n_train = 0;
  double miou = 0.0;
};

inline std::vector<SweepRow> run_sweep_fraction(const json& cfg) {
  const fs::path out = out_dir(cfg);
  write_resolved_config(out, "sweep-fraction", cfg);
  std::vector<SweepRow> rows;
  std::string csv = "fraction,n_train,miou\n";
  for (double f : cfg.at("sweep_fractions").get<std::vector<double>>()) {
    json sub = cfg;
    sub["fraction"] = f;
    sub["out"] = (out / ("fraction_" + short_fmt(f))).string();
    const TrainOutcome t = run_train(sub);
    SweepRow row{f, read_datasets(sub).train.samples.size(), t.report.miou};
    rows.push_back(row);
    csv += short_fmt(row.fraction) + "," + std::to_string(row.n_train) + "," + fmt(row.miou) + "\n";
    write_file_atomic(out / "sweep.csv", csv);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// ensemble

struct EnsembleOutcome {
  std::vector<double> member_miou;
  double member_mean = 0.0;
  double member_std = 0.0;
  EvalReport ensemble;
};

inline std::vector<fs::path> member_paths(const json& cfg) {
  std::vector<fs::path> out;
  for (const auto& m : cfg.at("members")) out.emplace_back(m.get<std::string>());
  if (out.empty()) throw UsageError("--members needs at least one checkpoint");
  return out;
}

inline EnsembleOutcome run_ensemble(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const Datasets d = read_datasets(cfg, false);
  const auto paths = member_paths(cfg);
  std::vector<SbevModel> models;
  for (const auto& p : paths) {
    models.push_back(load_checked(cfg, p, d.test));
    if (to_json(models.back().config()) != to_json(models.front().config())) {
      throw DataError(p.string() + ": ensemble member config differs from " + paths.front().string());
    }
  }
  write_resolved_config(out, "ensemble", cfg);
  const ModelConfig& mc = models.front().config();
  const LoadedSet test = load_set(read_all_samples(d.test), mc);
  const EvalOptions eo = eval_options(cfg);
  EnsembleOutcome r;
  std::vector<std::vector<std::vector<double>>> probs;  // member, sample
  std::string csv = "member,checkpoint,miou\n";
  for (std::size_t m = 0; m < models.size(); ++m) {
    probs.push_back(predict_all(models[m], test));
    r.member_miou.push_back(evaluate_probs(probs.back(), test.gts, mc.layout, eo).miou);
    csv += std::to_string(m) + "," + paths[m].string() + "," + fmt(r.member_miou.back()) + "\n";
  }
  std::vector<std::vector<double>> averaged;
  for (std::size_t s = 0; s < test.size(); ++s) {
    std::vector<std::vector<double>> per_member;
    for (const auto& p : probs) per_member.push_back(p[s]);
    averaged.push_back(ensemble_average(per_member));
  }
  r.ensemble = evaluate_probs(averaged, test.gts, mc.layout, eo);
  r.member_mean = mean_of(r.member_miou);
  r.member_std = std_of(r.member_miou);
  write_file_atomic(out / "members.csv", csv);
  write_report(out, "ensemble_eval", r.ensemble, d.test.class_names);
  json summary = {{"members", cfg.at("members")},
                  {"member_miou", r.member_miou},
                  {"member_mean", sbev::detail::num_or_null(r.member_mean)},
                  {"member_std", sbev::detail::num_or_null(r.member_std)},
                  {"ensemble_miou", sbev::detail::num_or_null(r.ensemble.miou)}};
  write_file_atomic(out / "ensemble.json", summary.dump(2) + "\n");
  return r;
}

// ---------------------------------------------------------------------------
// probe

inline std::vector<ProbeResult> run_probe(const json& cfg) {
  const fs::path out = out_dir(cfg);
  const Datasets d = read_datasets(cfg);
  const auto paths = member_paths(cfg);
  write_resolved_config(out, "probe", cfg);
  ProbeOptions po;
  po.epochs = cfg.at("probe_epochs").get<int>();
  po.lr = cfg.at("probe_lr").get<double>();
  po.seed = cfg.at("seed").get<std::uint64_t>();
  const auto train_samples = read_all_samples(d.train), test_samples = read_all_samples(d.test);
  std::vector<ProbeResult> results;
  std::string csv = "checkpoint,variant,three_pixel_error,constant_three_pixel_error,constant_disparity,final_train_loss\n";
  for (const auto& p : paths) {
    const SbevModel model = load_model(p);
    check_compatible(model.config(), d.test, p.string());
    if (!uses_stereo(model.config().variant)) throw UsageError(p.string() + ": probe needs a stereo trunk");
    const ProbeResult r = disparity_probe(model, load_set(train_samples, model.config()),
                                          load_set(test_samples, model.config()), po);
    results.push_back(r);
    csv += p.string() + "," + variant_name(model.config().variant) + "," + fmt(r.error) + "," +
           fmt(r.constant_error) + "," + fmt(r.constant_disparity) + "," +
           fmt(r.train_loss.empty() ? std::nan("") : r.train_loss.back()) + "\n";
    write_file_atomic(out / "probe.csv", csv);
  }
  return results;
}

}  // namespace sbev::cli
