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

// sbev: dataset generation, training, evaluation and analysis commands.
//
//   sbev gen-data --out data [--n_train 400 --n_test 100 --seed 1 --fraction 1]
//   sbev train --data data --out runs/full --variant full [--epochs 20]
//   sbev eval --data data --checkpoint runs/full/model.ckpt --out runs/full/eval
//   sbev predict --data data --checkpoint runs/full/model.ckpt --out runs/full/pred
//   sbev sweep-fraction --data data --out runs/sweep
//   sbev ensemble --data data --members a.ckpt,b.ckpt,c.ckpt --out runs/ens
//   sbev probe --data data --members cmd.ckpt,stereo.ckpt --out runs/probe
//
// Any run-configuration key can be given as --key value (dotted for nested
// keys, e.g. --layout.nx 32) or collected in a JSON file passed with --config.
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <iostream>

#include "sbev/commands.hpp"

namespace {

using sbev::cli::UsageError;

std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() < 3) throw UsageError("unexpected argument '" + arg + "'");
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      out.emplace_back(body, extras[++i]);
    } else {
      out.emplace_back(body, "true");  // bare flag
    }
  }
  return out;
}

int run(int argc, char** argv) {
  CLI::App app{"Stereo bird's-eye-view layout estimation toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"gen-data", "Generate the synthetic train/test dataset"},
      {"train", "Train one model variant"},
      {"eval", "Evaluate a checkpoint on the test split"},
      {"predict", "Write predicted, ground-truth and mask BEV images"},
      {"sweep-fraction", "Train on growing fractions of the training set"},
      {"ensemble", "Evaluate an ensemble of checkpoints"},
      {"probe", "Disparity probe on frozen stereo trunks"}};
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->allow_extras();
    sub->footer("Any run-configuration key may be passed as --key value.");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  CLI::App* sub = app.get_subcommands().front();
  const auto overrides = parse_overrides(sub->remaining());
  const sbev::json cfg = sbev::cli::resolve_run_config(
      config_path.empty() ? std::nullopt : std::optional<std::filesystem::path>(config_path), overrides);
  const std::string name = sub->get_name();
  if (name == "gen-data") {
    const auto d = sbev::cli::run_gen_data(cfg);
    std::cout << "wrote " << d.train.samples.size() << " train and " << d.test.samples.size() << " test samples to "
              << sbev::cli::out_dir(cfg).string() << "\n";
  } else if (name == "train") {
    const auto t = sbev::cli::run_train(cfg);
    std::cout << "test mIoU " << t.report.miou << "\ncheckpoint " << t.checkpoint.string() << "\n";
  } else if (name == "eval") {
    const auto r = sbev::cli::run_eval(cfg);
    std::cout << "test mIoU " << r.miou << " over " << r.n_visible << " visible cells\n";
  } else if (name == "predict") {
    std::cout << "wrote " << sbev::cli::run_predict(cfg) << " predictions\n";
  } else if (name == "sweep-fraction") {
    for (const auto& row : sbev::cli::run_sweep_fraction(cfg)) {
      std::cout << "fraction " << row.fraction << " (" << row.n_train << " samples): mIoU " << row.miou << "\n";
    }
  } else if (name == "ensemble") {
    const auto r = sbev::cli::run_ensemble(cfg);
    std::cout << "member mIoU mean " << r.member_mean << " std " << r.member_std << ", ensemble mIoU "
              << r.ensemble.miou << "\n";
  } else if (name == "probe") {
    for (const auto& r : sbev::cli::run_probe(cfg)) {
      std::cout << "three-pixel error " << r.error << " (constant " << r.constant_error << ")\n";
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const sbev::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const sbev::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const sbev::json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
