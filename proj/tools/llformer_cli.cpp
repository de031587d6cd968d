// Copyright 2026 The llformer-cpp Authors. All Rights Reserved.
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


// llformer command-line driver: synthesize, train, enhance, eval, bench.
// stdout carries CSV only; diagnostics go to stderr.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "llformer/llformer.hpp"

namespace fs = std::filesystem;
using namespace llformer;

namespace {

struct Options {
  std::uint64_t seed = 0;
  std::string config;
  std::string out;

  // synthesize
  std::string input;
  std::size_t count = 0;
  // train
  std::string manifest;
  std::string resume;
  std::size_t steps = 1000;
  std::size_t batch = 12;
  std::size_t patch = 128;
  double lr = 1e-4;
  double lr_min = 1e-6;
  double beta = 1.0;
  bool no_flip = false;
  std::size_t log_every = 1;
  // enhance
  std::string checkpoint;
  // eval
  std::string enhanced;
  // bench
  std::vector<std::size_t> resolutions{32, 64};
  std::size_t repeats = 3;
};

ModelConfig load_model_config(const std::string& path, const ModelConfig& fallback) {
  if (path.empty()) return fallback;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  ModelConfig c = j.get<ModelConfig>();
  c.validate();
  return c;
}

std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return char(std::tolower(ch)); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string fmt(double v) { return MetricReport::format(v); }

int cmd_synthesize(const Options& o) {
  if (!fs::is_directory(o.input)) throw IoError("input directory '" + o.input + "' does not exist");
  auto files = list_pngs(o.input);
  if (files.empty()) throw ContractError("no input images in '" + o.input + "'");
  if (o.count > 0 && o.count < files.size()) files.resize(o.count);
  const fs::path out = o.out;
  fs::create_directories(out / "low");

  std::vector<ImageRecord> records;
  std::ofstream params(out / "params.csv");
  if (!params) throw IoError("cannot write '" + (out / "params.csv").string() + "'");
  const std::string header = "id,x,y,z,exposure,highlights,shadows,vibrance,whites";
  params << header << '\n';
  std::cout << header << '\n';
  for (std::size_t i = 0; i < files.size(); ++i) {
    const std::string id = files[i].stem().string();
    const DegradationParams p = sample_params(mix_seed(o.seed, i));
    const Image normal = load_image(files[i].string());
    const fs::path low = out / "low" / (id + ".png");
    save_image(low.string(), apply_degradation(normal, p));
    records.push_back({id, fs::relative(low, out).string(), fs::absolute(files[i]).string()});
    std::string row = id;
    for (double v : {p.x, p.y, p.z, p.exposure, p.highlights, p.shadows, p.vibrance, p.whites}) row += "," + fmt(v);
    params << row << '\n';
    std::cout << row << '\n';
  }
  save_manifest((out / "manifest.csv").string(), records);
  std::cerr << "synthesized " << records.size() << " image(s) into " << out.string() << "\n";
  return 0;
}

int cmd_train(const Options& o) {
  const auto records = load_manifest(o.manifest);
  if (records.empty()) throw ContractError("manifest '" + o.manifest + "' has no pairs");
  std::vector<ImagePair> data;
  for (const auto& r : records) data.push_back({load_image(r.low_path), load_image(r.normal_path)});

  TrainConfig cfg;
  cfg.total_steps = o.steps;
  cfg.batch_size = o.batch;
  cfg.patch_size = o.patch;
  cfg.lr_max = o.lr;
  cfg.lr_min = o.lr_min;
  cfg.smooth_l1_beta = o.beta;
  cfg.seed = o.seed;
  cfg.horizontal_flip = cfg.vertical_flip = !o.no_flip;
  cfg.validate();

  Model<float> model;
  TrainState<float> state;
  if (!o.resume.empty()) {
    model = restore_model<float>(load_checkpoint(o.resume), &state);
    if (!o.config.empty() && load_model_config(o.config, model.config) != model.config) {
      throw ConfigError("--config differs from the config stored in '" + o.resume + "'");
    }
  } else {
    model = build<float>(load_model_config(o.config, ModelConfig::desk()), o.seed);
    state = initial_train_state(model, cfg);
  }
  std::cerr << "training " << param_count(model) << " parameters on " << data.size() << " pair(s), steps "
            << state.step + 1 << ".." << cfg.total_steps << "\n";
  std::cout << "step,loss,lr,grad_norm\n";
  try {
    train(model, data, cfg, state, [&](const StepRecord& r) {
      if (r.step % o.log_every == 0 || r.step == cfg.total_steps) {
        std::cout << r.step << ',' << fmt(r.loss) << ',' << fmt(r.lr) << ',' << fmt(r.grad_norm) << '\n' << std::flush;
      }
    });
  } catch (const NumericError&) {
    std::cout << std::flush;
    throw;
  }
  save_checkpoint(o.out, make_checkpoint(model, &state));
  std::cerr << "wrote checkpoint " << o.out << "\n";
  return 0;
}

int cmd_enhance(const Options& o) {
  const Model<float> model = restore_model<float>(load_checkpoint(o.checkpoint));
  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(o.input)) {
    const auto files = list_pngs(o.input);
    if (files.empty()) throw ContractError("no input images in '" + o.input + "'");
    fs::create_directories(o.out);
    for (const auto& f : files) jobs.emplace_back(f, fs::path(o.out) / f.filename());
  } else {
    if (!fs::exists(o.input)) throw IoError("input '" + o.input + "' does not exist");
    if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
    jobs.emplace_back(o.input, o.out);
  }
  NoGradGuard no_grad;
  std::cout << "input,output\n";
  for (const auto& [in, out] : jobs) {
    const Image img = load_image(in.string());
    const Shape s = img.shape();
    Tensor<float> y = reshape(forward(model, reshape(img, {1, s[0], s[1], s[2]})), s);
    save_image(out.string(), y);  // clamps to [0, 1]
    std::cout << in.string() << ',' << out.string() << '\n';
  }
  std::cerr << "enhanced " << jobs.size() << " image(s)\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const auto records = load_manifest(o.manifest);
  std::vector<std::string> missing;
  for (const auto& r : records) {
    const fs::path p = fs::path(o.enhanced) / (r.id + ".png");
    if (!fs::exists(p)) missing.push_back("id '" + r.id + "': missing enhanced file " + p.string());
  }
  if (!missing.empty()) {
    for (const auto& m : missing) std::cerr << m << "\n";
    throw IoError(std::to_string(missing.size()) + " enhanced file(s) missing");
  }
  MetricReport report;
  for (const auto& r : records) {
    const Image enhanced = load_image((fs::path(o.enhanced) / (r.id + ".png")).string());
    const Image reference = load_image(r.normal_path);
    report.records.push_back(evaluate_pair(r.id, enhanced, reference));
  }
  const std::string csv = report.to_csv();
  std::cout << csv;
  if (!o.out.empty()) {
    std::ofstream out(o.out);
    if (!out || !(out << csv)) throw IoError("cannot write '" + o.out + "'");
  }
  const MetricRecord m = report.mean();
  std::cerr << "mean over " << report.records.size() << " image(s): psnr " << fmt(m.psnr_db) << " dB, ssim "
            << fmt(m.ssim) << ", mae " << fmt(m.mae) << "\n";
  return 0;
}

int cmd_bench(const Options& o) {
  const ModelConfig cfg = load_model_config(o.config, ModelConfig{});
  const std::size_t channels = cfg.base_channels, heads = cfg.encoder_heads[0];
  Model<float> model = build<float>(cfg, o.seed);
  const std::size_t params = param_count(model);
  const double reference = 24.52e6;

  ParamTable<float> table;
  Rng rng(o.seed);
  ParamFactory<float> f(table, rng);
  const auto ph = make_axis_attention(f, "h", channels, heads), pw = make_axis_attention(f, "w", channels, heads);

  std::cout << "h,w,full_msa_macs,a_msa_macs,full_over_axis,a_msa_ms,param_count,param_ratio_to_24.52M\n";
  for (std::size_t r : o.resolutions) {
    const auto full = attention_mac_count(AttentionKind::full, 1, channels, r, r, heads);
    const auto axis = attention_mac_count(AttentionKind::axis, 1, channels, r, r, heads);
    std::vector<float> v(channels * r * r);
    for (auto& x : v) x = float(rng.uniform());
    const Tensor<float> x({1, channels, r, r}, std::move(v));
    NoGradGuard g;
    double best = 1e300;
    for (std::size_t k = 0; k < std::max<std::size_t>(o.repeats, 1); ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor<float> y = a_msa(x, ph, pw);
      best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
    }
    std::cout << r << ',' << r << ',' << full << ',' << axis << ',' << fmt(double(full) / double(axis)) << ','
              << fmt(best) << ',' << params << ',' << fmt(double(params) / reference) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"llformer: low-light image enhancement"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--seed", o.seed, "Random seed");
    sub->add_option("--config", o.config, "Model config JSON");
  };

  auto* syn = app.add_subcommand("synthesize", "Degrade normal-light PNGs into a paired dataset");
  common(syn);
  syn->add_option("--input", o.input, "Directory of normal-light PNGs")->required();
  syn->add_option("--out", o.out, "Output directory")->required();
  syn->add_option("--count", o.count, "Process at most this many images (0 = all)");

  auto* tr = app.add_subcommand("train", "Train a model on a manifest of pairs");
  common(tr);
  tr->add_option("--manifest", o.manifest, "Manifest CSV (id,low,normal)")->required();
  tr->add_option("--out", o.out, "Checkpoint to write")->required();
  tr->add_option("--resume", o.resume, "Continue from this checkpoint");
  tr->add_option("--steps", o.steps, "Total optimizer steps");
  tr->add_option("--batch", o.batch, "Batch size");
  tr->add_option("--patch", o.patch, "Crop size (multiple of 8)");
  tr->add_option("--lr", o.lr, "Peak learning rate");
  tr->add_option("--lr-min", o.lr_min, "Final learning rate");
  tr->add_option("--beta", o.beta, "Smooth L1 transition point");
  tr->add_flag("--no-flip", o.no_flip, "Disable flip augmentation");
  tr->add_option("--log-every", o.log_every, "Print every n-th step")->check(CLI::PositiveNumber);

  auto* en = app.add_subcommand("enhance", "Enhance a PNG or a directory of PNGs");
  common(en);
  en->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  en->add_option("--input", o.input, "PNG file or directory")->required();
  en->add_option("--out", o.out, "Output file or directory")->required();

  auto* ev = app.add_subcommand("eval", "Score enhanced images against references");
  common(ev);
  ev->add_option("--manifest", o.manifest, "Manifest CSV (id,low,normal)")->required();
  ev->add_option("--enhanced", o.enhanced, "Directory holding <id>.png")->required();
  ev->add_option("--out", o.out, "Also write the CSV here");

  auto* be = app.add_subcommand("bench", "Attention cost at several resolutions");
  common(be);
  be->add_option("--resolutions", o.resolutions, "Square sizes")->delimiter(',');
  be->add_option("--repeats", o.repeats, "Timing repetitions (best is kept)");
  be->add_option("--out", o.out, "Unused; accepted for symmetry");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*syn) return cmd_synthesize(o);
    if (*tr) return cmd_train(o);
    if (*en) return cmd_enhance(o);
    if (*ev) return cmd_eval(o);
    if (*be) return cmd_bench(o);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
