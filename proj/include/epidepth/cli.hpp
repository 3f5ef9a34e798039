#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "epidepth/evaluation.hpp"
#include "epidepth/runtime.hpp"

namespace epidepth {

namespace detail {

inline bool parse_pixel(const std::string& s, Index& u, Index& v) {
  std::istringstream is(s);
  char comma;
  return static_cast<bool>(is >> u >> comma >> v) && comma == ',';
}

inline void write_metric_rows(std::ostream& os, const std::string& checkpoint,
                              const std::vector<KindMetrics>& rows) {
  os << metrics_csv_header() << "\n";
  for (const auto& r : rows) os << metrics_csv_row(checkpoint, r.kind, r.metrics) << "\n";
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multi-frame self-supervised depth estimation with cross-attention cost volumes"};
  app.require_subcommand(1);

  // --- gen-data ---------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset with ground truth");
  struct {
    std::uint64_t seed = 7;
    std::string out;
    Index samples = 20;
    Index size = 64;
    double depth_min = 3.0, depth_max = 9.0;
    double span_lo = 2.0, span_hi = 4.5;
  } gd;
  gen->add_option("--seed", gd.seed, "Master seed");
  gen->add_option("--out", gd.out, "Output dataset directory")->required();
  gen->add_option("--samples", gd.samples, "Sample count");
  gen->add_option("--size", gd.size, "Square image size (divisible by 8)");
  gen->add_option("--depth-min", gd.depth_min, "Scene depth lower bound (m)");
  gen->add_option("--depth-max", gd.depth_max, "Scene depth upper bound (m)");
  gen->add_option("--span-lo", gd.span_lo, "Min disparity span at feature resolution (px)");
  gen->add_option("--span-hi", gd.span_hi, "Max disparity span at feature resolution (px)");

  // --- train --------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "Train on a dataset");
  struct {
    std::string dataset, out, config, profile = "desk";
    Index epochs = -1;
    std::uint64_t seed = 0;
    double lr = -1, lambda_min = -1, d_min = -1, d_max = -1, pose_noise = -1;
    Index D = -1, C = -1, heads = -1, layers = -1, scales = -1, window = -1;
    bool freeze_attention = false;
  } to;
  tr->add_option("--dataset", to.dataset, "Dataset directory");
  tr->add_option("--out", to.out, "Output directory")->required();
  tr->add_option("--config", to.config, "JSON config file (flags override it)");
  tr->add_option("--profile", to.profile, "Preset: desk or full")
      ->check(CLI::IsMember({"desk", "full"}));
  auto* o_epochs = tr->add_option("--epochs", to.epochs, "Training epochs");
  auto* o_seed = tr->add_option("--seed", to.seed, "Seed");
  auto* o_lr = tr->add_option("--lr", to.lr, "Base learning rate");
  auto* o_lmin = tr->add_option("--lambda-min", to.lambda_min, "Confidence threshold");
  auto* o_dmin = tr->add_option("--d-min", to.d_min, "Nearest depth bin (m)");
  auto* o_dmax = tr->add_option("--d-max", to.d_max, "Farthest depth bin (m)");
  auto* o_D = tr->add_option("--bins", to.D, "Depth bin count D");
  auto* o_C = tr->add_option("--channels", to.C, "Attention channels C");
  auto* o_h = tr->add_option("--heads", to.heads, "Attention heads");
  auto* o_L = tr->add_option("--layers", to.layers, "Attention layers L");
  auto* o_S = tr->add_option("--scales", to.scales, "Output scales S");
  auto* o_w = tr->add_option("--window", to.window, "High-response half-width s");
  auto* o_noise = tr->add_option("--pose-noise", to.pose_noise,
                                 "SE(3) noise sigma (radians and meters)");
  tr->add_flag("--freeze-attention", to.freeze_attention,
               "Keep the attention group fixed during training");

  // --- infer ----------------------------------------------------------
  auto* in = app.add_subcommand("infer", "Run inference on one sample");
  struct {
    std::string checkpoint, dataset, out;
    Index sample = 0;
  } io;
  in->add_option("--checkpoint", io.checkpoint, "Checkpoint file")->required();
  in->add_option("--dataset", io.dataset, "Dataset directory")->required();
  in->add_option("--sample", io.sample, "Sample index");
  in->add_option("--out", io.out, "Output directory")->required();

  // --- eval / compare-baselines ----------------------------------------
  struct EvalArgs {
    std::string checkpoint, dataset, out;
    bool no_median_scale = false;
    double d_cap = 80.0;
  };
  EvalArgs ev, cb;
  auto add_eval_args = [](CLI::App* cmd, EvalArgs& a) {
    cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint file")->required();
    cmd->add_option("--dataset", a.dataset, "Dataset directory")->required();
    cmd->add_option("--out", a.out, "Output CSV (stdout when omitted)");
    cmd->add_flag("--no-median-scale", a.no_median_scale, "Disable test-time median scaling");
    cmd->add_option("--d-cap", a.d_cap, "Ground-truth depth cap (m)");
  };
  auto* evc = app.add_subcommand("eval", "Evaluate a checkpoint against ground truth");
  add_eval_args(evc, ev);
  auto* cbc = app.add_subcommand("compare-baselines",
                                 "Metric rows for baselines and every decoded output");
  add_eval_args(cbc, cb);

  // --- inspect-volume ----------------------------------------------------
  auto* iv = app.add_subcommand("inspect-volume", "Dump one pixel's matching distribution");
  struct {
    std::string checkpoint, dataset, out, pixel = "8,8";
    Index sample = 0;
  } vo;
  iv->add_option("--checkpoint", vo.checkpoint, "Checkpoint file")->required();
  iv->add_option("--dataset", vo.dataset, "Dataset directory")->required();
  iv->add_option("--sample", vo.sample, "Sample index");
  iv->add_option("--pixel", vo.pixel, "Feature-resolution pixel 'u,v'");
  iv->add_option("--out", vo.out, "Output CSV (stdout when omitted)");

  // --- swap-attention ------------------------------------------------------
  auto* sw = app.add_subcommand("swap-attention", "Replace the attention group of a checkpoint");
  struct {
    std::string base, attention_from, out;
  } so;
  sw->add_option("--base", so.base, "Base checkpoint")->required();
  sw->add_option("--attention-from", so.attention_from, "Checkpoint donating its attention group")
      ->required();
  sw->add_option("--out", so.out, "Output checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << std::endl;
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::endl;
    return 2;
  }

  try {
    if (gen->parsed()) {
      DatasetSpec ds;
      ds.seed = gd.seed;
      ds.samples = gd.samples;
      ds.width = gd.size;
      ds.height = gd.size;
      ds.depth_min = gd.depth_min;
      ds.depth_max = gd.depth_max;
      ds.motion.span_lo = gd.span_lo;
      ds.motion.span_hi = gd.span_hi;
      write_dataset(generate_dataset(ds), gd.out);
      std::cout << "wrote " << gd.samples << " samples to " << gd.out << std::endl;
      return 0;
    }

    if (tr->parsed()) {
      TrainConfig cfg = to.profile == "full" ? TrainConfig::full_profile() : TrainConfig::desk_profile();
      if (!to.config.empty()) {
        std::ifstream is(to.config);
        if (!is) throw ContractViolation("cannot open config: " + to.config);
        cfg = TrainConfig::from_json(nlohmann::json::parse(is));
      }
      if (!to.dataset.empty()) cfg.dataset = to.dataset;
      if (o_epochs->count()) cfg.epochs = to.epochs;
      if (o_seed->count()) cfg.seed = to.seed;
      if (o_lr->count()) cfg.optimizer.base_lr = to.lr;
      if (o_lmin->count()) cfg.pipeline.lambda_min = to.lambda_min;
      if (o_dmin->count()) cfg.pipeline.d_min = to.d_min;
      if (o_dmax->count()) cfg.pipeline.d_max = to.d_max;
      if (o_D->count()) cfg.pipeline.D = to.D;
      if (o_C->count()) cfg.pipeline.C = to.C;
      if (o_h->count()) cfg.pipeline.N_h = to.heads;
      if (o_L->count()) cfg.pipeline.L = to.layers;
      if (o_S->count()) cfg.pipeline.S = to.scales;
      if (o_w->count()) cfg.pipeline.s_window = to.window;
      if (o_noise->count()) cfg.pose_noise = to.pose_noise;
      if (to.freeze_attention) cfg.freeze_attention = true;
      cfg.loss.S = cfg.pipeline.S;
      if (cfg.dataset.empty()) throw ContractViolation("train: --dataset (or a config with one) is required");
      TrainResult res = train(cfg, to.out);
      std::cout << "trained " << res.steps << " steps; loss " << res.first_total << " -> "
                << res.last_total << "\nfinal checkpoint: " << res.final_checkpoint_path << std::endl;
      return 0;
    }

    if (in->parsed()) {
      Checkpoint ck = read_checkpoint(io.checkpoint);
      TrainConfig cfg;
      ModelParams model = model_from_checkpoint(ck, &cfg);
      auto samples = read_dataset(io.dataset);
      if (io.sample < 0 || io.sample >= static_cast<Index>(samples.size()))
        throw ContractViolation("infer: sample index out of range");
      const FrameSample& s = samples[static_cast<std::size_t>(io.sample)];
      PipelineOutput out = run_pipeline(s, model, cfg.pipeline);
      namespace fs = std::filesystem;
      fs::create_directories(io.out);
      double scale = cfg.pipeline.d_max / 65000.0;
      const Index h4 = s.H / 4, w4 = s.W / 4;
      auto dump = [&](const Tensor& t, Index h, Index w, const std::string& name) {
        std::vector<double> v(t.data(), t.data() + t.size());
        write_depth_pgm((fs::path(io.out) / name).string(), v, w, h, scale);
      };
      dump(out.high_response.depth, h4, w4, "high_response.pgm");
      dump(out.context_adjusted, h4, w4, "context_adjusted.pgm");
      for (std::size_t j = 0; j < out.multi_scale.maps.size(); ++j) {
        const Tensor& m = out.multi_scale.maps[j];
        dump(m, m.shape()[0], m.shape()[1], "decoded_" + std::to_string(j) + ".pgm");
      }
      std::vector<double> conf(out.high_response.confidence.data(),
                               out.high_response.confidence.data() + h4 * w4);
      write_gray_pgm8((fs::path(io.out) / "confidence.pgm").string(), conf, w4, h4);
      std::cout << "wrote depth maps to " << io.out << std::endl;
      return 0;
    }

    if (evc->parsed() || cbc->parsed()) {
      EvalArgs& a = evc->parsed() ? ev : cb;
      Checkpoint ck = read_checkpoint(a.checkpoint);
      TrainConfig cfg;
      ModelParams model = model_from_checkpoint(ck, &cfg);
      auto samples = read_dataset(a.dataset);
      EvalOptions opts;
      opts.median_scale = !a.no_median_scale;
      opts.d_cap = a.d_cap;
      auto rows = evaluate_model(model, cfg.pipeline, samples, opts);
      std::string name = std::filesystem::path(a.checkpoint).stem().string();
      if (a.out.empty()) {
        detail::write_metric_rows(std::cout, name, rows);
      } else {
        std::ofstream os(a.out);
        if (!os) throw ContractViolation("cannot open for writing: " + a.out);
        detail::write_metric_rows(os, name, rows);
        std::cout << "wrote metrics to " << a.out << std::endl;
      }
      return 0;
    }

    if (iv->parsed()) {
      Index u = 0, v = 0;
      if (!detail::parse_pixel(vo.pixel, u, v))
        throw ContractViolation("inspect-volume: --pixel expects 'u,v'");
      Checkpoint ck = read_checkpoint(vo.checkpoint);
      TrainConfig cfg;
      ModelParams model = model_from_checkpoint(ck, &cfg);
      auto samples = read_dataset(vo.dataset);
      if (vo.sample < 0 || vo.sample >= static_cast<Index>(samples.size()))
        throw ContractViolation("inspect-volume: sample index out of range");
      const FrameSample& s = samples[static_cast<std::size_t>(vo.sample)];
      PipelineOutput out = run_pipeline(s, model, cfg.pipeline);
      if (u < 0 || u >= out.cost_volume.W || v < 0 || v >= out.cost_volume.H)
        throw ContractViolation("inspect-volume: pixel outside the feature grid");
      DepthBins bins = sid_bins(cfg.pipeline.d_min, cfg.pipeline.d_max, cfg.pipeline.D);
      if (vo.out.empty()) {
        write_distribution_csv(std::cout, out.cost_volume.values, bins, u, v);
      } else {
        std::ofstream os(vo.out);
        if (!os) throw ContractViolation("cannot open for writing: " + vo.out);
        write_distribution_csv(os, out.cost_volume.values, bins, u, v);
      }
      return 0;
    }

    if (sw->parsed()) {
      Checkpoint base = read_checkpoint(so.base);
      Checkpoint donor = read_checkpoint(so.attention_from);
      Checkpoint hybrid = swap_attention(base, donor);
      write_checkpoint(so.out, hybrid);
      std::cout << "wrote hybrid checkpoint to " << so.out << std::endl;
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}

inline int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("epidepth");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace epidepth
