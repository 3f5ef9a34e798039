#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "epidepth/metrics.hpp"
#include "epidepth/pipeline.hpp"
#include "epidepth/synth.hpp"
#include "epidepth/tensor_io.hpp"

namespace epidepth {

// ---------------------------------------------------------------------------
// Adam with a halving learning-rate schedule
// ---------------------------------------------------------------------------

struct OptimizerHyper {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double base_lr = 1e-3;
  Index halve_period_epochs = 20;

  double lr_at(Index epoch) const {
    return base_lr * std::pow(0.5, static_cast<double>(epoch / halve_period_epochs));
  }
};

struct AdamState {
  std::vector<std::vector<double>> m, v;
  Index t = 0;

  void init_for(std::vector<Tensor>& params) {
    m.clear();
    v.clear();
    for (Tensor& p : params) {
      m.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
      v.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    }
    t = 0;
  }
};

// One bias-corrected update over a parameter list. `skip` marks parameters to
// leave untouched (their moments are not advanced either).
inline void adam_step(std::vector<Tensor>& params, AdamState& state, const OptimizerHyper& hyper,
                      Index epoch, const std::vector<bool>* skip = nullptr) {
  if (state.m.size() != params.size())
    throw ContractViolation("adam_step: state not initialized for this parameter list");
  ++state.t;
  const double lr = hyper.lr_at(epoch);
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (skip && (*skip)[k]) continue;
    Tensor& p = params[k];
    if (!p.has_grad()) throw ContractViolation("adam_step: parameter has no gradient");
    if (state.m[k].size() != static_cast<std::size_t>(p.size()))
      throw ContractViolation("adam_step: parameter/state shape mismatch");
    const std::vector<double>& g = p.grad();
    for (Index i = 0; i < p.size(); ++i) {
      double gi = g[static_cast<std::size_t>(i)];
      auto& mi = state.m[k][static_cast<std::size_t>(i)];
      auto& vi = state.v[k][static_cast<std::size_t>(i)];
      mi = hyper.beta1 * mi + (1.0 - hyper.beta1) * gi;
      vi = hyper.beta2 * vi + (1.0 - hyper.beta2) * gi * gi;
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      p.data()[i] -= lr * mhat / (std::sqrt(vhat) + hyper.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Train configuration (JSON-mirrored)
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::string dataset;
  Index image_size = 64;
  PipelineConfig pipeline;
  LossWeights loss;
  OptimizerHyper optimizer;
  Index epochs = 25;
  Index max_steps = 0;  // 0 = no cap
  std::uint64_t seed = 1;
  bool freeze_attention = false;
  double pose_noise = 0.0;  // sigma, radians and meters

  // Desk-scale defaults: 64x64 images, D=64, C=32, N_h=4, L=2, S=4.
  static TrainConfig desk_profile() { return TrainConfig{}; }

  // Full-width configuration: D=128, C=128, 8 heads, 6 layers, S=4, s=1,
  // lambda_min=0.1, lr 2e-4 halved every 20 epochs, 50 epochs.
  static TrainConfig full_profile() {
    TrainConfig c;
    c.pipeline.D = 128;
    c.pipeline.C = 128;
    c.pipeline.N_h = 8;
    c.pipeline.L = 6;
    c.pipeline.S = 4;
    c.pipeline.s_window = 1;
    c.pipeline.lambda_min = 0.1;
    c.optimizer.base_lr = 2e-4;
    c.optimizer.halve_period_epochs = 20;
    c.epochs = 50;
    return c;
  }

  nlohmann::json to_json() const {
    return {{"dataset", dataset},
            {"image_size", image_size},
            {"D", pipeline.D},
            {"C", pipeline.C},
            {"N_h", pipeline.N_h},
            {"L", pipeline.L},
            {"S", pipeline.S},
            {"s", pipeline.s_window},
            {"lambda_min", pipeline.lambda_min},
            {"d_min", pipeline.d_min},
            {"d_max", pipeline.d_max},
            {"context_width", pipeline.context_width},
            {"alpha_photo", loss.alpha_photo},
            {"lambda_s", loss.lambda_s},
            {"lambda_H", loss.lambda_H},
            {"lambda_C", loss.lambda_C},
            {"beta1", optimizer.beta1},
            {"beta2", optimizer.beta2},
            {"lr", optimizer.base_lr},
            {"halve_period", optimizer.halve_period_epochs},
            {"epochs", epochs},
            {"max_steps", max_steps},
            {"seed", seed},
            {"freeze_attention", freeze_attention},
            {"pose_noise", pose_noise}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j.at(key).get<std::decay_t<decltype(dst)>>();
    };
    get("dataset", c.dataset);
    get("image_size", c.image_size);
    get("D", c.pipeline.D);
    get("C", c.pipeline.C);
    get("N_h", c.pipeline.N_h);
    get("L", c.pipeline.L);
    get("S", c.pipeline.S);
    get("s", c.pipeline.s_window);
    get("lambda_min", c.pipeline.lambda_min);
    get("d_min", c.pipeline.d_min);
    get("d_max", c.pipeline.d_max);
    get("context_width", c.pipeline.context_width);
    get("alpha_photo", c.loss.alpha_photo);
    get("lambda_s", c.loss.lambda_s);
    get("lambda_H", c.loss.lambda_H);
    get("lambda_C", c.loss.lambda_C);
    get("beta1", c.optimizer.beta1);
    get("beta2", c.optimizer.beta2);
    get("lr", c.optimizer.base_lr);
    get("halve_period", c.optimizer.halve_period_epochs);
    get("epochs", c.epochs);
    get("max_steps", c.max_steps);
    get("seed", c.seed);
    get("freeze_attention", c.freeze_attention);
    get("pose_noise", c.pose_noise);
    c.loss.S = c.pipeline.S;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::string config_json;
  std::vector<std::pair<std::string, std::vector<std::pair<std::string, Tensor>>>> groups;

  const std::vector<std::pair<std::string, Tensor>>* find_group(const std::string& name) const {
    for (const auto& [gname, tensors] : groups)
      if (gname == name) return &tensors;
    return nullptr;
  }
};

inline constexpr char kCheckpointMagic[4] = {'E', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& buf, std::size_t& at, const char* what) {
  if (at + 8 > buf.size()) throw ContractViolation(std::string("checkpoint: truncated before ") + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[at + i])) << (8 * i);
  at += 8;
  return v;
}

inline void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, static_cast<std::uint32_t>(s.size()));
  buf += s;
}

inline std::string get_str(const std::string& buf, std::size_t& at, const char* what) {
  std::uint32_t n = get_u32(buf, at, what);
  if (at + n > buf.size()) throw ContractViolation(std::string("checkpoint: truncated inside ") + what);
  std::string s = buf.substr(at, n);
  at += n;
  return s;
}

}  // namespace detail

inline std::string checkpoint_to_bytes(const Checkpoint& ck) {
  std::string buf(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u64(buf, ck.config_json.size());
  buf += ck.config_json;
  detail::put_u32(buf, static_cast<std::uint32_t>(ck.groups.size()));
  for (const auto& [gname, tensors] : ck.groups) {
    detail::put_str(buf, gname);
    detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [tname, t] : tensors) {
      detail::put_str(buf, tname);
      std::string blob = tensor_to_bytes(t);
      detail::put_u64(buf, blob.size());
      buf += blob;
    }
  }
  return buf;
}

inline Checkpoint checkpoint_from_bytes(const std::string& buf) {
  std::size_t at = 0;
  if (buf.size() < 8 || buf.compare(0, 4, kCheckpointMagic, 4) != 0)
    throw ContractViolation("checkpoint: bad magic");
  at = 4;
  std::uint32_t version = detail::get_u32(buf, at, "version");
  if (version != kCheckpointVersion)
    throw ContractViolation("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  std::uint64_t jlen = detail::get_u64(buf, at, "config length");
  if (at + jlen > buf.size()) throw ContractViolation("checkpoint: truncated config");
  ck.config_json = buf.substr(at, jlen);
  at += jlen;
  std::uint32_t ngroups = detail::get_u32(buf, at, "group count");
  for (std::uint32_t g = 0; g < ngroups; ++g) {
    std::string gname = detail::get_str(buf, at, "group name");
    std::uint32_t ntensors = detail::get_u32(buf, at, "tensor count");
    std::vector<std::pair<std::string, Tensor>> tensors;
    for (std::uint32_t k = 0; k < ntensors; ++k) {
      std::string tname = detail::get_str(buf, at, "tensor name");
      std::uint64_t blen = detail::get_u64(buf, at, "tensor length");
      if (at + blen > buf.size()) throw ContractViolation("checkpoint: truncated tensor " + tname);
      std::size_t inner = at;
      Tensor t = tensor_from_bytes(buf, inner);
      if (inner != at + blen) throw ContractViolation("checkpoint: tensor length mismatch for " + tname);
      at += blen;
      tensors.emplace_back(std::move(tname), std::move(t));
    }
    ck.groups.emplace_back(std::move(gname), std::move(tensors));
  }
  if (at != buf.size()) throw ContractViolation("checkpoint: trailing bytes");
  return ck;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractViolation("cannot open for writing: " + path);
  std::string buf = checkpoint_to_bytes(ck);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw ContractViolation("write failed: " + path);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractViolation("cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(buf);
}

inline Checkpoint checkpoint_from_model(ModelParams& model, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.config_json = cfg.to_json().dump();
  for (auto& [gname, tensors] : model.groups()) {
    std::vector<std::pair<std::string, Tensor>> copy;
    for (auto& [tname, t] : tensors) copy.emplace_back(tname, t.detached());
    ck.groups.emplace_back(gname, std::move(copy));
  }
  return ck;
}

// Loads one named group into the model, validating names and shapes.
inline void load_group(const Checkpoint& ck, const std::string& group_name, ModelParams& model) {
  const auto* src = ck.find_group(group_name);
  if (!src) throw ContractViolation("checkpoint: missing group '" + group_name + "'");
  for (auto& [gname, tensors] : model.groups()) {
    if (gname != group_name) continue;
    if (tensors.size() != src->size())
      throw ContractViolation("checkpoint: group '" + group_name + "' tensor count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if ((*src)[i].first != tensors[i].first)
        throw ContractViolation("checkpoint: tensor name mismatch '" + (*src)[i].first + "' vs '" +
                                tensors[i].first + "'");
      if ((*src)[i].second.shape() != tensors[i].second.shape())
        throw ContractViolation("checkpoint: shape mismatch for '" + (*src)[i].first + "': " +
                                shape_str((*src)[i].second.shape()) + " vs " +
                                shape_str(tensors[i].second.shape()));
      for (Index k = 0; k < tensors[i].second.size(); ++k)
        tensors[i].second.data()[k] = (*src)[i].second.data()[k];
    }
    return;
  }
  throw ContractViolation("model has no group '" + group_name + "'");
}

inline ModelParams model_from_checkpoint(const Checkpoint& ck, TrainConfig* cfg_out = nullptr) {
  TrainConfig cfg = TrainConfig::from_json(nlohmann::json::parse(ck.config_json));
  if (cfg_out) *cfg_out = cfg;
  ModelParams model = ModelParams::init(cfg.pipeline, cfg.seed);
  for (const char* g : {"encoder", "attention", "decoder", "context"}) load_group(ck, g, model);
  return model;
}

// A's encoder/decoder/context groups with B's attention group. Shapes are
// validated tensor by tensor.
inline Checkpoint swap_attention(const Checkpoint& base, const Checkpoint& attention_source) {
  const auto* src = attention_source.find_group("attention");
  if (!src) throw ContractViolation("swap_attention: source checkpoint has no attention group");
  Checkpoint out = base;
  for (auto& [gname, tensors] : out.groups) {
    if (gname != "attention") continue;
    if (tensors.size() != src->size())
      throw ContractViolation("swap_attention: attention tensor count mismatch");
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      if (tensors[i].first != (*src)[i].first)
        throw ContractViolation("swap_attention: tensor name mismatch '" + tensors[i].first + "' vs '" +
                                (*src)[i].first + "'");
      if (tensors[i].second.shape() != (*src)[i].second.shape())
        throw ContractViolation("swap_attention: shape mismatch for '" + tensors[i].first + "': " +
                                shape_str(tensors[i].second.shape()) + " vs " +
                                shape_str((*src)[i].second.shape()));
      tensors[i].second = (*src)[i].second.detached();
    }
    return out;
  }
  throw ContractViolation("swap_attention: base checkpoint has no attention group");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainResult {
  ModelParams model;
  TrainConfig config;
  std::string loss_csv_path;
  std::string final_checkpoint_path;
  double first_total = 0, last_total = 0;
  Index steps = 0;
};

namespace detail {

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

// Deterministic given (config, seed, dataset bytes): one pass over the sample
// manifest per epoch in seeded-shuffle order, batch size 1, per-epoch
// checkpoints and a per-step loss CSV.
inline TrainResult train(const TrainConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(fs::path(cfg.dataset) / "manifest.txt"))
    throw ContractViolation("train: dataset not found at " + cfg.dataset);
  std::vector<FrameSample> samples = read_dataset(cfg.dataset);
  if (samples.empty()) throw ContractViolation("train: dataset is empty");
  fs::create_directories(out_dir);

  TrainResult result;
  result.config = cfg;
  LossWeights weights = cfg.loss;
  weights.S = cfg.pipeline.S;
  ModelParams model = ModelParams::init(cfg.pipeline, cfg.seed);

  std::vector<Tensor> params = model.all_tensors();
  std::vector<bool> frozen(params.size(), false);
  if (cfg.freeze_attention) {
    std::size_t at = 0;
    for (auto& [gname, tensors] : model.groups()) {
      for (std::size_t i = 0; i < tensors.size(); ++i, ++at) frozen[at] = gname == "attention";
    }
  }

  OptimizerHyper hyper = cfg.optimizer;
  AdamState state;
  state.init_for(params);

  result.loss_csv_path = (fs::path(out_dir) / "loss.csv").string();
  std::ofstream csv(result.loss_csv_path);
  if (!csv) throw ContractViolation("train: cannot write " + result.loss_csv_path);
  LossReport header_probe;
  csv << header_probe.csv_header(cfg.pipeline.S) << "\n";

  Rng noise_rng(cfg.seed ^ 0x5eedULL);
  Index step = 0;
  bool capped = false;
  for (Index epoch = 0; epoch < cfg.epochs && !capped; ++epoch) {
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(cfg.seed * 1315423911ULL + static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) {
        capped = true;
        break;
      }
      FrameSample sample = samples[order[oi]];
      if (cfg.pose_noise > 0) {
        sample.T_prev = perturb_pose(sample.T_prev, cfg.pose_noise, cfg.pose_noise, noise_rng);
        sample.T_next = perturb_pose(sample.T_next, cfg.pose_noise, cfg.pose_noise, noise_rng);
      }
      Tape tape;
      model.attach_all(tape);
      PipelineOutput out = run_pipeline(sample, model, cfg.pipeline);
      LossReport rep = total_loss(out.predictions(), sample.target, sample.prev, sample.next, sample.K,
                                  sample.T_prev, sample.T_next, weights);
      tape.backward(rep.total);
      adam_step(params, state, hyper, epoch, &frozen);

      csv << step << "," << detail::format_g17(rep.total_value) << "," << detail::format_g17(rep.L_H)
          << "," << detail::format_g17(rep.L_C);
      for (double lm : rep.L_M) csv << "," << detail::format_g17(lm);
      csv << "\n";
      if (step == 0) result.first_total = rep.total_value;
      result.last_total = rep.total_value;
      ++step;
    }
    Checkpoint ck = checkpoint_from_model(model, cfg);
    std::string path = (fs::path(out_dir) / ("checkpoint_epoch" + std::to_string(epoch) + ".ckpt")).string();
    write_checkpoint(path, ck);
    result.final_checkpoint_path = path;
  }
  csv.close();
  result.steps = step;
  result.model = model;
  return result;
}

}  // namespace epidepth
