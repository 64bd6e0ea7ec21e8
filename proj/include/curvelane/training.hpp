#pragma once

// Optimizer, deterministic training loop and checkpoints.

#include "curvelane/config.hpp"
#include "curvelane/runner.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace curvelane {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with decoupled weight decay. Moments are kept in double.
template <class S>
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

  long step_count() const { return t_; }
  const std::vector<double>& first_moment() const { return m_; }
  const std::vector<double>& second_moment() const { return v_; }

  void restore(long t, std::vector<double> m, std::vector<double> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

  /// Learning rate of the next update.
  double lr() const {
    if (cfg_.warmup_steps > 0 && t_ < cfg_.warmup_steps) return cfg_.lr * (t_ + 1) / cfg_.warmup_steps;
    if (cfg_.decay_step > 0 && t_ >= cfg_.decay_step) return cfg_.lr * cfg_.decay_factor;
    return cfg_.lr;
  }

  /// Applies one update from the accumulated gradients; returns the global
  /// gradient norm before clipping.
  double step(nn::ParamStore<S>& ps) {
    const std::size_t n = ps.scalar_count();
    if (m_.empty()) {
      m_.assign(n, 0.0);
      v_.assign(n, 0.0);
    }
    if (m_.size() != n) throw TrainError("optimizer state does not match the parameter count");
    double sq = 0.0;
    for (const auto& e : ps.entries()) {
      if (!e.value.has_grad()) continue;
      for (S g : e.value.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;
    const double lr = this->lr();
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::size_t off = 0;
    for (auto& e : ps.entries()) {
      auto& val = e.value.mutable_values();
      const bool has = e.value.has_grad();
      for (std::size_t i = 0; i < val.size(); ++i, ++off) {
        const double g = has ? static_cast<double>(e.value.grad()[i]) * clip : 0.0;
        m_[off] = cfg_.beta1 * m_[off] + (1 - cfg_.beta1) * g;
        v_[off] = cfg_.beta2 * v_[off] + (1 - cfg_.beta2) * g * g;
        double p = static_cast<double>(val[i]);
        p -= lr * cfg_.weight_decay * p;
        p -= lr * (m_[off] / bc1) / (std::sqrt(v_[off] / bc2) + cfg_.eps);
        val[i] = static_cast<S>(p);
      }
    }
    return norm;
  }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

/// One optimization unit: a single frame, or a (previous, current) pair when
/// temporal fusion is trained.
struct TrainUnit {
  int sequence = 0;
  int frame = 0;  // supervised frame
  int context = -1;  // frame run without gradients before it, -1 for none
};

inline std::vector<TrainUnit> make_units(const std::vector<Sequence>& seqs, bool clips) {
  std::vector<TrainUnit> out;
  for (int s = 0; s < static_cast<int>(seqs.size()); ++s) {
    const int n = static_cast<int>(seqs[s].frames.size());
    for (int f = clips ? 1 : 0; f < n; ++f) out.push_back({s, f, clips ? f - 1 : -1});
  }
  return out;
}

/// Visiting order of epoch `epoch`: a permutation seeded by (seed, epoch).
inline std::vector<int> epoch_order(std::size_t count, std::uint64_t seed, int epoch) {
  std::vector<int> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch) + 1);
  // Fisher-Yates with an explicit draw so the order does not depend on the
  // standard library's shuffle.
  for (std::size_t i = count; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double total = 0, curve = 0, query = 0, seg = 0;
  double grad_norm = 0, lr = 0;

  nlohmann::json to_json() const {
    return {{"step", step},       {"epoch", epoch},         {"total_loss", total}, {"L_curve", curve},
            {"L_query", query},   {"L_seg", seg},           {"grad_norm", grad_norm}, {"lr", lr}};
  }
};

// ---------------------------------------------------------------------------
// Checkpoints: `<stem>.json` manifest next to a `<stem>.bin` blob holding the
// parameters, then the two optimizer moments, as little-endian doubles.

inline std::filesystem::path blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  return p.replace_extension(".bin");
}

template <class S>
void save_checkpoint(const std::filesystem::path& manifest, const Model<S>& model, const AdamW<S>& opt,
                     const nlohmann::json& config, long step) {
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  std::vector<double> params = model.params().flatten();
  std::vector<double> m = opt.first_moment(), v = opt.second_moment();
  if (m.empty()) m.assign(params.size(), 0.0);
  if (v.empty()) v.assign(params.size(), 0.0);
  {
    std::ofstream out(blob_path(manifest), std::ios::binary);
    if (!out) throw TrainError("cannot write " + blob_path(manifest).string());
    for (const auto* buf : {&params, &m, &v}) {
      out.write(reinterpret_cast<const char*>(buf->data()), static_cast<std::streamsize>(buf->size() * sizeof(double)));
    }
  }
  nlohmann::json j;
  j["format"] = "curvelane-checkpoint-1";
  j["step"] = step;
  j["optimizer_steps"] = opt.step_count();
  j["scalars"] = params.size();
  j["blob"] = blob_path(manifest).filename().string();
  j["config"] = config;
  nlohmann::json names = nlohmann::json::array();
  for (const auto& e : model.params().entries()) names.push_back({{"name", e.name}, {"shape", e.value.shape()}});
  j["parameters"] = names;
  std::ofstream out(manifest);
  if (!out) throw TrainError("cannot write " + manifest.string());
  out << j.dump(1) << "\n";
}

struct CheckpointData {
  nlohmann::json manifest;
  std::vector<double> params, m, v;
  long step = 0;
  long optimizer_steps = 0;
};

inline CheckpointData read_checkpoint(const std::filesystem::path& manifest) {
  CheckpointData c;
  std::ifstream in(manifest);
  if (!in) throw TrainError("cannot open checkpoint " + manifest.string());
  try {
    c.manifest = nlohmann::json::parse(in);
    c.step = c.manifest.at("step").get<long>();
    c.optimizer_steps = c.manifest.at("optimizer_steps").get<long>();
  } catch (const nlohmann::json::exception& e) {
    throw TrainError(manifest.string() + ": malformed manifest: " + e.what());
  }
  const std::size_t n = c.manifest.at("scalars").get<std::size_t>();
  const auto blob = manifest.parent_path() / c.manifest.at("blob").get<std::string>();
  std::ifstream b(blob, std::ios::binary);
  if (!b) throw TrainError("cannot open checkpoint blob " + blob.string());
  for (auto* buf : {&c.params, &c.m, &c.v}) {
    buf->resize(n);
    b.read(reinterpret_cast<char*>(buf->data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!b) throw TrainError("checkpoint blob " + blob.string() + " is truncated");
  }
  return c;
}

/// Model-shaping keys that differ between the run config and a checkpoint.
inline std::vector<std::string> checkpoint_mismatch(const nlohmann::json& run_config, const nlohmann::json& ckpt_config) {
  const nlohmann::json a = run_config.value("model", nlohmann::json::object());
  const nlohmann::json b = ckpt_config.value("model", nlohmann::json::object());
  auto keys = diff_keys(a, b, "model");
  return keys;
}

template <class S>
void load_model_weights(Model<S>& model, const CheckpointData& c, const nlohmann::json& run_config) {
  const auto diff = checkpoint_mismatch(run_config, c.manifest.at("config"));
  if (!diff.empty()) {
    std::string msg = "checkpoint does not match the configuration; differing keys:";
    for (const auto& k : diff) msg += " " + k;
    throw TrainError(msg);
  }
  model.params().assign(c.params);
}

// ---------------------------------------------------------------------------

/// Loss of one unit, with the gradient graph attached to the supervised frame.
template <class S>
LossTerms<S> unit_loss(const Model<S>& model, const FusionConfig& fusion, const LossConfig& lc,
                       const std::vector<Sequence>& seqs, const std::vector<std::vector<TrainFrame>>& prepared,
                       const TrainUnit& u) {
  const auto& mc = model.config();
  const TrainFrame& tf = prepared[u.sequence][u.frame];
  const FrameSample& f = *tf.frame;
  if (u.context < 0) {
    const auto out = model.forward(f.image, f.rig);
    return frame_loss(out, tf.targets, tf.seg_target, mc, lc);
  }
  TemporalMemory mem(fusion.history_len);
  {
    ag::NoGradGuard ng;
    const FrameSample& p = seqs[u.sequence].frames[u.context];
    fused_forward(model, mem, fusion, p.image, p.rig, EgoMotion(), p.index);
  }
  const auto out = fused_forward(model, mem, fusion, f.image, f.rig, f.ego_motion_from_prev, f.index);
  return frame_loss(out, tf.targets, tf.seg_target, mc, lc);
}

/// Training state over a fixed data set. `step()` performs one update.
template <class S>
class Trainer {
 public:
  Trainer(const RunConfig& cfg, const std::vector<Sequence>& seqs)
      : cfg_(cfg), seqs_(seqs), model_(cfg.model, cfg.seed), opt_(cfg.optimizer), config_json_(cfg) {
    const bool clips = cfg.fusion.variant != FusionVariant::none;
    units_ = make_units(seqs_, clips);
    if (units_.empty()) {
      throw TrainError(clips ? "temporal training needs sequences with at least 2 frames" : "no training frames");
    }
    for (const auto& s : seqs_) {
      std::vector<TrainFrame> v;
      for (const auto& f : s.frames) {
        if (f.image.height != cfg.model.image.height || f.image.width != cfg.model.image.width) {
          throw TrainError("frame " + s.sequence_id + "/" + std::to_string(f.index) + " has the wrong image size");
        }
        v.push_back(prepare_frame(f, cfg.model));
      }
      prepared_.push_back(std::move(v));
    }
  }

  Model<S>& model() { return model_; }
  const Model<S>& model() const { return model_; }
  long step_index() const { return step_; }
  int steps_per_epoch() const {
    return static_cast<int>((units_.size() + cfg_.train.batch_size - 1) / cfg_.train.batch_size);
  }
  long total_steps() const {
    const long budget = static_cast<long>(steps_per_epoch()) * cfg_.train.epochs;
    return cfg_.train.max_steps > 0 ? std::min<long>(budget, cfg_.train.max_steps) : budget;
  }
  bool done() const { return step_ >= total_steps(); }
  const nlohmann::json& config_json() const { return config_json_; }

  /// Units of global step `s` (0-based).
  std::vector<TrainUnit> batch_of(long s) const {
    const int spe = steps_per_epoch();
    const int epoch = static_cast<int>(s / spe);
    const int within = static_cast<int>(s % spe);
    const auto order = epoch_order(units_.size(), cfg_.seed, epoch);
    std::vector<TrainUnit> b;
    for (int i = within * cfg_.train.batch_size;
         i < std::min<int>((within + 1) * cfg_.train.batch_size, static_cast<int>(order.size())); ++i) {
      b.push_back(units_[order[i]]);
    }
    return b;
  }

  StepRecord step() {
    const auto batch = batch_of(step_);
    model_.params().zero_grad();
    std::vector<Tensor<S>> totals;
    StepRecord r;
    r.epoch = static_cast<int>(step_ / steps_per_epoch());
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& u : batch) {
      const auto t = unit_loss(model_, cfg_.fusion, cfg_.loss, seqs_, prepared_, u);
      ag::backward(ag::scale(t.total, S(inv)));
      r.total += static_cast<double>(t.total.values()[0]) * inv;
      r.curve += static_cast<double>(t.curve.values()[0]) * inv;
      r.query += static_cast<double>(t.query.values()[0]) * inv;
      r.seg += static_cast<double>(t.seg.values()[0]) * inv;
    }
    r.lr = opt_.lr();
    r.grad_norm = opt_.step(model_.params());
    ++step_;
    r.step = step_;
    return r;
  }

  void save(const std::filesystem::path& manifest) const { save_checkpoint(manifest, model_, opt_, config_json_, step_); }

  /// Continues from a checkpoint written by `save`.
  void resume(const std::filesystem::path& manifest) {
    const auto c = read_checkpoint(manifest);
    load_model_weights(model_, c, config_json_);
    opt_.restore(c.optimizer_steps, c.m, c.v);
    step_ = c.step;
  }

  /// Runs to the end of the budget. `on_step` sees every record; checkpoints
  /// go to `<ckpt_dir>/step_<n>.json` and `<ckpt_dir>/last.json`.
  void run(const std::function<void(const StepRecord&)>& on_step, const std::filesystem::path& ckpt_dir) {
    while (!done()) {
      const auto r = step();
      if (!std::isfinite(r.total)) throw TrainError("loss became non-finite at step " + std::to_string(r.step));
      if (on_step) on_step(r);
      if (!ckpt_dir.empty() && cfg_.train.checkpoint_every > 0 && step_ % cfg_.train.checkpoint_every == 0) {
        save(ckpt_dir / ("step_" + std::to_string(step_) + ".json"));
      }
    }
    if (!ckpt_dir.empty()) save(ckpt_dir / "last.json");
  }

 private:
  RunConfig cfg_;
  const std::vector<Sequence>& seqs_;
  Model<S> model_;
  AdamW<S> opt_;
  nlohmann::json config_json_;
  std::vector<TrainUnit> units_;
  std::vector<std::vector<TrainFrame>> prepared_;
  long step_ = 0;
};

}  // namespace curvelane
