// SPDX-License-Identifier: Apache-2.0

#include "ava/training.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ava/binio.h"
#include "ava/checkpoint.h"
#include "ava/parallel.h"
#include "ava/rng.h"

namespace ava {

Var mae_chunk_loss(Var pred, Var gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("mae_chunk_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(gt.shape()));
  }
  return ops::mean_abs_diff(pred, gt);
}

Var weight_penalty(Var omega, double c, PenaltyForm form) {
  if (omega.value().size() == 0) throw DimensionError("weight_penalty: empty soft weights");
  Tape& tape = *omega.tape;
  Var gap = ops::sub(ops::mean(omega), tape.constant(Tensor({1}, c)));
  return form == PenaltyForm::Squared ? ops::square(gap) : ops::abs(gap);
}

Window make_window(const Episode& episode, const EnvConfig& env, std::size_t start, std::size_t horizon) {
  if (episode.steps.empty()) throw ConfigError("episode " + std::to_string(episode.seed) + " has no steps");
  if (start >= episode.steps.size()) {
    throw ConfigError("window start " + std::to_string(start) + " past episode end");
  }
  Window w;
  w.episode_seed = episode.seed;
  w.start = start;
  const auto instr = instruction_tokens(episode.color);
  for (std::size_t k = 0; k < horizon; ++k) {
    const std::size_t t = std::min(start + k, episode.steps.size() - 1);
    const auto& src = episode.steps[t];
    WindowStep st;
    st.patches = to_patches(env, src.image);
    st.instruction = instr;
    st.gt = Tensor({src.expert.size() / 2, 2}, std::vector<double>(src.expert.begin(), src.expert.end()));
    st.active = start + k < episode.steps.size();
    w.steps.push_back(std::move(st));
  }
  return w;
}

WindowLoss window_loss(Tape& tape, const Model& model, const Window& window, const TrainConfig& cfg,
                       const WindowOptions& opts) {
  const bool ava_mode = opts.mode == PolicyMode::Ava;
  const auto is_boundary = [&](std::size_t t) {
    return std::find(cfg.detach_boundaries.begin(), cfg.detach_boundaries.end(), t) != cfg.detach_boundaries.end();
  };
  WindowLoss out;
  const std::size_t n = window.steps.size();
  out.step_mae.assign(n, 0.0);
  out.step_penalty.assign(n, 0.0);
  out.step_mean_omega.assign(n, 0.0);

  RecurrentState r = initial_state(tape, model.config());
  std::optional<Var> total;
  std::size_t boundary = 0;
  StepOptions so;
  so.mode = opts.mode;
  for (std::size_t t = 0; t < n; ++t) {
    const WindowStep& st = window.steps[t];
    if (!st.active) break;
    if (ava_mode && t > 0 && is_boundary(t)) {
      if (opts.inject) {
        if (boundary >= opts.inject->size()) throw ConfigError("window_loss: missing injected boundary state");
        r.value = tape.constant((*opts.inject)[boundary]);
        r.detached = true;
      } else {
        if (opts.record) opts.record->push_back(r.value.value());
        r = detach_state(r);
      }
      ++boundary;
    }
    StepResult res = model.step(tape, st.patches, st.instruction, r, so);
    Var loss = mae_chunk_loss(res.chunk, tape.constant(st.gt));
    out.step_mae[t] = loss.value()[0];
    if (ava_mode) {
      Var pen = weight_penalty(res.weights->omega, cfg.target_mean_weight, cfg.penalty_form);
      out.step_penalty[t] = pen.value()[0];
      const auto& w = res.weights->omega.value().data;
      double mu = 0.0;
      for (double v : w) mu += v;
      out.step_mean_omega[t] = mu / static_cast<double>(w.size());
      if (cfg.penalty_weight != 0.0) loss = ops::add(loss, ops::scale(pen, cfg.penalty_weight));
      r = *res.next;
    } else {
      out.step_mean_omega[t] = 1.0;
    }
    out.step_loss.push_back(loss);
    total = total ? ops::add(*total, loss) : loss;
    ++out.active_steps;
  }
  if (!total) throw ConfigError("window_loss: window has no active steps");
  out.total = *total;
  return out;
}

double learning_rate(const TrainConfig& cfg, std::size_t step) {
  const std::size_t warm = cfg.warmup_steps();
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (cfg.steps <= warm + 1) return cfg.lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(cfg.steps - 1 - warm);
  return cfg.min_lr + (cfg.lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
}

double clip_grad_norm(std::span<double> grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

AdamW::AdamW(const ParamStore& params, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
  m_.assign(params.total_size(), 0.0);
  v_.assign(params.total_size(), 0.0);
  decay_.assign(params.total_size(), false);
  for (std::size_t i = 0; i < params.count(); ++i) {
    const auto& p = params.at(i);
    if (p.value.rank() == 2) std::fill_n(decay_.begin() + static_cast<std::ptrdiff_t>(p.offset), p.value.size(), true);
  }
}

void AdamW::step(ParamStore& params, std::span<const double> grad, double lr) {
  if (grad.size() != m_.size()) throw DimensionError("AdamW: gradient size does not match the parameters");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& p = params.at(i);
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const std::size_t j = p.offset + k;
      const double g = grad[j];
      m_[j] = beta1_ * m_[j] + (1.0 - beta1_) * g;
      v_[j] = beta2_ * v_[j] + (1.0 - beta2_) * g * g;
      double& w = p.value.data[k];
      if (decay_[j]) w -= lr * weight_decay_ * w;
      w -= lr * (m_[j] / c1) / (std::sqrt(v_[j] / c2) + eps_);
    }
  }
}

WindowRef sample_window(const TrainConfig& cfg, const Dataset& data, std::size_t step, std::size_t slot) {
  if (data.episodes.empty()) throw ConfigError("training set is empty");
  Rng rng(derive_seed(cfg.seed, "sampling", step, slot));
  WindowRef w;
  w.episode = rng.below(data.episodes.size());
  const std::size_t n = data.episodes[w.episode].steps.size();
  w.start = cfg.window_start == WindowStart::Uniform ? rng.below(n) : 0;
  return w;
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},         {"loss", m.loss},           {"loss_mae", m.loss_mae},
          {"loss_penalty", m.loss_penalty}, {"mean_omega", m.mean_omega}, {"grad_norm", m.grad_norm},
          {"lr", m.lr}};
}

TrainConfig effective_train_config(const TrainConfig& cfg, PolicyMode mode) {
  TrainConfig eff = cfg;
  if (mode == PolicyMode::Baseline) {
    eff.horizon = 1;
    eff.detach_boundaries.clear();
  }
  return eff;
}

namespace {

struct SlotResult {
  std::vector<double> grad;
  double loss = 0.0;
  double mae = 0.0;
  double penalty = 0.0;
  double mean_omega = 0.0;
  std::size_t active = 0;
};

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const Config& cfg, const TrainOptions& opts) {
  cfg.validate();
  const TrainConfig tc = effective_train_config(cfg.train, opts.mode);
  if (data.episodes.empty()) throw ConfigError("training set is empty");
  if (data.chunk_len != model.config().chunk_len) {
    throw ConfigError("dataset chunk length " + std::to_string(data.chunk_len) + " does not match the model's " +
                      std::to_string(model.config().chunk_len));
  }
  if (data.env.patch_count() != model.config().visual_tokens || data.env.patch_dim() != model.config().patch_dim) {
    throw ConfigError("dataset images do not match the model's visual token layout");
  }

  namespace fs = std::filesystem;
  std::ofstream metrics_out;
  if (!opts.out_dir.empty()) {
    std::error_code ec;
    fs::create_directories(opts.out_dir, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir + ": " + ec.message());
    const auto path = fs::path(opts.out_dir) / "metrics.jsonl";
    metrics_out.open(path, std::ios::trunc);
    if (!metrics_out) throw IoError("cannot write " + path.string());
  }

  Checkpoint meta;
  meta.config = cfg;
  meta.config.train = tc;
  meta.mode = opts.mode;
  const auto write_ckpt = [&](std::size_t step, bool latest) {
    if (opts.out_dir.empty()) return std::string();
    meta.step = step;
    const auto bytes = encode_checkpoint(model, meta);
    const auto path = (fs::path(opts.out_dir) / ("ckpt_" + std::to_string(step) + ".bin")).string();
    binio::write_file(path, bytes);
    if (latest) binio::write_file((fs::path(opts.out_dir) / "ckpt_latest").string(), bytes);
    return path;
  };

  ParamStore& params = model.params();
  AdamW opt(params, tc);
  const std::size_t batch = tc.batch_size;
  const std::size_t threads = std::max<std::size_t>(1, opts.threads);
  std::vector<SlotResult> slots(batch);
  std::vector<double> grad(params.total_size());
  TrainResult result;
  result.metrics.reserve(tc.steps);

  for (std::size_t s = 0; s < tc.steps; ++s) {
    parallel_for(batch, threads, [&](std::size_t b) {
      SlotResult& slot = slots[b];
      const WindowRef ref = sample_window(tc, data, s, b);
      const Window w = make_window(data.episodes[ref.episode], data.env, ref.start, tc.horizon);
      Tape tape;
      WindowOptions wo;
      wo.mode = opts.mode;
      WindowLoss wl = window_loss(tape, model, w, tc, wo);
      slot.loss = wl.total.value()[0];
      slot.active = wl.active_steps;
      slot.mae = slot.penalty = slot.mean_omega = 0.0;
      for (std::size_t t = 0; t < wl.active_steps; ++t) {
        slot.mae += wl.step_mae[t];
        slot.penalty += wl.step_penalty[t];
        slot.mean_omega += wl.step_mean_omega[t];
      }
      slot.grad.assign(params.total_size(), 0.0);
      if (std::isfinite(slot.loss)) {
        tape.backward(wl.total);
        tape.export_param_grads(slot.grad);
      }
    });

    StepMetrics m;
    m.step = s;
    m.mean_omega = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    std::size_t active = 0;
    for (std::size_t b = 0; b < batch; ++b) {
      const SlotResult& slot = slots[b];
      if (!std::isfinite(slot.loss) || !all_finite(slot.grad)) {
        const WindowRef ref = sample_window(tc, data, s, b);
        std::ostringstream msg;
        msg << "non-finite " << (std::isfinite(slot.loss) ? "gradient" : "loss") << " at step " << s << ", window "
            << b << " (sampling seed " << derive_seed(tc.seed, "sampling", s, b) << ", episode seed "
            << data.episodes[ref.episode].seed << ", start " << ref.start << ")";
        throw NumericError(msg.str());
      }
      m.loss += slot.loss;
      m.loss_mae += slot.mae;
      m.loss_penalty += slot.penalty;
      m.mean_omega += slot.mean_omega;
      active += slot.active;
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += slot.grad[i];
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    for (double& g : grad) g *= inv_b;
    m.loss *= inv_b;
    m.loss_mae /= static_cast<double>(active);
    m.loss_penalty /= static_cast<double>(active);
    m.mean_omega /= static_cast<double>(active);
    m.grad_norm = clip_grad_norm(grad, tc.grad_clip);
    m.lr = learning_rate(tc, s);
    opt.step(params, grad, m.lr);
    result.metrics.push_back(m);

    if (metrics_out.is_open()) {
      metrics_out << to_json(m).dump() << "\n";
      metrics_out.flush();
      if (!metrics_out) throw IoError("metrics write failed");
    }
    if (opts.log && opts.log_every > 0 && (s % opts.log_every == 0 || s + 1 == tc.steps)) {
      *opts.log << "step " << s << " loss " << m.loss << " mae " << m.loss_mae << " mu(omega) " << m.mean_omega
                << " lr " << m.lr << "\n";
    }
    const std::size_t done = s + 1;
    if (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done != tc.steps) write_ckpt(done, true);
  }
  result.final_checkpoint = write_ckpt(tc.steps, true);
  return result;
}

}  // namespace ava
