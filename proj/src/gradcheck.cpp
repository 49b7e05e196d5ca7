// SPDX-License-Identifier: Apache-2.0

#include "ava/gradcheck.h"

#include <algorithm>
#include <cmath>

#include "ava/model.h"
#include "ava/rng.h"
#include "ava/training.h"

namespace ava {

Config micro_config() {
  Config c;
  c.env.grid = 8;
  c.env.patch = 4;
  c.env.train_episodes = 4;
  c.env.eval_episodes = 4;
  c.model.embed_dim = 16;
  c.model.ava_dim = 8;
  c.model.chunk_len = 2;
  c.model.action_dim = 2;
  c.model.layers = 2;
  c.model.heads = 2;
  c.model.ffn_hidden = 32;
  c.train.horizon = 4;
  c.train.detach_boundaries = {2};
  c.sync_derived();
  return c;
}

bool GradCheckReport::passed() const {
  return !groups.empty() && std::all_of(groups.begin(), groups.end(), [&](const GroupCheck& g) {
    return g.coordinates > 0 && g.max_rel_error < tolerance;
  });
}

namespace {

std::string group_of(const std::string& name) {
  const auto dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

double objective(const Model& model, const Window& w, const TrainConfig& tc, const std::vector<Tensor>& boundary) {
  Tape tape(false);
  WindowOptions wo;
  wo.inject = &boundary;
  return window_loss(tape, model, w, tc, wo).total.value()[0];
}

GroupCheck check_group(Model& model, const Window& w, const TrainConfig& tc, const std::string& group,
                       const std::string& label, const GradCheckOptions& opts) {
  Tape tape;
  std::vector<Tensor> boundary;
  WindowOptions wo;
  wo.record = &boundary;
  WindowLoss wl = window_loss(tape, model, w, tc, wo);
  tape.backward(wl.total);
  ParamStore& params = model.params();
  std::vector<double> analytic(params.total_size(), 0.0);
  tape.export_param_grads(analytic);

  GroupCheck out;
  out.group = label;
  bool corrupted = false;
  const double h = opts.step;
  for (std::size_t i = 0; i < params.count(); ++i) {
    Parameter& p = params.at(i);
    if (group_of(p.name) != group) continue;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      double a = analytic[p.offset + k];
      if (opts.corrupt_adjoint && !corrupted) {
        a = a * 1.01 + 1e-3;
        corrupted = true;
      }
      const double x = p.value.data[k];
      const auto f = [&](double dx) {
        p.value.data[k] = x + dx;
        return objective(model, w, tc, boundary);
      };
      // sixth-order central stencil
      const double n =
          (f(3 * h) - 9 * f(2 * h) + 45 * f(h) - 45 * f(-h) + 9 * f(-2 * h) - f(-3 * h)) / (60 * h);
      p.value.data[k] = x;
      const double e = relative_error(a, n);
      ++out.coordinates;
      if (e > out.max_rel_error || out.coordinates == 1) {
        out.max_rel_error = e;
        out.worst_param = p.name;
        out.worst_index = k;
        out.analytic = a;
        out.numeric = n;
      }
    }
  }
  return out;
}

}  // namespace

GradCheckReport run_grad_check(const Config& cfg, const GradCheckOptions& opts) {
  cfg.validate();
  if (opts.step < 1e-7 || opts.step > 1e-2) throw ConfigError("finite-difference step must lie in [1e-7, 1e-2]");
  Model model(cfg.model, opts.seed);
  // Fresh biases are zero, which puts layer norms fed by the zero window-start
  // state at zero variance; check at a generic point instead.
  Rng jitter(derive_seed(opts.seed, "gradcheck.jitter"));
  for (std::size_t i = 0; i < model.params().count(); ++i) {
    Parameter& p = model.params().at(i);
    if (p.value.rank() != 1) continue;
    for (auto& v : p.value.data) v += jitter.uniform(-0.2, 0.2);
  }
  EnvConfig env = cfg.env;
  env.seed = opts.seed;
  const Episode ep = generate_expert_episode(env, episode_seed(env, Split::Train, 0), cfg.model.chunk_len);
  Window w = make_window(ep, env, 0, cfg.train.horizon);
  // Random targets keep the absolute-error terms away from their kinks.
  Rng rng(derive_seed(opts.seed, "gradcheck.targets"));
  for (auto& st : w.steps) {
    for (auto& v : st.gt.data) v = rng.uniform(-0.9, 0.9);
  }

  GradCheckReport report;
  report.tolerance = opts.tolerance;
  for (const char* g : {"embed", "backbone", "ava", "recurrence", "head"}) {
    report.groups.push_back(check_group(model, w, cfg.train, g, g, opts));
  }
  TrainConfig no_penalty = cfg.train;
  no_penalty.penalty_weight = 0.0;
  report.groups.push_back(check_group(model, w, no_penalty, "ava", "ava_mask_only", GradCheckOptions{opts.seed, opts.step, opts.tolerance, false}));
  return report;
}

}  // namespace ava
