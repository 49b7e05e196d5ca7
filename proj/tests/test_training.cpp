// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ava/checkpoint.h"
#include "ava/gradcheck.h"
#include "ava/training.h"
#include "doctest.h"
#include "helpers.h"

using namespace ava;
using ava::testing::random_tensor;

namespace {

struct Fixture {
  Config cfg = micro_config();
  Dataset data;
  Fixture() {
    cfg.env.train_episodes = 6;
    data = generate_dataset(cfg.env, cfg.model.chunk_len, Split::Train, 6);
  }
  Window window(std::size_t ep = 0, std::size_t start = 0) const {
    return make_window(data.episodes[ep], data.env, start, cfg.train.horizon);
  }
};

std::string temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("ava_test_" + name);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("MAE chunk loss values") {
  Tape tape(false);
  Tensor gt({4, 2}, 0.25);
  CHECK(mae_chunk_loss(tape.constant(gt), tape.constant(gt)).value()[0] == 0.0);
  Tensor pred = gt;
  pred(2, 1) += 0.5;
  CHECK(mae_chunk_loss(tape.constant(pred), tape.constant(gt)).value()[0] == doctest::Approx(0.0625));
  CHECK_THROWS_AS(mae_chunk_loss(tape.constant(Tensor({2, 4})), tape.constant(gt)), DimensionError);
}

TEST_CASE("MAE chunk loss subgradient away from ties") {
  Rng rng(1);
  const Tensor gt = random_tensor({4, 2}, rng);
  Tensor pred = random_tensor({4, 2}, rng);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::fabs(pred[i] - gt[i]) < 0.05) pred[i] += 0.1;
  }
  const auto res = grad_check([&](Tape& t, std::span<const Var> x) { return mae_chunk_loss(x[0], t.constant(gt)); },
                              {pred});
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("weight penalty values and gradient") {
  Tape tape(false);
  CHECK(weight_penalty(tape.constant(Tensor({16}, 0.6)), 0.6).value()[0] == doctest::Approx(0.0));
  CHECK(weight_penalty(tape.constant(Tensor({16}, 1.0)), 0.6).value()[0] == doctest::Approx(0.16));
  CHECK(weight_penalty(tape.constant(Tensor({16}, 1.0)), 0.6, PenaltyForm::Absolute).value()[0] ==
        doctest::Approx(0.4));

  Rng rng(2);
  const Tensor w = random_tensor({8}, rng, 0.1, 1.9);
  Tape t2;
  Var leaf = t2.leaf(w);
  t2.backward(weight_penalty(leaf, 0.6));
  const double mu = std::accumulate(w.data.begin(), w.data.end(), 0.0) / 8.0;
  for (double g : t2.grad(leaf)) CHECK(g == doctest::Approx(2 * (mu - 0.6) / 8.0));
  CHECK(grad_check([](Tape&, std::span<const Var> x) { return weight_penalty(x[0], 0.6); }, {w}).max_rel_error < 1e-6);
}

TEST_CASE("windows pad the episode tail with masked steps") {
  Fixture f;
  const Window w = f.window(0, 6);
  REQUIRE(w.steps.size() == 4);
  CHECK(w.steps[0].active);
  CHECK(w.steps[1].active);
  CHECK_FALSE(w.steps[2].active);
  CHECK(w.steps[3].patches.data == w.steps[1].patches.data);
  CHECK_THROWS_AS(make_window(f.data.episodes[0], f.data.env, 8, 4), ConfigError);

  Model m(f.cfg.model, 1);
  Tape tape(false);
  const WindowLoss wl = window_loss(tape, m, w, f.cfg.train);
  CHECK(wl.active_steps == 2);
  CHECK(wl.step_mae[2] == 0.0);
}

TEST_CASE("window loss is the sum of per-step terms and linear in lambda") {
  Fixture f;
  Model m(f.cfg.model, 2);
  const Window w = f.window(1, 0);
  Tape t1(false), t2(false);
  TrainConfig tc = f.cfg.train;
  const WindowLoss a = window_loss(t1, m, w, tc);
  double expect = 0.0;
  for (std::size_t t = 0; t < 4; ++t) expect += a.step_mae[t] + tc.penalty_weight * a.step_penalty[t];
  CHECK(a.total.value()[0] == doctest::Approx(expect).epsilon(1e-12));
  tc.penalty_weight *= 2;
  const WindowLoss b = window_loss(t2, m, w, tc);
  const double pen = std::accumulate(a.step_penalty.begin(), a.step_penalty.end(), 0.0);
  CHECK(b.total.value()[0] - a.total.value()[0] == doctest::Approx(f.cfg.train.penalty_weight * pen).epsilon(1e-10));
}

TEST_CASE("without the penalty and soft weights a one-step window is the baseline MAE") {
  Fixture f;
  Model m(f.cfg.model, 3);
  TrainConfig tc = f.cfg.train;
  tc.horizon = 1;
  tc.penalty_weight = 0.0;
  const Window w = make_window(f.data.episodes[0], f.data.env, 0, 1);
  Tape t1(false), t2(false);
  WindowOptions base;
  base.mode = PolicyMode::Baseline;
  const double lb = window_loss(t1, m, w, tc, base).total.value()[0];
  // ava step with forced unit weights at the zero state
  StepOptions so;
  so.forced_omega = 1.0;
  const StepResult r = m.step(t2, w.steps[0].patches, w.steps[0].instruction, initial_state(t2, m.config()), so);
  const double la = mae_chunk_loss(r.chunk, t2.constant(w.steps[0].gt)).value()[0];
  CHECK(lb == la);
}

TEST_CASE("window loss gradients match finite differences") {
  const Config cfg = micro_config();
  GradCheckOptions opts;
  const GradCheckReport rep = run_grad_check(cfg, opts);
  REQUIRE(rep.groups.size() == 6);
  for (const auto& g : rep.groups) {
    INFO(g.group << " worst " << g.worst_param << "[" << g.worst_index << "] " << g.analytic << " vs " << g.numeric);
    CHECK(g.coordinates > 0);
    CHECK(g.max_rel_error < 1e-4);
  }
  CHECK(rep.passed());
}

TEST_CASE("a corrupted adjoint fails the check") {
  GradCheckOptions opts;
  opts.corrupt_adjoint = true;
  CHECK_FALSE(run_grad_check(micro_config(), opts).passed());
}

TEST_CASE("the detach boundary cuts the recurrent chain") {
  Fixture f;
  Model m(f.cfg.model, 4);
  const Window w = f.window(2, 0);
  // perturbing the step-0 observation, with boundary states held fixed, must
  // leave the losses after the boundary untouched
  Tape t0(false);
  std::vector<Tensor> boundary;
  WindowOptions rec;
  rec.record = &boundary;
  const WindowLoss ref = window_loss(t0, m, w, f.cfg.train, rec);
  REQUIRE(boundary.size() == 1);

  Window moved = w;
  for (auto& v : moved.steps[0].patches.data) v = 1.0 - v;
  Tape t1(false), t2(false);
  WindowOptions inj;
  inj.inject = &boundary;
  const WindowLoss held = window_loss(t1, m, moved, f.cfg.train, inj);
  const WindowLoss free = window_loss(t2, m, moved, f.cfg.train);
  CHECK(held.step_mae[0] != ref.step_mae[0]);
  CHECK(held.step_mae[2] == ref.step_mae[2]);
  CHECK(held.step_mae[3] == ref.step_mae[3]);
  // the undetached forward value still depends on step 0
  CHECK(free.step_mae[2] != ref.step_mae[2]);

}

TEST_CASE("late-step gradients do not cross the detach boundary") {
  Fixture f;
  Model m(f.cfg.model, 4);
  const Window w = f.window(2, 0);
  const auto late_grad = [&](const TrainConfig& tc, const std::vector<Tensor>* inject, std::vector<Tensor>* record) {
    Tape tape;
    WindowOptions o;
    o.inject = inject;
    o.record = record;
    const WindowLoss wl = window_loss(tape, m, w, tc, o);
    tape.backward(ops::add(wl.step_loss[2], wl.step_loss[3]));
    std::vector<double> g(m.params().total_size(), 0.0);
    tape.export_param_grads(g);
    return g;
  };
  std::vector<Tensor> boundary;
  const auto detached = late_grad(f.cfg.train, nullptr, &boundary);
  const auto constant = late_grad(f.cfg.train, &boundary, nullptr);
  CHECK(detached == constant);
  TrainConfig chained = f.cfg.train;
  chained.detach_boundaries.clear();
  const auto full = late_grad(chained, nullptr, nullptr);
  // without the cut, the chain into steps 0-1 adds state-MLP gradient
  const Parameter& p = m.params().get("recurrence.state_mlp.fc1.weight");
  double diff = 0.0;
  for (std::size_t k = 0; k < p.value.size(); ++k) diff += std::fabs(full[p.offset + k] - detached[p.offset + k]);
  CHECK(diff > 0.0);
  // shared parameters still receive gradient from the late steps
  const Parameter& h = m.params().get("head.mlp.fc2.weight");
  double head = 0.0;
  for (std::size_t k = 0; k < h.value.size(); ++k) head += std::fabs(detached[h.offset + k]);
  CHECK(head > 0.0);
}

TEST_CASE("window start uses the exact zero state") {
  Fixture f;
  Model m(f.cfg.model, 5);
  const Window w = f.window(0, 3);
  Tape t1(false), t2(false);
  const WindowLoss a = window_loss(t1, m, w, f.cfg.train);
  const StepResult r =
      m.step(t2, w.steps[0].patches, w.steps[0].instruction, initial_state(t2, m.config()), StepOptions{});
  CHECK(a.step_mae[0] == mae_chunk_loss(r.chunk, t2.constant(w.steps[0].gt)).value()[0]);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig tc;
  tc.steps = 3000;
  REQUIRE(tc.warmup_steps() == 300);
  CHECK(learning_rate(tc, 0) == doctest::Approx(5e-4 / 300));
  CHECK(learning_rate(tc, 299) == doctest::Approx(5e-4));
  CHECK(learning_rate(tc, 300) == doctest::Approx(5e-4));
  CHECK(learning_rate(tc, 2999) == doctest::Approx(1e-6));
  for (std::size_t s = 301; s < 3000; ++s) CHECK(learning_rate(tc, s) <= learning_rate(tc, s - 1));
}

TEST_CASE("global norm clipping") {
  std::vector<double> g = {6.0, 8.0};
  CHECK(clip_grad_norm(g, 1.0) == doctest::Approx(10.0));
  CHECK(g[0] == doctest::Approx(0.6));
  CHECK(g[1] == doctest::Approx(0.8));
  std::vector<double> small = {0.3, 0.4};
  clip_grad_norm(small, 1.0);
  CHECK(small[0] == 0.3);
}

TEST_CASE("AdamW first step and decoupled decay") {
  ParamStore store;
  store.add("w", Tensor::matrix({{1.0, -2.0}}));
  store.add("b", Tensor::vector({1.0}));
  TrainConfig tc;
  AdamW opt(store, tc);
  const std::vector<double> g = {0.5, -0.1, 2.0};
  opt.step(store, g, 0.1);
  // bias-corrected first step moves each coordinate by lr * sign(g)
  CHECK(store.get("w").value[0] == doctest::Approx(1.0 - 0.1 * 0.01 * 1.0 - 0.1).epsilon(1e-6));
  CHECK(store.get("w").value[1] == doctest::Approx(-2.0 + 0.1 * 0.01 * 2.0 + 0.1).epsilon(1e-6));
  CHECK(store.get("b").value[0] == doctest::Approx(1.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("window sampling is deterministic and covers every offset") {
  Fixture f;
  TrainConfig tc = f.cfg.train;
  std::vector<int> seen(8, 0);
  for (std::size_t s = 0; s < 50; ++s) {
    for (std::size_t b = 0; b < 8; ++b) {
      const WindowRef a = sample_window(tc, f.data, s, b), again = sample_window(tc, f.data, s, b);
      CHECK(a.episode == again.episode);
      CHECK(a.start == again.start);
      CHECK(a.episode < 6);
      seen[a.start]++;
    }
  }
  for (int c : seen) CHECK(c > 0);
  tc.window_start = WindowStart::EpisodeStart;
  CHECK(sample_window(tc, f.data, 3, 1).start == 0);
}

TEST_CASE("training is deterministic, thread-count independent and lowers the loss") {
  Fixture f;
  Config cfg = f.cfg;
  cfg.train.steps = 40;
  cfg.train.batch_size = 4;
  cfg.train.lr = 3e-3;
  cfg.train.checkpoint_every = 20;
  const std::string d1 = temp_dir("train1"), d2 = temp_dir("train2");
  Model m1(cfg.model, 0), m2(cfg.model, 0);
  TrainOptions o1;
  o1.out_dir = d1;
  TrainOptions o2 = o1;
  o2.out_dir = d2;
  o2.threads = 3;
  const TrainResult r1 = train(m1, f.data, cfg, o1);
  const TrainResult r2 = train(m2, f.data, cfg, o2);
  REQUIRE(r1.metrics.size() == 40);
  CHECK(m1.params().flatten() == m2.params().flatten());
  CHECK(file_digest(d1 + "/metrics.jsonl") == file_digest(d2 + "/metrics.jsonl"));
  CHECK(file_digest(r1.final_checkpoint) == file_digest(r2.final_checkpoint));
  CHECK(std::filesystem::exists(d1 + "/ckpt_20.bin"));
  CHECK(std::filesystem::exists(d1 + "/ckpt_40.bin"));
  CHECK(file_digest(d1 + "/ckpt_latest") == file_digest(d1 + "/ckpt_40.bin"));

  double first = 0, last = 0;
  for (std::size_t s = 0; s < 4; ++s) first += r1.metrics[s].loss;
  for (std::size_t s = 36; s < 40; ++s) last += r1.metrics[s].loss;
  CHECK(last < first);

  std::ifstream in(d1 + "/metrics.jsonl");
  std::string line;
  std::getline(in, line);
  const auto j = nlohmann::json::parse(line);
  for (const char* k : {"step", "loss", "loss_mae", "loss_penalty", "mean_omega", "grad_norm", "lr"}) CHECK(j.contains(k));
}

TEST_CASE("baseline training uses one-step windows and no penalty") {
  Fixture f;
  Config cfg = f.cfg;
  cfg.train.steps = 3;
  cfg.train.batch_size = 2;
  Model m(cfg.model, 0);
  TrainOptions o;
  o.mode = PolicyMode::Baseline;
  const TrainResult r = train(m, f.data, cfg, o);
  for (const auto& s : r.metrics) {
    CHECK(s.loss_penalty == 0.0);
    CHECK(s.mean_omega == 1.0);
    CHECK(s.loss == doctest::Approx(s.loss_mae));
  }
  CHECK(effective_train_config(cfg.train, PolicyMode::Baseline).horizon == 1);
}

TEST_CASE("penalty weight zero leaves only the MAE terms") {
  Fixture f;
  TrainConfig tc = f.cfg.train;
  tc.penalty_weight = 0.0;
  Model m(f.cfg.model, 6);
  Tape tape(false);
  const WindowLoss wl = window_loss(tape, m, f.window(3, 0), tc);
  const double mae = std::accumulate(wl.step_mae.begin(), wl.step_mae.end(), 0.0);
  CHECK(wl.total.value()[0] == doctest::Approx(mae).epsilon(1e-14));
  CHECK(std::accumulate(wl.step_penalty.begin(), wl.step_penalty.end(), 0.0) > 0.0);
}

TEST_CASE("non-finite parameters abort training with the window seed") {
  Fixture f;
  Config cfg = f.cfg;
  cfg.train.steps = 2;
  cfg.train.batch_size = 2;
  Model m(cfg.model, 0);
  m.params().get("head.mlp.fc2.bias").value[0] = NAN;
  CHECK_THROWS_WITH_AS(train(m, f.data, cfg, TrainOptions{}), doctest::Contains("sampling seed"), NumericError);
}
