// SPDX-License-Identifier: Apache-2.0

#include "ava/app.h"

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "ava/checkpoint.h"
#include "ava/dataset.h"
#include "ava/evaluation.h"
#include "ava/gradcheck.h"
#include "ava/parallel.h"
#include "ava/training.h"

namespace ava {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Overrides {
  std::map<std::string, std::string> values;

  void attach(CLI::App& cmd) {
    auto* group = cmd.add_option_group("Config overrides", "Any configuration leaf, e.g. --train.lr 1e-3");
    for (const auto& key : config_keys()) group->add_option("--" + key, values[key]);
  }

  void apply(json& doc) const {
    for (const auto& [k, v] : values) {
      if (!v.empty()) apply_override(doc, k, v);
    }
  }
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + " is not valid JSON: " + e.what());
  }
}

// Base document (file or empty), then dotted flags on top.
Config resolve_config(const std::string& path, const Overrides& ov, const json& base = json::object()) {
  json doc = path.empty() ? base : read_json_file(path);
  ov.apply(doc);
  Config c = config_from_json(doc);
  c.validate();
  return c;
}

void prepare_out_dir(const std::string& dir, bool force) {
  if (dir.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec) && !force) {
    throw ConfigError("refusing to overwrite " + dir + " (pass --force)");
  }
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

struct Manifest {
  json doc;

  Manifest(const std::string& command, const std::vector<std::string>& argv) {
    doc = {{"tool", "ava_vla"},
           {"version", AVA_VERSION},
           {"command", command},
           {"argv", argv},
           {"formats", {{"dataset", kDatasetVersion}, {"checkpoint", kCheckpointVersion}}},
           {"started", timestamp()},
           {"outputs", json::array()}};
  }

  void write(const std::string& dir) {
    doc["finished"] = timestamp();
    const auto path = fs::path(dir) / "manifest.json";
    std::ofstream out(path, std::ios::trunc);
    out << doc.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path.string());
  }
};

std::string percent_tag(double ratio) {
  std::ostringstream s;
  s << std::lround(ratio * 100.0);
  return s.str();
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Recurrent soft-attention VLA policy on a toy occluded-reach task"};
  app.set_version_flag("--version", std::string("ava_vla ") + AVA_VERSION);
  app.require_subcommand(1);
  std::size_t threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: AVA_THREADS or 1)");
  const std::vector<std::string> args(argv, argv + argc);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate expert train/eval splits");
  std::string gen_config, gen_out;
  std::optional<std::size_t> gen_episodes, gen_eval_episodes;
  std::optional<std::uint64_t> gen_seed;
  bool gen_force = false, gen_export = false;
  Overrides gen_ov;
  gen->add_option("--config", gen_config, "JSON configuration file");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--episodes", gen_episodes, "Training episodes");
  gen->add_option("--eval-episodes", gen_eval_episodes, "Held-out episodes");
  gen->add_option("--seed", gen_seed, "Data seed");
  gen->add_flag("--export", gen_export, "Also write per-episode files under <out>/episodes");
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output directory");
  gen_ov.attach(*gen);

  // train
  auto* tr = app.add_subcommand("train", "Train a policy on a generated dataset");
  std::string tr_config, tr_data, tr_out, tr_mode = "ava";
  std::optional<std::uint64_t> tr_seed;
  bool tr_force = false;
  Overrides tr_ov;
  tr->add_option("--config", tr_config, "JSON configuration file");
  tr->add_option("--data", tr_data, "Dataset directory from gen-data")->required();
  tr->add_option("--mode", tr_mode, "baseline or ava")->check(CLI::IsMember({"baseline", "ava"}));
  tr->add_option("--out", tr_out, "Run directory")->required();
  tr->add_option("--seed", tr_seed, "Training seed (init and sampling)");
  tr->add_flag("--force", tr_force, "Overwrite a non-empty run directory");
  tr_ov.attach(*tr);

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of the window loss gradient");
  std::string gc_config;
  std::uint64_t gc_seed = 0;
  double gc_step = 4e-3;
  bool gc_corrupt = false;
  Overrides gc_ov;
  gc->add_option("--config", gc_config, "JSON configuration file (default: built-in micro config)");
  gc->add_option("--seed", gc_seed, "Initialization and input seed");
  gc->add_option("--fd-step", gc_step, "Finite-difference step");
  gc->add_flag("--corrupt-adjoint", gc_corrupt, "Perturb one analytic gradient (negative control)");
  gc_ov.attach(*gc);

  // eval
  auto* ev = app.add_subcommand("eval", "Closed-loop evaluation, pruning sweep and weight export");
  std::string ev_ckpt, ev_data, ev_out, ev_export, ev_prune_mode = "hard", ev_tag;
  std::vector<double> ev_ratios = {0.0};
  std::optional<std::size_t> ev_episodes;
  bool ev_force = false, ev_focus = false;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Dataset directory from gen-data")->required();
  ev->add_option("--out", ev_out, "Report directory")->required();
  ev->add_option("--prune-ratio", ev_ratios, "Comma-separated pruning ratios")->delimiter(',');
  ev->add_option("--prune-mode", ev_prune_mode, "hard or soft")->check(CLI::IsMember({"hard", "soft"}));
  ev->add_option("--export-weights", ev_export, "Directory for omega CSV and PGM maps");
  ev->add_option("--episodes", ev_episodes, "Evaluate only the first N held-out seeds");
  ev->add_option("--tag", ev_tag, "Report name prefix (default: checkpoint mode)");
  ev->add_flag("--focus", ev_focus, "Also report the step-0 target-patch top-2 rate");
  ev->add_flag("--force", ev_force, "Overwrite a non-empty report directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::size_t nthreads = resolve_threads(threads);
  try {
    if (*gen) {
      Config cfg = resolve_config(gen_config, gen_ov);
      if (gen_episodes) cfg.env.train_episodes = *gen_episodes;
      if (gen_eval_episodes) cfg.env.eval_episodes = *gen_eval_episodes;
      if (gen_seed) cfg.env.seed = *gen_seed;
      if (cfg.env.train_episodes == 0 || cfg.env.eval_episodes == 0) {
        throw ConfigError("episode counts must be positive");
      }
      cfg.validate();
      prepare_out_dir(gen_out, gen_force);
      Manifest manifest("gen-data", args);
      manifest.doc["config"] = to_json(cfg);
      manifest.doc["seed"] = cfg.env.seed;
      for (Split split : {Split::Train, Split::Eval}) {
        const bool is_train = split == Split::Train;
        const Dataset data = generate_dataset(cfg.env, cfg.model.chunk_len, split,
                                              is_train ? cfg.env.train_episodes : cfg.env.eval_episodes, nthreads);
        const std::string name = is_train ? "train" : "eval";
        const auto path = (fs::path(gen_out) / (name + ".bin")).string();
        save_dataset(data, path);
        const DatasetStats st = dataset_stats(data);
        out << name << ": " << st.episodes << " episodes, expert-feasible " << st.feasible_rate
            << ", mean start-target distance " << st.mean_start_distance << "\n";
        manifest.doc["outputs"].push_back(path);
        manifest.doc["stats"][name] = {{"episodes", st.episodes},
                                       {"feasible_rate", st.feasible_rate},
                                       {"mean_start_distance", st.mean_start_distance}};
        if (gen_export) export_episodes(data, (fs::path(gen_out) / "episodes" / name).string());
      }
      std::ofstream(fs::path(gen_out) / "config.json") << to_json(cfg).dump(2) << "\n";
      manifest.write(gen_out);
      return kExitOk;
    }

    if (*tr) {
      const PolicyMode mode = policy_mode_from_string(tr_mode);
      const Dataset data = load_dataset((fs::path(tr_data) / "train.bin").string());
      json base = {{"env", to_json(data.env)}};
      Config cfg = resolve_config(tr_config, tr_ov, base);
      if (tr_seed) cfg.train.seed = *tr_seed;
      // the dataset fixes the environment
      cfg.env = data.env;
      cfg.sync_derived();
      cfg.validate();
      prepare_out_dir(tr_out, tr_force);
      Manifest manifest("train", args);
      const Config effective = [&] {
        Config c = cfg;
        c.train = effective_train_config(cfg.train, mode);
        return c;
      }();
      manifest.doc["config"] = to_json(effective);
      manifest.doc["mode"] = to_string(mode);
      manifest.doc["seed"] = cfg.train.seed;
      manifest.doc["threads"] = nthreads;
      Model model(cfg.model, cfg.train.seed);
      out << "training " << to_string(mode) << " policy, " << model.params().total_size() << " parameters, "
          << cfg.train.steps << " steps\n";
      TrainOptions opts;
      opts.mode = mode;
      opts.out_dir = tr_out;
      opts.threads = nthreads;
      opts.log = &out;
      const TrainResult res = train(model, data, cfg, opts);
      out << "checkpoint " << res.final_checkpoint << " (" << file_digest(res.final_checkpoint) << ")\n";
      manifest.doc["outputs"] = {res.final_checkpoint, (fs::path(tr_out) / "ckpt_latest").string(),
                                 (fs::path(tr_out) / "metrics.jsonl").string()};
      manifest.doc["checkpoint_digest"] = file_digest(res.final_checkpoint);
      manifest.write(tr_out);
      return kExitOk;
    }

    if (*gc) {
      const Config micro = micro_config();
      json base = {{"model", to_json(micro.model)}, {"train", to_json(micro.train)}, {"env", to_json(micro.env)}};
      Config cfg = resolve_config(gc_config, gc_ov, base);
      GradCheckOptions opts;
      opts.seed = gc_seed;
      opts.step = gc_step;
      opts.corrupt_adjoint = gc_corrupt;
      const auto t0 = std::chrono::steady_clock::now();
      const GradCheckReport rep = run_grad_check(cfg, opts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << std::left << std::setw(16) << "group" << std::setw(8) << "coords" << std::setw(14) << "max_rel_err"
          << "worst\n";
      for (const auto& g : rep.groups) {
        out << std::setw(16) << g.group << std::setw(8) << g.coordinates << std::setw(14) << std::setprecision(3)
            << g.max_rel_error << g.worst_param << "[" << g.worst_index << "] analytic " << std::setprecision(6)
            << g.analytic << " numeric " << g.numeric << "\n";
      }
      out << (rep.passed() ? "PASS" : "FAIL") << " (tolerance " << rep.tolerance << ", " << std::setprecision(3)
          << secs << " s)\n";
      return rep.passed() ? kExitOk : kExitCheckFailed;
    }

    if (*ev) {
      LoadedCheckpoint ck = load_checkpoint(ev_ckpt);
      const Dataset data = load_dataset((fs::path(ev_data) / "eval.bin").string());
      std::vector<std::uint64_t> seeds;
      for (const auto& ep : data.episodes) seeds.push_back(ep.seed);
      if (ev_episodes) seeds.resize(std::min(seeds.size(), *ev_episodes));
      for (double r : ev_ratios) {
        if (!(r >= 0.0 && r < 1.0)) throw ConfigError("prune ratios must lie in [0, 1)");
        if (r > 0.0 && ck.meta.mode != PolicyMode::Ava) {
          throw ConfigError("baseline checkpoints have no soft weights to prune by");
        }
      }
      prepare_out_dir(ev_out, ev_force);
      Manifest manifest("eval", args);
      manifest.doc["checkpoint"] = ev_ckpt;
      manifest.doc["checkpoint_digest"] = file_digest(ev_ckpt);
      manifest.doc["config"] = to_json(ck.meta.config);
      manifest.doc["seed"] = ck.meta.config.train.seed;
      const std::string tag = ev_tag.empty() ? to_string(ck.meta.mode) : ev_tag;
      const PruneMode pm = ev_prune_mode == "soft" ? PruneMode::SoftZero : PruneMode::HardRemove;
      for (double r : ev_ratios) {
        std::optional<PruneSpec> spec;
        if (r > 0.0) spec = PruneSpec{r, pm};
        const EvalReport rep = evaluate_model(ck.model, ck.meta.mode, data.env, seeds, spec, nthreads);
        const std::string name = tag + "_p" + percent_tag(r);
        json extra = {{"checkpoint", ev_ckpt}, {"mode", to_string(ck.meta.mode)}, {"prune_ratio", r},
                      {"prune_mode", ev_prune_mode}};
        if (spec) extra["retained_tokens"] = spec->retained_count(ck.model.config().visual_tokens);
        write_eval_report(rep, ev_out, name, extra);
        manifest.doc["outputs"].push_back((fs::path(ev_out) / ("eval_" + name + ".summary.json")).string());
        out << name << ": success " << rep.success_rate << " [" << rep.ci_low << ", " << rep.ci_high
            << "], mean final distance " << rep.mean_final_distance;
        if (rep.mean_omega) out << ", mean omega " << *rep.mean_omega;
        out << "\n";
      }
      if (ev_focus) {
        if (ck.meta.mode != PolicyMode::Ava) throw ConfigError("--focus needs an ava checkpoint");
        const double rate = attention_focus_rate(ck.model, data.env, seeds);
        out << "target patch in top-2 omega at step 0: " << rate << "\n";
        manifest.doc["focus_rate"] = rate;
      }
      if (!ev_export.empty()) {
        if (ck.meta.mode != PolicyMode::Ava) throw ConfigError("baseline checkpoints have no soft weights to export");
        export_weight_maps(ck.model, data.env, seeds, ev_export);
        manifest.doc["outputs"].push_back(ev_export);
      }
      manifest.write(ev_out);
      return kExitOk;
    }
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ava
