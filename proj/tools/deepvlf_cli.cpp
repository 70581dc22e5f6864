// deepvlf_cli: train | eval | sweep | dynamics | gradcheck

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "deepvlf/config.hpp"

namespace fs = std::filesystem;
using namespace deepvlf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitGate = 4;

fs::path default_checkpoint(const RunConfig& c) { return c.checkpoint.empty() ? c.out_dir / "model.ckpt" : c.checkpoint; }

Checkpoint load_model(const RunConfig& c) {
  if (c.checkpoint.empty()) throw ConfigError("this verb needs --checkpoint (or run.checkpoint)");
  Checkpoint ck = load_checkpoint(c.checkpoint);
  if (!(ck.params.shape == c.shape)) {
    throw ConfigError("checkpoint " + c.checkpoint.string() + " does not match the configured [model] shape");
  }
  return ck;
}

void print_point(const OperatingPointResult& r) {
  std::printf("%s eta_f=%s threshold=%s sessions=%ld bler=%s [%s, %s] rate=%s tau=%s power=%s\n",
              to_string(r.variant).c_str(), format_value(r.eta_f_db).c_str(), format_value(r.threshold).c_str(),
              r.sessions, format_value(r.bler).c_str(), format_value(r.bler_ci.lo).c_str(),
              format_value(r.bler_ci.hi).c_str(), format_value(r.mean_rate).c_str(), format_value(r.mean_tau).c_str(),
              format_value(r.mean_power).c_str());
}

int run_train(const RunConfig& c) {
  const fs::path ckpt = default_checkpoint(c);
  std::ofstream log(c.out_dir / "train_log.jsonl");
  nlohmann::json meta{
      {"train_config", c.train_config().to_json()}, {"code_version", code_version()}, {"preset", c.preset}};
  try {
    const TrainResult r = train_from_config(c, &log, ckpt);
    save_checkpoint(ckpt, r.params, meta);
    std::printf("trained %d + %d steps, final loss %s, checkpoint %s\n", c.phase1_steps, c.phase2_steps,
                r.history.empty() ? "n/a" : format_value(r.history.back().loss).c_str(), ckpt.string().c_str());
  } catch (const TrainingDiverged& e) {
    meta["aborted"] = e.what();
    save_checkpoint(ckpt, e.last_good(), meta);
    std::fprintf(stderr, "train: %s; last good parameters saved to %s\n", e.what(), ckpt.string().c_str());
    return kExitRuntime;
  }
  return kExitOk;
}

int run_eval(const RunConfig& c) {
  const Checkpoint ck = load_model(c);
  EvalOptions opts;
  opts.batch = c.eval_batch;
  std::ofstream transcripts;
  if (c.transcripts) {
    transcripts.open(c.out_dir / "transcripts.jsonl");
    opts.transcripts = &transcripts;
  }
  const auto r = evaluate_operating_point(ck.params, c.protocol(), c.sessions, c.seed, opts);
  emit_results(c.out_dir / "results.csv", {r});
  print_point(r);
  return kExitOk;
}

int run_sweep(const RunConfig& c) {
  const Checkpoint ck = load_model(c);
  EvalOptions opts;
  opts.batch = c.eval_batch;
  const auto points = sweep_points(ck.params, c.protocol(), c.sweep_axis, c.sweep_values);
  const auto rows = sweep(points, c.sessions, c.seed, opts);
  emit_results(c.out_dir / "results.csv", rows);
  for (const auto& r : rows) print_point(r);
  return kExitOk;
}

int run_dynamics(const RunConfig& c) {
  const Checkpoint ck = load_model(c);
  const auto d = dynamics_experiment(ck.params, c.protocol(), c.dynamics_trials, c.dynamics_rounds, c.seed);
  emit_dynamics(c.out_dir / "dynamics.csv", d);

  std::ofstream kde_out(c.out_dir / "dynamics_kde.csv");
  kde_out << "# schema=deepvlf.dynamics_kde version=" << kResultsSchemaVersion << " trials=" << d.trials << '\n';
  kde_out << "round,pattern_index,x,density\n";
  for (int r = 0; r < d.rounds; ++r) {
    double lo = 0.0, hi = 0.0;
    for (const auto& v : d.samples[r]) {
      if (v.empty()) continue;
      lo = std::min(lo, *std::min_element(v.begin(), v.end()));
      hi = std::max(hi, *std::max_element(v.begin(), v.end()));
    }
    std::vector<double> grid(c.kde_points);
    for (int i = 0; i < c.kde_points; ++i) grid[i] = lo + (hi - lo) * i / (c.kde_points - 1);
    for (int j = 0; j < d.patterns; ++j) {
      const auto& v = d.samples[r][j];
      const auto dens = kde(v, grid, silverman_bandwidth(v));
      for (int i = 0; i < c.kde_points; ++i)
        kde_out << r + 1 << ',' << j << ',' << format_value(grid[i]) << ',' << format_value(dens[i]) << '\n';
    }
  }

  nlohmann::json summary{{"trials", d.trials}, {"rounds", d.rounds}, {"separation", d.separation}};
  std::ofstream(c.out_dir / "dynamics_summary.json") << summary.dump(2) << '\n';
  for (int r = 0; r < d.rounds; ++r) std::printf("round %d separation %s\n", r + 1, format_value(d.separation[r]).c_str());
  return kExitOk;
}

int run_gradcheck(const RunConfig& c) {
  GradientCheckConfig g;
  g.sessions = c.gradcheck_sessions;
  g.step = c.gradcheck_step;
  g.protocol = c.protocol();
  g.loss = LossSpec{1, c.train.theta, c.train.offset, 1e-12};
  double worst = 0.0;
  for (int d = 0; d < c.gradcheck_draws; ++d) {
    const auto params = gradcheck_draw(c.shape, derive_seed(c.seed, {static_cast<std::uint64_t>(d)}));
    g.seed = derive_seed(c.seed, {static_cast<std::uint64_t>(d), 1});
    const auto rep = gradient_check(params, g);
    std::printf("draw %d: max relative error %s over %zu parameters\n", d, format_value(rep.max_relative_error).c_str(),
                rep.checked);
    worst = std::max(worst, rep.max_relative_error);
  }
  const bool ok = worst < c.gradcheck_tolerance;
  std::printf("gradcheck %s: max relative error %s (gate %s)\n", ok ? "PASS" : "FAIL", format_value(worst).c_str(),
              format_value(c.gradcheck_tolerance).c_str());
  return ok ? kExitOk : kExitGate;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Variable-length feedback codes: training and evaluation"};
  app.require_subcommand(1, 1);
  std::optional<std::string> config_file;
  FlagOverrides flags;
  for (const char* verb : {"train", "eval", "sweep", "dynamics", "gradcheck"}) {
    auto* sub = app.add_subcommand(verb);
    sub->add_option("--config", config_file, "key=value config file with [sections]");
    sub->add_option("--seed", flags.seed, "master seed");
    sub->add_option("--checkpoint", flags.checkpoint, "checkpoint to load (train: to write)");
    sub->add_option("--out", flags.out_dir, "output directory");
    sub->add_option("--preset", flags.preset, "paper-R | paper-T | desk-R | desk-T | tiny");
    sub->add_option("--eta-f", flags.eta_f_db, "forward SNR in dB");
    sub->add_option("--eta-b", flags.eta_b_db, "feedback SNR in dB, or none for noiseless");
    sub->add_option("--gamma", flags.gamma, "receiver decoding threshold");
    sub->add_option("--gamma-t", flags.gamma_t, "transmitter confidence threshold");
    sub->add_option("--sessions", flags.sessions, "evaluation sessions (per point)");
    sub->add_option("--set", flags.assignments, "section.key=value override (repeatable)");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  RunConfig cfg;
  try {
    cfg = parse_config(verb, config_file ? std::optional<fs::path>(*config_file) : std::nullopt, flags);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s: config error: %s\n", verb.c_str(), e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: %s\n", verb.c_str(), e.what());
    return kExitConfig;
  }

  try {
    fs::create_directories(cfg.out_dir);
    write_manifest(cfg.out_dir / "manifest.ini", cfg);
    if (verb == "train") return run_train(cfg);
    if (verb == "eval") return run_eval(cfg);
    if (verb == "sweep") return run_sweep(cfg);
    if (verb == "dynamics") return run_dynamics(cfg);
    return run_gradcheck(cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "%s: config error: %s\n", verb.c_str(), e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: runtime error: %s\n", verb.c_str(), e.what());
    return kExitRuntime;
  }
}
