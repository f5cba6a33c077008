#include "imnet/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include "imnet/csv.hpp"

namespace imnet {

namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

WiringSpec placement_from_string(const std::string& s, int n_layers, EulerConfig e) {
  if (s == "monotone") return WiringSpec::uniform(ConnectionMode::monotone, n_layers, e);
  if (s == "explicit") return WiringSpec::uniform(ConnectionMode::explicit_euler, n_layers, e);
  if (s == "implicit") return WiringSpec::uniform(ConnectionMode::implicit_euler, n_layers, e);
  const std::string prefix = "implicit:";
  if (s.rfind(prefix, 0) != 0)
    throw config_error("bad placement '" + s +
                       "' (want monotone | explicit | implicit | implicit:<ranges>)");
  Json spec{{"mode", "implicit"},
            {"layers", s.substr(prefix.size())},
            {"gamma", e.step_size},
            {"inner_iterations", e.inner_iterations},
            {"inner_lr", e.inner_lr},
            {"loss_without_gamma", e.loss_without_gamma}};
  return wiring_from_json(spec, n_layers);
}

std::vector<PerturbationSpec> eval_perturbations(const Json& doc, uint64_t seed) {
  std::vector<PerturbationSpec> out;
  for (const Json& pj : doc.at("eval").at("perturbations")) {
    PerturbationSpec p = perturbation_from_json(pj);
    if (p.seed == 0) p.seed = mix_seed(seed, "perturb_" + p.label());
    out.push_back(p);
  }
  return out;
}

// ---- stability ---------------------------------------------------------------

int cmd_stability(const Manifest& m, const fs::path& out) {
  const Json& sj = m.doc.at("stability");
  StabilityGrid grid = grid_from_json(sj.at("grid"));
  auto t0 = Clock::now();

  RegionScan ex = stability_region_scan(EulerMethod::explicit_euler, grid);
  RegionScan im = stability_region_scan(EulerMethod::implicit_euler, grid);
  double scan_s = seconds_since(t0);

  {
    std::ofstream f(out / "region_explicit.csv");
    write_region_csv(f, ex);
  }
  {
    std::ofstream f(out / "region_implicit.csv");
    write_region_csv(f, im);
  }

  t0 = Clock::now();
  std::vector<ErrorTrajectory> trajectories;
  for (const Json& tj : sj.at("trajectories")) {
    ModelEqParams p;
    p.lambda = tj.at("lambda").get<double>();
    p.gamma = tj.at("gamma").get<double>();
    p.eta = tj.at("eta").get<double>();
    p.steps = tj.at("steps").get<int>();
    std::string method = tj.at("method").get<std::string>();
    if (method == "explicit")
      trajectories.push_back(simulate_error_explicit(p));
    else if (method == "implicit")
      trajectories.push_back(simulate_error_implicit(p));
    else
      throw config_error("trajectory method must be 'explicit' or 'implicit'");
  }
  {
    std::ofstream f(out / "trajectories.csv");
    write_trajectory_csv(f, trajectories);
  }
  double traj_s = seconds_since(t0);

  auto mismatches = scan_mismatches(ex);
  auto im_mis = scan_mismatches(im);
  mismatches.insert(mismatches.end(), im_mis.begin(), im_mis.end());
  {
    std::ofstream f(out / "region_mismatches.csv");
    write_mismatch_csv(f, mismatches);
  }

  {
    CsvWriter t(out / "timings.csv", {"phase", "seconds"});
    t.row({"region_scan", fmt_double(scan_s)});
    t.row({"trajectories", fmt_double(traj_s)});
  }

  if (!mismatches.empty()) {
    std::cerr << "stability: " << mismatches.size()
              << " cell(s) disagree with the analytic region (see region_mismatches.csv)\n";
    for (size_t i = 0; i < mismatches.size() && i < 10; ++i) {
      const auto& d = mismatches[i];
      std::cerr << "  lambda=" << fmt_double(d.lambda) << " gamma=" << fmt_double(d.gamma)
                << " empirical=" << d.empirical << " analytic=" << d.analytic << "\n";
    }
    return 1;
  }
  return 0;
}

// ---- train_eval -----------------------------------------------------------------

std::vector<std::string> result_header() {
  return {"placement", "gamma", "inner_iterations", "run", "model_seed", "train_seed",
          "perturbation", "magnitude", "clean_accuracy", "perturbed_accuracy",
          "flops", "params", "fingerprint"};
}

// hash of the experiment identity: where it ran and how many workers it used
// do not change a single number, so they stay out of the fingerprint
std::string manifest_fingerprint(const Manifest& m) {
  Json doc = m.doc;
  doc.erase("out_dir");
  doc.erase("threads");
  return fingerprint_of(doc.dump());
}

int cmd_train_eval(const Manifest& m, const fs::path& out) {
  uint64_t seed = m.doc.at("seed").get<uint64_t>();
  EncoderConfig ec = encoder_from_json(m.doc.at("encoder"));
  SyntheticTask task = task_from_json(m.doc.at("task"));
  task.seed = mix_seed(seed, "task");
  TrainHyper hp = hyper_from_json(m.doc.at("train"));
  hp.seed = mix_seed(seed, "train", 0);
  WiringSpec wiring = wiring_from_json(m.doc.at("wiring"), ec.n_layers);
  int eval_batch = m.doc.at("eval").at("batch_size").get<int>();
  auto perts = eval_perturbations(m.doc, seed);
  std::string fp = manifest_fingerprint(m);

  if (ec.vocab_size < task.vocab_size) throw config_error("encoder vocab smaller than task vocab");
  if (ec.max_seq_len < task.seq_len) throw config_error("encoder max_seq_len smaller than task seq_len");

  auto [train_ds, eval_ds] = generate_task(task);
  ec.seed = mix_seed(seed, "model", 0);
  EncoderModel model = build_encoder(ec);

  auto t0 = Clock::now();
  TrainResult tr = train(model, wiring, train_ds, hp);
  double train_s = seconds_since(t0);

  {
    CsvWriter f(out / "loss_curve.csv", {"epoch", "train_loss", "val_loss"});
    for (size_t e = 0; e < tr.train_loss.size(); ++e)
      f.row({fmt_int(static_cast<int64_t>(e + 1)), fmt_double(tr.train_loss[e]),
             e < tr.val_loss.size() ? fmt_double(tr.val_loss[e]) : ""});
  }

  t0 = Clock::now();
  CsvWriter rf(out / "results.csv", result_header());
  auto emit = [&](const std::string& pert_label, double magnitude, const Metrics& met) {
    rf.row({wiring.name(), fmt_double(wiring.euler.step_size),
            fmt_int(wiring.euler.inner_iterations), "0", fmt_uint(ec.seed),
            fmt_uint(hp.seed), pert_label, fmt_double(magnitude),
            fmt_double(met.clean_accuracy), fmt_double(met.perturbed_accuracy),
            fmt_double(met.flops_forward), fmt_int(parameter_count(model)), fp});
  };
  Metrics clean = evaluate(model, wiring, eval_ds, {}, eval_batch, fp);
  emit("none", 0.0, clean);
  for (const PerturbationSpec& p : perts) {
    Metrics met = evaluate(model, wiring, eval_ds, p, eval_batch, fp);
    emit(to_string(p.kind), p.kind == PerturbKind::token_swap ? p.swap_fraction : p.epsilon, met);
  }
  double eval_s = seconds_since(t0);

  if (m.doc.at("save_checkpoint").get<bool>()) save_checkpoint(model, out / "checkpoint.bin");

  CsvWriter t(out / "timings.csv", {"phase", "seconds"});
  t.row({"train", fmt_double(train_s)});
  t.row({"eval", fmt_double(eval_s)});
  return 0;
}

// ---- ablation -------------------------------------------------------------------

int cmd_ablation(const Manifest& m, const fs::path& out) {
  uint64_t seed = m.doc.at("seed").get<uint64_t>();
  AblationConfig cfg;
  cfg.encoder = encoder_from_json(m.doc.at("encoder"));
  cfg.task = task_from_json(m.doc.at("task"));
  cfg.task.seed = mix_seed(seed, "task");
  cfg.hyper = hyper_from_json(m.doc.at("train"));
  cfg.perturbations = eval_perturbations(m.doc, seed);
  cfg.n_runs = m.doc.at("ablation").at("n_runs").get<int>();
  cfg.subsample_train = m.doc.at("ablation").at("subsample_train").get<int>();
  cfg.threads = m.doc.at("threads").get<int>();
  cfg.seed = seed;
  cfg.eval_batch = m.doc.at("eval").at("batch_size").get<int>();

  EulerConfig e = euler_from_json(m.doc.at("wiring"));
  std::vector<WiringSpec> placements;
  for (const Json& pj : m.doc.at("ablation").at("placements")) {
    if (!pj.is_string()) throw config_error("ablation placements must be strings");
    placements.push_back(placement_from_string(pj.get<std::string>(), cfg.encoder.n_layers, e));
  }
  std::string fp = manifest_fingerprint(m);

  auto [cells, summaries] = run_ablation(placements, cfg);

  {
    CsvWriter rf(out / "results.csv", result_header());
    for (const AblationCell& c : cells) {
      rf.row({c.placement, fmt_double(e.step_size), fmt_int(e.inner_iterations),
              fmt_int(c.run_index), fmt_uint(c.model_seed),
              fmt_uint(c.train_seed), "none", fmt_double(0.0),
              fmt_double(c.clean), fmt_double(c.clean), fmt_double(c.flops),
              fmt_int(c.params), fp});
      for (auto& [label, acc] : c.perturbed) {
        auto colon = label.find(':');
        rf.row({c.placement, fmt_double(e.step_size), fmt_int(e.inner_iterations),
                fmt_int(c.run_index), fmt_uint(c.model_seed),
                fmt_uint(c.train_seed), label.substr(0, colon),
                label.substr(colon + 1), fmt_double(c.clean), fmt_double(acc),
                fmt_double(c.flops), fmt_int(c.params), fp});
      }
    }
  }
  {
    CsvWriter sf(out / "summary.csv",
                 {"placement", "metric", "mean", "spread", "flops", "params"});
    for (const AblationSummary& s : summaries) {
      sf.row({s.placement, "clean_accuracy", fmt_double(s.clean_mean), fmt_double(s.clean_sd),
              fmt_double(s.flops), fmt_int(s.params)});
      for (auto& [label, mean, sd] : s.perturbed)
        sf.row({s.placement, label, fmt_double(mean), fmt_double(sd), fmt_double(s.flops),
                fmt_int(s.params)});
    }
  }
  {
    // human-readable ranking by mean accuracy under perturbation
    std::vector<size_t> order(summaries.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto score = [&](size_t i) {
      const AblationSummary& s = summaries[i];
      if (s.perturbed.empty()) return s.clean_mean;
      double total = 0;
      for (auto& [label, mean, sd] : s.perturbed) total += mean;
      return total / static_cast<double>(s.perturbed.size());
    };
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      double sa = score(a), sb = score(b);
      return sa != sb ? sa > sb : summaries[a].placement < summaries[b].placement;
    });
    std::ofstream f(out / "summary.txt");
    f << "placements ranked by mean perturbed accuracy (clean in parentheses)\n";
    for (size_t rank = 0; rank < order.size(); ++rank) {
      const AblationSummary& s = summaries[order[rank]];
      f << rank + 1 << ". " << s.placement << "  " << fmt_double(score(order[rank])) << "  ("
        << fmt_double(s.clean_mean) << " clean, " << fmt_double(s.flops) << "x flops)\n";
    }
  }
  {
    CsvWriter t(out / "timings.csv", {"placement", "run", "train_seconds", "eval_seconds"});
    for (const AblationCell& c : cells)
      t.row({c.placement, fmt_int(c.run_index), fmt_double(c.train_seconds),
             fmt_double(c.eval_seconds)});
  }
  return 0;
}

// ---- tsweep ----------------------------------------------------------------------

int cmd_tsweep(const Manifest& m, const fs::path& out) {
  uint64_t seed = m.doc.at("seed").get<uint64_t>();
  EncoderConfig ec = encoder_from_json(m.doc.at("encoder"));
  SyntheticTask task = task_from_json(m.doc.at("task"));
  task.seed = mix_seed(seed, "task");
  TrainHyper hp = hyper_from_json(m.doc.at("train"));
  EulerConfig e = euler_from_json(m.doc.at("wiring"));
  int n_runs = m.doc.at("tsweep").at("n_runs").get<int>();
  if (n_runs < 1) throw config_error("tsweep n_runs must be >= 1");
  int eval_batch = m.doc.at("eval").at("batch_size").get<int>();
  auto perts = eval_perturbations(m.doc, seed);
  std::string fp = manifest_fingerprint(m);

  if (ec.vocab_size < task.vocab_size) throw config_error("encoder vocab smaller than task vocab");
  if (ec.max_seq_len < task.seq_len) throw config_error("encoder max_seq_len smaller than task seq_len");
  auto [train_ds, eval_ds] = generate_task(task);

  CsvWriter rf(out / "results.csv",
               {"t_iterations", "run", "model_seed", "train_seed", "perturbation", "magnitude",
                "clean_accuracy", "perturbed_accuracy", "flops", "flops_num", "flops_den",
                "params", "fingerprint"});
  CsvWriter tf(out / "timings.csv", {"t_iterations", "run", "train_seconds", "eval_seconds"});

  for (const Json& tj : m.doc.at("tsweep").at("t_values")) {
    if (!tj.is_number_integer()) throw config_error("tsweep t_values must be integers");
    int t_val = tj.get<int>();
    EulerConfig et = e;
    et.inner_iterations = t_val;
    WiringSpec wiring = WiringSpec::uniform(ConnectionMode::implicit_euler, ec.n_layers, et);
    auto [num, den] = count_flops_ratio(wiring);
    for (int run = 0; run < n_runs; ++run) {
      // seeds depend on the run only, so duplicate T entries reproduce rows
      EncoderConfig ecr = ec;
      ecr.seed = mix_seed(seed, "model", static_cast<uint64_t>(run));
      TrainHyper hpr = hp;
      hpr.seed = mix_seed(seed, "train", static_cast<uint64_t>(run));
      EncoderModel model = build_encoder(ecr);
      auto t0 = Clock::now();
      TrainResult tr = train(model, wiring, train_ds, hpr);
      double train_s = seconds_since(t0);
      (void)tr;
      t0 = Clock::now();
      Metrics clean = evaluate(model, wiring, eval_ds, {}, eval_batch, fp);
      auto emit = [&](const std::string& label, double mag, const Metrics& met) {
        rf.row({fmt_int(t_val), fmt_int(run), fmt_uint(ecr.seed),
                fmt_uint(hpr.seed), label, fmt_double(mag),
                fmt_double(met.clean_accuracy), fmt_double(met.perturbed_accuracy),
                fmt_double(met.flops_forward), fmt_int(num), fmt_int(den),
                fmt_int(parameter_count(model)), fp});
      };
      emit("none", 0.0, clean);
      for (const PerturbationSpec& p : perts) {
        Metrics met = evaluate(model, wiring, eval_ds, p, eval_batch, fp);
        emit(to_string(p.kind), p.kind == PerturbKind::token_swap ? p.swap_fraction : p.epsilon,
             met);
      }
      tf.row({fmt_int(t_val), fmt_int(run), fmt_double(train_s), fmt_double(seconds_since(t0))});
    }
  }
  return 0;
}

// ---- flops ----------------------------------------------------------------------

int cmd_flops(const Manifest& m, const fs::path& out) {
  auto t0 = std::chrono::steady_clock::now();
  const Json& fj = m.doc.at("flops");
  int n_layers = fj.at("n_layers").get<int>();
  if (n_layers < 1) throw config_error("flops n_layers must be >= 1");
  double gamma = fj.at("gamma").get<double>();
  CsvWriter rf(out / "flops.csv",
               {"placement", "n_layers", "implicit_layers", "t_iterations", "flops_num",
                "flops_den", "flops"});
  for (const Json& pj : fj.at("placements")) {
    if (!pj.is_string()) throw config_error("flops placements must be strings");
    for (const Json& tj : fj.at("t_values")) {
      if (!tj.is_number_integer()) throw config_error("flops t_values must be integers");
      EulerConfig e;
      e.step_size = gamma;
      e.inner_iterations = tj.get<int>();
      WiringSpec w = placement_from_string(pj.get<std::string>(), n_layers, e);
      auto [num, den] = count_flops_ratio(w);
      rf.row({w.name(), fmt_int(n_layers), fmt_int(w.implicit_layer_count()),
              fmt_int(e.inner_iterations), fmt_int(num), fmt_int(den),
              fmt_double(static_cast<double>(num) / static_cast<double>(den))});
    }
  }
  CsvWriter t(out / "timings.csv", {"phase", "seconds"});
  t.row({"table", fmt_double(std::chrono::duration<double>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count())});
  return 0;
}

}  // namespace

int run_command(Manifest m, const std::string& out_override) {
  try {
    std::string dir = out_override;
    if (dir.empty()) dir = m.doc.at("out_dir").get<std::string>();
    if (dir.empty()) {
      const char* root = std::getenv("IMNET_OUT");
      dir = (root && *root ? std::string(root) : std::string("runs")) + "/" + m.command;
    }
    m.doc["out_dir"] = dir;  // bake the destination in so replays match
    fs::path out(dir);
    fs::create_directories(out);
    write_manifest(m, out / "manifest.resolved.json");

    if (m.command == "stability") return cmd_stability(m, out);
    if (m.command == "train_eval") return cmd_train_eval(m, out);
    if (m.command == "ablation") return cmd_ablation(m, out);
    if (m.command == "tsweep") return cmd_tsweep(m, out);
    if (m.command == "flops") return cmd_flops(m, out);
    throw config_error("unknown command '" + m.command + "'");
  } catch (const numeric_divergence_error& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return 3;
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const usage_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const dimension_error& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 2;
  } catch (const Json::exception& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace imnet
