#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "imnet/commands.hpp"
#include "imnet/manifest.hpp"

using namespace imnet;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("imnet_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// a train_eval manifest small enough to finish in well under a second
Json tiny_train_doc() {
  Json user;
  user["command"] = "train_eval";
  user["encoder"] = {{"vocab_size", 40}, {"d_model", 8},      {"n_heads", 2},
                     {"n_layers", 2},    {"ffn_dim", 16},     {"max_seq_len", 8}};
  user["task"] = {{"vocab_size", 40}, {"train_size", 32}, {"eval_size", 16}};
  user["train"] = {{"epochs", 1}, {"batch_size", 8}};
  user["wiring"] = {{"mode", "monotone"}};
  user["eval"] = {{"perturbations", Json::array({Json{{"kind", "gaussian_embedding"},
                                                      {"epsilon", 0.5}}})}};
  return user;
}

}  // namespace

TEST_CASE("defaults exist for every command and resolve unchanged") {
  for (const std::string& cmd : {"stability", "train_eval", "ablation", "tsweep", "flops"}) {
    Manifest d = default_manifest(cmd);
    CHECK(d.command == cmd);
    CHECK(d.doc.at("command") == cmd);
    Manifest r = resolve_manifest(Json{{"command", cmd}});
    CHECK(r.doc == d.doc);
  }
  CHECK_THROWS_AS(default_manifest("simulate"), config_error);
  CHECK_THROWS_AS(resolve_manifest(Json{{"command", "simulate"}}), config_error);
  CHECK_THROWS_AS(resolve_manifest(Json::array()), config_error);
  CHECK_THROWS_AS(resolve_manifest(Json{{"seed", 1}}), config_error);  // no command
}

TEST_CASE("user values override defaults recursively") {
  Json user{{"command", "train_eval"},
            {"seed", 9},
            {"train", Json{{"epochs", 2}}},
            {"wiring", Json{{"gamma", 0.25}}}};
  Manifest m = resolve_manifest(user);
  CHECK(m.doc.at("seed") == 9);
  CHECK(m.doc.at("train").at("epochs") == 2);
  CHECK(m.doc.at("train").at("lr") == 3e-4);          // untouched default
  CHECK(m.doc.at("wiring").at("gamma") == 0.25);
  CHECK(m.doc.at("wiring").at("inner_iterations") == 5);
}

TEST_CASE("unknown keys are rejected with their dotted path") {
  Json user{{"command", "train_eval"}, {"trainn", Json{{"epochs", 2}}}};
  CHECK_THROWS_WITH_AS(resolve_manifest(user), doctest::Contains("trainn"), config_error);
  Json nested{{"command", "train_eval"}, {"train", Json{{"epoch", 2}}}};
  CHECK_THROWS_WITH_AS(resolve_manifest(nested), doctest::Contains("train.epoch"), config_error);
}

TEST_CASE("typed readers validate structure and values") {
  Manifest d = default_manifest("train_eval");
  CHECK(encoder_from_json(d.doc.at("encoder")).d_model == 32);
  CHECK(task_from_json(d.doc.at("task")).train_size == 2000);
  CHECK(hyper_from_json(d.doc.at("train")).epochs == 4);
  EulerConfig e = euler_from_json(d.doc.at("wiring"));
  CHECK(e.step_size == 0.1);
  CHECK(e.inner_iterations == 5);
  WiringSpec w = wiring_from_json(d.doc.at("wiring"), 6);
  CHECK(w.name() == "implicit");

  Json bad = d.doc.at("wiring");
  bad["mode"] = "leapfrog";
  CHECK_THROWS_AS(wiring_from_json(bad, 6), config_error);
  bad = d.doc.at("wiring");
  bad["gamma"] = -0.5;
  CHECK_THROWS_AS(wiring_from_json(bad, 6), config_error);

  // per-layer modes and implicit ranges
  Json mixed = d.doc.at("wiring");
  mixed["layers"] = Json::array({"monotone", "implicit", "monotone", "implicit", "monotone", "monotone"});
  WiringSpec wm = wiring_from_json(mixed, 6);
  CHECK(wm.per_layer[1] == ConnectionMode::implicit_euler);
  CHECK(wm.per_layer[0] == ConnectionMode::monotone);
  CHECK_THROWS_AS(wiring_from_json(mixed, 4), config_error);  // length mismatch

  Json ranged = d.doc.at("wiring");
  ranged["layers"] = "4-6";
  WiringSpec wr = wiring_from_json(ranged, 12);
  CHECK(wr.implicit_layer_count() == 3);
  CHECK(wr.name() == "layers_4-6");

  Json pj{{"kind", "token_swap"}, {"swap_fraction", 0.25}};
  PerturbationSpec p = perturbation_from_json(pj);
  CHECK(p.kind == PerturbKind::token_swap);
  CHECK(p.swap_fraction == 0.25);
  CHECK_THROWS_AS(perturbation_from_json(Json{{"kind", "token_swap"}, {"epslon", 1.0}}),
                  config_error);
}

TEST_CASE("grid readers accept geometric and linear scales") {
  Manifest d = default_manifest("stability");
  StabilityGrid g = grid_from_json(d.doc.at("stability").at("grid"));
  CHECK(g.lambdas.size() == 50);
  CHECK(g.gammas.size() == 50);
  CHECK(g.lambdas.front() == doctest::Approx(-0.5));
  CHECK(g.lambdas.back() == doctest::Approx(-4.0));

  Json lin = d.doc.at("stability").at("grid");
  lin["scale"] = "linear";
  lin["lambda_points"] = 3;
  StabilityGrid gl = grid_from_json(lin);
  CHECK(gl.lambdas[1] == doctest::Approx(-2.25));  // arithmetic midpoint

  Json bad = d.doc.at("stability").at("grid");
  bad["scale"] = "cubic";
  CHECK_THROWS_AS(grid_from_json(bad), config_error);
  bad = d.doc.at("stability").at("grid");
  bad["gamma_lo"] = -1.0;
  CHECK_THROWS_AS(grid_from_json(bad), config_error);
}

TEST_CASE("manifests round-trip through files") {
  TempDir dir;
  Manifest m = default_manifest("flops");
  write_manifest(m, dir.path / "m.json");
  Manifest back = load_manifest(dir.path / "m.json");
  CHECK(back.command == "flops");
  CHECK(back.doc == m.doc);
  CHECK_THROWS_AS(load_manifest(dir.path / "absent.json"), config_error);
  std::ofstream(dir.path / "broken.json") << "{ not json";
  CHECK_THROWS_AS(load_manifest(dir.path / "broken.json"), config_error);
}

TEST_CASE("flops command writes its table and succeeds") {
  TempDir dir;
  Manifest m = default_manifest("flops");
  CHECK(run_command(m, (dir.path / "out").string()) == 0);
  CHECK(fs::exists(dir.path / "out" / "flops.csv"));
  CHECK(fs::exists(dir.path / "out" / "manifest.resolved.json"));
  std::string csv = slurp(dir.path / "out" / "flops.csv");
  CHECK(csv.find("placement") != std::string::npos);
  CHECK(csv.find("implicit") != std::string::npos);

  // the resolved manifest carries the final out_dir for replay
  Manifest written = load_manifest(dir.path / "out" / "manifest.resolved.json");
  CHECK(written.doc.at("out_dir") == (dir.path / "out").string());
}

TEST_CASE("stability command verifies the default grid clean") {
  TempDir dir;
  Manifest m = default_manifest("stability");
  // shrink for speed: 12x12 cells, 200 steps
  m.doc["stability"]["grid"]["lambda_points"] = 12;
  m.doc["stability"]["grid"]["gamma_points"] = 12;
  int code = run_command(m, (dir.path / "out").string());
  CHECK(code == 0);
  for (const char* f : {"region_explicit.csv", "region_implicit.csv", "trajectories.csv",
                        "region_mismatches.csv", "timings.csv", "manifest.resolved.json"})
    CHECK(fs::exists(dir.path / "out" / f));
  // no mismatches: header line only
  std::string mm = slurp(dir.path / "out" / "region_mismatches.csv");
  CHECK(mm == "lambda_index,gamma_index,lambda,gamma,empirical,analytic\n");
}

TEST_CASE("train_eval command produces results and loss curves") {
  TempDir dir;
  Manifest m = resolve_manifest(tiny_train_doc());
  CHECK(run_command(m, (dir.path / "out").string()) == 0);
  for (const char* f : {"results.csv", "loss_curve.csv", "timings.csv",
                        "manifest.resolved.json"})
    CHECK(fs::exists(dir.path / "out" / f));
  std::string csv = slurp(dir.path / "out" / "results.csv");
  // header + clean row + one perturbation row
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("none") != std::string::npos);
  CHECK(csv.find("gaussian_embedding,0.5,") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.path / "out" / "checkpoint.bin"));

  Json with_ckpt = tiny_train_doc();
  with_ckpt["save_checkpoint"] = true;
  CHECK(run_command(resolve_manifest(with_ckpt), (dir.path / "ck").string()) == 0);
  CHECK(fs::exists(dir.path / "ck" / "checkpoint.bin"));
}

TEST_CASE("reruns of the same manifest are byte-identical outside timings") {
  TempDir dir;
  Manifest m = resolve_manifest(tiny_train_doc());
  CHECK(run_command(m, (dir.path / "a").string()) == 0);
  CHECK(run_command(m, (dir.path / "b").string()) == 0);
  CHECK(slurp(dir.path / "a" / "results.csv") == slurp(dir.path / "b" / "results.csv"));
  CHECK(slurp(dir.path / "a" / "loss_curve.csv") == slurp(dir.path / "b" / "loss_curve.csv"));

  // replaying the baked manifest overwrites in place, still byte-identical
  std::string results_before = slurp(dir.path / "a" / "results.csv");
  Manifest baked = load_manifest(dir.path / "a" / "manifest.resolved.json");
  CHECK(run_command(baked) == 0);  // no override: runs into the baked out_dir
  CHECK(slurp(dir.path / "a" / "results.csv") == results_before);
}

TEST_CASE("config errors surface as exit code 2") {
  TempDir dir;
  Manifest m = resolve_manifest(tiny_train_doc());
  m.doc["encoder"]["n_heads"] = 3;  // 8 % 3 != 0
  CHECK(run_command(m, (dir.path / "out").string()) == 2);

  Manifest st = default_manifest("stability");
  st.doc["stability"]["grid"]["gamma_points"] = 1;  // degenerate axis
  CHECK(run_command(st, (dir.path / "out2").string()) == 2);
}

TEST_CASE("numeric divergence surfaces as exit code 3") {
  TempDir dir;
  Json user = tiny_train_doc();
  user["wiring"] = {{"mode", "implicit"}, {"gamma", 0.5}, {"inner_iterations", 200},
                    {"inner_lr", 64.0}};
  user["train"] = {{"epochs", 1}, {"batch_size", 8}, {"lr", 1e30}};
  Manifest m = resolve_manifest(user);
  CHECK(run_command(m, (dir.path / "out").string()) == 3);
}

TEST_CASE("ablation command writes cells, summary, and rankings") {
  TempDir dir;
  Json user;
  user["command"] = "ablation";
  user["encoder"] = {{"vocab_size", 40}, {"d_model", 8},  {"n_heads", 2},
                     {"n_layers", 2},    {"ffn_dim", 16}, {"max_seq_len", 8}};
  user["task"] = {{"vocab_size", 40}, {"train_size", 16}, {"eval_size", 8}};
  user["train"] = {{"epochs", 1}, {"batch_size", 8}, {"val_fraction", 0.0}};
  user["wiring"] = {{"inner_iterations", 1}};
  user["eval"] = {{"perturbations", Json::array({Json{{"kind", "gaussian_embedding"},
                                                      {"epsilon", 0.5}}})}};
  user["ablation"] = {{"n_runs", 2}, {"placements", Json::array({"monotone", "implicit"})}};
  Manifest m = resolve_manifest(user);
  CHECK(run_command(m, (dir.path / "out").string()) == 0);
  for (const char* f : {"results.csv", "summary.csv", "summary.txt", "timings.csv"})
    CHECK(fs::exists(dir.path / "out" / f));
  std::string csv = slurp(dir.path / "out" / "results.csv");
  // header + 2 placements x 2 runs x (1 clean + 1 perturbed) rows
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
  std::string summary = slurp(dir.path / "out" / "summary.txt");
  CHECK(summary.find("monotone") != std::string::npos);
  CHECK(summary.find("implicit") != std::string::npos);
}

TEST_CASE("tsweep command emits one row per inner-iteration setting") {
  TempDir dir;
  Json user;
  user["command"] = "tsweep";
  user["encoder"] = {{"vocab_size", 40}, {"d_model", 8},  {"n_heads", 2},
                     {"n_layers", 2},    {"ffn_dim", 16}, {"max_seq_len", 8}};
  user["task"] = {{"vocab_size", 40}, {"train_size", 16}, {"eval_size", 8}};
  user["train"] = {{"epochs", 1}, {"batch_size", 8}, {"val_fraction", 0.0}};
  user["eval"] = {{"perturbations", Json::array()}};
  user["tsweep"] = {{"t_values", Json::array({0, 2})}, {"n_runs", 1}};
  Manifest m = resolve_manifest(user);
  CHECK(run_command(m, (dir.path / "out").string()) == 0);
  std::string csv = slurp(dir.path / "out" / "results.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 rows
  CHECK(csv.find("flops_num") != std::string::npos);
}

TEST_CASE("the command line binary maps subcommands and flags") {
  const std::string exe = IMNET_CLI_PATH;  // injected by the build
  REQUIRE(fs::exists(exe));
  TempDir dir;

  auto run = [&](const std::string& args) {
    std::string cmd = exe + " " + args + " >" + (dir.path / "stdout.txt").string() + " 2>" +
                      (dir.path / "stderr.txt").string();
    int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  };

  CHECK(run("--help") == 0);
  CHECK(run("flops --out " + (dir.path / "f").string()) == 0);
  CHECK(fs::exists(dir.path / "f" / "flops.csv"));
  CHECK(run("bogus-subcommand") == 2);
  CHECK(run("flops --config " + (dir.path / "missing.json").string()) == 2);

  // a config whose command disagrees with the subcommand is a usage error
  std::ofstream(dir.path / "m.json") << default_manifest("flops").doc.dump(2);
  CHECK(run("stability --config " + (dir.path / "m.json").string()) == 2);

  // environment root is used when --out is absent
  std::string env_out = (dir.path / "envroot").string();
  CHECK(std::system(("IMNET_OUT=" + env_out + " " + exe + " flops >/dev/null 2>&1").c_str()) == 0);
  CHECK(fs::exists(fs::path(env_out) / "flops" / "flops.csv"));
}
