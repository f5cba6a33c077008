#include "imnet/manifest.hpp"

#include <fstream>

namespace imnet {

namespace {

Json default_encoder() {
  return Json{{"vocab_size", 200}, {"d_model", 32},     {"n_heads", 2},
              {"n_layers", 6},     {"ffn_dim", 64},     {"max_seq_len", 32},
              {"num_classes", 2},  {"activation", "gelu"}};
}

Json default_task() {
  return Json{{"kind", "keyword_presence"}, {"vocab_size", 200}, {"seq_len", 8},
              {"num_classes", 2},           {"train_size", 2000}, {"eval_size", 500}};
}

Json default_train() {
  return Json{{"lr", 3e-4},        {"batch_size", 16}, {"epochs", 4},
              {"val_fraction", 0.2}};
}

Json default_wiring() {
  return Json{{"mode", "implicit"},       {"layers", "all"},
              {"gamma", 0.1},             {"inner_iterations", 5},
              {"inner_lr", -1.0},         {"loss_without_gamma", false}};
}

Json default_eval() {
  return Json{{"batch_size", 16},
              {"perturbations", Json::array({Json{{"kind", "sign_gradient_embedding"},
                                                  {"epsilon", 0.5},
                                                  {"swap_fraction", 0.0}}})}};
}

Json default_doc(const std::string& command) {
  Json d{{"command", command}, {"seed", 1}, {"threads", 1}, {"out_dir", ""}};
  if (command == "stability") {
    d["stability"] = Json{
        {"grid",
         Json{{"scale", "geometric"}, {"lambda_lo", -0.5}, {"lambda_hi", -4.0},
              {"lambda_points", 50},  {"gamma_lo", 0.3},   {"gamma_hi", 2.4},
              {"gamma_points", 50},   {"steps", 200},      {"threshold", 1e-6}}},
        {"trajectories",
         Json::array({Json{{"method", "explicit"}, {"lambda", -1.0}, {"gamma", 0.5}, {"eta", 1.0}, {"steps", 200}},
                      Json{{"method", "explicit"}, {"lambda", -1.0}, {"gamma", 1.9}, {"eta", 1.0}, {"steps", 200}},
                      Json{{"method", "explicit"}, {"lambda", -1.0}, {"gamma", 2.5}, {"eta", 1.0}, {"steps", 200}},
                      Json{{"method", "implicit"}, {"lambda", -1.0}, {"gamma", 0.5}, {"eta", 1.0}, {"steps", 200}},
                      Json{{"method", "implicit"}, {"lambda", -4.0}, {"gamma", 2.4}, {"eta", 1.0}, {"steps", 200}}})}};
  } else if (command == "train_eval") {
    d["encoder"] = default_encoder();
    d["task"] = default_task();
    d["train"] = default_train();
    d["wiring"] = default_wiring();
    d["eval"] = default_eval();
    d["save_checkpoint"] = false;
  } else if (command == "ablation") {
    d["encoder"] = default_encoder();
    d["task"] = default_task();
    d["train"] = default_train();
    d["wiring"] = default_wiring();  // gamma/T shared by the placements
    d["eval"] = default_eval();
    d["ablation"] = Json{{"n_runs", 3},
                         {"subsample_train", 0},
                         {"placements", Json::array({"monotone", "explicit", "implicit"})}};
  } else if (command == "tsweep") {
    d["encoder"] = default_encoder();
    d["task"] = default_task();
    d["train"] = default_train();
    d["wiring"] = default_wiring();
    d["eval"] = default_eval();
    d["tsweep"] = Json{{"t_values", Json::array({1, 5, 10, 15})}, {"n_runs", 1}};
  } else if (command == "flops") {
    d["flops"] = Json{{"n_layers", 12},
                      {"t_values", Json::array({1, 5, 10, 15})},
                      {"placements", Json::array({"implicit", "implicit:4-6"})},
                      {"gamma", 0.1}};
  } else {
    throw config_error("unknown command '" + command + "'");
  }
  return d;
}

void merge_into(Json& base, const Json& user, const std::string& path) {
  if (!user.is_object()) throw config_error("manifest section '" + path + "' must be an object");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string key_path = path.empty() ? it.key() : path + "." + it.key();
    if (!base.contains(it.key())) throw config_error("unknown manifest key '" + key_path + "'");
    Json& slot = base[it.key()];
    if (slot.is_object() && it.value().is_object())
      merge_into(slot, it.value(), key_path);
    else
      slot = it.value();
  }
}

double num_at(const Json& j, const std::string& key) {
  if (!j.contains(key) || !j[key].is_number())
    throw config_error("manifest: '" + key + "' must be a number");
  return j[key].get<double>();
}

int int_at(const Json& j, const std::string& key) {
  if (!j.contains(key) || !j[key].is_number_integer())
    throw config_error("manifest: '" + key + "' must be an integer");
  return j[key].get<int>();
}

std::string str_at(const Json& j, const std::string& key) {
  if (!j.contains(key) || !j[key].is_string())
    throw config_error("manifest: '" + key + "' must be a string");
  return j[key].get<std::string>();
}

}  // namespace

Manifest default_manifest(const std::string& command) {
  return Manifest{command, default_doc(command)};
}

Manifest resolve_manifest(const Json& user_doc) {
  if (!user_doc.is_object()) throw config_error("manifest must be a JSON object");
  if (!user_doc.contains("command") || !user_doc["command"].is_string())
    throw config_error("manifest needs a 'command' string");
  std::string command = user_doc["command"].get<std::string>();
  Json doc = default_doc(command);
  merge_into(doc, user_doc, "");
  if (!doc["seed"].is_number_integer()) throw config_error("manifest: 'seed' must be an integer");
  if (!doc["threads"].is_number_integer() || doc["threads"].get<int>() < 1)
    throw config_error("manifest: 'threads' must be a positive integer");
  if (!doc["out_dir"].is_string()) throw config_error("manifest: 'out_dir' must be a string");
  return Manifest{command, std::move(doc)};
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open manifest " + path.string());
  Json doc;
  try {
    in >> doc;
  } catch (const Json::parse_error& e) {
    throw config_error("manifest " + path.string() + ": " + e.what());
  }
  return resolve_manifest(doc);
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw usage_error("cannot write manifest " + path.string());
  out << m.doc.dump(2) << '\n';
}

// ---- typed readers ---------------------------------------------------------

EncoderConfig encoder_from_json(const Json& j) {
  EncoderConfig c;
  c.vocab_size = int_at(j, "vocab_size");
  c.d_model = int_at(j, "d_model");
  c.n_heads = int_at(j, "n_heads");
  c.n_layers = int_at(j, "n_layers");
  c.ffn_dim = int_at(j, "ffn_dim");
  c.max_seq_len = int_at(j, "max_seq_len");
  c.num_classes = int_at(j, "num_classes");
  c.activation = activation_from_string(str_at(j, "activation"));
  c.validate();
  return c;
}

SyntheticTask task_from_json(const Json& j) {
  SyntheticTask t;
  t.kind = task_kind_from_string(str_at(j, "kind"));
  t.vocab_size = int_at(j, "vocab_size");
  t.seq_len = int_at(j, "seq_len");
  t.num_classes = int_at(j, "num_classes");
  t.train_size = int_at(j, "train_size");
  t.eval_size = int_at(j, "eval_size");
  t.validate();
  return t;
}

TrainHyper hyper_from_json(const Json& j) {
  TrainHyper h;
  h.lr = num_at(j, "lr");
  h.batch_size = int_at(j, "batch_size");
  h.epochs = int_at(j, "epochs");
  h.val_fraction = num_at(j, "val_fraction");
  return h;
}

EulerConfig euler_from_json(const Json& j) {
  EulerConfig e;
  e.step_size = num_at(j, "gamma");
  e.inner_iterations = int_at(j, "inner_iterations");
  e.inner_lr = num_at(j, "inner_lr");
  if (!j.contains("loss_without_gamma") || !j["loss_without_gamma"].is_boolean())
    throw config_error("manifest: 'loss_without_gamma' must be a boolean");
  e.loss_without_gamma = j["loss_without_gamma"].get<bool>();
  e.validate();
  return e;
}

namespace {

std::vector<std::pair<int, int>> parse_ranges(const std::string& spec) {
  std::vector<std::pair<int, int>> out;
  size_t pos = 0;
  while (pos < spec.size()) {
    size_t comma = spec.find(',', pos);
    std::string part = spec.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    size_t dash = part.find('-');
    try {
      if (dash == std::string::npos) {
        int v = std::stoi(part);
        out.emplace_back(v, v);
      } else {
        out.emplace_back(std::stoi(part.substr(0, dash)), std::stoi(part.substr(dash + 1)));
      }
    } catch (const std::exception&) {
      throw config_error("bad layer range '" + part + "'");
    }
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw config_error("empty layer range '" + spec + "'");
  return out;
}

}  // namespace

WiringSpec wiring_from_json(const Json& j, int n_layers) {
  EulerConfig e = euler_from_json(j);
  const Json& layers = j.contains("layers") ? j["layers"] : Json("all");
  if (layers.is_array()) {
    WiringSpec w;
    if (static_cast<int>(layers.size()) != n_layers)
      throw config_error("wiring 'layers' lists " + std::to_string(layers.size()) +
                         " modes for " + std::to_string(n_layers) + " layers");
    for (const Json& m : layers) {
      if (!m.is_string()) throw config_error("wiring 'layers' entries must be mode strings");
      w.per_layer.push_back(connection_mode_from_string(m.get<std::string>()));
    }
    w.euler = e;
    w.euler.mode = ConnectionMode::implicit_euler;
    return w;
  }
  if (!layers.is_string()) throw config_error("wiring 'layers' must be a string or an array");
  std::string spec = layers.get<std::string>();
  ConnectionMode mode = connection_mode_from_string(str_at(j, "mode"));
  if (spec == "all") return WiringSpec::uniform(mode, n_layers, e);
  if (mode != ConnectionMode::implicit_euler)
    throw config_error("layer ranges are only supported for implicit wirings");
  WiringSpec w = WiringSpec::uniform(ConnectionMode::monotone, n_layers, e);
  for (auto [lo, hi] : parse_ranges(spec)) {
    if (lo < 1 || hi > n_layers || lo > hi)
      throw config_error("layer range " + std::to_string(lo) + "-" + std::to_string(hi) +
                         " out of bounds for " + std::to_string(n_layers) + " layers");
    for (int l = lo; l <= hi; ++l)
      w.per_layer[static_cast<size_t>(l - 1)] = ConnectionMode::implicit_euler;
  }
  w.euler.mode = ConnectionMode::implicit_euler;
  return w;
}

PerturbationSpec perturbation_from_json(const Json& j) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "kind" && it.key() != "epsilon" && it.key() != "swap_fraction" &&
        it.key() != "seed")
      throw config_error("unknown perturbation key '" + it.key() + "'");
  PerturbationSpec p;
  p.kind = perturb_kind_from_string(str_at(j, "kind"));
  if (j.contains("epsilon")) p.epsilon = num_at(j, "epsilon");
  if (j.contains("swap_fraction")) p.swap_fraction = num_at(j, "swap_fraction");
  if (j.contains("seed")) p.seed = static_cast<uint64_t>(int_at(j, "seed"));
  if (p.epsilon < 0) throw config_error("perturbation epsilon must be >= 0");
  if (p.swap_fraction < 0 || p.swap_fraction > 1)
    throw config_error("perturbation swap_fraction must be in [0,1]");
  return p;
}

StabilityGrid grid_from_json(const Json& j) try {
  std::string scale = str_at(j, "scale");
  int nl = int_at(j, "lambda_points"), ng = int_at(j, "gamma_points");
  if (nl < 2 || ng < 2) throw config_error("stability grid axes need at least two points");
  double llo = num_at(j, "lambda_lo"), lhi = num_at(j, "lambda_hi");
  double glo = num_at(j, "gamma_lo"), ghi = num_at(j, "gamma_hi");
  int steps = int_at(j, "steps");
  double threshold = num_at(j, "threshold");
  if (scale == "geometric")
    return StabilityGrid::geometric(llo, lhi, nl, glo, ghi, ng, steps, threshold);
  if (scale != "linear") throw config_error("grid scale must be 'geometric' or 'linear'");
  StabilityGrid g;
  g.steps = steps;
  g.threshold = threshold;
  auto linspace = [](double lo, double hi, int n) {
    std::vector<double> v(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      v[static_cast<size_t>(i)] = lo + (hi - lo) * i / (n - 1);
    return v;
  };
  g.lambdas = linspace(llo, lhi, nl);
  g.gammas = linspace(glo, ghi, ng);
  g.validate();
  return g;
} catch (const usage_error& e) {
  // axis construction errors read as config mistakes at this level
  throw config_error(e.what());
}

}  // namespace imnet
