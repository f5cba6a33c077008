#include "imnet/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <thread>

#include "imnet/csv.hpp"

namespace imnet {

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::keyword_presence: return "keyword_presence";
    case TaskKind::majority_token: return "majority_token";
    case TaskKind::order_sensitive_pair: return "order_sensitive_pair";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "keyword_presence") return TaskKind::keyword_presence;
  if (s == "majority_token") return TaskKind::majority_token;
  if (s == "order_sensitive_pair") return TaskKind::order_sensitive_pair;
  throw config_error("unknown task kind '" + s + "'");
}

const char* to_string(PerturbKind k) {
  switch (k) {
    case PerturbKind::gaussian_embedding: return "gaussian_embedding";
    case PerturbKind::sign_gradient_embedding: return "sign_gradient_embedding";
    case PerturbKind::token_swap: return "token_swap";
  }
  return "?";
}

PerturbKind perturb_kind_from_string(const std::string& s) {
  if (s == "gaussian_embedding") return PerturbKind::gaussian_embedding;
  if (s == "sign_gradient_embedding") return PerturbKind::sign_gradient_embedding;
  if (s == "token_swap") return PerturbKind::token_swap;
  throw config_error("unknown perturbation kind '" + s + "'");
}

std::string PerturbationSpec::label() const {
  double mag = kind == PerturbKind::token_swap ? swap_fraction : epsilon;
  return std::string(to_string(kind)) + ":" + fmt_double(mag);
}

void SyntheticTask::validate() const {
  if (vocab_size < kMajorityBase + kMajorityAlphabet)
    throw config_error("vocab_size must be >= " + std::to_string(kMajorityBase + kMajorityAlphabet));
  if (seq_len < 2) throw config_error("seq_len must be >= 2");
  if (num_classes != 2) throw config_error("synthetic tasks are binary; num_classes must be 2");
  if (train_size < 2 || eval_size < 2) throw config_error("train/eval sizes must be >= 2");
}

// ---- task generation ---------------------------------------------------------

int derive_label(TaskKind kind, const std::vector<int>& tokens) {
  switch (kind) {
    case TaskKind::keyword_presence:
      for (int t : tokens)
        if (t == kKeywordToken) return 1;
      return 0;
    case TaskKind::majority_token: {
      // most frequent token, ties to the smallest id; class = its parity
      std::vector<std::pair<int, int>> counts;  // (token, count)
      for (int t : tokens) {
        bool found = false;
        for (auto& [tok, c] : counts)
          if (tok == t) {
            ++c;
            found = true;
          }
        if (!found) counts.emplace_back(t, 1);
      }
      int best = -1, best_count = -1;
      for (auto& [tok, c] : counts)
        if (c > best_count || (c == best_count && tok < best)) {
          best = tok;
          best_count = c;
        }
      return best % 2;
    }
    case TaskKind::order_sensitive_pair: {
      int pa = -1, pb = -1;
      for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] == kOrderTokenA && pa < 0) pa = static_cast<int>(i);
        if (tokens[i] == kOrderTokenB && pb < 0) pb = static_cast<int>(i);
      }
      if (pa < 0 || pb < 0) throw usage_error("order task sequence lacks its marker pair");
      return pa < pb ? 1 : 0;
    }
  }
  return 0;
}

namespace {

// draw a token avoiding one or two excluded ids
int draw_avoiding(Rng& rng, int vocab, int skip1, int skip2 = -1) {
  for (;;) {
    int t = rng.uniform_int(0, vocab - 1);
    if (t != skip1 && t != skip2) return t;
  }
}

std::vector<int> gen_example(const SyntheticTask& task, Rng& rng, int want_label) {
  std::vector<int> s(static_cast<size_t>(task.seq_len));
  switch (task.kind) {
    case TaskKind::keyword_presence: {
      for (auto& t : s) t = draw_avoiding(rng, task.vocab_size, kKeywordToken);
      if (want_label == 1)
        s[static_cast<size_t>(rng.uniform_int(0, task.seq_len - 1))] = kKeywordToken;
      return s;
    }
    case TaskKind::majority_token: {
      // rejection-sample from the small alphabet until the parity matches
      for (;;) {
        for (auto& t : s)
          t = kMajorityBase + rng.uniform_int(0, kMajorityAlphabet - 1);
        if (derive_label(task.kind, s) == want_label) return s;
      }
    }
    case TaskKind::order_sensitive_pair: {
      for (auto& t : s) t = draw_avoiding(rng, task.vocab_size, kOrderTokenA, kOrderTokenB);
      int p1 = rng.uniform_int(0, task.seq_len - 1);
      int p2 = p1;
      while (p2 == p1) p2 = rng.uniform_int(0, task.seq_len - 1);
      int first = std::min(p1, p2), second = std::max(p1, p2);
      if (want_label == 1) {
        s[static_cast<size_t>(first)] = kOrderTokenA;
        s[static_cast<size_t>(second)] = kOrderTokenB;
      } else {
        s[static_cast<size_t>(first)] = kOrderTokenB;
        s[static_cast<size_t>(second)] = kOrderTokenA;
      }
      return s;
    }
  }
  throw config_error("unreachable task kind");
}

Dataset gen_split(const SyntheticTask& task, int n, uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  ds.tokens.reserve(static_cast<size_t>(n));
  ds.labels.reserve(static_cast<size_t>(n));
  // exact balance: alternate labels, class 0 takes any odd remainder
  for (int i = 0; i < n; ++i) {
    int y = i % 2 == 0 ? 0 : 1;
    ds.tokens.push_back(gen_example(task, rng, y));
    ds.labels.push_back(y);
  }
  // deterministic shuffle so the label sequence is not strictly alternating
  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0u);
  rng.shuffle(order);
  Dataset out;
  out.tokens.reserve(ds.tokens.size());
  out.labels.reserve(ds.labels.size());
  for (size_t i : order) {
    out.tokens.push_back(std::move(ds.tokens[i]));
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

}  // namespace

std::pair<Dataset, Dataset> generate_task(const SyntheticTask& task) {
  task.validate();
  Dataset train = gen_split(task, task.train_size, mix_seed(task.seed, "train_split"));
  Dataset eval = gen_split(task, task.eval_size, mix_seed(task.seed, "eval_split"));
  return {std::move(train), std::move(eval)};
}

Dataset subsample(const Dataset& ds, int n, uint64_t seed) {
  if (n < 1 || n > static_cast<int>(ds.size()))
    throw usage_error("subsample: n = " + std::to_string(n) + " out of range for dataset of " +
                      std::to_string(ds.size()));
  // per-class index pools
  int classes = 0;
  for (int y : ds.labels) classes = std::max(classes, y + 1);
  std::vector<std::vector<size_t>> pools(static_cast<size_t>(classes));
  for (size_t i = 0; i < ds.size(); ++i)
    pools[static_cast<size_t>(ds.labels[i])].push_back(i);

  // proportional quotas, largest remainder first
  std::vector<int> quota(static_cast<size_t>(classes), 0);
  std::vector<std::pair<double, int>> rema;
  int assigned = 0;
  for (int c = 0; c < classes; ++c) {
    double exact = static_cast<double>(n) * pools[static_cast<size_t>(c)].size() / ds.size();
    quota[static_cast<size_t>(c)] = static_cast<int>(exact);
    assigned += quota[static_cast<size_t>(c)];
    rema.emplace_back(exact - quota[static_cast<size_t>(c)], c);
  }
  std::sort(rema.begin(), rema.end(), [](auto& a, auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (int i = 0; assigned < n; ++i, ++assigned) quota[static_cast<size_t>(rema[static_cast<size_t>(i % classes)].second)]++;

  Rng rng(mix_seed(seed, "subsample"));
  std::vector<size_t> chosen;
  for (int c = 0; c < classes; ++c) {
    auto& pool = pools[static_cast<size_t>(c)];
    rng.shuffle(pool);
    int q = std::min<int>(quota[static_cast<size_t>(c)], static_cast<int>(pool.size()));
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + q);
  }
  std::sort(chosen.begin(), chosen.end());  // keep the source order
  Dataset out;
  out.tokens.reserve(chosen.size());
  out.labels.reserve(chosen.size());
  for (size_t i : chosen) {
    out.tokens.push_back(ds.tokens[i]);
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

// ---- perturbations ----------------------------------------------------------

Tensor perturb_gaussian(const Tensor& embeddings, double epsilon, Rng& rng) {
  if (epsilon == 0.0) return embeddings;  // exact identity
  std::vector<double> out(embeddings.data().begin(), embeddings.data().end());
  for (auto& v : out) v += epsilon * rng.normal();
  return Tensor(embeddings.shape(), std::move(out));
}

Tensor perturb_sign_gradient(const EncoderModel& model, const WiringSpec& w,
                             const Tensor& embeddings, const std::vector<int>& labels,
                             double epsilon) {
  if (epsilon == 0.0) return embeddings;  // exact identity
  Tape tape;
  Tensor emb = tape.leaf(embeddings);
  Tensor logits;
  {
    // parameters participate as constants; only the embedding needs a gradient
    std::unique_ptr<BoundEncoder> be;
    {
      Tape::RecordingPause pause(tape);
      be = std::make_unique<BoundEncoder>(model, tape);
    }
    logits = be->forward_embeddings(w, emb);
  }
  Tensor loss = cross_entropy(logits, labels);
  tape.backward(loss);
  Tensor g = tape.gradient(emb);
  std::vector<double> out(embeddings.data().begin(), embeddings.data().end());
  auto gv = g.data();
  for (size_t i = 0; i < out.size(); ++i) {
    double s = gv[i] > 0.0 ? 1.0 : (gv[i] < 0.0 ? -1.0 : 0.0);
    out[i] += epsilon * s;
  }
  return Tensor(embeddings.shape(), std::move(out));
}

TokenBatch perturb_token_swap(const TokenBatch& ids, double swap_fraction, int vocab_size,
                              Rng& rng) {
  if (swap_fraction == 0.0) return ids;  // exact identity
  if (swap_fraction < 0.0 || swap_fraction > 1.0)
    throw usage_error("token_swap: fraction must be in [0,1]");
  TokenBatch out = ids;
  for (auto& row : out) {
    int seq = static_cast<int>(row.size());
    int n_swap = static_cast<int>(std::ceil(swap_fraction * seq));
    // partial Fisher-Yates picks n_swap distinct positions
    std::vector<int> positions(static_cast<size_t>(seq));
    std::iota(positions.begin(), positions.end(), 0);
    for (int i = 0; i < n_swap; ++i) {
      int j = rng.uniform_int(i, seq - 1);
      std::swap(positions[static_cast<size_t>(i)], positions[static_cast<size_t>(j)]);
      int& slot = row[static_cast<size_t>(positions[static_cast<size_t>(i)])];
      // draw from vocab minus the current token so the position really changes
      int r = rng.uniform_int(0, vocab_size - 2);
      slot = r >= slot ? r + 1 : r;
    }
  }
  return out;
}

// ---- training -----------------------------------------------------------------

namespace {

int argmax_row(std::span<const double> row) {
  int best = 0;
  for (size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[static_cast<size_t>(best)]) best = static_cast<int>(j);
  return best;
}

struct Batch {
  TokenBatch tokens;
  std::vector<int> labels;
};

std::vector<Batch> make_batches(const Dataset& ds, const std::vector<size_t>& order,
                                int batch_size) {
  std::vector<Batch> out;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
    size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
    Batch b;
    for (size_t i = start; i < end; ++i) {
      b.tokens.push_back(ds.tokens[order[i]]);
      b.labels.push_back(ds.labels[order[i]]);
    }
    out.push_back(std::move(b));
  }
  return out;
}

// gradient-moment optimizer state, one slot per named parameter
struct Adam {
  double lr, beta1, beta2, eps;
  int64_t t = 0;
  std::vector<std::vector<double>> m, v;

  Adam(const TrainHyper& hp, size_t n_params)
      : lr(hp.lr), beta1(hp.beta1), beta2(hp.beta2), eps(hp.adam_eps), m(n_params), v(n_params) {}

  void step(std::vector<std::pair<std::string, Tensor*>>& params,
            const std::vector<Tensor>& grads) {
    ++t;
    double c1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double c2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t p = 0; p < params.size(); ++p) {
      Tensor& w = *params[p].second;
      auto gv = grads[p].data();
      if (m[p].empty()) {
        m[p].assign(static_cast<size_t>(w.size()), 0.0);
        v[p].assign(static_cast<size_t>(w.size()), 0.0);
      }
      std::vector<double> nw(w.data().begin(), w.data().end());
      for (size_t i = 0; i < nw.size(); ++i) {
        double g = gv[i];
        m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * g;
        v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * g * g;
        nw[i] -= lr * (m[p][i] / c1) / (std::sqrt(v[p][i] / c2) + eps);
      }
      w = Tensor(w.shape(), std::move(nw));
    }
  }
};

double eval_loss_batches(const EncoderModel& model, const WiringSpec& w,
                         const std::vector<Batch>& batches, size_t total) {
  double sum = 0;
  for (const Batch& b : batches) {
    Tape tape;
    Tape::RecordingPause pause(tape);
    Tensor logits = forward(model, w, b.tokens, tape);
    sum += cross_entropy(logits, b.labels).value() * static_cast<double>(b.labels.size());
  }
  return sum / static_cast<double>(total);
}

}  // namespace

TrainResult train(EncoderModel& model, const WiringSpec& w, const Dataset& data,
                  const TrainHyper& hp) {
  model.cfg.validate();
  w.validate(model.cfg.n_layers);
  if (data.size() == 0) throw usage_error("train: empty dataset");
  if (hp.batch_size < 1) throw config_error("batch_size must be >= 1");
  if (hp.epochs < 1) throw config_error("epochs must be >= 1");
  if (hp.val_fraction < 0.0 || hp.val_fraction >= 1.0)
    throw config_error("val_fraction must be in [0,1)");
  if (!(hp.lr > 0.0)) throw config_error("lr must be positive");
  for (int y : data.labels)
    if (y < 0 || y >= model.cfg.num_classes)
      throw usage_error("train: label " + std::to_string(y) + " out of range");

  // internal split for model selection
  std::vector<size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0u);
  Rng split_rng(mix_seed(hp.seed, "val_split"));
  split_rng.shuffle(order);
  size_t val_n = static_cast<size_t>(std::llround(hp.val_fraction * static_cast<double>(data.size())));
  if (val_n >= data.size()) val_n = data.size() - 1;
  std::vector<size_t> val_idx(order.begin(), order.begin() + static_cast<int64_t>(val_n));
  std::vector<size_t> train_idx(order.begin() + static_cast<int64_t>(val_n), order.end());
  std::vector<Batch> val_batches = make_batches(data, val_idx, 64);

  auto params = named_parameters(model);
  Adam opt(hp, params.size());
  TrainResult res;
  EncoderModel best = model;  // tensor copies share storage, snapshots are cheap
  double best_val = std::numeric_limits<double>::infinity();
  int global_step = 0;

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(hp.seed, "shuffle", static_cast<uint64_t>(epoch)));
    std::vector<size_t> idx = train_idx;
    shuffle_rng.shuffle(idx);
    double epoch_loss = 0;
    size_t epoch_batches = 0;
    for (const Batch& b : make_batches(data, idx, hp.batch_size)) {
      Tape tape;
      BoundEncoder be(model, tape);
      Tensor logits = be.forward_tokens(w, b.tokens);
      Tensor loss = cross_entropy(logits, b.labels);
      double lv = loss.value();
      if (!std::isfinite(lv))
        throw numeric_divergence_error(
            "train: non-finite loss at step " + std::to_string(global_step), global_step);
      tape.backward(loss);
      auto bound_params = named_parameters(be.bound);
      std::vector<Tensor> grads;
      grads.reserve(bound_params.size());
      for (auto& [name, t] : bound_params) grads.push_back(tape.gradient(*t));
      opt.step(params, grads);
      epoch_loss += lv;
      ++epoch_batches;
      ++global_step;
    }
    res.train_loss.push_back(epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : 0.0);
    if (!val_idx.empty()) {
      double vl = eval_loss_batches(model, w, val_batches, val_idx.size());
      res.val_loss.push_back(vl);
      if (vl < best_val) {
        best_val = vl;
        best = model;
        res.best_epoch = epoch + 1;
      }
    } else {
      best = model;
      res.best_epoch = epoch + 1;
    }
  }
  model = best;
  res.steps = global_step;
  return res;
}

double dataset_loss(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                    int batch_size) {
  if (ds.size() == 0) throw usage_error("dataset_loss: empty dataset");
  std::vector<size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0u);
  return eval_loss_batches(model, w, make_batches(ds, order, batch_size), ds.size());
}

double dataset_accuracy(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                        int batch_size) {
  if (ds.size() == 0) throw usage_error("dataset_accuracy: empty dataset");
  std::vector<size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0u);
  int correct = 0;
  for (const Batch& b : make_batches(ds, order, batch_size)) {
    Tape tape;
    Tape::RecordingPause pause(tape);
    Tensor logits = forward(model, w, b.tokens, tape);
    int classes = logits.shape()[1];
    for (size_t i = 0; i < b.labels.size(); ++i) {
      auto row = logits.data().subspan(i * static_cast<size_t>(classes),
                                       static_cast<size_t>(classes));
      if (argmax_row(row) == b.labels[i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// ---- evaluation ------------------------------------------------------------------

Metrics evaluate(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                 const std::optional<PerturbationSpec>& pert, int batch_size,
                 const std::string& fingerprint) {
  if (ds.size() == 0) throw usage_error("evaluate: empty dataset");
  w.validate(model.cfg.n_layers);
  auto t0 = std::chrono::steady_clock::now();

  std::vector<size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0u);
  auto batches = make_batches(ds, order, batch_size);

  int clean_ok = 0, pert_ok = 0;
  size_t batch_index = 0;
  for (const Batch& b : batches) {
    const int classes = model.cfg.num_classes;
    auto count_hits = [&](const Tensor& logits, int& acc) {
      for (size_t i = 0; i < b.labels.size(); ++i) {
        auto row = logits.data().subspan(i * static_cast<size_t>(classes),
                                         static_cast<size_t>(classes));
        if (argmax_row(row) == b.labels[i]) ++acc;
      }
    };

    Tape tape;
    Tape::RecordingPause pause(tape);
    BoundEncoder be(model, tape);
    Tensor emb = be.embed_tokens(b.tokens);
    Tensor clean_logits = be.forward_embeddings(w, emb);
    count_hits(clean_logits, clean_ok);

    if (pert) {
      switch (pert->kind) {
        case PerturbKind::gaussian_embedding: {
          Rng rng(mix_seed(pert->seed, "gaussian", batch_index));
          Tensor pe = perturb_gaussian(emb, pert->epsilon, rng);
          count_hits(bit_equal(pe, emb) ? clean_logits : be.forward_embeddings(w, pe), pert_ok);
          break;
        }
        case PerturbKind::sign_gradient_embedding: {
          Tensor pe = perturb_sign_gradient(model, w, emb, b.labels, pert->epsilon);
          count_hits(bit_equal(pe, emb) ? clean_logits : be.forward_embeddings(w, pe), pert_ok);
          break;
        }
        case PerturbKind::token_swap: {
          Rng rng(mix_seed(pert->seed, "swap", batch_index));
          TokenBatch swapped =
              perturb_token_swap(b.tokens, pert->swap_fraction, model.cfg.vocab_size, rng);
          if (swapped == b.tokens)
            count_hits(clean_logits, pert_ok);
          else
            count_hits(be.forward_tokens(w, swapped), pert_ok);
          break;
        }
      }
    }
    ++batch_index;
  }

  Metrics m;
  m.clean_accuracy = static_cast<double>(clean_ok) / static_cast<double>(ds.size());
  m.perturbed_accuracy =
      pert ? static_cast<double>(pert_ok) / static_cast<double>(ds.size()) : m.clean_accuracy;
  m.flops_forward = count_flops(model.cfg, w);
  m.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.config_fingerprint = fingerprint;
  return m;
}

// ---- cost model -------------------------------------------------------------------

double count_flops(const EncoderConfig& cfg, const WiringSpec& w) {
  w.validate(cfg.n_layers);
  auto [num, den] = count_flops_ratio(w);
  return static_cast<double>(num) / static_cast<double>(den);
}

std::pair<int64_t, int64_t> count_flops_ratio(const WiringSpec& w) {
  int64_t layers = static_cast<int64_t>(w.per_layer.size());
  if (layers == 0) throw usage_error("count_flops: empty wiring");
  // one pass per layer, plus T extra layer passes per implicit connection
  int64_t num = layers + static_cast<int64_t>(w.implicit_layer_count()) *
                             static_cast<int64_t>(w.euler.inner_iterations);
  int64_t den = layers;
  int64_t g = std::gcd(num, den);
  return {num / g, den / g};
}

std::string fingerprint_of(const std::string& canonical) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : canonical) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- ablation --------------------------------------------------------------------

std::pair<std::vector<AblationCell>, std::vector<AblationSummary>> run_ablation(
    const std::vector<WiringSpec>& placements, const AblationConfig& cfg) {
  if (placements.empty()) throw usage_error("run_ablation: no placements");
  if (cfg.n_runs < 1) throw config_error("n_runs must be >= 1");
  cfg.encoder.validate();
  cfg.task.validate();
  for (const WiringSpec& w : placements) w.validate(cfg.encoder.n_layers);
  if (cfg.encoder.vocab_size < cfg.task.vocab_size)
    throw config_error("encoder vocab smaller than task vocab");
  if (cfg.encoder.max_seq_len < cfg.task.seq_len)
    throw config_error("encoder max_seq_len smaller than task seq_len");

  auto [train_ds, eval_ds] = generate_task(cfg.task);

  const size_t n_cells = placements.size() * static_cast<size_t>(cfg.n_runs);
  std::vector<AblationCell> cells(n_cells);

  auto run_cell = [&](size_t cell_index) {
    size_t pi = cell_index / static_cast<size_t>(cfg.n_runs);
    int run = static_cast<int>(cell_index % static_cast<size_t>(cfg.n_runs));
    const WiringSpec& wiring = placements[pi];

    AblationCell& cell = cells[cell_index];
    cell.placement = wiring.name();
    cell.run_index = run;
    cell.model_seed = mix_seed(cfg.seed, "model", static_cast<uint64_t>(run));
    cell.train_seed = mix_seed(cfg.seed, "train", static_cast<uint64_t>(run));

    Dataset local_train = cfg.subsample_train > 0
                              ? subsample(train_ds, cfg.subsample_train,
                                          mix_seed(cfg.seed, "subsample", static_cast<uint64_t>(run)))
                              : train_ds;

    EncoderConfig ec = cfg.encoder;
    ec.seed = cell.model_seed;
    EncoderModel model = build_encoder(ec);
    TrainHyper hp = cfg.hyper;
    hp.seed = cell.train_seed;

    auto t0 = std::chrono::steady_clock::now();
    TrainResult tr = train(model, wiring, local_train, hp);
    cell.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cell.final_train_loss = tr.train_loss.back();
    cell.best_val_loss = tr.val_loss.empty() ? tr.train_loss.back()
                                             : tr.val_loss[static_cast<size_t>(tr.best_epoch - 1)];

    t0 = std::chrono::steady_clock::now();
    Metrics clean = evaluate(model, wiring, eval_ds, {}, cfg.eval_batch);
    cell.clean = clean.clean_accuracy;
    for (size_t k = 0; k < cfg.perturbations.size(); ++k) {
      PerturbationSpec ps = cfg.perturbations[k];
      ps.seed = mix_seed(cfg.seed, "perturb_" + ps.label(), static_cast<uint64_t>(run));
      Metrics m = evaluate(model, wiring, eval_ds, ps, cfg.eval_batch);
      cell.perturbed.emplace_back(cfg.perturbations[k].label(), m.perturbed_accuracy);
    }
    cell.eval_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cell.flops = count_flops(cfg.encoder, wiring);
    cell.params = parameter_count(model);
  };

  int threads = std::max(1, cfg.threads);
  if (threads == 1) {
    for (size_t i = 0; i < n_cells; ++i) run_cell(i);
  } else {
    std::atomic<size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= n_cells) return;
          run_cell(i);
        }
      });
    for (auto& th : pool) th.join();
  }

  // aggregate per placement
  std::vector<AblationSummary> summaries;
  for (size_t pi = 0; pi < placements.size(); ++pi) {
    AblationSummary s;
    s.placement = placements[pi].name();
    s.flops = count_flops(cfg.encoder, placements[pi]);
    s.params = parameter_count(cfg.encoder);
    auto stats = [&](auto getter) {
      double mean = 0;
      for (int r = 0; r < cfg.n_runs; ++r)
        mean += getter(cells[pi * static_cast<size_t>(cfg.n_runs) + static_cast<size_t>(r)]);
      mean /= cfg.n_runs;
      double var = 0;
      for (int r = 0; r < cfg.n_runs; ++r) {
        double d = getter(cells[pi * static_cast<size_t>(cfg.n_runs) + static_cast<size_t>(r)]) - mean;
        var += d * d;
      }
      double sd = cfg.n_runs > 1 ? std::sqrt(var / (cfg.n_runs - 1)) : 0.0;
      return std::pair<double, double>{mean, sd};
    };
    auto [cm, csd] = stats([](const AblationCell& c) { return c.clean; });
    s.clean_mean = cm;
    s.clean_sd = csd;
    for (size_t k = 0; k < cfg.perturbations.size(); ++k) {
      auto [pm, psd] =
          stats([&](const AblationCell& c) { return c.perturbed[k].second; });
      s.perturbed.emplace_back(cfg.perturbations[k].label(), pm, psd);
    }
    summaries.push_back(std::move(s));
  }
  return {std::move(cells), std::move(summaries)};
}

}  // namespace imnet
