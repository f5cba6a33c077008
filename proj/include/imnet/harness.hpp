#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "imnet/encoder.hpp"
#include "imnet/rng.hpp"

namespace imnet {

enum class TaskKind { keyword_presence, majority_token, order_sensitive_pair };
const char* to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

// fixed marker tokens the synthetic tasks are built around
inline constexpr int kKeywordToken = 3;   // keyword_presence: present vs absent
inline constexpr int kOrderTokenA = 3;    // order_sensitive_pair: does A precede B
inline constexpr int kOrderTokenB = 4;
inline constexpr int kMajorityBase = 5;   // majority_token draws from [base, base+alphabet)
inline constexpr int kMajorityAlphabet = 4;

struct SyntheticTask {
  TaskKind kind = TaskKind::keyword_presence;
  int vocab_size = 200;
  int seq_len = 8;
  int num_classes = 2;
  int train_size = 2000;
  int eval_size = 500;
  uint64_t seed = 1;

  void validate() const;  // config_error
};

struct Dataset {
  TokenBatch tokens;
  std::vector<int> labels;

  size_t size() const { return tokens.size(); }
};

// deterministic generation; train and eval come from disjoint seed streams of
// the same distribution, classes exactly balanced (odd sizes: class 0 gets
// the extra example)
std::pair<Dataset, Dataset> generate_task(const SyntheticTask& task);

// recompute the label a generated sequence should carry (generation oracle)
int derive_label(TaskKind kind, const std::vector<int>& tokens);

// stratified subsample of n examples preserving class balance
Dataset subsample(const Dataset& ds, int n, uint64_t seed);

enum class PerturbKind { gaussian_embedding, sign_gradient_embedding, token_swap };
const char* to_string(PerturbKind k);
PerturbKind perturb_kind_from_string(const std::string& s);

struct PerturbationSpec {
  PerturbKind kind = PerturbKind::gaussian_embedding;
  double epsilon = 0.0;        // embedding perturbation size
  double swap_fraction = 0.0;  // token_swap only
  uint64_t seed = 0;

  std::string label() const;  // e.g. "sign_gradient_embedding:0.5"
};

// the three perturbation primitives; zero magnitude is the exact identity
Tensor perturb_gaussian(const Tensor& embeddings, double epsilon, Rng& rng);
Tensor perturb_sign_gradient(const EncoderModel& model, const WiringSpec& w,
                             const Tensor& embeddings, const std::vector<int>& labels,
                             double epsilon);
TokenBatch perturb_token_swap(const TokenBatch& ids, double swap_fraction, int vocab_size,
                              Rng& rng);

struct TrainHyper {
  double lr = 3e-4;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  int batch_size = 16;
  int epochs = 4;
  double val_fraction = 0.2;  // internal split for model selection; 0 = none
  uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> train_loss;  // mean batch loss per epoch
  std::vector<double> val_loss;    // empty when val_fraction = 0
  int best_epoch = 0;              // 1-based; epoch whose weights were kept
  int steps = 0;
};

// Adam on cross-entropy; selects the best validation-loss epoch. the model is
// updated in place. numeric_divergence_error if a loss goes non-finite.
TrainResult train(EncoderModel& model, const WiringSpec& w, const Dataset& data,
                  const TrainHyper& hp);

double dataset_loss(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                    int batch_size = 64);
double dataset_accuracy(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                        int batch_size = 64);

struct Metrics {
  double clean_accuracy = 0;
  double perturbed_accuracy = 0;  // = clean when no perturbation requested
  double flops_forward = 0;       // relative units, see count_flops
  double wall_time_seconds = 0;
  std::string config_fingerprint;
};

Metrics evaluate(const EncoderModel& model, const WiringSpec& w, const Dataset& ds,
                 const std::optional<PerturbationSpec>& pert = {}, int batch_size = 16,
                 const std::string& fingerprint = "");

// forward cost in units of one all-monotone encoder pass: (L + k T) / L for k
// implicit layers. exact rational version reduced to lowest terms.
double count_flops(const EncoderConfig& cfg, const WiringSpec& w);
std::pair<int64_t, int64_t> count_flops_ratio(const WiringSpec& w);

std::string fingerprint_of(const std::string& canonical);

struct AblationCell {
  std::string placement;
  int run_index = 0;
  uint64_t model_seed = 0, train_seed = 0;
  double clean = 0;
  std::vector<std::pair<std::string, double>> perturbed;
  double flops = 0;
  int64_t params = 0;
  double final_train_loss = 0, best_val_loss = 0;
  double train_seconds = 0, eval_seconds = 0;
};

struct AblationSummary {
  std::string placement;
  double flops = 0;
  int64_t params = 0;
  double clean_mean = 0, clean_sd = 0;
  std::vector<std::tuple<std::string, double, double>> perturbed;  // label, mean, sd
};

struct AblationConfig {
  EncoderConfig encoder;
  SyntheticTask task;
  TrainHyper hyper;
  std::vector<PerturbationSpec> perturbations;
  int n_runs = 3;
  int threads = 1;
  uint64_t seed = 0;
  int eval_batch = 16;
  int subsample_train = 0;  // 0 = use the full training set
};

// trains placements x runs cells (same seed ladder for every placement, so
// identical placements give identical rows) and aggregates mean/spread.
// results are deterministic and independent of the thread count.
std::pair<std::vector<AblationCell>, std::vector<AblationSummary>> run_ablation(
    const std::vector<WiringSpec>& placements, const AblationConfig& cfg);

}  // namespace imnet
