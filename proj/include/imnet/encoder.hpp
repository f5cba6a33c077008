#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "imnet/ode_blocks.hpp"
#include "imnet/tensor.hpp"

namespace imnet {

enum class Activation { gelu, relu };
const char* to_string(Activation a);
Activation activation_from_string(const std::string& s);

struct EncoderConfig {
  int vocab_size = 200;
  int d_model = 32;
  int n_heads = 2;
  int n_layers = 6;
  int ffn_dim = 64;
  int max_seq_len = 32;
  int num_classes = 2;
  Activation activation = Activation::gelu;
  uint64_t seed = 1;

  void validate() const;  // config_error; d_model must divide by n_heads
};

// one post-norm attention/FFN block (q,k,v,out projections, two layer-norm
// affines, two FFN projections)
struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gain, ln1_bias;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gain, ln2_bias;
};

struct EncoderModel {
  EncoderConfig cfg;
  Tensor tok_emb;  // [vocab, d_model]
  Tensor pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  Tensor cls_w;  // [d_model, num_classes]
  Tensor cls_b;  // [num_classes]
};

// how each inter-layer connection is stepped; gamma/T shared by all
// non-monotone layers
struct WiringSpec {
  std::vector<ConnectionMode> per_layer;
  EulerConfig euler;

  static WiringSpec uniform(ConnectionMode m, int n_layers, EulerConfig e = {});
  // implicit on layers [first..last] (1-based, inclusive), monotone elsewhere
  static WiringSpec implicit_group(int n_layers, int first, int last, EulerConfig e = {});

  int implicit_layer_count() const;
  bool has_implicit() const { return implicit_layer_count() > 0; }
  std::string name() const;
  void validate(int n_layers) const;  // config_error on length mismatch
};

using TokenBatch = std::vector<std::vector<int>>;

EncoderModel build_encoder(const EncoderConfig& cfg);

int64_t parameter_count(const EncoderConfig& cfg);   // closed-form audit
int64_t parameter_count(const EncoderModel& model);  // actual tensor sizes

// flat named view of every parameter tensor, in a fixed order
std::vector<std::pair<std::string, Tensor*>> named_parameters(EncoderModel& m);
std::vector<std::pair<std::string, const Tensor*>> named_parameters(const EncoderModel& m);

// the block as a state map h -> f(h) on [batch, seq, d_model], parameters
// captured as plain constants
LayerFn layer_fn(const EncoderModel& model, int layer_index);

// model with every parameter re-recorded as a leaf of `tape`, so training
// gradients can be queried per parameter; under a paused tape this is a
// plain copy
struct BoundEncoder {
  BoundEncoder(const EncoderModel& model, Tape& tape);
  EncoderModel bound;
  Tape* tape;

  Tensor embed_tokens(const TokenBatch& ids) const;  // token rows only
  Tensor forward_tokens(const WiringSpec& w, const TokenBatch& ids) const;
  // token embeddings from outside (e.g. perturbed); position rows are added
  // internally, so forward_tokens(ids) == forward_embeddings(embed_tokens(ids))
  Tensor forward_embeddings(const WiringSpec& w, const Tensor& tok_embeddings) const;
};

Tensor forward(const EncoderModel& model, const WiringSpec& w, const TokenBatch& ids,
               Tape& tape);
Tensor forward_from_embeddings(const EncoderModel& model, const WiringSpec& w,
                               const Tensor& tok_embeddings, Tape& tape);
// test hook: run the same wiring over caller-supplied layer maps
Tensor forward_with_layers(const EncoderModel& model, const WiringSpec& w,
                           const TokenBatch& ids, Tape& tape,
                           const std::vector<LayerFn>& layers);

// binary container: magic/version header, config, named shape-tagged blocks
void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_checkpoint(const std::filesystem::path& path);

}  // namespace imnet
