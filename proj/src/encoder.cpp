#include "imnet/encoder.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "imnet/rng.hpp"

namespace imnet {

const char* to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw config_error("unknown activation '" + s + "'");
}

void EncoderConfig::validate() const {
  if (vocab_size < 1) throw config_error("vocab_size must be >= 1");
  if (d_model < 1) throw config_error("d_model must be >= 1");
  if (n_heads < 1) throw config_error("n_heads must be >= 1");
  if (d_model % n_heads != 0)
    throw config_error("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                       std::to_string(n_heads));
  if (n_layers < 1) throw config_error("n_layers must be >= 1");
  if (ffn_dim < 1) throw config_error("ffn_dim must be >= 1");
  if (max_seq_len < 1) throw config_error("max_seq_len must be >= 1");
  if (num_classes < 2) throw config_error("num_classes must be >= 2");
}

// ---- wiring --------------------------------------------------------------------

WiringSpec WiringSpec::uniform(ConnectionMode m, int n_layers, EulerConfig e) {
  WiringSpec w;
  w.per_layer.assign(static_cast<size_t>(n_layers), m);
  w.euler = e;
  w.euler.mode = m == ConnectionMode::implicit_euler ? ConnectionMode::implicit_euler : m;
  return w;
}

WiringSpec WiringSpec::implicit_group(int n_layers, int first, int last, EulerConfig e) {
  if (first < 1 || last > n_layers || first > last)
    throw config_error("implicit_group: bad layer range " + std::to_string(first) + ".." +
                       std::to_string(last) + " for " + std::to_string(n_layers) + " layers");
  WiringSpec w;
  w.per_layer.assign(static_cast<size_t>(n_layers), ConnectionMode::monotone);
  for (int l = first; l <= last; ++l)
    w.per_layer[static_cast<size_t>(l - 1)] = ConnectionMode::implicit_euler;
  w.euler = e;
  w.euler.mode = ConnectionMode::implicit_euler;
  return w;
}

int WiringSpec::implicit_layer_count() const {
  int n = 0;
  for (ConnectionMode m : per_layer)
    if (m == ConnectionMode::implicit_euler) ++n;
  return n;
}

std::string WiringSpec::name() const {
  bool all_same = true;
  for (ConnectionMode m : per_layer)
    if (m != per_layer[0]) all_same = false;
  if (all_same && !per_layer.empty()) return to_string(per_layer[0]);
  std::string out = "layers";
  bool any = false;
  int start = -1;
  auto flush = [&](int end) {
    if (start < 0) return;
    out += any ? "," : "_";
    any = true;
    out += std::to_string(start + 1);
    if (end - 1 > start) out += "-" + std::to_string(end);
    start = -1;
  };
  for (int l = 0; l < static_cast<int>(per_layer.size()); ++l) {
    if (per_layer[static_cast<size_t>(l)] == ConnectionMode::implicit_euler) {
      if (start < 0) start = l;
    } else {
      flush(l);
    }
  }
  flush(static_cast<int>(per_layer.size()));
  return out;
}

void WiringSpec::validate(int n_layers) const {
  if (static_cast<int>(per_layer.size()) != n_layers)
    throw config_error("wiring covers " + std::to_string(per_layer.size()) + " layers, model has " +
                       std::to_string(n_layers));
  euler.validate();
}

// ---- construction ----------------------------------------------------------------

namespace {

Tensor init_normal(Rng& rng, Shape s, double scale) {
  int64_t n = shape_numel(s);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.normal() * scale;
  return Tensor(std::move(s), std::move(v));
}

}  // namespace

EncoderModel build_encoder(const EncoderConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, "encoder_init"));
  const int d = cfg.d_model, f = cfg.ffn_dim;
  EncoderModel m;
  m.cfg = cfg;
  m.tok_emb = init_normal(rng, {cfg.vocab_size, d}, 0.02);
  m.pos_emb = init_normal(rng, {cfg.max_seq_len, d}, 0.02);
  m.layers.reserve(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerParams p;
    p.wq = init_normal(rng, {d, d}, 0.02);
    p.bq = Tensor::zeros({d});
    p.wk = init_normal(rng, {d, d}, 0.02);
    p.bk = Tensor::zeros({d});
    p.wv = init_normal(rng, {d, d}, 0.02);
    p.bv = Tensor::zeros({d});
    p.wo = init_normal(rng, {d, d}, 0.02);
    p.bo = Tensor::zeros({d});
    p.ln1_gain = Tensor::full({d}, 1.0);
    p.ln1_bias = Tensor::zeros({d});
    p.w1 = init_normal(rng, {d, f}, 0.02);
    p.b1 = Tensor::zeros({f});
    p.w2 = init_normal(rng, {f, d}, 0.02);
    p.b2 = Tensor::zeros({d});
    p.ln2_gain = Tensor::full({d}, 1.0);
    p.ln2_bias = Tensor::zeros({d});
    m.layers.push_back(std::move(p));
  }
  m.cls_w = init_normal(rng, {d, cfg.num_classes}, 0.02);
  m.cls_b = Tensor::zeros({cfg.num_classes});
  return m;
}

int64_t parameter_count(const EncoderConfig& cfg) {
  int64_t d = cfg.d_model, f = cfg.ffn_dim;
  int64_t per_layer = 4 * (d * d + d)  // attention projections
                      + d * f + f + f * d + d  // ffn
                      + 4 * d;                 // two layer-norm affines
  return cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * per_layer +
         d * cfg.num_classes + cfg.num_classes;
}

int64_t parameter_count(const EncoderModel& model) {
  int64_t n = 0;
  for (auto& [name, t] : named_parameters(model)) n += t->size();
  return n;
}

std::vector<std::pair<std::string, Tensor*>> named_parameters(EncoderModel& m) {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("tok_emb", &m.tok_emb);
  out.emplace_back("pos_emb", &m.pos_emb);
  for (size_t l = 0; l < m.layers.size(); ++l) {
    LayerParams& p = m.layers[l];
    std::string pfx = "layer" + std::to_string(l) + ".";
    out.emplace_back(pfx + "wq", &p.wq);
    out.emplace_back(pfx + "bq", &p.bq);
    out.emplace_back(pfx + "wk", &p.wk);
    out.emplace_back(pfx + "bk", &p.bk);
    out.emplace_back(pfx + "wv", &p.wv);
    out.emplace_back(pfx + "bv", &p.bv);
    out.emplace_back(pfx + "wo", &p.wo);
    out.emplace_back(pfx + "bo", &p.bo);
    out.emplace_back(pfx + "ln1_gain", &p.ln1_gain);
    out.emplace_back(pfx + "ln1_bias", &p.ln1_bias);
    out.emplace_back(pfx + "w1", &p.w1);
    out.emplace_back(pfx + "b1", &p.b1);
    out.emplace_back(pfx + "w2", &p.w2);
    out.emplace_back(pfx + "b2", &p.b2);
    out.emplace_back(pfx + "ln2_gain", &p.ln2_gain);
    out.emplace_back(pfx + "ln2_bias", &p.ln2_bias);
  }
  out.emplace_back("cls_w", &m.cls_w);
  out.emplace_back("cls_b", &m.cls_b);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_parameters(const EncoderModel& m) {
  auto mut = named_parameters(const_cast<EncoderModel&>(m));
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mut.size());
  for (auto& [n, t] : mut) out.emplace_back(n, t);
  return out;
}

// ---- the block -----------------------------------------------------------------

namespace {

//          +------------------ attention ------------------+   +----- ffn -----+
//  x ->  q,k,v proj -> scores -> softmax -> ctx -> out proj -> +x -> LN -> w1,act,w2 -> +y -> LN
// (post-norm; the residual adds and norms inside the block stay as they are,
// wiring only changes how consecutive blocks connect)
LayerFn make_layer(const EncoderConfig& cfg, const LayerParams& p) {
  return [cfg, p](const Tensor& h) -> Tensor {
    if (h.rank() != 3 || h.shape()[2] != cfg.d_model)
      throw dimension_error("layer: want [batch,seq," + std::to_string(cfg.d_model) + "], got " +
                            shape_str(h.shape()));
    const int batch = h.shape()[0], seq = h.shape()[1];
    const int d = cfg.d_model, heads = cfg.n_heads, hd = d / heads;

    auto linear = [](const Tensor& x, const Tensor& w, const Tensor& b) {
      return add_rowvec(matmul(x, w), b);
    };
    auto split_heads = [&](const Tensor& t) {
      return reshape(permute(reshape(t, {batch, seq, heads, hd}), {0, 2, 1, 3}),
                     {batch * heads, seq, hd});
    };

    Tensor x = reshape(h, {batch * seq, d});
    Tensor q = split_heads(linear(x, p.wq, p.bq));
    Tensor k = split_heads(linear(x, p.wk, p.bk));
    Tensor v = split_heads(linear(x, p.wv, p.bv));
    Tensor att = softmax(scalar_mul(bmm(q, transpose_last(k)), 1.0 / std::sqrt(double(hd))));
    Tensor ctx = bmm(att, v);  // [batch*heads, seq, hd]
    ctx = reshape(permute(reshape(ctx, {batch, heads, seq, hd}), {0, 2, 1, 3}), {batch * seq, d});
    Tensor attn_out = linear(ctx, p.wo, p.bo);

    Tensor y = layer_norm(add(x, attn_out));
    y = add_rowvec(mul_rowvec(y, p.ln1_gain), p.ln1_bias);

    Tensor ff = linear(y, p.w1, p.b1);
    ff = cfg.activation == Activation::gelu ? gelu(ff) : relu(ff);
    ff = linear(ff, p.w2, p.b2);

    Tensor z = layer_norm(add(y, ff));
    z = add_rowvec(mul_rowvec(z, p.ln2_gain), p.ln2_bias);
    return reshape(z, {batch, seq, d});
  };
}

Tensor run_wiring(const EncoderConfig& cfg, const WiringSpec& w, Tensor h,
                  const std::vector<LayerFn>& layers, const Tensor& cls_w,
                  const Tensor& cls_b) {
  w.validate(cfg.n_layers);
  if (static_cast<int>(layers.size()) != cfg.n_layers)
    throw usage_error("expected " + std::to_string(cfg.n_layers) + " layer maps, got " +
                      std::to_string(layers.size()));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerFn& f = layers[static_cast<size_t>(l)];
    switch (w.per_layer[static_cast<size_t>(l)]) {
      case ConnectionMode::monotone:
        h = monotone_step(h, f);
        break;
      case ConnectionMode::explicit_euler:
        h = explicit_step(h, f, w.euler.step_size);
        break;
      case ConnectionMode::implicit_euler: {
        EulerConfig e = w.euler;
        e.mode = ConnectionMode::implicit_euler;
        h = im_connection(h, f, e);
        break;
      }
    }
  }
  const int batch = h.shape()[0];
  Tensor pooled = reshape(pick(h, 1, 0), {batch, cfg.d_model});  // first position
  return add_rowvec(matmul(pooled, cls_w), cls_b);
}

void check_token_batch(const EncoderConfig& cfg, const TokenBatch& ids) {
  if (ids.empty() || ids[0].empty()) throw usage_error("forward: empty token batch");
  size_t seq = ids[0].size();
  if (static_cast<int>(seq) > cfg.max_seq_len)
    throw usage_error("forward: sequence length " + std::to_string(seq) + " exceeds max " +
                      std::to_string(cfg.max_seq_len));
  for (const auto& row : ids)
    if (row.size() != seq) throw usage_error("forward: ragged token batch");
}

std::vector<LayerFn> model_layers(const EncoderModel& m) {
  std::vector<LayerFn> fns;
  fns.reserve(m.layers.size());
  for (const LayerParams& p : m.layers) fns.push_back(make_layer(m.cfg, p));
  return fns;
}

}  // namespace

LayerFn layer_fn(const EncoderModel& model, int layer_index) {
  if (layer_index < 0 || layer_index >= model.cfg.n_layers)
    throw usage_error("layer_fn: index " + std::to_string(layer_index) + " out of range");
  return make_layer(model.cfg, model.layers[static_cast<size_t>(layer_index)]);
}

// ---- bound forward ---------------------------------------------------------------

BoundEncoder::BoundEncoder(const EncoderModel& model, Tape& t) : tape(&t) {
  model.cfg.validate();
  bound.cfg = model.cfg;
  bound.layers.resize(model.layers.size());
  auto src = named_parameters(model);
  auto dst = named_parameters(bound);
  for (size_t i = 0; i < src.size(); ++i) *dst[i].second = t.leaf(*src[i].second);
}

Tensor BoundEncoder::embed_tokens(const TokenBatch& ids) const {
  check_token_batch(bound.cfg, ids);
  return embedding(bound.tok_emb, ids);
}

Tensor BoundEncoder::forward_tokens(const WiringSpec& w, const TokenBatch& ids) const {
  return forward_embeddings(w, embed_tokens(ids));
}

Tensor BoundEncoder::forward_embeddings(const WiringSpec& w, const Tensor& tok) const {
  if (tok.rank() != 3 || tok.shape()[2] != bound.cfg.d_model)
    throw dimension_error("forward: want embeddings [batch,seq," +
                          std::to_string(bound.cfg.d_model) + "], got " + shape_str(tok.shape()));
  const int batch = tok.shape()[0], seq = tok.shape()[1];
  if (seq > bound.cfg.max_seq_len)
    throw usage_error("forward: sequence length " + std::to_string(seq) + " exceeds max " +
                      std::to_string(bound.cfg.max_seq_len));
  TokenBatch pos_ids(static_cast<size_t>(batch));
  for (auto& row : pos_ids) {
    row.resize(static_cast<size_t>(seq));
    for (int s = 0; s < seq; ++s) row[static_cast<size_t>(s)] = s;
  }
  Tensor h = add(tok, embedding(bound.pos_emb, pos_ids));
  return run_wiring(bound.cfg, w, h, model_layers(bound), bound.cls_w, bound.cls_b);
}

Tensor forward(const EncoderModel& model, const WiringSpec& w, const TokenBatch& ids,
               Tape& tape) {
  return BoundEncoder(model, tape).forward_tokens(w, ids);
}

Tensor forward_from_embeddings(const EncoderModel& model, const WiringSpec& w,
                               const Tensor& tok_embeddings, Tape& tape) {
  return BoundEncoder(model, tape).forward_embeddings(w, tok_embeddings);
}

Tensor forward_with_layers(const EncoderModel& model, const WiringSpec& w,
                           const TokenBatch& ids, Tape& tape,
                           const std::vector<LayerFn>& layers) {
  BoundEncoder be(model, tape);
  Tensor tok = be.embed_tokens(ids);
  const int batch = tok.shape()[0], seq = tok.shape()[1];
  TokenBatch pos_ids(static_cast<size_t>(batch));
  for (auto& row : pos_ids) {
    row.resize(static_cast<size_t>(seq));
    for (int s = 0; s < seq; ++s) row[static_cast<size_t>(s)] = s;
  }
  Tensor h = add(tok, embedding(be.bound.pos_emb, pos_ids));
  return run_wiring(be.bound.cfg, w, h, layers, be.bound.cls_w, be.bound.cls_b);
}

// ---- checkpoint -----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'I', 'M', 'N', 'E', 'T', 'C', 'K', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T get(std::ifstream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw usage_error("checkpoint: truncated file");
  return v;
}

void put_string(std::ofstream& out, const std::string& s) {
  put(out, static_cast<uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::ifstream& in) {
  uint32_t n = get<uint32_t>(in);
  if (n > (1u << 20)) throw usage_error("checkpoint: implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw usage_error("checkpoint: truncated file");
  return s;
}

}  // namespace

void save_checkpoint(const EncoderModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw usage_error("checkpoint: cannot open " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put(out, kVersion);
  const EncoderConfig& c = model.cfg;
  put(out, static_cast<int32_t>(c.vocab_size));
  put(out, static_cast<int32_t>(c.d_model));
  put(out, static_cast<int32_t>(c.n_heads));
  put(out, static_cast<int32_t>(c.n_layers));
  put(out, static_cast<int32_t>(c.ffn_dim));
  put(out, static_cast<int32_t>(c.max_seq_len));
  put(out, static_cast<int32_t>(c.num_classes));
  put(out, static_cast<uint8_t>(c.activation == Activation::gelu ? 0 : 1));
  put(out, static_cast<uint64_t>(c.seed));
  auto params = named_parameters(model);
  put(out, static_cast<uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    put_string(out, name);
    put(out, static_cast<uint32_t>(t->rank()));
    for (int d : t->shape()) put(out, static_cast<int32_t>(d));
    out.write(reinterpret_cast<const char*>(t->data().data()),
              static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw usage_error("checkpoint: write failed for " + path.string());
}

EncoderModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw usage_error("checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw usage_error("checkpoint: bad magic in " + path.string());
  uint32_t version = get<uint32_t>(in);
  if (version != kVersion)
    throw usage_error("checkpoint: unsupported version " + std::to_string(version));
  EncoderConfig c;
  c.vocab_size = get<int32_t>(in);
  c.d_model = get<int32_t>(in);
  c.n_heads = get<int32_t>(in);
  c.n_layers = get<int32_t>(in);
  c.ffn_dim = get<int32_t>(in);
  c.max_seq_len = get<int32_t>(in);
  c.num_classes = get<int32_t>(in);
  c.activation = get<uint8_t>(in) == 0 ? Activation::gelu : Activation::relu;
  c.seed = get<uint64_t>(in);
  EncoderModel m = build_encoder(c);  // allocates the right shapes
  auto params = named_parameters(m);
  uint32_t blocks = get<uint32_t>(in);
  if (blocks != params.size())
    throw usage_error("checkpoint: " + std::to_string(blocks) + " blocks, model wants " +
                      std::to_string(params.size()));
  for (auto& [name, t] : params) {
    std::string bname = get_string(in);
    if (bname != name)
      throw usage_error("checkpoint: block '" + bname + "' where '" + name + "' expected");
    uint32_t rank = get<uint32_t>(in);
    Shape s(rank);
    for (uint32_t d = 0; d < rank; ++d) s[d] = get<int32_t>(in);
    if (s != t->shape())
      throw usage_error("checkpoint: block '" + name + "' has shape " + shape_str(s) +
                        ", model wants " + shape_str(t->shape()));
    std::vector<double> payload(static_cast<size_t>(shape_numel(s)));
    in.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!in) throw usage_error("checkpoint: truncated payload for '" + name + "'");
    *t = Tensor(s, std::move(payload));
  }
  return m;
}

}  // namespace imnet
