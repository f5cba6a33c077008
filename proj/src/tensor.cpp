#include "imnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace imnet {

namespace {

std::shared_ptr<const std::vector<double>> make_store(std::vector<double> v) {
  return std::make_shared<const std::vector<double>>(std::move(v));
}

void check(bool ok, const std::string& msg) {
  if (!ok) throw dimension_error(msg);
}

std::vector<int64_t> strides_of(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  for (int d : shape_)
    if (d < 1) throw dimension_error("tensor dims must be positive, got " + shape_str(shape_));
  if (shape_numel(shape_) != static_cast<int64_t>(values.size()))
    throw dimension_error("shape " + shape_str(shape_) + " wants " +
                          std::to_string(shape_numel(shape_)) + " values, got " +
                          std::to_string(values.size()));
  store_ = make_store(std::move(values));
}

Tensor Tensor::zeros(Shape s) {
  int64_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::full(Shape s, double v) {
  int64_t n = shape_numel(s);
  return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
}

std::span<const double> Tensor::data() const {
  if (!store_) return {};
  return {store_->data(), store_->size()};
}

double Tensor::value() const {
  if (size() != 1) throw usage_error("value(): tensor has shape " + shape_str(shape_) + ", want a scalar");
  return (*store_)[0];
}

bool Tensor::all_finite() const {
  if (!store_) return false;
  for (double v : *store_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.size() != b.size()) return false;
  if (a.size() == 0) return true;
  return std::memcmp(a.data().data(), b.data().data(),
                     static_cast<size_t>(a.size()) * sizeof(double)) == 0;
}

// ---- tape plumbing ----------------------------------------------------------

namespace {

// an op's output goes on the unique actively-recording tape among its inputs;
// tensors from paused or foreign tapes participate by value
Tape* resolve_tape(std::initializer_list<const Tensor*> ins) {
  Tape* t = nullptr;
  for (const Tensor* x : ins) {
    Tape* xt = x->tape();
    if (!xt || !xt->recording()) continue;
    if (t && t != xt)
      throw usage_error("operation mixes tensors from two recording tapes");
    t = xt;
  }
  return t;
}

Tensor finish(OpKind op, std::initializer_list<const Tensor*> ins, Shape out_shape,
              std::vector<double> out_data, std::vector<double> aux = {},
              std::vector<int> iaux = {}) {
  Tape* t = resolve_tape(ins);
  if (!t) return Tensor(std::move(out_shape), std::move(out_data));
  std::vector<Tensor> in;
  in.reserve(ins.size());
  for (const Tensor* x : ins) in.push_back(*x);
  return t->emit(op, std::move(in), std::move(out_shape), std::move(out_data),
                 std::move(aux), std::move(iaux));
}

}  // namespace

Tensor Tape::emit(OpKind op, std::vector<Tensor> in, Shape out_shape,
                  std::vector<double> out_data, std::vector<double> aux,
                  std::vector<int> iaux) {
  Tensor out;
  out.shape_ = std::move(out_shape);
  out.store_ = make_store(std::move(out_data));
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{op, std::move(in), out, std::move(aux), std::move(iaux)});
  return out;
}

Tensor Tape::leaf(const Tensor& value) {
  if (value.empty()) throw usage_error("leaf: empty tensor");
  if (!recording()) {
    Tensor copy;
    copy.shape_ = value.shape_;
    copy.store_ = value.store_;
    return copy;  // pause makes leaves plain constants
  }
  std::vector<double> data(value.data().begin(), value.data().end());
  return emit(OpKind::leaf, {}, value.shape(), std::move(data));
}

// ---- backward dispatch -------------------------------------------------------

namespace {

// grad rules per op; gradient expressions are built with the public ops, so
// when `recording` is on they land on the tape and stay differentiable.
// fills gin (same arity as nd.in) for every operand with need[i] set.
void op_backward(const Tape::Node& nd, const Tensor& g, const std::vector<char>& need,
                 bool recording, std::vector<Tensor>& gin) {
  auto a = [&nd](size_t i) -> const Tensor& { return nd.in[i]; };
  switch (nd.op) {
    case OpKind::leaf:
      break;
    case OpKind::add:
      if (need[0]) gin[0] = g;
      if (need[1]) gin[1] = g;
      break;
    case OpKind::sub:
      if (need[0]) gin[0] = g;
      if (need[1]) gin[1] = scalar_mul(g, -1.0);
      break;
    case OpKind::mul:
      if (need[0]) gin[0] = mul(g, a(1));
      if (need[1]) gin[1] = mul(g, a(0));
      break;
    case OpKind::scalar_add:
      if (need[0]) gin[0] = g;
      break;
    case OpKind::scalar_mul:
      if (need[0]) gin[0] = scalar_mul(g, nd.aux[0]);
      break;
    case OpKind::matmul:
      if (need[0]) gin[0] = matmul(g, transpose(a(1)));
      if (need[1]) gin[1] = matmul(transpose(a(0)), g);
      break;
    case OpKind::bmm:
      if (need[0]) gin[0] = bmm(g, transpose_last(a(1)));
      if (need[1]) gin[1] = bmm(transpose_last(a(0)), g);
      break;
    case OpKind::transpose:
      if (need[0]) gin[0] = transpose(g);
      break;
    case OpKind::transpose_last:
      if (need[0]) gin[0] = transpose_last(g);
      break;
    case OpKind::reshape:
      if (need[0]) gin[0] = reshape(g, a(0).shape());
      break;
    case OpKind::permute: {
      if (!need[0]) break;
      std::vector<int> inv(nd.iaux.size());
      for (size_t i = 0; i < nd.iaux.size(); ++i) inv[static_cast<size_t>(nd.iaux[i])] = static_cast<int>(i);
      gin[0] = permute(g, inv);
      break;
    }
    case OpKind::add_rowvec:
      if (need[0]) gin[0] = g;
      if (need[1]) gin[1] = sum_rows(g);
      break;
    case OpKind::mul_rowvec:
      if (need[0]) gin[0] = mul_rowvec(g, a(1));
      if (need[1]) gin[1] = sum_rows(mul(g, a(0)));
      break;
    case OpKind::sum_rows:
      if (need[0]) gin[0] = expand_rows(g, a(0).shape()[0]);
      break;
    case OpKind::expand_rows:
      if (need[0]) gin[0] = sum_rows(g);
      break;
    case OpKind::sum_last:
      if (need[0]) gin[0] = expand_last(g, a(0).shape().back());
      break;
    case OpKind::expand_last:
      if (need[0]) gin[0] = sum_last(g);
      break;
    case OpKind::spread_scalar:
      if (need[0]) gin[0] = sum_all(g);
      break;
    case OpKind::sum_all:
      if (need[0]) gin[0] = spread_scalar(g, a(0).shape());
      break;
    case OpKind::sum_sq:
      if (need[0]) gin[0] = scalar_mul(mul(a(0), spread_scalar(g, a(0).shape())), 2.0);
      break;
    case OpKind::relu: {
      if (!need[0]) break;
      std::vector<double> mask(static_cast<size_t>(a(0).size()));
      auto xv = a(0).data();
      for (size_t i = 0; i < mask.size(); ++i) mask[i] = xv[i] > 0.0 ? 1.0 : 0.0;
      gin[0] = mul(g, Tensor(a(0).shape(), std::move(mask)));
      break;
    }
    case OpKind::tanh:
      // d tanh = 1 - tanh^2, rebuilt from the saved output
      if (need[0]) gin[0] = mul(g, scalar_add(scalar_mul(mul(nd.out, nd.out), -1.0), 1.0));
      break;
    case OpKind::exp:
      if (need[0]) gin[0] = mul(g, nd.out);
      break;
    case OpKind::rsqrt_shift:
      // d (x+s)^-1/2 = -1/2 (x+s)^-3/2 = -1/2 y^3
      if (need[0]) gin[0] = scalar_mul(mul(g, mul(nd.out, mul(nd.out, nd.out))), -0.5);
      break;
    case OpKind::reciprocal:
      if (need[0]) gin[0] = scalar_mul(mul(g, mul(nd.out, nd.out)), -1.0);
      break;
    case OpKind::embedding: {
      if (!need[0]) break;
      if (recording)
        throw usage_error("embedding: gradient cannot be recorded as tape nodes");
      const Tensor& table = a(0);
      int rows = nd.iaux[0], cols = nd.iaux[1];
      int dim = table.shape()[1];
      std::vector<double> gt(static_cast<size_t>(table.size()), 0.0);
      auto gv = g.data();
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
          int id = nd.iaux[2 + r * cols + c];
          const double* src = gv.data() + (static_cast<int64_t>(r) * cols + c) * dim;
          double* dst = gt.data() + static_cast<int64_t>(id) * dim;
          for (int d = 0; d < dim; ++d) dst[d] += src[d];
        }
      gin[0] = Tensor(table.shape(), std::move(gt));
      break;
    }
    case OpKind::pick: {
      if (!need[0]) break;
      if (recording)
        throw usage_error("pick: gradient cannot be recorded as tape nodes");
      const Shape& is = a(0).shape();
      int axis = nd.iaux[0], index = nd.iaux[1];
      auto ist = strides_of(is);
      std::vector<double> gx(static_cast<size_t>(a(0).size()), 0.0);
      auto gv = g.data();
      // walk the output (= input minus `axis`) and scatter into the slice
      int64_t n = g.size();
      std::vector<int> idx(nd.out.shape().size(), 0);
      for (int64_t lin = 0; lin < n; ++lin) {
        int64_t off = index * ist[static_cast<size_t>(axis)];
        int oi = 0;
        for (int d = 0; d < static_cast<int>(is.size()); ++d) {
          if (d == axis) continue;
          off += idx[static_cast<size_t>(oi)] * ist[static_cast<size_t>(d)];
          ++oi;
        }
        gx[static_cast<size_t>(off)] = gv[static_cast<size_t>(lin)];
        for (int d = static_cast<int>(idx.size()) - 1; d >= 0; --d) {
          if (++idx[static_cast<size_t>(d)] < nd.out.shape()[static_cast<size_t>(d)]) break;
          idx[static_cast<size_t>(d)] = 0;
        }
      }
      gin[0] = Tensor(is, std::move(gx));
      break;
    }
    case OpKind::cross_entropy: {
      if (!need[0]) break;
      if (recording)
        throw usage_error("cross_entropy: gradient cannot be recorded as tape nodes");
      const Tensor& logits = a(0);
      int batch = logits.shape()[0], classes = logits.shape()[1];
      double scale = g.value() / batch;
      auto lv = logits.data();
      std::vector<double> gx(static_cast<size_t>(logits.size()));
      for (int i = 0; i < batch; ++i) {
        const double* row = lv.data() + static_cast<int64_t>(i) * classes;
        double m = row[0];
        for (int j = 1; j < classes; ++j) m = std::max(m, row[j]);
        double z = 0;
        for (int j = 0; j < classes; ++j) z += std::exp(row[j] - m);
        for (int j = 0; j < classes; ++j) {
          double p = std::exp(row[j] - m) / z;
          gx[static_cast<size_t>(i) * classes + j] =
              (p - (j == nd.iaux[static_cast<size_t>(i)] ? 1.0 : 0.0)) * scale;
        }
      }
      gin[0] = Tensor(logits.shape(), std::move(gx));
      break;
    }
  }
}

void accumulate(Tensor& slot, Tensor contrib) {
  if (slot.empty())
    slot = std::move(contrib);
  else
    slot = add(slot, contrib);
}

}  // namespace

void Tape::backward(const Tensor& root, bool retain_all) {
  if (root.tape() != this) throw usage_error("backward: root is not recorded on this tape");
  if (root.size() != 1)
    throw usage_error("backward: root has shape " + shape_str(root.shape()) + ", want a scalar");

  RecordingPause pause(*this);  // gradients of this sweep are plain numbers
  const int last = root.node();
  auto local = [this](const Tensor& t) { return t.tape() == this && t.node() >= 0; };

  std::vector<char> reach(static_cast<size_t>(last) + 1, 0);
  reach[static_cast<size_t>(last)] = 1;
  for (int j = last; j >= 0; --j) {
    if (!reach[static_cast<size_t>(j)]) continue;
    for (const Tensor& t : nodes_[static_cast<size_t>(j)].in)
      if (local(t)) reach[static_cast<size_t>(t.node())] = 1;
  }

  grads_.clear();
  backward_ran_ = true;
  std::vector<Tensor> g(static_cast<size_t>(last) + 1);
  g[static_cast<size_t>(last)] = Tensor::full(root.shape(), 1.0);

  std::vector<Tensor> gin;
  for (int j = last; j >= 0; --j) {
    Tensor& gj = g[static_cast<size_t>(j)];
    if (!reach[static_cast<size_t>(j)] || gj.empty()) continue;
    const Node& nd = nodes_[static_cast<size_t>(j)];
    if (nd.op != OpKind::leaf) {
      std::vector<char> need(nd.in.size());
      for (size_t i = 0; i < nd.in.size(); ++i) need[i] = local(nd.in[i]) ? 1 : 0;
      gin.assign(nd.in.size(), Tensor());
      op_backward(nd, gj, need, false, gin);
      for (size_t i = 0; i < nd.in.size(); ++i)
        if (!gin[i].empty()) accumulate(g[static_cast<size_t>(nd.in[i].node())], std::move(gin[i]));
    }
    if (retain_all || nd.op == OpKind::leaf)
      grads_.emplace(j, std::move(gj));
    gj = Tensor();  // free intermediates as the sweep passes them
  }
}

Tensor Tape::gradient(const Tensor& x) const {
  if (!backward_ran_) throw usage_error("gradient: backward has not run on this tape");
  if (x.tape() != this) throw usage_error("gradient: tensor is not recorded on this tape");
  auto it = grads_.find(x.node());
  if (it == grads_.end()) return Tensor::zeros(x.shape());
  return it->second;
}

Tensor Tape::grad_of(const Tensor& root, const Tensor& wrt) {
  if (root.tape() != this) throw usage_error("grad_of: root is not recorded on this tape");
  if (wrt.tape() != this) throw usage_error("grad_of: wrt is not recorded on this tape");
  if (root.size() != 1)
    throw usage_error("grad_of: root has shape " + shape_str(root.shape()) + ", want a scalar");

  const int last = root.node(), first = wrt.node();
  if (first > last) return Tensor::zeros(wrt.shape());
  auto local = [this](const Tensor& t) { return t.tape() == this && t.node() >= 0; };

  // restrict the sweep to nodes on a path root -> wrt
  std::vector<char> anc(static_cast<size_t>(last) + 1, 0);
  anc[static_cast<size_t>(last)] = 1;
  for (int j = last; j >= first; --j) {
    if (!anc[static_cast<size_t>(j)]) continue;
    for (const Tensor& t : nodes_[static_cast<size_t>(j)].in)
      if (local(t) && t.node() >= first) anc[static_cast<size_t>(t.node())] = 1;
  }
  if (!anc[static_cast<size_t>(first)]) return Tensor::zeros(wrt.shape());

  std::vector<char> rel(static_cast<size_t>(last - first) + 1, 0);
  rel[0] = 1;  // wrt
  for (int j = first + 1; j <= last; ++j) {
    if (!anc[static_cast<size_t>(j)]) continue;
    for (const Tensor& t : nodes_[static_cast<size_t>(j)].in)
      if (local(t) && t.node() >= first && rel[static_cast<size_t>(t.node() - first)]) {
        rel[static_cast<size_t>(j - first)] = 1;
        break;
      }
  }
  if (!rel[static_cast<size_t>(last - first)]) return Tensor::zeros(wrt.shape());

  const bool rec = recording();
  std::vector<Tensor> g(static_cast<size_t>(last - first) + 1);
  g[static_cast<size_t>(last - first)] = Tensor::full(root.shape(), 1.0);
  std::vector<Tensor> gin;
  for (int j = last; j > first; --j) {
    Tensor gj = std::move(g[static_cast<size_t>(j - first)]);
    if (!rel[static_cast<size_t>(j - first)] || gj.empty()) continue;
    // copy: emitting gradient nodes below may reallocate the node storage
    Node nd = node(j);
    std::vector<char> need(nd.in.size());
    for (size_t i = 0; i < nd.in.size(); ++i)
      need[i] = (local(nd.in[i]) && nd.in[i].node() >= first &&
                 rel[static_cast<size_t>(nd.in[i].node() - first)])
                    ? 1
                    : 0;
    gin.assign(nd.in.size(), Tensor());
    op_backward(nd, gj, need, rec, gin);
    for (size_t i = 0; i < nd.in.size(); ++i)
      if (!gin[i].empty())
        accumulate(g[static_cast<size_t>(nd.in[i].node() - first)], std::move(gin[i]));
  }
  if (g[0].empty()) return Tensor::zeros(wrt.shape());
  return g[0];
}

// ---- elementwise and scalar ops ----------------------------------------------

namespace {
void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
void check_nonempty(const char* op, const Tensor& x) {
  if (x.empty()) throw usage_error(std::string(op) + ": empty tensor");
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_nonempty("add", a);
  check_same_shape("add", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return finish(OpKind::add, {&a, &b}, a.shape(), std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_nonempty("sub", a);
  check_same_shape("sub", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return finish(OpKind::sub, {&a, &b}, a.shape(), std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_nonempty("mul", a);
  check_same_shape("mul", a, b);
  auto av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(a.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return finish(OpKind::mul, {&a, &b}, a.shape(), std::move(out));
}

Tensor scalar_add(const Tensor& x, double c) {
  check_nonempty("scalar_add", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + c;
  return finish(OpKind::scalar_add, {&x}, x.shape(), std::move(out), {c});
}

Tensor scalar_mul(const Tensor& x, double c) {
  check_nonempty("scalar_mul", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * c;
  return finish(OpKind::scalar_mul, {&x}, x.shape(), std::move(out), {c});
}

// ---- linear algebra -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_nonempty("matmul", a);
  check(a.rank() == 2 && b.rank() == 2 && a.shape()[1] == b.shape()[0],
        "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* orow = out.data() + static_cast<int64_t>(i) * n;
    const double* arow = av.data() + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      double s = arow[kk];
      const double* brow = bv.data() + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) orow[j] += s * brow[j];
    }
  }
  return finish(OpKind::matmul, {&a, &b}, {m, n}, std::move(out));
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  check_nonempty("bmm", a);
  check(a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0] &&
            a.shape()[2] == b.shape()[1],
        "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  int g = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  auto av = a.data(), bv = b.data();
  std::vector<double> out(static_cast<size_t>(g) * m * n, 0.0);
  for (int q = 0; q < g; ++q) {
    const double* abase = av.data() + static_cast<int64_t>(q) * m * k;
    const double* bbase = bv.data() + static_cast<int64_t>(q) * k * n;
    double* obase = out.data() + static_cast<int64_t>(q) * m * n;
    for (int i = 0; i < m; ++i) {
      double* orow = obase + static_cast<int64_t>(i) * n;
      const double* arow = abase + static_cast<int64_t>(i) * k;
      for (int kk = 0; kk < k; ++kk) {
        double s = arow[kk];
        const double* brow = bbase + static_cast<int64_t>(kk) * n;
        for (int j = 0; j < n; ++j) orow[j] += s * brow[j];
      }
    }
  }
  return finish(OpKind::bmm, {&a, &b}, {g, m, n}, std::move(out));
}

Tensor transpose(const Tensor& x) {
  check_nonempty("transpose", x);
  check(x.rank() == 2, "transpose: want rank 2, got " + shape_str(x.shape()));
  int m = x.shape()[0], n = x.shape()[1];
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out[static_cast<size_t>(j) * m + i] = xv[static_cast<size_t>(i) * n + j];
  return finish(OpKind::transpose, {&x}, {n, m}, std::move(out));
}

Tensor transpose_last(const Tensor& x) {
  check_nonempty("transpose_last", x);
  check(x.rank() == 3, "transpose_last: want rank 3, got " + shape_str(x.shape()));
  int g = x.shape()[0], m = x.shape()[1], n = x.shape()[2];
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(g) * m * n);
  for (int q = 0; q < g; ++q) {
    const double* src = xv.data() + static_cast<int64_t>(q) * m * n;
    double* dst = out.data() + static_cast<int64_t>(q) * m * n;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        dst[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
  }
  return finish(OpKind::transpose_last, {&x}, {g, n, m}, std::move(out));
}

// ---- structural ops -------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape s) {
  check_nonempty("reshape", x);
  for (int d : s)
    if (d < 1) throw dimension_error("reshape: dims must be positive, got " + shape_str(s));
  check(shape_numel(s) == x.size(), "reshape: " + shape_str(x.shape()) + " has " +
                                        std::to_string(x.size()) + " values, target " +
                                        shape_str(s) + " wants " +
                                        std::to_string(shape_numel(s)));
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish(OpKind::reshape, {&x}, std::move(s), std::move(out));
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  check_nonempty("permute", x);
  check(static_cast<int>(axes.size()) == x.rank(),
        "permute: axes size " + std::to_string(axes.size()) + " != rank of " +
            shape_str(x.shape()));
  std::vector<char> seen(axes.size(), 0);
  for (int a : axes) {
    if (a < 0 || a >= x.rank() || seen[static_cast<size_t>(a)])
      throw usage_error("permute: axes must be a permutation of 0.." +
                        std::to_string(x.rank() - 1));
    seen[static_cast<size_t>(a)] = 1;
  }
  Shape os(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) os[i] = x.shape()[static_cast<size_t>(axes[i])];
  auto ist = strides_of(x.shape());
  std::vector<int64_t> pick_stride(axes.size());
  for (size_t i = 0; i < axes.size(); ++i) pick_stride[i] = ist[static_cast<size_t>(axes[i])];
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  std::vector<int> idx(axes.size(), 0);
  for (int64_t lin = 0; lin < x.size(); ++lin) {
    int64_t off = 0;
    for (size_t d = 0; d < axes.size(); ++d) off += idx[d] * pick_stride[d];
    out[static_cast<size_t>(lin)] = xv[static_cast<size_t>(off)];
    for (int d = static_cast<int>(idx.size()) - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  std::vector<int> iaux(axes.begin(), axes.end());
  return finish(OpKind::permute, {&x}, std::move(os), std::move(out), {}, std::move(iaux));
}

Tensor pick(const Tensor& x, int axis, int index) {
  check_nonempty("pick", x);
  if (axis < 0 || axis >= x.rank())
    throw usage_error("pick: axis " + std::to_string(axis) + " out of range for " +
                      shape_str(x.shape()));
  if (index < 0 || index >= x.shape()[static_cast<size_t>(axis)])
    throw usage_error("pick: index " + std::to_string(index) + " out of range for " +
                      shape_str(x.shape()));
  Shape os;
  for (int d = 0; d < x.rank(); ++d)
    if (d != axis) os.push_back(x.shape()[static_cast<size_t>(d)]);
  auto ist = strides_of(x.shape());
  auto xv = x.data();
  int64_t n = shape_numel(os);
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int> idx(os.size(), 0);
  for (int64_t lin = 0; lin < n; ++lin) {
    int64_t off = index * ist[static_cast<size_t>(axis)];
    int oi = 0;
    for (int d = 0; d < x.rank(); ++d) {
      if (d == axis) continue;
      off += idx[static_cast<size_t>(oi)] * ist[static_cast<size_t>(d)];
      ++oi;
    }
    out[static_cast<size_t>(lin)] = xv[static_cast<size_t>(off)];
    for (int d = static_cast<int>(idx.size()) - 1; d >= 0; --d) {
      if (++idx[static_cast<size_t>(d)] < os[static_cast<size_t>(d)]) break;
      idx[static_cast<size_t>(d)] = 0;
    }
  }
  return finish(OpKind::pick, {&x}, std::move(os), std::move(out), {}, {axis, index});
}

// ---- row-vector and last-axis forms ----------------------------------------------

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  check_nonempty("add_rowvec", m);
  check(m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.shape()[0],
        "add_rowvec: incompatible " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
  int r = m.shape()[0], c = m.shape()[1];
  auto mv = m.data(), vv = v.data();
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] = mv[static_cast<size_t>(i) * c + j] + vv[static_cast<size_t>(j)];
  return finish(OpKind::add_rowvec, {&m, &v}, m.shape(), std::move(out));
}

Tensor mul_rowvec(const Tensor& m, const Tensor& v) {
  check_nonempty("mul_rowvec", m);
  check(m.rank() == 2 && v.rank() == 1 && m.shape()[1] == v.shape()[0],
        "mul_rowvec: incompatible " + shape_str(m.shape()) + " * " + shape_str(v.shape()));
  int r = m.shape()[0], c = m.shape()[1];
  auto mv = m.data(), vv = v.data();
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j)
      out[static_cast<size_t>(i) * c + j] = mv[static_cast<size_t>(i) * c + j] * vv[static_cast<size_t>(j)];
  return finish(OpKind::mul_rowvec, {&m, &v}, m.shape(), std::move(out));
}

Tensor sum_rows(const Tensor& m) {
  check_nonempty("sum_rows", m);
  check(m.rank() == 2, "sum_rows: want rank 2, got " + shape_str(m.shape()));
  int r = m.shape()[0], c = m.shape()[1];
  auto mv = m.data();
  std::vector<double> out(static_cast<size_t>(c), 0.0);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j)] += mv[static_cast<size_t>(i) * c + j];
  return finish(OpKind::sum_rows, {&m}, {c}, std::move(out));
}

Tensor expand_rows(const Tensor& v, int rows) {
  check_nonempty("expand_rows", v);
  check(v.rank() == 1, "expand_rows: want rank 1, got " + shape_str(v.shape()));
  if (rows < 1) throw usage_error("expand_rows: rows must be positive");
  int c = v.shape()[0];
  auto vv = v.data();
  std::vector<double> out(static_cast<size_t>(rows) * c);
  for (int i = 0; i < rows; ++i)
    std::copy(vv.begin(), vv.end(), out.begin() + static_cast<int64_t>(i) * c);
  return finish(OpKind::expand_rows, {&v}, {rows, c}, std::move(out), {}, {rows});
}

Tensor sum_last(const Tensor& x) {
  check_nonempty("sum_last", x);
  check(x.rank() >= 1, "sum_last: want rank >= 1");
  int n = x.shape().back();
  int64_t rows = x.size() / n;
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(rows), 0.0);
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = xv.data() + i * n;
    double s = 0;
    for (int j = 0; j < n; ++j) s += row[j];
    out[static_cast<size_t>(i)] = s;
  }
  Shape os(x.shape().begin(), x.shape().end() - 1);
  return finish(OpKind::sum_last, {&x}, std::move(os), std::move(out));
}

Tensor expand_last(const Tensor& x, int n) {
  check_nonempty("expand_last", x);
  if (n < 1) throw usage_error("expand_last: n must be positive");
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()) * n);
  for (int64_t i = 0; i < x.size(); ++i)
    for (int j = 0; j < n; ++j) out[static_cast<size_t>(i * n + j)] = xv[static_cast<size_t>(i)];
  Shape os = x.shape();
  os.push_back(n);
  return finish(OpKind::expand_last, {&x}, std::move(os), std::move(out), {}, {n});
}

Tensor spread_scalar(const Tensor& s, Shape shape) {
  check_nonempty("spread_scalar", s);
  if (s.size() != 1) throw usage_error("spread_scalar: want a scalar, got " + shape_str(s.shape()));
  int64_t n = shape_numel(shape);
  std::vector<double> out(static_cast<size_t>(n), s.at(0));
  return finish(OpKind::spread_scalar, {&s}, std::move(shape), std::move(out));
}

Tensor sum_all(const Tensor& x) {
  check_nonempty("sum_all", x);
  auto xv = x.data();
  double s = 0;
  for (double v : xv) s += v;
  return finish(OpKind::sum_all, {&x}, {1}, {s});
}

Tensor sum_of_squares(const Tensor& x) {
  check_nonempty("sum_of_squares", x);
  auto xv = x.data();
  double s = 0;
  for (double v : xv) s += v * v;
  return finish(OpKind::sum_sq, {&x}, {1}, {s});
}

// ---- elementwise nonlinearities -----------------------------------------------

Tensor relu(const Tensor& x) {
  check_nonempty("relu", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return finish(OpKind::relu, {&x}, x.shape(), std::move(out));
}

Tensor tanh(const Tensor& x) {
  check_nonempty("tanh", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  return finish(OpKind::tanh, {&x}, x.shape(), std::move(out));
}

Tensor exp(const Tensor& x) {
  check_nonempty("exp", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xv[i]);
  return finish(OpKind::exp, {&x}, x.shape(), std::move(out));
}

Tensor rsqrt_shift(const Tensor& x, double shift) {
  check_nonempty("rsqrt_shift", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / std::sqrt(xv[i] + shift);
  return finish(OpKind::rsqrt_shift, {&x}, x.shape(), std::move(out), {shift});
}

Tensor reciprocal(const Tensor& x) {
  check_nonempty("reciprocal", x);
  auto xv = x.data();
  std::vector<double> out(static_cast<size_t>(x.size()));
  for (size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / xv[i];
  return finish(OpKind::reciprocal, {&x}, x.shape(), std::move(out));
}

// ---- composites ------------------------------------------------------------------

Tensor gelu(const Tensor& x) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  Tensor x3 = mul(mul(x, x), x);
  Tensor inner = scalar_mul(add(x, scalar_mul(x3, 0.044715)), 0.7978845608028654);
  return mul(scalar_mul(x, 0.5), scalar_add(tanh(inner), 1.0));
}

Tensor softmax(const Tensor& x) {
  check_nonempty("softmax", x);
  check(x.rank() >= 1, "softmax: want rank >= 1");
  int n = x.shape().back();
  int64_t rows = x.size() / n;
  // subtract the row max as a constant shift: exact for the value and, since
  // softmax is shift-invariant, exact for the gradient too
  auto xv = x.data();
  std::vector<double> mx(static_cast<size_t>(x.size()));
  for (int64_t i = 0; i < rows; ++i) {
    const double* row = xv.data() + i * n;
    double m = row[0];
    for (int j = 1; j < n; ++j) m = std::max(m, row[j]);
    for (int j = 0; j < n; ++j) mx[static_cast<size_t>(i * n + j)] = m;
  }
  Tensor e = exp(sub(x, Tensor(x.shape(), std::move(mx))));
  Tensor denom = reciprocal(sum_last(e));
  return mul(e, expand_last(denom, n));
}

Tensor layer_norm(const Tensor& x, double eps) {
  check_nonempty("layer_norm", x);
  check(x.rank() >= 1, "layer_norm: want rank >= 1");
  int n = x.shape().back();
  Tensor mean = scalar_mul(sum_last(x), 1.0 / n);
  Tensor centered = sub(x, expand_last(mean, n));
  Tensor var = scalar_mul(sum_last(mul(centered, centered)), 1.0 / n);
  return mul(centered, expand_last(rsqrt_shift(var, eps), n));
}

// ---- integer-indexed ops ----------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids) {
  check_nonempty("embedding", table);
  check(table.rank() == 2, "embedding: table must be rank 2, got " + shape_str(table.shape()));
  if (ids.empty() || ids[0].empty()) throw usage_error("embedding: empty id batch");
  int rows = static_cast<int>(ids.size());
  int cols = static_cast<int>(ids[0].size());
  int vocab = table.shape()[0], dim = table.shape()[1];
  std::vector<int> iaux;
  iaux.reserve(2 + static_cast<size_t>(rows) * cols);
  iaux.push_back(rows);
  iaux.push_back(cols);
  auto tv = table.data();
  std::vector<double> out(static_cast<size_t>(rows) * cols * dim);
  for (int r = 0; r < rows; ++r) {
    if (static_cast<int>(ids[static_cast<size_t>(r)].size()) != cols)
      throw usage_error("embedding: ragged id batch");
    for (int c = 0; c < cols; ++c) {
      int id = ids[static_cast<size_t>(r)][static_cast<size_t>(c)];
      if (id < 0 || id >= vocab)
        throw usage_error("embedding: id " + std::to_string(id) + " out of range [0," +
                          std::to_string(vocab) + ")");
      iaux.push_back(id);
      const double* src = tv.data() + static_cast<int64_t>(id) * dim;
      std::copy(src, src + dim,
                out.begin() + (static_cast<int64_t>(r) * cols + c) * dim);
    }
  }
  return finish(OpKind::embedding, {&table}, {rows, cols, dim}, std::move(out), {},
                std::move(iaux));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  check_nonempty("cross_entropy", logits);
  check(logits.rank() == 2, "cross_entropy: logits must be rank 2, got " + shape_str(logits.shape()));
  int batch = logits.shape()[0], classes = logits.shape()[1];
  if (static_cast<int>(labels.size()) != batch)
    throw usage_error("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                      std::to_string(batch));
  auto lv = logits.data();
  double total = 0;
  std::vector<int> iaux(labels.size());
  for (int i = 0; i < batch; ++i) {
    int lab = labels[static_cast<size_t>(i)];
    if (lab < 0 || lab >= classes)
      throw usage_error("cross_entropy: label " + std::to_string(lab) + " out of range [0," +
                        std::to_string(classes) + ")");
    iaux[static_cast<size_t>(i)] = lab;
    const double* row = lv.data() + static_cast<int64_t>(i) * classes;
    double m = row[0];
    for (int j = 1; j < classes; ++j) m = std::max(m, row[j]);
    double z = 0;
    for (int j = 0; j < classes; ++j) z += std::exp(row[j] - m);
    total += m + std::log(z) - row[lab];
  }
  return finish(OpKind::cross_entropy, {&logits}, {1}, {total / batch}, {},
                std::move(iaux));
}

// ---- gradient oracle ----------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step) {
  if (!(step > 0.0) || step > 1e-2)
    throw usage_error("finite_diff_check: step must be in (0, 1e-2]");
  check_nonempty("finite_diff_check", x);

  Tape tape;
  Tensor xr = tape.leaf(x);
  Tensor y = f(xr);
  if (y.size() != 1)
    throw usage_error("finite_diff_check: f must return a scalar, got " + shape_str(y.shape()));
  tape.backward(y);
  Tensor g = tape.gradient(xr);

  std::vector<double> xv(x.data().begin(), x.data().end());
  double worst = 0;
  for (int64_t i = 0; i < x.size(); ++i) {
    double keep = xv[static_cast<size_t>(i)];
    xv[static_cast<size_t>(i)] = keep + step;
    double fp = f(Tensor(x.shape(), xv)).value();
    xv[static_cast<size_t>(i)] = keep - step;
    double fm = f(Tensor(x.shape(), xv)).value();
    xv[static_cast<size_t>(i)] = keep;
    double cd = (fp - fm) / (2.0 * step);
    double an = g.at(i);
    double err = std::fabs(an - cd) / (std::fabs(an) + std::fabs(cd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace imnet
