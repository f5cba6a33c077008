#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "imnet/errors.hpp"

namespace imnet {

class Tape;

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// dense row-major float64 tensor; data is immutable and shared, so copies and
// reshapes are cheap. A tensor is either a plain constant or a handle to a
// node on some tape.
class Tensor {
public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape s);
  static Tensor full(Shape s, double v);
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t size() const { return store_ ? static_cast<int64_t>(store_->size()) : 0; }
  bool empty() const { return !store_; }

  std::span<const double> data() const;
  double at(int64_t i) const { return (*store_)[static_cast<size_t>(i)]; }
  double value() const;  // scalar accessor; usage_error unless size() == 1
  bool all_finite() const;

  bool recorded() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> store_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

enum class OpKind : uint8_t {
  leaf,
  add, sub, mul, scalar_add, scalar_mul,
  matmul, bmm, transpose, transpose_last, reshape, permute,
  add_rowvec, mul_rowvec, sum_rows, expand_rows,
  sum_last, expand_last, spread_scalar, sum_all, sum_sq,
  relu, tanh, exp, rsqrt_shift, reciprocal,
  embedding, pick, cross_entropy,
};

// records operations so gradients can be computed by a reverse sweep.
// backward() computes plain numeric gradients (recording is paused for the
// sweep); grad_of() builds the gradient *as new nodes* while recording stays
// on, which is what lets an outer backward differentiate through an inner
// gradient step.
class Tape {
public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // record a copy of `value` as an input node
  Tensor leaf(const Tensor& value);

  // reverse sweep from a recorded scalar root; stores gradients for leaves
  // (or for every reachable node when retain_all is set)
  void backward(const Tensor& root, bool retain_all = false);

  // gradient of a recorded scalar root w.r.t. one recorded tensor, built with
  // the same per-op rules as backward; does not touch stored gradients
  Tensor grad_of(const Tensor& root, const Tensor& wrt);

  // gradient stored by the last backward(); zeros if the root did not depend
  // on x. usage_error before backward ran or if x is foreign to this tape.
  Tensor gradient(const Tensor& x) const;

  bool backward_ran() const { return backward_ran_; }
  size_t gradient_count() const { return grads_.size(); }
  size_t node_count() const { return nodes_.size(); }
  bool recording() const { return pause_depth_ == 0; }

  // scoped recording pause: operations on this tape's tensors behave as plain
  // arithmetic and produce constants while an instance is alive
  class RecordingPause {
  public:
    explicit RecordingPause(Tape& t) : tape_(t) { ++tape_.pause_depth_; }
    ~RecordingPause() { --tape_.pause_depth_; }
    RecordingPause(const RecordingPause&) = delete;
    RecordingPause& operator=(const RecordingPause&) = delete;

  private:
    Tape& tape_;
  };

  struct Node {
    OpKind op;
    std::vector<Tensor> in;
    Tensor out;
    std::vector<double> aux;  // op scalars (step shifts, factors)
    std::vector<int> iaux;    // op integers (axes, ids, labels)
  };

  // used by the op layer; appends a node and returns its handle
  Tensor emit(OpKind op, std::vector<Tensor> in, Shape out_shape,
              std::vector<double> out_data, std::vector<double> aux = {},
              std::vector<int> iaux = {});

  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

private:
  std::vector<Node> nodes_;
  std::unordered_map<int, Tensor> grads_;
  int pause_depth_ = 0;
  bool backward_ran_ = false;
};

// ---- operations ------------------------------------------------------------
// every operation validates shapes (dimension_error names the offenders),
// computes eagerly, and records itself when an input sits on an actively
// recording tape.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scalar_add(const Tensor& x, double c);
Tensor scalar_mul(const Tensor& x, double c);

Tensor matmul(const Tensor& a, const Tensor& b);   // [m,k] x [k,n]
Tensor bmm(const Tensor& a, const Tensor& b);      // [g,m,k] x [g,k,n]
Tensor transpose(const Tensor& x);                 // [m,n] -> [n,m]
Tensor transpose_last(const Tensor& x);            // [g,m,n] -> [g,n,m]

Tensor reshape(const Tensor& x, Shape s);          // aliases data
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor pick(const Tensor& x, int axis, int index); // drop one axis at an index

Tensor add_rowvec(const Tensor& m, const Tensor& v);  // [r,c] + [c]
Tensor mul_rowvec(const Tensor& m, const Tensor& v);  // [r,c] * [c]
Tensor sum_rows(const Tensor& m);                     // [r,c] -> [c]
Tensor expand_rows(const Tensor& v, int rows);        // [c] -> [r,c]

Tensor sum_last(const Tensor& x);                  // [..., n] -> [...]
Tensor expand_last(const Tensor& x, int n);        // [...] -> [..., n]
Tensor spread_scalar(const Tensor& s, Shape shape);// [1] -> shape, filled
Tensor sum_all(const Tensor& x);                   // -> [1]
Tensor sum_of_squares(const Tensor& x);            // -> [1]

Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor rsqrt_shift(const Tensor& x, double shift); // 1 / sqrt(x + shift)
Tensor reciprocal(const Tensor& x);

// composites, built from the primitives above so their gradients are
// themselves differentiable
Tensor gelu(const Tensor& x);                      // tanh form
Tensor softmax(const Tensor& x);                   // over the last axis
Tensor layer_norm(const Tensor& x, double eps = 1e-5);  // over the last axis

// integer-indexed operations; gradients are numeric only (usage_error if a
// reverse sweep reaches them while recording is active)
Tensor embedding(const Tensor& table, const std::vector<std::vector<int>>& ids);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

// worst guarded relative error between the recorded gradient of f at x and a
// central finite difference, over all coordinates. step must be in (0, 1e-2].
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& x, double step);

bool bit_equal(const Tensor& a, const Tensor& b);

}  // namespace imnet
