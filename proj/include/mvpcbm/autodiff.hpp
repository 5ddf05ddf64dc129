#pragma once

// Define-by-run reverse-mode differentiation over small dense float64 arrays.
//
// A Tape owns every node created during one forward pass. Nodes are appended
// in creation order, so parents always precede children and backward is a
// single reverse sweep. Trainable parameters live outside the tape as Tensor
// values; `Tape::param` binds one so that backward accumulates into its grad.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mvpcbm::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::vector<double> grad;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values, bool needs_grad = false);

  static Tensor zeros(Shape s, bool needs_grad = false);
  static Tensor scalar(double v, bool needs_grad = false);

  std::size_t size() const noexcept { return data.size(); }
  double item() const;
  void zero_grad();
};

class Tape;

/// Lightweight handle to a node on a Tape.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> value() const;
  double item() const;
  /// Gradient after backward; empty when the node received none.
  std::span<const double> grad() const;
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

class Tape {
 public:
  /// Propagates the output node's gradient into its parents.
  using Backward = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var constant(Tensor t);
  Var scalar(double v);
  /// Leaf whose gradient is read back from the tape via Var::grad().
  Var leaf(Tensor t, bool requires_grad = true);
  /// Leaf bound to an external tensor; backward accumulates into `t.grad`.
  Var param(Tensor& t);

  /// Appends an op node. Throws NonFiniteValue if any output is NaN/Inf.
  Var record(Shape shape, std::vector<double> value, std::initializer_list<Var> parents,
             Backward fn);

  /// Reverse sweep from a scalar node, seeding d(loss)/d(loss) = seed.
  /// Tape-internal gradients are reset first; bound tensors accumulate.
  void backward(Var loss, double seed = 1.0);

  std::size_t size() const noexcept { return nodes_.size(); }
  const Shape& shape(std::uint32_t id) const { return nodes_[id].shape; }
  std::span<const double> value(std::uint32_t id) const { return nodes_[id].value; }
  std::span<const double> grad(std::uint32_t id) const { return nodes_[id].grad; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  std::span<const std::uint32_t> parents(std::uint32_t id) const { return nodes_[id].parents; }

  /// Adds `g` into the gradient buffer of `id` (no-op for constants).
  void accumulate(std::uint32_t id, std::span<const double> g);
  void accumulate(std::uint32_t id, std::size_t index, double g);
  /// Mutable gradient buffer for `id`, allocated on first use.
  std::span<double> grad_buffer(std::uint32_t id);

  void note_clamp(std::size_t count) noexcept { clamp_events_ += count; }
  std::size_t clamp_events() const noexcept { return clamp_events_; }

 private:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<std::uint32_t> parents;
    Backward backward;
    Tensor* bound = nullptr;
    bool requires_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable references across pushes
  std::size_t clamp_events_ = 0;
};

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var x);
Var exp(Var x);
Var log(Var x);
Var sigmoid(Var x);
Var abs(Var x);
/// Clamps into [lo, hi]; every clamped element is counted on the tape.
Var clamp(Var x, double lo, double hi);
/// x * s for a scalar node s.
Var scale(Var x, Var s);
Var scale(Var x, double s);
/// x + s for a scalar node s.
Var add_scalar(Var x, Var s);

// ---- shape -----------------------------------------------------------------

Var reshape(Var x, Shape shape);
/// Output shape x.shape + [count]; every element repeated `count` times.
Var repeat_each(Var x, std::size_t count);
/// out[i] = x.flat[indices[i]]; backward scatters.
Var gather(Var x, std::vector<std::size_t> indices, Shape shape);

// ---- reductions ------------------------------------------------------------

Var sum(Var x);
Var mean(Var x);
/// Per-row max/min of a [rows x cols] matrix. Gradient goes to the first arg-extremum.
Var row_max(Var x);
Var row_min(Var x);

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b);
/// W[o x n] x[n] + b[o].
Var affine(Var W, Var x, Var b);
/// Scalar cosine similarity of two d-vectors. Throws ZeroNorm below 1e-12.
Var cosine(Var u, Var v);
/// Row-wise cosine of A[r x d] and B[r x d] -> [r].
Var cosine_rows(Var a, Var b);

// ---- probabilistic ---------------------------------------------------------

/// softmax(x / tau) over a 1-D input; tau is a positive scalar node.
Var softmax_temp(Var x, Var tau);
Var softmax_temp(Var x, double tau);
/// Tempered softmax along `axis` of an arbitrary-rank input.
Var softmax(Var x, std::size_t axis, Var tau);
Var softmax(Var x, std::size_t axis);
/// -log softmax(logits)[label] for 1-D logits.
Var cross_entropy(Var logits, std::size_t label);
/// Per-row cross-entropy of a [rows x classes] matrix -> [rows].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels);

// ---- verification ----------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_error = 0.0;      // max over coordinates of min(abs, rel)
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

/// Scalar objective built on a fresh tape from leaves for each parameter.
using Objective = std::function<Var(Tape&, std::span<const Var>)>;

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Compares reverse-mode gradients with central differences on every
/// coordinate of every parameter. Parameter values are restored on exit.
GradCheckReport finite_diff_check(const Objective& f, std::span<const NamedTensor> params,
                                  double eps = 1e-5, double tol = 1e-4);

/// Mixed error used by finite_diff_check: min(|a-n|, |a-n| / max(|a|,|n|)).
double mixed_error(double analytic, double numeric);

}  // namespace mvpcbm::ad
