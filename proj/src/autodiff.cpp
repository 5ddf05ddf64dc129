#include "mvpcbm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mvpcbm/error.hpp"

namespace mvpcbm::ad {

namespace {

constexpr double kNormFloor = 1e-12;

[[noreturn]] void shape_error(const std::string& op, const Shape& a, const Shape& b) {
  throw Error(ErrorCode::ShapeMismatch, op + ": " + shape_str(a) + " vs " + shape_str(b));
}

void require_same(const char* op, Var a, Var b) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

void require_scalar(const char* op, Var s) {
  if (s.size() != 1) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": expected scalar");
}

void require_rank(const char* op, Var x, std::size_t rank) {
  if (x.shape().size() != rank) {
    throw Error(ErrorCode::ShapeMismatch,
                std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                    shape_str(x.shape()));
  }
}

// Elementwise unary op with derivative expressed through (input, output).
template <class F, class D>
Var unary(Var x, F f, D dfdx) {
  auto in = x.value();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  const auto xid = x.id();
  return x.tape().record(x.shape(), std::move(out), {x}, [xid, dfdx](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto xv = t.value(xid);
    auto yv = t.value(self);
    auto gx = t.grad_buffer(xid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * dfdx(xv[i], yv[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape s, std::vector<double> values, bool needs_grad)
    : shape(std::move(s)), data(std::move(values)), requires_grad(needs_grad) {
  if (numel(shape) != data.size()) {
    throw Error(ErrorCode::ShapeMismatch, "tensor data length " + std::to_string(data.size()) +
                                              " does not match shape " + shape_str(shape));
  }
  if (requires_grad) grad.assign(data.size(), 0.0);
}

Tensor Tensor::zeros(Shape s, bool needs_grad) {
  const auto n = numel(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0), needs_grad);
}

Tensor Tensor::scalar(double v, bool needs_grad) { return Tensor({}, {v}, needs_grad); }

double Tensor::item() const {
  if (data.size() != 1) throw Error(ErrorCode::NonScalarLoss, "item() on " + shape_str(shape));
  return data[0];
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

// ---- Var -------------------------------------------------------------------

const Shape& Var::shape() const { return tape_->shape(id_); }
std::size_t Var::size() const { return tape_->value(id_).size(); }
std::span<const double> Var::value() const { return tape_->value(id_); }
std::span<const double> Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw Error(ErrorCode::NonScalarLoss, "item() on " + shape_str(shape()));
  return v[0];
}

// ---- Tape ------------------------------------------------------------------

Var Tape::push(Node node) {
  for (double v : node.value) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::NonFiniteValue, "non-finite value in node " +
                                                 std::to_string(nodes_.size()) + " " +
                                                 shape_str(node.shape));
    }
  }
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::constant(Tensor t) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  return push(std::move(n));
}

Var Tape::scalar(double v) { return constant(Tensor::scalar(v)); }

Var Tape::leaf(Tensor t, bool requires_grad) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.data);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

Var Tape::param(Tensor& t) {
  Node n;
  n.shape = t.shape;
  n.value = t.data;
  n.requires_grad = t.requires_grad;
  n.bound = &t;
  if (t.requires_grad && t.grad.size() != t.data.size()) t.zero_grad();
  return push(std::move(n));
}

Var Tape::record(Shape shape, std::vector<double> value, std::initializer_list<Var> parents,
                 Backward fn) {
  Node n;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (const Var& p : parents) {
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

std::span<double> Tape::grad_buffer(std::uint32_t id) {
  auto& node = nodes_[id];
  if (node.grad.size() != node.value.size()) node.grad.assign(node.value.size(), 0.0);
  return node.grad;
}

void Tape::accumulate(std::uint32_t id, std::span<const double> g) {
  if (!nodes_[id].requires_grad) return;
  auto buf = grad_buffer(id);
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void Tape::accumulate(std::uint32_t id, std::size_t index, double g) {
  if (!nodes_[id].requires_grad) return;
  grad_buffer(id)[index] += g;
}

void Tape::backward(Var loss, double seed) {
  if (loss.size() != 1) {
    throw Error(ErrorCode::NonScalarLoss, "backward from " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad.clear();
  const auto root = loss.id();
  if (!nodes_[root].requires_grad) return;
  grad_buffer(root)[0] = seed;
  for (std::int64_t i = root; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    if (n.bound != nullptr && n.bound->requires_grad) {
      for (std::size_t k = 0; k < n.grad.size(); ++k) n.bound->grad[k] += n.grad[k];
    }
  }
}

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b) {
  require_same("add", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    t.accumulate(aid, g);
    t.accumulate(bid, g);
  });
}

Var sub(Var a, Var b) {
  require_same("sub", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    t.accumulate(aid, g);
    if (t.requires_grad(bid)) {
      auto gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same("mul", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const auto aid = a.id(), bid = b.id();
  return a.tape().record(a.shape(), std::move(out), {a, b}, [aid, bid](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto av = t.value(aid), bv = t.value(bid);
    if (t.requires_grad(aid)) {
      auto ga = t.grad_buffer(aid);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(bid)) {
      auto gb = t.grad_buffer(bid);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var neg(Var x) {
  return unary(x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(Var x) {
  return unary(x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Var sigmoid(Var x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var abs(Var x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Var clamp(Var x, double lo, double hi) {
  std::size_t clamped = 0;
  for (double v : x.value()) clamped += (v < lo || v > hi) ? 1 : 0;
  x.tape().note_clamp(clamped);
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Var scale(Var x, Var s) {
  require_scalar("scale", s);
  const double sv = s.item();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * sv;
  const auto xid = x.id(), sid = s.id();
  return x.tape().record(x.shape(), std::move(out), {x, s}, [xid, sid](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    auto xv = t.value(xid);
    const double sv = t.value(sid)[0];
    if (t.requires_grad(xid)) {
      auto gx = t.grad_buffer(xid);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
    }
    if (t.requires_grad(sid)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.accumulate(sid, 0, acc);
    }
  });
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var x, Var s) {
  require_scalar("add_scalar", s);
  const double sv = s.item();
  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + sv;
  const auto xid = x.id(), sid = s.id();
  return x.tape().record(x.shape(), std::move(out), {x, s}, [xid, sid](Tape& t, std::uint32_t self) {
    auto g = t.grad(self);
    t.accumulate(xid, g);
    if (t.requires_grad(sid)) t.accumulate(sid, 0, std::accumulate(g.begin(), g.end(), 0.0));
  });
}

// ---- shape -----------------------------------------------------------------

Var reshape(Var x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  auto xv = x.value();
  const auto xid = x.id();
  return x.tape().record(std::move(shape), std::vector<double>(xv.begin(), xv.end()), {x},
                         [xid](Tape& t, std::uint32_t self) { t.accumulate(xid, t.grad(self)); });
}

Var repeat_each(Var x, std::size_t count) {
  auto xv = x.value();
  std::vector<double> out(xv.size() * count);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * count), count, xv[i]);
  }
  Shape shape = x.shape();
  shape.push_back(count);
  const auto xid = x.id();
  return x.tape().record(std::move(shape), std::move(out), {x},
                         [xid, count](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < gx.size(); ++i) {
                             double acc = 0.0;
                             for (std::size_t c = 0; c < count; ++c) acc += g[i * count + c];
                             gx[i] += acc;
                           }
                         });
}

Var gather(Var x, std::vector<std::size_t> indices, Shape shape) {
  if (numel(shape) != indices.size()) {
    throw Error(ErrorCode::ShapeMismatch, "gather: index count vs " + shape_str(shape));
  }
  auto xv = x.value();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.size()) throw Error(ErrorCode::IndexOutOfRange, "gather index");
    out[i] = xv[indices[i]];
  }
  const auto xid = x.id();
  return x.tape().record(std::move(shape), std::move(out), {x},
                         [xid, idx = std::move(indices)](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto gx = t.grad_buffer(xid);
                           for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
                         });
}

// ---- reductions ------------------------------------------------------------

Var sum(Var x) {
  auto xv = x.value();
  const double total = std::accumulate(xv.begin(), xv.end(), 0.0);
  const auto xid = x.id();
  return x.tape().record({}, {total}, {x}, [xid](Tape& t, std::uint32_t self) {
    const double g = t.grad(self)[0];
    auto gx = t.grad_buffer(xid);
    for (double& v : gx) v += g;
  });
}

Var mean(Var x) {
  if (x.size() == 0) throw Error(ErrorCode::ShapeMismatch, "mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

namespace {

template <class Better>
Var row_extremum(Var x, const char* name, Better better) {
  require_rank(name, x, 2);
  const auto rows = x.shape()[0], cols = x.shape()[1];
  if (cols == 0) throw Error(ErrorCode::ShapeMismatch, std::string(name) + ": empty rows");
  auto xv = x.value();
  std::vector<double> out(rows);
  std::vector<std::size_t> arg(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c) {
      if (better(xv[r * cols + c], xv[r * cols + best])) best = c;
    }
    arg[r] = r * cols + best;
    out[r] = xv[arg[r]];
  }
  const auto xid = x.id();
  return x.tape().record({rows}, std::move(out), {x},
                         [xid, arg = std::move(arg)](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto gx = t.grad_buffer(xid);
                           for (std::size_t r = 0; r < arg.size(); ++r) gx[arg[r]] += g[r];
                         });
}

}  // namespace

Var row_max(Var x) { return row_extremum(x, "row_max", std::greater<>()); }
Var row_min(Var x) { return row_extremum(x, "row_min", std::less<>()); }

// ---- linear algebra --------------------------------------------------------

Var matmul(Var a, Var b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const auto p = a.shape()[0], q = a.shape()[1], r = b.shape()[1];
  if (b.shape()[0] != q) shape_error("matmul", a.shape(), b.shape());
  auto av = a.value(), bv = b.value();
  std::vector<double> out(p * r, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t k = 0; k < q; ++k) {
      const double aik = av[i * q + k];
      for (std::size_t j = 0; j < r; ++j) out[i * r + j] += aik * bv[k * r + j];
    }
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape().record({p, r}, std::move(out), {a, b},
                         [aid, bid, p, q, r](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto av = t.value(aid), bv = t.value(bid);
                           if (t.requires_grad(aid)) {
                             auto ga = t.grad_buffer(aid);
                             for (std::size_t i = 0; i < p; ++i)
                               for (std::size_t k = 0; k < q; ++k) {
                                 double acc = 0.0;
                                 for (std::size_t j = 0; j < r; ++j) acc += g[i * r + j] * bv[k * r + j];
                                 ga[i * q + k] += acc;
                               }
                           }
                           if (t.requires_grad(bid)) {
                             auto gb = t.grad_buffer(bid);
                             for (std::size_t i = 0; i < p; ++i)
                               for (std::size_t k = 0; k < q; ++k) {
                                 const double aik = av[i * q + k];
                                 for (std::size_t j = 0; j < r; ++j) gb[k * r + j] += aik * g[i * r + j];
                               }
                           }
                         });
}

Var affine(Var W, Var x, Var b) {
  require_rank("affine", W, 2);
  const auto o = W.shape()[0], n = W.shape()[1];
  if (x.size() != n || b.size() != o) {
    throw Error(ErrorCode::ShapeMismatch, "affine: W" + shape_str(W.shape()) + " x" +
                                              shape_str(x.shape()) + " b" + shape_str(b.shape()));
  }
  auto wv = W.value(), xv = x.value(), bv = b.value();
  std::vector<double> out(o);
  for (std::size_t i = 0; i < o; ++i) {
    double acc = bv[i];
    for (std::size_t j = 0; j < n; ++j) acc += wv[i * n + j] * xv[j];
    out[i] = acc;
  }
  const auto wid = W.id(), xid = x.id(), bid = b.id();
  return W.tape().record({o}, std::move(out), {W, x, b},
                         [wid, xid, bid, o, n](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto wv = t.value(wid), xv = t.value(xid);
                           if (t.requires_grad(wid)) {
                             auto gw = t.grad_buffer(wid);
                             for (std::size_t i = 0; i < o; ++i)
                               for (std::size_t j = 0; j < n; ++j) gw[i * n + j] += g[i] * xv[j];
                           }
                           if (t.requires_grad(xid)) {
                             auto gx = t.grad_buffer(xid);
                             for (std::size_t i = 0; i < o; ++i)
                               for (std::size_t j = 0; j < n; ++j) gx[j] += g[i] * wv[i * n + j];
                           }
                           t.accumulate(bid, g);
                         });
}

Var cosine_rows(Var a, Var b) {
  require_rank("cosine_rows", a, 2);
  require_same("cosine_rows", a, b);
  const auto rows = a.shape()[0], d = a.shape()[1];
  if (d == 0) throw Error(ErrorCode::ShapeMismatch, "cosine_rows: zero dimension");
  auto av = a.value(), bv = b.value();
  std::vector<double> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      const double x = av[r * d + i], y = bv[r * d + i];
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na < kNormFloor || nb < kNormFloor) {
      throw Error(ErrorCode::ZeroNorm, "cosine of row " + std::to_string(r));
    }
    out[r] = dot / (na * nb);
  }
  const auto aid = a.id(), bid = b.id();
  return a.tape().record({rows}, std::move(out), {a, b},
                         [aid, bid, rows, d](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto av = t.value(aid), bv = t.value(bid), cv = t.value(self);
                           const bool ga_on = t.requires_grad(aid), gb_on = t.requires_grad(bid);
                           for (std::size_t r = 0; r < rows; ++r) {
                             double na = 0.0, nb = 0.0;
                             for (std::size_t i = 0; i < d; ++i) {
                               na += av[r * d + i] * av[r * d + i];
                               nb += bv[r * d + i] * bv[r * d + i];
                             }
                             na = std::sqrt(na);
                             nb = std::sqrt(nb);
                             const double c = cv[r], inv = 1.0 / (na * nb);
                             if (ga_on) {
                               auto ga = t.grad_buffer(aid);
                               for (std::size_t i = 0; i < d; ++i)
                                 ga[r * d + i] += g[r] * (bv[r * d + i] * inv - c * av[r * d + i] / (na * na));
                             }
                             if (gb_on) {
                               auto gb = t.grad_buffer(bid);
                               for (std::size_t i = 0; i < d; ++i)
                                 gb[r * d + i] += g[r] * (av[r * d + i] * inv - c * bv[r * d + i] / (nb * nb));
                             }
                           }
                         });
}

Var cosine(Var u, Var v) {
  if (u.size() != v.size() || u.size() == 0) shape_error("cosine", u.shape(), v.shape());
  const Shape row{1, u.size()};
  return reshape(cosine_rows(reshape(u, row), reshape(v, row)), {});
}

// ---- probabilistic ---------------------------------------------------------

Var softmax(Var x, std::size_t axis, Var tau) {
  require_scalar("softmax", tau);
  const double tv = tau.item();
  if (!(tv > 0.0)) {
    throw Error(ErrorCode::NonPositiveTemperature, "tau = " + std::to_string(tv));
  }
  const auto& shape = x.shape();
  if (axis >= shape.size()) throw Error(ErrorCode::ShapeMismatch, "softmax axis out of range");
  const auto n = shape[axis];
  if (n == 0) throw Error(ErrorCode::ShapeMismatch, "softmax over empty axis");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  auto xv = x.value();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = xv[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp((xv[base + i * inner] - mx) / tv);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  const auto xid = x.id(), tid = tau.id();
  return x.tape().record(shape, std::move(out), {x, tau},
                         [xid, tid, outer, inner, n](Tape& t, std::uint32_t self) {
                           auto g = t.grad(self);
                           auto xv = t.value(xid), yv = t.value(self);
                           const double tv = t.value(tid)[0];
                           const bool gx_on = t.requires_grad(xid);
                           double gtau = 0.0;
                           for (std::size_t o = 0; o < outer; ++o) {
                             for (std::size_t in = 0; in < inner; ++in) {
                               const std::size_t base = o * n * inner + in;
                               double dot = 0.0;
                               for (std::size_t i = 0; i < n; ++i)
                                 dot += g[base + i * inner] * yv[base + i * inner];
                               for (std::size_t i = 0; i < n; ++i) {
                                 const std::size_t k = base + i * inner;
                                 const double dz = yv[k] * (g[k] - dot);
                                 if (gx_on) t.grad_buffer(xid)[k] += dz / tv;
                                 gtau -= dz * xv[k] / (tv * tv);
                               }
                             }
                           }
                           t.accumulate(tid, 0, gtau);
                         });
}

Var softmax(Var x, std::size_t axis) { return softmax(x, axis, x.tape().scalar(1.0)); }

Var softmax_temp(Var x, Var tau) {
  require_rank("softmax_temp", x, 1);
  return softmax(x, 0, tau);
}

Var softmax_temp(Var x, double tau) { return softmax_temp(x, x.tape().scalar(tau)); }

Var cross_entropy_rows(Var logits, std::span<const std::size_t> labels) {
  require_rank("cross_entropy_rows", logits, 2);
  const auto rows = logits.shape()[0], classes = logits.shape()[1];
  if (labels.size() != rows) throw Error(ErrorCode::ShapeMismatch, "cross_entropy_rows labels");
  if (classes == 0) throw Error(ErrorCode::ShapeMismatch, "cross_entropy over zero classes");
  for (auto l : labels) {
    if (l >= classes) {
      throw Error(ErrorCode::LabelOutOfRange,
                  "label " + std::to_string(l) + " >= " + std::to_string(classes));
    }
  }
  auto xv = logits.value();
  std::vector<double> out(rows);
  std::vector<double> probs(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t c = 0; c < classes; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = std::exp(row[c] - lse);
    out[r] = lse - row[labels[r]];
  }
  const auto xid = logits.id();
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return logits.tape().record(
      {rows}, std::move(out), {logits},
      [xid, classes, lab = std::move(lab), probs = std::move(probs)](Tape& t, std::uint32_t self) {
        auto g = t.grad(self);
        auto gx = t.grad_buffer(xid);
        for (std::size_t r = 0; r < lab.size(); ++r) {
          for (std::size_t c = 0; c < classes; ++c) {
            gx[r * classes + c] += g[r] * (probs[r * classes + c] - (c == lab[r] ? 1.0 : 0.0));
          }
        }
      });
}

Var cross_entropy(Var logits, std::size_t label) {
  require_rank("cross_entropy", logits, 1);
  const std::size_t labels[1] = {label};
  auto rows = cross_entropy_rows(reshape(logits, {1, logits.size()}), labels);
  return reshape(rows, {});
}

// ---- verification ----------------------------------------------------------

double mixed_error(double analytic, double numeric) {
  const double abs_err = std::fabs(analytic - numeric);
  const double denom = std::max(std::fabs(analytic), std::fabs(numeric));
  if (denom == 0.0) return abs_err;
  return std::min(abs_err, abs_err / denom);
}

GradCheckReport finite_diff_check(const Objective& f, std::span<const NamedTensor> params,
                                  double eps, double tol) {
  auto evaluate = [&](bool with_grad, std::vector<std::vector<double>>* grads) {
    Tape tape;
    std::vector<Var> leaves;
    leaves.reserve(params.size());
    for (const auto& p : params) leaves.push_back(tape.leaf(Tensor(p.tensor->shape, p.tensor->data), true));
    Var out = f(tape, leaves);
    if (with_grad) {
      tape.backward(out);
      for (std::size_t i = 0; i < leaves.size(); ++i) {
        auto g = leaves[i].grad();
        (*grads)[i] = g.empty() ? std::vector<double>(leaves[i].size(), 0.0)
                                : std::vector<double>(g.begin(), g.end());
      }
    }
    return out.item();
  };

  std::vector<std::vector<double>> analytic(params.size());
  evaluate(true, &analytic);

  GradCheckReport report;
  report.tolerance = tol;
  for (std::size_t p = 0; p < params.size(); ++p) {
    GradCheckEntry entry;
    entry.name = params[p].name;
    auto& data = params[p].tensor->data;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = evaluate(false, nullptr);
      data[i] = saved - eps;
      const double down = evaluate(false, nullptr);
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = mixed_error(analytic[p][i], numeric);
      entry.max_abs_error = std::max(entry.max_abs_error, std::fabs(analytic[p][i] - numeric));
      if (err > entry.max_error) {
        entry.max_error = err;
        entry.worst_index = i;
      }
    }
    report.max_error = std::max(report.max_error, entry.max_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = report.max_error <= tol;
  return report;
}

}  // namespace mvpcbm::ad
