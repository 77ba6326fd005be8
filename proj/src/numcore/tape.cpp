#include "beamllm/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "beamllm/error.hpp"

namespace beamllm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::OuterStride<>;
using StridedMap = Eigen::Map<RowMat, 0, Strided>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Strided>;

ConstMatMap view(const Tensor& t) {
  return ConstMatMap(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

MatMap view(Tensor& t) {
  return MatMap(t.raw(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 1 && t.rank() != 2) {
    throw Error(ErrorKind::dimension, std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::dimension,
                std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

Tape& same_tape(std::initializer_list<Var> vars) {
  Tape* tape = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(ErrorKind::contract, "operation on an unbound Var");
    if (tape && v.tape() != tape) throw Error(ErrorKind::contract, "operands recorded on different tapes");
    tape = v.tape();
  }
  return *tape;
}

Tape& same_tape(std::span<const Var> vars) {
  if (vars.empty()) throw Error(ErrorKind::contract, "operation on an empty operand list");
  Tape* tape = vars.front().tape();
  for (const Var& v : vars) {
    if (!v.valid()) throw Error(ErrorKind::contract, "operation on an unbound Var");
    if (v.tape() != tape) throw Error(ErrorKind::contract, "operands recorded on different tapes");
  }
  return *tape;
}

struct AxisLayout {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw Error(ErrorKind::dimension, "axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
  }
  AxisLayout l;
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  l.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

constexpr double kGeluCoeff = 0.044715;
const double kSqrt2OverPi = std::sqrt(2.0 / std::numbers::pi);

// tanh(sqrt(2/pi) (x + 0.044715 x^3)) for a whole buffer, via the vectorized exp.
// Fixed chunks keep every element on the same code path, so results do not
// depend on where a value sits in the buffer.
void gelu_tanh(const double* x, double* t, std::size_t n) {
  using Chunk = Eigen::Array<double, 8, 1>;
  Chunk in;
  Chunk e;
  for (std::size_t i = 0; i < n; i += 8) {
    const std::size_t k = std::min<std::size_t>(8, n - i);
    in.setZero();
    std::copy_n(x + i, k, in.data());
    e = (2.0 * kSqrt2OverPi * (in + kGeluCoeff * in.cube())).exp();
    e = 1.0 - 2.0 / (e + 1.0);
    std::copy_n(e.data(), k, t + i);
  }
}

std::size_t mat_rows(const Tensor& t) { return t.rank() == 2 ? t.shape()[0] : 1; }

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const {
  if (!tape_) throw Error(ErrorKind::contract, "value() on an unbound Var");
  return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

Var Tape::push(Node node) {
  if (backward_done_) throw Error(ErrorKind::contract, "cannot record after backward()");
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

void Tape::check_owned(Var v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw Error(ErrorKind::contract, "Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
  require_finite(value, "constant");
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.ref = &p.value;
  n.requires_grad = record_grad_ && p.trainable;
  n.param = &p;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id_);
  return v;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  require_finite(value, "leaf");
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_grad_ && requires_grad;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  require_finite(value, "operator output");
  Node n;
  n.value = std::move(value);
  if (record_grad_) {
    for (const Var& in : inputs) {
      check_owned(in);
      if (nodes_[in.id_].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var target) {
  check_owned(target);
  Node& n = nodes_[target.id_];
  if (!n.has_grad) {
    n.grad = Tensor(n.val().shape());
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::accumulate(Var target, const Tensor& grad) {
  check_owned(target);
  Node& n = nodes_[target.id_];
  if (!n.requires_grad) return;
  if (grad.size() != n.val().size()) {
    throw Error(ErrorKind::dimension, "gradient of size " + std::to_string(grad.size()) + " for node of shape " +
                                          shape_str(n.val().shape()));
  }
  if (!n.has_grad) {
    n.grad = grad.reshaped(n.val().shape());
    n.has_grad = true;
    return;
  }
  auto dst = n.grad.data();
  auto src = grad.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate_scaled(Var target, const Tensor& grad, double s) {
  check_owned(target);
  if (!nodes_[target.id_].requires_grad) return;
  Tensor& dst = grad_buffer(target);
  if (grad.size() != dst.size()) throw Error(ErrorKind::dimension, "gradient size mismatch");
  auto d = dst.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
}

void Tape::backward(Var loss) {
  check_owned(loss);
  if (!record_grad_) throw Error(ErrorKind::contract, "backward() on a tape that does not record gradients");
  if (backward_done_) throw Error(ErrorKind::contract, "backward() called twice on one tape");
  Node& root = nodes_[loss.id_];
  if (root.val().size() != 1) {
    throw Error(ErrorKind::contract, "backward() needs a scalar loss, got " + shape_str(root.val().shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  root.grad = Tensor(root.val().shape(), 1.0);
  root.has_grad = true;
  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || !n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
  for (auto& [param, id] : param_nodes_) {
    const Node& n = nodes_[id];
    if (n.has_grad && param->trainable) param->accumulate_grad(n.grad);
  }
}

const Tensor& Tape::value(Var v) const {
  check_owned(v);
  return nodes_[v.id_].val();
}

bool Tape::requires_grad(Var v) const {
  check_owned(v);
  return nodes_[v.id_].requires_grad;
}

Tensor Tape::grad(Var v) const {
  check_owned(v);
  const Node& n = nodes_[v.id_];
  return n.has_grad ? n.grad : Tensor(n.val().shape());
}

// ---------------------------------------------------------------------------
// Plain tensor operators

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw Error(ErrorKind::dimension, "matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out({mat_rows(a), b.cols()});
  view(out).noalias() = view(a) * view(b);
  return out;
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor out({a.cols(), a.rows()});
  view(out) = view(a).transpose();
  return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const AxisLayout l = axis_layout(x.shape(), axis);
  Tensor out(x.shape());
  const double* src = x.raw();
  double* dst = out.raw();
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t i = 0; i < l.inner; ++i) {
      const std::size_t base = o * l.n * l.inner + i;
      double mx = src[base];
      for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, src[base + j * l.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) {
        const double e = std::exp(src[base + j * l.inner] - mx);
        dst[base + j * l.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < l.n; ++j) dst[base + j * l.inner] /= total;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (x.rank() == 0) throw Error(ErrorKind::dimension, "layer_norm on a rank-0 tensor");
  const std::size_t n = x.shape().back();
  if (gain.size() != n || bias.size() != n) throw Error(ErrorKind::dimension, "layer_norm: gain/bias length mismatch");
  Tensor out(x.shape());
  const std::size_t rows = n ? x.size() / n : 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.raw() + r * n;
    double* dst = out.raw() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += src[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (src[j] - mean) * (src[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) dst[j] = (src[j] - mean) * rstd * gain[j] + bias[j];
  }
  return out;
}

Tensor relu(const Tensor& x) {
  return map_values(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

double gelu(double x) noexcept {
  return 0.5 * x * (1.0 + std::tanh(kSqrt2OverPi * (x + kGeluCoeff * x * x * x)));
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  gelu_tanh(x.raw(), out.raw(), x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + out[i]);
  return out;
}

double cross_entropy(const Tensor& logits, std::size_t target) {
  if (logits.rank() != 1) throw Error(ErrorKind::dimension, "cross_entropy: logits must be rank 1");
  if (target >= logits.size()) {
    throw Error(ErrorKind::index, "cross_entropy: class " + std::to_string(target) + " out of range [0," +
                                      std::to_string(logits.size()) + ")");
  }
  const auto v = logits.data();
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0.0;
  for (double z : v) total += std::exp(z - mx);
  return std::log(total) + mx - v[target];
}

// ---------------------------------------------------------------------------
// Recorded operators

Var matmul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  Tensor out = matmul(a.value(), b.value());
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    const auto gm = ConstMatMap(g.raw(), static_cast<Eigen::Index>(mat_rows(av)), static_cast<Eigen::Index>(bv.cols()));
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_buffer(a);
      MatMap(da.raw(), static_cast<Eigen::Index>(mat_rows(av)), static_cast<Eigen::Index>(av.cols())).noalias() +=
          gm * view(bv).transpose();
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buffer(b);
      view(db).noalias() += ConstMatMap(av.raw(), static_cast<Eigen::Index>(mat_rows(av)),
                                        static_cast<Eigen::Index>(av.cols()))
                                 .transpose() *
                             gm;
    }
  });
}

Var transpose(Var a) {
  Tape& tape = same_tape({a});
  return tape.record(transpose(a.value()), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& da = t.grad_buffer(a);
    const Tensor& av = t.value(a);
    MatMap(da.raw(), static_cast<Eigen::Index>(mat_rows(av)), static_cast<Eigen::Index>(av.cols())) +=
        view(g).transpose();
  });
}

Var add(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  auto d = out.data();
  auto s = b.value().data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  auto d = out.data();
  auto s = b.value().data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= s[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate_scaled(b, g, -1.0);
  });
}

Var mul(Var a, Var b) {
  Tape& tape = same_tape({a, b});
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  auto d = out.data();
  auto s = b.value().data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s[i];
  return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      Tensor& da = t.grad_buffer(a);
      const auto bv = t.value(b).data();
      for (std::size_t i = 0; i < da.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buffer(b);
      const auto av = t.value(a).data();
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  Tape& tape = same_tape({a});
  Tensor out = map_values(a.value(), [s](double v) { return v * s; });
  return tape.record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) { t.accumulate_scaled(a, g, s); });
}

Var add_row(Var a, Var bias) {
  Tape& tape = same_tape({a, bias});
  const Tensor& av = a.value();
  require_matrix(av, "add_row");
  const std::size_t n = av.cols();
  if (bias.value().size() != n) throw Error(ErrorKind::dimension, "add_row: bias length mismatch");
  Tensor out = av;
  const std::size_t m = mat_rows(av);
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  }
  return tape.record(std::move(out), {a, bias}, [a, bias, m, n](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.requires_grad(bias)) {
      Tensor& db = t.grad_buffer(bias);
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) db[c] += g[r * n + c];
      }
    }
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& tape = same_tape({x, w, b});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require_matrix(xv, "linear");
  if (wv.rank() != 2 || xv.cols() != wv.rows()) {
    throw Error(ErrorKind::dimension, "linear: " + shape_str(xv.shape()) + " * " + shape_str(wv.shape()));
  }
  const std::size_t m = mat_rows(xv);
  const std::size_t n = wv.cols();
  if (b.value().size() != n) throw Error(ErrorKind::dimension, "linear: bias length mismatch");
  Tensor out({m, n});
  auto om = view(out);
  om.noalias() = ConstMatMap(xv.raw(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(xv.cols())) * view(wv);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().raw(), static_cast<Eigen::Index>(n));
  return tape.record(std::move(out), {x, w, b}, [x, w, b, m, n](Tape& t, const Tensor& g) {
    const auto gm = ConstMatMap(g.raw(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    const Tensor& xv = t.value(x);
    const auto xm = ConstMatMap(xv.raw(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(xv.cols()));
    if (t.requires_grad(x)) {
      Tensor& dx = t.grad_buffer(x);
      MatMap(dx.raw(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(xv.cols())).noalias() +=
          gm * view(t.value(w)).transpose();
    }
    if (t.requires_grad(w)) {
      Tensor& dw = t.grad_buffer(w);
      view(dw).noalias() += xm.transpose() * gm;
    }
    if (t.requires_grad(b)) {
      Tensor& db = t.grad_buffer(b);
      Eigen::Map<Eigen::RowVectorXd>(db.raw(), static_cast<Eigen::Index>(n)) += gm.colwise().sum();
    }
  });
}

namespace {

template <class F, class D>
Var elementwise(Var x, F f, D dfdx) {
  Tape& tape = same_tape({x});
  Tensor out = map_values(x.value(), f);
  return tape.record(std::move(out), {x}, [x, dfdx](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    const auto xv = t.value(x).data();
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * dfdx(xv[i]);
  });
}

}  // namespace

Var relu(Var x) {
  return elementwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var x) {
  Tape& tape = same_tape({x});
  const auto xv = x.value().data();
  Tensor out(x.value().shape());
  auto th = std::make_shared<std::vector<double>>(xv.size());
  gelu_tanh(xv.data(), th->data(), xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + (*th)[i]);
  return tape.record(std::move(out), {x}, [x, th](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    const auto xv = t.value(x).data();
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double v = xv[i];
      const double tv = (*th)[i];
      dx[i] += g[i] * (0.5 * (1.0 + tv) +
                       0.5 * v * (1.0 - tv * tv) * kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v));
    }
  });
}

Var tanh(Var x) {
  return elementwise(
      x, [](double v) { return std::tanh(v); },
      [](double v) {
        const double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Var sigmoid(Var x) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  return elementwise(x, sig, [sig](double v) {
    const double s = sig(v);
    return s * (1.0 - s);
  });
}

Var softmax(Var x, std::size_t axis) {
  Tape& tape = same_tape({x});
  Tensor out = softmax(x.value(), axis);
  const AxisLayout l = axis_layout(x.value().shape(), axis);
  return tape.record(out, {x}, [x, l, yv = out](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t i = 0; i < l.inner; ++i) {
        const std::size_t base = o * l.n * l.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < l.n; ++j) dot += g[base + j * l.inner] * yv[base + j * l.inner];
        for (std::size_t j = 0; j < l.n; ++j) {
          const std::size_t k = base + j * l.inner;
          dx[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = same_tape({x, gain, bias});
  const Tensor& xv = x.value();
  Tensor out = layer_norm(xv, gain.value(), bias.value(), eps);
  return tape.record(std::move(out), {x, gain, bias}, [x, gain, bias, eps](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& gv = t.value(gain);
    const std::size_t n = xv.shape().back();
    const std::size_t rows = n ? xv.size() / n : 0;
    const bool need_x = t.requires_grad(x);
    const bool need_gain = t.requires_grad(gain);
    const bool need_bias = t.requires_grad(bias);
    std::vector<double> xhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* src = xv.raw() + r * n;
      const double* gr = g.raw() + r * n;
      double mean = 0.0;
      for (std::size_t j = 0; j < n; ++j) mean += src[j];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (src[j] - mean) * (src[j] - mean);
      var /= static_cast<double>(n);
      const double rstd = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) xhat[j] = (src[j] - mean) * rstd;
      if (need_gain) {
        Tensor& dg = t.grad_buffer(gain);
        for (std::size_t j = 0; j < n; ++j) dg[j] += gr[j] * xhat[j];
      }
      if (need_bias) {
        Tensor& db = t.grad_buffer(bias);
        for (std::size_t j = 0; j < n; ++j) db[j] += gr[j];
      }
      if (need_x) {
        double mean_gx = 0.0;
        double mean_gx_xhat = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          const double gx = gr[j] * gv[j];
          mean_gx += gx;
          mean_gx_xhat += gx * xhat[j];
        }
        mean_gx /= static_cast<double>(n);
        mean_gx_xhat /= static_cast<double>(n);
        Tensor& dx = t.grad_buffer(x);
        double* dst = dx.raw() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
          dst[j] += rstd * (gr[j] * gv[j] - mean_gx - xhat[j] * mean_gx_xhat);
        }
      }
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = same_tape({x});
  Tensor out = x.value().reshaped(std::move(shape));
  return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) { t.accumulate(x, g); });
}

Var concat_rows(std::span<const Var> parts) {
  Tape& tape = same_tape(parts);
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_rows");
    if (p.value().cols() != cols) throw Error(ErrorKind::dimension, "concat_rows: column count mismatch");
    rows += mat_rows(p.value());
  }
  Tensor out({rows, cols});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.raw() + offset);
    offset += p.value().size();
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [inputs](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const Var& p : inputs) {
      const std::size_t n = t.value(p).size();
      if (t.requires_grad(p)) {
        Tensor& dp = t.grad_buffer(p);
        for (std::size_t i = 0; i < n; ++i) dp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  Tape& tape = same_tape(parts);
  const std::size_t rows = mat_rows(parts.front().value());
  std::size_t cols = 0;
  for (const Var& p : parts) {
    require_matrix(p.value(), "concat_cols");
    if (mat_rows(p.value()) != rows) throw Error(ErrorKind::dimension, "concat_cols: row count mismatch");
    cols += p.value().cols();
  }
  Tensor out({rows, cols});
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    const std::size_t pc = v.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.raw() + r * pc, pc, out.raw() + r * cols + c0);
    }
    c0 += pc;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return tape.record(std::move(out), parts, [inputs, rows, cols](Tape& t, const Tensor& g) {
    std::size_t c0 = 0;
    for (const Var& p : inputs) {
      const std::size_t pc = t.value(p).cols();
      if (t.requires_grad(p)) {
        Tensor& dp = t.grad_buffer(p);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) dp[r * pc + c] += g[r * cols + c0 + c];
        }
      }
      c0 += pc;
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_rows");
  if (begin + count > mat_rows(xv)) throw Error(ErrorKind::index, "slice_rows out of range");
  const std::size_t cols = xv.cols();
  Tensor out({count, cols});
  std::copy_n(xv.raw() + begin * cols, count * cols, out.raw());
  return tape.record(std::move(out), {x}, [x, begin, count, cols](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t i = 0; i < count * cols; ++i) dx[begin * cols + i] += g[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "slice_cols");
  const std::size_t cols = xv.cols();
  const std::size_t rows = mat_rows(xv);
  if (begin + count > cols) throw Error(ErrorKind::index, "slice_cols out of range");
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.raw() + r * cols + begin, count, out.raw() + r * count);
  return tape.record(std::move(out), {x}, [x, begin, count, cols, rows](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) dx[r * cols + begin + c] += g[r * count + c];
    }
  });
}

Var block_transpose(Var x, std::size_t blocks) {
  Tape& tape = same_tape({x});
  const Tensor& xv = x.value();
  require_matrix(xv, "block_transpose");
  const std::size_t rows = mat_rows(xv);
  if (blocks == 0 || rows % blocks != 0) throw Error(ErrorKind::dimension, "block_transpose: rows not divisible");
  const std::size_t r = rows / blocks;
  const std::size_t c = xv.cols();
  Tensor out({blocks * c, r});
  for (std::size_t b = 0; b < blocks; ++b) {
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out[(b * c + j) * r + i] = xv[(b * r + i) * c + j];
    }
  }
  return tape.record(std::move(out), {x}, [x, blocks, r, c](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    for (std::size_t b = 0; b < blocks; ++b) {
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) dx[(b * r + i) * c + j] += g[(b * c + j) * r + i];
      }
    }
  });
}

Var sum(Var x) {
  Tape& tape = same_tape({x});
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  return tape.record(Tensor::scalar(total), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& dx = t.grad_buffer(x);
    const double s = g[0];
    for (auto& v : dx.data()) v += s;
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  Tape& tape = same_tape({logits});
  const Tensor& lv = logits.value();
  require_matrix(lv, "cross_entropy");
  const std::size_t rows = mat_rows(lv);
  const std::size_t m = lv.cols();
  if (targets.size() != rows) {
    throw Error(ErrorKind::dimension, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                          std::to_string(rows) + " rows");
  }
  for (std::size_t target : targets) {
    if (target >= m) {
      throw Error(ErrorKind::index, "cross_entropy: class " + std::to_string(target) + " out of range [0," +
                                        std::to_string(m) + ")");
    }
  }
  Tensor probs({rows, m});
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = lv.raw() + r * m;
    double* p = probs.raw() + r * m;
    const double mx = *std::max_element(z, z + m);
    double denom = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[j] = std::exp(z[j] - mx);
      denom += p[j];
    }
    for (std::size_t j = 0; j < m; ++j) p[j] /= denom;
    total += std::log(denom) + mx - z[targets[r]];
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return tape.record(Tensor::scalar(total), {logits},
                     [logits, probs = std::move(probs), tgt = std::move(tgt), m](Tape& t, const Tensor& g) {
                       Tensor& dl = t.grad_buffer(logits);
                       const double s = g[0];
                       for (std::size_t r = 0; r < tgt.size(); ++r) {
                         for (std::size_t j = 0; j < m; ++j) {
                           dl[r * m + j] += s * (probs[r * m + j] - (j == tgt[r] ? 1.0 : 0.0));
                         }
                       }
                     });
}

Var multi_head_attention(Var q, Var k, Var v, std::size_t n_heads) {
  Tape& tape = same_tape({q, k, v});
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix(qv, "multi_head_attention");
  require_matrix(kv, "multi_head_attention");
  require_matrix(vv, "multi_head_attention");
  if (n_heads == 0 || qv.cols() % n_heads != 0 || vv.cols() % n_heads != 0 || qv.cols() != kv.cols() ||
      mat_rows(kv) != mat_rows(vv)) {
    throw Error(ErrorKind::dimension, "multi_head_attention: inconsistent q/k/v shapes for " +
                                          std::to_string(n_heads) + " heads");
  }
  const auto n = static_cast<Eigen::Index>(mat_rows(qv));
  const auto s = static_cast<Eigen::Index>(mat_rows(kv));
  const auto qk_cols = static_cast<Eigen::Index>(qv.cols());
  const auto v_cols = static_cast<Eigen::Index>(vv.cols());
  const auto dk = qk_cols / static_cast<Eigen::Index>(n_heads);
  const auto dv = v_cols / static_cast<Eigen::Index>(n_heads);
  const double scl = 1.0 / std::sqrt(static_cast<double>(dk));

  auto probs = std::make_shared<std::vector<RowMat>>(n_heads);
  Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(v_cols)});
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto hh = static_cast<Eigen::Index>(h);
    ConstStridedMap qh(qv.raw() + hh * dk, n, dk, Strided(qk_cols));
    ConstStridedMap kh(kv.raw() + hh * dk, s, dk, Strided(qk_cols));
    ConstStridedMap vh(vv.raw() + hh * dv, s, dv, Strided(v_cols));
    RowMat p = (qh * kh.transpose()) * scl;
    for (Eigen::Index r = 0; r < n; ++r) {
      const double mx = p.row(r).maxCoeff();
      p.row(r) = (p.row(r).array() - mx).exp();
      p.row(r) /= p.row(r).sum();
    }
    StridedMap oh(out.raw() + hh * dv, n, dv, Strided(v_cols));
    oh.noalias() = p * vh;
    (*probs)[h] = std::move(p);
  }
  return tape.record(std::move(out), {q, k, v}, [q, k, v, n_heads, probs, n, s, dk, dv, qk_cols, v_cols, scl](
                                                    Tape& t, const Tensor& g) {
    const Tensor& qv = t.value(q);
    const Tensor& kv = t.value(k);
    const Tensor& vv = t.value(v);
    const bool need_q = t.requires_grad(q);
    const bool need_k = t.requires_grad(k);
    const bool need_v = t.requires_grad(v);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto hh = static_cast<Eigen::Index>(h);
      const RowMat& p = (*probs)[h];
      ConstStridedMap gh(g.raw() + hh * dv, n, dv, Strided(v_cols));
      ConstStridedMap vh(vv.raw() + hh * dv, s, dv, Strided(v_cols));
      if (need_v) {
        StridedMap dvh(t.grad_buffer(v).raw() + hh * dv, s, dv, Strided(v_cols));
        dvh.noalias() += p.transpose() * gh;
      }
      if (!need_q && !need_k) continue;
      RowMat dp = gh * vh.transpose();
      RowMat ds = p.cwiseProduct((dp.colwise() - dp.cwiseProduct(p).rowwise().sum()));
      ds *= scl;
      if (need_q) {
        ConstStridedMap kh(kv.raw() + hh * dk, s, dk, Strided(qk_cols));
        StridedMap dqh(t.grad_buffer(q).raw() + hh * dk, n, dk, Strided(qk_cols));
        dqh.noalias() += ds * kh;
      }
      if (need_k) {
        ConstStridedMap qh(qv.raw() + hh * dk, n, dk, Strided(qk_cols));
        StridedMap dkh(t.grad_buffer(k).raw() + hh * dk, s, dk, Strided(qk_cols));
        dkh.noalias() += ds.transpose() * qh;
      }
    }
  });
}

std::size_t AttentionContext::length() const noexcept {
  std::size_t n = 0;
  for (const Tensor* seg : key_segments) n += mat_rows(*seg);
  return n;
}

Var causal_self_attention(Var qkv, std::size_t n_heads, std::size_t group_len, std::vector<AttentionContext> contexts,
                          std::shared_ptr<const void> keep_alive) {
  Tape& tape = same_tape({qkv});
  const Tensor& x = qkv.value();
  require_matrix(x, "causal_self_attention");
  const std::size_t rows = mat_rows(x);
  const std::size_t width = x.cols();
  if (width % 3 != 0 || n_heads == 0 || (width / 3) % n_heads != 0) {
    throw Error(ErrorKind::dimension, "causal_self_attention: qkv width " + std::to_string(width) +
                                          " incompatible with " + std::to_string(n_heads) + " heads");
  }
  if (group_len == 0 || rows % group_len != 0) {
    throw Error(ErrorKind::dimension, "causal_self_attention: rows not divisible into groups");
  }
  const std::size_t groups = rows / group_len;
  if (!contexts.empty() && contexts.size() != groups) {
    throw Error(ErrorKind::dimension, "causal_self_attention: one context per group required");
  }
  const std::size_t d = width / 3;
  const std::size_t hd = d / n_heads;
  const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

  struct Segment {
    const double* keys;
    const double* values;
    Eigen::Index rows;
  };
  auto segments = std::make_shared<std::vector<std::vector<Segment>>>(groups);
  std::vector<Eigen::Index> ctx_len(groups, 0);
  for (std::size_t gi = 0; gi < contexts.size(); ++gi) {
    const AttentionContext& c = contexts[gi];
    if (c.key_segments.size() != c.value_segments.size()) {
      throw Error(ErrorKind::dimension, "causal_self_attention: key/value segment count mismatch");
    }
    for (std::size_t si = 0; si < c.key_segments.size(); ++si) {
      const Tensor& ks = *c.key_segments[si];
      const Tensor& vs = *c.value_segments[si];
      if (ks.cols() != d || vs.cols() != d || mat_rows(ks) != mat_rows(vs)) {
        throw Error(ErrorKind::dimension, "causal_self_attention: context width mismatch");
      }
      const auto r = static_cast<Eigen::Index>(mat_rows(ks));
      if (r == 0) continue;
      (*segments)[gi].push_back({ks.raw(), vs.raw(), r});
      ctx_len[gi] += r;
    }
  }

  const auto gl = static_cast<Eigen::Index>(group_len);
  const auto ehd = static_cast<Eigen::Index>(hd);
  const auto ed = static_cast<Eigen::Index>(d);
  const auto ew = static_cast<Eigen::Index>(width);
  // probs[g * heads + h]: group_len x (context + group_len), zero above the causal diagonal
  auto probs = std::make_shared<std::vector<RowMat>>(groups * n_heads);
  Tensor out({rows, d});
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const Eigen::Index lc = ctx_len[gi];
    const double* base = x.raw() + gi * group_len * width;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = h * hd;
      const ConstStridedMap q(base + off, gl, ehd, Strided(ew));
      const ConstStridedMap ks(base + d + off, gl, ehd, Strided(ew));
      const ConstStridedMap vs(base + 2 * d + off, gl, ehd, Strided(ew));
      RowMat& p = (*probs)[gi * n_heads + h];
      p.resize(gl, lc + gl);
      Eigen::Index col = 0;
      for (const Segment& sg : (*segments)[gi]) {
        p.middleCols(col, sg.rows).noalias() = q * ConstStridedMap(sg.keys + off, sg.rows, ehd, Strided(ed)).transpose();
        col += sg.rows;
      }
      p.rightCols(gl).noalias() = q * ks.transpose();
      for (Eigen::Index i = 0; i < gl; ++i) {
        const Eigen::Index live = lc + i + 1;
        double* pr = p.row(i).data();
        double mx = pr[0] * scl;
        for (Eigen::Index j = 0; j < live; ++j) mx = std::max(mx, pr[j] * scl);
        double denom = 0.0;
        for (Eigen::Index j = 0; j < live; ++j) {
          pr[j] = std::exp(pr[j] * scl - mx);
          denom += pr[j];
        }
        for (Eigen::Index j = 0; j < live; ++j) pr[j] /= denom;
        for (Eigen::Index j = live; j < lc + gl; ++j) pr[j] = 0.0;
      }
      StridedMap o(out.raw() + gi * group_len * d + off, gl, ehd, Strided(ed));
      col = 0;
      for (const Segment& sg : (*segments)[gi]) {
        o.noalias() += p.middleCols(col, sg.rows) * ConstStridedMap(sg.values + off, sg.rows, ehd, Strided(ed));
        col += sg.rows;
      }
      o.noalias() += p.rightCols(gl) * vs;
    }
  }

  return tape.record(std::move(out), {qkv},
                     [qkv, n_heads, group_len, groups, d, hd, width, scl, probs, segments,
                      keep_alive = std::move(keep_alive)](Tape& t, const Tensor& g) {
                       const Tensor& x = t.value(qkv);
                       Tensor& dx = t.grad_buffer(qkv);
                       const auto gl = static_cast<Eigen::Index>(group_len);
                       const auto ehd = static_cast<Eigen::Index>(hd);
                       const auto ed = static_cast<Eigen::Index>(d);
                       const auto ew = static_cast<Eigen::Index>(width);
                       RowMat dp;
                       for (std::size_t gi = 0; gi < groups; ++gi) {
                         const double* base = x.raw() + gi * group_len * width;
                         double* dbase = dx.raw() + gi * group_len * width;
                         for (std::size_t h = 0; h < n_heads; ++h) {
                           const std::size_t off = h * hd;
                           const RowMat& p = (*probs)[gi * n_heads + h];
                           const Eigen::Index lc = p.cols() - gl;
                           const ConstStridedMap gm(g.raw() + gi * group_len * d + off, gl, ehd, Strided(ed));
                           const ConstStridedMap q(base + off, gl, ehd, Strided(ew));
                           const ConstStridedMap ks(base + d + off, gl, ehd, Strided(ew));
                           const ConstStridedMap vs(base + 2 * d + off, gl, ehd, Strided(ew));
                           StridedMap dq(dbase + off, gl, ehd, Strided(ew));
                           StridedMap dk(dbase + d + off, gl, ehd, Strided(ew));
                           StridedMap dv(dbase + 2 * d + off, gl, ehd, Strided(ew));
                           dp.resize(gl, lc + gl);
                           Eigen::Index col = 0;
                           for (const Segment& sg : (*segments)[gi]) {
                             dp.middleCols(col, sg.rows).noalias() =
                                 gm * ConstStridedMap(sg.values + off, sg.rows, ehd, Strided(ed)).transpose();
                             col += sg.rows;
                           }
                           dp.rightCols(gl).noalias() = gm * vs.transpose();
                           dv.noalias() += p.rightCols(gl).transpose() * gm;
                           for (Eigen::Index i = 0; i < gl; ++i) {
                             const double r = p.row(i).dot(dp.row(i));
                             dp.row(i) = (p.row(i).array() * (dp.row(i).array() - r) * scl).matrix();
                           }
                           col = 0;
                           for (const Segment& sg : (*segments)[gi]) {
                             dq.noalias() += dp.middleCols(col, sg.rows) *
                                             ConstStridedMap(sg.keys + off, sg.rows, ehd, Strided(ed));
                             col += sg.rows;
                           }
                           dq.noalias() += dp.rightCols(gl) * ks;
                           dk.noalias() += dp.rightCols(gl).transpose() * q;
                         }
                       }
                     });
}

}  // namespace beamllm
