#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "beamllm/parameter.hpp"
#include "beamllm/tensor.hpp"

namespace beamllm {

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  Tape* tape() const noexcept { return tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode record of whole-tensor operations. Single-threaded.
///
/// A node requires a gradient when any of its inputs does; leaves bound to
/// trainable parameters are the only sources. Frozen parameters and data enter
/// as constants, so no gradient is ever computed for them. With grad recording
/// disabled the tape only evaluates values.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  explicit Tape(bool record_grad = true) : record_grad_(record_grad) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool records_grad() const noexcept { return record_grad_; }

  Var constant(Tensor value);
  /// Binds a parameter; repeated calls return the same node.
  Var param(Parameter& p);
  /// A free leaf with its own gradient slot (read back with grad()).
  Var leaf(Tensor value, bool requires_grad = true);

  /// Records an op output. `backward` receives d(loss)/d(output) and must call
  /// accumulate() for each input that requires a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  void accumulate(Var target, const Tensor& grad);
  /// Adds `scale * grad` into `target` without materializing the product.
  void accumulate_scaled(Var target, const Tensor& grad, double scale);
  /// Mutable gradient buffer of `target`, zero-initialized on first use.
  Tensor& grad_buffer(Var target);

  /// Populates gradients back from a scalar loss and accumulates into the
  /// grad of every trainable parameter bound on this tape.
  void backward(Var loss);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient of a node after backward(); zeros if nothing flowed into it.
  Tensor grad(Var v) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    Parameter* param = nullptr;
    // Parameter values are read in place; they must not change while the tape is in use.
    const Tensor* ref = nullptr;
    BackwardFn backward;

    const Tensor& val() const noexcept { return ref ? *ref : value; }
  };

  Var push(Node node);
  void check_owned(Var v) const;

  bool record_grad_;
  std::vector<Node> nodes_;
  std::unordered_map<Parameter*, std::uint32_t> param_nodes_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Operators on plain tensors.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
double gelu(double x) noexcept;
/// -log softmax(logits)[target], natural log. `logits` must be rank 1.
double cross_entropy(const Tensor& logits, std::size_t target);

// ---------------------------------------------------------------------------
// Recorded operators. All inputs must live on the same tape.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a length-n bias to every row of an m x n matrix.
Var add_row(Var a, Var bias);
/// x * w + b for row-major x (m x k), w (k x n), b (n).
Var linear(Var x, Var w, Var b);
Var relu(Var x);
Var gelu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
Var softmax(Var x, std::size_t axis);
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var reshape(Var x, Shape shape);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
/// Transposes each of the `blocks` consecutive row blocks of x independently:
/// (blocks*r) x c  ->  (blocks*c) x r.
Var block_transpose(Var x, std::size_t blocks);
Var sum(Var x);

/// Cross-entropy summed over rows: logits (n x M) with one target class per
/// row, or rank-1 logits (M) with a single target.
Var cross_entropy(Var logits, std::span<const std::size_t> targets);

/// Multi-head scaled dot-product attention where every query row attends to
/// all key rows: q (n x H*dk), k (s x H*dk), v (s x H*dv) -> n x H*dv.
Var multi_head_attention(Var q, Var k, Var v, std::size_t n_heads);

/// Frozen keys/values preceding a group of query rows (one segment chain per
/// group). Rows are positions; columns are H*dk.
struct AttentionContext {
  std::vector<const Tensor*> key_segments;
  std::vector<const Tensor*> value_segments;
  std::size_t length() const noexcept;
};

/// Causal multi-head self-attention over `qkv` (n x 3*D) laid out as
/// [q | k | v]. Rows form consecutive groups of `group_len`; within a group,
/// row i attends to every context row of that group and to rows j <= i.
/// Context tensors are constants and must outlive the tape (hold them via
/// `keep_alive`).
Var causal_self_attention(Var qkv, std::size_t n_heads, std::size_t group_len,
                          std::vector<AttentionContext> contexts,
                          std::shared_ptr<const void> keep_alive = nullptr);

}  // namespace beamllm
