#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pisco/tensor.hpp"

namespace pisco {
inline namespace PISCO_ABI {

/// A named trainable (or frozen) tensor living outside any tape.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
  bool decay = true;
  // Number of times the parameter was bound to a tape. Used to verify that
  // adapter roles never touch each other's tensors.
  std::size_t tape_reads = 0;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool decay_ = true)
      : name(std::move(n)), value(std::move(v)), decay(decay_) {}

  void zero_grad();
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Ordered record of primitive operations. Nodes are appended in creation
/// order, so walking the record backwards is a reverse topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Bind a parameter. Repeated calls return the same handle.
  Var param(Parameter& p);
  /// A value that never receives a gradient.
  Var constant(Tensor value);
  /// A free leaf whose gradient can be read back with grad().
  Var variable(Tensor value);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward() call; zeros if the node was unreached.
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  bool grad_enabled() const noexcept { return grad_enabled_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::string_view op_name(Var v) const { return nodes_.at(v.id).op; }

  /// Reverse pass from a scalar loss. Parameter gradients are accumulated
  /// into Parameter::grad.
  void backward(Var loss);
  /// Number of backward closures executed by the last backward().
  std::size_t backward_visits() const noexcept { return backward_visits_; }

  // Op-author interface.
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
             BackwardFn fn);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
             BackwardFn fn);
  /// Gradient buffer of a node, allocated on first use.
  Tensor& grad_buffer(std::uint32_t id);
  const Tensor& grad_of(std::uint32_t id) const { return nodes_.at(id).grad; }
  bool needs(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  const Tensor& value_of(std::uint32_t id) const { return nodes_.at(id).value; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    Parameter* param = nullptr;
    bool requires_grad = false;
    std::string_view op;
  };

  void check_owned(Var v, std::string_view op) const;

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, std::uint32_t> bound_;
  bool grad_enabled_;
  std::size_t backward_visits_ = 0;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

// ---------------------------------------------------------------------------
// Primitive operations. All matrices are rank-2 row-major.

Var matmul(Var a, Var b);              // [m,k] x [k,n]
Var linear(Var x, Var weight);         // x * weight^T, weight is [out,in]
Var add(Var a, Var b);                 // same shape
Var add_row(Var a, Var row);           // broadcast a [1,n] or [n] row over a
Var mul(Var a, Var b);                 // elementwise
Var scale(Var a, Scalar factor);
Var sum(Var a);                        // -> scalar
Var transpose(Var a);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gain, Var bias, Scalar eps = Scalar(1e-5));
Var gelu(Var x);
Var embedding(Var table, std::span<const TokenId> ids);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
/// Summed negative log-likelihood of targets; rows whose target is -1 are
/// ignored.
Var cross_entropy(Var logits, std::span<const TokenId> targets);
/// Multi-head scaled dot-product self-attention with a causal mask.
Var causal_attention(Var q, Var k, Var v, std::size_t n_heads);
/// Rotary position embedding; row r sits at position offset + r.
Var rope(Var x, std::size_t n_heads, std::size_t offset = 0, Scalar base = Scalar(10000));
/// Inverted dropout. Identity when p == 0.
Var dropout(Var x, Scalar p, std::mt19937_64& rng);

// ---------------------------------------------------------------------------

struct GradCheckOptions {
  Scalar eps = Scalar(1e-3);
  std::size_t samples_per_param = 16;
  std::uint64_t seed = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compare reverse-mode gradients against central finite differences.
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<Parameter* const> params,
                           const GradCheckOptions& options = {});

}  // namespace PISCO_ABI
}  // namespace pisco
