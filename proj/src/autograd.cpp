#include "pisco/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kernels.hpp"

namespace pisco {
inline namespace PISCO_ABI {

using kernels::view;

void Parameter::zero_grad() {
  if (grad.shape() != value.shape()) {
    grad = Tensor(value.shape());
  } else {
    grad.fill(0);
  }
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::param(Parameter& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return Var{this, it->second};
  ++p.tape_reads;
  Node node;
  node.value = p.value;
  node.param = &p;
  node.requires_grad = grad_enabled_ && p.trainable;
  node.op = "param";
  nodes_.push_back(std::move(node));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  bound_.emplace(&p, id);
  return Var{this, id};
}

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.op = "constant";
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::variable(Tensor value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = grad_enabled_;
  node.op = "variable";
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor Tape::grad(Var v) const {
  check_owned(v, "grad");
  const Node& node = nodes_[v.id];
  if (node.grad.empty()) return Tensor(node.value.shape());
  return node.grad;
}

void Tape::check_owned(Var v, std::string_view op) const {
  if (v.tape != this || v.id >= nodes_.size()) {
    fail(ErrorCode::invalid_argument, std::string(op) + ": value is not recorded on this tape");
  }
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> inputs,
                 BackwardFn fn) {
  bool needs_grad = false;
  for (const Var& in : inputs) {
    check_owned(in, op);
    needs_grad = needs_grad || nodes_[in.id].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.requires_grad = grad_enabled_ && needs_grad;
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& inputs,
                 BackwardFn fn) {
  bool needs_grad = false;
  for (const Var& in : inputs) {
    check_owned(in, op);
    needs_grad = needs_grad || nodes_[in.id].requires_grad;
  }
  Node node;
  node.value = std::move(value);
  node.op = op;
  node.requires_grad = grad_enabled_ && needs_grad;
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(std::uint32_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.empty()) node.grad = Tensor(node.value.shape());
  return node.grad;
}

void Tape::backward(Var loss) {
  check_owned(loss, "backward");
  if (nodes_[loss.id].value.size() != 1) {
    fail(ErrorCode::shape_mismatch,
         "backward: loss must be scalar, got " + to_string(nodes_[loss.id].value.shape()));
  }
  if (!grad_enabled_) fail(ErrorCode::invalid_argument, "backward: tape recorded without gradients");
  backward_visits_ = 0;
  if (!nodes_[loss.id].requires_grad) return;
  grad_buffer(loss.id).fill(1);
  for (std::uint32_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.param != nullptr) {
      Parameter& p = *node.param;
      if (p.grad.shape() != p.value.shape()) p.zero_grad();
      view(p.grad) += view(node.grad);
    } else if (node.backward) {
      node.backward(*this, i);
      ++backward_visits_;
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

void require_matrix(std::string_view op, const Tensor& t) {
  if (t.rank() != 2) {
    fail(ErrorCode::shape_mismatch, std::string(op) + ": expected a matrix, got " + to_string(t.shape()));
  }
}

[[noreturn]] void mismatch(std::string_view op, const Shape& a, const Shape& b) {
  fail(ErrorCode::shape_mismatch,
       std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  if (av.cols() != bv.rows()) mismatch("matmul", av.shape(), bv.shape());
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  view(out).noalias() = view(av) * view(bv);
  const auto ia = a.id, ib = b.id;
  return a.tape->record("matmul", std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = view(t.grad_of(self));
    if (t.needs(ia)) view(t.grad_buffer(ia)).noalias() += g * view(t.value_of(ib)).transpose();
    if (t.needs(ib)) view(t.grad_buffer(ib)).noalias() += view(t.value_of(ia)).transpose() * g;
  });
}

Var linear(Var x, Var weight) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_matrix("linear", xv);
  require_matrix("linear", wv);
  if (xv.cols() != wv.cols()) mismatch("linear", xv.shape(), wv.shape());
  Tensor out = Tensor::matrix(xv.rows(), wv.rows());
  view(out).noalias() = view(xv) * view(wv).transpose();
  const auto ix = x.id, iw = weight.id;
  return x.tape->record("linear", std::move(out), {x, weight}, [ix, iw](Tape& t, std::uint32_t self) {
    const auto g = view(t.grad_of(self));
    if (t.needs(ix)) view(t.grad_buffer(ix)).noalias() += g * view(t.value_of(iw));
    if (t.needs(iw)) view(t.grad_buffer(iw)).noalias() += g.transpose() * view(t.value_of(ix));
  });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) mismatch("add", av.shape(), bv.shape());
  Tensor out = av;
  view(out) += view(bv);
  const auto ia = a.id, ib = b.id;
  return a.tape->record("add", std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = view(t.grad_of(self));
    if (t.needs(ia)) view(t.grad_buffer(ia)) += g;
    if (t.needs(ib)) view(t.grad_buffer(ib)) += g;
  });
}

Var add_row(Var a, Var row) {
  const Tensor& av = a.value();
  const Tensor& rv = row.value();
  if (rv.size() != av.cols() || rv.rows() != 1) mismatch("add_row", av.shape(), rv.shape());
  Tensor out = av;
  auto o = view(out);
  const auto r = view(rv.data(), 1, rv.size());
  o.rowwise() += r.row(0);
  const auto ia = a.id, ir = row.id;
  return a.tape->record("add_row", std::move(out), {a, row}, [ia, ir](Tape& t, std::uint32_t self) {
    const auto g = view(t.grad_of(self));
    if (t.needs(ia)) view(t.grad_buffer(ia)) += g;
    if (t.needs(ir)) {
      Tensor& gr = t.grad_buffer(ir);
      view(gr.data(), 1, gr.size()) += g.colwise().sum();
    }
  });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.shape() != bv.shape()) mismatch("mul", av.shape(), bv.shape());
  Tensor out = av;
  view(out).array() *= view(bv).array();
  const auto ia = a.id, ib = b.id;
  return a.tape->record("mul", std::move(out), {a, b}, [ia, ib](Tape& t, std::uint32_t self) {
    const auto g = view(t.grad_of(self)).array();
    if (t.needs(ia)) view(t.grad_buffer(ia)).array() += g * view(t.value_of(ib)).array();
    if (t.needs(ib)) view(t.grad_buffer(ib)).array() += g * view(t.value_of(ia)).array();
  });
}

Var scale(Var a, Scalar factor) {
  Tensor out = a.value();
  view(out) *= factor;
  const auto ia = a.id;
  return a.tape->record("scale", std::move(out), {a}, [ia, factor](Tape& t, std::uint32_t self) {
    view(t.grad_buffer(ia)) += factor * view(t.grad_of(self));
  });
}

Var sum(Var a) {
  const Tensor& av = a.value();
  Scalar total = 0;
  for (Scalar v : av.values()) total += v;
  const auto ia = a.id;
  return a.tape->record("sum", Tensor::scalar(total), {a}, [ia](Tape& t, std::uint32_t self) {
    const Scalar g = t.grad_of(self).item();
    view(t.grad_buffer(ia)).array() += g;
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix("transpose", av);
  Tensor out = Tensor::matrix(av.cols(), av.rows());
  view(out) = view(av).transpose();
  const auto ia = a.id;
  return a.tape->record("transpose", std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    view(t.grad_buffer(ia)) += view(t.grad_of(self)).transpose();
  });
}

namespace {

void softmax_inplace(Scalar* row, std::size_t n) {
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
  Scalar total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    total += row[j];
  }
  const Scalar inv = Scalar(1) / total;
  for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace

Var softmax_rows(Var a) {
  Tensor out = a.value();
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r).data(), out.cols());
  const auto ia = a.id;
  return a.tape->record("softmax", std::move(out), {a}, [ia](Tape& t, std::uint32_t self) {
    const auto p = view(t.value_of(self)).array();
    const auto g = view(t.grad_of(self)).array();
    const auto dot = (p * g).rowwise().sum();
    view(t.grad_buffer(ia)).array() += p * (g.colwise() - dot);
  });
}

Var layer_norm(Var x, Var gain, Var bias, Scalar eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  if (gain.value().size() != n) mismatch("layer_norm", xv.shape(), gain.value().shape());
  if (bias.value().size() != n) mismatch("layer_norm", xv.shape(), bias.value().shape());
  const std::size_t rows = xv.rows();
  Tensor out(xv.shape());
  Tensor xhat(xv.shape());
  std::vector<Scalar> rstd(rows);
  const Scalar* g = gain.value().data();
  const Scalar* b = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* xr = xv.data() + r * n;
    Scalar mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += xr[j];
    mean /= Scalar(n);
    Scalar var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= Scalar(n);
    const Scalar rs = Scalar(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    Scalar* hr = xhat.data() + r * n;
    Scalar* orow = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mean) * rs;
      orow[j] = hr[j] * g[j] + b[j];
    }
  }
  const auto ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      "layer_norm", std::move(out), {x, gain, bias},
      [ix, ig, ib, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::uint32_t self) {
        const Tensor& gy = t.grad_of(self);
        const Scalar* gv = t.value_of(ig).data();
        if (t.needs(ig)) {
          Scalar* dg = t.grad_buffer(ig).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) dg[j] += gy[r * n + j] * xhat[r * n + j];
        }
        if (t.needs(ib)) {
          Scalar* db = t.grad_buffer(ib).data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) db[j] += gy[r * n + j];
        }
        if (t.needs(ix)) {
          Scalar* dx = t.grad_buffer(ix).data();
          std::vector<Scalar> dxhat(n);
          for (std::size_t r = 0; r < rows; ++r) {
            Scalar mean_d = 0, mean_dx = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = gy[r * n + j] * gv[j];
              mean_d += dxhat[j];
              mean_dx += dxhat[j] * xhat[r * n + j];
            }
            mean_d /= Scalar(n);
            mean_dx /= Scalar(n);
            for (std::size_t j = 0; j < n; ++j) {
              dx[r * n + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * n + j] * mean_dx);
            }
          }
        }
      });
}

Var gelu(Var x) {
  Tensor out = x.value();
  for (Scalar& v : out.values()) v = kernels::gelu(v);
  const auto ix = x.id;
  return x.tape->record("gelu", std::move(out), {x}, [ix](Tape& t, std::uint32_t self) {
    const Tensor& xv = t.value_of(ix);
    const Tensor& g = t.grad_of(self);
    Tensor& dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += g[i] * kernels::gelu_grad(xv[i]);
  });
}

Var embedding(Var table, std::span<const TokenId> ids) {
  const Tensor& tv = table.value();
  require_matrix("embedding", tv);
  if (ids.empty()) fail(ErrorCode::invalid_argument, "embedding: empty id list");
  const std::size_t d = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  std::vector<TokenId> saved(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tv.rows()) {
      fail(ErrorCode::invalid_argument, "embedding: id " + std::to_string(ids[i]) +
                                            " outside table of " + std::to_string(tv.rows()) + " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  const auto it = table.id;
  return table.tape->record("embedding", std::move(out), {table},
                            [it, d, saved = std::move(saved)](Tape& t, std::uint32_t self) {
                              const Tensor& g = t.grad_of(self);
                              Tensor& gt = t.grad_buffer(it);
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                Scalar* dst = gt.data() + static_cast<std::size_t>(saved[i]) * d;
                                const Scalar* src = g.data() + i * d;
                                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                            });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail(ErrorCode::invalid_argument, "concat_rows: no inputs");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) mismatch("concat_rows", parts.front().shape(), p.shape());
    rows += p.rows();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::vector<std::uint32_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t at = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::copy(v.values().begin(), v.values().end(), out.data() + at * cols);
    ids.push_back(p.id);
    offsets.push_back(at);
    at += p.rows();
  }
  return parts.front().tape->record(
      "concat_rows", std::move(out), parts,
      [ids = std::move(ids), offsets = std::move(offsets), cols](Tape& t, std::uint32_t self) {
        const Tensor& g = t.grad_of(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (!t.needs(ids[i])) continue;
          Tensor& dst = t.grad_buffer(ids[i]);
          const Scalar* src = g.data() + offsets[i] * cols;
          for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        }
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  if (begin >= end || end > xv.rows()) {
    fail(ErrorCode::shape_mismatch, "slice_rows: range [" + std::to_string(begin) + ", " +
                                        std::to_string(end) + ") invalid for " + to_string(xv.shape()));
  }
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(end - begin, cols);
  std::copy_n(xv.data() + begin * cols, (end - begin) * cols, out.data());
  const auto ix = x.id;
  return x.tape->record("slice_rows", std::move(out), {x}, [ix, begin, cols](Tape& t, std::uint32_t self) {
    const Tensor& g = t.grad_of(self);
    Scalar* dst = t.grad_buffer(ix).data() + begin * cols;
    for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
  });
}

Var cross_entropy(Var logits, std::span<const TokenId> targets) {
  const Tensor& lv = logits.value();
  require_matrix("cross_entropy", lv);
  if (targets.size() != lv.rows()) {
    mismatch("cross_entropy", lv.shape(), Shape{targets.size()});
  }
  const std::size_t v = lv.cols();
  Tensor probs = lv;
  double total = 0.0;
  std::vector<TokenId> saved(targets.begin(), targets.end());
  for (std::size_t r = 0; r < lv.rows(); ++r) {
    if (saved[r] < 0) continue;
    if (static_cast<std::size_t>(saved[r]) >= v) {
      fail(ErrorCode::invalid_argument, "cross_entropy: target " + std::to_string(saved[r]) +
                                            " outside vocabulary of " + std::to_string(v));
    }
    Scalar* row = probs.row(r).data();
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(z) + static_cast<double>(mx) - static_cast<double>(row[saved[r]]);
    softmax_inplace(row, v);
  }
  const auto il = logits.id;
  return logits.tape->record(
      "cross_entropy", Tensor::scalar(static_cast<Scalar>(total)), {logits},
      [il, v, probs = std::move(probs), saved = std::move(saved)](Tape& t, std::uint32_t self) {
        const Scalar g = t.grad_of(self).item();
        Tensor& dl = t.grad_buffer(il);
        for (std::size_t r = 0; r < saved.size(); ++r) {
          if (saved[r] < 0) continue;
          Scalar* dst = dl.row(r).data();
          const Scalar* p = probs.row(r).data();
          for (std::size_t j = 0; j < v; ++j) dst[j] += g * p[j];
          dst[saved[r]] -= g;
        }
      });
}

Var causal_attention(Var q, Var k, Var v, std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_matrix("causal_attention", qv);
  if (kv.shape() != qv.shape()) mismatch("causal_attention", qv.shape(), kv.shape());
  if (vv.shape() != qv.shape()) mismatch("causal_attention", qv.shape(), vv.shape());
  const std::size_t T = qv.rows();
  const std::size_t d = qv.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    fail(ErrorCode::invalid_argument, "causal_attention: width " + std::to_string(d) +
                                          " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  const Scalar inv_sqrt = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  const auto ti = static_cast<Eigen::Index>(T);
  const auto hi = static_cast<Eigen::Index>(dh);

  Tensor out = Tensor::matrix(T, d);
  std::vector<kernels::Mat> probs(n_heads);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const auto col = static_cast<Eigen::Index>(h * dh);
    kernels::Mat s(ti, ti);
    s.noalias() = view(qv).middleCols(col, hi) * view(kv).middleCols(col, hi).transpose();
    s *= inv_sqrt;
    for (std::size_t r = 0; r < T; ++r) {
      Scalar* row = s.data() + r * T;
      softmax_inplace(row, r + 1);
      std::fill(row + r + 1, row + T, Scalar(0));
    }
    view(out).middleCols(col, hi).noalias() = s * view(vv).middleCols(col, hi);
    probs[h] = std::move(s);
  }
  const auto iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      "causal_attention", std::move(out), {q, k, v},
      [iq, ik, iv, n_heads, dh, ti, hi, inv_sqrt, probs = std::move(probs)](Tape& t, std::uint32_t self) {
        const auto g = view(t.grad_of(self));
        const auto qv = view(t.value_of(iq));
        const auto kv = view(t.value_of(ik));
        const auto vv = view(t.value_of(iv));
        kernels::Mat dp(ti, ti);
        for (std::size_t h = 0; h < n_heads; ++h) {
          const auto col = static_cast<Eigen::Index>(h * dh);
          const kernels::Mat& p = probs[h];
          if (t.needs(iv)) view(t.grad_buffer(iv)).middleCols(col, hi).noalias() += p.transpose() * g.middleCols(col, hi);
          dp.noalias() = g.middleCols(col, hi) * vv.middleCols(col, hi).transpose();
          // dS = P * (dP - rowsum(dP * P)); masked entries have P = 0.
          const auto dot = (dp.array() * p.array()).rowwise().sum().eval();
          dp = (p.array() * (dp.array().colwise() - dot)).matrix() * inv_sqrt;
          if (t.needs(iq)) view(t.grad_buffer(iq)).middleCols(col, hi).noalias() += dp * kv.middleCols(col, hi);
          if (t.needs(ik)) view(t.grad_buffer(ik)).middleCols(col, hi).noalias() += dp.transpose() * qv.middleCols(col, hi);
        }
      });
}

Var rope(Var x, std::size_t n_heads, std::size_t offset, Scalar base) {
  const Tensor& xv = x.value();
  require_matrix("rope", xv);
  if (n_heads == 0 || xv.cols() % n_heads != 0 || (xv.cols() / n_heads) % 2 != 0) {
    fail(ErrorCode::invalid_argument, "rope: width " + std::to_string(xv.cols()) + " does not split into " +
                                          std::to_string(n_heads) + " even-sized heads");
  }
  Tensor out = xv;
  const std::size_t d = xv.cols();
  for (std::size_t r = 0; r < out.rows(); ++r) kernels::rope_row(out.data() + r * d, d, n_heads, offset + r, base);
  const auto ix = x.id;
  return x.tape->record("rope", std::move(out), {x}, [ix, n_heads, offset, base, d](Tape& t, std::uint32_t self) {
    Tensor g = t.grad_of(self);
    for (std::size_t r = 0; r < g.rows(); ++r) kernels::rope_row(g.data() + r * d, d, n_heads, offset + r, base, -1);
    view(t.grad_buffer(ix)) += view(g);
  });
}

Var dropout(Var x, Scalar p, std::mt19937_64& rng) {
  if (p <= 0) return x;
  if (p >= 1) fail(ErrorCode::invalid_argument, "dropout: probability must be < 1");
  const Tensor& xv = x.value();
  Tensor mask(xv.shape());
  const Scalar keep = Scalar(1) / (Scalar(1) - p);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (Scalar& m : mask.values()) m = uni(rng) >= p ? keep : Scalar(0);
  Tensor out = xv;
  view(out).array() *= view(mask).array();
  const auto ix = x.id;
  return x.tape->record("dropout", std::move(out), {x}, [ix, mask = std::move(mask)](Tape& t, std::uint32_t self) {
    view(t.grad_buffer(ix)).array() += view(t.grad_of(self)).array() * view(mask).array();
  });
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss_fn,
                           std::span<Parameter* const> params, const GradCheckOptions& options) {
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    if (!std::isfinite(static_cast<double>(loss.value().item()))) {
      fail(ErrorCode::non_finite, "grad_check: loss is not finite at the base point");
    }
    tape.backward(loss);
  }
  auto eval = [&]() {
    Tape tape(false);
    return static_cast<double>(loss_fn(tape).value().item());
  };

  GradCheckReport report;
  std::mt19937_64 rng(options.seed);
  for (Parameter* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > options.samples_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.samples_per_param);
    }
    for (std::size_t idx : coords) {
      const Scalar saved = p->value[idx];
      p->value[idx] = saved + options.eps;
      const double up = eval();
      p->value[idx] = saved - options.eps;
      const double down = eval();
      p->value[idx] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        fail(ErrorCode::non_finite, "grad_check: non-finite loss perturbing " + p->name + "[" +
                                        std::to_string(idx) + "]");
      }
      const double numeric = (up - down) / (2.0 * static_cast<double>(options.eps));
      const double analytic = p->grad.empty() ? 0.0 : static_cast<double>(p->grad[idx]);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = rel;
        report.worst_param = p->name;
        report.worst_index = idx;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace PISCO_ABI
}  // namespace pisco
