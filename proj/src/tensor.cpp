// SPDX-License-Identifier: Apache-2.0

#include "ava/tensor.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

namespace ava {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (data.size() != shape_size(shape)) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
  }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> d;
  d.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw DimensionError("ragged matrix literal");
    d.insert(d.end(), r.begin(), r.end());
  }
  return Tensor({m, n}, std::move(d));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::add(std::string name, Tensor init) {
  if (by_name_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = std::move(name);
  p->value = std::move(init);
  p->offset = total_;
  p->index = params_.size();
  total_ += p->value.size();
  by_name_[p->name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParamStore::get(const std::string& name) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

const Parameter& ParamStore::get(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat(total_);
  for (const auto& p : params_) std::copy(p->value.data.begin(), p->value.data.end(), flat.begin() + p->offset);
  return flat;
}

void ParamStore::assign_flat(std::span<const double> flat) {
  if (flat.size() != total_) throw DimensionError("flat parameter vector has wrong length");
  for (auto& p : params_) {
    std::copy(flat.begin() + p->offset, flat.begin() + p->offset + p->value.size(), p->value.data.begin());
  }
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
  Node n;
  n.value = p.value;
  n.requires_grad = record_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  param_nodes_[&p] = nodes_.size() - 1;
  return Var{this, nodes_.size() - 1};
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::push(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const auto& v : inputs) {
      if (nodes_[v.id].requires_grad) {
        n.requires_grad = true;
        break;
      }
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

std::vector<double>* Tape::grad_ptr(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return &n.grad;
}

void Tape::backward(Var loss) {
  if (!record_) throw Error("backward on a non-recording tape");
  if (nodes_[loss.id].value.size() != 1) {
    throw DimensionError("backward requires a scalar loss, got " + shape_str(nodes_[loss.id].value.shape));
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_ptr(loss.id)->at(0) += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

void Tape::export_param_grads(std::span<double> flat) const {
  for (const auto& [param, id] : param_nodes_) {
    const auto& g = nodes_[id].grad;
    if (g.empty()) continue;
    double* dst = flat.data() + param->offset;
    for (std::size_t k = 0; k < g.size(); ++k) dst[k] += g[k];
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace ops {
namespace {

[[noreturn]] void mismatch(const char* op, const Shape& a, const Shape& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape));
}

void check_same(const char* op, Var a, Var b) {
  if (a.tape != b.tape) throw Error(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape()) mismatch(op, a.shape(), b.shape());
}

// c[m,n] += a[m,k] * b[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,n] += a[m,k] * b[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

template <class F, class G>
Var unary(Var x, F forward, G derivative) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < xv.size(); ++i) out.data[i] = forward(xv.data[i]);
  const std::size_t xi = x.id;
  return x.tape->push(std::move(out), {x}, [xi, derivative](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xi);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    const auto& xv2 = t.value(xi).data;
    const auto& yv = t.value(self).data;
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * derivative(xv2[i], yv[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  if (av.shape[1] != bv.shape[0]) mismatch("matmul", av.shape, bv.shape);
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out({m, n});
  gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const double* g = t.grad_ptr(self)->data();
    if (auto* ga = t.grad_ptr(ai)) gemm_nt(g, t.value(bi).data.data(), ga->data(), m, n, k);
    if (auto* gb = t.grad_ptr(bi)) gemm_tn(t.value(ai).data.data(), g, gb->data(), m, k, n);
  });
}

Var matmul_nt(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul_nt", av);
  require_matrix("matmul_nt", bv);
  if (av.shape[1] != bv.shape[1]) mismatch("matmul_nt", av.shape, bv.shape);
  const std::size_t m = av.shape[0], k = av.shape[1], n = bv.shape[0];
  Tensor out({m, n});
  gemm_nt(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {a, b}, [ai, bi, m, k, n](Tape& t, std::size_t self) {
    const double* g = t.grad_ptr(self)->data();
    // C = A B^T: dA = G B, dB = G^T A
    if (auto* ga = t.grad_ptr(ai)) gemm_nn(g, t.value(bi).data.data(), ga->data(), m, n, k);
    if (auto* gb = t.grad_ptr(bi)) gemm_tn(g, t.value(ai).data.data(), gb->data(), m, n, k);
  });
}

Var add(Var a, Var b) {
  check_same("add", a, b);
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < bd.size(); ++i) out.data[i] += bd[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    for (std::size_t id : {ai, bi}) {
      if (auto* gx = t.grad_ptr(id))
        for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  check_same("sub", a, b);
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < bd.size(); ++i) out.data[i] -= bd[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    if (auto* ga = t.grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
    if (auto* gb = t.grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  check_same("mul", a, b);
  Tensor out = a.value();
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < bd.size(); ++i) out.data[i] *= bd[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(std::move(out), {a, b}, [ai, bi](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    const auto& av = t.value(ai).data;
    const auto& bv = t.value(bi).data;
    if (auto* ga = t.grad_ptr(ai))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    if (auto* gb = t.grad_ptr(bi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
  });
}

Var add_rowvec(Var x, Var b) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (b.value().size() != n) mismatch("add_rowvec", xv.shape, b.shape());
  Tensor out = xv;
  const auto& bd = b.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] += bd[j];
  const std::size_t xi = x.id, bi = b.id;
  return x.tape->push(std::move(out), {x, b}, [xi, bi, m, n](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    if (auto* gx = t.grad_ptr(xi))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (auto* gb = t.grad_ptr(bi))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[i * n + j];
  });
}

Var mul_rowvec(Var x, Var s) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (s.value().size() != n) mismatch("mul_rowvec", xv.shape, s.shape());
  Tensor out = xv;
  const auto& sd = s.value().data;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[i * n + j] *= sd[j];
  const std::size_t xi = x.id, si = s.id;
  return x.tape->push(std::move(out), {x, s}, [xi, si, m, n](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    const auto& xd = t.value(xi).data;
    const auto& sd2 = t.value(si).data;
    if (auto* gx = t.grad_ptr(xi))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += g[i * n + j] * sd2[j];
    if (auto* gs = t.grad_ptr(si))
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*gs)[j] += g[i * n + j] * xd[i * n + j];
  });
}

Var scale(Var x, double c) {
  return unary(x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Var silu(Var x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var square(Var x) {
  return unary(x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Var abs(Var x) {
  return unary(
      x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var softmax_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out(xv.shape);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xv.data.data() + i * n;
    double* yi = out.data.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(xi[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(i));
      mx = std::max(mx, xi[j]);
    }
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yi[j] /= s;
  }
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid, m, n](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    const auto& y = t.value(self).data;
    for (std::size_t i = 0; i < m; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (gain.value().size() != n) mismatch("layer_norm", xv.shape, gain.shape());
  if (bias.value().size() != n) mismatch("layer_norm", xv.shape, bias.shape());
  Tensor out(xv.shape);
  // normalized activations and inverse std per row, kept for the adjoint
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  const auto& gd = gain.value().data;
  const auto& bd = bias.value().data;
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = xv.data.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (xi[j] - mu) * is;
      (*xhat)[i * n + j] = h;
      out.data[i * n + j] = h * gd[j] + bd[j];
    }
  }
  const std::size_t xid = x.id, gid = gain.id, bid = bias.id;
  return x.tape->push(std::move(out), {x, gain, bias},
                      [xid, gid, bid, m, n, xhat, inv_std](Tape& t, std::size_t self) {
                        const auto& g = *t.grad_ptr(self);
                        const auto& gd2 = t.value(gid).data;
                        if (auto* gg = t.grad_ptr(gid))
                          for (std::size_t i = 0; i < m * n; ++i) (*gg)[i % n] += g[i] * (*xhat)[i];
                        if (auto* gb = t.grad_ptr(bid))
                          for (std::size_t i = 0; i < m * n; ++i) (*gb)[i % n] += g[i];
                        if (auto* gx = t.grad_ptr(xid)) {
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dh = g[i * n + j] * gd2[j];
                              s1 += dh;
                              s2 += dh * (*xhat)[i * n + j];
                            }
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dh = g[i * n + j] * gd2[j];
                              (*gx)[i * n + j] +=
                                  (*inv_std)[i] * (dh - inv_n * s1 - (*xhat)[i * n + j] * inv_n * s2);
                            }
                          }
                        }
                      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  if (begin > end || end > xv.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") out of bounds for " + shape_str(xv.shape));
  }
  const std::size_t n = xv.cols();
  Tensor out({end - begin, n});
  std::copy(xv.data.begin() + begin * n, xv.data.begin() + end * n, out.data.begin());
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid, begin, n](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[begin * n + i] += g[i];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> index) {
  const Tensor& xv = x.value();
  require_matrix("gather_rows", xv);
  const std::size_t n = xv.cols();
  Tensor out({index.size(), n});
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= xv.rows()) {
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " out of range for " +
                           shape_str(xv.shape));
    }
    std::copy_n(xv.data.begin() + index[r] * n, n, out.data.begin() + r * n);
  }
  const std::size_t xid = x.id;
  std::vector<std::size_t> idx(index.begin(), index.end());
  return x.tape->push(std::move(out), {x}, [xid, n, idx = std::move(idx)](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t j = 0; j < n; ++j) (*gx)[idx[r] * n + j] += g[r * n + j];
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts[0].cols();
  std::size_t m = 0;
  for (const auto& p : parts) {
    require_matrix("concat_rows", p.value());
    if (p.cols() != n) mismatch("concat_rows", parts[0].shape(), p.shape());
    m += p.rows();
  }
  Tensor out({m, n});
  std::vector<std::size_t> ids, starts;
  std::size_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + r * n);
    ids.push_back(p.id);
    starts.push_back(r);
    r += p.rows();
  }
  return parts[0].tape->push(std::move(out), parts, [ids, starts, n](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto* gx = t.grad_ptr(ids[k]);
      if (!gx) continue;
      for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += g[starts[k] * n + i];
    }
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  require_matrix("slice_cols", xv);
  if (begin > end || end > xv.cols()) {
    throw DimensionError("slice_cols: range out of bounds for " + shape_str(xv.shape));
  }
  const std::size_t m = xv.rows(), n = xv.cols(), w = end - begin;
  Tensor out({m, w});
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(xv.data.begin() + i * n + begin, w, out.data.begin() + i * w);
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid, begin, m, n, w](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) (*gx)[i * n + begin + j] += g[i * w + j];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts[0].rows();
  std::size_t n = 0;
  for (const auto& p : parts) {
    require_matrix("concat_cols", p.value());
    if (p.rows() != m) mismatch("concat_cols", parts[0].shape(), p.shape());
    n += p.cols();
  }
  Tensor out({m, n});
  std::vector<std::size_t> ids, starts, widths;
  std::size_t c = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.cols();
    for (std::size_t i = 0; i < m; ++i)
      std::copy_n(p.value().data.begin() + i * w, w, out.data.begin() + i * n + c);
    ids.push_back(p.id);
    starts.push_back(c);
    widths.push_back(w);
    c += w;
  }
  return parts[0].tape->push(std::move(out), parts, [ids, starts, widths, m, n](Tape& t, std::size_t self) {
    const auto& g = *t.grad_ptr(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      auto* gx = t.grad_ptr(ids[k]);
      if (!gx) continue;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j) (*gx)[i * widths[k] + j] += g[i * n + starts[k] + j];
    }
  });
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  const std::size_t m = xv.rows(), n = xv.cols();
  if (m == 0) throw DimensionError("mean_rows: empty input");
  Tensor out({1, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.data[j] += xv.data[i * n + j];
  for (auto& v : out.data) v /= static_cast<double>(m);
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid, m, n](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*gx)[i * n + j] += g[j] * inv;
  });
}

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.value().size()) mismatch("reshape", x.shape(), shape);
  Tensor out(std::move(shape), x.value().data);
  const std::size_t xid = x.id;
  return x.tape->push(std::move(out), {x}, [xid](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const auto& g = *t.grad_ptr(self);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::size_t xid = x.id;
  return x.tape->push(Tensor({1}, std::vector<double>{s}), {x}, [xid](Tape& t, std::size_t self) {
    auto* gx = t.grad_ptr(xid);
    if (!gx) return;
    const double g = (*t.grad_ptr(self))[0];
    for (auto& v : *gx) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw DimensionError("mean: empty input");
  double s = 0.0;
  for (double v : x.value().data) s += v;
  const std::size_t xid = x.id;
  return x.tape->push(Tensor({1}, std::vector<double>{s / static_cast<double>(n)}), {x},
                      [xid, n](Tape& t, std::size_t self) {
                        auto* gx = t.grad_ptr(xid);
                        if (!gx) return;
                        const double g = (*t.grad_ptr(self))[0] / static_cast<double>(n);
                        for (auto& v : *gx) v += g;
                      });
}

Var mean_abs_diff(Var a, Var b) {
  check_same("mean_abs_diff", a, b);
  const auto& ad = a.value().data;
  const auto& bd = b.value().data;
  const std::size_t n = ad.size();
  if (n == 0) throw DimensionError("mean_abs_diff: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::fabs(ad[i] - bd[i]);
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->push(Tensor({1}, std::vector<double>{s / static_cast<double>(n)}), {a, b},
                      [ai, bi, n](Tape& t, std::size_t self) {
                        const double g = (*t.grad_ptr(self))[0] / static_cast<double>(n);
                        const auto& av = t.value(ai).data;
                        const auto& bv = t.value(bi).data;
                        auto* ga = t.grad_ptr(ai);
                        auto* gb = t.grad_ptr(bi);
                        for (std::size_t i = 0; i < n; ++i) {
                          const double d = av[i] - bv[i];
                          const double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                          if (ga) (*ga)[i] += g * sg;
                          if (gb) (*gb)[i] -= g * sg;
                        }
                      });
}

Var detach(Var x) { return x.tape->constant(x.value()); }

Var soft_masked_attention(Var scores, Var mask, Var values, Tensor* probs) {
  const Tensor& cv = scores.value();
  const Tensor& uv = mask.value();
  const Tensor& vv = values.value();
  require_matrix("soft_masked_attention", cv);
  require_matrix("soft_masked_attention", uv);
  require_matrix("soft_masked_attention", vv);
  if (cv.shape != uv.shape) mismatch("soft_masked_attention", cv.shape, uv.shape);
  if (cv.shape[1] != vv.shape[0]) mismatch("soft_masked_attention", cv.shape, vv.shape);
  const std::size_t m = cv.shape[0], n = cv.shape[1], dv = vv.shape[1];

  constexpr double kMassFloor = 1e-12;
  // e = exp(C - rowmax) over all columns, A = e*U / max(sum e*U, floor)
  auto expo = std::make_shared<std::vector<double>>(m * n, 0.0);
  auto denom = std::make_shared<std::vector<double>>(m, 0.0);
  Tensor attn({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* ci = cv.data.data() + i * n;
    const double* ui = uv.data.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (ui[j] < 0.0) throw NumericError("soft_masked_attention: negative mask entry");
      if (ui[j] > 0.0) mx = std::max(mx, ci[j]);
    }
    if (!std::isfinite(mx)) continue;  // degenerate row: zero output
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(ci[j] - mx);
      (*expo)[i * n + j] = e;
      if (ui[j] > 0.0) s += e * ui[j];
    }
    s = std::max(s, kMassFloor);
    (*denom)[i] = s;
    for (std::size_t j = 0; j < n; ++j) attn.data[i * n + j] = ui[j] > 0.0 ? (*expo)[i * n + j] * ui[j] / s : 0.0;
  }
  Tensor out({m, dv});
  gemm_nn(attn.data.data(), vv.data.data(), out.data.data(), m, n, dv);
  if (probs) *probs = attn;

  auto attn_ptr = std::make_shared<Tensor>(std::move(attn));
  const std::size_t ci_ = scores.id, ui_ = mask.id, vi_ = values.id;
  return scores.tape->push(
      std::move(out), {scores, mask, values},
      [ci_, ui_, vi_, m, n, dv, attn_ptr, expo, denom](Tape& t, std::size_t self) {
        const double* g = t.grad_ptr(self)->data();
        const auto& a = attn_ptr->data;
        if (auto* gv = t.grad_ptr(vi_)) gemm_tn(a.data(), g, gv->data(), m, n, dv);
        auto* gc = t.grad_ptr(ci_);
        auto* gu = t.grad_ptr(ui_);
        if (!gc && !gu) return;
        // dA = G V^T
        std::vector<double> da(m * n, 0.0);
        gemm_nt(g, t.value(vi_).data.data(), da.data(), m, dv, n);
        for (std::size_t i = 0; i < m; ++i) {
          if ((*denom)[i] == 0.0) continue;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += da[i * n + j] * a[i * n + j];
          for (std::size_t j = 0; j < n; ++j) {
            const double centered = da[i * n + j] - dot;
            if (gc) (*gc)[i * n + j] += a[i * n + j] * centered;
            if (gu) (*gu)[i * n + j] += (*expo)[i * n + j] * centered / (*denom)[i];
          }
        }
      });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Gradient checking

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> points, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ConfigError("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<std::vector<double>> analytic(points.size());
  {
    Tape tape;
    std::vector<Var> leaves;
    for (const auto& p : points) leaves.push_back(tape.leaf(p));
    Var y = f(tape, leaves);
    if (!std::isfinite(y.value()[0])) throw NumericError("grad_check: non-finite objective");
    tape.backward(y);
    for (std::size_t k = 0; k < leaves.size(); ++k) {
      analytic[k] = tape.grad(leaves[k]);
      if (analytic[k].empty()) analytic[k].assign(points[k].size(), 0.0);
    }
  }
  auto evaluate = [&]() {
    Tape tape(false);
    std::vector<Var> leaves;
    for (const auto& p : points) leaves.push_back(tape.constant(p));
    const double v = f(tape, leaves).value()[0];
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective at probe point");
    return v;
  };
  GradCheckResult res;
  for (std::size_t k = 0; k < points.size(); ++k) {
    for (std::size_t i = 0; i < points[k].size(); ++i) {
      const double x0 = points[k].data[i];
      points[k].data[i] = x0 + eps;
      const double fp = evaluate();
      points[k].data[i] = x0 - eps;
      const double fm = evaluate();
      points[k].data[i] = x0;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double err = relative_error(analytic[k][i], numeric);
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_leaf = k;
        res.worst_index = i;
      }
    }
  }
  return res;
}

}  // namespace ava
