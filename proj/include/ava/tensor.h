// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors and a define-by-run reverse-mode tape.
//
// Values are row-major float64. A Tape records one node per primitive; each
// node owns its value, its adjoint buffer (allocated lazily on the backward
// pass) and a closure that scatters its adjoint into its inputs. A tape is
// rebuilt for every forward pass and is not shared across threads.

#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ava {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DimensionError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};
class NumericError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_size(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  // 2-D views; a rank-1 tensor is treated as a single row.
  std::size_t rows() const { return shape.size() == 2 ? shape[0] : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }
};

// A named trainable tensor. Offsets index into the flat gradient layout of
// the owning ParamStore.
struct Parameter {
  std::string name;
  Tensor value;
  std::size_t offset = 0;
  std::size_t index = 0;
};

class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(std::string name, Tensor init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const { return total_; }
  Parameter& at(std::size_t i) { return *params_[i]; }
  const Parameter& at(std::size_t i) const { return *params_[i]; }

  std::vector<double> flatten() const;
  void assign_flat(std::span<const double> flat);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> by_name_;
  std::size_t total_ = 0;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  // Scatters the adjoint of node `self` into the adjoints of its inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  // Tracked leaf that is not a model parameter (inputs under gradient check).
  Var leaf(Tensor value);
  // One leaf per parameter per tape; repeated calls return the same node.
  Var param(const Parameter& p);

  // Records a primitive. `fn` is dropped when no input requires a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push(Tensor value, std::span<const Var> inputs, BackwardFn fn);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  // Adjoint of a node during backward; nullptr when the node is untracked.
  std::vector<double>* grad_ptr(std::size_t id);
  const std::vector<double>& grad(Var v) const { return nodes_[v.id].grad; }

  void backward(Var loss);

  // Adds every parameter leaf's adjoint into `flat` at the parameter offset.
  void export_param_grads(std::span<double> flat) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    BackwardFn backward;
    bool requires_grad = false;
    const Parameter* param = nullptr;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_nodes_;
};

// Primitive operations. All check shapes and raise DimensionError naming both
// operands on mismatch.
namespace ops {

Var matmul(Var a, Var b);                 // [m,k]x[k,n]
Var matmul_nt(Var a, Var b);              // a * b^T, [m,k]x[n,k]
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                    // elementwise
Var add_rowvec(Var x, Var b);             // x[m,n] + b[n] per row
Var mul_rowvec(Var x, Var s);             // x[m,n] * s[n] per row
Var scale(Var x, double c);
Var silu(Var x);
Var tanh(Var x);
Var square(Var x);
Var abs(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var slice_rows(Var x, std::size_t begin, std::size_t end);
Var gather_rows(Var x, std::span<const std::size_t> index);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var x, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
Var mean_rows(Var x);                     // [m,n] -> [1,n]
Var reshape(Var x, Shape shape);
Var sum(Var x);                           // -> [1]
Var mean(Var x);                          // -> [1]
Var mean_abs_diff(Var a, Var b);          // mean |a-b| -> [1]
Var detach(Var x);

// Post-exponential soft-masked attention: A_ij = e^{C_ij} U_ij / sum_l e^{C_il} U_il,
// returns A V. Row max is taken over columns with U > 0. A row whose effective
// mass vanishes yields a zero output row. When `probs` is non-null the
// normalized attention matrix is written there.
Var soft_masked_attention(Var scores, Var mask, Var values, Tensor* probs = nullptr);

}  // namespace ops

// Central-difference gradient check. `f` builds a scalar on the given tape
// from leaves created for each entry of `points`. Returns the max over all
// coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> points, double eps = 1e-6);

double relative_error(double analytic, double numeric);

}  // namespace ava
