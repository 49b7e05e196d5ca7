// SPDX-License-Identifier: Apache-2.0

#include "ava/nn.h"

#include <cmath>

namespace ava {

Linear Linear::create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  Tensor w({in, out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (auto& v : w.data) v = rng.uniform(-bound, bound);
  Linear l;
  l.weight = &store.add(prefix + ".weight", std::move(w));
  l.bias = &store.add(prefix + ".bias", Tensor({out}));
  return l;
}

Var Linear::operator()(Tape& tape, Var x) const {
  if (x.cols() != in_features()) {
    throw DimensionError("linear " + weight->name + ": input width " + std::to_string(x.cols()) +
                         " does not match " + shape_str(weight->value.shape));
  }
  return ops::add_rowvec(ops::matmul(x, tape.param(*weight)), tape.param(*bias));
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& prefix, std::size_t width) {
  LayerNorm n;
  n.gain = &store.add(prefix + ".gain", Tensor({width}, 1.0));
  n.bias = &store.add(prefix + ".bias", Tensor({width}));
  return n;
}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return ops::layer_norm(x, tape.param(*gain), tape.param(*bias));
}

Mlp Mlp::create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden, std::size_t out,
                Rng& rng) {
  Mlp m;
  m.fc1 = Linear::create(store, prefix + ".fc1", in, hidden, rng);
  m.fc2 = Linear::create(store, prefix + ".fc2", hidden, out, rng);
  return m;
}

Var Mlp::operator()(Tape& tape, Var x) const { return fc2(tape, ops::silu(fc1(tape, x))); }

Var mlp_forward(Tape& tape, Var x, const Mlp& layers) { return layers(tape, x); }

Parameter& create_table(ParamStore& store, const std::string& name, std::size_t rows, std::size_t width, Rng& rng) {
  Tensor t({rows, width});
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  for (auto& v : t.data) v = rng.uniform(-bound, bound);
  return store.add(name, std::move(t));
}

}  // namespace ava
