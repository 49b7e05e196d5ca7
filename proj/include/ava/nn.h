// SPDX-License-Identifier: Apache-2.0
//
// Parameterized layers on top of the tape primitives. Layers hold pointers
// into a ParamStore and are cheap to copy.

#pragma once

#include <string>

#include "ava/rng.h"
#include "ava/tensor.h"

namespace ava {

// y = x W + b with W stored [in, out]. Weights ~ U(-1/sqrt(in), 1/sqrt(in)), bias 0.
struct Linear {
  const Parameter* weight = nullptr;
  const Parameter* bias = nullptr;

  static Linear create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  std::size_t in_features() const { return weight->value.shape[0]; }
  std::size_t out_features() const { return weight->value.shape[1]; }
  Var operator()(Tape& tape, Var x) const;
};

struct LayerNorm {
  const Parameter* gain = nullptr;
  const Parameter* bias = nullptr;

  static LayerNorm create(ParamStore& store, const std::string& prefix, std::size_t width);
  Var operator()(Tape& tape, Var x) const;
};

// Two affine maps with SiLU in between.
struct Mlp {
  Linear fc1;
  Linear fc2;

  static Mlp create(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                    std::size_t out, Rng& rng);
  Var operator()(Tape& tape, Var x) const;
};

// Table of learned rows, U(-1/sqrt(width), 1/sqrt(width)).
Parameter& create_table(ParamStore& store, const std::string& name, std::size_t rows, std::size_t width, Rng& rng);

Var mlp_forward(Tape& tape, Var x, const Mlp& layers);

}  // namespace ava
