#pragma once

// Finite-difference gradient oracle shared by the tensor unit tests and
// the acceptance suite. Builds random composites of the supported ops and
// compares analytic gradients against central differences. Independent of
// the tape internals: forward evaluation for the differences goes through
// a plain value-returning functor.

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ztop/rng.hpp"
#include "ztop/tensor.hpp"

namespace gradcheck {

using ztop::Index;
using ztop::TapeD;
using ztop::TensorD;

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-3});
}

// Forward function: maps parameter values to a scalar loss. Must be a pure
// function of the parameter list so central differences are valid.
using Forward = std::function<TensorD(std::vector<TensorD>& params, TapeD* tape)>;

struct CheckResult {
  double max_rel_err = 0.0;
  double loss = 0.0;
};

inline CheckResult check_gradients(const Forward& f, std::vector<TensorD> params,
                                   double eps = 1e-5) {
  CheckResult res;

  TapeD tape;
  std::vector<TensorD> tracked = params;
  for (auto& p : tracked) tape.watch(p);
  TensorD loss = f(tracked, &tape);
  res.loss = loss.value();
  tape.backward(loss);
  std::vector<TensorD> analytic;
  analytic.reserve(tracked.size());
  for (auto& p : tracked) analytic.push_back(tape.grad(p));

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (Index i = 0; i < params[pi].size(); ++i) {
      const double orig = params[pi][i];
      std::vector<TensorD> plus = params;
      plus[pi][i] = orig + eps;
      std::vector<TensorD> minus = params;
      minus[pi][i] = orig - eps;
      const double fp = f(plus, nullptr).value();
      const double fm = f(minus, nullptr).value();
      const double numeric = (fp - fm) / (2.0 * eps);
      res.max_rel_err = std::max(res.max_rel_err, rel_err(analytic[pi][i], numeric));
    }
  }
  return res;
}

// A random feed-forward composite: input -> affine -> activation ->
// affine -> row pick -> masked softmax -> log pick, plus dense reduction
// terms so every parameter receives gradient through several op kinds.
struct RandomNet {
  Index m, k, h, o;
  int act;  // 0 tanh, 1 relu
  std::vector<std::uint8_t> mask;
  Index pick_row, pick_idx;

  static RandomNet make(ztop::Rng& rng) {
    RandomNet net;
    net.m = rng.uniform_int(2, 4);
    net.k = rng.uniform_int(2, 5);
    net.h = rng.uniform_int(3, 6);
    net.o = rng.uniform_int(3, 6);
    net.act = rng.uniform_int(0, 1);
    net.mask.assign(static_cast<std::size_t>(net.o), 0);
    int on = 0;
    for (auto& b : net.mask)
      if (rng.bernoulli(0.7)) {
        b = 1;
        ++on;
      }
    if (on == 0) net.mask[0] = 1;
    net.pick_row = rng.uniform_int(0, static_cast<int>(net.m) - 1);
    std::vector<Index> feasible;
    for (Index i = 0; i < net.o; ++i)
      if (net.mask[static_cast<std::size_t>(i)]) feasible.push_back(i);
    net.pick_idx = feasible[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(feasible.size()) - 1))];
    return net;
  }

  std::vector<TensorD> init_params(ztop::Rng& rng) const {
    auto fill = [&rng](TensorD t) {
      for (Index i = 0; i < t.size(); ++i) t[i] = rng.uniform(-2.0, 2.0);
      return t;
    };
    return {fill(TensorD::zeros({m, k})), fill(TensorD::zeros({k, h})),
            fill(TensorD::zeros({h})), fill(TensorD::zeros({h, o})),
            fill(TensorD::zeros({o}))};
  }

  TensorD forward(std::vector<TensorD>& p, TapeD*) const {
    using namespace ztop;
    const TensorD& x = p[0];
    const TensorD& w1 = p[1];
    const TensorD& b1 = p[2];
    const TensorD& w2 = p[3];
    const TensorD& b2 = p[4];
    TensorD h1 = add(matmul(x, w1), b1);
    h1 = act == 0 ? tanh(h1) : relu(h1);
    TensorD h2 = add(matmul(h1, w2), b2);
    TensorD logits = row(h2, pick_row);
    TensorD probs = masked_softmax(scalar_mul(tanh(logits), 5.0), mask);
    TensorD lp = log(pick(probs, pick_idx));
    TensorD att = softmax_rows(scalar_mul(matmul(h2, transpose(h2)), 0.25));
    TensorD pooled = mean_rows(matmul(att, h1));
    TensorD dense = mean(mul(pooled, pooled));
    return add(add(lp, dense), scalar_mul(mean(h2), 0.5));
  }

  CheckResult run(ztop::Rng& rng) const {
    auto params = init_params(const_cast<ztop::Rng&>(rng));
    return check_gradients(
        [this](std::vector<TensorD>& p, TapeD* t) { return forward(p, t); }, params);
  }
};

}  // namespace gradcheck
