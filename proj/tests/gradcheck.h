#pragma once

// Central finite-difference oracle for gradient checks. Builds the loss
// through a callback so parameter perturbations replay the exact same
// graph (including dropout masks, via the fixed seed).

#include "mtk/graph.h"

#include <cmath>
#include <functional>
#include <map>

namespace mtk::testing {

using BuildFn = std::function<NodeRef(ExpressionGraph&)>;

inline double evalLoss(ExpressionGraph& g, const BuildFn& build, uint64_t seed) {
  g.clear();
  g.setSeed(seed);
  NodeRef loss = build(g);
  g.forward();
  return (double)loss.val().at(0);
}

// Returns the worst relative disagreement between backprop and central
// differences over all elements of the listed parameters. The relative
// scale is floored at 1e-3 so near-zero gradients are compared on an
// absolute basis.
inline double checkGradients(ExpressionGraph& g, const BuildFn& build,
                             const std::vector<std::string>& params, double eps = 1e-4,
                             uint64_t seed = 12345) {
  g.clear();
  g.setSeed(seed);
  NodeRef loss = build(g);
  g.forward();
  g.zeroGrads();
  g.backward(loss);
  std::map<std::string, std::vector<Real>> analytic;
  for(auto& name : params)
    analytic[name] = g.paramGrad(name).toVector();
  double maxRel = 0;
  for(auto& name : params) {
    Tensor& v = g.paramValue(name);
    for(int64_t i = 0; i < v.size(); ++i) {
      Real orig = v.at(i);
      v.at(i) = orig + (Real)eps;
      double lp = evalLoss(g, build, seed);
      v.at(i) = orig - (Real)eps;
      double lm = evalLoss(g, build, seed);
      v.at(i) = orig;
      double fd = (lp - lm) / (2 * eps);
      double an = (double)analytic[name][(size_t)i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-3});
      maxRel = std::max(maxRel, std::abs(fd - an) / denom);
    }
  }
  return maxRel;
}

}  // namespace mtk::testing
