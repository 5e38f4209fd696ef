#include "mtk/graph.h"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mtk {

Tensor& NodeRef::val() const {
  if(!graph)
    throw ContractError("empty node reference");
  return graph->nodeValue(index, gen);
}

Tensor& NodeRef::grad() const {
  if(!graph)
    throw ContractError("empty node reference");
  return graph->nodeGrad(index, gen);
}

namespace inits {

ParamInit zeros() {
  return [](Tensor& t, Rng&) { t.setZero(); };
}

ParamInit ones() {
  return [](Tensor& t, Rng&) { t.fill(1); };
}

ParamInit constant(Real v) {
  return [v](Tensor& t, Rng&) { t.fill(v); };
}

ParamInit glorotUniform() {
  return [](Tensor& t, Rng& rng) {
    int rank = t.shape().rank();
    Real fanIn = (Real)t.shape()[rank - 1];
    Real fanOut = rank >= 2 ? (Real)t.shape()[rank - 2] : fanIn;
    Real limit = std::sqrt(Real(6) / (fanIn + fanOut));
    std::uniform_real_distribution<double> d(-(double)limit, (double)limit);
    for(int64_t i = 0; i < t.size(); ++i)
      t.at(i) = (Real)d(rng);
  };
}

ParamInit uniform(Real lo, Real hi) {
  return [lo, hi](Tensor& t, Rng& rng) {
    std::uniform_real_distribution<double> d((double)lo, (double)hi);
    for(int64_t i = 0; i < t.size(); ++i)
      t.at(i) = (Real)d(rng);
  };
}

ParamInit fromVector(std::vector<Real> v) {
  return [v = std::move(v)](Tensor& t, Rng&) {
    if((int64_t)v.size() != t.size())
      throw DimensionError("init vector length mismatch");
    std::copy(v.begin(), v.end(), t.data());
  };
}

}  // namespace inits

ExpressionGraph::ExpressionGraph(uint64_t seed, bool inference)
    : rng_(seed), seed_(seed), inference_(inference) {}

void ExpressionGraph::checkRef(const NodeRef& r) const {
  if(r.graph != this)
    throw ContractError("node reference belongs to a different graph");
  if(r.gen != generation_)
    throw ContractError("stale node reference (graph was cleared)");
  if(r.index < 0 || (size_t)r.index >= nodes_.size())
    throw ContractError("node index out of range");
}

Tensor& ExpressionGraph::nodeValue(int index, uint64_t gen) {
  if(gen != generation_)
    throw ContractError("stale node reference (graph was cleared)");
  Tensor& v = nodes_[(size_t)index].value;
  if(v.empty())
    throw ContractError("node value not computed; call forward() first");
  return v;
}

Tensor& ExpressionGraph::nodeGrad(int index, uint64_t gen) {
  if(gen != generation_)
    throw ContractError("stale node reference (graph was cleared)");
  Tensor& g = nodes_[(size_t)index].grad;
  if(g.empty())
    throw ContractError("node gradient not available; call backward() first");
  return g;
}

NodeRef ExpressionGraph::addNode(Node n) {
  nodes_.push_back(std::move(n));
  return NodeRef{this, (int)nodes_.size() - 1, generation_, nodes_.back().shape};
}

NodeRef ExpressionGraph::param(const std::string& name, const Shape& shape,
                               const ParamInit& init) {
  auto it = params_.find(name);
  if(it == params_.end()) {
    Param p;
    p.value = Tensor(shape);
    p.grad = Tensor(shape);
    Rng prng(hash64(name) ^ seed_);
    init(p.value, prng);
    it = params_.emplace(name, std::move(p)).first;
    paramOrder_.push_back(name);
  } else if(it->second.value.shape() != shape) {
    throw ContractError("parameter " + name + " redefined with shape " + shape.str() +
                        " (was " + it->second.value.shape().str() + ")");
  }
  Node n;
  n.op = "param";
  n.shape = shape;
  n.isParam = true;
  n.paramName = name;
  n.value = Tensor(shape, it->second.value.data());
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::constant(const Tensor& t) {
  Node n;
  n.op = "const";
  n.shape = t.shape();
  n.value = Tensor(t.shape(), arena_.alloc(t.size()));
  n.value.copyFrom(t);
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::constant(Shape shape, std::vector<Real> values) {
  return constant(Tensor(std::move(shape), std::move(values)));
}

// -------------------------------------------------------- elementwise

NodeRef ExpressionGraph::binary(const std::string& name, EwiseOp op, NodeRef a, NodeRef b) {
  checkRef(a);
  checkRef(b);
  Node n;
  n.op = name;
  n.shape = broadcastShape(a.shape, b.shape);
  n.inputs = {a.index, b.index};
  n.fwd = [op](ExpressionGraph& g, Node& n) {
    ewiseBinaryInto(n.value, op, g.node(n.inputs[0]).value, g.node(n.inputs[1]).value);
  };
  n.bwd = [op](ExpressionGraph& g, Node& n) {
    Tensor& go = n.grad;
    Node& na = g.node(n.inputs[0]);
    Node& nb = g.node(n.inputs[1]);
    switch(op) {
      case EwiseOp::Add:
        accumulateReduced(na.grad, go);
        accumulateReduced(nb.grad, go);
        break;
      case EwiseOp::Sub: {
        accumulateReduced(na.grad, go);
        Tensor ng = ewise(EwiseOp::Neg, go);
        accumulateReduced(nb.grad, ng);
        break;
      }
      case EwiseOp::Mul: {
        Tensor ta = ewise(EwiseOp::Mul, go, nb.value);
        accumulateReduced(na.grad, ta);
        Tensor tb = ewise(EwiseOp::Mul, go, na.value);
        accumulateReduced(nb.grad, tb);
        break;
      }
      case EwiseOp::Div: {
        Tensor ga = ewise(EwiseOp::Div, go, nb.value);
        accumulateReduced(na.grad, ga);
        Tensor gb = ewise(EwiseOp::Neg, ewise(EwiseOp::Div, ewise(EwiseOp::Mul, go, n.value), nb.value));
        accumulateReduced(nb.grad, gb);
        break;
      }
      default: throw ContractError("bad binary op");
    }
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::unary(const std::string& name, EwiseOp op, NodeRef a) {
  checkRef(a);
  Node n;
  n.op = name;
  n.shape = a.shape;
  n.inputs = {a.index};
  n.fwd = [op](ExpressionGraph& g, Node& n) {
    ewiseUnaryInto(n.value, op, g.node(n.inputs[0]).value);
  };
  n.bwd = [op](ExpressionGraph& g, Node& n) {
    Node& na = g.node(n.inputs[0]);
    const Real* go = n.grad.data();
    const Real* y = n.value.data();
    const Real* x = na.value.data();
    Real* gx = na.grad.data();
    int64_t sz = n.value.size();
    switch(op) {
      case EwiseOp::Tanh:
        for(int64_t i = 0; i < sz; ++i) gx[i] += go[i] * (Real(1) - y[i] * y[i]);
        break;
      case EwiseOp::Sigmoid:
        for(int64_t i = 0; i < sz; ++i) gx[i] += go[i] * y[i] * (Real(1) - y[i]);
        break;
      case EwiseOp::Relu:
        for(int64_t i = 0; i < sz; ++i) gx[i] += x[i] > 0 ? go[i] : Real(0);
        break;
      case EwiseOp::Exp:
        for(int64_t i = 0; i < sz; ++i) gx[i] += go[i] * y[i];
        break;
      case EwiseOp::Log:
        for(int64_t i = 0; i < sz; ++i) gx[i] += go[i] / x[i];
        break;
      case EwiseOp::Neg:
        for(int64_t i = 0; i < sz; ++i) gx[i] -= go[i];
        break;
      default: throw ContractError("bad unary op");
    }
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::add(NodeRef a, NodeRef b) { return binary("add", EwiseOp::Add, a, b); }
NodeRef ExpressionGraph::sub(NodeRef a, NodeRef b) { return binary("sub", EwiseOp::Sub, a, b); }
NodeRef ExpressionGraph::mul(NodeRef a, NodeRef b) { return binary("mul", EwiseOp::Mul, a, b); }
NodeRef ExpressionGraph::div(NodeRef a, NodeRef b) { return binary("div", EwiseOp::Div, a, b); }
NodeRef ExpressionGraph::tanh(NodeRef a) { return unary("tanh", EwiseOp::Tanh, a); }
NodeRef ExpressionGraph::sigmoid(NodeRef a) { return unary("sigmoid", EwiseOp::Sigmoid, a); }
NodeRef ExpressionGraph::relu(NodeRef a) { return unary("relu", EwiseOp::Relu, a); }
NodeRef ExpressionGraph::exp(NodeRef a) { return unary("exp", EwiseOp::Exp, a); }
NodeRef ExpressionGraph::log(NodeRef a) { return unary("log", EwiseOp::Log, a); }
NodeRef ExpressionGraph::neg(NodeRef a) { return unary("neg", EwiseOp::Neg, a); }

NodeRef ExpressionGraph::scale(NodeRef a, Real s) {
  checkRef(a);
  Node n;
  n.op = "scale";
  n.shape = a.shape;
  n.inputs = {a.index};
  n.fwd = [s](ExpressionGraph& g, Node& n) {
    const Real* x = g.node(n.inputs[0]).value.data();
    Real* o = n.value.data();
    for(int64_t i = 0; i < n.value.size(); ++i)
      o[i] = s * x[i];
  };
  n.bwd = [s](ExpressionGraph& g, Node& n) {
    axpy(g.node(n.inputs[0]).grad, n.grad, s);
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::addScalar(NodeRef a, Real s) {
  checkRef(a);
  Node n;
  n.op = "addScalar";
  n.shape = a.shape;
  n.inputs = {a.index};
  n.fwd = [s](ExpressionGraph& g, Node& n) {
    const Real* x = g.node(n.inputs[0]).value.data();
    Real* o = n.value.data();
    for(int64_t i = 0; i < n.value.size(); ++i)
      o[i] = x[i] + s;
  };
  n.bwd = [](ExpressionGraph& g, Node& n) { axpy(g.node(n.inputs[0]).grad, n.grad); };
  return addNode(std::move(n));
}

// ----------------------------------------------------- linear algebra

// dst += op(x) * op(y), summing over the batch dim when dst is unbatched.
static void matmulAccumInto(Tensor& dst, const Tensor& x, const Tensor& y, bool tx, bool ty) {
  bool xBatched = x.shape().rank() == 3;
  bool yBatched = y.shape().rank() == 3;
  bool productBatched = xBatched || yBatched;
  if(!productBatched || dst.shape().rank() == 3) {
    matmulInto(dst, x, y, tx, ty, 1, 1);
    return;
  }
  int64_t batch = xBatched ? x.shape()[0] : y.shape()[0];
  for(int64_t b = 0; b < batch; ++b) {
    Tensor xv = xBatched ? Tensor(Shape({x.shape()[1], x.shape()[2]}),
                                  const_cast<Real*>(x.data()) + b * x.shape()[1] * x.shape()[2])
                         : x;
    Tensor yv = yBatched ? Tensor(Shape({y.shape()[1], y.shape()[2]}),
                                  const_cast<Real*>(y.data()) + b * y.shape()[1] * y.shape()[2])
                         : y;
    matmulInto(dst, xv, yv, tx, ty, 1, 1);
  }
}

NodeRef ExpressionGraph::dot(NodeRef a, NodeRef b, bool transA, bool transB) {
  checkRef(a);
  checkRef(b);
  auto opRows = [](const Shape& s, bool t) { return t ? s.back() : s[s.rank() - 2]; };
  auto opCols = [](const Shape& s, bool t) { return t ? s[s.rank() - 2] : s.back(); };
  if(a.shape.rank() < 2 || b.shape.rank() < 2)
    throw DimensionError("matmul needs rank >= 2 operands: " + a.shape.str() + " x " +
                         b.shape.str());
  if(opCols(a.shape, transA) != opRows(b.shape, transB))
    throw DimensionError("matmul inner dims disagree: " + a.shape.str() + " x " +
                         b.shape.str());
  int64_t batchA = a.shape.rank() == 3 ? a.shape[0] : 1;
  int64_t batchB = b.shape.rank() == 3 ? b.shape[0] : 1;
  if(batchA != batchB && batchA != 1 && batchB != 1)
    throw DimensionError("matmul batch dims disagree: " + a.shape.str() + " x " +
                         b.shape.str());
  Node n;
  n.op = "matmul";
  int64_t m = opRows(a.shape, transA), c = opCols(b.shape, transB);
  n.shape = (a.shape.rank() == 3 || b.shape.rank() == 3)
                ? Shape({std::max(batchA, batchB), m, c})
                : Shape({m, c});
  n.inputs = {a.index, b.index};
  n.fwd = [transA, transB](ExpressionGraph& g, Node& n) {
    matmulInto(n.value, g.node(n.inputs[0]).value, g.node(n.inputs[1]).value, transA, transB);
  };
  n.bwd = [transA, transB](ExpressionGraph& g, Node& n) {
    Node& na = g.node(n.inputs[0]);
    Node& nb = g.node(n.inputs[1]);
    if(!transA)
      matmulAccumInto(na.grad, n.grad, nb.value, false, !transB);
    else
      matmulAccumInto(na.grad, nb.value, n.grad, transB, true);
    if(!transB)
      matmulAccumInto(nb.grad, na.value, n.grad, !transA, false);
    else
      matmulAccumInto(nb.grad, n.grad, na.value, true, transA);
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::affine(NodeRef x, NodeRef w, NodeRef b, bool transW) {
  return add(dot(x, w, false, transW), b);
}

NodeRef ExpressionGraph::reshape(NodeRef a, Shape shape) {
  checkRef(a);
  if(shape.size() != a.shape.size())
    throw DimensionError("reshape element count mismatch: " + a.shape.str() + " -> " +
                         shape.str());
  Node n;
  n.op = "reshape";
  n.shape = shape;
  n.inputs = {a.index};
  n.fwd = [](ExpressionGraph& g, Node& n) { n.value.copyFrom(g.node(n.inputs[0]).value); };
  n.bwd = [](ExpressionGraph& g, Node& n) { axpy(g.node(n.inputs[0]).grad, n.grad); };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::transpose(NodeRef a, std::vector<int> perm) {
  checkRef(a);
  if((int)perm.size() != a.shape.rank())
    throw DimensionError("transpose perm rank mismatch");
  std::vector<int64_t> dims;
  for(int p : perm)
    dims.push_back(a.shape[p]);
  std::vector<int> inv((size_t)a.shape.rank());
  for(int i = 0; i < (int)perm.size(); ++i)
    inv[(size_t)perm[(size_t)i]] = i;
  Node n;
  n.op = "transpose";
  n.shape = Shape(dims);
  n.inputs = {a.index};
  n.fwd = [perm](ExpressionGraph& g, Node& n) {
    transposeInto(n.value, g.node(n.inputs[0]).value, perm);
  };
  n.bwd = [inv](ExpressionGraph& g, Node& n) {
    Node& na = g.node(n.inputs[0]);
    Tensor tmp(na.value.shape());
    transposeInto(tmp, n.grad, inv);
    axpy(na.grad, tmp);
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::concat(const std::vector<NodeRef>& parts, int axis) {
  if(parts.empty())
    throw ContractError("concat of zero parts");
  for(auto& p : parts)
    checkRef(p);
  std::vector<int64_t> dims = parts[0].shape.dims();
  for(size_t i = 1; i < parts.size(); ++i) {
    for(int d = 0; d < (int)dims.size(); ++d)
      if(d != axis && parts[i].shape[d] != dims[(size_t)d])
        throw DimensionError("concat shape mismatch on non-concat axis");
    dims[(size_t)axis] += parts[i].shape[axis];
  }
  Node n;
  n.op = "concat";
  n.shape = Shape(dims);
  for(auto& p : parts)
    n.inputs.push_back(p.index);
  n.fwd = [axis](ExpressionGraph& g, Node& n) {
    std::vector<const Tensor*> ps;
    for(int i : n.inputs)
      ps.push_back(&g.node(i).value);
    concatInto(n.value, ps, axis);
  };
  n.bwd = [axis](ExpressionGraph& g, Node& n) {
    int64_t offset = 0;
    for(int i : n.inputs) {
      Node& ni = g.node(i);
      Tensor tmp(ni.value.shape());
      sliceInto(tmp, n.grad, axis, offset, ni.value.shape()[axis]);
      axpy(ni.grad, tmp);
      offset += ni.value.shape()[axis];
    }
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::slice(NodeRef a, int axis, int64_t start, int64_t len) {
  checkRef(a);
  if(axis < 0 || axis >= a.shape.rank() || start < 0 || start + len > a.shape[axis])
    throw DimensionError("slice out of range for " + a.shape.str());
  std::vector<int64_t> dims = a.shape.dims();
  dims[(size_t)axis] = len;
  Node n;
  n.op = "slice";
  n.shape = Shape(dims);
  n.inputs = {a.index};
  n.fwd = [axis, start, len](ExpressionGraph& g, Node& n) {
    sliceInto(n.value, g.node(n.inputs[0]).value, axis, start, len);
  };
  n.bwd = [axis, start, len](ExpressionGraph& g, Node& n) {
    Node& na = g.node(n.inputs[0]);
    int64_t outer = 1, inner = 1;
    for(int i = 0; i < axis; ++i)
      outer *= na.value.shape()[i];
    for(int i = axis + 1; i < na.value.shape().rank(); ++i)
      inner *= na.value.shape()[i];
    int64_t full = na.value.shape()[axis];
    for(int64_t o = 0; o < outer; ++o)
      for(int64_t j = 0; j < len * inner; ++j)
        na.grad.at((o * full + start) * inner + j) += n.grad.at(o * len * inner + j);
  };
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::gatherRows(NodeRef a, std::vector<int64_t> rows) {
  checkRef(a);
  std::vector<int64_t> dims = a.shape.dims();
  dims[0] = (int64_t)rows.size();
  Node n;
  n.op = "gatherRows";
  n.shape = Shape(dims);
  n.inputs = {a.index};
  auto rowsPtr = std::make_shared<std::vector<int64_t>>(std::move(rows));
  n.aux = rowsPtr;
  n.fwd = [rowsPtr](ExpressionGraph& g, Node& n) {
    gatherRowsInto(n.value, g.node(n.inputs[0]).value, *rowsPtr);
  };
  n.bwd = [rowsPtr](ExpressionGraph& g, Node& n) {
    scatterAddRows(g.node(n.inputs[0]).grad, n.grad, *rowsPtr);
  };
  return addNode(std::move(n));
}

// ------------------------------------------- reductions / normalization

NodeRef ExpressionGraph::reduce(ReduceOp op, NodeRef a, int axis, bool keepAxis) {
  checkRef(a);
  if(axis < 0 || axis >= a.shape.rank())
    throw DimensionError("reduce axis " + std::to_string(axis) + " out of range for " +
                         a.shape.str());
  std::vector<int64_t> dims;
  for(int i = 0; i < a.shape.rank(); ++i) {
    if(i == axis) {
      if(keepAxis)
        dims.push_back(1);
    } else {
      dims.push_back(a.shape[i]);
    }
  }
  if(dims.empty())
    dims.push_back(1);
  Node n;
  n.op = op == ReduceOp::Sum ? "sum" : op == ReduceOp::Mean ? "mean"
                                     : op == ReduceOp::Max  ? "max"
                                                            : "argmax";
  n.shape = Shape(dims);
  n.inputs = {a.index};
  n.fwd = [op, axis, keepAxis](ExpressionGraph& g, Node& n) {
    reduceInto(n.value, op, g.node(n.inputs[0]).value, axis, keepAxis);
  };
  if(op != ReduceOp::Argmax) {
    n.bwd = [op, axis](ExpressionGraph& g, Node& n) {
      Node& na = g.node(n.inputs[0]);
      int64_t outer = 1, inner = 1, cnt = na.value.shape()[axis];
      for(int i = 0; i < axis; ++i)
        outer *= na.value.shape()[i];
      for(int i = axis + 1; i < na.value.shape().rank(); ++i)
        inner *= na.value.shape()[i];
      for(int64_t o = 0; o < outer; ++o)
        for(int64_t c = 0; c < inner; ++c) {
          Real go = n.grad.at(o * inner + c);
          Real* base = na.grad.data() + o * cnt * inner + c;
          const Real* xv = na.value.data() + o * cnt * inner + c;
          switch(op) {
            case ReduceOp::Sum:
              for(int64_t i = 0; i < cnt; ++i)
                base[i * inner] += go;
              break;
            case ReduceOp::Mean:
              for(int64_t i = 0; i < cnt; ++i)
                base[i * inner] += go / (Real)cnt;
              break;
            case ReduceOp::Max: {
              int64_t best = 0;
              for(int64_t i = 1; i < cnt; ++i)
                if(xv[i * inner] > xv[best * inner])
                  best = i;
              base[best * inner] += go;
              break;
            }
            default: break;
          }
        }
    };
  }
  return addNode(std::move(n));
}

NodeRef ExpressionGraph::softmax(NodeRef a, Tensor mask) {
  checkRef(a);
  Node n;
  n.op = "softmax";
  n.shape = a.shape;
  n.inputs = {a.index};
  auto maskPtr = std::make_shared<Tensor>(std::move(mask));
  n.aux = maskPtr;
  n.fwd = [maskPtr](ExpressionGraph& g, Node& n) {
    softmaxInto(n.value, g.node(n.inputs[0]).value, maskPtr->empty() ? nullptr : maskPtr.get(),
                false);
  };
  n.bwd = [](ExpressionGraph& g, Node& n) {
    // dx = y * (g - sum(g*y)); masked entries have y == 0
    Node& na = g.node(n.inputs[0]);
    int64_t cols = n.value.shape().back();
    int64_t rows = n.value.size() / cols;
    for(int64_t r = 0; r < rows; ++r) {
      const Real* y = n.value.data() + r * cols;
      const Real* go = n.grad.data() + r * cols;
      Real* gx = na.grad.data() + r * cols;
      Real dotv = 0;
      for(int64_t j = 0; j < cols; ++j)
        dotv += go[j] * y[j];
      for(int64_t j = 0; j < cols; ++j)
        gx[j] += y[j] * (go[j] - dotv);
    }
  };
  return addNode(std::move(n));
}

namespace {
struct LnCache {
  Tensor invStd, xhat;
};
}  // namespace

NodeRef ExpressionGraph::layerNorm(NodeRef x, NodeRef gain, NodeRef bias, Real eps) {
  checkRef(x);
  checkRef(gain);
  checkRef(bias);
  int64_t d = x.shape.back();
  if(d < 2)
    throw DimensionError("layer norm needs last extent >= 2, got " + x.shape.str());
  if(gain.shape.size() != d || bias.shape.size() != d)
    throw DimensionError("layer norm gain/bias must have length " + std::to_string(d));
  Node n;
  n.op = "layerNorm";
  n.shape = x.shape;
  n.inputs = {x.index, gain.index, bias.index};
  auto cache = std::make_shared<LnCache>();
  n.aux = cache;
  n.fwd = [cache, eps, d](ExpressionGraph& g, Node& n) {
    int64_t rows = n.value.size() / d;
    cache->invStd = Tensor(Shape({rows}));
    cache->xhat = Tensor(n.value.shape());
    layerNormInto(n.value, g.node(n.inputs[0]).value, g.node(n.inputs[1]).value,
                  g.node(n.inputs[2]).value, eps, cache->invStd, cache->xhat);
  };
  n.bwd = [cache](ExpressionGraph& g, Node& n) {
    layerNormBackward(n.grad, g.node(n.inputs[1]).value, cache->invStd, cache->xhat,
                      g.node(n.inputs[0]).grad, g.node(n.inputs[1]).grad,
                      g.node(n.inputs[2]).grad);
  };
  return addNode(std::move(n));
}

// -------------------------------------------------------------- embed

NodeRef ExpressionGraph::embed(NodeRef table, const IntMat& ids) {
  checkRef(table);
  if(table.shape.rank() != 2)
    throw DimensionError("embedding table must be rank 2, got " + table.shape.str());
  int64_t vocab = table.shape[0], e = table.shape[1];
  auto rows = std::make_shared<std::vector<int64_t>>();
  rows->reserve((size_t)ids.size());
  for(int32_t id : ids.data) {
    if(id < 0 || id >= vocab)
      throw DataError("token id " + std::to_string(id) + " out of vocabulary of size " +
                      std::to_string(vocab));
    rows->push_back(id);
  }
  Node n;
  n.op = "embed";
  n.shape = Shape({ids.rows, ids.cols, e});
  n.inputs = {table.index};
  n.aux = rows;
  n.fwd = [rows](ExpressionGraph& g, Node& n) {
    Tensor flat(Shape({(int64_t)rows->size(), n.value.shape().back()}), n.value.data());
    gatherRowsInto(flat, g.node(n.inputs[0]).value, *rows);
  };
  n.bwd = [rows](ExpressionGraph& g, Node& n) {
    Tensor flat(Shape({(int64_t)rows->size(), n.value.shape().back()}), n.grad.data());
    scatterAddRows(g.node(n.inputs[0]).grad, flat, *rows);
  };
  return addNode(std::move(n));
}

// ----------------------------------------------------------- GRU cell

namespace {
struct GruCache {
  Tensor z, r, htilde, uh;
  LnCache lnZ, lnR, lnX;
};

// pre = x*W + h*U + b (terms optional); returns owned tensor [b x d]
Tensor gruPre(const Tensor* x, const Tensor* W, const Tensor& h, const Tensor* U,
              const Tensor* b, int64_t bdim, int64_t d) {
  Tensor out(Shape({bdim, d}));
  if(U)
    matmulInto(out, h, *U, false, false, 1, 0);
  if(x && W)
    matmulInto(out, *x, *W, false, false, 1, 1);
  if(b)
    for(int64_t i = 0; i < bdim; ++i)
      for(int64_t j = 0; j < d; ++j)
        out.at(i * d + j) += b->at(j);
  return out;
}
}  // namespace

NodeRef ExpressionGraph::gruCell(NodeRef state, NodeRef input, const GruParams& p,
                                 bool layerNorm) {
  checkRef(state);
  bool hasInput = input.valid();
  if(hasInput)
    checkRef(input);
  int64_t b = state.shape[0], d = state.shape.back();
  if(state.shape.rank() != 2)
    throw DimensionError("gru state must be rank 2 [batch x d], got " + state.shape.str());
  if(hasInput && input.shape[0] != b)
    throw DimensionError("gru input batch mismatch: " + input.shape.str() + " vs " +
                         state.shape.str());

  Node n;
  n.op = "gruCell";
  n.shape = state.shape;
  // fixed input slots: 0 state, then params
  n.inputs = {state.index, p.Uz.index, p.bz.index, p.Ur.index, p.br.index,
              p.Uh.index,  p.bh.index};
  int xSlot = -1, wSlot = -1;
  if(hasInput) {
    xSlot = (int)n.inputs.size();
    n.inputs.push_back(input.index);
    wSlot = (int)n.inputs.size();
    n.inputs.push_back(p.Wz.index);
    n.inputs.push_back(p.Wr.index);
    n.inputs.push_back(p.Wx.index);
  }
  int lnSlot = -1;
  if(layerNorm) {
    lnSlot = (int)n.inputs.size();
    n.inputs.push_back(p.lnGz.index);
    n.inputs.push_back(p.lnBz.index);
    n.inputs.push_back(p.lnGr.index);
    n.inputs.push_back(p.lnBr.index);
    if(hasInput) {
      n.inputs.push_back(p.lnGx.index);
      n.inputs.push_back(p.lnBx.index);
    }
  }
  auto cache = std::make_shared<GruCache>();
  n.aux = cache;
  const Real lnEps = Real(1e-9);

  n.fwd = [cache, hasInput, layerNorm, xSlot, wSlot, lnSlot, b, d, lnEps](ExpressionGraph& g,
                                                                          Node& n) {
    const Tensor& h = g.node(n.inputs[0]).value;
    const Tensor& Uz = g.node(n.inputs[1]).value;
    const Tensor& bz = g.node(n.inputs[2]).value;
    const Tensor& Ur = g.node(n.inputs[3]).value;
    const Tensor& br = g.node(n.inputs[4]).value;
    const Tensor& Uh = g.node(n.inputs[5]).value;
    const Tensor& bh = g.node(n.inputs[6]).value;
    const Tensor* x = hasInput ? &g.node(n.inputs[xSlot]).value : nullptr;
    const Tensor* Wz = hasInput ? &g.node(n.inputs[wSlot]).value : nullptr;
    const Tensor* Wr = hasInput ? &g.node(n.inputs[wSlot + 1]).value : nullptr;
    const Tensor* Wx = hasInput ? &g.node(n.inputs[wSlot + 2]).value : nullptr;

    auto maybeLn = [&](Tensor pre, int gainSlot, LnCache& lc) -> Tensor {
      if(!layerNorm)
        return pre;
      Tensor out(pre.shape());
      lc.invStd = Tensor(Shape({b}));
      lc.xhat = Tensor(pre.shape());
      layerNormInto(out, pre, g.node(n.inputs[gainSlot]).value,
                    g.node(n.inputs[gainSlot + 1]).value, lnEps, lc.invStd, lc.xhat);
      return out;
    };

    Tensor az = maybeLn(gruPre(x, Wz, h, &Uz, &bz, b, d), lnSlot, cache->lnZ);
    cache->z = Tensor(Shape({b, d}));
    ewiseUnaryInto(cache->z, EwiseOp::Sigmoid, az);

    Tensor ar = maybeLn(gruPre(x, Wr, h, &Ur, &br, b, d), lnSlot >= 0 ? lnSlot + 2 : -1,
                        cache->lnR);
    cache->r = Tensor(Shape({b, d}));
    ewiseUnaryInto(cache->r, EwiseOp::Sigmoid, ar);

    cache->uh = Tensor(Shape({b, d}));
    matmulInto(cache->uh, h, Uh, false, false, 1, 0);

    Tensor ac(Shape({b, d}));
    if(hasInput) {
      Tensor ax(Shape({b, d}));
      matmulInto(ax, *x, *Wx, false, false, 1, 0);
      ac = maybeLn(std::move(ax), lnSlot >= 0 ? lnSlot + 4 : -1, cache->lnX);
    } else {
      ac.setZero();
    }
    for(int64_t i = 0; i < b * d; ++i)
      ac.at(i) += cache->r.at(i) * cache->uh.at(i) + bh.at(i % d);
    cache->htilde = Tensor(Shape({b, d}));
    ewiseUnaryInto(cache->htilde, EwiseOp::Tanh, ac);

    for(int64_t i = 0; i < b * d; ++i) {
      Real z = cache->z.at(i);
      n.value.at(i) = (Real(1) - z) * cache->htilde.at(i) + z * h.data()[i];
    }
  };

  n.bwd = [cache, hasInput, layerNorm, xSlot, wSlot, lnSlot, b, d](ExpressionGraph& g, Node& n) {
    const Tensor& h = g.node(n.inputs[0]).value;
    Tensor& gh = g.node(n.inputs[0]).grad;
    const Tensor* x = hasInput ? &g.node(n.inputs[xSlot]).value : nullptr;
    Tensor* gx = hasInput ? &g.node(n.inputs[xSlot]).grad : nullptr;

    Tensor dz(Shape({b, d})), dht(Shape({b, d})), dac(Shape({b, d}));
    for(int64_t i = 0; i < b * d; ++i) {
      Real go = n.grad.at(i);
      Real z = cache->z.at(i);
      dz.at(i) = go * (h.data()[i] - cache->htilde.at(i));
      dht.at(i) = go * (Real(1) - z);
      gh.at(i) += go * z;
    }
    for(int64_t i = 0; i < b * d; ++i)
      dac.at(i) = dht.at(i) * (Real(1) - cache->htilde.at(i) * cache->htilde.at(i));

    // candidate branch
    Tensor dr(Shape({b, d})), duh(Shape({b, d}));
    for(int64_t i = 0; i < b * d; ++i) {
      dr.at(i) = dac.at(i) * cache->uh.at(i);
      duh.at(i) = dac.at(i) * cache->r.at(i);
    }
    accumulateReduced(g.node(n.inputs[6]).grad, dac);  // bh
    matmulAccumInto(gh, duh, g.node(n.inputs[5]).value, false, true);        // dh += duh Uh^T
    matmulAccumInto(g.node(n.inputs[5]).grad, h, duh, true, false);          // dUh += h^T duh
    if(hasInput) {
      Tensor dax = dac.copy();
      if(layerNorm) {
        Tensor daxRaw(Shape({b, d}));
        layerNormBackward(dax, g.node(n.inputs[lnSlot + 4]).value, cache->lnX.invStd,
                          cache->lnX.xhat, daxRaw, g.node(n.inputs[lnSlot + 4]).grad,
                          g.node(n.inputs[lnSlot + 5]).grad);
        dax = std::move(daxRaw);
      }
      matmulAccumInto(*gx, dax, g.node(n.inputs[wSlot + 2]).value, false, true);  // Wx
      matmulAccumInto(g.node(n.inputs[wSlot + 2]).grad, *x, dax, true, false);
    }

    // gate branches: z then r
    auto gateBack = [&](const Tensor& gate, const Tensor& dgate, int uIdx, int bIdx, int wOff,
                        int lnOff) {
      Tensor da(Shape({b, d}));
      for(int64_t i = 0; i < b * d; ++i)
        da.at(i) = dgate.at(i) * gate.at(i) * (Real(1) - gate.at(i));
      if(layerNorm) {
        LnCache& lc = lnOff == 0 ? cache->lnZ : cache->lnR;
        Tensor daRaw(Shape({b, d}));
        layerNormBackward(da, g.node(n.inputs[lnSlot + lnOff]).value, lc.invStd, lc.xhat,
                          daRaw, g.node(n.inputs[lnSlot + lnOff]).grad,
                          g.node(n.inputs[lnSlot + lnOff + 1]).grad);
        da = std::move(daRaw);
      }
      accumulateReduced(g.node(n.inputs[bIdx]).grad, da);
      matmulAccumInto(gh, da, g.node(n.inputs[uIdx]).value, false, true);
      matmulAccumInto(g.node(n.inputs[uIdx]).grad, h, da, true, false);
      if(hasInput) {
        matmulAccumInto(*gx, da, g.node(n.inputs[wSlot + wOff]).value, false, true);
        matmulAccumInto(g.node(n.inputs[wSlot + wOff]).grad, *x, da, true, false);
      }
    };
    gateBack(cache->z, dz, 1, 2, 0, 0);
    gateBack(cache->r, dr, 3, 4, 1, 2);
  };
  return addNode(std::move(n));
}

// ------------------------------------------------------------ dropout

NodeRef ExpressionGraph::dropoutMask(const Shape& shape, Real p) {
  if(p >= Real(1) || p < Real(0))
    throw ContractError("dropout probability must be in [0, 1)");
  Tensor mask(shape);
  if(inference_ || p == Real(0)) {
    mask.fill(1);
  } else {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Real keepInv = Real(1) / (Real(1) - p);
    for(int64_t i = 0; i < mask.size(); ++i)
      mask.at(i) = u(rng_) >= (double)p ? keepInv : Real(0);
  }
  return constant(mask);
}

NodeRef ExpressionGraph::dropout(NodeRef x, Real p, int variationalAxis) {
  checkRef(x);
  if(p >= Real(1) || p < Real(0))
    throw ContractError("dropout probability must be in [0, 1)");
  if(inference_ || p == Real(0))
    return x;  // identity, bit for bit
  std::vector<int64_t> dims = x.shape.dims();
  if(variationalAxis >= 0) {
    if(variationalAxis >= x.shape.rank())
      throw ContractError("variational axis out of range");
    dims[(size_t)variationalAxis] = 1;  // one mask, broadcast along the axis
  }
  NodeRef mask = dropoutMask(Shape(dims), p);
  return mul(x, mask);
}

// ------------------------------------------------------ cross entropy

namespace {
struct CeCache {
  IntMat targets;
  Tensor mask;
  Tensor probs;
  Real count = 0;
};
}  // namespace

NodeRef ExpressionGraph::crossEntropy(NodeRef logits, const IntMat& targets,
                                      const Tensor& mask) {
  checkRef(logits);
  int64_t vocab = logits.shape.back();
  int64_t positions = logits.shape.size() / vocab;
  if(targets.size() != positions)
    throw DimensionError("cross entropy target count mismatch");
  if(!mask.empty() && mask.size() != positions)
    throw DimensionError("cross entropy mask count mismatch");
  for(int32_t id : targets.data)
    if(id < 0 || id >= vocab)
      throw DataError("target id " + std::to_string(id) + " out of vocabulary of size " +
                      std::to_string(vocab));
  auto cache = std::make_shared<CeCache>();
  cache->targets = targets;
  cache->mask = mask.empty() ? Tensor() : mask.copy();
  Node n;
  n.op = "crossEntropy";
  n.shape = Shape({1});
  n.inputs = {logits.index};
  n.aux = cache;
  n.fwd = [cache, vocab, positions](ExpressionGraph& g, Node& n) {
    const Tensor& lg = g.node(n.inputs[0]).value;
    cache->probs = Tensor(Shape({positions, vocab}));
    Real lossSum = 0, count = 0;
    for(int64_t r = 0; r < positions; ++r) {
      const Real* row = lg.data() + r * vocab;
      Real m = cache->mask.empty() ? Real(1) : cache->mask.at(r);
      Real mx = row[0];
      for(int64_t j = 1; j < vocab; ++j)
        mx = std::max(mx, row[j]);
      Real sum = 0;
      for(int64_t j = 0; j < vocab; ++j) {
        Real e = std::exp(row[j] - mx);
        cache->probs.at(r * vocab + j) = e;
        sum += e;
      }
      for(int64_t j = 0; j < vocab; ++j)
        cache->probs.at(r * vocab + j) /= sum;
      if(m != Real(0)) {
        Real lse = mx + std::log(sum);
        lossSum += m * (lse - row[cache->targets.data[(size_t)r]]);
        count += m;
      }
    }
    if(count == Real(0))
      throw ContractError("cross entropy over a fully-masked batch");
    cache->count = count;
    n.value.at(0) = lossSum / count;
  };
  n.bwd = [cache, vocab, positions](ExpressionGraph& g, Node& n) {
    Tensor& gl = g.node(n.inputs[0]).grad;
    Real go = n.grad.at(0) / cache->count;
    for(int64_t r = 0; r < positions; ++r) {
      Real m = cache->mask.empty() ? Real(1) : cache->mask.at(r);
      if(m == Real(0))
        continue;
      Real* grow = gl.data() + r * vocab;
      const Real* prow = cache->probs.data() + r * vocab;
      for(int64_t j = 0; j < vocab; ++j)
        grow[j] += go * m * prow[j];
      grow[cache->targets.data[(size_t)r]] -= go * m;
    }
  };
  return addNode(std::move(n));
}

// ---------------------------------------------------------- execution

void ExpressionGraph::forward() {
  for(size_t i = computed_; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if(n.fwd) {
      if(n.value.empty())
        n.value = Tensor(n.shape, arena_.alloc(n.shape.size()));
      n.fwd(*this, n);
      if(!n.value.allFinite())
        throw NumericError("non-finite value produced by op '" + n.op + "' (node " +
                           std::to_string(i) + ")");
    }
  }
  computed_ = nodes_.size();
}

void ExpressionGraph::backward(NodeRef loss) {
  checkRef(loss);
  if(inference_)
    throw ContractError("backward() called on an inference-mode graph");
  if(loss.shape.size() != 1)
    throw ContractError("loss must be scalar-shaped, got " + loss.shape.str());
  if(computed_ < nodes_.size())
    forward();
  for(int i = 0; i <= loss.index; ++i) {
    Node& n = nodes_[(size_t)i];
    if(n.isParam) {
      n.grad = Tensor(n.shape, params_.at(n.paramName).grad.data());
    } else {
      if(n.grad.empty())
        n.grad = Tensor(n.shape, arena_.alloc(n.shape.size()));
      n.grad.setZero();
    }
  }
  nodes_[(size_t)loss.index].grad.fill(1);
  for(int i = loss.index; i >= 0; --i) {
    Node& n = nodes_[(size_t)i];
    if(n.bwd)
      n.bwd(*this, n);
  }
}

void ExpressionGraph::clear() {
  nodes_.clear();
  computed_ = 0;
  ++generation_;
  arena_.reset();
}

Tensor& ExpressionGraph::paramValue(const std::string& name) {
  auto it = params_.find(name);
  if(it == params_.end())
    throw ContractError("unknown parameter: " + name);
  return it->second.value;
}

Tensor& ExpressionGraph::paramGrad(const std::string& name) {
  auto it = params_.find(name);
  if(it == params_.end())
    throw ContractError("unknown parameter: " + name);
  return it->second.grad;
}

void ExpressionGraph::zeroGrads() {
  for(auto& [name, p] : params_)
    p.grad.setZero();
}

}  // namespace mtk
