#pragma once

#include "mtk/tensor.h"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace mtk {

// Padded token-id matrix, the integer companion of Tensor.
struct IntMat {
  int64_t rows = 0, cols = 0;
  std::vector<int32_t> data;

  IntMat() = default;
  IntMat(int64_t r, int64_t c) : rows(r), cols(c), data((size_t)(r * c), 0) {}
  int32_t& at(int64_t r, int64_t c) { return data[(size_t)(r * cols + c)]; }
  int32_t at(int64_t r, int64_t c) const { return data[(size_t)(r * cols + c)]; }
  int64_t size() const { return rows * cols; }
};

class ExpressionGraph;

struct NodeRef {
  ExpressionGraph* graph = nullptr;
  int index = -1;
  uint64_t gen = 0;
  Shape shape;

  bool valid() const { return graph != nullptr; }
  Tensor& val() const;
  Tensor& grad() const;
};

using ParamInit = std::function<void(Tensor&, Rng&)>;

namespace inits {
ParamInit zeros();
ParamInit ones();
ParamInit constant(Real v);
ParamInit glorotUniform();
ParamInit uniform(Real lo, Real hi);
ParamInit fromVector(std::vector<Real> v);
}  // namespace inits

// Weights of one fused GRU block. Input-side matrices are invalid refs
// for transition-only blocks; ln* refs are valid iff layer norm is on.
struct GruParams {
  NodeRef Wz, Uz, bz;
  NodeRef Wr, Ur, br;
  NodeRef Wx, Uh, bh;
  NodeRef lnGz, lnBz, lnGr, lnBr, lnGx, lnBx;
};

// Reverse-mode autodiff over a dynamically built graph. Nodes are
// appended in topological order; values live in an arena that is
// recycled on clear(). Parameters persist across clear().
class ExpressionGraph {
public:
  explicit ExpressionGraph(uint64_t seed = 0, bool inference = false);

  void setInference(bool b) { inference_ = b; }
  bool inference() const { return inference_; }
  void setSeed(uint64_t seed) { rng_.seed(seed); }
  Rng& rng() { return rng_; }
  Arena& arena() { return arena_; }
  uint64_t generation() const { return generation_; }
  size_t nodeCount() const { return nodes_.size(); }

  // --- leaves
  NodeRef param(const std::string& name, const Shape& shape, const ParamInit& init);
  NodeRef constant(const Tensor& t);
  NodeRef constant(Shape shape, std::vector<Real> values);

  // --- elementwise
  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef mul(NodeRef a, NodeRef b);
  NodeRef div(NodeRef a, NodeRef b);
  NodeRef tanh(NodeRef a);
  NodeRef sigmoid(NodeRef a);
  NodeRef relu(NodeRef a);
  NodeRef exp(NodeRef a);
  NodeRef log(NodeRef a);
  NodeRef neg(NodeRef a);
  NodeRef scale(NodeRef a, Real s);
  NodeRef addScalar(NodeRef a, Real s);

  // --- linear algebra / structure
  NodeRef dot(NodeRef a, NodeRef b, bool transA = false, bool transB = false);
  NodeRef affine(NodeRef x, NodeRef w, NodeRef b, bool transW = false);
  NodeRef reshape(NodeRef a, Shape shape);
  NodeRef transpose(NodeRef a, std::vector<int> perm);
  NodeRef concat(const std::vector<NodeRef>& parts, int axis);
  NodeRef slice(NodeRef a, int axis, int64_t start, int64_t len);
  NodeRef gatherRows(NodeRef a, std::vector<int64_t> rows);

  // --- reductions / normalization
  NodeRef reduce(ReduceOp op, NodeRef a, int axis, bool keepAxis = false);
  NodeRef softmax(NodeRef a, Tensor mask = Tensor());
  NodeRef layerNorm(NodeRef x, NodeRef gain, NodeRef bias, Real eps = Real(1e-9));

  // --- fused / model-level ops
  NodeRef embed(NodeRef table, const IntMat& ids);
  NodeRef gruCell(NodeRef state, NodeRef input, const GruParams& p, bool layerNorm);
  NodeRef dropout(NodeRef x, Real p, int variationalAxis = -1);
  NodeRef dropoutMask(const Shape& shape, Real p);
  NodeRef crossEntropy(NodeRef logits, const IntMat& targets, const Tensor& mask);

  // --- execution
  void forward();
  void backward(NodeRef loss);
  void clear();

  // --- parameter access
  const std::vector<std::string>& paramNames() const { return paramOrder_; }
  bool hasParam(const std::string& name) const { return params_.count(name) > 0; }
  Tensor& paramValue(const std::string& name);
  Tensor& paramGrad(const std::string& name);
  void zeroGrads();

  // internal, used by NodeRef accessors
  Tensor& nodeValue(int index, uint64_t gen);
  Tensor& nodeGrad(int index, uint64_t gen);

private:
  struct Node {
    std::string op;
    Shape shape;
    std::vector<int> inputs;
    Tensor value, grad;
    std::function<void(ExpressionGraph&, Node&)> fwd;
    std::function<void(ExpressionGraph&, Node&)> bwd;
    std::shared_ptr<void> aux;
    bool isParam = false;
    std::string paramName;
  };

  struct Param {
    Tensor value, grad;
  };

  NodeRef addNode(Node n);
  NodeRef binary(const std::string& name, EwiseOp op, NodeRef a, NodeRef b);
  NodeRef unary(const std::string& name, EwiseOp op, NodeRef a);
  void checkRef(const NodeRef& r) const;
  Node& node(int i) { return nodes_[(size_t)i]; }

  std::vector<Node> nodes_;
  std::map<std::string, Param> params_;
  std::vector<std::string> paramOrder_;
  Arena arena_;
  Rng rng_;
  uint64_t seed_;
  uint64_t generation_ = 1;
  size_t computed_ = 0;
  bool inference_ = false;
};

}  // namespace mtk
