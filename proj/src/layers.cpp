#include "mtk/layers.h"

#include <cmath>

namespace mtk {

TyingMode tyingFromString(const std::string& s) {
  if(s == "none")
    return TyingMode::None;
  if(s == "source-target")
    return TyingMode::SourceTarget;
  if(s == "all")
    return TyingMode::All;
  throw DataError("unknown tying mode: " + s);
}

std::string tyingToString(TyingMode m) {
  switch(m) {
    case TyingMode::None: return "none";
    case TyingMode::SourceTarget: return "source-target";
    default: return "all";
  }
}

// ----------------------------------------------------------- Embeddings

NodeRef Embeddings::sourceTable(ExpressionGraph& g, int stream) const {
  if(tying != TyingMode::None) {
    if(sourceVocab != targetVocab)
      throw ContractError("tied embeddings require equal source/target vocab sizes");
    return g.param(prefix + ".E", Shape({sourceVocab, dim}), inits::glorotUniform());
  }
  return g.param(prefix + ".Esrc" + std::to_string(stream), Shape({sourceVocab, dim}),
                 inits::glorotUniform());
}

NodeRef Embeddings::targetTable(ExpressionGraph& g) const {
  if(tying != TyingMode::None)
    return g.param(prefix + ".E", Shape({targetVocab, dim}), inits::glorotUniform());
  return g.param(prefix + ".Etgt", Shape({targetVocab, dim}), inits::glorotUniform());
}

NodeRef Embeddings::outputTable(ExpressionGraph& g) const {
  if(tying == TyingMode::All)
    return g.param(prefix + ".E", Shape({targetVocab, dim}), inits::glorotUniform());
  return g.param(prefix + ".Eout", Shape({targetVocab, dim}), inits::glorotUniform());
}

NodeRef Embeddings::logits(ExpressionGraph& g, NodeRef hidden) const {
  if(hidden.shape.back() != dim)
    throw DimensionError("output layer expects trailing dim " + std::to_string(dim) +
                         ", got " + hidden.shape.str());
  NodeRef bias = g.param(prefix + ".outB", Shape({targetVocab}), inits::zeros());
  return g.add(g.dot(hidden, outputTable(g), false, true), bias);
}

// --------------------------------------------------- Bahdanau attention

BahdanauAttention::Result BahdanauAttention::apply(ExpressionGraph& g, NodeRef query,
                                                   NodeRef keys, const Tensor& mask) const {
  int64_t b = query.shape[0];
  int64_t s = keys.shape[1];
  int64_t a = attDim > 0 ? attDim : keyDim;
  NodeRef W = g.param(prefix + ".W", Shape({queryDim, a}), inits::glorotUniform());
  NodeRef U = g.param(prefix + ".U", Shape({keyDim, a}), inits::glorotUniform());
  NodeRef v = g.param(prefix + ".v", Shape({a, 1}), inits::glorotUniform());

  NodeRef sum = g.add(g.reshape(g.dot(query, W), Shape({b, 1, a})), g.dot(keys, U));
  if(layerNorm) {
    NodeRef gain = g.param(prefix + ".lnG", Shape({a}), inits::ones());
    NodeRef bias = g.param(prefix + ".lnB", Shape({a}), inits::zeros());
    sum = g.layerNorm(sum, gain, bias);
  }
  NodeRef energies = g.reshape(g.dot(g.tanh(sum), v), Shape({b, s}));
  NodeRef weights = g.softmax(energies, mask);
  NodeRef context = g.reshape(g.dot(g.reshape(weights, Shape({b, 1, s})), keys),
                              Shape({b, keyDim}));
  return {context, weights};
}

// ------------------------------------------------- multi-head attention

static NodeRef splitHeads(ExpressionGraph& g, NodeRef x, int heads, int64_t dk) {
  int64_t b = x.shape[0], t = x.shape[1];
  NodeRef r = g.reshape(x, Shape({b, t, heads, dk}));
  return g.reshape(g.transpose(r, {0, 2, 1, 3}), Shape({b * heads, t, dk}));
}

NodeRef MultiHeadAttention::apply(ExpressionGraph& g, NodeRef q, NodeRef k, NodeRef v,
                                  const Tensor& keyMask, bool causal) const {
  if(modelDim % heads != 0)
    throw DimensionError("model dim " + std::to_string(modelDim) +
                         " not divisible by heads " + std::to_string(heads));
  int64_t dk = modelDim / heads;
  int64_t b = q.shape[0], tq = q.shape[1], tk = k.shape[1];
  auto proj = [&](NodeRef x, const char* name) {
    NodeRef W = g.param(prefix + "." + name + "W", Shape({modelDim, modelDim}),
                        inits::glorotUniform());
    NodeRef bb = g.param(prefix + "." + name + "B", Shape({modelDim}), inits::zeros());
    return g.affine(x, W, bb);
  };
  NodeRef qh = splitHeads(g, proj(q, "q"), heads, dk);
  NodeRef kh = splitHeads(g, proj(k, "k"), heads, dk);
  NodeRef vh = splitHeads(g, proj(v, "v"), heads, dk);

  NodeRef scores = g.scale(g.dot(qh, kh, false, true), Real(1.0 / std::sqrt((double)dk)));

  Tensor mask(Shape({b * heads, tq, tk}));
  for(int64_t bi = 0; bi < b; ++bi)
    for(int64_t h = 0; h < heads; ++h)
      for(int64_t i = 0; i < tq; ++i)
        for(int64_t j = 0; j < tk; ++j) {
          Real m = keyMask.empty() ? Real(1) : keyMask.at(bi * tk + j);
          // in step mode (tq < tk) the query sits at the end of the prefix
          if(causal && j > tk - tq + i)
            m = 0;
          mask.at(((bi * heads + h) * tq + i) * tk + j) = m;
        }
  NodeRef weights = g.softmax(scores, mask);

  NodeRef att = g.dot(weights, vh);  // [b*h, tq, dk]
  NodeRef merged = g.reshape(
      g.transpose(g.reshape(att, Shape({b, heads, tq, dk})), {0, 2, 1, 3}),
      Shape({b, tq, modelDim}));
  return proj(merged, "o");
}

// ------------------------------------------------------ transformer block

NodeRef TransformerBlock::sublayer(ExpressionGraph& g, NodeRef x, const std::string& lnName,
                                   const std::function<NodeRef(NodeRef)>& f) const {
  NodeRef gain = g.param(lnName + ".g", Shape({modelDim}), inits::ones());
  NodeRef bias = g.param(lnName + ".b", Shape({modelDim}), inits::zeros());
  if(preNorm)
    return g.add(x, g.dropout(f(g.layerNorm(x, gain, bias)), dropout));
  return g.layerNorm(g.add(x, g.dropout(f(x), dropout)), gain, bias);
}

NodeRef TransformerBlock::apply(ExpressionGraph& g, NodeRef x, const Tensor& selfKeyMask,
                                bool causal, NodeRef memory, const Tensor& memoryMask) const {
  MultiHeadAttention self{prefix + ".self", modelDim, heads};
  x = sublayer(g, x, prefix + ".self.ln",
               [&](NodeRef xn) { return self.apply(g, xn, xn, xn, selfKeyMask, causal); });
  if(memory.valid()) {
    MultiHeadAttention cross{prefix + ".cross", modelDim, heads};
    x = sublayer(g, x, prefix + ".cross.ln", [&](NodeRef xn) {
      return cross.apply(g, xn, memory, memory, memoryMask, false);
    });
  }
  x = sublayer(g, x, prefix + ".ffn.ln", [&](NodeRef xn) {
    NodeRef W1 = g.param(prefix + ".ffn.W1", Shape({modelDim, 4 * modelDim}),
                         inits::glorotUniform());
    NodeRef b1 = g.param(prefix + ".ffn.b1", Shape({4 * modelDim}), inits::zeros());
    NodeRef W2 = g.param(prefix + ".ffn.W2", Shape({4 * modelDim, modelDim}),
                         inits::glorotUniform());
    NodeRef b2 = g.param(prefix + ".ffn.b2", Shape({modelDim}), inits::zeros());
    return g.affine(g.relu(g.affine(xn, W1, b1)), W2, b2);
  });
  return x;
}

// --------------------------------------------------- positional encoding

Tensor sinusoidalPositions(int64_t startPos, int64_t t, int64_t e) {
  Tensor pe(Shape({t, e}));
  for(int64_t p = 0; p < t; ++p)
    for(int64_t i = 0; i < e; ++i) {
      double angle = (double)(startPos + p) /
                     std::pow(10000.0, (double)(2 * (i / 2)) / (double)e);
      pe.at(p * e + i) = (Real)(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  return pe;
}

NodeRef addPositionalEncoding(ExpressionGraph& g, NodeRef x, int64_t startPos) {
  int64_t t = x.shape[1], e = x.shape.back();
  NodeRef pe = g.constant(sinusoidalPositions(startPos, t, e));
  return g.add(g.scale(x, (Real)std::sqrt((double)e)), pe);
}

// ------------------------------------------------- deep-transition cell

GruParams DeepTransitionCell::blockParams(ExpressionGraph& g, int block,
                                          int64_t blockInputDim) const {
  std::string p = prefix + ".b" + std::to_string(block) + ".";
  int64_t d = stateDim;
  GruParams gp;
  gp.Uz = g.param(p + "Uz", Shape({d, d}), inits::glorotUniform());
  gp.bz = g.param(p + "bz", Shape({d}), inits::zeros());
  gp.Ur = g.param(p + "Ur", Shape({d, d}), inits::glorotUniform());
  gp.br = g.param(p + "br", Shape({d}), inits::zeros());
  gp.Uh = g.param(p + "Uh", Shape({d, d}), inits::glorotUniform());
  gp.bh = g.param(p + "bh", Shape({d}), inits::zeros());
  if(blockInputDim > 0) {
    gp.Wz = g.param(p + "Wz", Shape({blockInputDim, d}), inits::glorotUniform());
    gp.Wr = g.param(p + "Wr", Shape({blockInputDim, d}), inits::glorotUniform());
    gp.Wx = g.param(p + "Wx", Shape({blockInputDim, d}), inits::glorotUniform());
  }
  if(layerNorm) {
    gp.lnGz = g.param(p + "lnGz", Shape({d}), inits::ones());
    gp.lnBz = g.param(p + "lnBz", Shape({d}), inits::zeros());
    gp.lnGr = g.param(p + "lnGr", Shape({d}), inits::ones());
    gp.lnBr = g.param(p + "lnBr", Shape({d}), inits::zeros());
    if(blockInputDim > 0) {
      gp.lnGx = g.param(p + "lnGx", Shape({d}), inits::ones());
      gp.lnBx = g.param(p + "lnBx", Shape({d}), inits::zeros());
    }
  }
  return gp;
}

NodeRef DeepTransitionCell::stepWith(ExpressionGraph& g, NodeRef input, NodeRef state,
                                     const ContextFn& contextFn,
                                     NodeRef stateDropMask) const {
  auto masked = [&](NodeRef s) { return stateDropMask.valid() ? g.mul(s, stateDropMask) : s; };
  NodeRef s = g.gruCell(masked(state), input, blockParams(g, 1, input.valid() ? inputDim : 0),
                        layerNorm);
  for(int b = 2; b <= blocks; ++b) {
    if(attentionSlot >= 0 && b == attentionSlot + 1) {
      auto [context, contextDim] = contextFn(s);
      s = g.gruCell(masked(s), context, blockParams(g, b, contextDim), layerNorm);
    } else {
      s = g.gruCell(masked(s), NodeRef(), blockParams(g, b, 0), layerNorm);
    }
  }
  return s;
}

DeepTransitionCell::Step DeepTransitionCell::step(ExpressionGraph& g, NodeRef input,
                                                  NodeRef state, NodeRef encoderContext,
                                                  const Tensor& encoderMask,
                                                  NodeRef stateDropMask) const {
  Step out;
  ContextFn fn = [&](NodeRef s1) -> std::pair<NodeRef, int64_t> {
    if(!encoderContext.valid())
      throw ContractError("cell " + prefix + " has an attention slot but no encoder context");
    auto r = attention.apply(g, s1, encoderContext, encoderMask);
    out.context = r.context;
    out.weights = r.weights;
    return {r.context, attention.keyDim};
  };
  out.state = stepWith(g, input, state, fn, stateDropMask);
  return out;
}

}  // namespace mtk
