#pragma once

#include "mtk/graph.h"

namespace mtk {

enum class TyingMode { None, SourceTarget, All };

TyingMode tyingFromString(const std::string& s);
std::string tyingToString(TyingMode m);

// Source/target/output embedding matrices with optional sharing. Output
// logits are always produced against an [V x e] matrix, so tying swaps
// matrices without changing shapes.
struct Embeddings {
  std::string prefix = "emb";
  TyingMode tying = TyingMode::None;
  int64_t sourceVocab = 0, targetVocab = 0, dim = 0;

  NodeRef sourceTable(ExpressionGraph& g, int stream = 0) const;
  NodeRef targetTable(ExpressionGraph& g) const;
  NodeRef outputTable(ExpressionGraph& g) const;
  // hidden [.. x e] -> logits [.. x V] = hidden * E^T + b
  NodeRef logits(ExpressionGraph& g, NodeRef hidden) const;
};

// Additive attention: e_j = v^T tanh(W q + U k_j), optionally with layer
// norm on the pre-tanh sum; masked softmax over source positions.
struct BahdanauAttention {
  std::string prefix = "att";
  int64_t queryDim = 0, keyDim = 0, attDim = 0;
  bool layerNorm = false;

  struct Result {
    NodeRef context;  // [b x keyDim]
    NodeRef weights;  // [b x s]
  };
  // query [b x queryDim], keys [b x s x keyDim], mask [b x s]
  Result apply(ExpressionGraph& g, NodeRef query, NodeRef keys, const Tensor& mask) const;
};

// Scaled dot-product attention with h heads; optional causal masking.
struct MultiHeadAttention {
  std::string prefix = "mha";
  int64_t modelDim = 0;
  int heads = 1;

  // q [b x tq x d], k/v [b x tk x d], keyMask [b x tk] (empty = all real)
  NodeRef apply(ExpressionGraph& g, NodeRef q, NodeRef k, NodeRef v, const Tensor& keyMask,
                bool causal = false) const;
};

// One transformer layer: self-attention, optional cross-attention, FFN
// (inner dim 4x, ReLU), residual around each sublayer. Pre-norm wiring
// x + Sub(LN(x)) by default; post-norm LN(x + Sub(x)) via flag.
struct TransformerBlock {
  std::string prefix = "tf";
  int64_t modelDim = 0;
  int heads = 1;
  bool preNorm = true;
  Real dropout = 0;

  // x [b x t x d]; selfKeyMask [b x t]; memory invalid for encoder blocks
  NodeRef apply(ExpressionGraph& g, NodeRef x, const Tensor& selfKeyMask, bool causal,
                NodeRef memory = NodeRef(), const Tensor& memoryMask = Tensor()) const;

private:
  NodeRef sublayer(ExpressionGraph& g, NodeRef x, const std::string& lnName,
                   const std::function<NodeRef(NodeRef)>& f) const;
};

// Sinusoidal position table [t x e] for absolute positions
// startPos .. startPos+t-1: even columns sin, odd columns cos.
Tensor sinusoidalPositions(int64_t startPos, int64_t t, int64_t e);

// x * sqrt(e) + positions, broadcast over the batch. x is [b x t x e].
NodeRef addPositionalEncoding(ExpressionGraph& g, NodeRef x, int64_t startPos);

// A tall recurrent cell made of stacked GRU blocks. Block 1 consumes the
// external input; if attentionSlot >= 0, attention runs on the state after
// that many blocks and the next block consumes the context; all remaining
// blocks are transition-only.
struct DeepTransitionCell {
  std::string prefix = "cell";
  int blocks = 1;
  int attentionSlot = -1;  // attention after this many blocks (1 = between 1 and 2)
  int64_t inputDim = 0, stateDim = 0;
  bool layerNorm = false;
  BahdanauAttention attention;  // used iff attentionSlot >= 0

  struct Step {
    NodeRef state;    // [b x d]
    NodeRef context;  // valid iff attention ran
    NodeRef weights;  // valid iff attention ran
  };
  // input may be an invalid ref (input-free cell). stateDropMask, if
  // valid, multiplies the recurrent state before every block (one mask
  // per sequence = variational dropout).
  Step step(ExpressionGraph& g, NodeRef input, NodeRef state, NodeRef encoderContext,
            const Tensor& encoderMask, NodeRef stateDropMask = NodeRef()) const;

  // Generalized attention: contextFn maps the state at the attention slot
  // to (context, contextDim); lets callers plug multi-source or hard
  // attention into the same tall cell.
  using ContextFn = std::function<std::pair<NodeRef, int64_t>(NodeRef)>;
  NodeRef stepWith(ExpressionGraph& g, NodeRef input, NodeRef state, const ContextFn& contextFn,
                   NodeRef stateDropMask = NodeRef()) const;

  GruParams blockParams(ExpressionGraph& g, int block, int64_t blockInputDim) const;
};

}  // namespace mtk
