#pragma once

#include "mtk/data.h"
#include "mtk/layers.h"

#include <memory>

namespace mtk {

// Everything an encoder hands to the decoder: the full source context and
// its mask.
struct EncoderState {
  NodeRef context;  // [b x s x d]
  Tensor mask;      // [b x s]
};

// Decoding-time state threaded through Decoder::step. Rows are live
// hypotheses; rowToSentence maps each row back to its encoder batch row.
// Subclasses add per-row payload (recurrent vectors, token prefixes,
// attention indices) and override select() to gather it.
class DecoderState {
public:
  virtual ~DecoderState() = default;

  std::vector<EncoderState> encoderStates;
  std::vector<int64_t> rowToSentence;
  NodeRef logits;  // [rows x t x V] produced by the last step()
  int64_t position = 0;

  int64_t rows() const { return (int64_t)rowToSentence.size(); }

  // Keep rows listed in `rows` (indices into current rows), in order.
  virtual void select(ExpressionGraph& g, const std::vector<int64_t>& rows);

  // Non-null for states that track per-hypothesis attention positions.
  virtual const std::vector<int64_t>* attentionIndices() const { return nullptr; }
};

class Encoder {
public:
  virtual ~Encoder() = default;
  virtual EncoderState build(ExpressionGraph& g, const Batch& batch, int stream) = 0;
  virtual int64_t contextDim() const = 0;
};

class Decoder {
public:
  virtual ~Decoder() = default;
  virtual int arity() const = 0;
  // -1 = accepts any encoder context dimension
  virtual int64_t memoryDim() const { return -1; }
  // batchRows is only consulted when the model has no encoders (LM).
  virtual std::unique_ptr<DecoderState> startState(ExpressionGraph& g,
                                                   std::vector<EncoderState> encoderStates,
                                                   int64_t batchRows = -1) = 0;
  // tokens [rows x t] are decoder *inputs* (</s>-shifted targets in
  // teacher forcing, one chosen token per row in decoding). One call
  // expands all t positions; logits land in state.logits [rows x t x V].
  virtual void step(ExpressionGraph& g, DecoderState& state, const IntMat& tokens,
                    const Tensor& tokenMask) = 0;
};

// Gather rows of a [rows x ...] node (payload reordering for beams).
NodeRef gatherStateRows(ExpressionGraph& g, NodeRef x, const std::vector<int64_t>& rows);

// Decoder inputs: targets shifted right with </s> in column 0.
IntMat shiftTargets(const IntMat& targets);

}  // namespace mtk
