#pragma once

#include "mtk/encdec.h"

namespace mtk {

// Architecture description, serialized alongside the weights so a loaded
// model rebuilds itself bit-identically.
struct ModelConfig {
  std::string architecture = "s2s-shallow";
  // for architecture = "custom": explicit unit kinds
  std::string encoderKind;  // comma-separated: rnn-shallow | rnn-deep | transformer
  std::string decoderKind;  // rnn-shallow | rnn-deep | transformer | hard
  int64_t sourceVocab = 0;
  int64_t targetVocab = 0;
  int64_t embDim = 64;
  int64_t stateDim = 128;
  int heads = 4;
  int layers = 2;  // transformer depth
  Real dropout = Real(0.1);
  std::string tying = "none";
  bool layerNorm = false;
  bool rightLeft = false;
  bool postNorm = false;
  int sourceArity = 1;

  std::string serialize() const;
  static ModelConfig parse(const std::string& text);
};

struct CensusEntry {
  std::string name;
  Shape shape;
  int64_t count = 0;
};

// A composed encoder-decoder (or decoder-only) model. Immutable after
// construction; all mutable state lives in graphs and DecoderStates.
class Model {
public:
  ModelConfig config;
  std::vector<std::unique_ptr<Encoder>> encoders;
  std::unique_ptr<Decoder> decoder;

  // Runs every encoder and inserts dimension adapters where the decoder
  // demands a fixed memory width.
  std::vector<EncoderState> encode(ExpressionGraph& g, const Batch& batch) const;
  std::unique_ptr<DecoderState> startState(ExpressionGraph& g, const Batch& batch) const;

  // Teacher-forced mean cross-entropy over unmasked target tokens.
  NodeRef buildLoss(ExpressionGraph& g, const Batch& batch, Real* tokenCount = nullptr) const;

  // Builds the loss on a one-token dummy batch so every parameter exists
  // in the graph (census, checkpointing before the first real batch).
  void registerParams(ExpressionGraph& g) const;
};

Model buildModel(const ModelConfig& config);
Model compose(const ModelConfig& config, const std::vector<std::string>& encoderKinds,
              const std::string& decoderKind);
std::vector<CensusEntry> parameterCensus(const ModelConfig& config);
int64_t parameterTotal(const ModelConfig& config);

}  // namespace mtk
