#include "mtk/models.h"

#include <cmath>
#include <sstream>

namespace mtk {

// ------------------------------------------------------------ ModelConfig

std::string ModelConfig::serialize() const {
  std::ostringstream out;
  out << "architecture: " << architecture << "\n";
  out << "encoder-kind: " << encoderKind << "\n";
  out << "decoder-kind: " << decoderKind << "\n";
  out << "source-vocab: " << sourceVocab << "\n";
  out << "target-vocab: " << targetVocab << "\n";
  out << "emb-dim: " << embDim << "\n";
  out << "state-dim: " << stateDim << "\n";
  out << "heads: " << heads << "\n";
  out << "layers: " << layers << "\n";
  out << "dropout: " << (double)dropout << "\n";
  out << "tying: " << tying << "\n";
  out << "layer-norm: " << (layerNorm ? 1 : 0) << "\n";
  out << "right-left: " << (rightLeft ? 1 : 0) << "\n";
  out << "post-norm: " << (postNorm ? 1 : 0) << "\n";
  out << "source-arity: " << sourceArity << "\n";
  return out.str();
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig c;
  std::istringstream in(text);
  std::string line;
  while(std::getline(in, line)) {
    if(line.empty())
      continue;
    auto colon = line.find(": ");
    if(colon == std::string::npos) {
      // "key:" with empty value
      if(line.back() == ':')
        continue;
      throw DataError("malformed model config line: " + line);
    }
    std::string key = line.substr(0, colon);
    std::string val = line.substr(colon + 2);
    if(key == "architecture")
      c.architecture = val;
    else if(key == "encoder-kind")
      c.encoderKind = val;
    else if(key == "decoder-kind")
      c.decoderKind = val;
    else if(key == "source-vocab")
      c.sourceVocab = std::stoll(val);
    else if(key == "target-vocab")
      c.targetVocab = std::stoll(val);
    else if(key == "emb-dim")
      c.embDim = std::stoll(val);
    else if(key == "state-dim")
      c.stateDim = std::stoll(val);
    else if(key == "heads")
      c.heads = std::stoi(val);
    else if(key == "layers")
      c.layers = std::stoi(val);
    else if(key == "dropout")
      c.dropout = (Real)std::stod(val);
    else if(key == "tying")
      c.tying = val;
    else if(key == "layer-norm")
      c.layerNorm = val != "0";
    else if(key == "right-left")
      c.rightLeft = val != "0";
    else if(key == "post-norm")
      c.postNorm = val != "0";
    else if(key == "source-arity")
      c.sourceArity = std::stoi(val);
    else
      throw DataError("unknown model config key: " + key);
  }
  return c;
}

// ------------------------------------------------------------- helpers

namespace {

Embeddings embeddingsFor(const ModelConfig& cfg) {
  return Embeddings{"emb", tyingFromString(cfg.tying), cfg.sourceVocab, cfg.targetVocab,
                    cfg.embDim};
}

// [b x 1] column t of a [b x s] mask
Tensor maskColumn(const Tensor& mask, int64_t b, int64_t s, int64_t t) {
  Tensor col(Shape({b, 1}));
  for(int64_t r = 0; r < b; ++r)
    col.at(r) = mask.at(r * s + t);
  return col;
}

bool isIdentity(const std::vector<int64_t>& rows, int64_t n) {
  if((int64_t)rows.size() != n)
    return false;
  for(int64_t i = 0; i < n; ++i)
    if(rows[(size_t)i] != i)
      return false;
  return true;
}

Tensor gatherMaskRows(const Tensor& mask, const std::vector<int64_t>& rows) {
  int64_t s = mask.shape().back();
  Tensor out(Shape({(int64_t)rows.size(), s}));
  for(size_t r = 0; r < rows.size(); ++r)
    for(int64_t j = 0; j < s; ++j)
      out.at((int64_t)r * s + j) = mask.at(rows[r] * s + j);
  return out;
}

// Encoder states as seen from the current hypothesis rows.
struct MemoryView {
  std::vector<NodeRef> context;
  std::vector<Tensor> mask;
};

MemoryView viewMemory(ExpressionGraph& g, const DecoderState& state) {
  MemoryView mv;
  for(auto& es : state.encoderStates) {
    if(isIdentity(state.rowToSentence, es.context.shape[0])) {
      mv.context.push_back(es.context);
      mv.mask.push_back(es.mask);
    } else {
      mv.context.push_back(gatherStateRows(g, es.context, state.rowToSentence));
      mv.mask.push_back(gatherMaskRows(es.mask, state.rowToSentence));
    }
  }
  return mv;
}

// ----------------------------------------------------------- RNN encoder

class RnnEncoder : public Encoder {
public:
  RnnEncoder(const ModelConfig& cfg, int blocks, std::string prefix)
      : cfg_(cfg), blocks_(blocks), prefix_(std::move(prefix)) {}

  int64_t contextDim() const override { return 2 * cfg_.stateDim; }

  EncoderState build(ExpressionGraph& g, const Batch& batch, int stream) override {
    const IntMat& ids = batch.sourceIds[(size_t)stream];
    const Tensor& mask = batch.sourceMasks[(size_t)stream];
    int64_t b = ids.rows, s = ids.cols, d = cfg_.stateDim;

    Embeddings emb = embeddingsFor(cfg_);
    NodeRef x = g.embed(emb.sourceTable(g, stream), ids);  // [b x s x e]
    x = g.dropout(x, cfg_.dropout, /*variationalAxis=*/1);

    auto runDirection = [&](bool backward, const std::string& dir) {
      DeepTransitionCell cell;
      cell.prefix = prefix_ + "." + dir;
      cell.blocks = blocks_;
      cell.inputDim = cfg_.embDim;
      cell.stateDim = d;
      cell.layerNorm = cfg_.layerNorm;
      NodeRef dropMask = g.dropoutMask(Shape({b, d}), cfg_.dropout);
      NodeRef h = g.constant(Shape({b, d}), std::vector<Real>((size_t)(b * d), Real(0)));
      std::vector<NodeRef> states((size_t)s);
      for(int64_t i = 0; i < s; ++i) {
        int64_t t = backward ? s - 1 - i : i;
        NodeRef xt = g.reshape(g.slice(x, 1, t, 1), Shape({b, cfg_.embDim}));
        NodeRef hn = cell.step(g, xt, h, NodeRef(), Tensor(), dropMask).state;
        // keep the old state at padded positions
        NodeRef m = g.constant(maskColumn(mask, b, s, t));
        NodeRef notM = g.addScalar(g.neg(m), Real(1));
        h = g.add(g.mul(hn, m), g.mul(h, notM));
        states[(size_t)t] = g.reshape(h, Shape({b, 1, d}));
      }
      return states;
    };
    auto fwd = runDirection(false, "fwd");
    auto bwd = runDirection(true, "bwd");

    std::vector<NodeRef> both((size_t)s);
    for(int64_t t = 0; t < s; ++t)
      both[(size_t)t] = g.concat({fwd[(size_t)t], bwd[(size_t)t]}, 2);
    EncoderState es;
    es.context = g.concat(both, 1);  // [b x s x 2d]
    es.mask = mask;
    return es;
  }

private:
  ModelConfig cfg_;
  int blocks_;
  std::string prefix_;
};

// ---------------------------------------------------- transformer encoder

class TransformerEncoder : public Encoder {
public:
  TransformerEncoder(const ModelConfig& cfg, std::string prefix)
      : cfg_(cfg), prefix_(std::move(prefix)) {}

  int64_t contextDim() const override { return cfg_.embDim; }

  EncoderState build(ExpressionGraph& g, const Batch& batch, int stream) override {
    const IntMat& ids = batch.sourceIds[(size_t)stream];
    const Tensor& mask = batch.sourceMasks[(size_t)stream];
    Embeddings emb = embeddingsFor(cfg_);
    NodeRef x = g.embed(emb.sourceTable(g, stream), ids);
    x = addPositionalEncoding(g, x, 0);
    x = g.dropout(x, cfg_.dropout, 1);
    for(int l = 0; l < cfg_.layers; ++l) {
      TransformerBlock blk{prefix_ + ".l" + std::to_string(l), cfg_.embDim, cfg_.heads,
                           !cfg_.postNorm, cfg_.dropout};
      x = blk.apply(g, x, mask, /*causal=*/false);
    }
    if(!cfg_.postNorm) {
      NodeRef gain = g.param(prefix_ + ".lnF.g", Shape({cfg_.embDim}), inits::ones());
      NodeRef bias = g.param(prefix_ + ".lnF.b", Shape({cfg_.embDim}), inits::zeros());
      x = g.layerNorm(x, gain, bias);
    }
    EncoderState es;
    es.context = x;
    es.mask = mask;
    return es;
  }

private:
  ModelConfig cfg_;
  std::string prefix_;
};

// ------------------------------------------------------------ RNN decoder

struct RnnDecoderState : DecoderState {
  NodeRef state;      // [rows x d]
  NodeRef stateDrop;  // variational masks, one per sequence
  NodeRef ctxDrop;

  void select(ExpressionGraph& g, const std::vector<int64_t>& rows) override {
    state = gatherStateRows(g, state, rows);
    if(stateDrop.valid())
      stateDrop = gatherStateRows(g, stateDrop, rows);
    if(ctxDrop.valid())
      ctxDrop = gatherStateRows(g, ctxDrop, rows);
    DecoderState::select(g, rows);
  }
};

class RnnDecoder : public Decoder {
public:
  RnnDecoder(const ModelConfig& cfg, int blocks, std::vector<int64_t> memoryDims,
             std::string prefix)
      : cfg_(cfg), blocks_(blocks), memoryDims_(std::move(memoryDims)),
        prefix_(std::move(prefix)) {}

  int arity() const override { return (int)memoryDims_.size(); }

  int64_t combinedCtxDim() const {
    if(memoryDims_.empty())
      return 0;
    return memoryDims_.size() == 1 ? memoryDims_[0] : cfg_.stateDim;
  }

  std::unique_ptr<DecoderState> startState(ExpressionGraph& g,
                                           std::vector<EncoderState> encoderStates,
                                           int64_t batchRows) override {
    if((int)encoderStates.size() != arity())
      throw ContractError("decoder expects " + std::to_string(arity()) +
                          " encoder state(s), got " + std::to_string(encoderStates.size()));
    int64_t d = cfg_.stateDim;
    auto st = std::make_unique<RnnDecoderState>();
    int64_t b;
    if(encoderStates.empty()) {
      if(batchRows < 1)
        throw ContractError("language model start state needs the batch size");
      b = batchRows;
      st->state = g.constant(Shape({b, d}), std::vector<Real>((size_t)(b * d), Real(0)));
    } else {
      b = encoderStates[0].context.shape[0];
      std::vector<NodeRef> means;
      int64_t total = 0;
      for(auto& es : encoderStates) {
        int64_t s = es.context.shape[1], dc = es.context.shape.back();
        NodeRef m = g.constant(Shape({b, 1, s}), es.mask.toVector());
        NodeRef sum = g.dot(m, es.context);  // [b x 1 x dc]
        Tensor counts(Shape({b, 1, 1}));
        for(int64_t r = 0; r < b; ++r) {
          Real c = 0;
          for(int64_t j = 0; j < s; ++j)
            c += es.mask.at(r * s + j);
          counts.at(r) = c;
        }
        means.push_back(g.div(sum, g.constant(counts)));
        total += dc;
      }
      NodeRef mean = g.reshape(means.size() == 1 ? means[0] : g.concat(means, 2),
                               Shape({b, total}));
      NodeRef W = g.param(prefix_ + ".initW", Shape({total, d}), inits::glorotUniform());
      NodeRef bias = g.param(prefix_ + ".initB", Shape({d}), inits::zeros());
      st->state = g.tanh(g.affine(mean, W, bias));
    }
    st->stateDrop = g.dropoutMask(Shape({b, d}), cfg_.dropout);
    if(combinedCtxDim() > 0)
      st->ctxDrop = g.dropoutMask(Shape({b, combinedCtxDim()}), cfg_.dropout);
    st->encoderStates = std::move(encoderStates);
    st->rowToSentence.resize((size_t)b);
    for(int64_t r = 0; r < b; ++r)
      st->rowToSentence[(size_t)r] = r;
    return st;
  }

  void step(ExpressionGraph& g, DecoderState& stateBase, const IntMat& tokens,
            const Tensor& tokenMask) override {
    auto& st = dynamic_cast<RnnDecoderState&>(stateBase);
    int64_t rows = st.rows(), t = tokens.cols, d = cfg_.stateDim, e = cfg_.embDim;
    if(tokens.rows != rows)
      throw ContractError("decoder step: token rows do not match hypothesis rows");
    MemoryView mem = viewMemory(g, st);

    DeepTransitionCell cell;
    cell.prefix = prefix_ + ".cell";
    cell.blocks = blocks_;
    cell.attentionSlot = memoryDims_.empty() ? -1 : 1;
    cell.inputDim = e;
    cell.stateDim = d;
    cell.layerNorm = cfg_.layerNorm;

    Embeddings emb = embeddingsFor(cfg_);
    NodeRef table = emb.targetTable(g);
    NodeRef state = st.state;
    std::vector<NodeRef> logitSteps;
    for(int64_t pos = 0; pos < t; ++pos) {
      IntMat col(rows, 1);
      for(int64_t r = 0; r < rows; ++r)
        col.at(r, 0) = tokens.at(r, pos);
      NodeRef x = g.reshape(g.embed(table, col), Shape({rows, e}));

      NodeRef combined;
      DeepTransitionCell::ContextFn fn = [&](NodeRef s1) -> std::pair<NodeRef, int64_t> {
        std::vector<NodeRef> ctxs;
        for(size_t i = 0; i < memoryDims_.size(); ++i) {
          BahdanauAttention att{prefix_ + ".att" + std::to_string(i), d, memoryDims_[i], d,
                                cfg_.layerNorm};
          ctxs.push_back(att.apply(g, s1, mem.context[i], mem.mask[i]).context);
        }
        combined = ctxs[0];
        if(ctxs.size() > 1) {
          int64_t total = 0;
          for(auto dim : memoryDims_)
            total += dim;
          NodeRef W = g.param(prefix_ + ".ctxW", Shape({total, d}), inits::glorotUniform());
          NodeRef bias = g.param(prefix_ + ".ctxB", Shape({d}), inits::zeros());
          combined = g.affine(g.concat(ctxs, 1), W, bias);
        }
        if(st.ctxDrop.valid())
          combined = g.mul(combined, st.ctxDrop);
        return {combined, combinedCtxDim()};
      };
      NodeRef next = cell.stepWith(g, x, state, fn, st.stateDrop);
      if(!tokenMask.empty()) {
        NodeRef m = g.constant(maskColumn(tokenMask, rows, t, pos));
        NodeRef notM = g.addScalar(g.neg(m), Real(1));
        next = g.add(g.mul(next, m), g.mul(state, notM));
      }
      state = next;

      std::vector<NodeRef> roParts = {state, x};
      int64_t roDim = d + e;
      if(combined.valid()) {
        roParts.insert(roParts.begin() + 1, combined);
        roDim += combinedCtxDim();
      }
      NodeRef roW = g.param(prefix_ + ".roW", Shape({roDim, e}), inits::glorotUniform());
      NodeRef roB = g.param(prefix_ + ".roB", Shape({e}), inits::zeros());
      NodeRef hidden = g.tanh(g.affine(g.concat(roParts, 1), roW, roB));
      logitSteps.push_back(
          g.reshape(emb.logits(g, hidden), Shape({rows, 1, cfg_.targetVocab})));
    }
    st.state = state;
    st.logits = logitSteps.size() == 1 ? logitSteps[0] : g.concat(logitSteps, 1);
    st.position += t;
  }

private:
  ModelConfig cfg_;
  int blocks_;
  std::vector<int64_t> memoryDims_;
  std::string prefix_;
};

// ---------------------------------------------------- transformer decoder

struct TfDecoderState : DecoderState {
  IntMat prefixTokens;  // all decoder inputs consumed so far [rows x p]

  void select(ExpressionGraph& g, const std::vector<int64_t>& rows) override {
    IntMat next((int64_t)rows.size(), prefixTokens.cols);
    for(size_t r = 0; r < rows.size(); ++r)
      for(int64_t c = 0; c < prefixTokens.cols; ++c)
        next.at((int64_t)r, c) = prefixTokens.at(rows[r], c);
    prefixTokens = std::move(next);
    DecoderState::select(g, rows);
  }
};

class TransformerDecoder : public Decoder {
public:
  TransformerDecoder(const ModelConfig& cfg, int arity, std::string prefix)
      : cfg_(cfg), arity_(arity), prefix_(std::move(prefix)) {}

  int arity() const override { return arity_; }
  int64_t memoryDim() const override { return cfg_.embDim; }

  std::unique_ptr<DecoderState> startState(ExpressionGraph& g,
                                           std::vector<EncoderState> encoderStates,
                                           int64_t batchRows) override {
    (void)g;
    if((int)encoderStates.size() != arity_)
      throw ContractError("decoder expects " + std::to_string(arity_) +
                          " encoder state(s), got " + std::to_string(encoderStates.size()));
    int64_t b = encoderStates.empty() ? batchRows : encoderStates[0].context.shape[0];
    if(b < 1)
      throw ContractError("language model start state needs the batch size");
    auto st = std::make_unique<TfDecoderState>();
    st->prefixTokens = IntMat(b, 0);
    st->encoderStates = std::move(encoderStates);
    st->rowToSentence.resize((size_t)b);
    for(int64_t r = 0; r < b; ++r)
      st->rowToSentence[(size_t)r] = r;
    return st;
  }

  void step(ExpressionGraph& g, DecoderState& stateBase, const IntMat& tokens,
            const Tensor& tokenMask) override {
    auto& st = dynamic_cast<TfDecoderState&>(stateBase);
    int64_t rows = st.rows(), t = tokens.cols, p = st.prefixTokens.cols;
    if(tokens.rows != rows)
      throw ContractError("decoder step: token rows do not match hypothesis rows");
    MemoryView mem = viewMemory(g, st);

    IntMat full(rows, p + t);
    Tensor fullMask(Shape({rows, p + t}));
    for(int64_t r = 0; r < rows; ++r) {
      for(int64_t c = 0; c < p; ++c) {
        full.at(r, c) = st.prefixTokens.at(r, c);
        fullMask.at(r * (p + t) + c) = 1;
      }
      for(int64_t c = 0; c < t; ++c) {
        full.at(r, p + c) = tokens.at(r, c);
        fullMask.at(r * (p + t) + p + c) =
            tokenMask.empty() ? Real(1) : tokenMask.at(r * t + c);
      }
    }

    Embeddings emb = embeddingsFor(cfg_);
    NodeRef x = g.embed(emb.targetTable(g), full);
    x = addPositionalEncoding(g, x, 0);
    x = g.dropout(x, cfg_.dropout, 1);
    for(int l = 0; l < cfg_.layers; ++l) {
      TransformerBlock blk{prefix_ + ".l" + std::to_string(l), cfg_.embDim, cfg_.heads,
                           !cfg_.postNorm, cfg_.dropout};
      NodeRef memory = arity_ > 0 ? mem.context[0] : NodeRef();
      Tensor memMask = arity_ > 0 ? mem.mask[0] : Tensor();
      if(arity_ > 1) {
        // dual-source: concatenate memories along time
        std::vector<NodeRef> parts;
        for(auto& c : mem.context)
          parts.push_back(c);
        memory = g.concat(parts, 1);
        int64_t total = 0;
        for(auto& m : mem.mask)
          total += m.shape().back();
        memMask = Tensor(Shape({rows, total}));
        int64_t off = 0;
        for(auto& m : mem.mask) {
          int64_t s = m.shape().back();
          for(int64_t r = 0; r < rows; ++r)
            for(int64_t j = 0; j < s; ++j)
              memMask.at(r * total + off + j) = m.at(r * s + j);
          off += s;
        }
      }
      x = blk.apply(g, x, fullMask, /*causal=*/true, memory, memMask);
    }
    if(!cfg_.postNorm) {
      NodeRef gain = g.param(prefix_ + ".lnF.g", Shape({cfg_.embDim}), inits::ones());
      NodeRef bias = g.param(prefix_ + ".lnF.b", Shape({cfg_.embDim}), inits::zeros());
      x = g.layerNorm(x, gain, bias);
    }
    NodeRef logits = emb.logits(g, x);  // [rows x (p+t) x V]
    st.logits = p == 0 ? logits : g.slice(logits, 1, p, t);
    st.prefixTokens = std::move(full);
    st.position += t;
  }

private:
  ModelConfig cfg_;
  int arity_;
  std::string prefix_;
};

// -------------------------------------------------- hard-attention decoder

struct HardAttentionState : RnnDecoderState {
  std::vector<int64_t> indices;  // monotone source position per row

  const std::vector<int64_t>* attentionIndices() const override { return &indices; }

  void select(ExpressionGraph& g, const std::vector<int64_t>& rows) override {
    std::vector<int64_t> next;
    next.reserve(rows.size());
    for(auto r : rows)
      next.push_back(indices[(size_t)r]);
    indices = std::move(next);
    RnnDecoderState::select(g, rows);
  }
};

class HardAttentionDecoder : public Decoder {
public:
  HardAttentionDecoder(const ModelConfig& cfg, int64_t memDim, std::string prefix)
      : cfg_(cfg), memDim_(memDim), prefix_(std::move(prefix)) {}

  int arity() const override { return 1; }

  std::unique_ptr<DecoderState> startState(ExpressionGraph& g,
                                           std::vector<EncoderState> encoderStates,
                                           int64_t) override {
    if(encoderStates.size() != 1)
      throw ContractError("hard-attention decoder expects exactly 1 encoder state");
    int64_t b = encoderStates[0].context.shape[0], d = cfg_.stateDim;
    auto st = std::make_unique<HardAttentionState>();
    st->state = g.constant(Shape({b, d}), std::vector<Real>((size_t)(b * d), Real(0)));
    st->stateDrop = g.dropoutMask(Shape({b, d}), cfg_.dropout);
    st->indices.assign((size_t)b, 0);
    st->encoderStates = std::move(encoderStates);
    st->rowToSentence.resize((size_t)b);
    for(int64_t r = 0; r < b; ++r)
      st->rowToSentence[(size_t)r] = r;
    return st;
  }

  void step(ExpressionGraph& g, DecoderState& stateBase, const IntMat& tokens,
            const Tensor& tokenMask) override {
    auto& st = dynamic_cast<HardAttentionState&>(stateBase);
    int64_t rows = st.rows(), t = tokens.cols, d = cfg_.stateDim, e = cfg_.embDim;
    const EncoderState& es = st.encoderStates[0];
    int64_t b = es.context.shape[0], s = es.context.shape[1], dc = es.context.shape.back();
    std::vector<int64_t> srcLen((size_t)rows);
    for(int64_t r = 0; r < rows; ++r) {
      int64_t n = 0;
      for(int64_t j = 0; j < s; ++j)
        n += es.mask.at(st.rowToSentence[(size_t)r] * s + j) != 0 ? 1 : 0;
      srcLen[(size_t)r] = std::max<int64_t>(n, 1);
    }
    NodeRef encFlat = g.reshape(es.context, Shape({b * s, dc}));

    DeepTransitionCell cell;
    cell.prefix = prefix_ + ".cell";
    cell.blocks = 2;
    cell.attentionSlot = 1;
    cell.inputDim = e;
    cell.stateDim = d;
    cell.layerNorm = cfg_.layerNorm;

    Embeddings emb = embeddingsFor(cfg_);
    NodeRef table = emb.targetTable(g);
    NodeRef state = st.state;
    std::vector<NodeRef> logitSteps;
    for(int64_t pos = 0; pos < t; ++pos) {
      IntMat col(rows, 1);
      for(int64_t r = 0; r < rows; ++r)
        col.at(r, 0) = tokens.at(r, pos);
      NodeRef x = g.reshape(g.embed(table, col), Shape({rows, e}));

      NodeRef combined;
      DeepTransitionCell::ContextFn fn = [&](NodeRef s1) -> std::pair<NodeRef, int64_t> {
        NodeRef gateW = g.param(prefix_ + ".gateW", Shape({d, 1}), inits::glorotUniform());
        NodeRef gateB = g.param(prefix_ + ".gateB", Shape({1}), inits::zeros());
        NodeRef gate = g.sigmoid(g.affine(s1, gateW, gateB));  // [rows x 1]
        g.forward();  // realize the gate to drive the discrete advance

        std::vector<int64_t> cur((size_t)rows), nxt((size_t)rows);
        for(int64_t r = 0; r < rows; ++r) {
          int64_t idx = st.indices[(size_t)r];
          cur[(size_t)r] = st.rowToSentence[(size_t)r] * s + idx;
          int64_t advanced = std::min(idx + 1, srcLen[(size_t)r] - 1);
          nxt[(size_t)r] = st.rowToSentence[(size_t)r] * s + advanced;
          if(gate.val().at(r) > Real(0.5))
            st.indices[(size_t)r] = advanced;  // hard, monotone move
        }
        NodeRef curCtx = g.gatherRows(encFlat, cur);
        NodeRef nxtCtx = g.gatherRows(encFlat, nxt);
        NodeRef notGate = g.addScalar(g.neg(gate), Real(1));
        combined = g.add(g.mul(gate, nxtCtx), g.mul(notGate, curCtx));
        return {combined, dc};
      };
      NodeRef next = cell.stepWith(g, x, state, fn, st.stateDrop);
      if(!tokenMask.empty()) {
        NodeRef m = g.constant(maskColumn(tokenMask, rows, t, pos));
        NodeRef notM = g.addScalar(g.neg(m), Real(1));
        next = g.add(g.mul(next, m), g.mul(state, notM));
      }
      state = next;

      NodeRef roW =
          g.param(prefix_ + ".roW", Shape({d + dc + e, e}), inits::glorotUniform());
      NodeRef roB = g.param(prefix_ + ".roB", Shape({e}), inits::zeros());
      NodeRef hidden = g.tanh(g.affine(g.concat({state, combined, x}, 1), roW, roB));
      logitSteps.push_back(
          g.reshape(emb.logits(g, hidden), Shape({rows, 1, cfg_.targetVocab})));
    }
    st.state = state;
    st.logits = logitSteps.size() == 1 ? logitSteps[0] : g.concat(logitSteps, 1);
    st.position += t;
    (void)memDim_;
  }

private:
  ModelConfig cfg_;
  int64_t memDim_;
  std::string prefix_;
};

}  // namespace

// ----------------------------------------------------------------- Model

std::vector<EncoderState> Model::encode(ExpressionGraph& g, const Batch& batch) const {
  std::vector<EncoderState> out;
  for(size_t i = 0; i < encoders.size(); ++i) {
    EncoderState es = encoders[i]->build(g, batch, (int)i);
    int64_t want = decoder->memoryDim();
    if(want >= 0 && es.context.shape.back() != want) {
      NodeRef W = g.param("adapt" + std::to_string(i) + ".W",
                          Shape({es.context.shape.back(), want}), inits::glorotUniform());
      NodeRef b = g.param("adapt" + std::to_string(i) + ".b", Shape({want}), inits::zeros());
      es.context = g.affine(es.context, W, b);
    }
    out.push_back(std::move(es));
  }
  return out;
}

std::unique_ptr<DecoderState> Model::startState(ExpressionGraph& g, const Batch& batch) const {
  return decoder->startState(g, encode(g, batch), batch.rows());
}

NodeRef Model::buildLoss(ExpressionGraph& g, const Batch& batch, Real* tokenCount) const {
  if(!batch.hasTarget)
    throw ContractError("loss needs a target side");
  auto st = startState(g, batch);
  decoder->step(g, *st, shiftTargets(batch.targetIds), batch.targetMask);
  if(tokenCount) {
    Real n = 0;
    for(int64_t i = 0; i < batch.targetMask.size(); ++i)
      n += batch.targetMask.at(i) != 0 ? Real(1) : Real(0);
    *tokenCount = n;
  }
  return g.crossEntropy(st->logits, batch.targetIds, batch.targetMask);
}

void Model::registerParams(ExpressionGraph& g) const {
  std::vector<const Example*> group;
  Example ex;
  ex.sources.resize((size_t)decoder->arity());
  for(auto& s : ex.sources)
    s = {};  // a lone </s> per stream
  ex.target = {};
  ex.hasTarget = true;
  group.push_back(&ex);
  Batch dummy = padBatch(group);
  buildLoss(g, dummy);
}

// --------------------------------------------------------------- factory

Model compose(const ModelConfig& config, const std::vector<std::string>& encoderKinds,
              const std::string& decoderKind) {
  Model m;
  m.config = config;
  std::vector<int64_t> ctxDims;
  for(size_t i = 0; i < encoderKinds.size(); ++i) {
    const std::string& kind = encoderKinds[i];
    std::string prefix = "enc" + std::to_string(i);
    if(kind == "rnn-shallow")
      m.encoders.push_back(std::make_unique<RnnEncoder>(config, 1, prefix));
    else if(kind == "rnn-deep")
      m.encoders.push_back(std::make_unique<RnnEncoder>(config, 4, prefix));
    else if(kind == "transformer")
      m.encoders.push_back(std::make_unique<TransformerEncoder>(config, prefix));
    else
      throw DataError("unknown encoder kind: " + kind);
    ctxDims.push_back(m.encoders.back()->contextDim());
  }
  if(decoderKind == "rnn-shallow")
    m.decoder = std::make_unique<RnnDecoder>(config, 2, ctxDims, "dec");
  else if(decoderKind == "rnn-deep")
    m.decoder = std::make_unique<RnnDecoder>(config, 8, ctxDims, "dec");
  else if(decoderKind == "transformer") {
    m.decoder = std::make_unique<TransformerDecoder>(config, (int)ctxDims.size(), "dec");
  } else if(decoderKind == "hard") {
    if(ctxDims.size() != 1)
      throw DataError("hard-attention decoder needs exactly one encoder");
    m.decoder = std::make_unique<HardAttentionDecoder>(config, ctxDims[0], "dec");
  } else {
    throw DataError("unknown decoder kind: " + decoderKind);
  }
  return m;
}

static std::vector<std::string> splitCsv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for(char c : s) {
    if(c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if(!cur.empty())
    out.push_back(cur);
  return out;
}

Model buildModel(const ModelConfig& config) {
  const std::string& a = config.architecture;
  if(a == "s2s-shallow")
    return compose(config, {"rnn-shallow"}, "rnn-shallow");
  if(a == "s2s-deep")
    return compose(config, {"rnn-deep"}, "rnn-deep");
  if(a == "transformer")
    return compose(config, {"transformer"}, "transformer");
  if(a == "lm")
    return compose(config, {}, "rnn-shallow");
  if(a == "ape-dual")
    return compose(config, {"rnn-deep", "rnn-deep"}, "rnn-deep");
  if(a == "hard-att")
    return compose(config, {"rnn-shallow"}, "hard");
  if(a == "custom")
    return compose(config, splitCsv(config.encoderKind), config.decoderKind);
  throw DataError("unknown architecture: " + a);
}

std::vector<CensusEntry> parameterCensus(const ModelConfig& config) {
  ExpressionGraph g(1);
  Model m = buildModel(config);
  m.registerParams(g);
  std::vector<CensusEntry> out;
  for(auto& name : g.paramNames()) {
    CensusEntry e;
    e.name = name;
    e.shape = g.paramValue(name).shape();
    e.count = g.paramValue(name).size();
    out.push_back(std::move(e));
  }
  return out;
}

int64_t parameterTotal(const ModelConfig& config) {
  int64_t total = 0;
  for(auto& e : parameterCensus(config))
    total += e.count;
  return total;
}

}  // namespace mtk
