#pragma once

#include "mtk/graph.h"

#include <string>
#include <unordered_map>
#include <vector>

namespace mtk {

// Token <-> id bijection with fixed reserved ids.
class Vocabulary {
public:
  static constexpr int32_t kEos = 0;  // "</s>"
  static constexpr int32_t kUnk = 1;  // "<unk>"

  Vocabulary();

  static Vocabulary build(const std::vector<std::string>& corpusPaths, size_t maxSize);
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int32_t size() const { return (int32_t)id2tok_.size(); }
  int32_t id(const std::string& token) const;
  const std::string& token(int32_t id) const;

  std::vector<int32_t> encode(const std::string& line) const;  // no terminator
  std::string decode(const std::vector<int32_t>& ids) const;

private:
  void add(const std::string& token);
  std::vector<std::string> id2tok_;
  std::unordered_map<std::string, int32_t> tok2id_;
};

// One aligned training/translation example: >= 0 source streams plus an
// optional target, all without the trailing </s> (batching appends it).
struct Example {
  std::vector<std::vector<int32_t>> sources;
  std::vector<int32_t> target;
  bool hasTarget = false;
  size_t id = 0;
};

// Padded batch. Masks are authoritative: entry 1 iff real token; every
// sequence ends with exactly one </s> at its last unmasked position.
struct Batch {
  std::vector<IntMat> sourceIds;
  std::vector<Tensor> sourceMasks;
  IntMat targetIds;
  Tensor targetMask;
  bool hasTarget = false;
  std::vector<size_t> sentenceIds;

  int64_t rows() const { return sourceIds.empty() ? targetIds.rows : sourceIds[0].rows; }
  int64_t sourceTokenCount() const;  // unmasked tokens of stream 0, incl. </s>
  std::vector<int32_t> sourceSentence(int stream, int64_t row) const;  // no </s>
  std::vector<int32_t> targetSentence(int64_t row) const;              // no </s>
};

struct BatchOptions {
  int64_t tokenBudget = 512;  // padded token slots summed over all streams
  uint64_t seed = 1;
  size_t sortWindow = 0;  // 0 = derive from budget
  bool shuffle = true;
};

Batch padBatch(const std::vector<const Example*>& group);
std::vector<Batch> makeBatches(const std::vector<Example>& examples, const BatchOptions& opts,
                               size_t* skippedCount = nullptr);

std::vector<std::string> readLines(const std::string& path);
std::vector<Example> readParallelCorpus(const std::vector<std::string>& sourcePaths,
                                        const std::string& targetPath,
                                        const std::vector<const Vocabulary*>& sourceVocabs,
                                        const Vocabulary* targetVocab);

// Target-side inversion for right-to-left models; an involution applied
// before the terminator is appended.
std::vector<int32_t> invertR2l(std::vector<int32_t> tokens);

// Corpus BLEU: geometric mean of clipped n-gram precisions up to maxN
// times the brevity penalty, scaled to [0, 100]; 0 if any precision is 0.
double corpusBleu(const std::vector<std::string>& hypotheses,
                  const std::vector<std::string>& references, int maxN = 4);

}  // namespace mtk
