#include "mtk/data.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace mtk {

// ----------------------------------------------------------- Vocabulary

Vocabulary::Vocabulary() {
  add("</s>");
  add("<unk>");
}

void Vocabulary::add(const std::string& token) {
  if(tok2id_.count(token))
    throw DataError("duplicate token in vocabulary: " + token);
  tok2id_[token] = (int32_t)id2tok_.size();
  id2tok_.push_back(token);
}

static std::vector<std::string> splitTokens(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while(is >> tok)
    out.push_back(tok);
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpusPaths, size_t maxSize) {
  std::unordered_map<std::string, int64_t> freq;
  bool any = false;
  for(auto& path : corpusPaths)
    for(auto& line : readLines(path)) {
      for(auto& tok : splitTokens(line)) {
        ++freq[tok];
        any = true;
      }
    }
  if(!any)
    throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, int64_t>> sorted(freq.begin(), freq.end());
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
    if(a.second != b.second)
      return a.second > b.second;  // descending frequency
    return a.first < b.first;      // ties lexicographic
  });
  Vocabulary v;
  for(auto& [tok, n] : sorted) {
    if((size_t)v.size() >= maxSize)
      break;
    if(tok == "</s>" || tok == "<unk>")
      throw DataError("reserved token redefined in corpus: " + tok);
    v.add(tok);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if(!in)
    throw IoError("cannot open vocabulary file: " + path);
  Vocabulary v;
  v.id2tok_.clear();
  v.tok2id_.clear();
  std::string line;
  while(std::getline(in, line)) {
    if(!line.empty() && line.back() == '\r')
      line.pop_back();
    v.add(line);
  }
  if(v.size() < 2 || v.id2tok_[0] != "</s>" || v.id2tok_[1] != "<unk>")
    throw DataError("vocabulary file must start with </s> and <unk>: " + path);
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path);
  if(!out)
    throw IoError("cannot write vocabulary file: " + path);
  for(auto& tok : id2tok_)
    out << tok << "\n";
}

int32_t Vocabulary::id(const std::string& token) const {
  auto it = tok2id_.find(token);
  return it == tok2id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int32_t id) const {
  if(id < 0 || id >= size())
    throw DataError("token id out of range: " + std::to_string(id));
  return id2tok_[(size_t)id];
}

std::vector<int32_t> Vocabulary::encode(const std::string& line) const {
  std::vector<int32_t> out;
  for(auto& tok : splitTokens(line))
    out.push_back(id(tok));
  return out;
}

std::string Vocabulary::decode(const std::vector<int32_t>& ids) const {
  std::string out;
  for(size_t i = 0; i < ids.size(); ++i) {
    if(ids[i] == kEos)
      break;
    if(!out.empty())
      out += ' ';
    out += token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------- Batch

int64_t Batch::sourceTokenCount() const {
  if(sourceMasks.empty())
    return 0;
  int64_t n = 0;
  for(int64_t i = 0; i < sourceMasks[0].size(); ++i)
    n += sourceMasks[0].at(i) != 0 ? 1 : 0;
  return n;
}

static std::vector<int32_t> unpadRow(const IntMat& ids, const Tensor& mask, int64_t row) {
  std::vector<int32_t> out;
  for(int64_t c = 0; c < ids.cols; ++c)
    if(mask.at(row * ids.cols + c) != 0)
      out.push_back(ids.at(row, c));
  if(out.empty() || out.back() != Vocabulary::kEos)
    throw ContractError("batch row does not end with </s>");
  out.pop_back();
  return out;
}

std::vector<int32_t> Batch::sourceSentence(int stream, int64_t row) const {
  return unpadRow(sourceIds[(size_t)stream], sourceMasks[(size_t)stream], row);
}

std::vector<int32_t> Batch::targetSentence(int64_t row) const {
  return unpadRow(targetIds, targetMask, row);
}

static void padStream(const std::vector<const std::vector<int32_t>*>& seqs, IntMat& ids,
                      Tensor& mask) {
  int64_t b = (int64_t)seqs.size();
  int64_t maxLen = 1;
  for(auto* s : seqs)
    maxLen = std::max<int64_t>(maxLen, (int64_t)s->size() + 1);
  ids = IntMat(b, maxLen);
  mask = Tensor(Shape({b, maxLen}));
  for(int64_t r = 0; r < b; ++r) {
    const auto& s = *seqs[(size_t)r];
    for(size_t c = 0; c < s.size(); ++c) {
      ids.at(r, (int64_t)c) = s[c];
      mask.at(r * maxLen + (int64_t)c) = 1;
    }
    ids.at(r, (int64_t)s.size()) = Vocabulary::kEos;
    mask.at(r * maxLen + (int64_t)s.size()) = 1;
  }
}

Batch padBatch(const std::vector<const Example*>& group) {
  if(group.empty())
    throw ContractError("cannot pad an empty batch");
  size_t arity = group[0]->sources.size();
  Batch batch;
  batch.sourceIds.resize(arity);
  batch.sourceMasks.resize(arity);
  for(size_t s = 0; s < arity; ++s) {
    std::vector<const std::vector<int32_t>*> seqs;
    for(auto* ex : group)
      seqs.push_back(&ex->sources[s]);
    padStream(seqs, batch.sourceIds[s], batch.sourceMasks[s]);
  }
  batch.hasTarget = group[0]->hasTarget;
  if(batch.hasTarget) {
    std::vector<const std::vector<int32_t>*> seqs;
    for(auto* ex : group)
      seqs.push_back(&ex->target);
    padStream(seqs, batch.targetIds, batch.targetMask);
  }
  for(auto* ex : group)
    batch.sentenceIds.push_back(ex->id);
  return batch;
}

static int64_t paddedCost(const std::vector<const Example*>& group, const Example* extra) {
  size_t arity = group.empty() ? extra->sources.size() : group[0]->sources.size();
  int64_t b = (int64_t)group.size() + (extra ? 1 : 0);
  int64_t total = 0;
  for(size_t s = 0; s < arity; ++s) {
    int64_t maxLen = 1;
    for(auto* ex : group)
      maxLen = std::max<int64_t>(maxLen, (int64_t)ex->sources[s].size() + 1);
    if(extra)
      maxLen = std::max<int64_t>(maxLen, (int64_t)extra->sources[s].size() + 1);
    total += b * maxLen;
  }
  bool hasTarget = group.empty() ? extra->hasTarget : group[0]->hasTarget;
  if(hasTarget) {
    int64_t maxLen = 1;
    for(auto* ex : group)
      maxLen = std::max<int64_t>(maxLen, (int64_t)ex->target.size() + 1);
    if(extra)
      maxLen = std::max<int64_t>(maxLen, (int64_t)extra->target.size() + 1);
    total += b * maxLen;
  }
  return total;
}

static int64_t exampleLength(const Example& ex) {
  int64_t n = 0;
  for(auto& s : ex.sources)
    n += (int64_t)s.size() + 1;
  if(ex.hasTarget)
    n += (int64_t)ex.target.size() + 1;
  return n;
}

std::vector<Batch> makeBatches(const std::vector<Example>& examples, const BatchOptions& opts,
                               size_t* skippedCount) {
  size_t skipped = 0;
  std::vector<const Example*> order;
  for(auto& ex : examples) {
    if(paddedCost({}, &ex) > opts.tokenBudget) {
      ++skipped;  // a lone sentence above the budget can never be batched
      continue;
    }
    order.push_back(&ex);
  }
  if(opts.shuffle) {
    Rng rng(opts.seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  size_t window = opts.sortWindow;
  if(window == 0) {
    // ~100x the average batch size in sentences
    int64_t avgLen = 1;
    if(!order.empty()) {
      int64_t total = 0;
      for(auto* ex : order)
        total += exampleLength(*ex);
      avgLen = std::max<int64_t>(1, total / (int64_t)order.size());
    }
    window = (size_t)std::max<int64_t>(1, 100 * opts.tokenBudget / avgLen);
  }

  std::vector<Batch> batches;
  for(size_t start = 0; start < order.size(); start += window) {
    size_t end = std::min(order.size(), start + window);
    std::vector<const Example*> win(order.begin() + (long)start, order.begin() + (long)end);
    std::stable_sort(win.begin(), win.end(), [](const Example* a, const Example* b) {
      return exampleLength(*a) < exampleLength(*b);
    });
    std::vector<const Example*> group;
    for(auto* ex : win) {
      if(!group.empty() && paddedCost(group, ex) > opts.tokenBudget) {
        batches.push_back(padBatch(group));
        group.clear();
      }
      group.push_back(ex);
    }
    if(!group.empty())
      batches.push_back(padBatch(group));
  }
  if(opts.shuffle) {
    // Sorting made consecutive batches length-homogeneous; visiting them in
    // that order is a length curriculum that hurts convergence. Shuffle the
    // formed batches (composition stays length-sorted and deterministic).
    Rng rng(opts.seed ^ 0x9e3779b97f4a7c15ull);
    std::shuffle(batches.begin(), batches.end(), rng);
  }
  if(skippedCount)
    *skippedCount = skipped;
  return batches;
}

// ------------------------------------------------------------- corpus IO

std::vector<std::string> readLines(const std::string& path) {
  std::ifstream in(path);
  if(!in)
    throw IoError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while(std::getline(in, line)) {
    if(!line.empty() && line.back() == '\r')
      line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<Example> readParallelCorpus(const std::vector<std::string>& sourcePaths,
                                        const std::string& targetPath,
                                        const std::vector<const Vocabulary*>& sourceVocabs,
                                        const Vocabulary* targetVocab) {
  std::vector<std::vector<std::string>> sourceLines;
  for(auto& p : sourcePaths)
    sourceLines.push_back(readLines(p));
  std::vector<std::string> targetLines;
  if(!targetPath.empty())
    targetLines = readLines(targetPath);
  size_t n = sourceLines.empty() ? targetLines.size() : sourceLines[0].size();
  for(auto& s : sourceLines)
    if(s.size() != n)
      throw DataError("corpus streams are not sentence-aligned");
  if(!targetPath.empty() && targetLines.size() != n)
    throw DataError("target corpus not aligned with source corpus");

  std::vector<Example> out;
  for(size_t i = 0; i < n; ++i) {
    Example ex;
    ex.id = i;
    for(size_t s = 0; s < sourceLines.size(); ++s)
      ex.sources.push_back(sourceVocabs[s]->encode(sourceLines[s][i]));
    if(!targetPath.empty()) {
      ex.target = targetVocab->encode(targetLines[i]);
      ex.hasTarget = true;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<int32_t> invertR2l(std::vector<int32_t> tokens) {
  std::reverse(tokens.begin(), tokens.end());
  return tokens;
}

// ----------------------------------------------------------------- BLEU

double corpusBleu(const std::vector<std::string>& hypotheses,
                  const std::vector<std::string>& references, int maxN) {
  if(hypotheses.size() != references.size())
    throw DataError("BLEU: hypothesis/reference line counts differ");
  std::vector<int64_t> matches((size_t)maxN, 0), totals((size_t)maxN, 0);
  int64_t hypLen = 0, refLen = 0;
  for(size_t i = 0; i < hypotheses.size(); ++i) {
    auto hyp = splitTokens(hypotheses[i]);
    auto ref = splitTokens(references[i]);
    hypLen += (int64_t)hyp.size();
    refLen += (int64_t)ref.size();
    for(int n = 1; n <= maxN; ++n) {
      std::map<std::vector<std::string>, int64_t> refCounts;
      for(size_t j = 0; j + (size_t)n <= ref.size(); ++j)
        ++refCounts[std::vector<std::string>(ref.begin() + (long)j, ref.begin() + (long)(j + (size_t)n))];
      std::map<std::vector<std::string>, int64_t> hypCounts;
      for(size_t j = 0; j + (size_t)n <= hyp.size(); ++j)
        ++hypCounts[std::vector<std::string>(hyp.begin() + (long)j, hyp.begin() + (long)(j + (size_t)n))];
      for(auto& [gram, cnt] : hypCounts) {
        totals[(size_t)n - 1] += cnt;
        auto it = refCounts.find(gram);
        if(it != refCounts.end())
          matches[(size_t)n - 1] += std::min(cnt, it->second);
      }
    }
  }
  double logSum = 0;
  for(int n = 0; n < maxN; ++n) {
    if(totals[(size_t)n] == 0 || matches[(size_t)n] == 0)
      return 0.0;
    logSum += std::log((double)matches[(size_t)n] / (double)totals[(size_t)n]);
  }
  double bp = hypLen >= refLen || hypLen == 0
                  ? 1.0
                  : std::exp(1.0 - (double)refLen / (double)hypLen);
  return 100.0 * bp * std::exp(logSum / maxN);
}

}  // namespace mtk
