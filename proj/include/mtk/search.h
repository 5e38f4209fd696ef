#pragma once

#include "mtk/serialize.h"

namespace mtk {

// One model taking part in decoding, scoring or rescoring. The graph is
// used in inference mode and holds the model's weights.
struct Scorer {
  std::string name;
  const Model* model = nullptr;
  ExpressionGraph* graph = nullptr;
  double weight = 1.0;
};

struct Hypothesis {
  std::vector<int32_t> tokens;  // no leading start symbol; trailing </s>
                                // present when the search emitted one
  double score = 0;             // ensemble-mean log-probability
  std::vector<double> tokenScores;
  std::vector<std::pair<std::string, double>> components;  // per-scorer totals
};

struct SearchOptions {
  int beamSize = 5;
  double alpha = 0.6;          // rank by score / length^alpha
  int nBest = 1;
  int64_t maxLengthFactor = 3;  // times the source length
  int64_t maxLengthBase = 50;   // cap for models without a source
};

// Lockstep batched beam search over an ensemble (arithmetic mean of the
// per-model log-probabilities). Finished hypotheses leave the beam, which
// shrinks accordingly. Returns one ranked list per batch row.
std::vector<std::vector<Hypothesis>> beamSearch(const std::vector<Scorer>& scorers,
                                                const Batch& batch,
                                                const SearchOptions& opts);

// Forced decoding: per-token log-probabilities of the batch's own targets,
// one hypothesis per batch row (in row order).
std::vector<Hypothesis> scoreBatch(const Scorer& scorer, const Batch& batch);

// Scores every hypothesis with an additional model by forced decoding and
// appends the result to its component list. Right-to-left models see the
// target reversed. `sources` is indexed by batch-row position in `nbest`.
void addComponentScores(const Scorer& scorer, const std::vector<Example>& sources,
                        std::vector<std::vector<Hypothesis>>& nbest,
                        int64_t tokenBudget = 512);

// total := sum_i weight_i * component_i for each hypothesis (missing
// weights default to 1), then re-ranks each list by length-normalized
// total.
void combineComponents(std::vector<std::vector<Hypothesis>>& nbest,
                       const std::map<std::string, double>& weights, double alpha);

double lengthNormalizedScore(const Hypothesis& h, double alpha);
// Sort best-first by normalized score; ties go to the hypothesis whose
// first divergent token has the lower id.
void rankHypotheses(std::vector<Hypothesis>& hyps, double alpha);

// "<id> ||| <text> ||| name0=<s0> name1=<s1> ||| <total>", 6 decimals.
std::string formatNBestLine(size_t id, const std::string& text, const Hypothesis& h);

struct TranslateOptions : SearchOptions {
  int64_t tokenBudget = 512;
};

struct TranslateOutput {
  std::vector<std::string> best;        // one line per input, input order
  std::vector<std::string> nbestLines;  // formatted, grouped by input order
  std::vector<std::vector<Hypothesis>> nbest;  // per input, ranked
  double wordsPerSecond = 0;
};

// Translates a whole corpus: batches by length, decodes, restores the
// original sentence order. Right-to-left ensembles emit their output
// re-inverted to normal reading order.
TranslateOutput translateLines(const std::vector<Scorer>& scorers,
                               const Vocabulary& targetVocab,
                               const std::vector<std::vector<std::string>>& sourceStreams,
                               const std::vector<Vocabulary>& sourceVocabs,
                               const TranslateOptions& opts);

}  // namespace mtk
