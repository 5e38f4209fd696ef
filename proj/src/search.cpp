#include "mtk/search.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace mtk {

namespace {

// log-softmax of one logits row, computed in double for stability
void logSoftmaxRow(const Real* x, int64_t n, std::vector<double>& out) {
  double mx = (double)x[0];
  for(int64_t i = 1; i < n; ++i)
    mx = std::max(mx, (double)x[i]);
  double sum = 0;
  for(int64_t i = 0; i < n; ++i)
    sum += std::exp((double)x[i] - mx);
  double lse = mx + std::log(sum);
  out.resize((size_t)n);
  for(int64_t i = 0; i < n; ++i)
    out[(size_t)i] = (double)x[i] - lse;
}

struct BeamHyp {
  int64_t sentence = 0;
  std::vector<int32_t> tokens;
  double score = 0;
  std::vector<double> tokenScores;
  std::vector<double> comp;  // per-scorer running totals
};

bool lexLess(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

Hypothesis finishHyp(const BeamHyp& h, const std::vector<Scorer>& scorers) {
  Hypothesis out;
  out.tokens = h.tokens;
  out.score = h.score;
  out.tokenScores = h.tokenScores;
  for(size_t m = 0; m < scorers.size(); ++m)
    out.components.emplace_back(scorers[m].name, h.comp[m]);
  return out;
}

}  // namespace

double lengthNormalizedScore(const Hypothesis& h, double alpha) {
  double len = (double)std::max<size_t>(h.tokens.size(), 1);
  return h.score / std::pow(len, alpha);
}

void rankHypotheses(std::vector<Hypothesis>& hyps, double alpha) {
  std::stable_sort(hyps.begin(), hyps.end(), [alpha](const Hypothesis& a, const Hypothesis& b) {
    double sa = lengthNormalizedScore(a, alpha);
    double sb = lengthNormalizedScore(b, alpha);
    if(sa != sb)
      return sa > sb;
    return lexLess(a.tokens, b.tokens);
  });
}

std::vector<std::vector<Hypothesis>> beamSearch(const std::vector<Scorer>& scorers,
                                                const Batch& batch,
                                                const SearchOptions& opts) {
  if(scorers.empty())
    throw ContractError("beam search needs at least one model");
  if(opts.beamSize < 1)
    throw ContractError("beam size must be positive");
  size_t nModels = scorers.size();
  int64_t sentences = batch.rows();

  std::vector<std::unique_ptr<DecoderState>> states;
  for(auto& s : scorers) {
    s.graph->clear();
    s.graph->setInference(true);
    states.push_back(s.model->startState(*s.graph, batch));
  }
  // per-sentence budget on emitted tokens
  std::vector<int64_t> maxLen((size_t)sentences, opts.maxLengthBase);
  if(!batch.sourceMasks.empty()) {
    const Tensor& m = batch.sourceMasks[0];
    int64_t s = m.size() / sentences;
    for(int64_t r = 0; r < sentences; ++r) {
      int64_t len = 0;
      for(int64_t c = 0; c < s; ++c)
        len += (int64_t)m.at(r * s + c);
      maxLen[(size_t)r] = std::max<int64_t>(opts.maxLengthFactor * len, 2);
    }
  }

  std::vector<BeamHyp> active((size_t)sentences);
  for(int64_t r = 0; r < sentences; ++r) {
    active[(size_t)r].sentence = r;
    active[(size_t)r].comp.assign(nModels, 0.0);
  }
  std::vector<std::vector<Hypothesis>> finished((size_t)sentences);
  std::vector<int> remaining((size_t)sentences, opts.beamSize);

  for(int64_t t = 0; !active.empty(); ++t) {
    int64_t rows = (int64_t)active.size();
    IntMat tokens(rows, 1);
    Tensor mask(Shape({rows, 1}));
    for(int64_t r = 0; r < rows; ++r) {
      tokens.at(r, 0) =
          active[(size_t)r].tokens.empty() ? Vocabulary::kEos : active[(size_t)r].tokens.back();
      mask.at(r) = Real(1);
    }

    // one lockstep expansion per model; log-probs averaged across models
    std::vector<std::vector<std::vector<double>>> lp(nModels);  // [model][row][v]
    for(size_t m = 0; m < nModels; ++m) {
      scorers[m].model->decoder->step(*scorers[m].graph, *states[m], tokens, mask);
      scorers[m].graph->forward();
      const Tensor& logits = states[m]->logits.val();
      int64_t v = logits.size() / rows;
      lp[m].resize((size_t)rows);
      for(int64_t r = 0; r < rows; ++r)
        logSoftmaxRow(logits.data() + r * v, v, lp[m][(size_t)r]);
    }
    int64_t v = (int64_t)lp[0][0].size();

    struct Cand {
      double score;
      int64_t row;
      int32_t token;
    };
    // group candidates per sentence (rows are sentence-sorted already)
    std::vector<BeamHyp> nextActive;
    std::vector<int64_t> nextRows;
    for(int64_t r0 = 0; r0 < rows;) {
      int64_t sent = active[(size_t)r0].sentence;
      int64_t r1 = r0;
      while(r1 < rows && active[(size_t)r1].sentence == sent)
        ++r1;
      int k = remaining[(size_t)sent];
      // at the length limit only </s> may be emitted, so every hypothesis
      // ends as a properly terminated sentence
      bool atLimit = t + 1 >= maxLen[(size_t)sent];
      std::vector<Cand> cands;
      for(int64_t r = r0; r < r1; ++r)
        for(int64_t tok = 0; tok < (atLimit ? (int64_t)Vocabulary::kEos + 1 : v); ++tok) {
          double mean = 0;
          for(size_t m = 0; m < nModels; ++m)
            mean += lp[m][(size_t)r][(size_t)tok];
          mean /= (double)nModels;
          cands.push_back({active[(size_t)r].score + mean, r, (int32_t)tok});
        }
      std::stable_sort(cands.begin(), cands.end(), [&](const Cand& a, const Cand& b) {
        if(a.score != b.score)
          return a.score > b.score;
        std::vector<int32_t> sa = active[(size_t)a.row].tokens;
        sa.push_back(a.token);
        std::vector<int32_t> sb = active[(size_t)b.row].tokens;
        sb.push_back(b.token);
        return lexLess(sa, sb);
      });
      for(int i = 0; i < k && i < (int)cands.size(); ++i) {
        const Cand& c = cands[(size_t)i];
        BeamHyp h = active[(size_t)c.row];
        h.tokens.push_back(c.token);
        double mean = 0;
        for(size_t m = 0; m < nModels; ++m) {
          h.comp[m] += lp[m][(size_t)c.row][(size_t)c.token];
          mean += lp[m][(size_t)c.row][(size_t)c.token];
        }
        h.score += mean / (double)nModels;
        h.tokenScores.push_back(mean / (double)nModels);
        if(c.token == Vocabulary::kEos) {
          finished[(size_t)sent].push_back(finishHyp(h, scorers));
          --remaining[(size_t)sent];
        } else {
          nextActive.push_back(std::move(h));
          nextRows.push_back(c.row);
        }
      }
      r0 = r1;
    }
    active = std::move(nextActive);
    if(active.empty())
      break;
    for(size_t m = 0; m < nModels; ++m)
      states[m]->select(*scorers[m].graph, nextRows);
  }

  for(auto& list : finished)
    rankHypotheses(list, opts.alpha);
  return finished;
}

std::vector<Hypothesis> scoreBatch(const Scorer& scorer, const Batch& batch) {
  if(!batch.hasTarget)
    throw ContractError("scoring needs a target side");
  ExpressionGraph& g = *scorer.graph;
  g.clear();
  g.setInference(true);
  auto state = scorer.model->startState(g, batch);
  IntMat inputs = shiftTargets(batch.targetIds);
  scorer.model->decoder->step(g, *state, inputs, batch.targetMask);
  g.forward();
  const Tensor& logits = state->logits.val();
  int64_t rows = batch.rows();
  int64_t T = batch.targetIds.cols;
  int64_t v = logits.size() / (rows * T);

  std::vector<Hypothesis> out((size_t)rows);
  std::vector<double> lp;
  for(int64_t r = 0; r < rows; ++r) {
    Hypothesis& h = out[(size_t)r];
    h.tokens = batch.targetSentence(r);
    h.tokens.push_back(Vocabulary::kEos);
    for(int64_t t = 0; t < T; ++t) {
      if(batch.targetMask.at(r * T + t) == Real(0))
        continue;
      logSoftmaxRow(logits.data() + (r * T + t) * v, v, lp);
      double s = lp[(size_t)batch.targetIds.at(r, t)];
      h.tokenScores.push_back(s);
      h.score += s;
    }
    h.components.emplace_back(scorer.name, h.score);
  }
  return out;
}

void addComponentScores(const Scorer& scorer, const std::vector<Example>& sources,
                        std::vector<std::vector<Hypothesis>>& nbest, int64_t tokenBudget) {
  bool r2l = scorer.model->config.rightLeft;
  std::vector<Example> flat;
  std::vector<std::pair<size_t, size_t>> where;  // flat id -> (sentence, hyp)
  for(size_t i = 0; i < nbest.size(); ++i)
    for(size_t j = 0; j < nbest[i].size(); ++j) {
      Example ex;
      ex.sources = sources[i].sources;
      ex.target = nbest[i][j].tokens;
      if(!ex.target.empty() && ex.target.back() == Vocabulary::kEos)
        ex.target.pop_back();
      if(r2l)
        ex.target = invertR2l(ex.target);
      ex.hasTarget = true;
      ex.id = where.size();
      where.emplace_back(i, j);
      flat.push_back(std::move(ex));
    }

  BatchOptions bo;
  bo.tokenBudget = tokenBudget;
  bo.shuffle = false;
  for(auto& batch : makeBatches(flat, bo)) {
    auto scored = scoreBatch(scorer, batch);
    for(size_t r = 0; r < scored.size(); ++r) {
      auto [i, j] = where[batch.sentenceIds[r]];
      nbest[i][j].components.emplace_back(scorer.name, scored[r].score);
    }
  }
}

void combineComponents(std::vector<std::vector<Hypothesis>>& nbest,
                       const std::map<std::string, double>& weights, double alpha) {
  for(auto& list : nbest) {
    for(auto& h : list) {
      double total = 0;
      for(auto& [name, score] : h.components) {
        auto it = weights.find(name);
        total += (it == weights.end() ? 1.0 : it->second) * score;
      }
      h.score = total;
    }
    rankHypotheses(list, alpha);
  }
}

std::string formatNBestLine(size_t id, const std::string& text, const Hypothesis& h) {
  std::ostringstream out;
  out << id << " ||| " << text << " |||";
  out << std::fixed << std::setprecision(6);
  for(auto& [name, score] : h.components)
    out << ' ' << name << '=' << score;
  out << " ||| " << h.score;
  return out.str();
}

TranslateOutput translateLines(const std::vector<Scorer>& scorers,
                               const Vocabulary& targetVocab,
                               const std::vector<std::vector<std::string>>& sourceStreams,
                               const std::vector<Vocabulary>& sourceVocabs,
                               const TranslateOptions& opts) {
  if(sourceStreams.empty() || sourceStreams.size() != sourceVocabs.size())
    throw ContractError("translation needs one vocabulary per source stream");
  size_t n = sourceStreams[0].size();
  for(auto& s : sourceStreams)
    if(s.size() != n)
      throw DataError("source streams have different line counts");

  std::vector<Example> examples(n);
  for(size_t i = 0; i < n; ++i) {
    for(size_t s = 0; s < sourceStreams.size(); ++s)
      examples[i].sources.push_back(sourceVocabs[s].encode(sourceStreams[s][i]));
    examples[i].id = i;
  }

  bool r2l = scorers[0].model->config.rightLeft;
  auto t0 = std::chrono::steady_clock::now();
  int64_t wordCount = 0;

  TranslateOutput out;
  out.nbest.resize(n);
  BatchOptions bo;
  bo.tokenBudget = opts.tokenBudget;
  bo.shuffle = false;
  for(auto& batch : makeBatches(examples, bo)) {
    auto lists = beamSearch(scorers, batch, opts);
    for(size_t r = 0; r < lists.size(); ++r) {
      if(r2l)
        for(auto& h : lists[r]) {
          bool eos = !h.tokens.empty() && h.tokens.back() == Vocabulary::kEos;
          if(eos)
            h.tokens.pop_back();
          h.tokens = invertR2l(h.tokens);
          if(eos)
            h.tokens.push_back(Vocabulary::kEos);
        }
      out.nbest[batch.sentenceIds[r]] = std::move(lists[r]);
    }
  }

  out.best.resize(n);
  for(size_t i = 0; i < n; ++i) {
    if(out.nbest[i].empty())
      throw NumericError("search produced no hypothesis for sentence " + std::to_string(i));
    std::vector<int32_t> toks = out.nbest[i][0].tokens;
    if(!toks.empty() && toks.back() == Vocabulary::kEos)
      toks.pop_back();
    out.best[i] = targetVocab.decode(toks);
    wordCount += (int64_t)toks.size();
    int keep = std::min<int>(opts.nBest, (int)out.nbest[i].size());
    for(int j = 0; j < keep; ++j) {
      std::vector<int32_t> t = out.nbest[i][(size_t)j].tokens;
      if(!t.empty() && t.back() == Vocabulary::kEos)
        t.pop_back();
      out.nbestLines.push_back(formatNBestLine(i, targetVocab.decode(t), out.nbest[i][(size_t)j]));
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.wordsPerSecond = secs > 0 ? (double)wordCount / secs : 0;
  return out;
}

}  // namespace mtk
