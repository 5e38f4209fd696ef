#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mtk/search.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

using namespace mtk;

namespace {

ModelConfig tinyConfig(int64_t vocab = 8) {
  ModelConfig c;
  c.architecture = "s2s-shallow";
  c.sourceVocab = vocab;
  c.targetVocab = vocab;
  c.embDim = 4;
  c.stateDim = 5;
  c.dropout = Real(0);
  return c;
}

Batch oneSentenceBatch(const std::vector<int32_t>& src) {
  Example ex;
  ex.sources = {src};
  ex.id = 0;
  return padBatch({&ex});
}

double logProbOf(const Tensor& logits, int64_t row, int64_t vocab, int32_t token) {
  double mx = -1e30;
  for(int64_t v = 0; v < vocab; ++v)
    mx = std::max(mx, (double)logits.data()[row * vocab + v]);
  double sum = 0;
  for(int64_t v = 0; v < vocab; ++v)
    sum += std::exp((double)logits.data()[row * vocab + v] - mx);
  return (double)logits.data()[row * vocab + token] - mx - std::log(sum);
}

// step-by-step greedy decode, independent of the beam implementation
std::pair<std::vector<int32_t>, double> greedyDecode(const Model& model, ExpressionGraph& g,
                                                     const Batch& batch, int64_t maxLen) {
  g.clear();
  g.setInference(true);
  auto state = model.startState(g, batch);
  int64_t vocab = model.config.targetVocab;
  std::vector<int32_t> tokens;
  double score = 0;
  int32_t last = Vocabulary::kEos;
  for(int64_t t = 0; t < maxLen; ++t) {
    IntMat in(1, 1);
    in.at(0, 0) = last;
    Tensor mask(Shape({1, 1}), std::vector<Real>{1});
    model.decoder->step(g, *state, in, mask);
    g.forward();
    const Tensor& logits = state->logits.val();
    int32_t best = 0;
    if(t + 1 < maxLen)  // the last step forces </s>, like the search does
      for(int32_t v = 1; v < (int32_t)vocab; ++v)
        if(logits.data()[v] > logits.data()[best])
          best = v;
    score += logProbOf(logits, 0, vocab, best);
    tokens.push_back(best);
    if(best == Vocabulary::kEos)
      break;
    last = best;
  }
  return {tokens, score};
}

// scores an arbitrary token sequence (terminated or not) by forced decoding
double forcedScore(const Model& model, ExpressionGraph& g, const Batch& batch,
                   const std::vector<int32_t>& seq) {
  g.clear();
  g.setInference(true);
  auto state = model.startState(g, batch);
  int64_t vocab = model.config.targetVocab;
  IntMat in(1, (int64_t)seq.size());
  in.at(0, 0) = Vocabulary::kEos;
  for(size_t i = 1; i < seq.size(); ++i)
    in.at(0, (int64_t)i) = seq[i - 1];
  Tensor mask(Shape({1, (int64_t)seq.size()}));
  for(int64_t i = 0; i < (int64_t)seq.size(); ++i)
    mask.at(i) = Real(1);
  model.decoder->step(g, *state, in, mask);
  g.forward();
  const Tensor& logits = state->logits.val();
  double score = 0;
  for(size_t t = 0; t < seq.size(); ++t)
    score += logProbOf(logits, (int64_t)t, vocab, seq[t]);
  return score;
}

}  // namespace

TEST_CASE("beam size one equals greedy decoding") {
  ExpressionGraph g(31);
  Model model = buildModel(tinyConfig());
  model.registerParams(g);
  Batch batch = oneSentenceBatch({2, 3, 4});

  ExpressionGraph gRef(31);
  model.registerParams(gRef);
  auto [refTokens, refScore] = greedyDecode(model, gRef, batch, 12);

  SearchOptions opts;
  opts.beamSize = 1;
  opts.alpha = 0;
  auto lists = beamSearch({{"m", &model, &g}}, batch, opts);
  REQUIRE(lists.size() == 1);
  REQUIRE(!lists[0].empty());
  CHECK(lists[0][0].tokens == refTokens);
  CHECK(lists[0][0].score == doctest::Approx(refScore).epsilon(1e-9));
}

TEST_CASE("an ensemble of identical models equals the single model") {
  ModelConfig cfg = tinyConfig();
  ExpressionGraph g1(7), g2a(7), g2b(7);
  Model model = buildModel(cfg);
  model.registerParams(g1);
  model.registerParams(g2a);
  model.registerParams(g2b);
  Batch batch = oneSentenceBatch({2, 5, 3, 6});

  SearchOptions opts;
  opts.beamSize = 4;
  opts.alpha = 0;
  auto single = beamSearch({{"m", &model, &g1}}, batch, opts);
  auto ensemble = beamSearch({{"a", &model, &g2a}, {"b", &model, &g2b}}, batch, opts);
  REQUIRE(single[0].size() == ensemble[0].size());
  for(size_t i = 0; i < single[0].size(); ++i) {
    CHECK(single[0][i].tokens == ensemble[0][i].tokens);
    CHECK(single[0][i].score == doctest::Approx(ensemble[0][i].score).epsilon(1e-7));
  }
}

TEST_CASE("ensemble scores are the arithmetic mean of the members") {
  ModelConfig cfg = tinyConfig();
  ExpressionGraph ga(11), gb(99);
  Model model = buildModel(cfg);
  model.registerParams(ga);
  model.registerParams(gb);  // different seed: genuinely different weights
  Batch batch = oneSentenceBatch({3, 4});

  SearchOptions opts;
  opts.beamSize = 3;
  opts.alpha = 0;
  auto lists = beamSearch({{"a", &model, &ga}, {"b", &model, &gb}}, batch, opts);
  for(auto& h : lists[0]) {
    REQUIRE(h.components.size() == 2);
    double mean = 0.5 * (h.components[0].second + h.components[1].second);
    CHECK(h.score == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("a beam covering the whole search space finds the exhaustive optimum") {
  // vocab 4, max length 3, </s> forced at the limit: the space is the 13
  // terminated sequences of length <= 3, and beam 13 visits all of them
  ModelConfig cfg = tinyConfig(4);
  ExpressionGraph g(13);
  Model model = buildModel(cfg);
  model.registerParams(g);
  Batch batch = oneSentenceBatch({2, 3});  // masked source length 3 incl </s>

  SearchOptions opts;
  opts.beamSize = 13;
  opts.alpha = 0;
  opts.maxLengthFactor = 1;
  auto lists = beamSearch({{"m", &model, &g}}, batch, opts);
  REQUIRE(lists[0].size() == 13);

  // exhaustive enumeration, scored by forced decoding
  ExpressionGraph gf(13);
  model.registerParams(gf);
  double best = -1e30;
  std::vector<std::vector<int32_t>> space;
  std::vector<int32_t> nonEos = {1, 2, 3};
  space.push_back({0});
  for(int32_t a : nonEos) {
    space.push_back({a, 0});
    for(int32_t b : nonEos)
      space.push_back({a, b, 0});
  }
  REQUIRE(space.size() == 13);
  for(auto& seq : space)
    best = std::max(best, forcedScore(model, gf, batch, seq));
  CHECK(lists[0][0].score == doctest::Approx(best).epsilon(1e-7));

  SUBCASE("best score never degrades as the beam widens") {
    std::vector<int> sizes = {1, 2, 5, 40};
    double prev = -1e30;
    for(int b : sizes) {
      SearchOptions o = opts;
      o.beamSize = b;
      auto l = beamSearch({{"m", &model, &g}}, batch, o);
      CHECK(l[0][0].score >= prev - 1e-9);
      prev = l[0][0].score;
    }
  }
}

TEST_CASE("search scores agree with forced-decoding scores") {
  ExpressionGraph g(17);
  Model model = buildModel(tinyConfig());
  model.registerParams(g);
  Batch batch = oneSentenceBatch({2, 6, 4});
  SearchOptions opts;
  opts.beamSize = 3;
  opts.alpha = 0;
  auto lists = beamSearch({{"m", &model, &g}}, batch, opts);
  for(auto& h : lists[0]) {
    if(h.tokens.empty() || h.tokens.back() != Vocabulary::kEos)
      continue;
    Example ex;
    ex.sources = {{2, 6, 4}};
    ex.target = h.tokens;
    ex.target.pop_back();
    ex.hasTarget = true;
    Batch scored = padBatch({&ex});
    ExpressionGraph gs(17);
    model.registerParams(gs);
    auto res = scoreBatch({"m", &model, &gs}, scored);
    CHECK(res[0].score == doctest::Approx(h.score).epsilon(1e-5));
  }
}

TEST_CASE("forced-decoding scores are log-probabilities") {
  ExpressionGraph g(23);
  Model model = buildModel(tinyConfig());
  model.registerParams(g);
  Example a, b;
  a.sources = {{2, 3}};
  a.target = {4, 5};
  a.hasTarget = true;
  a.id = 0;
  b.sources = {{6, 2, 7}};
  b.target = {3};
  b.hasTarget = true;
  b.id = 1;
  Batch both = padBatch({&a, &b});
  auto res = scoreBatch({"m", &model, &g}, both);
  REQUIRE(res.size() == 2);
  for(auto& h : res) {
    CHECK(h.score <= 0);
    for(double s : h.tokenScores)
      CHECK(s <= 0);
    CHECK(h.tokenScores.size() == h.tokens.size());
  }

  SUBCASE("scores do not depend on batch composition") {
    Batch onlyA = padBatch({&a});
    auto ra = scoreBatch({"m", &model, &g}, onlyA);
    for(size_t t = 0; t < ra[0].tokenScores.size(); ++t)
      CHECK(ra[0].tokenScores[t] == doctest::Approx(res[0].tokenScores[t]).epsilon(1e-5));
  }
}

TEST_CASE("ranking normalizes by length and breaks ties on token ids") {
  Hypothesis shortH, longH;
  shortH.tokens = {3, 0};
  shortH.score = -2.0;
  longH.tokens = {3, 3, 3, 3, 3, 3, 3, 0};
  longH.score = -3.0;
  CHECK(lengthNormalizedScore(shortH, 0) == doctest::Approx(-2.0));
  CHECK(lengthNormalizedScore(shortH, 0.6) == doctest::Approx(-2.0 / std::pow(2.0, 0.6)));

  std::vector<Hypothesis> hyps = {longH, shortH};
  rankHypotheses(hyps, 0);  // raw: short wins
  CHECK(hyps[0].tokens == shortH.tokens);
  rankHypotheses(hyps, 1.0);  // fully normalized: long wins (-3/8 > -2/2)
  CHECK(hyps[0].tokens == longH.tokens);

  Hypothesis t1, t2;
  t1.tokens = {2, 5, 0};
  t2.tokens = {2, 4, 0};
  t1.score = t2.score = -1.0;
  std::vector<Hypothesis> tied = {t1, t2};
  rankHypotheses(tied, 0.6);
  CHECK(tied[0].tokens == t2.tokens);  // lower id at the first divergence
}

TEST_CASE("n-best lines have the exact expected format") {
  Hypothesis h;
  h.score = -3.75;
  h.components = {{"m0", -1.5}, {"m1", -2.25}};
  CHECK(formatNBestLine(3, "a b", h) ==
        "3 ||| a b ||| m0=-1.500000 m1=-2.250000 ||| -3.750000");
}

TEST_CASE("rescoring appends component scores and re-ranks by weighted sum") {
  ModelConfig cfg = tinyConfig();
  ExpressionGraph ga(5), gb(55);
  Model modelA = buildModel(cfg);
  modelA.registerParams(ga);
  ModelConfig cfgB = cfg;
  cfgB.rightLeft = true;
  Model modelB = buildModel(cfgB);
  modelB.registerParams(gb);

  Example src;
  src.sources = {{2, 3, 4}};
  src.id = 0;
  Batch batch = padBatch({&src});
  SearchOptions opts;
  opts.beamSize = 4;
  opts.alpha = 0;
  auto nbest = beamSearch({{"A", &modelA, &ga}}, batch, opts);
  size_t count = nbest[0].size();
  REQUIRE(count >= 2);

  addComponentScores({"B", &modelB, &gb}, {src}, nbest);
  for(auto& h : nbest[0]) {
    REQUIRE(h.components.size() == 2);
    CHECK(h.components[1].first == "B");
    CHECK(h.components[1].second <= 0);
    CHECK(std::isfinite(h.components[1].second));
  }

  std::map<std::string, double> weights = {{"A", 1.0}, {"B", 1.0}};
  combineComponents(nbest, weights, 0);
  for(auto& h : nbest[0])
    CHECK(h.score ==
          doctest::Approx(h.components[0].second + h.components[1].second).epsilon(1e-9));

  // zero weight on the new component restores the original ranking metric
  auto copy = nbest;
  combineComponents(copy, {{"A", 1.0}, {"B", 0.0}}, 0);
  for(auto& h : copy[0])
    CHECK(h.score == doctest::Approx(h.components[0].second).epsilon(1e-9));
}

TEST_CASE("file translation restores sentence order and is batching invariant") {
  ModelConfig cfg = tinyConfig();
  ExpressionGraph g(41);
  Model model = buildModel(cfg);
  model.registerParams(g);

  Vocabulary vocab;  // built from a throwaway corpus file
  std::string corpus = "/tmp/mtk_search_corpus.txt";
  {
    std::ofstream out(corpus);
    out << "aa bb cc dd ee ff\n";
  }
  vocab = Vocabulary::build({corpus}, 8);
  std::remove(corpus.c_str());
  REQUIRE(vocab.size() == 8);

  std::vector<std::string> lines = {"aa bb cc dd", "ee", "ff aa bb", "cc dd ee ff aa", "bb"};
  TranslateOptions opts;
  opts.beamSize = 2;
  opts.alpha = 0;
  opts.nBest = 2;
  opts.tokenBudget = 512;
  auto out1 = translateLines({{"m", &model, &g}}, vocab, {lines}, {vocab}, opts);
  REQUIRE(out1.best.size() == lines.size());
  CHECK(out1.nbestLines.size() >= lines.size());
  CHECK(out1.nbestLines[0].rfind("0 ||| ", 0) == 0);

  TranslateOptions small = opts;
  small.tokenBudget = 12;  // forces several small batches
  auto out2 = translateLines({{"m", &model, &g}}, vocab, {lines}, {vocab}, small);
  CHECK(out1.best == out2.best);

  SUBCASE("right-to-left models emit re-inverted output") {
    ModelConfig cfgR = cfg;
    cfgR.rightLeft = true;
    ExpressionGraph gr(41);
    Model modelR = buildModel(cfgR);
    modelR.registerParams(gr);
    Example ex;
    ex.sources = {vocab.encode(lines[0])};
    ex.id = 0;
    Batch b = padBatch({&ex});
    SearchOptions so = opts;
    auto raw = beamSearch({{"m", &modelR, &gr}}, b, so);
    std::vector<int32_t> toks = raw[0][0].tokens;
    if(!toks.empty() && toks.back() == Vocabulary::kEos)
      toks.pop_back();
    toks = invertR2l(toks);
    auto outR = translateLines({{"m", &modelR, &gr}}, vocab, {{lines[0]}}, {vocab}, opts);
    CHECK(outR.best[0] == vocab.decode(toks));
  }
}
