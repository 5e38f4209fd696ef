#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "gradcheck.h"
#include "mtk/layers.h"

#include <cmath>

using namespace mtk;

static_assert(sizeof(Real) == 8, "layer gradient oracles need the double build");

static std::vector<Real> randVec(size_t n, Rng& rng, double scale = 1.0) {
  std::vector<Real> v(n);
  std::uniform_real_distribution<double> d(-scale, scale);
  for(auto& x : v)
    x = (Real)d(rng);
  return v;
}

// fixed-weight projection to a scalar so every output element matters
static NodeRef scalarize(ExpressionGraph& g, NodeRef x) {
  Rng rng(hash64("scalarize"));
  NodeRef w = g.constant(x.shape, randVec((size_t)x.shape.size(), rng));
  NodeRef flat = g.reshape(g.mul(x, w), Shape({1, x.shape.size()}));
  return g.reduce(ReduceOp::Sum, flat, 1);
}

// ----------------------------------------------------------- embeddings

TEST_CASE("tied embeddings reuse one matrix for input and output") {
  ExpressionGraph g(1);
  Embeddings emb{"emb", TyingMode::All, 6, 6, 4};
  IntMat ids(1, 2);
  ids.at(0, 0) = 2;
  NodeRef h = g.embed(emb.targetTable(g), ids);
  NodeRef logits = emb.logits(g, h);
  g.forward();
  CHECK(logits.shape == Shape({1, 2, 6}));
  CHECK(g.paramNames() == std::vector<std::string>{"emb.E", "emb.outB"});
  // logits = h . E^T: entry v equals dot(E[row2], E[v]) for position 0
  Tensor& E = g.paramValue("emb.E");
  for(int64_t v = 0; v < 6; ++v) {
    double acc = 0;
    for(int64_t j = 0; j < 4; ++j)
      acc += (double)E.at(2 * 4 + j) * (double)E.at(v * 4 + j);
    CHECK(logits.val().at(v) == doctest::Approx(acc).epsilon(1e-6));
  }
}

TEST_CASE("tying modes control the table census") {
  auto census = [](TyingMode mode) {
    ExpressionGraph g(1);
    Embeddings emb{"emb", mode, 6, 6, 4};
    emb.sourceTable(g);
    emb.targetTable(g);
    IntMat ids(1, 1);
    emb.logits(g, g.embed(emb.targetTable(g), ids));
    int64_t total = 0;
    for(auto& name : g.paramNames())
      total += g.paramValue(name).size();
    return total;
  };
  int64_t untied = census(TyingMode::None);
  int64_t tiedAll = census(TyingMode::All);
  int64_t tiedSt = census(TyingMode::SourceTarget);
  CHECK(untied - tiedAll == 2 * 6 * 4);  // tied saves exactly 2*V*e
  CHECK(untied - tiedSt == 6 * 4);
}

// ---------------------------------------------------- bahdanau attention

TEST_CASE("attention with one unmasked position copies that key") {
  ExpressionGraph g(2);
  BahdanauAttention att{"att", 3, 4, 4, false};
  Rng rng(9);
  NodeRef q = g.constant(Shape({1, 3}), randVec(3, rng));
  NodeRef keys = g.constant(Shape({1, 5, 4}), randVec(20, rng));
  Tensor mask(Shape({1, 5}));
  mask.at(3) = 1;
  auto r = att.apply(g, q, keys, mask);
  g.forward();
  CHECK(r.weights.val().at(3) == doctest::Approx(1.0));
  for(int64_t j = 0; j < 4; ++j)
    CHECK(r.context.val().at(j) == doctest::Approx((double)keys.val().at(3 * 4 + j)));
}

TEST_CASE("identical keys give uniform attention weights") {
  ExpressionGraph g(3);
  BahdanauAttention att{"att", 3, 4, 4, false};
  Rng rng(11);
  NodeRef q = g.constant(Shape({1, 3}), randVec(3, rng));
  auto keyRow = randVec(4, rng);
  std::vector<Real> keyData;
  for(int i = 0; i < 5; ++i)
    keyData.insert(keyData.end(), keyRow.begin(), keyRow.end());
  NodeRef keys = g.constant(Shape({1, 5, 4}), keyData);
  Tensor mask(Shape({1, 5}));
  mask.fill(1);
  auto r = att.apply(g, q, keys, mask);
  g.forward();
  for(int64_t j = 0; j < 5; ++j)
    CHECK(r.weights.val().at(j) == doctest::Approx(0.2));
}

TEST_CASE("attention matches a scalar hand-rolled oracle") {
  for(uint64_t seed = 1; seed <= 10; ++seed) {
    ExpressionGraph g(seed);
    BahdanauAttention att{"att", 2, 2, 2, false};
    Rng rng(seed * 77);
    auto qv = randVec(2, rng);
    auto kv = randVec(6, rng);
    NodeRef q = g.constant(Shape({1, 2}), qv);
    NodeRef keys = g.constant(Shape({1, 3, 2}), kv);
    Tensor mask(Shape({1, 3}));
    mask.fill(1);
    auto r = att.apply(g, q, keys, mask);
    g.forward();

    auto& W = g.paramValue("att.W");
    auto& U = g.paramValue("att.U");
    auto& v = g.paramValue("att.v");
    double e[3], mx = -1e300;
    for(int j = 0; j < 3; ++j) {
      double acc = 0;
      for(int a = 0; a < 2; ++a) {
        double pre = 0;
        for(int i = 0; i < 2; ++i)
          pre += (double)qv[(size_t)i] * (double)W.at(i * 2 + a) +
                 (double)kv[(size_t)(j * 2 + i)] * (double)U.at(i * 2 + a);
        acc += std::tanh(pre) * (double)v.at(a);
      }
      e[j] = acc;
      mx = std::max(mx, acc);
    }
    double z = 0;
    for(int j = 0; j < 3; ++j)
      z += std::exp(e[j] - mx);
    for(int j = 0; j < 3; ++j)
      CHECK((double)r.weights.val().at(j) ==
            doctest::Approx(std::exp(e[j] - mx) / z).epsilon(1e-5));
    for(int d = 0; d < 2; ++d) {
      double ctx = 0;
      for(int j = 0; j < 3; ++j)
        ctx += std::exp(e[j] - mx) / z * (double)kv[(size_t)(j * 2 + d)];
      CHECK((double)r.context.val().at(d) == doctest::Approx(ctx).epsilon(1e-5));
    }
  }
}

TEST_CASE("attention gradients match finite differences") {
  ExpressionGraph g(5);
  Rng rng(5);
  auto qv = randVec(4, rng);
  auto kv = randVec(24, rng);
  auto build = [&](ExpressionGraph& gr) {
    BahdanauAttention att{"att", 2, 4, 3, true};
    NodeRef q = gr.constant(Shape({2, 2}), qv);
    NodeRef keys = gr.constant(Shape({2, 3, 4}), kv);
    Tensor mask(Shape({2, 3}));
    mask.fill(1);
    mask.at(5) = 0;
    auto r = att.apply(gr, q, keys, mask);
    return scalarize(gr, r.context);
  };
  testing::BuildFn fn = build;
  fn(g);
  CHECK(testing::checkGradients(
            g, fn, {"att.W", "att.U", "att.v", "att.lnG", "att.lnB"}) < 1e-4);
}

// --------------------------------------------------- multi-head attention

TEST_CASE("single-head identity-projection attention is scalar dot attention") {
  ExpressionGraph g(7);
  MultiHeadAttention mha{"mha", 1, 1};
  std::vector<Real> qv = {(Real)0.5, (Real)-1.0};
  std::vector<Real> kv = {(Real)1.0, (Real)2.0, (Real)-1.0};
  NodeRef q = g.constant(Shape({1, 2, 1}), qv);
  NodeRef k = g.constant(Shape({1, 3, 1}), kv);
  NodeRef out = mha.apply(g, q, k, k, Tensor());
  for(auto* w : {"mha.qW", "mha.kW", "mha.vW", "mha.oW"})
    g.paramValue(w).fill(1);
  g.forward();
  for(int qi = 0; qi < 2; ++qi) {
    double e[3], mx = -1e300, z = 0, expect = 0;
    for(int j = 0; j < 3; ++j) {
      e[j] = (double)qv[(size_t)qi] * (double)kv[(size_t)j];  // d_k = 1, scale 1
      mx = std::max(mx, e[j]);
    }
    for(int j = 0; j < 3; ++j)
      z += std::exp(e[j] - mx);
    for(int j = 0; j < 3; ++j)
      expect += std::exp(e[j] - mx) / z * (double)kv[(size_t)j];
    CHECK((double)out.val().at(qi) == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("causal masking blocks information from future positions") {
  Rng rng(13);
  auto base = randVec(5 * 4, rng);
  auto run = [&](const std::vector<Real>& data) {
    ExpressionGraph g(21);
    MultiHeadAttention mha{"mha", 4, 2};
    NodeRef x = g.constant(Shape({1, 5, 4}), data);
    NodeRef out = mha.apply(g, x, x, x, Tensor(), /*causal=*/true);
    g.forward();
    return out.val().toVector();
  };
  auto before = run(base);
  auto perturbed = base;
  for(size_t i = 2 * 4; i < perturbed.size(); ++i)
    perturbed[i] += (Real)0.7;  // change positions >= 2 only
  auto after = run(perturbed);
  for(size_t i = 0; i < 2 * 4; ++i)
    CHECK(before[i] == after[i]);  // positions 0..1 bitwise unchanged
  bool laterChanged = false;
  for(size_t i = 2 * 4; i < after.size(); ++i)
    laterChanged = laterChanged || before[i] != after[i];
  CHECK(laterChanged);
}

TEST_CASE("multi-head attention rejects indivisible dims") {
  ExpressionGraph g(1);
  MultiHeadAttention mha{"mha", 5, 2};
  NodeRef x = g.constant(Shape({1, 2, 5}), std::vector<Real>(10, (Real)0.1));
  CHECK_THROWS_AS(mha.apply(g, x, x, x, Tensor()), DimensionError);
}

TEST_CASE("multi-head attention gradients match finite differences") {
  ExpressionGraph g(6);
  Rng rng(6);
  auto xv = randVec(2 * 3 * 4, rng);
  auto build = [&](ExpressionGraph& gr) {
    MultiHeadAttention mha{"mha", 4, 2};
    NodeRef x = gr.constant(Shape({2, 3, 4}), xv);
    Tensor mask(Shape({2, 3}));
    mask.fill(1);
    mask.at(5) = 0;
    return scalarize(gr, mha.apply(gr, x, x, x, mask, true));
  };
  testing::BuildFn fn = build;
  fn(g);
  CHECK(testing::checkGradients(
            g, fn, {"mha.qW", "mha.kW", "mha.vW", "mha.oW", "mha.qB", "mha.oB"}) < 1e-4);
}

// ------------------------------------------------------ transformer block

TEST_CASE("zeroed sublayer outputs make a pre-norm block the identity") {
  Rng rng(17);
  auto xv = randVec(1 * 3 * 4, rng);
  ExpressionGraph g(31);
  TransformerBlock blk{"tf", 4, 2, /*preNorm=*/true, 0};
  NodeRef x = g.constant(Shape({1, 3, 4}), xv);
  Tensor mask(Shape({1, 3}));
  mask.fill(1);
  NodeRef out = blk.apply(g, x, mask, false);
  g.paramValue("tf.self.oW").setZero();
  g.paramValue("tf.self.oB").setZero();
  g.paramValue("tf.ffn.W2").setZero();
  g.paramValue("tf.ffn.b2").setZero();
  g.forward();
  for(int64_t i = 0; i < 12; ++i)
    CHECK(out.val().at(i) == doctest::Approx((double)xv[(size_t)i]));
}

TEST_CASE("post-norm flag changes the wiring") {
  Rng rng(19);
  auto xv = randVec(1 * 2 * 4, rng);
  auto run = [&](bool preNorm) {
    ExpressionGraph g(33);
    TransformerBlock blk{"tf", 4, 2, preNorm, 0};
    NodeRef x = g.constant(Shape({1, 2, 4}), xv);
    Tensor mask(Shape({1, 2}));
    mask.fill(1);
    NodeRef out = blk.apply(g, x, mask, false);
    g.forward();
    return out.val().toVector();
  };
  CHECK(run(true) != run(false));
}

TEST_CASE("decoder block gradients (self + cross + ffn) match finite differences") {
  ExpressionGraph g(8);
  Rng rng(8);
  auto xv = randVec(1 * 2 * 4, rng);
  auto mv = randVec(1 * 3 * 4, rng);
  auto build = [&](ExpressionGraph& gr) {
    TransformerBlock blk{"tf", 4, 2, true, 0};
    NodeRef x = gr.constant(Shape({1, 2, 4}), xv);
    NodeRef mem = gr.constant(Shape({1, 3, 4}), mv);
    Tensor selfMask(Shape({1, 2})), memMask(Shape({1, 3}));
    selfMask.fill(1);
    memMask.fill(1);
    return scalarize(gr, blk.apply(gr, x, selfMask, true, mem, memMask));
  };
  testing::BuildFn fn = build;
  fn(g);
  CHECK(testing::checkGradients(g, fn,
                                {"tf.self.qW", "tf.self.oW", "tf.cross.kW", "tf.cross.vW",
                                 "tf.ffn.W1", "tf.ffn.W2", "tf.self.ln.g", "tf.ffn.ln.b"}) <
        1e-4);
}

// --------------------------------------------------- positional encoding

TEST_CASE("position 0 encodes as the sin/cos interleave of zero") {
  Tensor pe = sinusoidalPositions(0, 3, 6);
  for(int64_t i = 0; i < 6; ++i)
    CHECK(pe.at(i) == (i % 2 == 0 ? 0 : 1));
  // position 1, column 0: sin(1)
  CHECK(pe.at(6) == doctest::Approx(std::sin(1.0)));
  CHECK(pe.at(7) == doctest::Approx(std::cos(1.0)));
}

TEST_CASE("positional encoding scales embeddings by sqrt(e) and is offset-aware") {
  ExpressionGraph g(2);
  std::vector<Real> xv(1 * 2 * 4, (Real)0.25);
  NodeRef x = g.constant(Shape({1, 2, 4}), xv);
  NodeRef out = addPositionalEncoding(g, x, 5);
  g.forward();
  Tensor pe = sinusoidalPositions(5, 2, 4);
  for(int64_t i = 0; i < 8; ++i)
    CHECK(out.val().at(i) == doctest::Approx(0.25 * 2.0 + (double)pe.at(i)));
}

// ------------------------------------------------- deep-transition cell

TEST_CASE("a 1-block cell without attention is a plain gru cell bitwise") {
  ExpressionGraph g(41);
  Rng rng(41);
  auto xv = randVec(2 * 3, rng);
  auto hv = randVec(2 * 4, rng);
  DeepTransitionCell cell;
  cell.prefix = "cell";
  cell.blocks = 1;
  cell.inputDim = 3;
  cell.stateDim = 4;
  NodeRef x = g.constant(Shape({2, 3}), xv);
  NodeRef h = g.constant(Shape({2, 4}), hv);
  auto r = cell.step(g, x, h, NodeRef(), Tensor());
  NodeRef direct = g.gruCell(h, x, cell.blockParams(g, 1, 3), false);
  g.forward();
  CHECK(r.state.val().toVector() == direct.val().toVector());
  CHECK(!r.context.valid());
}

TEST_CASE("an 8-block zero-weight cell maps zero state to zero state") {
  ExpressionGraph g(43);
  DeepTransitionCell cell;
  cell.blocks = 8;
  cell.inputDim = 3;
  cell.stateDim = 4;
  NodeRef x = g.constant(Shape({1, 3}), std::vector<Real>(3, (Real)0.9));
  NodeRef h = g.constant(Shape({1, 4}), std::vector<Real>(4, (Real)0));
  auto r = cell.step(g, x, h, NodeRef(), Tensor());
  for(auto& name : g.paramNames())
    g.paramValue(name).setZero();
  g.forward();
  for(int64_t i = 0; i < 4; ++i)
    CHECK(r.state.val().at(i) == 0);
}

TEST_CASE("decoder cell over a single source position uses that state as context") {
  ExpressionGraph g(47);
  Rng rng(47);
  DeepTransitionCell cell;
  cell.blocks = 8;
  cell.attentionSlot = 1;
  cell.inputDim = 3;
  cell.stateDim = 4;
  cell.attention = BahdanauAttention{"cell.att", 4, 5, 4, false};
  auto ev = randVec(1 * 1 * 5, rng);
  NodeRef x = g.constant(Shape({1, 3}), randVec(3, rng));
  NodeRef h = g.constant(Shape({1, 4}), randVec(4, rng));
  NodeRef enc = g.constant(Shape({1, 1, 5}), ev);
  Tensor mask(Shape({1, 1}));
  mask.fill(1);
  auto r = cell.step(g, x, h, enc, mask);
  g.forward();
  REQUIRE(r.context.valid());
  for(int64_t i = 0; i < 5; ++i)
    CHECK(r.context.val().at(i) == doctest::Approx((double)ev[(size_t)i]));
  CHECK(r.weights.val().at(0) == doctest::Approx(1.0));
}

TEST_CASE("attention slot without encoder context is an error") {
  ExpressionGraph g(1);
  DeepTransitionCell cell;
  cell.blocks = 2;
  cell.attentionSlot = 1;
  cell.inputDim = 2;
  cell.stateDim = 3;
  NodeRef x = g.constant(Shape({1, 2}), std::vector<Real>(2, (Real)0.1));
  NodeRef h = g.constant(Shape({1, 3}), std::vector<Real>(3, (Real)0.1));
  CHECK_THROWS_AS(cell.step(g, x, h, NodeRef(), Tensor()), ContractError);
}

TEST_CASE("deep cell state keeps one shape through all blocks and backprops") {
  ExpressionGraph g(53);
  Rng rng(53);
  auto xv = randVec(2 * 3, rng);
  auto hv = randVec(2 * 4, rng);
  auto ev = randVec(2 * 2 * 4, rng);
  auto build = [&](ExpressionGraph& gr) {
    DeepTransitionCell cell;
    cell.blocks = 4;
    cell.attentionSlot = 1;
    cell.inputDim = 3;
    cell.stateDim = 4;
    cell.layerNorm = true;
    cell.attention = BahdanauAttention{"cell.att", 4, 4, 4, false};
    NodeRef x = gr.constant(Shape({2, 3}), xv);
    NodeRef h = gr.constant(Shape({2, 4}), hv);
    NodeRef enc = gr.constant(Shape({2, 2, 4}), ev);
    Tensor mask(Shape({2, 2}));
    mask.fill(1);
    auto r = cell.step(gr, x, h, enc, mask);
    CHECK(r.state.shape == Shape({2, 4}));
    return scalarize(gr, r.state);
  };
  testing::BuildFn fn = build;
  fn(g);
  CHECK(testing::checkGradients(g, fn,
                                {"cell.b1.Wz", "cell.b1.Uh", "cell.b2.Wx", "cell.b3.Uz",
                                 "cell.b4.Uh", "cell.att.W", "cell.b1.lnGz"}) < 1e-4);
}

TEST_CASE("variational state mask is applied before every block") {
  ExpressionGraph g(59);
  DeepTransitionCell cell;
  cell.blocks = 2;
  cell.inputDim = 2;
  cell.stateDim = 3;
  NodeRef x = g.constant(Shape({1, 2}), std::vector<Real>{(Real)0.3, (Real)-0.2});
  NodeRef h = g.constant(Shape({1, 3}), std::vector<Real>{(Real)0.5, (Real)0.5, (Real)0.5});
  NodeRef zeroMask = g.constant(Shape({1, 3}), std::vector<Real>(3, (Real)0));
  auto dropped = cell.step(g, x, h, NodeRef(), Tensor(), zeroMask);
  NodeRef hZero = g.constant(Shape({1, 3}), std::vector<Real>(3, (Real)0));
  auto zeroed = cell.step(g, x, hZero, NodeRef(), Tensor(), zeroMask);
  g.forward();
  // masking the state to zero is the same as starting from a zero state
  CHECK(dropped.state.val().toVector() == zeroed.state.val().toVector());
}
