#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mtk/train.h"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>
#include <unistd.h>

using namespace mtk;

namespace {

ModelConfig copyTaskConfig() {
  ModelConfig c;
  c.architecture = "s2s-shallow";
  c.sourceVocab = 7;
  c.targetVocab = 7;
  c.embDim = 4;
  c.stateDim = 5;
  c.dropout = Real(0);
  return c;
}

std::vector<Example> copyTaskData(size_t n) {
  std::vector<Example> out;
  for(size_t i = 0; i < n; ++i) {
    size_t len = 2 + i % 3;
    std::vector<int32_t> toks;
    for(size_t j = 0; j < len; ++j)
      toks.push_back((int32_t)(2 + (i + j) % 5));
    Example ex;
    ex.sources = {toks};
    ex.target = toks;
    ex.hasTarget = true;
    ex.id = i;
    out.push_back(ex);
  }
  return out;
}

std::string tempPath(const std::string& tag) {
  return "/tmp/mtk_train_" + tag + "_" + std::to_string(::getpid()) + ".bin";
}

bool sameParams(ExpressionGraph& a, ExpressionGraph& b) {
  if(a.paramNames() != b.paramNames())
    return false;
  for(auto& name : a.paramNames()) {
    const Tensor& ta = a.paramValue(name);
    const Tensor& tb = b.paramValue(name);
    if(ta.shape() != tb.shape())
      return false;
    for(int64_t i = 0; i < ta.size(); ++i)
      if(ta.at(i) != tb.at(i))
        return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adam single-tensor updates match the hand-computed values") {
  Adam adam;  // beta1 0.9, beta2 0.999, eps 1e-8
  Tensor theta(Shape({1}), std::vector<Real>{0});
  Tensor grad(Shape({1}), std::vector<Real>{1});
  adam.updateTensor("p", theta, grad, Real(0.1), 1);
  // m=0.1, v=0.001; bias-corrected mhat=1, vhat=1 -> step of -lr
  CHECK(theta.at(0) == doctest::Approx(-0.1).epsilon(1e-6));
  adam.updateTensor("p", theta, grad, Real(0.1), 2);
  CHECK(theta.at(0) == doctest::Approx(-0.2).epsilon(1e-6));
}

TEST_CASE("adam with zero gradients leaves parameters untouched") {
  Adam adam;
  Tensor theta(Shape({2}), std::vector<Real>{Real(0.5), Real(-0.25)});
  Tensor grad(Shape({2}), std::vector<Real>{0, 0});
  adam.updateTensor("p", theta, grad, Real(0.1), 1);
  CHECK(theta.at(0) == Real(0.5));
  CHECK(theta.at(1) == Real(-0.25));
}

TEST_CASE("adam over a graph: sum loss gives unit gradients") {
  ExpressionGraph g(1);
  NodeRef p = g.param("p", Shape({2}), inits::zeros());
  NodeRef loss = g.reduce(ReduceOp::Sum, g.reshape(p, Shape({1, 2})), 1);
  g.forward();
  g.zeroGrads();
  g.backward(loss);
  Adam adam;
  adam.update(g, Real(0.1));
  CHECK(adam.step() == 1);
  CHECK(g.paramValue("p").at(0) == doctest::Approx(-0.1).epsilon(1e-6));
  CHECK(g.paramValue("p").at(1) == doctest::Approx(-0.1).epsilon(1e-6));
  // gradients are consumed by the update
  CHECK(g.paramGrad("p").at(0) == Real(0));
}

TEST_CASE("non-finite gradients abort the whole update") {
  ExpressionGraph g(1);
  g.param("p", Shape({2}), inits::constant(Real(0.5)));
  g.param("q", Shape({2}), inits::constant(Real(0.5)));
  g.zeroGrads();
  g.paramGrad("p").at(0) = Real(1);
  g.paramGrad("q").at(1) = std::numeric_limits<Real>::infinity();
  Adam adam;
  CHECK_THROWS_AS(adam.update(g, Real(0.1)), NumericError);
  CHECK(adam.step() == 0);
  CHECK(g.paramValue("p").at(0) == Real(0.5));  // p untouched despite finite grad
}

TEST_CASE("learning-rate schedule hits its closed-form values") {
  LrSchedule s;  // base 0.0003, warmup 16000
  CHECK(s(0) == Real(0));
  CHECK(s(16000) == doctest::Approx(0.0003).epsilon(1e-9));
  CHECK(s(64000) == doctest::Approx(0.00015).epsilon(1e-9));
  CHECK(s(8000) == doctest::Approx(0.00015).epsilon(1e-9));
  // continuous at the warmup boundary, rising before it, falling after it
  CHECK(std::abs((double)s(16001) - (double)s(16000)) < 1e-7);
  CHECK(s(100) < s(200));
  CHECK(s(32000) < s(16000));
}

TEST_CASE("exponential averaging follows the geometric decay from zero") {
  ExpressionGraph g(1);
  g.param("p", Shape({3}), inits::constant(Real(2)));

  SUBCASE("beta 0 copies the parameters after one step") {
    AveragedParameters avg(Real(0));
    avg.update(g);
    for(int64_t i = 0; i < 3; ++i)
      CHECK(avg.values().at("p").at(i) == Real(2));
  }
  SUBCASE("constant parameters converge like 1 - beta^n") {
    AveragedParameters avg(Real(0.999));
    for(int i = 0; i < 1000; ++i)
      avg.update(g);
    double expected = 2.0 * (1.0 - std::pow(0.999, 1000));
    for(int64_t i = 0; i < 3; ++i)
      CHECK(avg.values().at("p").at(i) == doctest::Approx(expected).epsilon(1e-4));
  }
  SUBCASE("applyTo overwrites the graph parameters") {
    AveragedParameters avg(Real(0));
    avg.update(g);
    avg.values().at("p").at(0) = Real(7);
    avg.applyTo(g);
    CHECK(g.paramValue("p").at(0) == Real(7));
  }
}

TEST_CASE("synchronous training is bitwise deterministic") {
  auto data = copyTaskData(24);
  Model model = buildModel(copyTaskConfig());
  TrainOptions opts;
  opts.workers = 1;
  opts.tokenBudget = 24;
  opts.seed = 5;
  opts.epochs = 100;
  opts.maxUpdates = 15;

  ExpressionGraph g1(opts.seed), g2(opts.seed);
  Adam a1, a2;
  AveragedParameters v1, v2;
  TrainResult r1 = train(model, data, g1, a1, v1, opts);
  TrainResult r2 = train(model, data, g2, a2, v2, opts);
  CHECK(r1.updates == 15);
  CHECK(r1.finalLoss == r2.finalLoss);
  CHECK(sameParams(g1, g2));
}

TEST_CASE("multi-worker updates equal a serial weighted-gradient reference") {
  auto data = copyTaskData(24);
  ModelConfig cfg = copyTaskConfig();
  Model model = buildModel(cfg);
  TrainOptions opts;
  opts.workers = 4;
  opts.tokenBudget = 24;
  opts.seed = 9;
  opts.epochs = 100;
  opts.maxUpdates = 6;

  ExpressionGraph gw(opts.seed);
  Adam aw;
  AveragedParameters vw;
  train(model, data, gw, aw, vw, opts);

  // serial reference: same batches, same grouping, gradients combined as
  // sum_i tokens_i/total * grad_i in worker order on a single graph
  ExpressionGraph gr(opts.seed);
  model.registerParams(gr);
  gr.clear();
  Adam ar;
  int64_t update = 0;
  for(int64_t epoch = 0; epoch < opts.epochs && update < opts.maxUpdates; ++epoch) {
    BatchOptions bo;
    bo.tokenBudget = opts.tokenBudget;
    bo.seed = opts.seed + (uint64_t)epoch;
    auto batches = makeBatches(data, bo);
    for(size_t idx = 0; idx < batches.size() && update < opts.maxUpdates;) {
      int take = (int)std::min<size_t>(4, batches.size() - idx);
      std::vector<std::map<std::string, Tensor>> grads((size_t)take);
      std::vector<Real> tokens((size_t)take);
      for(int i = 0; i < take; ++i) {
        gr.clear();
        NodeRef loss = model.buildLoss(gr, batches[idx + (size_t)i], &tokens[(size_t)i]);
        gr.forward();
        gr.zeroGrads();
        gr.backward(loss);
        for(auto& name : gr.paramNames())
          grads[(size_t)i].emplace(name, gr.paramGrad(name).copy());
      }
      Real total = 0;
      for(auto t : tokens)
        total += t;
      for(auto& name : gr.paramNames()) {
        Tensor& gm = gr.paramGrad(name);
        gm.copyFrom(grads[0].at(name));
        Real w0 = tokens[0] / total;
        for(int64_t j = 0; j < gm.size(); ++j)
          gm.at(j) *= w0;
        for(int i = 1; i < take; ++i) {
          Real wi = tokens[(size_t)i] / total;
          const Tensor& gi = grads[(size_t)i].at(name);
          for(int64_t j = 0; j < gm.size(); ++j)
            gm.at(j) += wi * gi.at(j);
        }
      }
      ar.update(gr, opts.lr(ar.step() + 1));
      ++update;
      idx += (size_t)take;
    }
  }

  for(auto& name : gw.paramNames()) {
    const Tensor& a = gw.paramValue(name);
    const Tensor& b = gr.paramValue(name);
    for(int64_t i = 0; i < a.size(); ++i)
      CHECK(a.at(i) == doctest::Approx(b.at(i)).epsilon(1e-6));
  }
}

TEST_CASE("checkpoint and resume reproduce an uninterrupted run bitwise") {
  auto data = copyTaskData(24);
  Model model = buildModel(copyTaskConfig());
  std::string ckpt = tempPath("ckpt");

  TrainOptions base;
  base.workers = 1;
  base.tokenBudget = 24;
  base.seed = 3;
  base.epochs = 100;

  // uninterrupted: 20 updates
  ExpressionGraph gFull(base.seed);
  Adam aFull;
  AveragedParameters vFull;
  TrainOptions full = base;
  full.maxUpdates = 20;
  train(model, data, gFull, aFull, vFull, full);

  // interrupted: 10 updates, checkpoint, fresh everything, resume to 20
  ExpressionGraph gHalf(base.seed);
  Adam aHalf;
  AveragedParameters vHalf;
  TrainOptions half = base;
  half.maxUpdates = 10;
  half.checkpointPath = ckpt;
  half.checkpointEvery = 10;
  train(model, data, gHalf, aHalf, vHalf, half);

  ExpressionGraph gRes(base.seed + 77);  // different init seed: checkpoint must win
  Adam aRes;
  AveragedParameters vRes;
  TrainOptions rest = base;
  rest.maxUpdates = 20;
  rest.resumeFrom = ckpt;
  TrainResult rr = train(model, data, gRes, aRes, vRes, rest);
  CHECK(rr.updates == 20);
  CHECK(sameParams(gFull, gRes));
  for(auto& [name, t] : vFull.values()) {
    const Tensor& u = vRes.values().at(name);
    for(int64_t i = 0; i < t.size(); ++i)
      CHECK(t.at(i) == u.at(i));
  }
  std::remove(ckpt.c_str());
}

TEST_CASE("training log lines carry update, epoch, loss, lr and wps") {
  auto data = copyTaskData(12);
  Model model = buildModel(copyTaskConfig());
  std::ostringstream log;
  TrainOptions opts;
  opts.workers = 1;
  opts.tokenBudget = 24;
  opts.seed = 2;
  opts.epochs = 1;
  opts.maxUpdates = 3;
  opts.logEvery = 1;
  opts.log = &log;
  ExpressionGraph g(opts.seed);
  Adam adam;
  AveragedParameters avg;
  train(model, data, g, adam, avg, opts);
  std::string text = log.str();
  CHECK(text.rfind("update=1 epoch=0 loss=", 0) == 0);
  CHECK(text.find(" lr=") != std::string::npos);
  CHECK(text.find(" wps=") != std::string::npos);
  CHECK(text.find("update=3 ") != std::string::npos);
}

TEST_CASE("training drives the copy-task loss down") {
  auto data = copyTaskData(24);
  Model model = buildModel(copyTaskConfig());
  TrainOptions opts;
  opts.workers = 1;
  opts.tokenBudget = 24;
  opts.seed = 4;
  opts.epochs = 100;
  opts.lr.base = Real(0.01);
  opts.lr.warmup = 10;

  TrainOptions shortOpts = opts;
  shortOpts.maxUpdates = 2;
  ExpressionGraph gShort(opts.seed);
  Adam aShort;
  AveragedParameters vShort;
  TrainResult early = train(model, data, gShort, aShort, vShort, shortOpts);

  TrainOptions longOpts = opts;
  longOpts.maxUpdates = 400;
  ExpressionGraph gLong(opts.seed);
  Adam aLong;
  AveragedParameters vLong;
  TrainResult late = train(model, data, gLong, aLong, vLong, longOpts);

  CHECK(std::isfinite(late.finalLoss));
  CHECK(late.finalLoss < 0.5 * early.finalLoss);
}

TEST_CASE("asynchronous single-worker training equals synchronous") {
  auto data = copyTaskData(24);
  Model model = buildModel(copyTaskConfig());
  TrainOptions opts;
  opts.workers = 1;
  opts.tokenBudget = 24;
  opts.seed = 6;
  opts.epochs = 2;

  ExpressionGraph gSync(opts.seed);
  Adam aSync;
  AveragedParameters vSync;
  TrainOptions sync = opts;
  sync.async = false;
  train(model, data, gSync, aSync, vSync, sync);

  ExpressionGraph gAsync(opts.seed);
  Adam aAsync;
  AveragedParameters vAsync;
  TrainOptions async = opts;
  async.async = true;
  train(model, data, gAsync, aAsync, vAsync, async);

  CHECK(sameParams(gSync, gAsync));
}

TEST_CASE("asynchronous multi-worker training converges to finite weights") {
  auto data = copyTaskData(24);
  Model model = buildModel(copyTaskConfig());
  TrainOptions opts;
  opts.workers = 4;
  opts.async = true;
  opts.tokenBudget = 24;
  opts.seed = 8;
  opts.epochs = 4;
  opts.lr.base = Real(0.01);
  opts.lr.warmup = 10;
  ExpressionGraph g(opts.seed);
  Adam adam;
  AveragedParameters avg;
  TrainResult r = train(model, data, g, adam, avg, opts);
  CHECK(r.updates > 0);
  CHECK(std::isfinite(r.finalLoss));
  for(auto& name : g.paramNames())
    CHECK(g.paramValue(name).allFinite());
}

TEST_CASE("parameter store updates are whole-tensor atomic") {
  ExpressionGraph g(1);
  g.param("p", Shape({64}), inits::zeros());
  ParameterStore store;
  store.init(g);

  std::atomic<bool> torn{false};
  std::atomic<bool> stop{false};
  auto writer = [&](Real base) {
    Tensor t(Shape({64}));
    for(int iter = 0; iter < 400; ++iter) {
      Real v = base + (Real)iter;
      for(int64_t i = 0; i < 64; ++i)
        t.at(i) = v;
      store.write("p", t);
    }
  };
  std::thread auditor([&] {
    Tensor seen(Shape({64}));
    while(!stop.load()) {
      store.apply("p", [&](Tensor& v) { seen.copyFrom(v); });
      for(int64_t i = 1; i < 64; ++i)
        if(seen.at(i) != seen.at(0))
          torn = true;
    }
  });
  std::thread w1(writer, Real(1000));
  std::thread w2(writer, Real(5000));
  w1.join();
  w2.join();
  stop = true;
  auditor.join();
  CHECK(!torn.load());
}
