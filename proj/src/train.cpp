#include "mtk/train.h"

#include <atomic>
#include <chrono>
#include <cmath>
#include <ostream>
#include <thread>

namespace mtk {

AdamConfig adamDefaultsFor(const ModelConfig& config) {
  bool transformer =
      config.architecture == "transformer" || config.decoderKind == "transformer";
  AdamConfig c;
  if(transformer) {
    c.beta2 = Real(0.98);
    c.eps = Real(1e-9);
  }
  return c;
}

Tensor& Adam::moment(std::map<std::string, Tensor>& store, const std::string& name,
                     const Shape& shape) {
  auto it = store.find(name);
  if(it == store.end())
    it = store.emplace(name, Tensor(shape)).first;
  return it->second;
}

void Adam::updateTensor(const std::string& name, Tensor& value, const Tensor& grad, Real lr,
                        int64_t step) {
  if(!grad.allFinite())
    throw NumericError("non-finite gradient for parameter " + name + "; update aborted");
  Tensor& m = moment(m_, name, value.shape());
  Tensor& v = moment(v_, name, value.shape());
  Real b1 = cfg_.beta1, b2 = cfg_.beta2;
  Real corr1 = Real(1) - (Real)std::pow((double)b1, (double)step);
  Real corr2 = Real(1) - (Real)std::pow((double)b2, (double)step);
  for(int64_t i = 0; i < value.size(); ++i) {
    Real gval = grad.at(i);
    m.at(i) = b1 * m.at(i) + (Real(1) - b1) * gval;
    v.at(i) = b2 * v.at(i) + (Real(1) - b2) * gval * gval;
    Real mhat = m.at(i) / corr1;
    Real vhat = v.at(i) / corr2;
    value.at(i) -= lr * mhat / ((Real)std::sqrt((double)vhat) + cfg_.eps);
  }
}

void Adam::update(ExpressionGraph& g, Real lr) {
  // validate every gradient before touching any parameter
  for(auto& name : g.paramNames())
    if(!g.paramGrad(name).allFinite())
      throw NumericError("non-finite gradient for parameter " + name + "; update aborted");
  ++step_;
  for(auto& name : g.paramNames()) {
    updateTensor(name, g.paramValue(name), g.paramGrad(name), lr, step_);
    g.paramGrad(name).setZero();
  }
}

Real LrSchedule::operator()(int64_t step) const {
  if(step < 0)
    throw ContractError("negative lr step");
  if(step <= warmup)
    return base * (Real)step / (Real)warmup;
  return base * (Real)std::sqrt((double)warmup / (double)step);
}

void AveragedParameters::update(ExpressionGraph& g) {
  for(auto& name : g.paramNames()) {
    Tensor& p = g.paramValue(name);
    auto it = avg_.find(name);
    if(it == avg_.end())
      it = avg_.emplace(name, Tensor(p.shape())).first;  // starts at zero
    Tensor& a = it->second;
    for(int64_t i = 0; i < p.size(); ++i)
      a.at(i) = beta_ * a.at(i) + (Real(1) - beta_) * p.at(i);
  }
}

void AveragedParameters::applyTo(ExpressionGraph& g) const {
  for(auto& [name, a] : avg_)
    g.paramValue(name).copyFrom(a);
}

// --------------------------------------------------------- ParameterStore

void ParameterStore::init(ExpressionGraph& g) {
  for(auto& name : g.paramNames()) {
    auto slot = std::make_unique<Slot>();
    slot->value = g.paramValue(name).copy();
    slots_[name] = std::move(slot);
  }
}

void ParameterStore::read(const std::string& name, Tensor& dst) {
  Slot& s = *slots_.at(name);
  std::lock_guard<std::mutex> lock(s.mutex);
  dst.copyFrom(s.value);
}

void ParameterStore::write(const std::string& name, const Tensor& src) {
  Slot& s = *slots_.at(name);
  std::lock_guard<std::mutex> lock(s.mutex);
  s.value.copyFrom(src);
}

void ParameterStore::apply(const std::string& name, const std::function<void(Tensor&)>& fn) {
  Slot& s = *slots_.at(name);
  std::lock_guard<std::mutex> lock(s.mutex);
  fn(s.value);
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  for(auto& [name, slot] : slots_)
    out.push_back(name);
  return out;
}

// ------------------------------------------------------------ checkpoints

void saveCheckpoint(const std::string& path, const ModelConfig& config, ExpressionGraph& g,
                    Adam& adam, AveragedParameters& average, int64_t update, int64_t epoch,
                    int64_t batchIndex) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for(auto& name : g.paramNames())
    tensors.emplace_back(name, g.paramValue(name));
  for(auto& [name, t] : adam.firstMoments())
    tensors.emplace_back("adam.m." + name, t);
  for(auto& [name, t] : adam.secondMoments())
    tensors.emplace_back("adam.v." + name, t);
  for(auto& [name, t] : average.values())
    tensors.emplace_back("avg." + name, t);
  Tensor counters(Shape({4}), {(Real)update, (Real)epoch, (Real)batchIndex,
                               (Real)adam.step()});
  tensors.emplace_back("trainer.counters", counters);
  writeModelFile(path, config, tensors);
}

void loadCheckpoint(const std::string& path, ExpressionGraph& g, Adam& adam,
                    AveragedParameters& average, int64_t& update, int64_t& epoch,
                    int64_t& batchIndex) {
  ModelFile file = readModelFile(path);
  loadParams(file, g);
  adam.firstMoments().clear();
  adam.secondMoments().clear();
  average.values().clear();
  for(auto& [name, t] : file.tensors) {
    if(name.rfind("adam.m.", 0) == 0)
      adam.firstMoments()[name.substr(7)] = t.copy();
    else if(name.rfind("adam.v.", 0) == 0)
      adam.secondMoments()[name.substr(7)] = t.copy();
    else if(name.rfind("avg.", 0) == 0)
      average.values()[name.substr(4)] = t.copy();
  }
  const Tensor* counters = file.find("trainer.counters");
  if(!counters || counters->size() != 4)
    throw DataError("checkpoint lacks trainer counters: " + path);
  update = (int64_t)counters->at(0);
  epoch = (int64_t)counters->at(1);
  batchIndex = (int64_t)counters->at(2);
  adam.setStep((int64_t)counters->at(3));
}

// ------------------------------------------------------------- training

namespace {

uint64_t mixSeed(uint64_t seed, int64_t update, int worker) {
  uint64_t h = hash64("update");
  h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  h ^= (uint64_t)update * 0xbf58476d1ce4e5b9ull;
  h ^= (uint64_t)(worker + 1) * 0x94d049bb133111ebull;
  return h;
}

void copyParams(ExpressionGraph& from, ExpressionGraph& to) {
  for(auto& name : from.paramNames())
    to.paramValue(name).copyFrom(from.paramValue(name));
}

std::vector<Batch> epochBatches(const std::vector<Example>& data, const TrainOptions& opts,
                                int64_t epoch) {
  BatchOptions bo;
  bo.tokenBudget = opts.tokenBudget;
  bo.seed = opts.seed + (uint64_t)epoch;
  bo.shuffle = true;
  return makeBatches(data, bo);
}

void logLine(const TrainOptions& opts, int64_t update, int64_t epoch, double loss, Real lr,
             double wps) {
  if(!opts.log || opts.logEvery <= 0 || update % opts.logEvery != 0)
    return;
  (*opts.log) << "update=" << update << " epoch=" << epoch << " loss=" << loss
              << " lr=" << (double)lr << " wps=" << wps << "\n";
}

TrainResult trainSync(Model& model, const std::vector<Example>& data, ExpressionGraph& master,
                      Adam& adam, AveragedParameters& average, const TrainOptions& opts,
                      int64_t update, int64_t startEpoch, int64_t startBatch) {
  int w = opts.workers;
  std::vector<std::unique_ptr<ExpressionGraph>> replicas;
  std::vector<ExpressionGraph*> graphs = {&master};
  for(int i = 1; i < w; ++i) {
    replicas.push_back(std::make_unique<ExpressionGraph>(opts.seed));
    model.registerParams(*replicas.back());
    replicas.back()->clear();
    graphs.push_back(replicas.back().get());
  }

  TrainResult res;
  auto t0 = std::chrono::steady_clock::now();
  int64_t tokensSeen = 0;
  for(int64_t epoch = startEpoch; epoch < opts.epochs; ++epoch) {
    auto batches = epochBatches(data, opts, epoch);
    double epochLoss = 0;
    int64_t epochUpdates = 0;
    for(size_t idx = (epoch == startEpoch ? (size_t)startBatch : 0); idx < batches.size();) {
      int take = (int)std::min<size_t>((size_t)w, batches.size() - idx);
      std::vector<Real> tokens((size_t)take, 0);
      std::vector<double> losses((size_t)take, 0);
      std::vector<std::exception_ptr> errors((size_t)take);
      auto work = [&](int i) {
        try {
          ExpressionGraph& gi = *graphs[(size_t)i];
          gi.clear();
          gi.setSeed(mixSeed(opts.seed, update, i));
          if(i > 0)
            copyParams(master, gi);
          NodeRef loss = model.buildLoss(gi, batches[idx + (size_t)i], &tokens[(size_t)i]);
          gi.forward();
          gi.zeroGrads();
          gi.backward(loss);
          losses[(size_t)i] = (double)loss.val().at(0);
        } catch(...) {
          errors[(size_t)i] = std::current_exception();
        }
      };
      if(take == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for(int i = 0; i < take; ++i)
          pool.emplace_back(work, i);
        for(auto& t : pool)
          t.join();
      }
      for(int i = 0; i < take; ++i)
        if(errors[(size_t)i])
          std::rethrow_exception(errors[(size_t)i]);

      Real total = 0;
      for(auto t : tokens)
        total += t;
      // deterministic reduction: worker 0 first, then 1, 2, ...
      for(auto& name : master.paramNames()) {
        Tensor& gm = master.paramGrad(name);
        Real w0 = tokens[0] / total;
        for(int64_t j = 0; j < gm.size(); ++j)
          gm.at(j) *= w0;
        for(int i = 1; i < take; ++i) {
          const Tensor& gi = graphs[(size_t)i]->paramGrad(name);
          Real wi = tokens[(size_t)i] / total;
          for(int64_t j = 0; j < gm.size(); ++j)
            gm.at(j) += wi * gi.at(j);
        }
      }
      Real lr = opts.lr(adam.step() + 1);
      adam.update(master, lr);
      average.update(master);
      ++update;
      idx += (size_t)take;

      double batchLoss = 0;
      for(int i = 0; i < take; ++i)
        batchLoss += losses[(size_t)i] * (double)(tokens[(size_t)i] / total);
      epochLoss += batchLoss;
      ++epochUpdates;
      tokensSeen += (int64_t)total;
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      logLine(opts, update, epoch, batchLoss, lr, secs > 0 ? (double)tokensSeen / secs : 0);
      if(!opts.checkpointPath.empty() && opts.checkpointEvery > 0 &&
         update % opts.checkpointEvery == 0)
        saveCheckpoint(opts.checkpointPath, model.config, master, adam, average, update, epoch,
                       (int64_t)idx);
      if(opts.maxUpdates >= 0 && update >= opts.maxUpdates) {
        res.updates = update;
        res.epochs = epoch + 1;
        res.finalLoss = epochUpdates ? epochLoss / (double)epochUpdates : 0;
        return res;
      }
    }
    res.finalLoss = epochUpdates ? epochLoss / (double)epochUpdates : res.finalLoss;
    res.epochs = epoch + 1;
  }
  res.updates = update;
  return res;
}

TrainResult trainAsync(Model& model, const std::vector<Example>& data, ExpressionGraph& master,
                       Adam& adam, AveragedParameters& average, const TrainOptions& opts,
                       int64_t update, int64_t startEpoch, int64_t startBatch) {
  // one flat, epoch-major list of batches
  std::vector<Batch> batches;
  std::vector<int64_t> epochOf;
  for(int64_t epoch = startEpoch; epoch < opts.epochs; ++epoch) {
    auto eb = epochBatches(data, opts, epoch);
    size_t from = epoch == startEpoch ? (size_t)startBatch : 0;
    for(size_t i = from; i < eb.size(); ++i) {
      batches.push_back(std::move(eb[i]));
      epochOf.push_back(epoch);
    }
  }

  ParameterStore store;
  store.init(master);
  // pre-create all moments and averages so the maps never rehash under
  // concurrent per-tensor updates
  for(auto& name : master.paramNames()) {
    adam.firstMoments().try_emplace(name, Tensor(master.paramValue(name).shape()));
    adam.secondMoments().try_emplace(name, Tensor(master.paramValue(name).shape()));
  }
  for(auto& name : master.paramNames())
    average.values().try_emplace(name, Tensor(master.paramValue(name).shape()));

  std::atomic<size_t> nextBatch{0};
  std::atomic<int64_t> sharedStep{adam.step()};
  std::atomic<int64_t> tokensSeen{0};
  std::mutex metricsMutex;
  double lastLoss = 0;
  std::vector<std::exception_ptr> errors((size_t)opts.workers);
  auto t0 = std::chrono::steady_clock::now();

  auto worker = [&](int wi) {
    try {
      ExpressionGraph g(opts.seed);
      model.registerParams(g);
      for(;;) {
        size_t idx = nextBatch.fetch_add(1);
        if(idx >= batches.size())
          return;
        if(opts.maxUpdates >= 0 && (int64_t)idx + update >= opts.maxUpdates)
          return;
        g.clear();
        g.setSeed(mixSeed(opts.seed, (int64_t)idx + update, 0));
        Real tc = 0;
        NodeRef loss = model.buildLoss(g, batches[idx], &tc);
        for(auto& name : g.paramNames())
          store.read(name, g.paramValue(name));
        g.forward();
        g.zeroGrads();
        g.backward(loss);
        int64_t step = ++sharedStep;
        Real lr = opts.lr(step);
        for(auto& name : g.paramNames())
          store.apply(name, [&](Tensor& value) {
            adam.updateTensor(name, value, g.paramGrad(name), lr, step);
            auto& a = average.values().at(name);
            for(int64_t j = 0; j < value.size(); ++j)
              a.at(j) = average.beta() * a.at(j) + (Real(1) - average.beta()) * value.at(j);
          });
        tokensSeen += (int64_t)tc;
        {
          std::lock_guard<std::mutex> lock(metricsMutex);
          lastLoss = (double)loss.val().at(0);
          double secs =
              std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
          logLine(opts, step, epochOf[idx], lastLoss, lr,
                  secs > 0 ? (double)tokensSeen.load() / secs : 0);
        }
      }
    } catch(...) {
      errors[(size_t)wi] = std::current_exception();
    }
  };

  if(opts.workers == 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for(int i = 0; i < opts.workers; ++i)
      pool.emplace_back(worker, i);
    for(auto& t : pool)
      t.join();
  }
  for(auto& e : errors)
    if(e)
      std::rethrow_exception(e);

  for(auto& name : master.paramNames())
    store.read(name, master.paramValue(name));
  adam.setStep(sharedStep.load());

  TrainResult res;
  res.updates = sharedStep.load();
  res.epochs = opts.epochs;
  res.finalLoss = lastLoss;
  if(!opts.checkpointPath.empty())
    saveCheckpoint(opts.checkpointPath, model.config, master, adam, average, res.updates,
                   opts.epochs, 0);
  return res;
}

}  // namespace

TrainResult train(Model& model, const std::vector<Example>& data, ExpressionGraph& master,
                  Adam& adam, AveragedParameters& average, const TrainOptions& opts) {
  if(opts.workers < 1)
    throw ContractError("training needs at least one worker");
  model.registerParams(master);
  master.clear();
  int64_t update = 0, startEpoch = 0, startBatch = 0;
  if(!opts.resumeFrom.empty())
    loadCheckpoint(opts.resumeFrom, master, adam, average, update, startEpoch, startBatch);
  if(opts.async)
    return trainAsync(model, data, master, adam, average, opts, update, startEpoch, startBatch);
  return trainSync(model, data, master, adam, average, opts, update, startEpoch, startBatch);
}

}  // namespace mtk
