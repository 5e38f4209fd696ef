#pragma once

#include "mtk/serialize.h"

#include <iosfwd>
#include <mutex>

namespace mtk {

struct AdamConfig {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
};

// Transformer-family models use the Vaswani constants, recurrent models
// the classic ones.
AdamConfig adamDefaultsFor(const ModelConfig& config);

// Standard Adam with bias correction over a graph's parameters. Keeps one
// moment pair per parameter; refuses non-finite gradients.
class Adam {
public:
  explicit Adam(AdamConfig config = AdamConfig()) : cfg_(config) {}

  // Applies one update from the accumulated gradients, then zeroes them.
  void update(ExpressionGraph& g, Real lr);
  // Single-tensor variant for asynchronous training (step passed in).
  void updateTensor(const std::string& name, Tensor& value, const Tensor& grad, Real lr,
                    int64_t step);

  int64_t step() const { return step_; }
  const AdamConfig& config() const { return cfg_; }

  // checkpoint plumbing
  std::map<std::string, Tensor>& firstMoments() { return m_; }
  std::map<std::string, Tensor>& secondMoments() { return v_; }
  void setStep(int64_t s) { step_ = s; }

private:
  Tensor& moment(std::map<std::string, Tensor>& store, const std::string& name,
                 const Shape& shape);
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// base * step / warmup while warming up, then base * sqrt(warmup / step).
struct LrSchedule {
  Real base = Real(0.0003);
  int64_t warmup = 16000;
  Real operator()(int64_t step) const;
};

// Exponentially averaged shadow copy of all parameters (starts at zero,
// never feeds back into training).
class AveragedParameters {
public:
  explicit AveragedParameters(Real beta = Real(0.9999)) : beta_(beta) {}

  void update(ExpressionGraph& g);  // avg <- beta*avg + (1-beta)*params
  void applyTo(ExpressionGraph& g) const;  // overwrite graph params with avg
  bool empty() const { return avg_.empty(); }

  Real beta() const { return beta_; }
  std::map<std::string, Tensor>& values() { return avg_; }

private:
  Real beta_;
  std::map<std::string, Tensor> avg_;
};

struct TrainOptions {
  int workers = 1;
  bool async = false;
  int64_t tokenBudget = 256;
  uint64_t seed = 1;
  int64_t epochs = 1;
  int64_t maxUpdates = -1;  // stop early when >= 0
  LrSchedule lr;
  Real averageBeta = Real(0.9999);
  std::string checkpointPath;  // empty = no checkpoints
  int64_t checkpointEvery = 0;
  std::string resumeFrom;
  int64_t logEvery = 0;
  std::ostream* log = nullptr;
};

struct TrainResult {
  int64_t updates = 0;
  int64_t epochs = 0;
  double finalLoss = 0;  // mean loss over the last epoch
};

// Trains the model's parameters inside `master` (which afterwards holds
// the final weights). Synchronous mode is bitwise deterministic for a
// fixed seed and worker count.
TrainResult train(Model& model, const std::vector<Example>& data, ExpressionGraph& master,
                  Adam& adam, AveragedParameters& average, const TrainOptions& opts);

void saveCheckpoint(const std::string& path, const ModelConfig& config, ExpressionGraph& g,
                    Adam& adam, AveragedParameters& average, int64_t update, int64_t epoch,
                    int64_t batchIndex);
// Restores params/optimizer/average; returns update, epoch, batchIndex.
void loadCheckpoint(const std::string& path, ExpressionGraph& g, Adam& adam,
                    AveragedParameters& average, int64_t& update, int64_t& epoch,
                    int64_t& batchIndex);

// Thread-safe parameter store for asynchronous training: whole-tensor
// atomicity, nothing finer.
class ParameterStore {
public:
  void init(ExpressionGraph& g);  // copy current params in
  void read(const std::string& name, Tensor& dst);
  void write(const std::string& name, const Tensor& src);
  // Locked read-modify-write used by async Adam updates.
  void apply(const std::string& name, const std::function<void(Tensor&)>& fn);
  std::vector<std::string> names() const;

private:
  struct Slot {
    Tensor value;
    std::mutex mutex;
  };
  std::map<std::string, std::unique_ptr<Slot>> slots_;
};

}  // namespace mtk
