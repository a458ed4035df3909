#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "waveformer/model.hpp"
#include "waveformer/signal.hpp"

namespace waveformer {

struct TrainConfig {
  double lr = 4e-5;
  double weight_decay = 1e-4;
  std::size_t batch = 64;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 5;
  double clip_norm = 1.0;
  std::size_t early_stop_patience = 5;
  double early_stop_min_delta = 0.01;  // absolute accuracy fraction
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct AblationConfig {
  bool use_waveletconv = true;
  bool use_rope = true;

  ModelConfig apply(ModelConfig cfg) const {
    cfg.use_waveletconv = use_waveletconv;
    cfg.use_rope = use_rope;
    return cfg;
  }
};

// Linear warm-up from 0 to lr over warmup_epochs·steps_per_epoch steps, then
// constant. `step` is zero-based; the last warm-up step already uses lr.
double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch);

// Scales all gradients so their global L2 norm is at most max_norm. Returns the
// norm before clipping.
template <typename T>
double clip_grad_norm(std::span<const NamedTensor<T>> params, double max_norm);

// AdamW with decoupled weight decay: p ← p − lr·(m̂/(√v̂ + ε) + wd·p).
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedTensor<T>> params, double beta1, double beta2, double eps, double weight_decay);
  void step(double lr);
  void zero_grad();
  std::size_t steps() const { return t_; }

 private:
  std::vector<NamedTensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

struct MetricsReport {
  std::size_t samples = 0;
  double loss = 0;
  double accuracy = 0;
  double macro_f1 = 0;
  std::optional<double> auroc;  // undefined with fewer than two classes present
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t parameter_count = 0;
};

// One-vs-rest AUC from midranks; nullopt unless both classes are present.
std::optional<double> binary_auroc(std::span<const double> scores, const std::vector<bool>& positive);

// probs is samples × num_classes (rows of softmax scores).
MetricsReport compute_metrics(std::span<const int> labels, std::span<const double> probs, std::size_t num_classes);

template <typename T>
MetricsReport evaluate(const Model<T>& model, const WindowSet& data, std::span<const std::size_t> indices,
                       std::size_t batch = 64, const WeightedOps<T>* backend = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  std::string split;      // "train" or "val"
  double loss = 0;
  double accuracy = 0;
  double macro_f1 = 0;
  std::optional<double> auroc;
};

struct TrainResult {
  std::vector<EpochRecord> history;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0;
  bool stopped_early = false;
};

// Called after every epoch with the rows just appended.
using EpochCallback = std::function<void(const EpochRecord& train, const EpochRecord& val)>;

// Trains in place and leaves the model holding its best-validation parameters.
// Throws DivergenceError on a non-finite loss or gradient.
template <typename T>
TrainResult train(Model<T>& model, const WindowSet& data, const DatasetSplit& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history);

struct AblationRow {
  std::string variant;
  AblationConfig ablation;
  std::size_t parameters = 0;
  TrainResult training;
  MetricsReport test;
};

// Full, −WaveletConv and −RoPE under identical seeds and configs.
std::vector<AblationRow> ablation_run(const WindowSet& data, const DatasetSplit& split, const ModelConfig& model_cfg,
                                      const TrainConfig& train_cfg, std::uint64_t init_seed);

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows);

}  // namespace waveformer
