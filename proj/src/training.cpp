#include "waveformer/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "waveformer/errors.hpp"
#include "waveformer/ops.hpp"

namespace waveformer {

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
  if (batch == 0 || epochs == 0) throw ConfigError("batch and epochs must be positive");
  if (warmup_epochs > epochs) throw ConfigError("warmup_epochs must not exceed epochs");
  if (!(clip_norm > 0)) throw ConfigError("clip_norm must be positive");
  if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  if (!(early_stop_min_delta >= 0)) throw ConfigError("early_stop_min_delta must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && eps > 0)) throw ConfigError("invalid AdamW constants");
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t steps_per_epoch) {
  const std::size_t warmup = cfg.warmup_epochs * steps_per_epoch;
  if (warmup == 0 || step + 1 >= warmup) return cfg.lr;
  return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
}

template <typename T>
double clip_grad_norm(std::span<const NamedTensor<T>> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& p : params) {
      auto t = p.tensor;
      if (t.has_grad())
        for (T& g : t.mutable_grad()) g = static_cast<T>(g * factor);
    }
  }
  return norm;
}

// ------------------------------------------------------------------- AdamW

template <typename T>
AdamW<T>::AdamW(std::vector<NamedTensor<T>> params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

template <typename T>
void AdamW<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const double decay = 1.0 - lr * weight_decay_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto t = params_[i].tensor;
    if (!t.has_grad()) continue;
    auto data = t.mutable_data();
    const auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      double p = static_cast<double>(data[j]) * decay;
      p -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      data[j] = static_cast<T>(p);
    }
  }
}

// ----------------------------------------------------------------- metrics

std::optional<double> binary_auroc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DimensionError("binary_auroc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (positive[order[k]]) {
        rank_sum += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1) / 2) / (np * static_cast<double>(n_neg));
}

MetricsReport compute_metrics(std::span<const int> labels, std::span<const double> probs, std::size_t num_classes) {
  if (num_classes == 0 || probs.size() != labels.size() * num_classes)
    throw DimensionError("compute_metrics: expected " + std::to_string(labels.size()) + "x" +
                         std::to_string(num_classes) + " scores");
  MetricsReport r;
  r.samples = labels.size();
  r.confusion.assign(num_classes, std::vector<std::size_t>(num_classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes)
      throw InputError("compute_metrics: label " + std::to_string(labels[i]) + " out of range");
    const auto row = probs.subspan(i * num_classes, num_classes);
    const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    ++r.confusion[static_cast<std::size_t>(labels[i])][pred];
    correct += pred == static_cast<std::size_t>(labels[i]);
  }
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());

  double f1_sum = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double tp = static_cast<double>(r.confusion[c][c]);
    double fp = 0, fn = 0;
    for (std::size_t o = 0; o < num_classes; ++o)
      if (o != c) {
        fp += static_cast<double>(r.confusion[o][c]);
        fn += static_cast<double>(r.confusion[c][o]);
      }
    if (tp > 0) f1_sum += 2 * tp / (2 * tp + fp + fn);
  }
  r.macro_f1 = f1_sum / static_cast<double>(num_classes);

  double auc_sum = 0;
  std::size_t auc_count = 0;
  std::vector<double> scores(labels.size());
  std::vector<bool> positive(labels.size());
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      scores[i] = probs[i * num_classes + c];
      positive[i] = static_cast<std::size_t>(labels[i]) == c;
    }
    if (auto auc = binary_auroc(scores, positive)) {
      auc_sum += *auc;
      ++auc_count;
    }
  }
  if (auc_count > 0) r.auroc = auc_sum / static_cast<double>(auc_count);
  return r;
}

namespace {

template <typename T>
void append_softmax(const Tensor<T>& logits, std::vector<double>& probs) {
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto row = logits.data().subspan(i * k, k);
    const double mx = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double z = 0;
    for (T v : row) z += std::exp(static_cast<double>(v) - mx);
    for (T v : row) probs.push_back(std::exp(static_cast<double>(v) - mx) / z);
  }
}

}  // namespace

template <typename T>
MetricsReport evaluate(const Model<T>& model, const WindowSet& data, std::span<const std::size_t> indices,
                       std::size_t batch, const WeightedOps<T>* backend) {
  if (batch == 0) throw ParameterError("evaluate: batch must be positive");
  NoGradGuard no_grad;
  ForwardContext<T> ctx;
  ctx.backend = backend;
  const std::size_t K = model.config().num_classes;
  std::vector<double> probs;
  std::vector<int> labels;
  double loss_sum = 0;
  for (std::size_t start = 0; start < indices.size(); start += batch) {
    const auto chunk = indices.subspan(start, std::min(batch, indices.size() - start));
    const auto b = make_batch<T>(data, chunk);
    const auto logits = model.forward(b.data, ctx);
    loss_sum += static_cast<double>(ops::cross_entropy(logits, b.labels).item()) * static_cast<double>(chunk.size());
    append_softmax(logits, probs);
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  auto report = compute_metrics(labels, probs, K);
  report.loss = indices.empty() ? 0.0 : loss_sum / static_cast<double>(indices.size());
  report.parameter_count = model.parameter_count();
  return report;
}

// ----------------------------------------------------------------- training

namespace {

template <typename T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <typename T>
[[noreturn]] void diverged(const Model<T>& model, double loss, std::size_t epoch, std::size_t step) {
  std::string where = "loss";
  for (const auto& p : model.parameters())
    if (!all_finite(p.tensor.data())) {
      where = p.name;
      break;
    }
  if (where == "loss")
    for (const auto& p : model.parameters())
      if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
        where = p.name + ".grad";
        break;
      }
  throw DivergenceError(where, "non-finite value in '" + where + "' at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(step) + " (loss " + std::to_string(loss) + ")");
}

EpochRecord record(std::size_t epoch, const char* split, const MetricsReport& m) {
  return {epoch, split, m.loss, m.accuracy, m.macro_f1, m.auroc};
}

}  // namespace

template <typename T>
TrainResult train(Model<T>& model, const WindowSet& data, const DatasetSplit& split, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  if (split.train.empty()) throw InputError("train: empty training split");
  if (split.validation.empty()) throw InputError("train: empty validation split");
  const auto& params = model.parameters();
  AdamW<T> opt(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  const std::size_t K = model.config().num_classes;
  const std::size_t steps_per_epoch = (split.train.size() + cfg.batch - 1) / cfg.batch;

  TrainResult result;
  std::vector<std::vector<T>> best;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  std::size_t step = 0;
  std::vector<std::size_t> order = split.train;
  Rng shuffle_rng(splitmix64(cfg.seed ^ 0x7368756666ULL));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    std::vector<double> probs;
    std::vector<int> labels;
    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch, ++step) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(cfg.batch, order.size() - start));
      const auto b = make_batch<T>(data, chunk);
      ForwardContext<T> ctx;
      ctx.training = true;
      ctx.seed = cfg.seed;
      ctx.step = step;
      opt.zero_grad();
      const auto logits = model.forward(b.data, ctx);
      const auto loss = ops::cross_entropy(logits, b.labels);
      const double loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) diverged(model, loss_value, epoch, step);
      loss.backward();
      const double norm = clip_grad_norm<T>(params, cfg.clip_norm);
      if (!std::isfinite(norm)) diverged(model, loss_value, epoch, step);
      opt.step(scheduled_lr(cfg, step, steps_per_epoch));
      loss_sum += loss_value * static_cast<double>(chunk.size());
      append_softmax(logits, probs);
      labels.insert(labels.end(), b.labels.begin(), b.labels.end());
    }
    auto train_metrics = compute_metrics(labels, probs, K);
    train_metrics.loss = loss_sum / static_cast<double>(order.size());
    const auto val = evaluate(model, data, split.validation, cfg.batch);
    result.history.push_back(record(epoch, "train", train_metrics));
    result.history.push_back(record(epoch, "val", val));
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(result.history[result.history.size() - 2], result.history.back());

    if (best.empty() || val.accuracy > best_acc + cfg.early_stop_min_delta) {
      best_acc = val.accuracy;
      result.best_epoch = epoch;
      best.clear();
      for (const auto& p : params) best.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    std::copy(best[i].begin(), best[i].end(), t.mutable_data().begin());
  }
  result.best_val_accuracy = best_acc;
  return result;
}

namespace {
std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}
}  // namespace

void write_history_csv(std::ostream& out, std::span<const EpochRecord> history) {
  out << "epoch,split,loss,acc,f1,auroc\n";
  for (const auto& r : history)
    out << r.epoch << ',' << r.split << ',' << format_metric(r.loss) << ',' << format_metric(r.accuracy) << ','
        << format_metric(r.macro_f1) << ',' << (r.auroc ? format_metric(*r.auroc) : "NA") << '\n';
}

std::vector<AblationRow> ablation_run(const WindowSet& data, const DatasetSplit& split, const ModelConfig& model_cfg,
                                      const TrainConfig& train_cfg, std::uint64_t init_seed) {
  const std::pair<const char*, AblationConfig> variants[] = {
      {"full", {true, true}}, {"-waveletconv", {false, true}}, {"-rope", {true, false}}};
  std::vector<AblationRow> rows;
  for (const auto& [name, ablation] : variants) {
    Model<float> model(ablation.apply(model_cfg), init_seed);
    AblationRow row;
    row.variant = name;
    row.ablation = ablation;
    row.parameters = model.parameter_count();
    row.training = train(model, data, split, train_cfg);
    row.test = evaluate(model, data, split.test, train_cfg.batch);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(std::ostream& out, std::span<const AblationRow> rows) {
  out << "variant,params,best_epoch,test_loss,test_acc,test_f1,test_auroc\n";
  for (const auto& r : rows)
    out << r.variant << ',' << r.parameters << ',' << r.training.best_epoch << ',' << format_metric(r.test.loss) << ','
        << format_metric(r.test.accuracy) << ',' << format_metric(r.test.macro_f1) << ','
        << (r.test.auroc ? format_metric(*r.test.auroc) : "NA") << '\n';
}

template double clip_grad_norm(std::span<const NamedTensor<float>>, double);
template double clip_grad_norm(std::span<const NamedTensor<double>>, double);
template class AdamW<float>;
template class AdamW<double>;
template MetricsReport evaluate(const Model<float>&, const WindowSet&, std::span<const std::size_t>, std::size_t,
                                const WeightedOps<float>*);
template MetricsReport evaluate(const Model<double>&, const WindowSet&, std::span<const std::size_t>, std::size_t,
                                const WeightedOps<double>*);
template TrainResult train(Model<float>&, const WindowSet&, const DatasetSplit&, const TrainConfig&,
                           const EpochCallback&);
template TrainResult train(Model<double>&, const WindowSet&, const DatasetSplit&, const TrainConfig&,
                           const EpochCallback&);

}  // namespace waveformer
