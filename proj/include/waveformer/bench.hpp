#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "waveformer/model.hpp"

namespace waveformer {

struct BenchOptions {
  std::size_t iterations = 200;
  std::size_t warmup = 10;
  std::size_t batch = 1;
  std::size_t threads = 1;
};

struct BenchReport {
  std::string precision;
  std::size_t iterations = 0;
  std::size_t warmup = 0;
  std::size_t batch = 1;
  std::size_t threads = 1;
  double mean_ms = 0;  // per iteration, i.e. per batch
  double median_ms = 0;
  double p95_ms = 0;
  double qps = 0;      // samples per second
  double peak_mb = 0;  // resident high-water mark during the measured run
  std::string cpu;
  double timer_resolution_ms = 0;
  std::vector<std::string> warnings;
};

// Summary statistics of per-iteration wall times. p95 is the nearest-rank
// percentile.
struct LatencyStats {
  double mean = 0, median = 0, p95 = 0;
};
LatencyStats latency_stats(std::vector<double> samples_ms);

// Times `step` after the warm-up calls. Peak memory is reset first when the
// kernel allows it.
BenchReport run_benchmark(const std::string& precision, const BenchOptions& opt, const std::function<void()>& step);

// Batch-`opt.batch` forward passes of `model` on `input`; precision is "fp32"
// or "int8".
BenchReport benchmark_model(const Model<float>& model, const std::string& precision, const BenchOptions& opt,
                            const Tensor<float>& input);

std::string cpu_model_name();
std::optional<double> peak_resident_mb();
// Smallest observable steady_clock step.
double timer_resolution_ms();

void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports);
void write_bench_text(std::ostream& out, std::span<const BenchReport> reports);

}  // namespace waveformer
