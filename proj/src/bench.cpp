#include "waveformer/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

#include "waveformer/errors.hpp"
#include "waveformer/kernels.hpp"
#include "waveformer/quant.hpp"

namespace waveformer {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Writing "5" to clear_refs resets VmHWM to the current RSS.
void reset_peak_resident() {
  std::ofstream f("/proc/self/clear_refs");
  if (f) f << "5";
}

class ThreadScope {
 public:
  explicit ThreadScope(std::size_t n) : previous_(kernels::num_threads()) { kernels::set_num_threads(n); }
  ~ThreadScope() { kernels::set_num_threads(previous_); }

 private:
  std::size_t previous_;
};

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

LatencyStats latency_stats(std::vector<double> samples) {
  if (samples.empty()) throw ParameterError("latency_stats: no samples");
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  LatencyStats s;
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  s.median = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  s.p95 = samples[std::max<std::size_t>(rank, 1) - 1];
  return s;
}

std::string cpu_model_name() {
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line))
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(line.find_first_not_of(' ', colon + 1));
    }
  return "unknown";
}

std::optional<double> peak_resident_mb() {
  std::ifstream f("/proc/self/status");
  std::string line;
  while (std::getline(f, line))
    if (line.rfind("VmHWM:", 0) == 0) return std::stod(line.substr(6)) / 1024.0;  // kB
  return std::nullopt;
}

double timer_resolution_ms() {
  double best = 1e9;
  for (int i = 0; i < 64; ++i) {
    const auto t0 = Clock::now();
    auto t1 = Clock::now();
    while (t1 == t0) t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

BenchReport run_benchmark(const std::string& precision, const BenchOptions& opt, const std::function<void()>& step) {
  if (opt.iterations == 0) throw ParameterError("benchmark: iterations must be positive");
  if (opt.batch == 0 || opt.threads == 0) throw ParameterError("benchmark: batch and threads must be positive");
  ThreadScope threads(opt.threads);
  BenchReport r;
  r.precision = precision;
  r.iterations = opt.iterations;
  r.warmup = opt.warmup;
  r.batch = opt.batch;
  r.threads = opt.threads;
  r.cpu = cpu_model_name();
  r.timer_resolution_ms = timer_resolution_ms();

  for (std::size_t i = 0; i < opt.warmup; ++i) step();
  reset_peak_resident();
  std::vector<double> times;
  times.reserve(opt.iterations);
  for (std::size_t i = 0; i < opt.iterations; ++i) {
    const auto t0 = Clock::now();
    step();
    times.push_back(ms_since(t0));
  }
  const auto stats = latency_stats(times);
  r.mean_ms = stats.mean;
  r.median_ms = stats.median;
  r.p95_ms = stats.p95;
  r.qps = stats.mean > 0 ? 1000.0 * static_cast<double>(opt.batch) / stats.mean : 0.0;
  r.peak_mb = peak_resident_mb().value_or(0.0);
  if (r.timer_resolution_ms > 0.01 * r.mean_ms)
    r.warnings.push_back("timer resolution " + fixed(r.timer_resolution_ms, 6) + " ms exceeds 1% of mean latency");
  if (opt.threads != 1) r.warnings.push_back("multi-threaded run (" + std::to_string(opt.threads) + " threads)");
  return r;
}

BenchReport benchmark_model(const Model<float>& model, const std::string& precision, const BenchOptions& opt,
                            const Tensor<float>& input) {
  if (input.rank() != 3 || input.dim(0) != opt.batch)
    throw DimensionError("benchmark: input must be " + std::to_string(opt.batch) + "×C×T");
  std::optional<Int8Backend> int8;
  if (precision == "int8")
    int8.emplace(model.parameters());
  else if (precision != "fp32")
    throw ParameterError("benchmark: unknown precision '" + precision + "'");
  ForwardContext<float> ctx;
  if (int8) ctx.backend = &*int8;
  NoGradGuard no_grad;
  return run_benchmark(precision, opt, [&] { model.forward(input, ctx); });
}

void write_bench_csv(std::ostream& out, std::span<const BenchReport> reports) {
  out << "precision,iters,warmup,mean_ms,median_ms,p95_ms,qps,peak_mb,cpu,threads\n";
  for (const auto& r : reports) {
    std::string cpu = r.cpu;
    std::replace(cpu.begin(), cpu.end(), ',', ' ');
    out << r.precision << ',' << r.iterations << ',' << r.warmup << ',' << fixed(r.mean_ms, 4) << ','
        << fixed(r.median_ms, 4) << ',' << fixed(r.p95_ms, 4) << ',' << fixed(r.qps, 2) << ',' << fixed(r.peak_mb, 1)
        << ',' << cpu << ',' << r.threads << '\n';
  }
}

void write_bench_text(std::ostream& out, std::span<const BenchReport> reports) {
  if (!reports.empty()) out << "cpu: " << reports.front().cpu << "\n";
  for (const auto& r : reports) {
    out << r.precision << ": mean " << fixed(r.mean_ms, 3) << " ms, median " << fixed(r.median_ms, 3) << " ms, p95 "
        << fixed(r.p95_ms, 3) << " ms (p95/median " << fixed(r.median_ms > 0 ? r.p95_ms / r.median_ms : 0, 2)
        << "), " << fixed(r.qps, 1) << " QPS, peak " << fixed(r.peak_mb, 1) << " MB, batch " << r.batch << ", "
        << r.threads << " thread(s), " << r.iterations << " iters after " << r.warmup << " warm-up\n";
    for (const auto& w : r.warnings) out << "  warning: " << w << "\n";
  }
  out << "reference (published, different hardware): fp32 10.23 ms / 97.8 QPS / 84.9 MB; "
         "int8 6.75 ms / 148.1 QPS / 65.2 MB\n";
}

}  // namespace waveformer
