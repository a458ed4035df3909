#include "waveformer/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "waveformer/bench.hpp"
#include "waveformer/checkpoint.hpp"
#include "waveformer/config.hpp"
#include "waveformer/errors.hpp"
#include "waveformer/kernels.hpp"

namespace waveformer {

namespace {

constexpr double kPublishedParams = 3.10e6;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool synthetic = false;
  bool no_waveletconv = false;
  bool no_rope = false;
  std::string precision = "fp32";
  std::optional<std::size_t> threads;
  std::optional<std::size_t> iterations;
  std::optional<std::size_t> warmup;
  std::string out_path;
  std::string positional;  // data CSV, or checkpoint for eval/bench
  std::string data_path;   // eval: optional CSV after the checkpoint
};

// Defaults, then `base` text (a checkpoint's config), then --config, then flags.
RunConfig resolve_config(const Options& o, const std::string& base = {}) {
  RunConfig cfg;
  if (!base.empty()) {
    std::istringstream in(base);
    apply_config_text(cfg, in);
  }
  if (!o.config_path.empty()) apply_config_file(cfg, o.config_path);
  if (o.seed) cfg.seed = *o.seed;
  if (o.no_waveletconv) cfg.model.use_waveletconv = false;
  if (o.no_rope) cfg.model.use_rope = false;
  if (o.threads) cfg.bench.threads = *o.threads;
  if (o.iterations) cfg.bench.iterations = *o.iterations;
  if (o.warmup) cfg.bench.warmup = *o.warmup;
  cfg.validate();
  kernels::set_num_threads(cfg.bench.threads);
  return cfg;
}

WindowSet load_data(const RunConfig& cfg, bool synthetic, const std::string& path) {
  std::vector<Recording> recs;
  if (synthetic)
    recs = synth_gestures(cfg.synth_config()).recordings;
  else if (!path.empty())
    recs = load_csv(path, {cfg.model.num_classes, cfg.model.channels});
  else
    throw InputError("no data: pass a CSV path or --synthetic");
  auto set = make_windows(recs, static_cast<std::int64_t>(cfg.model.window), cfg.overlap);
  if (set.size() == 0) throw InputError("data produced no windows");
  return set;
}

std::string fixed(double v, int digits = 4) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::string auroc_text(const std::optional<double>& a) { return a ? fixed(*a) : "NA"; }

// Writes to --out when given, else to the fallback stream.
template <typename F>
void emit(const std::string& path, std::ostream& fallback, F&& write) {
  if (path.empty()) return write(fallback);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write " + path);
  write(f);
}

RunConfig config_from_checkpoint(const Options& o, const Checkpoint& ckpt) {
  const auto* c = find_entry(ckpt, "config");
  if (!c || c->dtype() != DType::kText) throw FormatError("checkpoint has no config entry");
  return resolve_config(o, std::get<std::string>(c->payload));
}

int cmd_train(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg, o.synthetic, o.positional);
  const auto split = stratified_split(data.labels, cfg.seed);
  Model<float> model(cfg.model, cfg.seed);
  out << "training " << model.parameter_count() << " parameters on " << split.train.size() << "/"
      << split.validation.size() << "/" << split.test.size() << " windows\n";
  const auto result = train(model, data, split, cfg.train_config(), [&](const EpochRecord& t, const EpochRecord& v) {
    out << "epoch " << t.epoch << "  train loss " << fixed(t.loss) << " acc " << fixed(t.accuracy) << "  val loss "
        << fixed(v.loss) << " acc " << fixed(v.accuracy) << std::endl;
  });
  const auto test = evaluate(model, data, split.test, cfg.train.batch);

  const std::filesystem::path ckpt_path = o.out_path.empty() ? "waveformer.wfck" : o.out_path;
  auto history_path = ckpt_path;
  history_path.replace_extension(".history.csv");
  save_checkpoint(ckpt_path, model_checkpoint(model, config_to_text(cfg)));
  emit(history_path.string(), out, [&](std::ostream& s) { write_history_csv(s, result.history); });
  out << "best epoch " << result.best_epoch << " (val acc " << fixed(result.best_val_accuracy) << ")"
      << (result.stopped_early ? ", stopped early" : "") << "\n"
      << "test loss " << fixed(test.loss) << " acc " << fixed(test.accuracy) << " f1 " << fixed(test.macro_f1)
      << " auroc " << auroc_text(test.auroc) << "\n"
      << "wrote " << ckpt_path.string() << " and " << history_path.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.positional.empty()) throw InputError("eval needs a checkpoint path");
  const auto ckpt = load_checkpoint(o.positional);
  const auto cfg = config_from_checkpoint(o, ckpt);
  Model<float> model(cfg.model, cfg.seed);
  load_parameters(model, ckpt);
  const auto data = load_data(cfg, o.synthetic, o.data_path);
  const auto split = stratified_split(data.labels, cfg.seed);
  const std::pair<const char*, const std::vector<std::size_t>*> parts[] = {
      {"train", &split.train}, {"val", &split.validation}, {"test", &split.test}};
  emit(o.out_path, out, [&](std::ostream& s) {
    s << "split,samples,loss,acc,f1,auroc\n";
    for (const auto& [name, idx] : parts) {
      const auto m = evaluate(model, data, *idx, cfg.train.batch);
      s << name << ',' << m.samples << ',' << fixed(m.loss, 6) << ',' << fixed(m.accuracy, 6) << ','
        << fixed(m.macro_f1, 6) << ',' << (m.auroc ? fixed(*m.auroc, 6) : "NA") << '\n';
    }
  });
  return kExitOk;
}

int cmd_bench(const Options& o, std::ostream& out) {
  std::optional<Checkpoint> ckpt;
  if (!o.positional.empty()) ckpt = load_checkpoint(o.positional);
  const auto cfg = ckpt ? config_from_checkpoint(o, *ckpt) : resolve_config(o);
  Model<float> model(cfg.model, cfg.seed);
  if (ckpt) load_parameters(model, *ckpt);

  // Real windows from the synthetic generator as benchmark input.
  auto synth = cfg.synth_config();
  synth.per_class = (cfg.bench.batch + synth.num_classes - 1) / synth.num_classes;
  const auto windows = make_windows(synth_gestures(synth).recordings, static_cast<std::int64_t>(cfg.model.window),
                                    cfg.overlap);
  std::vector<std::size_t> idx(cfg.bench.batch);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i % windows.size();
  const auto input = make_batch<float>(windows, idx).data;

  std::vector<std::string> precisions;
  if (o.precision == "both")
    precisions = {"fp32", "int8"};
  else if (o.precision == "fp32" || o.precision == "int8")
    precisions = {o.precision};
  else
    throw ConfigError("unknown precision '" + o.precision + "'");
  std::vector<BenchReport> reports;
  for (const auto& p : precisions) reports.push_back(benchmark_model(model, p, cfg.bench, input));
  write_bench_text(out, reports);
  if (reports.size() == 2 && reports[1].mean_ms > 0)
    out << "int8 speedup " << fixed(reports[0].mean_ms / reports[1].mean_ms, 2) << "x\n";
  if (!o.out_path.empty()) emit(o.out_path, out, [&](std::ostream& s) { write_bench_csv(s, reports); });
  return kExitOk;
}

int cmd_ablate(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto data = load_data(cfg, o.synthetic, o.positional);
  const auto split = stratified_split(data.labels, cfg.seed);
  const auto rows = ablation_run(data, split, cfg.model, cfg.train_config(), cfg.seed);
  for (const auto& r : rows)
    out << r.variant << ": params " << r.parameters << ", best epoch " << r.training.best_epoch << ", test acc "
        << fixed(r.test.accuracy) << ", f1 " << fixed(r.test.macro_f1) << ", auroc " << auroc_text(r.test.auroc)
        << "\n";
  emit(o.out_path, out, [&](std::ostream& s) { write_ablation_csv(s, rows); });
  return kExitOk;
}

int cmd_params(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const Model<float> model(cfg.model, cfg.seed);
  const double total = static_cast<double>(model.parameter_count());
  out << "total " << model.parameter_count() << "\n";
  for (const auto& [group, n] : model.parameter_breakdown()) out << "  " << group << " " << n << "\n";
  out << "published reference " << fixed(kPublishedParams / 1e6, 2) << "M; this config "
      << fixed(total / 1e6, 2) << "M (" << (total >= kPublishedParams ? "+" : "")
      << fixed(100.0 * (total - kPublishedParams) / kPublishedParams, 1) << "%)\n";
  return kExitOk;
}

int cmd_synth(const Options& o, std::ostream& out) {
  const auto cfg = resolve_config(o);
  const auto ds = synth_gestures(cfg.synth_config());
  emit(o.out_path, out, [&](std::ostream& s) { write_csv(s, ds.recordings); });
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"WaveFormer: wavelet front-end + rotary transformer for multichannel gesture signals", "waveformer"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config_path, "key = value run configuration file");
  app.add_option("--seed", o.seed, "seed for data, split, initialization and training");
  app.add_flag("--synthetic", o.synthetic, "use the built-in synthetic gesture generator");
  app.add_flag("--no-waveletconv", o.no_waveletconv, "drop the wavelet convolution block");
  app.add_flag("--no-rope", o.no_rope, "disable rotary position embedding");
  app.add_option("--precision", o.precision, "bench precision")->check(CLI::IsMember({"fp32", "int8", "both"}));
  app.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber);
  app.add_option("--iters", o.iterations, "bench: measured iterations")->check(CLI::PositiveNumber);
  app.add_option("--warmup", o.warmup, "bench: warm-up iterations");
  app.add_option("--out", o.out_path, "output path");

  auto* train_cmd = app.add_subcommand("train", "train and write checkpoint + history CSV");
  train_cmd->add_option("data", o.positional, "recordings CSV");
  auto* eval_cmd = app.add_subcommand("eval", "metrics of a checkpoint on each split");
  eval_cmd->add_option("checkpoint", o.positional)->required();
  eval_cmd->add_option("data", o.data_path, "recordings CSV");
  auto* bench_cmd = app.add_subcommand("bench", "latency / throughput / memory benchmark");
  bench_cmd->add_option("checkpoint", o.positional, "checkpoint (random init when omitted)");
  auto* ablate_cmd = app.add_subcommand("ablate", "full vs -waveletconv vs -rope");
  ablate_cmd->add_option("data", o.positional, "recordings CSV");
  auto* params_cmd = app.add_subcommand("params", "parameter count and breakdown");
  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic dataset as CSV");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(o, out);
    if (eval_cmd->parsed()) return cmd_eval(o, out);
    if (bench_cmd->parsed()) return cmd_bench(o, out);
    if (ablate_cmd->parsed()) return cmd_ablate(o, out);
    if (params_cmd->parsed()) return cmd_params(o, out);
    if (synth_cmd->parsed()) return cmd_synth(o, out);
    return kExitUsage;
  } catch (const DivergenceError& e) {
    err << "error: training diverged: " << e.what() << "\n";
    return kExitDiverged;
  } catch (const ChecksumError& e) {
    err << "error: " << e.what() << "\n";
    return kExitChecksum;
  } catch (const ShapeMismatchError& e) {
    err << "error: shape mismatch in '" << e.tensor() << "': " << e.what() << "\n";
    return kExitShape;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << "\n";
    return kExitShape;
  } catch (const std::invalid_argument& e) {  // config, input, parameter errors
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const waveformer::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace waveformer
