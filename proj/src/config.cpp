#include "waveformer/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "waveformer/errors.hpp"

namespace waveformer {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename V>
V parse_value(std::string_view key, std::string_view text) {
  V v{};
  if constexpr (std::is_same_v<V, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
  } else {
    // from_chars for double accepts "inf" and "nan".
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec == std::errc() && ptr == text.data() + text.size()) return v;
  }
  throw ConfigError("bad value '" + std::string(text) + "' for key '" + std::string(key) + "'");
}

template <typename V>
std::string format_value(V v) {
  if constexpr (std::is_same_v<V, bool>) {
    return v ? "true" : "false";
  } else {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Access>
Field field(std::string key, Access access) {
  using V = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
  return {key,
          [access, key](RunConfig& c, std::string_view text) { access(c) = parse_value<V>(key, text); },
          [access](const RunConfig& c) { return format_value(access(const_cast<RunConfig&>(c))); }};
}

#define WF_FIELD(key, expr) field(key, [](RunConfig& c) -> auto& { return c.expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      WF_FIELD("seed", seed),
      WF_FIELD("channels", model.channels),
      WF_FIELD("window", model.window),
      WF_FIELD("overlap", overlap),
      WF_FIELD("patch_width", model.patch_width),
      WF_FIELD("embed_dim", model.embed_dim),
      WF_FIELD("wavelet_levels", model.wavelet_levels),
      WF_FIELD("hf_dropout", model.hf_dropout),
      WF_FIELD("layers", model.layers),
      WF_FIELD("heads", model.heads),
      WF_FIELD("ffn_dim", model.ffn_dim),
      WF_FIELD("rope_base", model.rope_base),
      WF_FIELD("stochastic_depth", model.stochastic_depth),
      WF_FIELD("num_classes", model.num_classes),
      WF_FIELD("use_waveletconv", model.use_waveletconv),
      WF_FIELD("use_rope", model.use_rope),
      WF_FIELD("lr", train.lr),
      WF_FIELD("weight_decay", train.weight_decay),
      WF_FIELD("batch", train.batch),
      WF_FIELD("epochs", train.epochs),
      WF_FIELD("warmup_epochs", train.warmup_epochs),
      WF_FIELD("clip_norm", train.clip_norm),
      WF_FIELD("early_stop_patience", train.early_stop_patience),
      WF_FIELD("early_stop_min_delta", train.early_stop_min_delta),
      WF_FIELD("beta1", train.beta1),
      WF_FIELD("beta2", train.beta2),
      WF_FIELD("eps", train.eps),
      WF_FIELD("synth_per_class", synth.per_class),
      WF_FIELD("synth_length", synth.length),
      WF_FIELD("synth_base_frequency", synth.base_frequency),
      WF_FIELD("synth_frequency_ratio", synth.frequency_ratio),
      WF_FIELD("synth_frequency_jitter", synth.frequency_jitter),
      WF_FIELD("synth_frequency_confusion", synth.frequency_confusion),
      WF_FIELD("synth_active_channels", synth.active_channels),
      WF_FIELD("synth_snr_db", synth.snr_db),
      WF_FIELD("bench_iterations", bench.iterations),
      WF_FIELD("bench_warmup", bench.warmup),
      WF_FIELD("bench_batch", bench.batch),
      WF_FIELD("threads", bench.threads),
  };
  return f;
}

#undef WF_FIELD

}  // namespace

SynthConfig RunConfig::synth_config() const {
  SynthConfig s = synth;
  s.num_classes = model.num_classes;
  s.channels = model.channels;
  s.seed = seed;
  return s;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  model.validate();
  train_config().validate();
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("overlap must lie in [0, 1)");
  if (bench.iterations == 0 || bench.batch == 0 || bench.threads == 0)
    throw ConfigError("bench_iterations, bench_batch and threads must be positive");
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  for (const auto& f : fields())
    if (f.key == key) return f.set(cfg, trim(value));
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_config_text(RunConfig& cfg, std::istream& in) {
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const auto body = trim(std::string_view(line).substr(0, line.find('#')));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    try {
      if (eq == std::string_view::npos) throw ConfigError("expected key = value");
      set_config_value(cfg, trim(body.substr(0, eq)), body.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(n) + ": " + e.what());
    }
  }
}

void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file " + path.string());
  try {
    apply_config_text(cfg, in);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string config_to_text(const RunConfig& cfg) {
  std::ostringstream out;
  for (const auto& f : fields()) out << f.key << " = " << f.get(cfg) << '\n';
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace waveformer
