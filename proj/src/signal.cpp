#include "waveformer/signal.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <string_view>

#include "waveformer/errors.hpp"
#include "waveformer/rng.hpp"

namespace waveformer {

Recording zscore_normalize(const Recording& rec) {
  if (rec.channels == 0 || rec.length == 0 || rec.samples.empty())
    throw InputError("zscore_normalize: empty recording");
  if (rec.length < 2) throw InputError("zscore_normalize: each channel needs more than one sample");
  constexpr double kEps = 1e-8;
  Recording out = rec;
  for (std::size_t c = 0; c < rec.channels; ++c) {
    double mean = 0;
    for (std::size_t t = 0; t < rec.length; ++t) mean += rec.at(c, t);
    mean /= static_cast<double>(rec.length);
    double var = 0;
    for (std::size_t t = 0; t < rec.length; ++t) {
      const double d = rec.at(c, t) - mean;
      var += d * d;
    }
    const double sd = std::max(std::sqrt(var / static_cast<double>(rec.length)), kEps);
    for (std::size_t t = 0; t < rec.length; ++t) out.at(c, t) = static_cast<float>((rec.at(c, t) - mean) / sd);
  }
  return out;
}

std::vector<std::size_t> window_offsets(std::size_t length, std::int64_t window, double overlap) {
  if (window <= 0) throw ParameterError("segment: window must be positive, got " + std::to_string(window));
  if (!(overlap >= 0.0) || overlap >= 1.0)
    throw ParameterError("segment: overlap must lie in [0, 1), got " + std::to_string(overlap));
  const auto w = static_cast<std::size_t>(window);
  const auto stride = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(w * (1.0 - overlap) + 1e-9)));
  std::vector<std::size_t> offsets;
  std::size_t covered = 0;
  for (std::size_t off = 0; off < length; off += stride) {
    const std::size_t real = std::min(w, length - off);
    if (real < w && (2 * real < w || off + real <= covered)) continue;
    offsets.push_back(off);
    covered = off + real;
  }
  return offsets;
}

std::vector<Window> segment(const Recording& rec, std::int64_t window, double overlap) {
  const auto offsets = window_offsets(rec.length, window, overlap);
  const auto w = static_cast<std::size_t>(window);
  std::vector<Window> out;
  out.reserve(offsets.size());
  for (std::size_t off : offsets) {
    Window win;
    win.offset = off;
    win.real_samples = std::min(w, rec.length - off);
    win.data.assign(rec.channels * w, 0.0f);
    for (std::size_t c = 0; c < rec.channels; ++c)
      std::copy_n(rec.samples.begin() + static_cast<std::ptrdiff_t>(c * rec.length + off), win.real_samples,
                  win.data.begin() + static_cast<std::ptrdiff_t>(c * w));
    std::map<int, std::size_t> votes;
    for (std::size_t t = 0; t < win.real_samples; ++t) ++votes[rec.labels.at(off + t)];
    win.label = std::max_element(votes.begin(), votes.end(), [](const auto& a, const auto& b) {
                  return a.second < b.second;
                })->first;
    out.push_back(std::move(win));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic

double synth_center_frequency(const SynthConfig& cfg, std::size_t k) {
  return cfg.base_frequency * std::pow(cfg.frequency_ratio, static_cast<double>(k));
}

std::vector<std::size_t> synth_active_channels(const SynthConfig& cfg, std::size_t k) {
  const std::size_t start = k * cfg.channels / cfg.num_classes;
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(cfg.active_channels, cfg.channels); ++i)
    out.push_back((start + i) % cfg.channels);
  return out;
}

SynthDataset synth_gestures(const SynthConfig& cfg) {
  if (cfg.num_classes < 2) throw ParameterError("synth_gestures: need at least 2 classes");
  if (cfg.channels == 0 || cfg.per_class == 0 || cfg.length < 2)
    throw ParameterError("synth_gestures: channels, per_class and length must be positive");
  if (!(cfg.base_frequency > 0) || !(cfg.frequency_ratio > 0) ||
      synth_center_frequency(cfg, cfg.num_classes - 1) * (1 + cfg.frequency_jitter) >= 0.25)
    throw ParameterError("synth_gestures: class frequencies must stay inside (0, Nyquist/2)");
  if (cfg.frequency_jitter < 0 || cfg.frequency_jitter >= 1)
    throw ParameterError("synth_gestures: frequency_jitter must lie in [0, 1)");
  if (!(cfg.frequency_confusion >= 0) || cfg.frequency_confusion >= 1.0 - 1.0 / static_cast<double>(cfg.num_classes))
    throw ParameterError("synth_gestures: frequency_confusion must lie in [0, 1 − 1/num_classes)");

  const double noise_sd = std::isinf(cfg.snr_db) ? 0.0 : std::sqrt(0.5 / std::pow(10.0, cfg.snr_db / 10.0));
  SynthDataset ds;
  const std::size_t total = cfg.num_classes * cfg.per_class;
  ds.recordings.reserve(total);
  ds.bursts.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    const std::size_t k = idx % cfg.num_classes;
    Rng rng(splitmix64(cfg.seed) ^ splitmix64(idx + 1));
    Recording rec;
    rec.subject = 0;
    rec.trial = static_cast<int>(idx);
    rec.channels = cfg.channels;
    rec.length = cfg.length;
    rec.samples.assign(cfg.channels * cfg.length, 0.0f);
    rec.labels.assign(cfg.length, static_cast<int>(k));

    std::size_t fk = k;
    if (rng.uniform() < cfg.frequency_confusion) fk = (k + 1 + rng.below(cfg.num_classes - 1)) % cfg.num_classes;
    const double freq =
        synth_center_frequency(cfg, fk) * (1.0 + rng.uniform(-cfg.frequency_jitter, cfg.frequency_jitter));
    const auto onset = static_cast<std::size_t>(rng.uniform(0.0, 0.25) * static_cast<double>(cfg.length));
    const auto duration = std::min(cfg.length - onset, static_cast<std::size_t>(rng.uniform(0.6, 0.75) *
                                                                                 static_cast<double>(cfg.length)));
    std::vector<Burst> bursts;
    for (std::size_t c : synth_active_channels(cfg, k)) {
      Burst b{c, rng.uniform(0.8, 1.2), freq, rng.uniform(0.0, 2.0 * std::numbers::pi), onset, duration};
      for (std::size_t t = 0; t < duration; ++t)
        rec.at(c, onset + t) += static_cast<float>(
            b.amplitude * std::sin(2.0 * std::numbers::pi * b.frequency * static_cast<double>(t) + b.phase));
      bursts.push_back(b);
    }
    if (noise_sd > 0)
      for (auto& v : rec.samples) v += static_cast<float>(noise_sd * rng.normal());
    ds.recordings.push_back(std::move(rec));
    ds.bursts.push_back(std::move(bursts));
  }
  return ds;
}

// ---------------------------------------------------------------------- CSV

namespace {

std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

template <typename V>
V parse_number(std::string_view cell, std::size_t line, std::size_t column) {
  cell = trim(cell);
  V value{};
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size())
    throw ParseError("non-numeric cell '" + std::string(cell) + "' in column " + std::to_string(column + 1), line);
  return value;
}

template <typename V>
void append_number(std::string& out, V value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
  out.append(buf, ptr);
}

}  // namespace

std::vector<Recording> parse_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty file: missing header", 1);
  const auto header = split_cells(line);
  const char* required[] = {"subject", "trial", "label"};
  for (std::size_t i = 0; i < 3; ++i)
    if (header.size() <= i || trim(header[i]) != required[i])
      throw ParseError(std::string("missing column '") + required[i] + "'", 1);
  const std::size_t channels = header.size() - 3;
  if (channels == 0) throw ParseError("missing channel columns (expected ch0..)", 1);
  for (std::size_t c = 0; c < channels; ++c)
    if (trim(header[3 + c]) != "ch" + std::to_string(c))
      throw ParseError("expected column 'ch" + std::to_string(c) + "', found '" + std::string(header[3 + c]) + "'", 1);
  if (schema.channels && schema.channels != channels)
    throw ParseError("header declares " + std::to_string(channels) + " channels, schema expects " +
                     std::to_string(schema.channels),
                     1);

  struct Group {
    std::vector<std::vector<float>> columns;
    std::vector<int> labels;
  };
  std::map<std::pair<int, int>, Group> groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split_cells(line);
    if (cells.size() != header.size())
      throw ParseError("expected " + std::to_string(header.size()) + " cells, found " + std::to_string(cells.size()),
                       line_no);
    const int subject = parse_number<int>(cells[0], line_no, 0);
    const int trial = parse_number<int>(cells[1], line_no, 1);
    const int label = parse_number<int>(cells[2], line_no, 2);
    if (label < 0 || (schema.num_classes && static_cast<std::size_t>(label) >= schema.num_classes))
      throw RangeError("label " + std::to_string(label) + " outside [0, " + std::to_string(schema.num_classes) + ")",
                       line_no);
    auto& g = groups[{subject, trial}];
    if (g.columns.empty()) g.columns.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) g.columns[c].push_back(parse_number<float>(cells[3 + c], line_no, 3 + c));
    g.labels.push_back(label);
  }

  std::vector<Recording> out;
  for (auto& [key, g] : groups) {
    Recording rec;
    rec.subject = key.first;
    rec.trial = key.second;
    rec.channels = channels;
    rec.length = g.labels.size();
    rec.labels = std::move(g.labels);
    rec.samples.reserve(channels * rec.length);
    for (auto& col : g.columns) rec.samples.insert(rec.samples.end(), col.begin(), col.end());
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<Recording> load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  return parse_csv(in, schema);
}

void write_csv(std::ostream& out, std::span<const Recording> recordings) {
  if (recordings.empty()) throw InputError("write_csv: no recordings");
  const std::size_t channels = recordings.front().channels;
  std::string buf = "subject,trial,label";
  for (std::size_t c = 0; c < channels; ++c) buf += ",ch" + std::to_string(c);
  buf += '\n';
  for (const auto& rec : recordings) {
    if (rec.channels != channels) throw InputError("write_csv: recordings differ in channel count");
    for (std::size_t t = 0; t < rec.length; ++t) {
      append_number(buf, rec.subject);
      buf += ',';
      append_number(buf, rec.trial);
      buf += ',';
      append_number(buf, rec.labels[t]);
      for (std::size_t c = 0; c < channels; ++c) {
        buf += ',';
        append_number(buf, rec.at(c, t));
      }
      buf += '\n';
    }
    out << buf;
    buf.clear();
  }
}

void save_csv(const std::filesystem::path& path, std::span<const Recording> recordings) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  write_csv(out, recordings);
}

// ------------------------------------------------------------------ windows

WindowSet make_windows(std::span<const Recording> recordings, std::int64_t window, double overlap, bool normalize) {
  WindowSet set;
  set.window = static_cast<std::size_t>(std::max<std::int64_t>(window, 0));
  for (const auto& raw : recordings) {
    if (set.channels == 0) set.channels = raw.channels;
    if (raw.channels != set.channels) throw InputError("make_windows: recordings differ in channel count");
    const Recording rec = normalize ? zscore_normalize(raw) : raw;
    for (auto& w : segment(rec, window, overlap)) {
      set.data.insert(set.data.end(), w.data.begin(), w.data.end());
      set.labels.push_back(w.label);
    }
  }
  return set;
}

DatasetSplit stratified_split(std::span<const int> labels, std::uint64_t seed, double train_fraction,
                              double validation_fraction) {
  if (train_fraction < 0 || validation_fraction < 0 || train_fraction + validation_fraction > 1)
    throw ParameterError("stratified_split: invalid fractions");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  Rng rng(seed ^ 0x73706c6974ULL);
  DatasetSplit split;
  for (auto& [label, idx] : by_class) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(n * train_fraction));
    const auto n_val = std::min(idx.size() - n_train, static_cast<std::size_t>(std::llround(n * validation_fraction)));
    split.train.insert(split.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.insert(split.validation.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                            idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.insert(split.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.validation.begin(), split.validation.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

template <typename T>
WindowBatch<T> make_batch(const WindowSet& set, std::span<const std::size_t> indices) {
  if (indices.empty()) throw InputError("make_batch: empty batch");
  const std::size_t per = set.channels * set.window;
  std::vector<T> data(indices.size() * per);
  WindowBatch<T> batch;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto s = set.sample(indices[b]);
    std::copy(s.begin(), s.end(), data.begin() + static_cast<std::ptrdiff_t>(b * per));
    batch.labels.push_back(set.labels[indices[b]]);
  }
  batch.data = Tensor<T>({indices.size(), set.channels, set.window}, std::move(data));
  return batch;
}

template WindowBatch<float> make_batch(const WindowSet&, std::span<const std::size_t>);
template WindowBatch<double> make_batch(const WindowSet&, std::span<const std::size_t>);

}  // namespace waveformer
