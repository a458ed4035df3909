#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <span>
#include <vector>

#include "waveformer/tensor.hpp"

namespace waveformer {

// One continuous multi-channel recording. samples is channels × length,
// row-major; labels holds one class id per sample.
struct Recording {
  int subject = 0;
  int trial = 0;
  std::size_t channels = 0;
  std::size_t length = 0;
  std::vector<float> samples;
  std::vector<int> labels;

  float& at(std::size_t channel, std::size_t t) { return samples[channel * length + t]; }
  float at(std::size_t channel, std::size_t t) const { return samples[channel * length + t]; }
};

// Per-channel z-score with population std clamped at 1e-8, so a constant
// channel becomes all zeros.
Recording zscore_normalize(const Recording& rec);

struct Window {
  std::size_t offset = 0;
  std::size_t real_samples = 0;  // < window when zero-padded at the tail
  int label = 0;                 // majority label over the real samples
  std::vector<float> data;       // channels × window
};

// Window start offsets for a recording of `length` samples. Stride is
// window·(1 − overlap). A trailing partial window is kept (zero-padded) when
// at least half of it is real signal and it reaches samples no earlier window
// covered; otherwise it is dropped.
std::vector<std::size_t> window_offsets(std::size_t length, std::int64_t window, double overlap);

std::vector<Window> segment(const Recording& rec, std::int64_t window = 200, double overlap = 0.5);

// ---------------------------------------------------------------- synthetic

struct SynthConfig {
  std::size_t num_classes = 6;
  std::size_t channels = 8;
  std::size_t per_class = 200;  // recordings per class
  std::size_t length = 200;     // samples per recording
  std::uint64_t seed = 0;
  // Class k bursts at base_frequency·frequency_ratio^k cycles/sample, each
  // recording jittered by a uniform relative factor in ±frequency_jitter.
  double base_frequency = 0.05;
  double frequency_ratio = 1.15;
  double frequency_jitter = 0.05;
  // Probability that a recording borrows the center frequency of a uniformly
  // chosen other class, so frequency alone is an unreliable cue while class
  // mean spectra still peak at the class's own frequency.
  double frequency_confusion = 0.5;
  std::size_t active_channels = 3;  // contiguous block per class
  double snr_db = 10.0;             // +inf disables noise
};

struct Burst {
  std::size_t channel = 0;
  double amplitude = 0;
  double frequency = 0;  // cycles per sample
  double phase = 0;
  std::size_t onset = 0;
  std::size_t duration = 0;
};

struct SynthDataset {
  std::vector<Recording> recordings;
  std::vector<std::vector<Burst>> bursts;  // generating parameters per recording
};

double synth_center_frequency(const SynthConfig& cfg, std::size_t k);
std::vector<std::size_t> synth_active_channels(const SynthConfig& cfg, std::size_t k);

// Class-conditional sinusoid bursts plus white noise. Seed-deterministic.
SynthDataset synth_gestures(const SynthConfig& cfg);

// ---------------------------------------------------------------------- CSV

struct CsvSchema {
  std::size_t num_classes = 0;
  std::size_t channels = 0;  // 0 accepts whatever the header declares
};

// Header `subject,trial,label,ch0,...,ch{C−1}`; one sample per row. Returns one
// Recording per (subject, trial), sorted by that key.
std::vector<Recording> load_csv(const std::filesystem::path& path, const CsvSchema& schema);
std::vector<Recording> parse_csv(std::istream& in, const CsvSchema& schema);
void save_csv(const std::filesystem::path& path, std::span<const Recording> recordings);
void write_csv(std::ostream& out, std::span<const Recording> recordings);

// ------------------------------------------------------------------ windows

// All windows of a dataset, flattened: data is size() × channels × window.
struct WindowSet {
  std::size_t channels = 0;
  std::size_t window = 0;
  std::vector<float> data;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const float> sample(std::size_t i) const {
    return {data.data() + i * channels * window, channels * window};
  }
};

// z-score per recording (optional), then segment; windows ordered by recording
// then offset.
WindowSet make_windows(std::span<const Recording> recordings, std::int64_t window = 200, double overlap = 0.5,
                       bool normalize = true);

struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

// Stratified by class, seed-deterministic, disjoint, covering every index.
DatasetSplit stratified_split(std::span<const int> labels, std::uint64_t seed, double train_fraction = 0.8,
                              double validation_fraction = 0.1);

template <typename T>
struct WindowBatch {
  Tensor<T> data;  // B × C × T
  std::vector<int> labels;
};

template <typename T>
WindowBatch<T> make_batch(const WindowSet& set, std::span<const std::size_t> indices);

}  // namespace waveformer
