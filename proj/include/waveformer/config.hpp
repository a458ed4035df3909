#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "waveformer/bench.hpp"
#include "waveformer/model.hpp"
#include "waveformer/signal.hpp"
#include "waveformer/training.hpp"

namespace waveformer {

// Everything a command needs. Serialized as flat `key = value` lines; a single
// `seed` drives data generation, the split, initialization and training.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  double overlap = 0.5;
  std::uint64_t seed = 0;
  BenchOptions bench;

  // Seed and shape fields copied into the sub-configs.
  SynthConfig synth_config() const;
  TrainConfig train_config() const;
  void validate() const;
};

// Sets one field from text. Throws ConfigError for unknown keys or bad values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);

// Applies `key = value` lines on top of cfg. Blank lines and `#` comments are
// skipped; errors carry the line number.
void apply_config_text(RunConfig& cfg, std::istream& in);
void apply_config_file(RunConfig& cfg, const std::filesystem::path& path);

// Every key in a fixed order, round-trippable through apply_config_text.
std::string config_to_text(const RunConfig& cfg);
std::vector<std::string> config_keys();

}  // namespace waveformer
