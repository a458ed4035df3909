#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "doctest.h"
#include "support.hpp"
#include "waveformer/checkpoint.hpp"
#include "waveformer/cli.hpp"
#include "waveformer/config.hpp"

using namespace waveformer;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() / ("wf_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

const char* kTinyConfig =
    "channels = 4\nembed_dim = 8\nheads = 2\nffn_dim = 16\nlayers = 1\nwavelet_levels = 2\n"
    "synth_per_class = 6\nepochs = 2\nbatch = 16\nwarmup_epochs = 1\nlr = 0.01\n";

RunConfig config_of(const std::string& ckpt_path) {
  const auto ckpt = load_checkpoint(ckpt_path);
  RunConfig cfg;
  std::istringstream in(std::get<std::string>(find_entry(ckpt, "config")->payload));
  apply_config_text(cfg, in);
  return cfg;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact for every dtype") {
  QuantizedTensor q = quantize_symmetric(std::vector<float>{-1.0f, 0.5f, 1.0f, 0.0f}, {2, 2});
  const Checkpoint entries{
      {"config", {}, std::string("a = 1\nü = 2\n")},
      {"f32", {2, 3}, std::vector<float>{1.5f, -0.0f, std::numeric_limits<float>::quiet_NaN(), 1e-40f, 3e38f, -7}},
      {"f64", {2}, std::vector<double>{0.1, -std::numeric_limits<double>::infinity()}},
      {"i8", {2, 2}, q},
      {"scalar", {}, std::vector<float>{42.0f}},
  };
  const auto bytes = encode_checkpoint(entries);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "WFCK");
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == entries.size());
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(std::get<std::string>(back[0].payload) == "a = 1\nü = 2\n");
  const auto& f = std::get<std::vector<float>>(back[1].payload);
  for (std::size_t i = 0; i < f.size(); ++i) {
    const auto& src = std::get<std::vector<float>>(entries[1].payload)[i];
    CHECK(std::memcmp(&f[i], &src, sizeof(float)) == 0);
  }
  CHECK(back[1].shape == Shape{2, 3});
  const auto& qb = std::get<QuantizedTensor>(back[3].payload);
  CHECK(qb.values == q.values);
  CHECK(qb.scale == q.scale);
  CHECK(back[3].dtype() == DType::kI8);
  CHECK(back[4].shape.empty());
}

TEST_CASE("checkpoint corruption, version and truncation are refused") {
  const Checkpoint entries{{"w", {3}, std::vector<float>{1, 2, 3}}};
  const auto good = encode_checkpoint(entries);
  for (std::size_t i = 4; i < good.size(); ++i) {
    auto bad = good;
    bad[i] ^= 0x10;
    if (i < 8)  // version field: caught as unknown version before the CRC
      CHECK_THROWS_AS(decode_checkpoint(bad), FormatError);
    else
      CHECK_THROWS_AS(decode_checkpoint(bad), ChecksumError);
  }
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);
  const std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 10);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  CHECK_THROWS_AS(encode_checkpoint(Checkpoint{{"w", {4}, std::vector<float>{1}}}), DimensionError);
}

TEST_CASE("model parameters survive a checkpoint, quantized entries within half a step") {
  ModelConfig mc;
  mc.channels = 4;
  mc.embed_dim = 8;
  mc.heads = 2;
  mc.ffn_dim = 16;
  mc.layers = 1;
  const Model<float> a(mc, 1);
  Model<float> b(mc, 2);
  load_parameters(b, decode_checkpoint(encode_checkpoint(model_checkpoint(a, "x = 1\n"))));
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto pa = a.parameters()[i].tensor.data(), pb = b.parameters()[i].tensor.data();
    CHECK(std::equal(pa.begin(), pa.end(), pb.begin()));
  }
  const auto qckpt = decode_checkpoint(encode_checkpoint(model_checkpoint(a, "", true)));
  load_parameters(b, qckpt);
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    const auto& e = *find_entry(qckpt, a.parameters()[i].name);
    const double tol = e.dtype() == DType::kI8 ? std::get<QuantizedTensor>(e.payload).scale / 2 * 1.0001 : 0.0;
    CHECK(e.dtype() == (a.parameters()[i].tensor.rank() >= 2 ? DType::kI8 : DType::kF32));
    CHECK(wf_test::max_abs_diff(a.parameters()[i].tensor, b.parameters()[i].tensor) <= tol);
  }
  ModelConfig wider = mc;
  wider.embed_dim = 16;
  Model<float> c(wider, 3);
  try {
    load_parameters(c, qckpt);
    FAIL("expected ShapeMismatchError");
  } catch (const ShapeMismatchError& e) {
    CHECK(e.tensor() == "patch.weight");
  }
}

TEST_CASE("run config text round trip and errors") {
  RunConfig cfg;
  cfg.seed = 123;
  cfg.model.use_rope = false;
  cfg.train.lr = 3.3e-4;
  cfg.synth.snr_db = std::numeric_limits<double>::infinity();
  RunConfig back;
  std::istringstream in(config_to_text(cfg));
  apply_config_text(back, in);
  CHECK(config_to_text(back) == config_to_text(cfg));
  CHECK(back.seed == 123);
  CHECK_FALSE(back.model.use_rope);
  CHECK(back.train.lr == 3.3e-4);
  CHECK(std::isinf(back.synth.snr_db));

  std::istringstream unknown("# comment\n\nlr = 0.1\nbogus = 3\n");
  try {
    apply_config_text(back, unknown);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
  std::istringstream bad_value("layers = two\n");
  CHECK_THROWS_AS(apply_config_text(back, bad_value), ConfigError);
  const auto keys = config_keys();
  CHECK(keys.size() == std::set<std::string>(keys.begin(), keys.end()).size());
}

TEST_CASE("default hyperparameters") {
  const RunConfig cfg;
  CHECK(cfg.model.layers == 6);
  CHECK(cfg.model.embed_dim == 256);
  CHECK(cfg.model.heads == 8);
  CHECK(cfg.model.patch_width == 40);
  CHECK(cfg.model.window == 200);
  CHECK(cfg.overlap == 0.5);
  CHECK(cfg.train.lr == 4e-5);
  CHECK(cfg.train.batch == 64);
  CHECK(cfg.train.epochs == 30);
  CHECK(cfg.train.warmup_epochs == 5);
  CHECK(cfg.train.early_stop_patience == 5);
  CHECK(cfg.bench.iterations == 200);
  CHECK(cfg.bench.warmup == 10);
}

TEST_CASE("flag precedence: CLI over config file over defaults") {
  TempDir dir;
  write_file(dir / "run.cfg", std::string(kTinyConfig) + "seed = 3\nweight_decay = 0.5\nepochs = 1\n");
  const auto r = cli({"train", "--synthetic", "--config", dir / "run.cfg", "--seed", "9", "--no-rope", "--out",
                      dir / "m.wfck"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto cfg = config_of(dir / "m.wfck");
  CHECK(cfg.seed == 9);                     // CLI beats file
  CHECK(cfg.train.weight_decay == 0.5);     // file beats default
  CHECK(cfg.train.clip_norm == 1.0);        // default
  CHECK_FALSE(cfg.model.use_rope);          // flag persisted
  CHECK(cfg.model.use_waveletconv);
  CHECK(fs::exists(dir / "m.history.csv"));
}

TEST_CASE("train is bit-identical across runs") {
  TempDir dir;
  write_file(dir / "run.cfg", kTinyConfig);
  for (const char* name : {"a.wfck", "b.wfck"})
    REQUIRE(cli({"train", "--synthetic", "--seed", "7", "--config", dir / "run.cfg", "--out", dir / name}).code == 0);
  CHECK(slurp(dir / "a.wfck") == slurp(dir / "b.wfck"));
  CHECK(slurp(dir / "a.history.csv") == slurp(dir / "b.history.csv"));
  CHECK(slurp(dir / "a.history.csv").rfind("epoch,split,loss,acc,f1,auroc\n1,train,", 0) == 0);
}

TEST_CASE("exit codes") {
  TempDir dir;
  write_file(dir / "run.cfg", kTinyConfig);
  CHECK(cli({"train"}).code == kExitUsage);
  CHECK(cli({"train", dir / "missing.csv"}).code == kExitUsage);
  CHECK(cli({}).code == kExitUsage);
  CHECK(cli({"params", "--precision", "fp16"}).code == kExitUsage);
  CHECK(cli({"params", "--config", dir / "missing.cfg"}).code == kExitUsage);
  write_file(dir / "bad.cfg", "layers = 0\n");
  CHECK(cli({"params", "--config", dir / "bad.cfg"}).code == kExitUsage);

  write_file(dir / "diverge.cfg", std::string(kTinyConfig) + "lr = 1e300\nclip_norm = 1e300\nwarmup_epochs = 0\n");
  const auto nan = cli({"train", "--synthetic", "--config", dir / "diverge.cfg", "--out", dir / "n.wfck"});
  CHECK(nan.code == kExitDiverged);
  CHECK(nan.err.find("diverged") != std::string::npos);

  REQUIRE(cli({"train", "--synthetic", "--config", dir / "run.cfg", "--out", dir / "m.wfck"}).code == 0);
  auto bytes = slurp(dir / "m.wfck");
  bytes[bytes.size() / 2] ^= 1;
  write_file(dir / "corrupt.wfck", bytes);
  CHECK(cli({"eval", dir / "corrupt.wfck", "--synthetic"}).code == kExitChecksum);

  write_file(dir / "wide.cfg", "embed_dim = 16\n");
  const auto shape = cli({"eval", dir / "m.wfck", "--synthetic", "--config", dir / "wide.cfg"});
  CHECK(shape.code == kExitShape);
  CHECK(shape.err.find("patch.weight") != std::string::npos);

  const auto ok = cli({"eval", dir / "m.wfck", "--synthetic"});
  REQUIRE(ok.code == 0);
  CHECK(ok.out.rfind("split,samples,loss,acc,f1,auroc\ntrain,", 0) == 0);
}

TEST_CASE("params prints the enumerated count and breakdown") {
  const auto r = cli({"params"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("total " + std::to_string(wf_test::expected_parameters(ModelConfig{}))) == 0);
  CHECK(r.out.find("  wavelet ") != std::string::npos);
  CHECK(r.out.find("3.10M") != std::string::npos);
}

TEST_CASE("synth writes a loadable CSV that train accepts") {
  TempDir dir;
  write_file(dir / "run.cfg", kTinyConfig);
  REQUIRE(cli({"synth", "--config", dir / "run.cfg", "--seed", "4", "--out", dir / "d.csv"}).code == 0);
  const auto recs = load_csv(dir / "d.csv", {6, 4});
  CHECK(recs.size() == 36);
  const auto r = cli({"train", dir / "d.csv", "--config", dir / "run.cfg", "--out", dir / "m.wfck"});
  CHECK_MESSAGE(r.code == 0, r.err);
  const auto e = cli({"eval", dir / "m.wfck", dir / "d.csv"});
  CHECK_MESSAGE(e.code == 0, e.err);
}

TEST_CASE("bench with both precisions prints two rows") {
  TempDir dir;
  write_file(dir / "run.cfg", kTinyConfig);
  const auto r = cli({"bench", "--config", dir / "run.cfg", "--precision", "both", "--iters", "3", "--warmup", "1",
                      "--out", dir / "b.csv"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("fp32: mean") != std::string::npos);
  CHECK(r.out.find("int8: mean") != std::string::npos);
  std::istringstream csv(slurp(dir / "b.csv"));
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(csv, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);
  CHECK(lines[1].rfind("fp32,3,1,", 0) == 0);
  CHECK(lines[2].rfind("int8,3,1,", 0) == 0);
}

TEST_CASE("eval on the training split of a converged run") {
  TempDir dir;
  write_file(dir / "run.cfg",
             "channels = 4\nembed_dim = 16\nheads = 2\nffn_dim = 32\nlayers = 1\nwavelet_levels = 2\n"
             "synth_per_class = 60\nsynth_frequency_confusion = 0\nsynth_snr_db = 20\nepochs = 40\nbatch = 16\n"
             "warmup_epochs = 1\nlr = 0.003\nearly_stop_patience = 10\n");
  REQUIRE(cli({"train", "--synthetic", "--config", dir / "run.cfg", "--out", dir / "m.wfck"}).code == 0);
  const auto r = cli({"eval", dir / "m.wfck", "--synthetic"});
  REQUIRE(r.code == 0);
  std::istringstream in(r.out);
  std::string header, train_row;
  std::getline(in, header);
  std::getline(in, train_row);
  const auto acc = std::stod(train_row.substr(train_row.find(',', train_row.find(',', 6) + 1) + 1));
  CHECK(acc >= 0.99);
}
