#include <gtest/gtest.h>
#include <unistd.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "helix/checkpoint.hpp"
#include "helix/commands.hpp"
#include "helix/data.hpp"
#include "helix/errors.hpp"
#include "helix/image_io.hpp"
#include "helix/rng.hpp"
#include "helix/run_config.hpp"

namespace fs = std::filesystem;
using namespace helix;
using cli::RunConfig;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() /
            ("helix_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) { return io::read_bytes(p); }

// 8x8 images, two levels, T = 10: trains in milliseconds.
RunConfig tiny(const fs::path& root, int steps) {
  RunConfig c;
  c.image_size = 8;
  c.K = 4;
  c.T = 10;
  c.batch = 2;
  c.steps = steps;
  c.base_channels = 4;
  c.depth = 2;
  c.channel_mult = {1, 2};
  c.d_text = 4;
  c.lr = 1e-3;
  c.dataset = (root / "data").string();
  c.checkpoint = (root / "ck.dhdf").string();
  c.out_dir = (root / "out").string();
  if (!fs::exists(c.dataset)) data::make_synthetic_fixtures(c.dataset, 5, 3);
  return c;
}

std::vector<std::uint8_t> le_u32(std::uint32_t v) {
  return {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8), static_cast<std::uint8_t>(v >> 16),
          static_cast<std::uint8_t>(v >> 24)};
}

void append(std::vector<std::uint8_t>& out, const std::vector<std::uint8_t>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

bool same_bits(const std::vector<double>& a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST(Config, ParsesKeysCommentsAndBlankLines) {
  const auto c = cli::parse_config("# desk run\nseed = 7\n\n  lr=0.5   # fast\npreset = tab7-2\nchannel_mult = 1,2\n"
                                   "depth = 2\nvocabulary = wood scratch\n");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.lr, 0.5);
  EXPECT_EQ(c.preset, "tab7-2");
  EXPECT_EQ(c.channel_mult, (std::vector<int>{1, 2}));
  EXPECT_EQ(c.vocabulary, (std::vector<std::string>{"wood", "scratch"}));
  EXPECT_EQ(c.batch, 4);  // untouched keys keep defaults
}

TEST(Config, LastDuplicateWins) {
  EXPECT_EQ(cli::parse_config("steps = 3\nsteps = 9\n").steps, 9);
}

TEST(Config, UnknownKeyIsFatalAndNamesTheKey) {
  try {
    cli::parse_config("seeed = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("seeed"), std::string::npos);
  }
}

TEST(Config, UnparsableValueIsFatal) {
  EXPECT_THROW(cli::parse_config("seed = seven\n"), ConfigError);
  EXPECT_THROW(cli::parse_config("lr = 1e-4x\n"), ConfigError);
  EXPECT_THROW(cli::parse_config("no equals sign\n"), ConfigError);
}

TEST(Config, TextRoundTrips) {
  RunConfig c;
  c.seed = 123456789012345ULL;
  c.lr = 0.1 + 0.2;
  c.beta_end = 0.021;
  c.channel_mult = {1, 2, 4, 4};
  c.vocabulary = {"grid", "bent"};
  c.out_dir = "runs/a";
  const auto back = cli::parse_config(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.lr, c.lr);
  EXPECT_EQ(back.seed, c.seed);
}

TEST(Config, EveryKeyAppearsInText) {
  const auto text = RunConfig{}.to_text();
  for (const auto& k : cli::config_keys()) EXPECT_NE(text.find(k + " = "), std::string::npos) << k;
}

TEST(Config, LaterOverridesBeatTheFile) {
  auto c = cli::parse_config("seed = 3\nsteps = 5\n");
  cli::set_key(c, "steps", "11");
  EXPECT_EQ(c.seed, 3u);
  EXPECT_EQ(c.steps, 11);
}

TEST(Config, ValidationNamesTheOffendingKey) {
  auto expect_key = [](RunConfig c, const char* key) {
    try {
      c.validate();
      ADD_FAILURE() << key;
    } catch (const ConfigError& e) {
      EXPECT_NE(std::string(e.what()).find(key), std::string::npos) << e.what();
    }
  };
  RunConfig c;
  c.preset = "tab7-9";
  expect_key(c, "preset");
  c = {};
  c.batch = 0;
  expect_key(c, "batch");
  c = {};
  c.lr = -1.0;
  expect_key(c, "lr");
  c = {};
  c.K = 0;
  expect_key(c, "K");
  c = {};
  c.depth = 3;
  expect_key(c, "channel_mult");
  for (const char* p : {"default", "tab7-1", "tab7-2", "tab7-3", "tab7-4"}) {
    c = {};
    c.preset = p;
    EXPECT_NO_THROW(c.validate()) << p;
  }
}

TEST(Config, MissingFileIsReported) {
  TempDir dir;
  EXPECT_ANY_THROW(cli::load_config(dir.path() / "nope.cfg"));
}

// ---------------------------------------------------------------------------
// Checkpoint

TEST(Fnv1a, PublishedVectors) {
  auto h = [](const std::string& s) {
    const std::vector<std::uint8_t> b(s.begin(), s.end());
    return ckpt::fnv1a64(b);
  };
  EXPECT_EQ(h(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(h("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(h("foobar"), 0x85944171f73967e8ULL);
}

TEST(Checkpoint, EmptyModelIsMinimalValidFile) {
  const auto bytes = ckpt::encode({});
  std::vector<std::uint8_t> want{'D', 'H', 'D', 'F', '0', '0', '0', '1', 0, 0, 0, 0, 0, 0, 0, 0};
  ASSERT_EQ(bytes.size(), want.size() + 8);
  EXPECT_TRUE(std::equal(want.begin(), want.end(), bytes.begin()));
  const auto back = ckpt::decode(bytes);
  EXPECT_TRUE(back.config_text.empty());
  EXPECT_TRUE(back.params.empty());
}

TEST(Checkpoint, LayoutMatchesHandEncoding) {
  ckpt::Checkpoint c{"a = 1\n", {{"w", {2}, {1.5, -2.0}}}};
  std::vector<std::uint8_t> want{'D', 'H', 'D', 'F', '0', '0', '0', '1'};
  append(want, le_u32(6));
  append(want, {'a', ' ', '=', ' ', '1', '\n'});
  append(want, le_u32(1));
  append(want, {1, 0, 'w', 1});
  append(want, le_u32(2));
  // 1.5 = 0x3FF8000000000000, -2 = 0xC000000000000000, little-endian.
  append(want, {0, 0, 0, 0, 0, 0, 0xF8, 0x3F, 0, 0, 0, 0, 0, 0, 0, 0xC0});
  // FNV-1a over the bytes above, written out independently.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : want) h = (h ^ b) * 0x100000001b3ULL;
  for (int i = 0; i < 8; ++i) want.push_back(static_cast<std::uint8_t>(h >> (8 * i)));
  EXPECT_EQ(ckpt::encode(c), want);
}

TEST(Checkpoint, SaveLoadIsBitIdenticalAndSaveAgainIsByteIdentical) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 0);
  cfg.vocabulary = {"blot", "grid"};
  auto model = cli::build_model(cfg);
  // Move every value off its initialization so a no-op restore would show.
  Rng rng(4);
  for (auto& p : model->parameters().all())
    for (auto& v : p.tensor.mutable_data()) v += rng.normal();
  const auto first = dir.path() / "a.dhdf", second = dir.path() / "b.dhdf";
  ckpt::save(first, ckpt::snapshot(model->parameters(), cfg.to_text()));
  auto loaded = cli::load_model(first);
  EXPECT_EQ(loaded.config.to_text(), cfg.to_text());
  const auto& src = model->parameters().all();
  const auto& dst = loaded.model->parameters().all();
  ASSERT_EQ(src.size(), dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_EQ(src[i].name, dst[i].name);
    EXPECT_TRUE(same_bits({src[i].tensor.data().begin(), src[i].tensor.data().end()}, dst[i].tensor.data()))
        << src[i].name;
  }
  ckpt::save(second, ckpt::snapshot(loaded.model->parameters(), loaded.config.to_text()));
  EXPECT_EQ(file_bytes(first), file_bytes(second));
}

TEST(Checkpoint, EveryFlippedByteIsDetected) {
  ckpt::Checkpoint c{"seed = 1\n", {{"a.w", {2, 3}, {1, 2, 3, 4, 5, 6}}, {"b", {1}, {0.25}}}};
  const auto good = ckpt::encode(c);
  for (std::size_t i = 0; i < good.size(); ++i) {
    auto bad = good;
    bad[i] ^= 0x10;
    EXPECT_THROW(ckpt::decode(bad), CorruptCheckpoint) << "byte " << i;
  }
}

TEST(Checkpoint, TruncationAndTrailingBytesAreCorrupt) {
  const auto good = ckpt::encode({"", {{"x", {1}, {3.0}}}});
  for (std::size_t n : {std::size_t{0}, std::size_t{7}, std::size_t{16}, good.size() - 1})
    EXPECT_THROW(ckpt::decode({good.data(), n}), CorruptCheckpoint) << n;
  auto longer = good;
  longer.push_back(0);
  EXPECT_THROW(ckpt::decode(longer), CorruptCheckpoint);
}

TEST(Checkpoint, LoadErrorNamesThePath) {
  TempDir dir;
  const auto p = dir.path() / "bad.dhdf";
  auto bytes = ckpt::encode({});
  bytes[0] = 'X';
  io::write_bytes(p, bytes);
  try {
    ckpt::load(p);
    FAIL();
  } catch (const CorruptCheckpoint& e) {
    EXPECT_NE(std::string(e.what()).find("bad.dhdf"), std::string::npos);
  }
}

TEST(Checkpoint, RestoreRejectsMismatchedStores) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 0);
  cfg.vocabulary = {"blot"};
  auto model = cli::build_model(cfg);
  auto snap = ckpt::snapshot(model->parameters(), "");
  auto reshaped = snap;
  reshaped.params[0].shape.push_back(1);
  EXPECT_THROW(ckpt::restore(model->parameters(), reshaped), CorruptCheckpoint);
  auto missing = snap;
  missing.params.pop_back();
  EXPECT_THROW(ckpt::restore(model->parameters(), missing), CorruptCheckpoint);
  auto renamed = snap;
  renamed.params[0].name += "_x";
  EXPECT_THROW(ckpt::restore(model->parameters(), renamed), CorruptCheckpoint);
}

// ---------------------------------------------------------------------------
// Train

TEST(Train, ZeroStepsSavesTheInitialization) {
  TempDir dir;
  const auto cfg = tiny(dir.path(), 0);
  std::ostringstream log;
  const auto r = cli::cmd_train(cfg, log);
  EXPECT_TRUE(r.losses.empty());
  const auto fresh = cli::build_model(r.config);
  auto loaded = cli::load_model(r.checkpoint);
  const auto& a = fresh->parameters().all();
  const auto& b = loaded.model->parameters().all();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_TRUE(same_bits({a[i].tensor.data().begin(), a[i].tensor.data().end()}, b[i].tensor.data())) << a[i].name;
  const auto csv = file_bytes(fs::path(cfg.out_dir) / "loss.csv");
  EXPECT_EQ(std::string(csv.begin(), csv.end()), "step,loss\n");
}

TEST(Train, VocabularyComesFromDatasetPrompts) {
  TempDir dir;
  std::ostringstream log;
  const auto r = cli::cmd_train(tiny(dir.path(), 0), log);
  ASSERT_FALSE(r.config.vocabulary.empty());
  EXPECT_EQ(cli::load_model(r.checkpoint).config.vocabulary, r.config.vocabulary);
}

TEST(Train, TenStepsAreBitIdenticalAcrossRuns) {
  TempDir dir;
  const auto cfg = tiny(dir.path(), 10);
  std::ostringstream log;
  const auto r1 = cli::cmd_train(cfg, log);
  const auto csv1 = file_bytes(fs::path(cfg.out_dir) / "loss.csv");
  const auto ck1 = file_bytes(cfg.checkpoint);
  const auto r2 = cli::cmd_train(cfg, log);
  EXPECT_EQ(csv1, file_bytes(fs::path(cfg.out_dir) / "loss.csv"));
  EXPECT_EQ(ck1, file_bytes(cfg.checkpoint));
  ASSERT_EQ(r1.losses.size(), 10u);
  EXPECT_TRUE(same_bits(r1.losses, r2.losses));
}

TEST(Train, LossCsvHasOneShortestRoundTripRowPerStep) {
  TempDir dir;
  const auto cfg = tiny(dir.path(), 4);
  std::ostringstream log;
  const auto r = cli::cmd_train(cfg, log);
  const auto bytes = file_bytes(fs::path(cfg.out_dir) / "loss.csv");
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,loss");
  for (int step = 1; step <= 4; ++step) {
    ASSERT_TRUE(std::getline(in, line));
    const auto comma = line.find(',');
    EXPECT_EQ(line.substr(0, comma), std::to_string(step));
    const double v = std::stod(line.substr(comma + 1));
    EXPECT_EQ(v, r.losses[static_cast<std::size_t>(step - 1)]);
    EXPECT_TRUE(std::isfinite(v));
  }
  EXPECT_FALSE(std::getline(in, line));
}

TEST(Train, SeedChangesTheRun) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 3);
  std::ostringstream log;
  const auto a = cli::cmd_train(cfg, log).losses;
  cfg.seed = 2;
  const auto b = cli::cmd_train(cfg, log).losses;
  EXPECT_NE(a, b);
}

TEST(Train, SaveEveryWritesNumberedCheckpoints) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 10);
  cfg.save_every = 4;
  std::ostringstream log;
  cli::cmd_train(cfg, log);
  EXPECT_TRUE(fs::exists(dir.path() / "ck_step4.dhdf"));
  EXPECT_TRUE(fs::exists(dir.path() / "ck_step8.dhdf"));
  EXPECT_FALSE(fs::exists(dir.path() / "ck_step10.dhdf"));
  EXPECT_TRUE(fs::exists(dir.path() / "ck.dhdf"));
  EXPECT_NO_THROW(cli::load_model(dir.path() / "ck_step4.dhdf"));
}

TEST(Train, EmptyDatasetIsFatal) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 1);
  cfg.dataset = (dir.path() / "empty").string();
  fs::create_directories(cfg.dataset);
  std::ostringstream log;
  EXPECT_THROW(cli::cmd_train(cfg, log), ValidationError);
  EXPECT_FALSE(fs::exists(cfg.checkpoint));
}

TEST(Train, NonFiniteLossIsFatalWithStepNumber) {
  TempDir dir;
  auto cfg = tiny(dir.path(), 20);
  cfg.lr = 1e300;  // first update throws parameters to +-1e300, so activations overflow
  std::ostringstream log;
  try {
    cli::cmd_train(cfg, log);
    FAIL() << "training finished";
  } catch (const TrainingError& e) {
    EXPECT_TRUE(std::regex_match(e.what(), std::regex("loss is -?(nan|inf) at step [0-9]+"))) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Generate

class Generate : public ::testing::Test {
 protected:
  void SetUp() override {
    cfg_ = tiny(dir_.path(), 0);
    std::ostringstream log;
    cli::cmd_train(cfg_, log);
  }
  std::vector<std::vector<std::uint8_t>> run(const cli::GenerateOptions& o, const std::string& sub) {
    auto c = cfg_;
    c.out_dir = (dir_.path() / sub).string();
    std::ostringstream log;
    std::vector<std::vector<std::uint8_t>> out;
    for (const auto& p : cli::cmd_generate(c, o, log)) out.push_back(file_bytes(p));
    return out;
  }
  TempDir dir_;
  RunConfig cfg_;
};

TEST_F(Generate, ZeroCountWritesNothing) {
  cli::GenerateOptions o;
  o.n = 0;
  EXPECT_TRUE(run(o, "g0").empty());
  EXPECT_TRUE(fs::is_empty(dir_.path() / "g0"));
}

TEST_F(Generate, WritesNumberedPairsAtModelResolution) {
  cli::GenerateOptions o;
  o.n = 2;
  auto c = cfg_;
  c.out_dir = (dir_.path() / "g").string();
  std::ostringstream log;
  const auto files = cli::cmd_generate(c, o, log);
  ASSERT_EQ(files.size(), 4u);
  EXPECT_EQ(files[0].filename(), "gen_000.ppm");
  EXPECT_EQ(files[1].filename(), "gen_000_mask.pgm");
  EXPECT_EQ(files[3].filename(), "gen_001_mask.pgm");
  const auto img = io::read_ppm(files[0]);
  EXPECT_EQ(img.width, 8);
  EXPECT_EQ(img.height, 8);
  for (auto v : io::read_pgm(files[1]).pixels) EXPECT_TRUE(v == 0 || v == 255);
}

TEST_F(Generate, SameSeedGivesIdenticalBytes) {
  cli::GenerateOptions o;
  o.n = 2;
  EXPECT_EQ(run(o, "a"), run(o, "b"));
}

TEST_F(Generate, DifferentSeedChangesOutput) {
  cli::GenerateOptions o;
  const auto a = run(o, "a");
  cfg_.seed = 99;
  EXPECT_NE(a, run(o, "b"));
}

TEST_F(Generate, AllZeroControlMatchesNoControlAtInit) {
  const auto mask = dir_.path() / "zero.pgm";
  io::write_pgm(mask, {8, 8, std::vector<std::uint8_t>(64, 0)});
  cli::GenerateOptions none, zero;
  none.n = zero.n = 2;
  zero.control_mask = mask;
  EXPECT_EQ(run(none, "none"), run(zero, "zero"));
}

TEST_F(Generate, ReferenceNeedsPrompt) {
  const auto ref = dir_.path() / "ref.ppm";
  io::write_ppm(ref, {8, 8, std::vector<std::uint8_t>(192, 90)});
  cli::GenerateOptions o;
  o.reference = ref;
  EXPECT_THROW(run(o, "r"), UsageError);
  o.prompt = "blot on grid";
  EXPECT_EQ(run(o, "r").size(), 2u);
}

TEST_F(Generate, ReferenceMaskMustMatchReference) {
  const auto ref = dir_.path() / "ref.ppm", mask = dir_.path() / "ref.pgm";
  io::write_ppm(ref, {8, 8, std::vector<std::uint8_t>(192, 90)});
  io::write_pgm(mask, {4, 4, std::vector<std::uint8_t>(16, 255)});
  cli::GenerateOptions o;
  o.reference = ref;
  o.reference_mask = mask;
  o.prompt = "blot";
  EXPECT_THROW(run(o, "r"), ValidationError);
}

TEST_F(Generate, PromptWithoutKnownCategoryIsRejected) {
  cli::GenerateOptions o;
  o.prompt = "crack on tile";
  EXPECT_THROW(run(o, "p"), ValidationError);
}

TEST_F(Generate, CorruptCheckpointIsFatalWithReason) {
  auto bytes = file_bytes(cfg_.checkpoint);
  bytes[bytes.size() / 2] ^= 1;
  io::write_bytes(cfg_.checkpoint, bytes);
  try {
    run({}, "c");
    FAIL();
  } catch (const CorruptCheckpoint& e) {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }
}

// ---------------------------------------------------------------------------
// Check

TEST(Check, DefaultConfigPassesWithStableLineFormat) {
  std::ostringstream out;
  EXPECT_EQ(cli::cmd_check(RunConfig{}, out), 0) << out.str();
  std::istringstream in(out.str());
  const std::regex line_re("(PASS|FAIL) [a-z0-9_]+ -?[0-9]\\.[0-9]{6}e[-+][0-9]{2,3}");
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    EXPECT_TRUE(std::regex_match(line, line_re)) << line;
    ++lines;
  }
  EXPECT_GT(lines, 10);
}

TEST(Check, UngroupedConvFailsDecoupling) {
  std::ostringstream out;
  EXPECT_GE(cli::cmd_check(RunConfig{}, out, true), 1);
  EXPECT_NE(out.str().find("FAIL backbone_decoupling "), std::string::npos) << out.str();
}
