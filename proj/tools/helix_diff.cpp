#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <utility>

#include "helix/commands.hpp"
#include "helix/data.hpp"
#include "helix/errors.hpp"

namespace {

struct Overrides {
  std::string config;
  std::vector<std::pair<std::string, std::string>> values;  // key, text

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "flat key = value config file");
    for (const char* key : {"seed", "preset", "dataset", "checkpoint", "steps", "batch", "lr", "image_size", "T", "K",
                            "save_every"})
      app->add_option(std::string("--") + key, storage[key], std::string("override config key ") + key)
          ->each([this, key](const std::string& v) { values.emplace_back(key, v); });
    app->add_option("--out", storage["out_dir"], "output directory (config key out_dir)")
        ->each([this](const std::string& v) { values.emplace_back("out_dir", v); });
    app->add_option("--set", sets, "extra key=value overrides")->each([this](const std::string& kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got " + kv);
      values.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    });
  }

  helix::cli::RunConfig resolve() const {
    helix::cli::RunConfig cfg;
    if (!config.empty()) cfg = helix::cli::load_config(config);
    for (const auto& [k, v] : values) helix::cli::set_key(cfg, k, v);
    cfg.validate();
    return cfg;
  }

  std::map<std::string, std::string> storage;
  std::vector<std::string> sets;
};

}  // namespace

int main(int argc, char** argv) {
  helix::cli::tune_allocator();
  CLI::App app{"Joint anomaly image and mask diffusion"};
  app.require_subcommand(1);

  Overrides train_o, gen_o, check_o;
  auto* train = app.add_subcommand("train", "train on a dataset tree, writing loss.csv and a checkpoint");
  train_o.add_to(train);

  auto* gen = app.add_subcommand("generate", "sample image/mask pairs from a checkpoint");
  gen_o.add_to(gen);
  helix::cli::GenerateOptions gopts;
  std::string control, reference, reference_mask;
  gen->add_option("--prompt", gopts.prompt, "text prompt (default: each reference's own prompt)");
  gen->add_option("--control-mask", control, "binary PGM marking where the anomaly should appear");
  gen->add_option("--reference", reference, "reference PPM instead of a dataset sample");
  gen->add_option("--reference-mask", reference_mask, "PGM support of --reference");
  gen->add_option("-n,--count", gopts.n, "number of pairs")->check(CLI::NonNegativeNumber);

  auto* check = app.add_subcommand("check", "run the invariant suite; exit code is the failure count");
  check_o.add_to(check);
  bool ungrouped = false;
  check->add_flag("--debug-ungrouped", ungrouped)->group("");

  auto* fixtures = app.add_subcommand("fixtures", "write a synthetic dataset tree");
  std::string fixture_root = "fixtures";
  std::uint64_t fixture_seed = 1;
  int fixture_n = 8;
  fixtures->add_option("--root", fixture_root, "output directory");
  fixtures->add_option("--seed", fixture_seed, "generator seed");
  fixtures->add_option("-n,--count", fixture_n, "number of pairs")->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      helix::cli::cmd_train(train_o.resolve(), std::cout);
    } else if (*gen) {
      if (!control.empty()) gopts.control_mask = control;
      if (!reference.empty()) gopts.reference = reference;
      if (!reference_mask.empty()) gopts.reference_mask = reference_mask;
      helix::cli::cmd_generate(gen_o.resolve(), gopts, std::cout);
    } else if (*check) {
      return helix::cli::cmd_check(check_o.resolve(), std::cout, ungrouped);
    } else if (*fixtures) {
      const auto files = helix::data::make_synthetic_fixtures(fixture_root, fixture_seed, fixture_n);
      std::cout << "wrote " << files.size() << " files under " << fixture_root << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
