#include "helix/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "helix/errors.hpp"

namespace helix::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + value + "'");
  return out;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::vector<std::string> split_list(const std::string& value, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, sep)) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Key number_key(const char* name, T RunConfig::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { c.*field = parse_number<T>(name, v); },
          [=](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.*field);
            else
              return std::to_string(c.*field);
          }};
}

Key string_key(const char* name, std::string RunConfig::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { c.*field = v; }, [=](const RunConfig& c) { return c.*field; }};
}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      number_key("seed", &RunConfig::seed),
      number_key("image_size", &RunConfig::image_size),
      number_key("K", &RunConfig::K),
      number_key("T", &RunConfig::T),
      number_key("beta_start", &RunConfig::beta_start),
      number_key("beta_end", &RunConfig::beta_end),
      number_key("lr", &RunConfig::lr),
      number_key("batch", &RunConfig::batch),
      number_key("steps", &RunConfig::steps),
      number_key("save_every", &RunConfig::save_every),
      string_key("preset", &RunConfig::preset),
      string_key("dataset", &RunConfig::dataset),
      string_key("checkpoint", &RunConfig::checkpoint),
      string_key("out_dir", &RunConfig::out_dir),
      number_key("base_channels", &RunConfig::base_channels),
      number_key("depth", &RunConfig::depth),
      {"channel_mult",
       [](RunConfig& c, const std::string& v) {
         c.channel_mult.clear();
         for (const auto& item : split_list(v, ',')) c.channel_mult.push_back(parse_number<int>("channel_mult", item));
       },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.channel_mult.size(); ++i) s += (i ? "," : "") + std::to_string(c.channel_mult[i]);
         return s;
       }},
      number_key("heads", &RunConfig::heads),
      number_key("d_text", &RunConfig::d_text),
      number_key("min_fraction", &RunConfig::min_fraction),
      number_key("control_rate", &RunConfig::control_rate),
      {"vocabulary", [](RunConfig& c, const std::string& v) { c.vocabulary = split_list(v, ' '); },
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.vocabulary.size(); ++i) s += (i ? " " : "") + c.vocabulary[i];
         return s;
       }},
  };
  return table;
}

void require(bool ok, const std::string& key, const std::string& why) {
  if (!ok) throw ConfigError("config key '" + key + "' " + why);
}

}  // namespace

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : keys())
    if (key == k.name) {
      k.set(cfg, value);
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& k : keys()) out.emplace_back(k.name);
  return out;
}

void RunConfig::validate() const {
  require(image_size > 0, "image_size", "must be positive");
  require(K > 0 && K <= image_size, "K", "must be in [1, image_size]");
  require(T > 0, "T", "must be positive");
  require(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0, "beta_start", "and beta_end must satisfy 0 < start <= end < 1");
  require(lr > 0.0, "lr", "must be positive");
  require(batch > 0, "batch", "must be positive");
  require(steps >= 0, "steps", "must not be negative");
  require(save_every >= 0, "save_every", "must not be negative");
  const auto& names = backbone::BlockPlacement::preset_names();
  require(std::find(names.begin(), names.end(), preset) != names.end(), "preset", "'" + preset + "' is not a known preset");
  require(base_channels > 0, "base_channels", "must be positive");
  require(depth > 0, "depth", "must be positive");
  require(static_cast<int>(channel_mult.size()) == depth, "channel_mult", "needs one entry per level");
  require(heads > 0, "heads", "must be positive");
  require(d_text > 0, "d_text", "must be positive");
  require(min_fraction >= 0.0 && min_fraction <= 1.0, "min_fraction", "must be in [0, 1]");
  require(control_rate >= 0.0 && control_rate <= 1.0, "control_rate", "must be in [0, 1]");
  backbone(2).validate();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& k : keys()) out += std::string(k.name) + " = " + k.get(*this) + "\n";
  return out;
}

backbone::BackboneConfig RunConfig::backbone(int vocab_size) const {
  backbone::BackboneConfig c;
  c.image_size = image_size;
  c.base_channels = base_channels;
  c.depth = depth;
  c.channel_mult = channel_mult;
  c.heads = heads;
  c.vocab_size = vocab_size;
  c.d_text = d_text;
  return c;
}

backbone::BlockPlacement RunConfig::placement() const { return backbone::BlockPlacement::preset(preset, depth); }

diffusion::NoiseSchedule RunConfig::schedule() const { return diffusion::make_linear_schedule(T, beta_start, beta_end); }

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::stringstream ss(text);
  std::string line;
  int number = 0;
  while (std::getline(ss, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected 'key = value'");
    set_key(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

}  // namespace helix::cli
