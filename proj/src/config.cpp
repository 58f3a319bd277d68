#include "pan/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "pan/error.hpp"

namespace pan {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (!text.empty() && text[0] == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || text.empty()) {
    throw ConfigError(key, key + ": cannot parse '" + text + "' as a number");
  }
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(value)) throw ConfigError(key, key + ": value must be finite");
  }
  return value;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key, key + ": expected true or false, got '" + text + "'");
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& values, const std::function<std::string(const T&)>& fmt) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += fmt(values[i]);
  }
  return out;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

struct Entry {
  std::string section;
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;

  std::string qualified() const { return section.empty() ? key : section + "." + key; }
};

template <typename Ref>
Entry int_entry(std::string section, std::string key, Ref ref) {
  const std::string q = section.empty() ? key : section + "." + key;
  return {section, key, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, q](RunConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(ref(c))>;
            ref(c) = parse_number<T>(q, v);
          }};
}

template <typename Ref>
Entry double_entry(std::string section, std::string key, Ref ref) {
  const std::string q = section.empty() ? key : section + "." + key;
  return {section, key, [ref](const RunConfig& c) { return format_double(ref(const_cast<RunConfig&>(c))); },
          [ref, q](RunConfig& c, const std::string& v) { ref(c) = parse_number<double>(q, v); }};
}

template <typename Ref>
Entry bool_entry(std::string section, std::string key, Ref ref) {
  const std::string q = section.empty() ? key : section + "." + key;
  return {section, key, [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref, q](RunConfig& c, const std::string& v) { ref(c) = parse_bool(q, v); }};
}

template <typename Ref>
Entry string_entry(std::string section, std::string key, Ref ref) {
  return {section, key, [ref](const RunConfig& c) { return quote(ref(const_cast<RunConfig&>(c))); },
          [ref](RunConfig& c, const std::string& v) { ref(c) = v; }};
}

template <typename Ref>
Entry int_list_entry(std::string section, std::string key, Ref ref) {
  const std::string q = section.empty() ? key : section + "." + key;
  return {section, key,
          [ref](const RunConfig& c) {
            return join<std::int64_t>(ref(const_cast<RunConfig&>(c)),
                                      [](const std::int64_t& v) { return std::to_string(v); });
          },
          [ref, q](RunConfig& c, const std::string& v) {
            std::vector<std::int64_t> out;
            for (const auto& item : split_csv(v)) out.push_back(parse_number<std::int64_t>(q, item));
            ref(c) = out;
          }};
}

template <typename Ref>
Entry double_list_entry(std::string section, std::string key, Ref ref) {
  const std::string q = section.empty() ? key : section + "." + key;
  return {section, key,
          [ref](const RunConfig& c) {
            return join<double>(ref(const_cast<RunConfig&>(c)), [](const double& v) { return format_double(v); });
          },
          [ref, q](RunConfig& c, const std::string& v) {
            std::vector<double> out;
            for (const auto& item : split_csv(v)) out.push_back(parse_number<double>(q, item));
            ref(c) = out;
          }};
}

template <typename Ref>
Entry string_list_entry(std::string section, std::string key, Ref ref) {
  return {section, key,
          [ref](const RunConfig& c) {
            return join<std::string>(ref(const_cast<RunConfig&>(c)), [](const std::string& v) { return v; });
          },
          [ref](RunConfig& c, const std::string& v) { ref(c) = split_csv(v); }};
}

#define PAN_FIELD(expr) [](RunConfig& c) -> auto& { return expr; }

const std::vector<Entry>& schema() {
  static const std::vector<Entry> entries{
      int_entry("", "seed", PAN_FIELD(c.seed)),
      string_entry("", "data_dir", PAN_FIELD(c.data_dir)),
      string_entry("", "out_dir", PAN_FIELD(c.out_dir)),
      string_entry("", "checkpoint", PAN_FIELD(c.checkpoint)),

      int_entry("data", "num_classes", PAN_FIELD(c.num_classes)),
      int_entry("data", "height", PAN_FIELD(c.height)),
      int_entry("data", "width", PAN_FIELD(c.width)),
      int_entry("data", "min_shapes", PAN_FIELD(c.min_shapes)),
      int_entry("data", "max_shapes", PAN_FIELD(c.max_shapes)),
      double_entry("data", "noise", PAN_FIELD(c.noise)),
      int_entry("data", "n_train", PAN_FIELD(c.n_train)),
      int_entry("data", "n_val", PAN_FIELD(c.n_val)),

      int_entry("model", "stem_channels", PAN_FIELD(c.stem_channels)),
      int_list_entry("model", "stage_channels", PAN_FIELD(c.stage_channels)),
      int_list_entry("model", "blocks_per_stage", PAN_FIELD(c.blocks_per_stage)),
      int_entry("model", "dilation", PAN_FIELD(c.dilation)),
      string_entry("model", "center", PAN_FIELD(c.center)),
      string_entry("model", "fpa_kernels", PAN_FIELD(c.fpa_kernels)),
      string_entry("model", "fpa_pool", PAN_FIELD(c.fpa_pool)),
      bool_entry("model", "fpa_global_pool", PAN_FIELD(c.fpa_global_pool)),
      int_entry("model", "decoder_width", PAN_FIELD(c.decoder_width)),
      int_entry("model", "gau_blocks", PAN_FIELD(c.gau_blocks)),
      bool_entry("model", "gau_global_context", PAN_FIELD(c.gau_global_context)),
      int_entry("model", "gau_reduce_kernel", PAN_FIELD(c.gau_reduce_kernel)),

      double_entry("train", "base_lr", PAN_FIELD(c.train.base_lr)),
      double_entry("train", "power", PAN_FIELD(c.train.power)),
      double_entry("train", "momentum", PAN_FIELD(c.train.momentum)),
      double_entry("train", "weight_decay", PAN_FIELD(c.train.weight_decay)),
      int_entry("train", "batch_size", PAN_FIELD(c.train.batch_size)),
      int_entry("train", "max_iter", PAN_FIELD(c.train.max_iter)),
      int_entry("train", "crop", PAN_FIELD(c.train.crop)),
      int_entry("train", "checkpoint_interval", PAN_FIELD(c.train.checkpoint_interval)),
      bool_entry("train", "flip", PAN_FIELD(c.train.flip)),
      double_entry("train", "min_scale", PAN_FIELD(c.train.min_scale)),
      double_entry("train", "max_scale", PAN_FIELD(c.train.max_scale)),
      bool_entry("train", "resume", PAN_FIELD(c.resume)),

      double_list_entry("eval", "scales", PAN_FIELD(c.scales)),
      bool_entry("eval", "flip", PAN_FIELD(c.flip)),
      string_entry("eval", "split", PAN_FIELD(c.split)),

      string_entry("predict", "image", PAN_FIELD(c.image)),
      string_entry("predict", "mask_out", PAN_FIELD(c.mask_out)),
      string_entry("predict", "color_out", PAN_FIELD(c.color_out)),

      string_entry("ablate", "grid", PAN_FIELD(c.grid)),
      string_list_entry("ablate", "variants", PAN_FIELD(c.variants)),
      int_entry("ablate", "repeat", PAN_FIELD(c.repeat)),
      int_entry("ablate", "max_iter", PAN_FIELD(c.ablate_max_iter)),
      int_entry("ablate", "batch_size", PAN_FIELD(c.ablate_batch_size)),
      double_entry("ablate", "base_lr", PAN_FIELD(c.ablate_base_lr)),

      int_entry("gradcheck", "samples", PAN_FIELD(c.gc_samples)),
      double_entry("gradcheck", "h", PAN_FIELD(c.gc_h)),
      double_entry("gradcheck", "tol", PAN_FIELD(c.gc_tol)),
      bool_entry("gradcheck", "inject_fault", PAN_FIELD(c.inject_fault)),
  };
  return entries;
}

#undef PAN_FIELD

const Entry& find_entry(const std::string& qualified) {
  for (const Entry& e : schema()) {
    if (e.qualified() == qualified) return e;
  }
  std::string known;
  for (const Entry& e : schema()) known += (known.empty() ? "" : ", ") + e.qualified();
  throw ConfigError(qualified, "unknown config key '" + qualified + "' (known keys: " + known + ")");
}

// Strip a trailing comment and unquote a value; quotes protect '#' and surrounding spaces.
std::string parse_value(const std::string& raw, const std::string& where) {
  const std::string v = trim(raw);
  if (v.empty() || v[0] != '"') {
    const auto hash = v.find('#');
    return trim(hash == std::string::npos ? v : v.substr(0, hash));
  }
  std::string out;
  std::size_t i = 1;
  for (; i < v.size(); ++i) {
    if (v[i] == '\\' && i + 1 < v.size()) {
      out.push_back(v[++i]);
    } else if (v[i] == '"') {
      break;
    } else {
      out.push_back(v[i]);
    }
  }
  if (i >= v.size()) throw ConfigError(where, where + ": unterminated quoted value");
  const std::string rest = trim(v.substr(i + 1));
  if (!rest.empty() && rest[0] != '#') throw ConfigError(where, where + ": unexpected text after quoted value");
  return out;
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Entry& e : schema()) out.push_back(e.qualified());
  return out;
}

void set_config_value(RunConfig& config, const std::string& qualified_key, const std::string& value) {
  find_entry(qualified_key).set(config, value);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(assignment, "override '" + assignment + "' must look like section.key=value");
  }
  const std::string key = trim(assignment.substr(0, eq));
  set_config_value(config, key, parse_value(assignment.substr(eq + 1), key));
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig config;
  std::istringstream in(text);
  std::string line;
  std::string section;
  std::set<std::string> seen;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t[0] == '[') {
      const auto close = t.find(']');
      if (close == std::string::npos || !trim(t.substr(close + 1)).empty()) {
        throw ConfigError(where, where + ": malformed section header '" + t + "'");
      }
      section = trim(t.substr(1, close - 1));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(where, where + ": expected 'key = value'");
    const std::string key = trim(t.substr(0, eq));
    const std::string qualified = section.empty() ? key : section + "." + key;
    if (!seen.insert(qualified).second) {
      throw ConfigError(qualified, where + ": key '" + qualified + "' given twice");
    }
    try {
      find_entry(qualified).set(config, parse_value(t.substr(eq + 1), qualified));
    } catch (const ConfigError& e) {
      throw ConfigError(e.field(), where + ": " + e.what());
    }
  }
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read config file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), path);
}

std::string serialize_run_config(const RunConfig& config) {
  std::string out;
  std::string section = "\x01";
  for (const Entry& e : schema()) {
    if (e.section != section) {
      section = e.section;
      if (!section.empty()) out += "\n[" + section + "]\n";
    }
    out += e.key + " = " + e.get(config) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  auto require = [](bool ok, const char* key, const std::string& msg) {
    if (!ok) throw ConfigError(key, std::string(key) + ": " + msg);
  };
  require(n_train >= 1, "data.n_train", "must be at least 1");
  require(n_val >= 1, "data.n_val", "must be at least 1");
  require(stage_channels.size() == 4, "model.stage_channels", "needs exactly four values");
  require(blocks_per_stage.size() == 4, "model.blocks_per_stage", "needs exactly four values");
  require(center == "fpa" || center == "se" || center == "none", "model.center", "must be fpa, se or none");
  require(fpa_kernels == "357" || fpa_kernels == "333", "model.fpa_kernels", "must be 357 or 333");
  require(fpa_pool == "avg" || fpa_pool == "max", "model.fpa_pool", "must be avg or max");
  require(gau_blocks >= 0 && gau_blocks <= 3, "model.gau_blocks", "must be between 0 and 3");
  require(decoder_width >= 1, "model.decoder_width", "must be positive");
  require(!scales.empty(), "eval.scales", "needs at least one scale");
  require(split == "val" || split == "train", "eval.split", "must be val or train");
  require(grid == "fpa" || grid == "gau" || grid == "all", "ablate.grid", "must be fpa, gau or all");
  require(repeat >= 1, "ablate.repeat", "must be at least 1");
  require(ablate_max_iter >= 1, "ablate.max_iter", "must be at least 1");
  require(ablate_batch_size >= 2, "ablate.batch_size", "must be at least 2");
  require(ablate_base_lr > 0.0, "ablate.base_lr", "must be positive");
  require(gc_samples >= 1, "gradcheck.samples", "must be at least 1");
  require(gc_h > 0.0, "gradcheck.h", "must be positive");
  require(gc_tol > 0.0, "gradcheck.tol", "must be positive");

  auto scoped = [](const char* section, const auto& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(section) + "." + e.field(), e.what());
    }
  };
  scoped("data", [&] { dataset_spec(false).validate(); });
  scoped("model", [&] { pan_config().validate(); });
  scoped("train", [&] { train_config().validate(); });
  scoped("eval", [&] { eval_config().validate(); });
  require(height % 16 == 0 && width % 16 == 0, "data.height", "canvas extents must be multiples of 16");
}

DatasetSpec RunConfig::dataset_spec(bool validation_split) const {
  DatasetSpec spec;
  spec.num_classes = num_classes;
  spec.height = height;
  spec.width = width;
  spec.min_shapes = min_shapes;
  spec.max_shapes = max_shapes;
  spec.noise = noise;
  spec.seed = validation_split ? mix_seed(seed, 0x56414cULL) : seed;
  return spec;
}

PanConfig RunConfig::pan_config() const {
  PanConfig c;
  c.num_classes = num_classes;
  c.backbone.stem_channels = stem_channels;
  for (std::size_t i = 0; i < 4 && i < stage_channels.size(); ++i) c.backbone.stage_channels[i] = stage_channels[i];
  for (std::size_t i = 0; i < 4 && i < blocks_per_stage.size(); ++i) {
    c.backbone.blocks_per_stage[i] = blocks_per_stage[i];
  }
  c.backbone.final_stage_dilation = dilation;
  const PoolMode pool = fpa_pool == "max" ? PoolMode::max : PoolMode::avg;
  if (center == "fpa") {
    c.fpa = fpa_kernels == "333" ? FpaConfig::c333(0, 0, pool, fpa_global_pool)
                                 : FpaConfig::c357(0, 0, pool, fpa_global_pool);
  } else if (center == "se") {
    c.fpa = FpaConfig::se(0);
  }
  GauConfig g;
  g.use_global_context = gau_global_context;
  g.reduce_kernel = gau_reduce_kernel;
  c.gau_chain.assign(static_cast<std::size_t>(std::max<std::int64_t>(gau_blocks, 0)), g);
  c.rechain(decoder_width);
  return c;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

EvalConfig RunConfig::eval_config() const { return EvalConfig{scales, flip}; }

std::string RunConfig::checkpoint_path() const {
  return checkpoint.empty() ? (std::filesystem::path(out_dir) / "checkpoint.bin").string() : checkpoint;
}

}  // namespace pan
