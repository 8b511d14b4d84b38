#include "config.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>

#include <toml.hpp>

#include "mrcl/errors.hpp"

namespace mrcl::cli {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void type_error(const std::string& key, const char* want) {
  throw ConfigError(key + ": expected " + want);
}

void read(const toml::node& n, const std::string& key, double& out) {
  if (const auto* v = n.as_floating_point()) {
    out = v->get();
  } else if (const auto* i = n.as_integer()) {
    out = static_cast<double>(i->get());
  } else {
    type_error(key, "a number");
  }
}

void read(const toml::node& n, const std::string& key, std::int64_t& out) {
  const auto* v = n.as_integer();
  if (!v) type_error(key, "an integer");
  out = v->get();
}

void read(const toml::node& n, const std::string& key, int& out) {
  std::int64_t v = 0;
  read(n, key, v);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) type_error(key, "a 32-bit integer");
  out = static_cast<int>(v);
}

void read(const toml::node& n, const std::string& key, std::uint64_t& out) {
  std::int64_t v = 0;
  read(n, key, v);
  if (v < 0) type_error(key, "a non-negative integer");
  out = static_cast<std::uint64_t>(v);
}

void read(const toml::node& n, const std::string& key, bool& out) {
  const auto* v = n.as_boolean();
  if (!v) type_error(key, "a boolean");
  out = v->get();
}

void read(const toml::node& n, const std::string& key, std::string& out) {
  const auto* v = n.as_string();
  if (!v) type_error(key, "a string");
  out = v->get();
}

void read(const toml::node& n, const std::string& key, fs::path& out) {
  std::string s;
  read(n, key, s);
  out = s;
}

template <typename T>
void read(const toml::node& n, const std::string& key, std::vector<T>& out) {
  const auto* arr = n.as_array();
  if (!arr) type_error(key, "an array");
  std::vector<T> tmp;
  for (std::size_t i = 0; i < arr->size(); ++i) {
    T v{};
    read(*arr->get(i), key + "[" + std::to_string(i) + "]", v);
    tmp.push_back(v);
  }
  out = std::move(tmp);
}

template <typename T, std::size_t N>
void read(const toml::node& n, const std::string& key, std::array<T, N>& out) {
  std::vector<T> tmp;
  read(n, key, tmp);
  if (tmp.size() != N) throw ConfigError(key + ": expected an array of " + std::to_string(N) + " entries");
  std::copy(tmp.begin(), tmp.end(), out.begin());
}

std::int64_t as_toml(int v) { return v; }
std::int64_t as_toml(std::int64_t v) { return v; }
std::int64_t as_toml(std::uint64_t v) {
  if (v > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
    throw ConfigError("value " + std::to_string(v) + " does not fit a TOML integer");
  }
  return static_cast<std::int64_t>(v);
}
double as_toml(double v) { return v; }
bool as_toml(bool v) { return v; }
std::string as_toml(const std::string& v) { return v; }
std::string as_toml(const fs::path& v) { return v.string(); }

template <typename Range>
toml::array array_of(const Range& r) {
  toml::array arr;
  for (const auto& v : r) arr.push_back(as_toml(v));
  return arr;
}
template <typename T>
toml::array as_toml(const std::vector<T>& v) {
  return array_of(v);
}
template <typename T, std::size_t N>
toml::array as_toml(const std::array<T, N>& v) {
  return array_of(v);
}

struct Field {
  std::string key;
  std::function<void(const toml::node&)> read;
  std::function<void(toml::table&, const std::string&)> write;
};

std::string format_number(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

eval::Comparison parse_comparison(const std::string& text, const std::string& key) {
  const bool strict = text.find(">=") == std::string::npos;
  const auto pos = text.find('>');
  if (pos == std::string::npos) throw ConfigError(key + ": expected \"a>b\" or \"a>=b\", got \"" + text + "\"");
  eval::Comparison c;
  c.strict = strict;
  try {
    std::size_t used = 0;
    const std::string lhs = text.substr(0, pos);
    const std::string rhs = text.substr(pos + (strict ? 1 : 2));
    c.better = std::stod(lhs, &used);
    if (used != lhs.size()) throw std::invalid_argument(lhs);
    c.worse = std::stod(rhs, &used);
    if (used != rhs.size()) throw std::invalid_argument(rhs);
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": cannot read comparison \"" + text + "\"");
  }
  return c;
}

std::string format_comparison(const eval::Comparison& c) {
  return format_number(c.better) + (c.strict ? ">" : ">=") + format_number(c.worse);
}

data::SeedPolicy parse_seed_policy(std::string_view s) {
  if (s == "per_sample") return data::SeedPolicy::kPerSample;
  if (s == "fixed_per_sample") return data::SeedPolicy::kFixedPerSample;
  throw ConfigError("unknown seed policy '" + std::string(s) + "' (expected per_sample or fixed_per_sample)");
}

std::string seed_policy_name(data::SeedPolicy p) {
  return p == data::SeedPolicy::kPerSample ? "per_sample" : "fixed_per_sample";
}

class Registry {
 public:
  explicit Registry(RunConfig& c) { build(c); }

  [[nodiscard]] const std::vector<Field>& fields() const { return fields_; }

  const Field* find(std::string_view key) const {
    for (const auto& f : fields_) {
      if (f.key == key) return &f;
    }
    return nullptr;
  }

 private:
  template <typename T>
  void bind(std::string key, T& ref) {
    fields_.push_back({key, [key, &ref](const toml::node& n) { read(n, key, ref); },
                       [&ref](toml::table& t, const std::string& leaf) { t.insert(leaf, as_toml(ref)); }});
  }

  template <typename E, typename Parse, typename Name>
  void bind_enum(std::string key, E& ref, Parse parse, Name name) {
    fields_.push_back({key,
                       [key, &ref, parse](const toml::node& n) {
                         std::string s;
                         read(n, key, s);
                         try {
                           ref = parse(s);
                         } catch (const ConfigError& e) {
                           throw ConfigError(key + ": " + e.what());
                         }
                       },
                       [&ref, name](toml::table& t, const std::string& leaf) { t.insert(leaf, std::string(name(ref))); }});
  }

  void build(RunConfig& c) {
    auto& ds = c.pretrain.dataset;
    auto& aug = c.pretrain.aug;
    auto& m = c.pretrain.model;
    auto& t = c.pretrain.train;
    auto& l = t.loss;
    auto& p = c.probe;

    bind("run.name", c.run_name);
    bind("run.dir", c.pretrain.run_dir);

    bind_enum("dataset.name", ds.name, data::parse_dataset_name,
              [](data::DatasetName n) { return data::to_string(n); });
    bind("dataset.root", ds.root);
    bind_enum("dataset.split", ds.split, data::parse_split, [](data::Split s) { return data::to_string(s); });
    bind("dataset.limit", ds.limit);

    bind("aug.crop_scale", aug.crop_scale_range);
    bind("aug.crop_ratio", aug.crop_ratio_range);
    bind("aug.output_size", aug.output_size);
    bind("aug.hflip_prob", aug.hflip_prob);
    bind("aug.jitter_strength", aug.color_jitter_strength);
    bind("aug.jitter_prob", aug.color_jitter_prob);
    bind("aug.grayscale_prob", aug.grayscale_prob);
    bind_enum("aug.seed_policy", aug.seed_policy, parse_seed_policy, seed_policy_name);

    bind("model.image_height", m.image_height);
    bind("model.image_width", m.image_width);
    bind("model.channels", m.channels);
    bind("model.patch_size", m.patch_size);
    bind("model.embed_dim", m.embed_dim);
    bind("model.depth", m.depth);
    bind("model.num_heads", m.num_heads);
    bind("model.mlp_ratio", m.mlp_ratio);
    bind("model.decoder_dim", m.decoder_dim);
    bind("model.decoder_depth", m.decoder_depth);
    bind("model.decoder_heads", m.decoder_heads);
    bind("model.proj_hidden_dim", m.proj_hidden_dim);
    bind("model.proj_dim", m.proj_dim);
    bind("model.use_class_token", m.use_class_token);
    bind("model.norm_eps", m.norm_eps);
    bind("model.input_mean", m.input_mean);
    bind("model.input_std", m.input_std);

    bind("train.base_lr", t.base_lr);
    bind("train.batch_size", t.batch_size);
    bind("train.weight_decay", t.weight_decay);
    bind("train.adam_betas", t.adam_betas);
    bind("train.adam_eps", t.adam_eps);
    bind("train.epochs", t.epochs);
    bind("train.warmup_epochs", t.warmup_epochs);
    bind("train.mask_ratio", t.mask_ratio);
    bind_enum("train.mask_strategy", t.mask_strategy, masking::parse_strategy,
              [](masking::MaskStrategy s) { return masking::to_string(s); });
    bind_enum("train.head", t.head, loss::parse_head, [](loss::ContrastiveHead h) { return loss::to_string(h); });
    bind("train.seed", t.seed);
    bind("train.checkpoint_every", t.checkpoint_every);
    bind("train.grad_clip", t.grad_clip);

    bind("loss.alpha", l.alpha);
    bind("loss.lam", l.lam);
    bind("loss.contrastive_weight", l.contrastive_weight);
    bind("loss.tau", l.tau);
    bind("loss.bt_lambda", l.bt_lambda);
    bind("loss.bt_eps", l.bt_eps);

    bind("probe.lr", p.lr);
    bind("probe.batch_size", p.batch_size);
    bind("probe.epochs", p.epochs);
    bind_enum("probe.optimizer", p.optimizer, eval::parse_probe_optimizer,
              [](eval::ProbeOptimizer o) { return eval::to_string(o); });
    bind("probe.momentum", p.momentum);
    bind("probe.weight_decay", p.weight_decay);
    bind("probe.augment_views", p.augment_views);
    bind("probe.dataset", c.probe_data.dataset);
    bind("probe.root", c.probe_data.root);
    bind("probe.train_limit", c.probe_data.train_limit);
    bind("probe.test_limit", c.probe_data.test_limit);

    bind_enum("sweep.axis", c.sweep.axis, eval::parse_sweep_axis, [](eval::SweepAxis a) { return eval::to_string(a); });
    bind("sweep.values", c.sweep.values);
    bind("sweep.seeds", c.sweep.seeds);
    auto& compare = c.sweep.compare;
    fields_.push_back({"sweep.compare",
                       [&compare](const toml::node& n) {
                         std::vector<std::string> items;
                         read(n, "sweep.compare", items);
                         std::vector<eval::Comparison> out;
                         for (const auto& s : items) out.push_back(parse_comparison(s, "sweep.compare"));
                         compare = std::move(out);
                       },
                       [&compare](toml::table& t, const std::string& leaf) {
                         std::vector<std::string> items;
                         for (const auto& c : compare) items.push_back(format_comparison(c));
                         t.insert(leaf, as_toml(items));
                       }});
  }

  std::vector<Field> fields_;
};

void apply_table(RunConfig& cfg, const toml::table& root) {
  Registry reg(cfg);
  for (auto&& [section, node] : root) {
    const std::string name(section.str());
    const auto* tbl = node.as_table();
    if (!tbl) throw ConfigError("unknown top-level key '" + name + "' (settings belong in a [section])");
    for (auto&& [leaf, value] : *tbl) {
      const std::string key = name + "." + std::string(leaf.str());
      const Field* f = reg.find(key);
      if (!f) throw ConfigError("unknown key '" + key + "'");
      f->read(value);
    }
  }
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

}  // namespace

train::DatasetSpec RunConfig::probe_train_spec() const {
  train::DatasetSpec s;
  if (probe_data.dataset.empty()) {
    s.name = pretrain.dataset.name == data::DatasetName::kStl10Unlabeled ? data::DatasetName::kStl10Labeled
                                                                          : pretrain.dataset.name;
  } else {
    s.name = data::parse_dataset_name(probe_data.dataset);
  }
  s.root = probe_data.root.empty() ? pretrain.dataset.root : probe_data.root;
  s.split = data::Split::kTrain;
  s.limit = probe_data.train_limit;
  return s;
}

train::DatasetSpec RunConfig::probe_test_spec() const {
  train::DatasetSpec s = probe_train_spec();
  s.split = data::Split::kTest;
  s.limit = probe_data.test_limit;
  return s;
}

eval::SweepSpec RunConfig::sweep_spec() const {
  eval::SweepSpec s;
  s.axis = sweep.axis;
  s.values = sweep.values;
  s.seeds = sweep.seeds;
  s.comparisons = sweep.compare;
  s.base = pretrain;
  s.probe_train = probe_train_spec();
  s.probe_test = probe_test_spec();
  s.probe = probe;
  s.out_dir = pretrain.run_dir;
  return s;
}

void RunConfig::validate() const {
  if (run_name.empty() || run_name.find('/') != std::string::npos) {
    throw ConfigError("run.name must be a non-empty name without '/'");
  }
  train::PretrainConfig p = pretrain;
  if (p.run_dir.empty()) p.run_dir = ".";
  p.validate();
  probe.validate();
  if (!probe_data.dataset.empty()) {
    try {
      (void)data::parse_dataset_name(probe_data.dataset);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("probe.dataset: ") + e.what());
    }
  }
}

RunConfig parse_config_text(std::string_view text, std::string_view source) {
  toml::table root;
  try {
    root = toml::parse(text, source);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << source << ":" << e.source().begin.line << ":" << e.source().begin.column << ": " << e.description();
    throw ConfigError(msg.str());
  }
  RunConfig cfg;
  apply_table(cfg, root);
  return cfg;
}

RunConfig parse_config_file(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file does not exist: " + path.string());
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

void apply_override(RunConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override '" + std::string(assignment) + "' must look like key=value");
  }
  std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  while (!key.empty() && key.back() == ' ') key.pop_back();

  Registry reg(cfg);
  const Field* field = reg.find(key);
  if (!field && key.find('.') == std::string::npos) {
    std::vector<const Field*> matches;
    for (const auto& f : reg.fields()) {
      if (f.key.substr(f.key.find('.') + 1) == key) matches.push_back(&f);
    }
    if (matches.size() > 1) {
      std::string names;
      for (const auto* f : matches) names += (names.empty() ? "" : ", ") + f->key;
      throw ConfigError("override key '" + key + "' is ambiguous: " + names);
    }
    if (!matches.empty()) field = matches.front();
  }
  if (!field) throw ConfigError("unknown key '" + key + "'");

  toml::table parsed;
  bool typed = true;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    typed = false;
  }
  if (typed) {
    field->read(*parsed.get("v"));
  } else {
    field->read(toml::value<std::string>(value));
  }
}

std::string to_toml(const RunConfig& cfg) {
  RunConfig copy = cfg;
  Registry reg(copy);
  toml::table root;
  for (const auto& f : reg.fields()) {
    const auto dot = f.key.find('.');
    const std::string section = f.key.substr(0, dot);
    if (!root.contains(section)) root.insert(section, toml::table{});
    f.write(*root.get_as<toml::table>(section), f.key.substr(dot + 1));
  }
  std::ostringstream out;
  out << root << "\n";
  return out.str();
}

std::vector<std::string> config_keys() {
  RunConfig cfg;
  Registry reg(cfg);
  std::vector<std::string> keys;
  for (const auto& f : reg.fields()) keys.push_back(f.key);
  return keys;
}

fs::path resolve_run_dir(const RunConfig& cfg) {
  if (!cfg.pretrain.run_dir.empty()) return cfg.pretrain.run_dir;
  const char* env = std::getenv("MRCL_RUN_ROOT");
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  const std::string base = cfg.run_name + "-" + timestamp();
  fs::path dir = root / base;
  for (int k = 1; fs::exists(dir); ++k) dir = root / (base + "-" + std::to_string(k));
  return dir;
}

void require_dataset_root(const train::DatasetSpec& spec, std::string_view key) {
  if (spec.root.empty()) throw ConfigError(std::string(key) + " is required");
  if (!fs::exists(spec.root)) throw ConfigError(std::string(key) + " does not exist: " + spec.root.string());
}

}  // namespace mrcl::cli
