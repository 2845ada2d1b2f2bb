#include "tte/config.hpp"

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace tte {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::string format_double(double v) {
  std::ostringstream o;
  o << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return o.str();
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

// Typed reads that remember which keys were used.
class Reader {
 public:
  explicit Reader(const IniFile& ini) : ini_(ini) {}

  void str(const char* sec, const char* key, std::string& out) {
    if (auto v = take(sec, key)) out = *v;
  }
  void real(const char* sec, const char* key, double& out) {
    if (auto v = take(sec, key)) {
      try {
        std::size_t used = 0;
        out = std::stod(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError(where(sec, key) + ": expected a number, got '" + *v + "'");
      }
    }
  }
  template <typename Int>
  void integer(const char* sec, const char* key, Int& out) {
    if (auto v = take(sec, key)) {
      try {
        std::size_t used = 0;
        if (!v->empty() && (*v)[0] == '-') throw std::invalid_argument("negative");
        const unsigned long long x = std::stoull(*v, &used);
        if (used != v->size()) throw std::invalid_argument("trailing characters");
        out = static_cast<Int>(x);
      } catch (const std::exception&) {
        throw ConfigError(where(sec, key) + ": expected a non-negative integer, got '" + *v + "'");
      }
    }
  }
  void boolean(const char* sec, const char* key, bool& out) {
    if (auto v = take(sec, key)) {
      if (*v == "true" || *v == "1" || *v == "yes") {
        out = true;
      } else if (*v == "false" || *v == "0" || *v == "no") {
        out = false;
      } else {
        throw ConfigError(where(sec, key) + ": expected true or false, got '" + *v + "'");
      }
    }
  }
  void list(const char* sec, const char* key, std::vector<std::string>& out) {
    if (auto v = take(sec, key)) out = split_list(*v);
  }
  void reals(const char* sec, const char* key, std::vector<double>& out) {
    if (auto v = take(sec, key)) {
      out.clear();
      for (const std::string& item : split_list(*v)) {
        try {
          out.push_back(std::stod(item));
        } catch (const std::exception&) {
          throw ConfigError(where(sec, key) + ": expected numbers, got '" + item + "'");
        }
      }
    }
  }

  void reject_unknown() const {
    for (const auto& [sec, keys] : ini_.sections())
      for (const auto& [key, value] : keys)
        if (!used_.count(sec + "." + key)) throw ConfigError("unknown config key " + where(sec, key));
  }

 private:
  static std::string where(const std::string& sec, const std::string& key) { return "[" + sec + "] " + key; }
  std::optional<std::string> take(const char* sec, const char* key) {
    used_.insert(std::string(sec) + "." + key);
    return ini_.get(sec, key);
  }

  const IniFile& ini_;
  std::set<std::string> used_;
};

}  // namespace

IniFile IniFile::parse(std::istream& in, const std::string& source) {
  IniFile f;
  std::string line, section;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    const std::string t = trim(line.substr(0, line.find('#')));
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']') throw ConfigError(source + ":" + std::to_string(n) + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(n) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(source + ":" + std::to_string(n) + ": empty key");
    f.set(section, key, trim(t.substr(eq + 1)));
  }
  return f;
}

IniFile IniFile::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse(in, path.string());
}

void IniFile::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq)
    throw ConfigError("override must look like section.key=value: " + assignment);
  set(trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)), trim(assignment.substr(eq + 1)));
}

void IniFile::set(const std::string& section, const std::string& key, std::string value) {
  values_[section][key] = std::move(value);
}

std::optional<std::string> IniFile::get(const std::string& section, const std::string& key) const {
  auto s = values_.find(section);
  if (s == values_.end()) return std::nullopt;
  auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

void IniFile::write(std::ostream& out) const {
  bool first = true;
  for (const auto& [sec, keys] : values_) {
    if (!first) out << '\n';
    first = false;
    if (!sec.empty()) out << '[' << sec << "]\n";
    for (const auto& [k, v] : keys) out << k << " = " << v << '\n';
  }
}

RunConfig RunConfig::from(const IniFile& ini) {
  RunConfig c;
  Reader r(ini);
  r.str("data", "events", c.events);
  r.str("data", "ontology", c.ontology);
  r.str("data", "output", c.output);
  r.integer("data", "split_seed", c.split_seed);

  r.integer("synth", "patients", c.synth_patients);
  r.integer("synth", "seed", c.synth_seed);
  r.real("synth", "hazard_ratio", c.hazard_ratio);

  r.integer("tasks", "count", c.num_tasks);
  r.list("tasks", "exclude", c.exclude);

  r.integer("model", "vocabulary_size", c.encoder.vocab_size);
  r.integer("model", "inner_dim", c.encoder.inner_dim);
  r.integer("model", "layers", c.encoder.layers);
  r.integer("model", "heads", c.encoder.heads);
  r.integer("model", "attention_window", c.encoder.attention_window);
  r.integer("model", "max_sequence_length", c.encoder.max_sequence);
  r.real("model", "dropout", c.encoder.dropout);
  r.integer("model", "num_time_pieces", c.head.num_time_pieces);
  r.integer("model", "survival_dim", c.head.survival_dim);

  r.real("train", "learning_rate", c.train.learning_rate);
  r.real("train", "warmup_fraction", c.train.warmup_fraction);
  r.integer("train", "max_epochs", c.train.max_epochs);
  r.integer("train", "patience", c.train.patience);
  r.integer("train", "batch_patients", c.train.batch_patients);
  r.real("train", "grad_clip", c.train.grad_clip);
  r.integer("train", "seed", c.train.seed);
  r.boolean("train", "deterministic", c.deterministic);

  r.reals("adapt", "l2_grid", c.adapt.l2_grid);
  r.real("adapt", "finetune_learning_rate", c.adapt.finetune.learning_rate);
  r.integer("adapt", "finetune_max_epochs", c.adapt.finetune.max_epochs);
  r.real("adapt", "scratch_learning_rate", c.adapt.scratch.learning_rate);
  r.integer("adapt", "scratch_max_epochs", c.adapt.scratch.max_epochs);
  r.integer("adapt", "seed", c.adapt.scratch.seed);
  r.real("adapt", "label_fraction", c.label_fraction);
  r.integer("adapt", "label_seed", c.label_seed);

  r.integer("eval", "nd_bins", c.eval.nd_bins);
  r.integer("eval", "bootstrap", c.eval.bootstrap);
  r.integer("eval", "bootstrap_seed", c.eval.bootstrap_seed);

  r.reject_unknown();
  c.adapt.finetune.seed = c.adapt.scratch.seed;
  c.train.threads = c.adapt.threads = c.adapt.finetune.threads = c.adapt.scratch.threads = threads_from_env();
  c.validate();
  return c;
}

IniFile RunConfig::resolved() const {
  IniFile f;
  auto s = [&](const char* sec, const char* key, std::string v) { f.set(sec, key, std::move(v)); };
  auto u = [&](const char* sec, const char* key, std::uint64_t v) { f.set(sec, key, std::to_string(v)); };
  auto d = [&](const char* sec, const char* key, double v) { f.set(sec, key, format_double(v)); };
  s("data", "events", events);
  s("data", "ontology", ontology);
  s("data", "output", output);
  u("data", "split_seed", split_seed);
  u("synth", "patients", synth_patients);
  u("synth", "seed", synth_seed);
  d("synth", "hazard_ratio", hazard_ratio);
  u("tasks", "count", num_tasks);
  s("tasks", "exclude", join(exclude));
  u("model", "vocabulary_size", encoder.vocab_size);
  u("model", "inner_dim", encoder.inner_dim);
  u("model", "layers", encoder.layers);
  u("model", "heads", encoder.heads);
  u("model", "attention_window", encoder.attention_window);
  u("model", "max_sequence_length", encoder.max_sequence);
  d("model", "dropout", encoder.dropout);
  u("model", "num_time_pieces", head.num_time_pieces);
  u("model", "survival_dim", head.survival_dim);
  d("train", "learning_rate", train.learning_rate);
  d("train", "warmup_fraction", train.warmup_fraction);
  u("train", "max_epochs", train.max_epochs);
  u("train", "patience", train.patience);
  u("train", "batch_patients", train.batch_patients);
  d("train", "grad_clip", train.grad_clip);
  u("train", "seed", train.seed);
  s("train", "deterministic", deterministic ? "true" : "false");
  std::string grid;
  for (std::size_t i = 0; i < adapt.l2_grid.size(); ++i) grid += (i ? "," : "") + format_double(adapt.l2_grid[i]);
  s("adapt", "l2_grid", grid);
  d("adapt", "finetune_learning_rate", adapt.finetune.learning_rate);
  u("adapt", "finetune_max_epochs", adapt.finetune.max_epochs);
  d("adapt", "scratch_learning_rate", adapt.scratch.learning_rate);
  u("adapt", "scratch_max_epochs", adapt.scratch.max_epochs);
  u("adapt", "seed", adapt.scratch.seed);
  d("adapt", "label_fraction", label_fraction);
  u("adapt", "label_seed", label_seed);
  u("eval", "nd_bins", eval.nd_bins);
  u("eval", "bootstrap", eval.bootstrap);
  u("eval", "bootstrap_seed", eval.bootstrap_seed);
  return f;
}

void RunConfig::validate() const {
  encoder.validate();
  head.validate();
  train.validate();
  adapt.finetune.validate();
  adapt.scratch.validate();
  if (!(hazard_ratio > 0.0)) throw ConfigError("[synth] hazard_ratio must be positive");
  if (synth_patients == 0) throw ConfigError("[synth] patients must be positive");
  if (num_tasks == 0) throw ConfigError("[tasks] count must be positive");
  if (adapt.l2_grid.empty()) throw ConfigError("[adapt] l2_grid is empty");
  for (double l : adapt.l2_grid)
    if (!(l >= 0.0)) throw ConfigError("[adapt] l2_grid values must be non-negative");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("[adapt] label_fraction must be in (0, 1]");
  if (eval.nd_bins < 1) throw ConfigError("[eval] nd_bins must be positive");
}

std::size_t threads_from_env() {
  const char* v = std::getenv("TTE_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const unsigned long n = std::strtoul(v, &end, 10);
  if (*end != '\0' || n == 0) throw ConfigError(std::string("TTE_THREADS must be a positive integer, got '") + v + "'");
  return n;
}

}  // namespace tte
