#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tte/adaptation.hpp"
#include "tte/objectives.hpp"

namespace tte {

/// Sectioned key=value text:
///
///   # comment
///   [model]
///   inner_dim = 32
///
/// Keys before the first section header belong to section "".
class IniFile {
 public:
  static IniFile parse(std::istream& in, const std::string& source = "<config>");
  static IniFile read(const std::filesystem::path& path);

  /// "section.key=value" override; throws ConfigError when malformed.
  void apply_override(const std::string& assignment);
  void set(const std::string& section, const std::string& key, std::string value);
  std::optional<std::string> get(const std::string& section, const std::string& key) const;

  const std::map<std::string, std::map<std::string, std::string>>& sections() const { return values_; }
  void write(std::ostream& out) const;

 private:
  std::map<std::string, std::map<std::string, std::string>> values_;
};

struct EvalConfig {
  std::size_t nd_bins = 10;
  std::size_t bootstrap = 1000;
  std::uint64_t bootstrap_seed = 0;
};

/// Every stage parameter. Missing keys keep the defaults below; unknown keys are errors.
struct RunConfig {
  // [data]
  std::string events;
  std::string ontology;
  std::string output = "out";
  std::uint64_t split_seed = 0;
  // [synth]
  std::size_t synth_patients = 2000;
  std::uint64_t synth_seed = 1;
  double hazard_ratio = 4.0;
  // [tasks]
  std::size_t num_tasks = 16;
  std::vector<std::string> exclude;
  // [model]
  EncoderConfig encoder{.vocab_size = 64, .inner_dim = 32, .layers = 2, .heads = 4, .attention_window = 32,
                        .max_sequence = 256};
  HeadConfig head{.num_time_pieces = 8, .survival_dim = 16};
  // [train]
  TrainConfig train{.learning_rate = 3e-3, .max_epochs = 5};
  bool deterministic = true;
  // [adapt]
  AdaptConfig adapt;
  double label_fraction = 1.0;
  std::uint64_t label_seed = 1;
  // [eval]
  EvalConfig eval;

  static RunConfig from(const IniFile& ini);
  IniFile resolved() const;
  void validate() const;
};

/// Threads from TTE_THREADS (default 1).
std::size_t threads_from_env();

}  // namespace tte
