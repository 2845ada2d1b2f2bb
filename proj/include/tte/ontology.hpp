#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tte/event_store.hpp"

namespace tte {

/// Code vocabulary with parent links forming a DAG.
class Ontology {
 public:
  Ontology() = default;

  /// Adds a code (idempotent). Parents are added to the vocabulary on demand.
  void add_code(const std::string& code, const std::vector<std::string>& parents = {});

  bool contains(const std::string& code) const { return parents_.count(code) != 0; }
  const std::set<std::string>& parents(const std::string& code) const;
  const std::set<std::string>& children(const std::string& code) const;
  /// Vocabulary in lexicographic order.
  std::vector<std::string> codes() const;
  std::size_t size() const { return parents_.size(); }

  /// All strict ancestors of `code`.
  std::set<std::string> ancestors(const std::string& code) const;
  /// Throws DataError if a parent cycle exists.
  void check_acyclic() const;

  /// Extends the vocabulary with every code seen in `timelines` (as roots).
  void add_corpus_codes(std::span<const EventTimeline> timelines);

  static Ontology read_jsonl(const std::filesystem::path& path);
  void write_jsonl(std::ostream& out) const;

 private:
  std::map<std::string, std::set<std::string>> parents_;
  std::map<std::string, std::set<std::string>> children_;
};

/// Per-patient presence counts for one code. A patient "has" a code when it or
/// any descendant appears in the timeline; O is the presence of ANY parent.
/// Codes without parents have O true for every patient.
struct PresenceCounts {
  std::size_t patients = 0;
  std::size_t parent_present = 0;           // O = T
  std::size_t parent_and_code_present = 0;  // O = T, C = T
  std::size_t code_present = 0;             // C = T
};

class CorpusStats {
 public:
  CorpusStats(const Ontology& ontology, std::span<const EventTimeline> timelines);
  /// Builds stats directly from per-patient code sets (already closed or not).
  CorpusStats(const Ontology& ontology, std::span<const std::set<std::string>> patient_codes);

  PresenceCounts counts(const std::string& code) const;
  std::size_t patients() const { return patients_; }

 private:
  void accumulate(const Ontology& ontology, const std::set<std::string>& raw_codes);

  const Ontology* ontology_;
  std::size_t patients_ = 0;
  std::map<std::string, std::size_t> code_present_;
  std::map<std::string, std::size_t> parent_present_;
  std::map<std::string, std::size_t> both_present_;
};

/// H(C|O) in nats using the two-term form valid when a child implies its parent:
/// -p(O=T,C=F) log(p(O=T,C=F)/p(O=T)) - p(O=T,C=T) log(p(O=T,C=T)/p(O=T)).
double conditional_entropy(const PresenceCounts& counts);
double conditional_entropy(const std::string& code, const CorpusStats& stats);

struct TaskSet {
  std::vector<std::string> tasks;    // descending entropy, ties by code
  std::vector<double> entropies;     // parallel to tasks
  std::set<std::string> excluded;

  std::size_t size() const { return tasks.size(); }
  std::optional<std::size_t> index_of(const std::string& code) const;

  /// One code per line, optionally followed by a tab and its entropy.
  void write(std::ostream& out) const;
  static TaskSet read(const std::filesystem::path& path);
};

/// The K highest-entropy codes outside `excluded`. Throws std::invalid_argument
/// when fewer than K candidates remain.
TaskSet select_tasks(const Ontology& ontology, const CorpusStats& stats, std::size_t k,
                     const std::set<std::string>& excluded);

/// Seeds plus all their descendants. Throws DataError for unknown seeds.
std::set<std::string> expand_excluded(const Ontology& ontology, const std::set<std::string>& seeds);

}  // namespace tte
