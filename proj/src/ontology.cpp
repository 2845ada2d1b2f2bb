#include "tte/ontology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace tte {

namespace {
const std::set<std::string> kEmpty;

double xlogx_over(double joint, double marginal) {
  if (joint <= 0.0) return 0.0;
  return -joint * std::log(joint / marginal);
}
}  // namespace

void Ontology::add_code(const std::string& code, const std::vector<std::string>& parents) {
  parents_[code];
  children_[code];
  for (const std::string& p : parents) {
    if (p == code) throw DataError("code " + code + " lists itself as parent");
    parents_[p];
    children_[p].insert(code);
    parents_[code].insert(p);
  }
}

const std::set<std::string>& Ontology::parents(const std::string& code) const {
  auto it = parents_.find(code);
  return it == parents_.end() ? kEmpty : it->second;
}

const std::set<std::string>& Ontology::children(const std::string& code) const {
  auto it = children_.find(code);
  return it == children_.end() ? kEmpty : it->second;
}

std::vector<std::string> Ontology::codes() const {
  std::vector<std::string> out;
  out.reserve(parents_.size());
  for (const auto& [c, _] : parents_) out.push_back(c);
  return out;
}

std::set<std::string> Ontology::ancestors(const std::string& code) const {
  std::set<std::string> seen;
  std::vector<std::string> stack(parents(code).begin(), parents(code).end());
  while (!stack.empty()) {
    std::string c = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(c).second) continue;
    for (const std::string& p : parents(c)) stack.push_back(p);
  }
  return seen;
}

void Ontology::check_acyclic() const {
  // Kahn's algorithm over child edges.
  std::map<std::string, std::size_t> indegree;
  for (const auto& [c, ps] : parents_) indegree[c] = ps.size();
  std::vector<std::string> ready;
  for (const auto& [c, d] : indegree)
    if (d == 0) ready.push_back(c);
  std::size_t visited = 0;
  while (!ready.empty()) {
    std::string c = std::move(ready.back());
    ready.pop_back();
    ++visited;
    for (const std::string& ch : children(c))
      if (--indegree[ch] == 0) ready.push_back(ch);
  }
  if (visited != parents_.size()) throw DataError("ontology contains a parent cycle");
}

void Ontology::add_corpus_codes(std::span<const EventTimeline> timelines) {
  for (const EventTimeline& tl : timelines)
    for (const Event& e : tl.events)
      if (!contains(e.code)) add_code(e.code);
}

Ontology Ontology::read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open ontology file " + path.string());
  Ontology o;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DataError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!j.contains("code") || !j["code"].is_string()) throw DataError("missing \"code\"", line_no);
    std::vector<std::string> parents;
    if (j.contains("parents")) {
      if (!j["parents"].is_array()) throw DataError("parents must be an array", line_no);
      for (const auto& p : j["parents"]) {
        if (!p.is_string()) throw DataError("parent codes must be strings", line_no);
        parents.push_back(p.get<std::string>());
      }
    }
    o.add_code(j["code"].get<std::string>(), parents);
  }
  o.check_acyclic();
  return o;
}

void Ontology::write_jsonl(std::ostream& out) const {
  for (const auto& [c, ps] : parents_) {
    nlohmann::ordered_json j;
    j["code"] = c;
    j["parents"] = std::vector<std::string>(ps.begin(), ps.end());
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------

CorpusStats::CorpusStats(const Ontology& ontology, std::span<const EventTimeline> timelines) : ontology_(&ontology) {
  for (const EventTimeline& tl : timelines) {
    std::set<std::string> raw;
    for (const Event& e : tl.events) raw.insert(e.code);
    accumulate(ontology, raw);
  }
}

CorpusStats::CorpusStats(const Ontology& ontology, std::span<const std::set<std::string>> patient_codes)
    : ontology_(&ontology) {
  for (const auto& raw : patient_codes) accumulate(ontology, raw);
}

void CorpusStats::accumulate(const Ontology& ontology, const std::set<std::string>& raw_codes) {
  ++patients_;
  std::set<std::string> closed;
  for (const std::string& c : raw_codes) {
    closed.insert(c);
    for (const std::string& a : ontology.ancestors(c)) closed.insert(a);
  }
  for (const std::string& c : closed) ++code_present_[c];
  // O = T for codes with a present parent; those are children of present codes.
  std::set<std::string> with_parent;
  for (const std::string& c : closed)
    for (const std::string& ch : ontology.children(c)) with_parent.insert(ch);
  for (const std::string& c : with_parent) {
    ++parent_present_[c];
    if (closed.count(c)) ++both_present_[c];
  }
}

PresenceCounts CorpusStats::counts(const std::string& code) const {
  PresenceCounts pc;
  pc.patients = patients_;
  auto get = [](const std::map<std::string, std::size_t>& m, const std::string& c) -> std::size_t {
    auto it = m.find(c);
    return it == m.end() ? 0 : it->second;
  };
  pc.code_present = get(code_present_, code);
  if (ontology_->parents(code).empty()) {
    pc.parent_present = patients_;
    pc.parent_and_code_present = pc.code_present;
  } else {
    pc.parent_present = get(parent_present_, code);
    pc.parent_and_code_present = get(both_present_, code);
  }
  return pc;
}

double conditional_entropy(const PresenceCounts& c) {
  if (c.patients == 0 || c.parent_present == 0 || c.code_present == 0) return 0.0;
  const double n = static_cast<double>(c.patients);
  const double p_o = c.parent_present / n;
  const double p_oc = c.parent_and_code_present / n;
  const double p_onc = (c.parent_present - c.parent_and_code_present) / n;
  return xlogx_over(p_onc, p_o) + xlogx_over(p_oc, p_o);
}

double conditional_entropy(const std::string& code, const CorpusStats& stats) {
  return conditional_entropy(stats.counts(code));
}

std::optional<std::size_t> TaskSet::index_of(const std::string& code) const {
  auto it = std::find(tasks.begin(), tasks.end(), code);
  if (it == tasks.end()) return std::nullopt;
  return static_cast<std::size_t>(it - tasks.begin());
}

void TaskSet::write(std::ostream& out) const {
  const auto old = out.precision(17);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out << tasks[i];
    if (i < entropies.size() && std::isfinite(entropies[i])) out << '\t' << entropies[i];
    out << '\n';
  }
  out.precision(old);
}

TaskSet TaskSet::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open task file " + path.string());
  TaskSet ts;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    ts.tasks.push_back(line.substr(0, tab));
    double h = std::nan("");
    if (tab != std::string::npos) {
      try {
        h = std::stod(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw DataError("bad entropy in task file " + path.string(), ts.tasks.size());
      }
    }
    ts.entropies.push_back(h);
  }
  return ts;
}

TaskSet select_tasks(const Ontology& ontology, const CorpusStats& stats, std::size_t k,
                     const std::set<std::string>& excluded) {
  std::vector<std::pair<double, std::string>> ranked;
  for (const std::string& c : ontology.codes())
    if (!excluded.count(c)) ranked.emplace_back(conditional_entropy(c, stats), c);
  if (k > ranked.size())
    throw std::invalid_argument("requested " + std::to_string(k) + " tasks but only " +
                                std::to_string(ranked.size()) + " candidate codes");
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  TaskSet ts;
  ts.excluded = excluded;
  for (std::size_t i = 0; i < k; ++i) {
    ts.tasks.push_back(ranked[i].second);
    ts.entropies.push_back(ranked[i].first);
  }
  return ts;
}

std::set<std::string> expand_excluded(const Ontology& ontology, const std::set<std::string>& seeds) {
  std::set<std::string> out;
  std::vector<std::string> stack;
  for (const std::string& s : seeds) {
    if (!ontology.contains(s)) throw DataError("unknown excluded code " + s);
    stack.push_back(s);
  }
  while (!stack.empty()) {
    std::string c = std::move(stack.back());
    stack.pop_back();
    if (!out.insert(c).second) continue;
    for (const std::string& ch : ontology.children(c)) stack.push_back(ch);
  }
  return out;
}

}  // namespace tte
