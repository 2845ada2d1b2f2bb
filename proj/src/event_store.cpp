#include "tte/event_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

namespace tte {

namespace {

bool is_midnight(double t) { return t == std::floor(t); }

void sort_events(std::vector<Event>& events) {
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.time < b.time; });
}

struct Visit {
  double start;
  double end;
};

// visit_end closes the most recent open visit_start; unmatched starts close at the last event.
std::vector<Visit> reconstruct_visits(const EventTimeline& tl) {
  std::vector<Visit> visits;
  std::vector<double> open;
  for (const Event& e : tl.events) {
    if (e.kind == EventKind::visit_start) {
      open.push_back(e.time);
    } else if (e.kind == EventKind::visit_end && !open.empty()) {
      visits.push_back({open.back(), e.time});
      open.pop_back();
    }
  }
  for (double s : open) visits.push_back({s, tl.last_time()});
  return visits;
}

}  // namespace

EventKind parse_event_kind(std::string_view s) {
  if (s == "diagnosis") return EventKind::diagnosis;
  if (s == "billing") return EventKind::billing;
  if (s == "visit_start") return EventKind::visit_start;
  if (s == "visit_end") return EventKind::visit_end;
  return EventKind::other;
}

std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::diagnosis: return "diagnosis";
    case EventKind::billing: return "billing";
    case EventKind::visit_start: return "visit_start";
    case EventKind::visit_end: return "visit_end";
    case EventKind::other: return "other";
  }
  return "other";
}

std::optional<double> EventTimeline::death_time() const {
  for (const Event& e : events)
    if (e.code == kDeathCode) return e.time;
  return std::nullopt;
}

double EventTimeline::censor_time() const {
  auto death = death_time();
  return death ? *death : last_time();
}

std::vector<EventTimeline> ingest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open event file " + path.string());
  return ingest_lines(in);
}

std::vector<EventTimeline> ingest_lines(std::istream& in) {
  using nlohmann::json;
  std::vector<EventTimeline> out;
  std::unordered_map<std::string, std::size_t> index;
  std::unordered_map<std::string, double> births;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!j.is_object()) throw DataError("record is not an object", line_no);
    for (const char* key : {"patient_id", "time", "code"})
      if (!j.contains(key)) throw DataError(std::string("missing \"") + key + "\"", line_no);
    if (!j["patient_id"].is_string() && !j["patient_id"].is_number_integer())
      throw DataError("patient_id must be a string", line_no);
    if (!j["time"].is_number()) throw DataError("time must be a number of days", line_no);
    if (!j["code"].is_string()) throw DataError("code must be a string", line_no);

    std::string pid = j["patient_id"].is_string() ? j["patient_id"].get<std::string>()
                                                  : std::to_string(j["patient_id"].get<std::int64_t>());
    Event ev;
    ev.time = j["time"].get<double>();
    if (!std::isfinite(ev.time)) throw DataError("time is not finite", line_no);
    ev.code = j["code"].get<std::string>();
    if (j.contains("kind")) {
      if (!j["kind"].is_string()) throw DataError("kind must be a string", line_no);
      ev.kind = parse_event_kind(j["kind"].get<std::string>());
    }
    if (j.contains("birth_time")) {
      if (!j["birth_time"].is_number()) throw DataError("birth_time must be a number", line_no);
      births[pid] = j["birth_time"].get<double>();
    }
    auto [it, inserted] = index.try_emplace(pid, out.size());
    if (inserted) out.push_back(EventTimeline{pid, 0.0, {}});
    out[it->second].events.push_back(std::move(ev));
  }
  for (EventTimeline& tl : out) {
    sort_events(tl.events);
    auto b = births.find(tl.patient_id);
    tl.birth_time = b != births.end() ? b->second : std::floor(tl.events.front().time);
  }
  return out;
}

void write_jsonl(std::ostream& out, std::span<const EventTimeline> timelines) {
  for (const EventTimeline& tl : timelines) {
    bool first = true;
    for (const Event& e : tl.events) {
      nlohmann::ordered_json j;
      j["patient_id"] = tl.patient_id;
      j["time"] = e.time;
      j["code"] = e.code;
      j["kind"] = to_string(e.kind);
      if (first) j["birth_time"] = tl.birth_time;
      first = false;
      out << j.dump() << '\n';
    }
  }
}

NormalizationReport& NormalizationReport::operator+=(const NormalizationReport& o) {
  billing_moved += o.billing_moved;
  billing_unmatched += o.billing_unmatched;
  billing_ambiguous += o.billing_ambiguous;
  midnight_moved += o.midnight_moved;
  before_birth_moved += o.before_birth_moved;
  return *this;
}

EventTimeline normalize(const EventTimeline& timeline, NormalizationReport* report) {
  NormalizationReport local;
  EventTimeline out = timeline;

  // Clock fixes first so billing is matched against the final visit bounds.
  // Events exactly at the birth time are day-level birth records and stay put;
  // a date-only visit start opens at the start of its day, and billing is
  // placed by the visit rule below.
  for (Event& e : out.events) {
    if (e.time < out.birth_time) {
      e.time = out.birth_time;
      ++local.before_birth_moved;
    } else if (e.time != out.birth_time && e.kind != EventKind::visit_start &&
               e.kind != EventKind::billing && is_midnight(e.time)) {
      e.time += (kMinutesPerDay - 1.0) / kMinutesPerDay;
      ++local.midnight_moved;
    }
  }
  sort_events(out.events);

  const std::vector<Visit> visits = reconstruct_visits(out);
  for (Event& e : out.events) {
    if (e.kind != EventKind::billing) continue;
    const Visit* inner = nullptr;
    std::size_t enclosing = 0;
    bool at_end = false;
    for (const Visit& v : visits) {
      if (v.start <= e.time && e.time <= v.end) {
        ++enclosing;
        if (e.time == v.end) at_end = true;
        if (!inner || v.end - v.start < inner->end - inner->start ||
            (v.end - v.start == inner->end - inner->start && v.start > inner->start))
          inner = &v;
      }
    }
    if (!inner) {
      ++local.billing_unmatched;
      continue;
    }
    if (enclosing > 1) ++local.billing_ambiguous;
    // Already at the close of an enclosing visit: in place.
    if (at_end) continue;
    e.time = inner->end;
    ++local.billing_moved;
  }
  sort_events(out.events);
  if (report) *report += local;
  return out;
}

// ---------------------------------------------------------------------------
// XXH64, reference algorithm.

namespace {

constexpr std::uint64_t kP1 = 11400714785074694791ULL;
constexpr std::uint64_t kP2 = 14029467366897019727ULL;
constexpr std::uint64_t kP3 = 1609587929392839161ULL;
constexpr std::uint64_t kP4 = 9650029242287828579ULL;
constexpr std::uint64_t kP5 = 2870177450012600261ULL;

constexpr std::uint64_t rotl(std::uint64_t x, int r) { return (x << r) | (x >> (64 - r)); }

std::uint64_t read64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint32_t read32(const unsigned char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

std::uint64_t round64(std::uint64_t acc, std::uint64_t input) {
  acc += input * kP2;
  acc = rotl(acc, 31);
  return acc * kP1;
}

std::uint64_t merge_round(std::uint64_t acc, std::uint64_t val) {
  acc ^= round64(0, val);
  return acc * kP1 + kP4;
}

}  // namespace

std::uint64_t xxhash64(std::string_view data, std::uint64_t seed) {
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  const auto* end = p + data.size();
  std::uint64_t h;
  if (data.size() >= 32) {
    std::uint64_t v1 = seed + kP1 + kP2, v2 = seed + kP2, v3 = seed, v4 = seed - kP1;
    const auto* limit = end - 32;
    do {
      v1 = round64(v1, read64(p));
      v2 = round64(v2, read64(p + 8));
      v3 = round64(v3, read64(p + 16));
      v4 = round64(v4, read64(p + 24));
      p += 32;
    } while (p <= limit);
    h = rotl(v1, 1) + rotl(v2, 7) + rotl(v3, 12) + rotl(v4, 18);
    h = merge_round(h, v1);
    h = merge_round(h, v2);
    h = merge_round(h, v3);
    h = merge_round(h, v4);
  } else {
    h = seed + kP5;
  }
  h += static_cast<std::uint64_t>(data.size());
  while (p + 8 <= end) {
    h ^= round64(0, read64(p));
    h = rotl(h, 27) * kP1 + kP4;
    p += 8;
  }
  if (p + 4 <= end) {
    h ^= static_cast<std::uint64_t>(read32(p)) * kP1;
    h = rotl(h, 23) * kP2 + kP3;
    p += 4;
  }
  while (p < end) {
    h ^= (*p) * kP5;
    h = rotl(h, 11) * kP1;
    ++p;
  }
  h ^= h >> 33;
  h *= kP2;
  h ^= h >> 29;
  h *= kP3;
  h ^= h >> 32;
  return h;
}

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "train";
}

SplitAssignment assign_split(std::string_view patient_id, std::uint64_t hash_seed, const SplitFractions& fractions) {
  const std::uint64_t h = xxhash64(patient_id, hash_seed);
  const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
  Split s = Split::test;
  if (u < fractions.train)
    s = Split::train;
  else if (u < fractions.train + fractions.validation)
    s = Split::validation;
  return {s, u};
}

std::vector<std::size_t> subsample_censored_indices(std::span<const bool> censored, double drop_fraction,
                                                    std::size_t cap, std::uint64_t seed) {
  if (!(drop_fraction >= 0.0 && drop_fraction < 1.0))
    throw std::invalid_argument("drop fraction must lie in [0, 1)");
  if (cap < 1) throw std::invalid_argument("cap must be at least 1");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - drop_fraction);
  std::vector<std::size_t> kept;
  kept.reserve(censored.size());
  for (std::size_t i = 0; i < censored.size(); ++i) {
    if (!censored[i] || drop_fraction == 0.0 || keep(rng)) kept.push_back(i);
  }
  if (kept.size() > cap) {
    std::vector<std::size_t> sampled;
    sampled.reserve(cap);
    std::sample(kept.begin(), kept.end(), std::back_inserter(sampled), cap, rng);
    kept = std::move(sampled);
  }
  return kept;
}

std::vector<CensoredLabel> subsample_censored(std::span<const CensoredLabel> labels, double drop_fraction,
                                              std::size_t cap, std::uint64_t seed) {
  auto buf = std::make_unique<bool[]>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) buf[i] = labels[i].censored;
  auto idx = subsample_censored_indices(std::span<const bool>(buf.get(), labels.size()), drop_fraction, cap, seed);
  std::vector<CensoredLabel> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(labels[i]);
  return out;
}

}  // namespace tte
