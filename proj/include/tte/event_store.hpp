#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace tte {

/// Raised for malformed input files. Carries the 1-based line number when known.
class DataError : public std::runtime_error {
 public:
  DataError(const std::string& what, std::size_t line = 0)
      : std::runtime_error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

enum class EventKind { diagnosis, billing, visit_start, visit_end, other };

EventKind parse_event_kind(std::string_view s);
std::string_view to_string(EventKind k);

/// Code emitted for a recorded death. Death censors every task.
inline constexpr std::string_view kDeathCode = "DEATH";

/// Minutes per day; event times are days with an optional minute-of-day fraction.
inline constexpr double kMinutesPerDay = 1440.0;

struct Event {
  double time = 0.0;  // days on the absolute day axis
  std::string code;
  EventKind kind = EventKind::other;

  friend bool operator==(const Event&, const Event&) = default;
};

struct EventTimeline {
  std::string patient_id;
  double birth_time = 0.0;
  std::vector<Event> events;

  double last_time() const { return events.empty() ? birth_time : events.back().time; }
  /// Time of the first DEATH event, if any.
  std::optional<double> death_time() const;
  /// End of observation: death if recorded, otherwise the last event.
  double censor_time() const;

  friend bool operator==(const EventTimeline&, const EventTimeline&) = default;
};

/// Reads a JSONL event file. One timeline per patient_id, in order of first
/// appearance, with events stably sorted by time. An optional numeric
/// "birth_time" key on any line sets the patient's birth; otherwise birth is the
/// floor of the earliest event time.
std::vector<EventTimeline> ingest(const std::filesystem::path& path);
std::vector<EventTimeline> ingest_lines(std::istream& in);

/// Writes timelines in the same JSONL layout ingest() reads.
void write_jsonl(std::ostream& out, std::span<const EventTimeline> timelines);

struct NormalizationReport {
  std::size_t billing_moved = 0;
  std::size_t billing_unmatched = 0;   // no enclosing visit; left in place
  std::size_t billing_ambiguous = 0;   // overlapping visits; innermost chosen
  std::size_t midnight_moved = 0;
  std::size_t before_birth_moved = 0;

  NormalizationReport& operator+=(const NormalizationReport& o);
};

/// Applies the timestamp corrections: billing events to the end of their
/// innermost enclosing visit, midnight events to 23:59 of the same day, and
/// pre-birth events to the birth time. Visit starts, billing events and events
/// at the birth time keep their midnight stamp. Output is re-sorted (stable).
EventTimeline normalize(const EventTimeline& timeline, NormalizationReport* report = nullptr);

// ---------------------------------------------------------------------------
// Hash-based splitting

/// XXH64 of `data` with `seed`.
std::uint64_t xxhash64(std::string_view data, std::uint64_t seed = 0);

enum class Split { train, validation, test };
std::string_view to_string(Split s);

struct SplitFractions {
  double train = 0.70;
  double validation = 0.15;
  double test = 0.15;
};

struct SplitAssignment {
  Split split;
  double unit_hash;  // top 53 bits of the hash mapped to [0,1)
};

SplitAssignment assign_split(std::string_view patient_id, std::uint64_t hash_seed = 0,
                             const SplitFractions& fractions = {});

// ---------------------------------------------------------------------------
// Censored-case subsampling

struct CensoredLabel {
  double time = 0.0;
  bool censored = false;
  friend bool operator==(const CensoredLabel&, const CensoredLabel&) = default;
};

/// Drops each censored label independently with probability `drop_fraction`,
/// keeps every uncensored label, then draws a uniform sample of exactly `cap`
/// labels (order preserved) when more than `cap` remain.
std::vector<CensoredLabel> subsample_censored(std::span<const CensoredLabel> labels, double drop_fraction,
                                              std::size_t cap, std::uint64_t seed);

/// Index form of subsample_censored: returns the surviving input positions.
std::vector<std::size_t> subsample_censored_indices(std::span<const bool> censored, double drop_fraction,
                                                    std::size_t cap, std::uint64_t seed);

}  // namespace tte
