#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tte/event_store.hpp"
#include "tte/ontology.hpp"
#include "tte/piecewise.hpp"

namespace tte {

/// A code emitted as a homogeneous Poisson process over the whole record.
struct BackgroundCode {
  std::string code;
  double rate = 0.0;  // events/day
  std::string parent;  // optional ontology parent
};

/// A chronic risk factor: acquired during the history year with probability
/// `prevalence`, then re-recorded as a Poisson process.
struct RiskCode {
  std::string code;
  double prevalence = 0.0;
  double recur_rate = 0.0;  // events/day after onset
};

struct RiskRule {
  std::string risk_code;
  std::string target_code;
  double hazard_multiplier = 1.0;
};

/// A target code whose first occurrence after follow-up start follows a
/// piecewise-exponential law (base hazard times applicable multipliers).
struct TargetCode {
  std::string code;
  PiecewiseHazard base;
};

struct GeneratorSpec {
  std::size_t n_patients = 1000;
  std::vector<BackgroundCode> background;
  std::vector<RiskCode> risk_codes;
  std::vector<RiskRule> risk_rules;
  std::vector<TargetCode> targets;
  double censor_hazard = 1.0 / 730.0;  // events/day, follow-up length ~ Exp
  double history_days = 365.0;
  double visit_rate = 1.0 / 60.0;      // visits/day
  double max_visit_days = 2.0;
  double min_age_days = 20 * 365.0;
  double max_age_days = 80 * 365.0;
  bool day_resolution = true;
  std::uint64_t seed = 1;

  /// Throws std::invalid_argument for non-positive hazards or multipliers,
  /// unknown rule codes, or an empty cohort.
  void validate() const;
};

struct TargetTruth {
  double multiplier = 1.0;
  std::optional<double> event_time;  // days after follow-up start, unrounded; nullopt if beyond record end
};

struct PatientTruth {
  std::string patient_id;
  double followup_start = 0.0;  // absolute day
  double record_end = 0.0;      // absolute day
  std::map<std::string, TargetTruth> targets;
};

struct GroundTruth {
  std::map<std::string, PiecewiseHazard> base_hazards;
  std::vector<PatientTruth> patients;

  /// The patient's true hazard curve for `task`, time measured from follow-up start.
  PiecewiseHazard patient_hazard(std::size_t patient, const std::string& task) const;

  void write_jsonl(std::ostream& out) const;
};

struct SyntheticCohort {
  std::vector<EventTimeline> timelines;
  GroundTruth truth;
  Ontology ontology;
};

SyntheticCohort generate(const GeneratorSpec& spec);

/// S(t) of `task` for `patient`, t days after follow-up start.
double true_survival(const GroundTruth& truth, std::size_t patient, const std::string& task, double t);

/// Default toy cohort used by the CLI and the end-to-end checks: background
/// noise codes, three risk factors with `hazard_ratio` multipliers on every target, and the
/// listed target codes with constant base hazards.
GeneratorSpec default_generator_spec(std::size_t n_patients, std::uint64_t seed, double hazard_ratio = 4.0);

}  // namespace tte
