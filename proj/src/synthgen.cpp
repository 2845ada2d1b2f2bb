#include "tte/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "tte/random.hpp"

namespace tte {

namespace {

template <typename Rng>
void poisson_times(Rng& rng, double rate, double from, double to, std::vector<double>& out) {
  if (rate <= 0.0) return;
  std::exponential_distribution<double> gap(rate);
  for (double t = from + gap(rng); t < to; t += gap(rng)) out.push_back(t);
}

}  // namespace

void GeneratorSpec::validate() const {
  if (n_patients == 0) throw std::invalid_argument("generator needs at least one patient");
  if (!(censor_hazard > 0.0)) throw std::invalid_argument("censor hazard must be positive");
  if (!(history_days >= 0.0) || !(visit_rate >= 0.0) || !(max_visit_days >= 0.0))
    throw std::invalid_argument("history, visit rate and visit length must be non-negative");
  if (!(min_age_days >= 0.0 && max_age_days >= min_age_days)) throw std::invalid_argument("invalid age range");
  std::set<std::string> risks, tgts;
  for (const BackgroundCode& b : background)
    if (!(b.rate > 0.0)) throw std::invalid_argument("background rate for " + b.code + " must be positive");
  for (const RiskCode& r : risk_codes) {
    if (!(r.prevalence >= 0.0 && r.prevalence <= 1.0)) throw std::invalid_argument("prevalence outside [0,1]");
    if (r.recur_rate < 0.0) throw std::invalid_argument("negative recurrence rate");
    risks.insert(r.code);
  }
  for (const TargetCode& t : targets) {
    if (t.base.rates.size() != t.base.grid.size())
      throw std::invalid_argument("target " + t.code + " needs one hazard per piece");
    for (double h : t.base.rates)
      if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("target hazards must be positive");
    tgts.insert(t.code);
  }
  for (const RiskRule& r : risk_rules) {
    if (!(r.hazard_multiplier > 0.0)) throw std::invalid_argument("hazard multipliers must be positive");
    if (!risks.count(r.risk_code)) throw std::invalid_argument("rule names unknown risk code " + r.risk_code);
    if (!tgts.count(r.target_code)) throw std::invalid_argument("rule names unknown target " + r.target_code);
  }
}

PiecewiseHazard GroundTruth::patient_hazard(std::size_t patient, const std::string& task) const {
  PiecewiseHazard h = base_hazards.at(task);
  const double m = patients.at(patient).targets.at(task).multiplier;
  for (double& r : h.rates) r *= m;
  return h;
}

void GroundTruth::write_jsonl(std::ostream& out) const {
  for (const PatientTruth& p : patients) {
    nlohmann::ordered_json j;
    j["patient_id"] = p.patient_id;
    j["followup_start"] = p.followup_start;
    j["record_end"] = p.record_end;
    nlohmann::ordered_json tj = nlohmann::ordered_json::object();
    for (const auto& [code, t] : p.targets) {
      const PiecewiseHazard& base = base_hazards.at(code);
      std::vector<double> rates;
      for (double r : base.rates) rates.push_back(r * t.multiplier);
      nlohmann::ordered_json one;
      one["multiplier"] = t.multiplier;
      one["piece_starts"] = base.grid.starts();
      one["hazards"] = rates;
      one["event_time"] = t.event_time ? nlohmann::ordered_json(*t.event_time) : nlohmann::ordered_json(nullptr);
      tj[code] = one;
    }
    j["targets"] = tj;
    out << j.dump() << '\n';
  }
}

double true_survival(const GroundTruth& truth, std::size_t patient, const std::string& task, double t) {
  if (t <= 0.0) return 1.0;
  return truth.patient_hazard(patient, task).survival(t);
}

SyntheticCohort generate(const GeneratorSpec& spec) {
  spec.validate();
  SyntheticCohort cohort;
  for (const TargetCode& t : spec.targets) cohort.truth.base_hazards[t.code] = t.base;

  Ontology& onto = cohort.ontology;
  onto.add_code("VISIT");
  for (const BackgroundCode& b : spec.background) {
    if (b.parent.empty())
      onto.add_code(b.code);
    else
      onto.add_code(b.code, {b.parent});
  }
  for (const RiskCode& r : spec.risk_codes) onto.add_code(r.code);
  for (const TargetCode& t : spec.targets) onto.add_code(t.code);

  auto day = [&](double t) { return spec.day_resolution ? std::floor(t) : t; };

  cohort.timelines.reserve(spec.n_patients);
  cohort.truth.patients.reserve(spec.n_patients);
  for (std::size_t i = 0; i < spec.n_patients; ++i) {
    std::mt19937_64 rng(splitmix64(spec.seed ^ static_cast<std::uint64_t>(i)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    EventTimeline tl;
    tl.patient_id = "p" + std::to_string(i);
    tl.birth_time = std::floor(unit(rng) * 20000.0);
    const double age = spec.min_age_days + unit(rng) * (spec.max_age_days - spec.min_age_days);
    const double start = std::floor(tl.birth_time + age);
    const double f0 = start + spec.history_days;
    const double end = day(f0 + std::exponential_distribution<double>(spec.censor_hazard)(rng));

    PatientTruth truth{tl.patient_id, f0, end, {}};
    auto emit = [&](double t, const std::string& code, EventKind kind) { tl.events.push_back({day(t), code, kind}); };

    // Visits, including one at the record start and one closing the record.
    std::vector<double> visits{start};
    poisson_times(rng, spec.visit_rate, start, end, visits);
    for (double v : visits) {
      const double len = std::min(unit(rng) * spec.max_visit_days, end - v);
      emit(v, "VISIT", EventKind::visit_start);
      emit(v + len, "VISIT", EventKind::visit_end);
    }
    emit(end, "VISIT", EventKind::visit_start);
    emit(end, "VISIT", EventKind::visit_end);

    for (const BackgroundCode& b : spec.background) {
      std::vector<double> ts;
      poisson_times(rng, b.rate, start, end, ts);
      for (double t : ts) emit(t, b.code, EventKind::diagnosis);
    }

    std::set<std::string> risks_present;
    for (const RiskCode& r : spec.risk_codes) {
      const bool present = unit(rng) < r.prevalence;
      const double onset = start + unit(rng) * spec.history_days;
      if (!present) continue;
      risks_present.insert(r.code);
      emit(onset, r.code, EventKind::diagnosis);
      std::vector<double> ts;
      poisson_times(rng, r.recur_rate, onset, end, ts);
      for (double t : ts) emit(t, r.code, EventKind::diagnosis);
    }

    for (const TargetCode& tc : spec.targets) {
      double m = 1.0;
      for (const RiskRule& rule : spec.risk_rules)
        if (rule.target_code == tc.code && risks_present.count(rule.risk_code)) m *= rule.hazard_multiplier;
      PiecewiseHazard h = tc.base;
      for (double& r : h.rates) r *= m;
      const double t = h.sample(rng);
      TargetTruth tt{m, std::nullopt};
      if (f0 + t <= end) {
        tt.event_time = t;
        emit(f0 + t, tc.code, EventKind::diagnosis);
      }
      truth.targets[tc.code] = tt;
    }

    std::stable_sort(tl.events.begin(), tl.events.end(),
                     [](const Event& a, const Event& b) { return a.time < b.time; });
    cohort.timelines.push_back(std::move(tl));
    cohort.truth.patients.push_back(std::move(truth));
  }
  return cohort;
}

GeneratorSpec default_generator_spec(std::size_t n_patients, std::uint64_t seed, double hazard_ratio) {
  GeneratorSpec spec;
  spec.n_patients = n_patients;
  spec.seed = seed;
  const char* groups[] = {"BG/A", "BG/B", "BG/C"};
  for (int c = 0; c < 12; ++c)
    spec.background.push_back({"N" + std::to_string(c), 1.0 / (120.0 + 40.0 * c), groups[c % 3]});
  for (int r = 1; r <= 3; ++r) spec.risk_codes.push_back({"R" + std::to_string(r), 0.3, 1.0 / 90.0});
  for (const char* t : {"T1", "T2", "T3"}) {
    spec.targets.push_back({t, PiecewiseHazard{PieceGrid{}, {1.0 / 4000.0}}});
    for (int r = 1; r <= 3; ++r) spec.risk_rules.push_back({"R" + std::to_string(r), t, hazard_ratio});
  }
  return spec;
}

}  // namespace tte
