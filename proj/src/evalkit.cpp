#include "patchforge/evalkit.hpp"

#include <charconv>
#include <cmath>
#include <json.hpp>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include "patchforge/errors.hpp"

namespace patchforge::eval {

using json = nlohmann::json;

namespace {

// Shortest text that parses back to the same double.
std::string shortest(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

double equivalent_diameter_mm(std::size_t area_px, double spacing_mm) {
  return 2.0 * std::sqrt(static_cast<double>(area_px) / std::numbers::pi) * spacing_mm;
}

CaseMatch match_lesions(const detect::DetectionMap& detection, const patches::CaseRecord& c) {
  if (detection.binary.height != c.height() || detection.binary.width != c.width()) {
    throw DimensionError("match_lesions: detection map is " + std::to_string(detection.binary.height) + "x" +
                         std::to_string(detection.binary.width) + " but case " + c.case_id + " is " +
                         std::to_string(c.height()) + "x" + std::to_string(c.width()));
  }
  // lesion id per pixel (lesions are disjoint)
  std::vector<std::int32_t> owner(c.height() * c.width(), -1);
  CaseMatch m;
  m.case_id = c.case_id;
  m.patient_id = c.patient_id;
  for (std::size_t k = 0; k < c.lesions.size(); ++k) {
    for (std::size_t i = 0; i < owner.size(); ++i)
      if (c.lesions[k].bits[i]) owner[i] = static_cast<std::int32_t>(k);
    m.lesion_diameter_mm.push_back(equivalent_diameter_mm(c.lesions[k].count()));
  }
  m.lesion_hit_by.assign(c.lesions.size(), -1);
  m.component_is_tp.assign(detection.components.size(), 0);
  for (std::size_t j = 0; j < detection.components.size(); ++j) {
    for (auto i : detection.components[j].pixels) {
      const std::int32_t k = owner[i];
      if (k < 0) continue;
      m.component_is_tp[j] = 1;
      auto& hit = m.lesion_hit_by[static_cast<std::size_t>(k)];
      if (hit < 0 || static_cast<std::int64_t>(j) < hit) hit = static_cast<std::int64_t>(j);
    }
  }
  for (auto hit : m.lesion_hit_by) (hit >= 0 ? m.tp : m.fn) += 1;
  for (auto tp : m.component_is_tp) m.fp += tp ? 0 : 1;
  return m;
}

namespace {

Totals totals(std::span<const CaseMatch> matches, std::optional<double> cutoff) {
  Totals t;
  t.cases = matches.size();
  for (const auto& m : matches) {
    for (std::size_t k = 0; k < m.lesion_hit_by.size(); ++k) {
      if (cutoff && m.lesion_diameter_mm[k] <= *cutoff) continue;
      ++t.lesions;
      (m.lesion_hit_by[k] >= 0 ? t.tp : t.fn) += 1;
    }
    t.fp += m.fp;
  }
  t.tpr = t.lesions ? static_cast<double>(t.tp) / static_cast<double>(t.lesions) : 0.0;
  t.fpc = t.cases ? static_cast<double>(t.fp) / static_cast<double>(t.cases) : 0.0;
  return t;
}

json totals_json(const Totals& t) {
  return {{"cases", t.cases}, {"lesions", t.lesions}, {"tp", t.tp}, {"fn", t.fn},
          {"fp", t.fp},       {"tpr", t.tpr},         {"fpc", t.fpc}};
}

}  // namespace

DetectionReport aggregate(std::span<const CaseMatch> matches, std::optional<double> min_lesion_diameter_mm) {
  DetectionReport r;
  r.cases.assign(matches.begin(), matches.end());
  r.overall = totals(matches, std::nullopt);
  if (min_lesion_diameter_mm) {
    r.cutoff_mm = min_lesion_diameter_mm;
    r.stratified = totals(matches, min_lesion_diameter_mm);
  }
  return r;
}

std::string DetectionReport::to_json() const {
  json j;
  j["overall"] = totals_json(overall);
  j["cutoff_mm"] = cutoff_mm ? json(*cutoff_mm) : json(nullptr);
  j["stratified"] = stratified ? totals_json(*stratified) : json(nullptr);
  json per_case = json::array();
  for (const auto& m : cases) {
    per_case.push_back({{"case_id", m.case_id},
                        {"patient_id", m.patient_id},
                        {"tp", m.tp},
                        {"fn", m.fn},
                        {"fp", m.fp},
                        {"lesion_hit_by", m.lesion_hit_by},
                        {"lesion_diameter_mm", m.lesion_diameter_mm}});
  }
  j["cases"] = per_case;
  return j.dump(2);
}

std::string DetectionReport::to_csv() const {
  std::ostringstream out;
  out << "case_id,patient_id,lesions,tp,fn,fp\n";
  for (const auto& m : cases) {
    out << m.case_id << "," << m.patient_id << "," << m.lesion_hit_by.size() << "," << m.tp << "," << m.fn << ","
        << m.fp << "\n";
  }
  auto row = [&](const char* name, const Totals& t) {
    out << name << ",," << t.lesions << "," << t.tp << "," << t.fn << "," << t.fp << "\n";
  };
  row("all", overall);
  if (stratified) row("stratified", *stratified);
  return out.str();
}

FoldPlan make_folds(std::span<const std::string> patients, int k, std::uint64_t seed) {
  std::set<std::string> unique(patients.begin(), patients.end());
  if (k < 2) throw DomainError("make_folds: need at least 2 folds, got " + std::to_string(k));
  if (static_cast<std::size_t>(k) > unique.size()) {
    throw DomainError("make_folds: " + std::to_string(k) + " folds but only " + std::to_string(unique.size()) +
                      " patients");
  }
  std::vector<std::string> ids(unique.begin(), unique.end());
  std::mt19937_64 rng(seed);
  for (std::size_t i = ids.size(); i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(ids[i - 1], ids[j]);
  }
  FoldPlan plan;
  plan.k = k;
  plan.folds.resize(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int f = static_cast<int>(i % static_cast<std::size_t>(k));
    plan.fold_of[ids[i]] = f;
    plan.folds[static_cast<std::size_t>(f)].push_back(ids[i]);
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

std::vector<SweepPoint> threshold_sweep(std::span<const detect::ProbabilityMap> maps,
                                        std::span<const patches::CaseRecord> cases, std::span<const double> thresholds,
                                        std::size_t min_area_px) {
  if (maps.size() != cases.size()) throw DimensionError("threshold_sweep: need one map per case");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) {
    throw DomainError("threshold_sweep: thresholds must be sorted ascending");
  }
  std::vector<SweepPoint> out;
  for (double t : thresholds) {
    std::vector<CaseMatch> matches;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      matches.push_back(match_lesions(detect::threshold_map(maps[i], t, min_area_px), cases[i]));
    }
    const Totals tot = totals(matches, std::nullopt);
    out.push_back({t, tot.tpr, tot.fpc, tot.tp, tot.fp});
  }
  return out;
}

std::optional<SweepPoint> best_operating_point(std::span<const SweepPoint> sweep, double max_fpc) {
  std::optional<SweepPoint> best;
  for (const auto& p : sweep) {
    if (p.fpc > max_fpc) continue;
    if (!best || p.tpr > best->tpr || (p.tpr == best->tpr && p.fpc < best->fpc)) best = p;
  }
  return best;
}

std::string sweep_to_csv(std::span<const SweepPoint> sweep) {
  std::ostringstream out;
  out << "t,tpr,fpc,tp,fp\n";
  for (const auto& p : sweep) {
    out << shortest(p.threshold) << "," << shortest(p.tpr) << "," << shortest(p.fpc) << "," << p.tp << "," << p.fp
        << "\n";
  }
  return out.str();
}

}  // namespace patchforge::eval
