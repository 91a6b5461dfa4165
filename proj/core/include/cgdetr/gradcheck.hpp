#pragma once

// Central finite-difference verification of analytic gradients.

#include "cgdetr/model.hpp"

#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cgdetr::gradcheck {

struct GroupResult {
  std::string name;
  double rel_error = 0.0;  // |a - n| / max(|a|, |n|, floor), Frobenius norms
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
};

struct TermResult {
  std::string term;
  std::vector<GroupResult> groups;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct Report {
  std::vector<TermResult> terms;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const;
  std::vector<std::string> failures() const;
};

inline constexpr double kDefaultStep = 1e-4;
inline constexpr double kDefaultTolerance = 1e-4;
/// Below this gradient norm errors are absolute: roundoff in the differences
/// is about 1e-11, far above the relative scale of an exactly-zero gradient.
inline constexpr double kNormFloor = 1e-6;

/// Compares d f / d p for every named parameter against central differences
/// with the given step. `f` must rebuild its graph on every call and return
/// a 1 x 1 value.
TermResult check_term(const std::string& name, const std::function<ad::Var()>& f,
                      const std::vector<std::pair<std::string, ad::Var>>& params,
                      double step = kDefaultStep, double tol = kDefaultTolerance);

/// Small probe configuration: h = 8, L_d = 2, L_p = 3, two heads.
ModelConfig probe_config();

/// Two records with L_v = 4 clips and L_q = 3 words, several saliency levels.
std::vector<data::DatasetRecord> probe_batch(std::uint64_t seed);

/// The eight loss terms by name, in report order.
const std::vector<std::string>& term_names();

/// Checks every loss term at a randomly perturbed parameter point with
/// dropout off and matching, top-K and margin pairs frozen.
Report run(std::uint64_t seed, double step = kDefaultStep, double tol = kDefaultTolerance);

}  // namespace cgdetr::gradcheck
