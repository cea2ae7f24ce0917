#pragma once

#include <span>
#include <vector>

#include "userip/common.hpp"

namespace userip {

// Finite concept space with categorical emissions: the smallest world in
// which the posterior-concentration argument is checkable end to end.
struct ConceptModel {
  std::vector<double> prior;                  // P(theta)
  std::vector<std::vector<double>> emission;  // per concept, over observation symbols
  int true_concept = 0;                       // theta*

  int n_concepts() const { return static_cast<int>(prior.size()); }
  int n_symbols() const { return emission.empty() ? 0 : static_cast<int>(emission[0].size()); }
  void validate() const;

  static ConceptModel bernoulli_pair(double p_star, double p_alt);
};

double log_likelihood(const ConceptModel& model, std::span<const int> observations, int concept_id);

// (1/M) * (log P(obs | theta) - log P(obs | theta*)), all in log space
double r_m(const ConceptModel& model, std::span<const int> observations, int concept_id);

// P(theta | obs), normalized in log space; no observations returns the prior
std::vector<double> posterior(const ConceptModel& model, std::span<const int> observations);

std::vector<int> draw_observations(const ConceptModel& model, int count, Rng& rng);

struct ConcentrationPoint {
  int m = 0;
  int concept_id = 0;
  double median_exp_mr = 0.0;
  double posterior_mass_true = 0.0;  // median over trials
  double agreement = 0.0;            // mixture argmax vs Bayes-optimal under theta*
};

struct ConcentrationReport {
  std::vector<ConcentrationPoint> points;  // one per (m, concept)
};

ConcentrationReport predictor_agreement(const ConceptModel& model, std::span<const int> m_values,
                                        int trials, uint64_t seed);

}  // namespace userip
