#include "userip/bayes.hpp"

#include <algorithm>
#include <cmath>

namespace userip {

void ConceptModel::validate() const {
  if (prior.empty() || emission.size() != prior.size())
    raise(Errc::config, "concept model: prior and emissions must cover the same concepts");
  if (true_concept < 0 || true_concept >= n_concepts())
    raise(Errc::config, "concept model: true concept_id out of range");
  if (prior[static_cast<size_t>(true_concept)] <= 0.0)
    raise(Errc::config, "concept model: true concept_id needs positive prior mass");
  double prior_total = 0.0;
  for (double p : prior) {
    if (p < 0.0 || !std::isfinite(p)) raise(Errc::config, "concept model: bad prior");
    prior_total += p;
  }
  if (std::abs(prior_total - 1.0) > 1e-9) raise(Errc::config, "concept model: prior does not sum to 1");
  size_t symbols = emission[0].size();
  if (symbols < 2) raise(Errc::config, "concept model: need at least two symbols");
  for (const auto& dist : emission) {
    if (dist.size() != symbols) raise(Errc::config, "concept model: ragged emission table");
    double total = 0.0;
    for (double p : dist) {
      if (p < 0.0 || !std::isfinite(p)) raise(Errc::config, "concept model: bad emission");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) raise(Errc::config, "concept model: emission does not sum to 1");
  }
}

ConceptModel ConceptModel::bernoulli_pair(double p_star, double p_alt) {
  ConceptModel model;
  model.prior = {0.5, 0.5};
  model.emission = {{1.0 - p_star, p_star}, {1.0 - p_alt, p_alt}};
  model.true_concept = 0;
  model.validate();
  return model;
}

double log_likelihood(const ConceptModel& model, std::span<const int> observations, int concept_id) {
  if (concept_id < 0 || concept_id >= model.n_concepts())
    raise(Errc::config, "log_likelihood: concept_id out of range");
  const auto& dist = model.emission[static_cast<size_t>(concept_id)];
  double ll = 0.0;
  for (int o : observations) {
    if (o < 0 || o >= model.n_symbols())
      raise(Errc::config, "log_likelihood: observation symbol out of range");
    double p = dist[static_cast<size_t>(o)];
    ll += p > 0.0 ? std::log(p) : -HUGE_VAL;
  }
  return ll;
}

double r_m(const ConceptModel& model, std::span<const int> observations, int concept_id) {
  if (observations.empty()) raise(Errc::config, "r_m: needs at least one observation");
  // a zero-probability observation under theta* is a support mismatch
  const auto& star = model.emission[static_cast<size_t>(model.true_concept)];
  for (int o : observations) {
    if (o < 0 || o >= model.n_symbols()) raise(Errc::config, "r_m: observation symbol out of range");
    if (star[static_cast<size_t>(o)] <= 0.0)
      raise(Errc::config, "r_m: observation impossible under the true concept_id");
  }
  if (concept_id == model.true_concept) return 0.0;
  double ll = log_likelihood(model, observations, concept_id);
  double ll_star = log_likelihood(model, observations, model.true_concept);
  return (ll - ll_star) / static_cast<double>(observations.size());
}

std::vector<double> posterior(const ConceptModel& model, std::span<const int> observations) {
  model.validate();
  std::vector<double> log_post(static_cast<size_t>(model.n_concepts()));
  for (int c = 0; c < model.n_concepts(); ++c) {
    double lp = model.prior[static_cast<size_t>(c)] > 0.0
                    ? std::log(model.prior[static_cast<size_t>(c)])
                    : -HUGE_VAL;
    log_post[static_cast<size_t>(c)] = lp + log_likelihood(model, observations, c);
  }
  double mx = *std::max_element(log_post.begin(), log_post.end());
  double z = 0.0;
  for (double lp : log_post) z += std::exp(lp - mx);
  std::vector<double> post(log_post.size());
  for (size_t c = 0; c < post.size(); ++c) post[c] = std::exp(log_post[c] - mx) / z;
  return post;
}

std::vector<int> draw_observations(const ConceptModel& model, int count, Rng& rng) {
  const auto& dist = model.emission[static_cast<size_t>(model.true_concept)];
  std::vector<double> cdf(dist.size());
  double acc = 0.0;
  for (size_t i = 0; i < dist.size(); ++i) {
    acc += dist[i];
    cdf[i] = acc;
  }
  std::vector<int> obs(static_cast<size_t>(count));
  for (auto& o : obs) o = rng.categorical_cdf(cdf);
  return obs;
}

ConcentrationReport predictor_agreement(const ConceptModel& model, std::span<const int> m_values,
                                        int trials, uint64_t seed) {
  model.validate();
  if (trials < 1) raise(Errc::config, "predictor_agreement: trials must be >= 1");
  for (size_t i = 1; i < m_values.size(); ++i)
    if (m_values[i] <= m_values[i - 1])
      raise(Errc::config, "predictor_agreement: M values must be ascending");

  const auto& star = model.emission[static_cast<size_t>(model.true_concept)];
  int bayes_opt = static_cast<int>(std::max_element(star.begin(), star.end()) - star.begin());

  ConcentrationReport report;
  for (int m : m_values) {
    if (m < 1) raise(Errc::config, "predictor_agreement: M must be >= 1");
    std::vector<std::vector<double>> exp_mr(static_cast<size_t>(model.n_concepts()));
    std::vector<double> mass_true;
    long agree = 0;
    for (int trial = 0; trial < trials; ++trial) {
      Rng rng(mix_seed(seed, (static_cast<uint64_t>(m) << 20) ^ static_cast<uint64_t>(trial)));
      auto obs = draw_observations(model, m, rng);
      for (int c = 0; c < model.n_concepts(); ++c)
        exp_mr[static_cast<size_t>(c)].push_back(std::exp(static_cast<double>(m) * r_m(model, obs, c)));
      auto post = posterior(model, obs);
      mass_true.push_back(post[static_cast<size_t>(model.true_concept)]);
      // predictive mixture over the next symbol
      int best_symbol = 0;
      double best_mass = -1.0;
      for (int y = 0; y < model.n_symbols(); ++y) {
        double mass = 0.0;
        for (int c = 0; c < model.n_concepts(); ++c)
          mass += post[static_cast<size_t>(c)] * model.emission[static_cast<size_t>(c)][static_cast<size_t>(y)];
        if (mass > best_mass) {
          best_mass = mass;
          best_symbol = y;
        }
      }
      agree += best_symbol == bayes_opt;
    }
    auto median = [](std::vector<double>& v) {
      std::sort(v.begin(), v.end());
      size_t n = v.size();
      return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    std::sort(mass_true.begin(), mass_true.end());
    double mass_median = median(mass_true);
    for (int c = 0; c < model.n_concepts(); ++c) {
      ConcentrationPoint point;
      point.m = m;
      point.concept_id = c;
      point.median_exp_mr = median(exp_mr[static_cast<size_t>(c)]);
      point.posterior_mass_true = mass_median;
      point.agreement = static_cast<double>(agree) / trials;
      report.points.push_back(point);
    }
  }
  return report;
}

}  // namespace userip
