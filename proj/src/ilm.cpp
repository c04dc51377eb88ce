#include "refgame/ilm.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "refgame/errors.hpp"
#include "refgame/rng.hpp"

namespace refgame::ilm {

namespace {

// 1 - (1 - 1/k)^r, accurate for large k
double hit_probability(double k, double r) {
  if (r <= 0.0) return 0.0;
  if (k <= 1.0) return 1.0;
  return -std::expm1(r * std::log1p(-1.0 / k));
}

// Simulations index meanings explicitly.
constexpr double kMaxSimulatedMeanings = 1 << 24;

}  // namespace

IlmEnv IlmEnv::square(std::size_t features, std::size_t values, std::size_t observations) {
  IlmEnv env{0, features, values, observations};
  env.objects = static_cast<std::size_t>(std::llround(env.meanings()));
  return env;
}

double IlmEnv::meanings() const {
  return std::pow(static_cast<double>(values), static_cast<double>(features));
}

double IlmEnv::coverage() const {
  validate();
  return static_cast<double>(observations) / static_cast<double>(objects);
}

void IlmEnv::validate() const {
  if (objects == 0 || features == 0 || values == 0) {
    throw ParameterError("ILM environment needs positive objects, features and values");
  }
}

double value_observation_probability(const IlmEnv& env) {
  env.validate();
  return hit_probability(static_cast<double>(env.values), static_cast<double>(env.observations));
}

double expressivity_holistic(const IlmEnv& env) {
  env.validate();
  const double m = env.meanings();
  return m * hit_probability(m, static_cast<double>(env.observations));
}

double meanings_in_use(const IlmEnv& env) {
  env.validate();
  const double m = env.meanings();
  return m * hit_probability(m, static_cast<double>(env.objects));
}

double expressivity_compositional(const IlmEnv& env) {
  const double q = value_observation_probability(env);
  return std::pow(q, static_cast<double>(env.features)) * meanings_in_use(env);
}

double relative_stability(const IlmEnv& env) {
  const double ec = expressivity_compositional(env);
  const double eh = expressivity_holistic(env);
  if (ec + eh <= 0.0) {
    throw UndefinedStabilityError("relative stability undefined: no meaning is expressible (R = 0)");
  }
  return ec / (ec + eh);
}

std::string_view to_string(Language language) {
  return language == Language::Holistic ? "holistic" : "compositional";
}

McEstimate monte_carlo_expressivity(const IlmEnv& env, Language language, std::size_t trials,
                                    std::uint64_t seed) {
  env.validate();
  if (trials == 0) throw ParameterError("monte_carlo_expressivity: trials must be >= 1");
  if (env.meanings() > kMaxSimulatedMeanings) {
    throw ParameterError("monte_carlo_expressivity: meaning space too large to simulate");
  }
  const auto m = static_cast<std::size_t>(std::llround(env.meanings()));
  const std::size_t F = env.features, V = env.values;

  std::vector<std::uint32_t> stamp(m, 0);       // meaning seen in this trial
  std::vector<std::uint32_t> value_seen(F * V, 0);
  std::vector<std::uint32_t> labelled(m, 0);
  double sum = 0.0, sum_sq = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto mark = static_cast<std::uint32_t>(t + 1);
    Rng rng(derive_seed(seed, t));
    double count = 0.0;
    if (language == Language::Holistic) {
      for (std::size_t r = 0; r < env.observations; ++r) {
        const auto k = static_cast<std::size_t>(rng.below(m));
        if (stamp[k] != mark) {
          stamp[k] = mark;
          count += 1.0;
        }
      }
    } else {
      for (std::size_t r = 0; r < env.observations; ++r) {
        auto k = static_cast<std::size_t>(rng.below(m));
        for (std::size_t f = F; f-- > 0;) {
          value_seen[f * V + k % V] = mark;
          k /= V;
        }
      }
      for (std::size_t o = 0; o < env.objects; ++o) {
        const auto k = static_cast<std::size_t>(rng.below(m));
        if (labelled[k] == mark) continue;
        labelled[k] = mark;
        bool expressible = true;
        std::size_t rest = k;
        for (std::size_t f = F; f-- > 0 && expressible;) {
          expressible = value_seen[f * V + rest % V] == mark;
          rest /= V;
        }
        if (expressible) count += 1.0;
      }
    }
    sum += count;
    sum_sq += count * count;
  }
  const double n = static_cast<double>(trials);
  McEstimate est;
  est.trials = trials;
  est.mean = sum / n;
  if (trials > 1) {
    const double var = std::max(0.0, (sum_sq - n * est.mean * est.mean) / (n - 1.0));
    est.std_error = std::sqrt(var / n);
  }
  return est;
}

}  // namespace refgame::ilm
