#pragma once

// Iterated-learning stability analytics: expected expressivity of holistic and
// compositional languages after a learner observes R meanings, and the
// relative stability of compositional languages.
//
// Observation model: each of the R observations is a uniform draw, with
// replacement, from the M = V^F meanings. A holistic language can express
// exactly the meanings it observed. A compositional language can express a
// meaning once every one of its F values has been observed on its axis.
// The N objects are labelled by uniform i.i.d. meanings, so
// N_used = M (1 - (1 - 1/M)^N) distinct meanings are in use.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace refgame::ilm {

struct IlmEnv {
  std::size_t objects = 0;       // N
  std::size_t features = 0;      // F
  std::size_t values = 0;        // V
  std::size_t observations = 0;  // R

  /// Environment with N = M objects.
  static IlmEnv square(std::size_t features, std::size_t values, std::size_t observations);

  double meanings() const;  // M = V^F
  double coverage() const;  // b = R / N
  void validate() const;
};

/// q = 1 - (1 - 1/V)^R, the chance that a given value is seen on its axis.
double value_observation_probability(const IlmEnv& env);

/// Pr(m in O) * M with Pr(m in O) = 1 - (1 - 1/M)^R.
double expressivity_holistic(const IlmEnv& env);

/// Expected number of distinct meanings labelling the N objects.
double meanings_in_use(const IlmEnv& env);

/// q^F * N_used.
double expressivity_compositional(const IlmEnv& env);

/// E_c / (E_c + E_h). Throws UndefinedStabilityError when both are zero.
double relative_stability(const IlmEnv& env);

enum class Language { Holistic, Compositional };

std::string_view to_string(Language language);

struct McEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t trials = 0;
};

/// Simulated lifetimes under the observation model above. Each trial uses
/// its own stream derived from `seed`, so the result does not depend on
/// evaluation order.
McEstimate monte_carlo_expressivity(const IlmEnv& env, Language language, std::size_t trials,
                                    std::uint64_t seed);

}  // namespace refgame::ilm
