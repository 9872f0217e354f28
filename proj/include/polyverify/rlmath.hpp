#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// Reward shaping for group-relative policy optimization and the unbiased
// pass@k estimator. Everything here is a pure function over plain numbers so
// it can be checked against brute-force oracles without any ML runtime.
namespace polyverify::rlmath {

class NonFiniteInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Rewards below this population standard deviation yield all-zero
// advantages instead of a division by (almost) zero.
inline constexpr double kMinRewardStd = 1e-8;

inline constexpr double kDefaultClipEpsilon = 0.2;

struct ClipConfig {
  double epsilon = kDefaultClipEpsilon;

  // Throws DomainError unless 0 < epsilon < 1.
  void validate() const;
};

// Per-token log-probabilities of one sampled sequence under the current
// policy (tokens_new) and the behaviour policy that sampled it (tokens_old).
struct SequenceLogProbs {
  std::vector<double> tokens_new;
  std::vector<double> tokens_old;
};

struct ScoredSequence {
  SequenceLogProbs logprobs;
  double advantage = 0.0;
};

/// Standardizes rewards within their group: (R_i - mean) / std with the
/// population standard deviation. A group whose std is below kMinRewardStd
/// (including any single-element group) maps to exactly zero advantages.
/// Throws DomainError on an empty group and NonFiniteInput on NaN/inf.
std::vector<double> group_advantages(std::span<const double> rewards);

/// Clipped surrogate objective without a KL penalty:
///   (1/G) sum_i (1/|y_i|) sum_t min(r_it * A_i, clip(r_it, 1-eps, 1+eps) * A_i)
/// where r_it = exp(tokens_new[t] - tokens_old[t]).
double grpo_objective(std::span<const ScoredSequence> sequences,
                      const ClipConfig& clip = {});

/// Analytic derivative of grpo_objective with respect to every tokens_new
/// entry, laid out like the input. At a clip boundary the one-sided
/// derivative of the unclipped branch is used.
std::vector<std::vector<double>> grpo_objective_gradient(
    std::span<const ScoredSequence> sequences, const ClipConfig& clip = {});

/// Unbiased pass@k estimate 1 - C(n-c, k) / C(n, k) for c correct out of n
/// samples. Evaluated as a running product so large n never overflows.
/// Throws DomainError unless 0 <= c <= n and 1 <= k <= n.
double pass_at_k(std::int64_t n, std::int64_t c, std::int64_t k);

}  // namespace polyverify::rlmath
