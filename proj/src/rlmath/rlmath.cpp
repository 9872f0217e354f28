#include "polyverify/rlmath.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace polyverify::rlmath {

namespace {

void require_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteInput(std::string("non-finite value in ") + what);
    }
  }
}

void validate_sequences(std::span<const ScoredSequence> sequences) {
  if (sequences.empty()) {
    throw DomainError("grpo_objective needs at least one sequence");
  }
  for (const auto& seq : sequences) {
    const auto& lp = seq.logprobs;
    if (lp.tokens_new.empty() || lp.tokens_new.size() != lp.tokens_old.size()) {
      throw DomainError(
          "sequence log-probs must be non-empty and of equal length");
    }
    require_finite(lp.tokens_new, "tokens_new");
    require_finite(lp.tokens_old, "tokens_old");
    if (!std::isfinite(seq.advantage)) {
      throw NonFiniteInput("non-finite advantage");
    }
  }
}

}  // namespace

void ClipConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon < 1.0)) {
    throw DomainError("clip epsilon must lie in (0, 1)");
  }
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.empty()) {
    throw DomainError("group_advantages needs at least one reward");
  }
  require_finite(rewards, "rewards");

  const double g = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / g;
  double sq = 0.0;
  for (double r : rewards) sq += (r - mean) * (r - mean);
  const double stddev = std::sqrt(sq / g);

  std::vector<double> out(rewards.size(), 0.0);
  if (stddev < kMinRewardStd) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = (rewards[i] - mean) / stddev;
  }
  return out;
}

double grpo_objective(std::span<const ScoredSequence> sequences,
                      const ClipConfig& clip) {
  clip.validate();
  validate_sequences(sequences);

  const double lo = 1.0 - clip.epsilon;
  const double hi = 1.0 + clip.epsilon;
  double total = 0.0;
  for (const auto& seq : sequences) {
    const auto& lp = seq.logprobs;
    const double a = seq.advantage;
    double per_seq = 0.0;
    for (std::size_t t = 0; t < lp.tokens_new.size(); ++t) {
      const double ratio = std::exp(lp.tokens_new[t] - lp.tokens_old[t]);
      const double clipped = std::clamp(ratio, lo, hi);
      per_seq += std::min(ratio * a, clipped * a);
    }
    total += per_seq / static_cast<double>(lp.tokens_new.size());
  }
  return total / static_cast<double>(sequences.size());
}

std::vector<std::vector<double>> grpo_objective_gradient(
    std::span<const ScoredSequence> sequences, const ClipConfig& clip) {
  clip.validate();
  validate_sequences(sequences);

  const double lo = 1.0 - clip.epsilon;
  const double hi = 1.0 + clip.epsilon;
  const double inv_g = 1.0 / static_cast<double>(sequences.size());
  std::vector<std::vector<double>> grad;
  grad.reserve(sequences.size());
  for (const auto& seq : sequences) {
    const auto& lp = seq.logprobs;
    const double a = seq.advantage;
    const double scale = inv_g / static_cast<double>(lp.tokens_new.size());
    std::vector<double> g(lp.tokens_new.size(), 0.0);
    for (std::size_t t = 0; t < g.size(); ++t) {
      const double ratio = std::exp(lp.tokens_new[t] - lp.tokens_old[t]);
      const double clipped = std::clamp(ratio, lo, hi);
      // d ratio / d logp_new = ratio; the clipped branch is flat outside
      // [lo, hi] and coincides with the unclipped one inside it.
      if (ratio * a <= clipped * a) g[t] = scale * a * ratio;
    }
    grad.push_back(std::move(g));
  }
  return grad;
}

double pass_at_k(std::int64_t n, std::int64_t c, std::int64_t k) {
  if (n < 0 || c < 0 || c > n || k < 1 || k > n) {
    throw DomainError("pass_at_k requires 0 <= c <= n and 1 <= k <= n");
  }
  const std::int64_t failures = n - c;
  if (failures < k) return 1.0;
  // C(n-c, k) / C(n, k) = prod_{i=0}^{k-1} (n-c-i) / (n-i)
  double ratio = 1.0;
  for (std::int64_t i = 0; i < k; ++i) {
    ratio *= static_cast<double>(failures - i) / static_cast<double>(n - i);
  }
  return 1.0 - ratio;
}

}  // namespace polyverify::rlmath
