#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "prefopt/prefdata.hpp"
#include "prefopt/seqmodel.hpp"

namespace prefopt {

/// Z(x) = sum_y pi_ref(y|x) exp(r(x,y) / beta), by enumeration.
double partition_fn(const Policy& ref_policy, const LatentReward& reward, double beta, std::span<const Token> prompt);
double log_partition(std::span<const double> ref_log_probs, std::span<const double> rewards, double beta);

/// pi*(y|x) = pi_ref(y|x) exp(r(x,y)/beta) / Z(x), aligned with enumerate_seqs.
SeqDistribution optimal_policy(const Policy& ref_policy, const LatentReward& reward, double beta,
                               std::span<const Token> prompt);
std::vector<double> optimal_distribution(std::span<const double> ref_probs, std::span<const double> rewards,
                                         double beta);

/// Value of E_pi[r] - beta KL(pi || pi_ref). When pi puts mass where pi_ref
/// has none the value is -inf, reported as a sentinel plus flag.
struct ObjectiveValue {
    static constexpr double kSentinel = std::numeric_limits<double>::lowest();
    double value = 0.0;
    bool neg_infinite = false;
};

ObjectiveValue rlhf_objective(std::span<const double> policy_probs, std::span<const double> ref_probs,
                              std::span<const double> rewards, double beta);
ObjectiveValue rlhf_objective(const Policy& policy, const Policy& ref_policy, const LatentReward& reward,
                              double beta, std::span<const Token> prompt);

/// sum_y p(y) (log p(y) - log q(y)); both distributions over the same
/// enumerated sequences. Throws SupportError listing sequences with q = 0 < p.
double reverse_kl(const SeqDistribution& p, const SeqDistribution& q);
double reverse_kl(const Policy& p, const Policy& q, std::span<const Token> prompt);
double kl_divergence(std::span<const double> p, std::span<const double> q);

double total_variation(std::span<const double> p, std::span<const double> q);

/// E_pi[log(pi_chosen / pi_ref)] - KL(pi || pi_ref); equals -KL(pi || pi_chosen).
double surrogate_objective(std::span<const double> policy_probs, std::span<const double> chosen_probs,
                           std::span<const double> ref_probs);

struct ReparamCheck {
    /// max_y |log(pi*/pi_ref) - (f - log Z)|
    double reparam_deviation = 0.0;
    /// max_y |log pi(y) - log pi*(y)| for the supplied policy
    double policy_deviation = 0.0;
    double log_z = 0.0;
};

/// Builds pi* = pi_ref e^f / Z from a per-sequence critic and checks the
/// log-ratio identity pointwise; also reports how far `policy` is from pi*.
ReparamCheck density_ratio_reparam_check(const SeqDistribution& policy, const SeqDistribution& ref,
                                         std::span<const double> critic);
ReparamCheck density_ratio_reparam_check(const Policy& policy, const Policy& ref_policy,
                                         std::span<const double> critic, std::span<const Token> prompt);

struct SearchResult {
    std::vector<double> argmax;
    double value = 0.0;
};

/// Exhaustive simplex grid (resolution `step`) for up to three sequences.
/// Ties go to the lowest grid index.
SearchResult grid_search_rlhf(std::span<const double> ref_probs, std::span<const double> rewards, double beta,
                              double step = 1e-3);

/// Random-restart projected gradient ascent for larger enumerable spaces.
SearchResult projected_gradient_rlhf(std::span<const double> ref_probs, std::span<const double> rewards, double beta,
                                     std::size_t restarts, std::size_t steps, std::uint64_t seed);

}  // namespace prefopt
