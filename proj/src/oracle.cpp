#include "prefopt/oracle.hpp"

#include <algorithm>
#include <cmath>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

namespace {

void check_beta(double beta) {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidInput("beta must be positive and finite");
}

void check_same_size(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw InvalidInput(std::string(what) + ": size mismatch");
}

std::vector<double> rewards_for(const SeqDistribution& space, const LatentReward& reward,
                                std::span<const Token> prompt) {
    std::vector<double> r(space.size());
    for (std::size_t i = 0; i < r.size(); ++i) r[i] = reward(prompt, space.seqs[i]);
    return r;
}

}  // namespace

double log_partition(std::span<const double> ref_log_probs, std::span<const double> rewards, double beta) {
    check_beta(beta);
    check_same_size(ref_log_probs.size(), rewards.size(), "log_partition");
    std::vector<double> terms(rewards.size());
    for (std::size_t i = 0; i < terms.size(); ++i) terms[i] = ref_log_probs[i] + rewards[i] / beta;
    return logsumexp(terms);
}

double partition_fn(const Policy& ref_policy, const LatentReward& reward, double beta, std::span<const Token> prompt) {
    const auto space = enumerate_seqs(ref_policy, prompt);
    return std::exp(log_partition(space.log_probs, rewards_for(space, reward, prompt), beta));
}

std::vector<double> optimal_distribution(std::span<const double> ref_probs, std::span<const double> rewards,
                                         double beta) {
    check_same_size(ref_probs.size(), rewards.size(), "optimal_distribution");
    std::vector<double> log_ref(ref_probs.size());
    for (std::size_t i = 0; i < log_ref.size(); ++i) log_ref[i] = std::log(ref_probs[i]);
    const double log_z = log_partition(log_ref, rewards, beta);
    std::vector<double> out(ref_probs.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_ref[i] + rewards[i] / beta - log_z);
    return out;
}

SeqDistribution optimal_policy(const Policy& ref_policy, const LatentReward& reward, double beta,
                               std::span<const Token> prompt) {
    auto space = enumerate_seqs(ref_policy, prompt);
    const auto r = rewards_for(space, reward, prompt);
    const double log_z = log_partition(space.log_probs, r, beta);
    for (std::size_t i = 0; i < space.size(); ++i) space.log_probs[i] += r[i] / beta - log_z;
    return space;
}

ObjectiveValue rlhf_objective(std::span<const double> policy_probs, std::span<const double> ref_probs,
                              std::span<const double> rewards, double beta) {
    check_beta(beta);
    check_same_size(policy_probs.size(), ref_probs.size(), "rlhf_objective");
    check_same_size(policy_probs.size(), rewards.size(), "rlhf_objective");
    double expected_reward = 0.0;
    double kl = 0.0;
    for (std::size_t i = 0; i < policy_probs.size(); ++i) {
        const double p = policy_probs[i];
        if (p <= 0.0) continue;
        if (ref_probs[i] <= 0.0) return {ObjectiveValue::kSentinel, true};
        expected_reward += p * rewards[i];
        kl += p * (std::log(p) - std::log(ref_probs[i]));
    }
    return {expected_reward - beta * kl, false};
}

ObjectiveValue rlhf_objective(const Policy& policy, const Policy& ref_policy, const LatentReward& reward,
                              double beta, std::span<const Token> prompt) {
    const auto pi = enumerate_seqs(policy, prompt);
    const auto ref = enumerate_seqs(ref_policy, prompt);
    return rlhf_objective(pi.probs(), ref.probs(), rewards_for(ref, reward, prompt), beta);
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
    check_same_size(p.size(), q.size(), "kl_divergence");
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        if (q[i] <= 0.0) throw SupportError("q has zero mass at index " + std::to_string(i) + " where p is positive");
        kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    }
    return kl;
}

double reverse_kl(const SeqDistribution& p, const SeqDistribution& q) {
    check_same_size(p.size(), q.size(), "reverse_kl");
    std::string offending;
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.seqs[i] != q.seqs[i]) throw InvalidInput("reverse_kl: distributions enumerate different sequences");
        const double lp = p.log_probs[i];
        if (lp == kNegInf) continue;
        const double lq = q.log_probs[i];
        if (lq == kNegInf) {
            if (!offending.empty()) offending += ' ';
            offending += seq_to_string(p.seqs[i]);
            continue;
        }
        kl += std::exp(lp) * (lp - lq);
    }
    if (!offending.empty()) throw SupportError("q has zero probability where p is positive: " + offending);
    return kl;
}

double reverse_kl(const Policy& p, const Policy& q, std::span<const Token> prompt) {
    return reverse_kl(enumerate_seqs(p, prompt), enumerate_seqs(q, prompt));
}

double total_variation(std::span<const double> p, std::span<const double> q) {
    check_same_size(p.size(), q.size(), "total_variation");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += std::abs(p[i] - q[i]);
    return 0.5 * acc;
}

double surrogate_objective(std::span<const double> policy_probs, std::span<const double> chosen_probs,
                           std::span<const double> ref_probs) {
    check_same_size(policy_probs.size(), chosen_probs.size(), "surrogate_objective");
    check_same_size(policy_probs.size(), ref_probs.size(), "surrogate_objective");
    double reward_term = 0.0;
    for (std::size_t i = 0; i < policy_probs.size(); ++i) {
        const double p = policy_probs[i];
        if (p <= 0.0) continue;
        if (chosen_probs[i] <= 0.0 || ref_probs[i] <= 0.0) {
            throw SupportError("surrogate objective undefined: policy mass outside chosen/reference support");
        }
        reward_term += p * (std::log(chosen_probs[i]) - std::log(ref_probs[i]));
    }
    return reward_term - kl_divergence(policy_probs, ref_probs);
}

ReparamCheck density_ratio_reparam_check(const SeqDistribution& policy, const SeqDistribution& ref,
                                         std::span<const double> critic) {
    check_same_size(ref.size(), critic.size(), "density_ratio_reparam_check");
    check_same_size(ref.size(), policy.size(), "density_ratio_reparam_check");
    std::vector<double> terms(ref.size());
    for (std::size_t i = 0; i < terms.size(); ++i) terms[i] = ref.log_probs[i] + critic[i];
    ReparamCheck out;
    out.log_z = logsumexp(terms);
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (ref.log_probs[i] == kNegInf) continue;
        const double log_star = terms[i] - out.log_z;
        const double lhs = log_star - ref.log_probs[i];
        out.reparam_deviation = std::max(out.reparam_deviation, std::abs(lhs - (critic[i] - out.log_z)));
        out.policy_deviation = std::max(out.policy_deviation, std::abs(policy.log_probs[i] - log_star));
    }
    return out;
}

ReparamCheck density_ratio_reparam_check(const Policy& policy, const Policy& ref_policy,
                                         std::span<const double> critic, std::span<const Token> prompt) {
    return density_ratio_reparam_check(enumerate_seqs(policy, prompt), enumerate_seqs(ref_policy, prompt), critic);
}

// ---------------------------------------------------------------------------
// search oracles

SearchResult grid_search_rlhf(std::span<const double> ref_probs, std::span<const double> rewards, double beta,
                              double step) {
    check_beta(beta);
    check_same_size(ref_probs.size(), rewards.size(), "grid_search_rlhf");
    const std::size_t n = ref_probs.size();
    if (n < 1 || n > 3) throw CapacityError("grid search supports 1 to 3 sequences; use projected_gradient_rlhf");
    if (!(step > 0.0 && step <= 1.0)) throw InvalidInput("grid step must lie in (0, 1]");
    const auto ticks = static_cast<std::size_t>(std::llround(1.0 / step));

    auto point = [&](std::size_t i, std::size_t j) {
        std::vector<double> pi(n, 0.0);
        const double t = static_cast<double>(ticks);
        if (n == 1) {
            pi[0] = 1.0;
        } else if (n == 2) {
            pi[0] = static_cast<double>(i) / t;
            pi[1] = static_cast<double>(ticks - i) / t;
        } else {
            pi[0] = static_cast<double>(i) / t;
            pi[1] = static_cast<double>(j) / t;
            pi[2] = static_cast<double>(ticks - i - j) / t;
        }
        return pi;
    };

    const std::size_t outer = n == 1 ? 1 : ticks + 1;
    std::vector<double> best_val(outer, kNegInf);
    std::vector<std::size_t> best_j(outer, 0);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::size_t i = 0; i < outer; ++i) {
        const std::size_t inner = n == 3 ? ticks - i + 1 : 1;
        for (std::size_t j = 0; j < inner; ++j) {
            const auto v = rlhf_objective(point(i, j), ref_probs, rewards, beta);
            if (v.neg_infinite) continue;
            if (v.value > best_val[i]) {
                best_val[i] = v.value;
                best_j[i] = j;
            }
        }
    }
    std::size_t bi = 0;
    for (std::size_t i = 1; i < outer; ++i) {
        if (best_val[i] > best_val[bi]) bi = i;
    }
    if (best_val[bi] == kNegInf) throw InvalidInput("every grid point has zero reference support");
    return {point(bi, best_j[bi]), best_val[bi]};
}

namespace {

// Euclidean projection onto {x >= floor, sum x = 1} (sort-based).
void project_to_simplex(std::vector<double>& v, double floor) {
    const double mass = 1.0 - floor * static_cast<double>(v.size());
    std::vector<double> u(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) u[k] = v[k] - floor;
    std::sort(u.begin(), u.end(), std::greater<>());
    double cumsum = 0.0;
    double theta = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        cumsum += u[k];
        const double t = (cumsum - mass) / static_cast<double>(k + 1);
        if (u[k] - t > 0.0) theta = t;
    }
    for (double& x : v) x = floor + std::max(0.0, x - floor - theta);
}

}  // namespace

SearchResult projected_gradient_rlhf(std::span<const double> ref_probs, std::span<const double> rewards, double beta,
                                     std::size_t restarts, std::size_t steps, std::uint64_t seed) {
    check_beta(beta);
    check_same_size(ref_probs.size(), rewards.size(), "projected_gradient_rlhf");
    if (restarts == 0) throw InvalidInput("projected_gradient_rlhf needs at least one restart");
    const std::size_t n = ref_probs.size();
    // Keeps log(pi) finite; the optimum is interior wherever pi_ref > 0.
    const double floor = 1e-12 / static_cast<double>(n);
    auto value = [&](const std::vector<double>& pi) { return rlhf_objective(pi, ref_probs, rewards, beta); };
    SearchResult best{{}, kNegInf};
    for (std::size_t r = 0; r < restarts; ++r) {
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
        std::vector<double> pi(n);
        double total = 0.0;
        for (double& p : pi) {
            p = -std::log(1.0 - rng.uniform());
            total += p;
        }
        for (double& p : pi) p /= total;
        project_to_simplex(pi, floor);
        auto cur = value(pi);
        std::vector<double> grad(n), cand(n);
        double lr = 1.0 / beta;
        for (std::size_t s = 0; s < steps && !cur.neg_infinite; ++s) {
            for (std::size_t i = 0; i < n; ++i) {
                grad[i] = rewards[i] - beta * (std::log(pi[i]) - std::log(ref_probs[i]) + 1.0);
            }
            // Armijo backtracking along the projection arc.
            lr *= 2.0;
            bool moved = false;
            while (lr > 1e-30) {
                for (std::size_t i = 0; i < n; ++i) cand[i] = pi[i] + lr * grad[i];
                project_to_simplex(cand, floor);
                double ascent = 0.0;
                for (std::size_t i = 0; i < n; ++i) ascent += grad[i] * (cand[i] - pi[i]);
                const auto next = value(cand);
                if (!next.neg_infinite && next.value >= cur.value + 1e-4 * ascent) {
                    moved = cand != pi;
                    pi.swap(cand);
                    cur = next;
                    break;
                }
                lr *= 0.5;
            }
            if (!moved) break;
        }
        if (!cur.neg_infinite && cur.value > best.value) best = {pi, cur.value};
    }
    return best;
}

}  // namespace prefopt
