#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "prefopt/rng.hpp"

namespace prefopt {

/// P(Y = y, C = c | X = x) for one x, with its prior p(x). table[y][c].
struct JointSlice {
    double p = 0.0;
    std::vector<std::array<double, 2>> table;
};

/// Small explicit conditional joint used for exact mutual information.
struct DiscreteJoint {
    std::vector<JointSlice> x;

    /// Throws InvalidInput unless every table and p(x) is a distribution (1e-12).
    void validate() const;

    nlohmann::json to_json() const;
    static DiscreteJoint from_json(const nlohmann::json& doc);

    /// Single x; Y uniform over ny states and C ~ Bernoulli(pc1), independent.
    static DiscreteJoint independent(std::size_t ny, double pc1);
    /// Single x; C uniform binary and Y = C.
    static DiscreteJoint copy_binary();
    /// Random strictly positive tables.
    static DiscreteJoint random(Rng& rng, std::size_t nx, std::size_t ny);
};

/// f(x, y, c) as a table; critic.f[x][y][c].
struct TabularCritic {
    std::vector<std::vector<std::array<double, 2>>> f;

    static TabularCritic zeros(const DiscreteJoint& joint);
    static TabularCritic random(const DiscreteJoint& joint, Rng& rng, double scale);
    /// log P(y,c|x) / (P(y|x) P(c|x)); zero-probability cells get kLogFloor.
    static TabularCritic optimal(const DiscreteJoint& joint);

    static constexpr double kLogFloor = -700.0;
};

/// E_x[ KL(P_{Y,C|x} || P_{Y|x} P_{C|x}) ] in nats, with 0 log 0 = 0.
double exact_cmi(const DiscreteJoint& joint);

struct EstimateResult {
    double estimate = 0.0;
    double std_error = 0.0;
    /// The same bound evaluated by enumeration.
    double exact = 0.0;
};

/// NWJ bound E_P[f] - E_{P_Y P_C}[e^f] + 1 by enumeration.
double nwj_exact(const DiscreteJoint& joint, const TabularCritic& critic);

EstimateResult nwj_estimate(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t n_pos,
                            std::size_t n_neg, std::uint64_t seed);

/// InfoNCE with one positive (y, c_1) and batch-1 negatives (y, c_j),
/// c_j ~ P(c|x), by enumerating the binomial count of negative labels.
double infonce_exact(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t batch);

struct InfoNceResult : EstimateResult {
    double ceiling = 0.0;  // log(batch)
};

InfoNceResult infonce_estimate(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t batch,
                               std::size_t n_anchors, std::uint64_t seed);

enum class Bound { nwj, infonce };

struct CriticTracePoint {
    std::size_t step = 0;
    double bound = 0.0;
    double grad_norm = 0.0;
};

struct TrainCriticResult {
    TabularCritic critic;
    std::vector<CriticTracePoint> trace;
};

struct TrainCriticOptions {
    std::size_t steps = 2000;
    double lr = 0.5;
    std::uint64_t seed = 0;
    double init_scale = 0.01;
    std::size_t infonce_batch = 16;
};

/// Full-batch gradient ascent on the exact bound. trace[k] is the bound
/// before step k, plus one final entry.
TrainCriticResult train_critic(const DiscreteJoint& joint, Bound bound, const TrainCriticOptions& opts);

/// step,bound,grad_norm
std::string critic_trace_csv(const std::vector<CriticTracePoint>& trace);

}  // namespace prefopt
