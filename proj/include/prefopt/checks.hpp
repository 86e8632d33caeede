#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "prefopt/losses.hpp"
#include "prefopt/miest.hpp"

namespace prefopt {

inline constexpr double kGradcheckTolerance = 1e-5;

/// A random (policy, reference, example, hyperparameter) draw for one
/// objective and backend. For rm the parameters checked are the reward's.
struct GradInstance {
    Objective objective = Objective::dpo;
    std::unique_ptr<Policy> policy;
    std::unique_ptr<Policy> ref;
    PreferenceExample example;
    LossSpec spec;
    LatentReward reward;
};

GradInstance make_grad_instance(Objective objective, Backend backend, std::uint64_t seed);

/// max_k |analytic_k - numeric_k| / max(|analytic|_inf, |numeric|_inf, 1e-8)
/// with central differences of step h.
double grad_relative_error(GradInstance& inst, double h = 1e-5, bool flip_sign = false);

struct GradcheckRow {
    Objective objective = Objective::dpo;
    Backend backend = Backend::tabular;
    std::size_t instances = 0;
    double max_rel_error = 0.0;
    bool pass = false;
};

struct GradcheckOptions {
    std::uint64_t seed = 0;
    std::size_t instances = 100;
    /// Negates every analytic gradient; the suite must then fail.
    bool inject_sign_flip = false;
};

/// Every objective crossed with both backends.
std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts);

struct MicheckRow {
    std::string joint;
    double exact_cmi = 0.0;
    double nwj = 0.0;
    double infonce = 0.0;
    double infonce_ceiling = 0.0;
    /// exact_cmi - nwj
    double gap = 0.0;
    /// Largest excess of any evaluated bound over exact_cmi.
    double max_excess = 0.0;
    bool pass = false;
};

inline constexpr double kMicheckGapTolerance = 0.02;

std::vector<MicheckRow> run_micheck(std::uint64_t seed, std::size_t infonce_batch = 16);

}  // namespace prefopt
