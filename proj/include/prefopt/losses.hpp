#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "prefopt/prefdata.hpp"
#include "prefopt/seqmodel.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

enum class Objective { dpo, infopo, rm, ipo, cpo, slic, simpo };

std::string_view objective_name(Objective o);
/// Throws InvalidInput listing the valid names when `name` is unknown.
Objective parse_objective(std::string_view name);
std::span<const Objective> all_objectives();
std::string valid_objective_names();

/// Objective selector plus hyperparameters. Fields an objective does not use
/// are kept but ignored.
struct LossSpec {
    Objective objective = Objective::dpo;
    double beta = 0.1;
    double gamma = 0.0;   // simpo target margin
    double lambda = 0.0;  // cpo / slic likelihood weight
    double delta = 1.0;   // slic hinge margin
    double tau = 1.0;     // ipo
    bool length_normalize = false;
    /// InfoPO evaluates exp(min(log-ratio, ratio_clamp_log)).
    double ratio_clamp_log = 30.0;

    void validate() const;
};

/// Coefficients on the chosen / rejected score gradients, oriented so that a
/// descent step moves log pi(y_w) up by w_chosen and log pi(y_l) down by
/// w_rejected (per unit of the normalized log-likelihood in use).
struct GradWeights {
    double w_chosen = 0.0;
    double w_rejected = 0.0;
};

struct LossOutput {
    double value = 0.0;
    std::vector<double> grad;
    GradWeights diag;
    bool clamped = false;
};

/// Reference log-likelihoods of an example (unnormalized); the reference is
/// frozen so these are computed once per example.
struct RefTerms {
    double chosen = 0.0;
    double rejected = 0.0;
};

RefTerms ref_terms(const Policy& ref_policy, const PreferenceExample& ex);

/// Dispatch on spec.objective for every policy objective (everything but rm).
LossOutput evaluate_loss(const LossSpec& spec, const Policy& policy, const RefTerms& ref,
                         const PreferenceExample& ex);
LossOutput evaluate_loss(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                         const PreferenceExample& ex);

/// Value only; no gradient work.
double loss_value(const LossSpec& spec, const Policy& policy, const RefTerms& ref, const PreferenceExample& ex,
                  bool* clamped = nullptr);

LossOutput loss_dpo(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                    const PreferenceExample& ex);
LossOutput loss_infopo(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                       const PreferenceExample& ex);
/// ipo | cpo | slic | simpo, selected by spec.objective.
LossOutput loss_baseline(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                         const PreferenceExample& ex);

/// Bradley-Terry reward-model loss; the gradient is over reward_model.params().
LossOutput loss_rm(const LatentReward& reward_model, const PreferenceExample& ex);
double loss_rm_value(const LatentReward& reward_model, const PreferenceExample& ex);

/// Two-term InfoNCE: -log(e^{f_w} / (e^{f_w} + e^{f_l})).
double loss_infonce_with_critic(double f_w, double f_l);

/// The critic under which InfoNCE reproduces DPO: beta * (l_theta - l_ref).
double implicit_reward_critic(double beta, double policy_logp, double ref_logp);

struct WeightProfilePoint {
    double pi_rejected = 0.0;
    double w_rejected = 0.0;
    /// Coefficient of grad pi(y_l|x) in the loss gradient.
    double coefficient = 0.0;
};

/// Scales pi(y_l|x) down by 10x per step (by shifting the logit of y_l's
/// first diverging token) and records the rejected gradient weight.
std::vector<WeightProfilePoint> grad_weight_profile(const LossSpec& spec, const TabularPolicy& policy,
                                                    const Policy& ref_policy, const PreferenceExample& ex,
                                                    std::size_t scale_steps);

}  // namespace prefopt
