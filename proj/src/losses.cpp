#include "prefopt/losses.hpp"

#include <array>
#include <cmath>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

namespace {

constexpr std::array kObjectives{Objective::dpo, Objective::infopo, Objective::rm,   Objective::ipo,
                                 Objective::cpo, Objective::slic,   Objective::simpo};

}  // namespace

std::string_view objective_name(Objective o) {
    switch (o) {
        case Objective::dpo: return "dpo";
        case Objective::infopo: return "infopo";
        case Objective::rm: return "rm";
        case Objective::ipo: return "ipo";
        case Objective::cpo: return "cpo";
        case Objective::slic: return "slic";
        case Objective::simpo: return "simpo";
    }
    return "unknown";
}

std::span<const Objective> all_objectives() { return kObjectives; }

std::string valid_objective_names() {
    std::string out;
    for (auto o : kObjectives) {
        if (!out.empty()) out += ", ";
        out += objective_name(o);
    }
    return out;
}

Objective parse_objective(std::string_view name) {
    for (auto o : kObjectives) {
        if (objective_name(o) == name) return o;
    }
    throw InvalidInput("unknown objective '" + std::string(name) + "'; valid objectives: " +
                       valid_objective_names());
}

void LossSpec::validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) throw InvalidInput("beta must be positive");
    if (!(gamma >= 0.0)) throw InvalidInput("gamma must be >= 0");
    if (!(lambda >= 0.0)) throw InvalidInput("lambda must be >= 0");
    if (!(delta >= 0.0)) throw InvalidInput("delta must be >= 0");
    if (!(tau > 0.0)) throw InvalidInput("tau must be positive");
    if (!std::isfinite(ratio_clamp_log)) throw InvalidInput("ratio_clamp_log must be finite");
}

RefTerms ref_terms(const Policy& ref_policy, const PreferenceExample& ex) {
    return {seq_logprob(ref_policy, ex.prompt, ex.chosen), seq_logprob(ref_policy, ex.prompt, ex.rejected)};
}

double loss_infonce_with_critic(double f_w, double f_l) {
    if (!std::isfinite(f_w) || !std::isfinite(f_l)) throw InvalidInput("critic values must be finite");
    return logsumexp2(f_w, f_l) - f_w;
}

double implicit_reward_critic(double beta, double policy_logp, double ref_logp) {
    return beta * (policy_logp - ref_logp);
}

namespace {

struct Evaluation {
    double value = 0.0;
    // Loss gradient = a_chosen * grad(l_w) + a_rejected * grad(l_l), where l
    // is the (possibly length-normalized) log-likelihood in use.
    double a_chosen = 0.0;
    double a_rejected = 0.0;
    bool normalized = false;
    bool clamped = false;
};

void require_finite(double x, const char* term) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite ") + term + " (" + std::to_string(x) + ")");
}

Evaluation evaluate(const LossSpec& spec, const Policy& policy, const RefTerms& ref, const PreferenceExample& ex) {
    if (ex.chosen == ex.rejected) throw InvalidInput("chosen and rejected responses are identical");
    const bool normalize = spec.length_normalize || spec.objective == Objective::simpo;
    const double len_w = normalize ? static_cast<double>(ex.chosen.size()) : 1.0;
    const double len_l = normalize ? static_cast<double>(ex.rejected.size()) : 1.0;

    const double lw = seq_logprob(policy, ex.prompt, ex.chosen) / len_w;
    const double ll = seq_logprob(policy, ex.prompt, ex.rejected) / len_l;
    const double rw = ref.chosen / len_w;
    const double rl = ref.rejected / len_l;

    Evaluation e;
    e.normalized = normalize;
    switch (spec.objective) {
        case Objective::dpo: {
            require_finite(lw - rw, "chosen log-ratio");
            require_finite(ll - rl, "rejected log-ratio");
            const double z = spec.beta * (lw - rw) - spec.beta * (ll - rl);
            const double d = sigmoid(-z);
            e.value = softplus(-z);
            e.a_chosen = -spec.beta * d;
            e.a_rejected = spec.beta * d;
            break;
        }
        case Objective::infopo: {
            if (rl == kNegInf) {
                throw NumericError("rejected response has zero reference probability (division by zero in ratio)");
            }
            require_finite(lw, "chosen log-likelihood");
            require_finite(ll - rl, "rejected log-ratio");
            double log_ratio = ll - rl;
            if (log_ratio > spec.ratio_clamp_log) {
                log_ratio = spec.ratio_clamp_log;
                e.clamped = true;
            }
            const double ratio = std::exp(log_ratio);
            e.value = -lw + ratio;
            e.a_chosen = -1.0;
            e.a_rejected = ratio;
            break;
        }
        case Objective::ipo: {
            require_finite(lw - rw, "chosen log-ratio");
            require_finite(ll - rl, "rejected log-ratio");
            const double h = (lw - rw) - (ll - rl);
            const double resid = h - 1.0 / (2.0 * spec.tau);
            e.value = resid * resid;
            e.a_chosen = 2.0 * resid;
            e.a_rejected = -2.0 * resid;
            break;
        }
        case Objective::cpo: {
            require_finite(lw, "chosen log-likelihood");
            require_finite(ll, "rejected log-likelihood");
            const double u = spec.beta * (lw - ll);
            const double s = sigmoid(-u);
            e.value = softplus(-u) - spec.lambda * lw;
            e.a_chosen = -spec.beta * s - spec.lambda;
            e.a_rejected = spec.beta * s;
            break;
        }
        case Objective::slic: {
            require_finite(lw, "chosen log-likelihood");
            require_finite(ll, "rejected log-likelihood");
            const double m = spec.delta - lw + ll;
            const double active = m > 0.0 ? 1.0 : 0.0;
            e.value = std::max(0.0, m) - spec.lambda * lw;
            e.a_chosen = -active - spec.lambda;
            e.a_rejected = active;
            break;
        }
        case Objective::simpo: {
            require_finite(lw, "chosen average log-likelihood");
            require_finite(ll, "rejected average log-likelihood");
            const double u = spec.beta * lw - spec.beta * ll - spec.gamma;
            const double s = sigmoid(-u);
            e.value = softplus(-u);
            e.a_chosen = -spec.beta * s;
            e.a_rejected = spec.beta * s;
            break;
        }
        case Objective::rm:
            throw InvalidInput("the rm objective trains a reward model; use loss_rm");
    }
    require_finite(e.value, "loss value");
    return e;
}

LossOutput assemble(const Evaluation& e, const Policy& policy, const PreferenceExample& ex) {
    LossOutput out;
    out.value = e.value;
    out.clamped = e.clamped;
    out.diag = {-e.a_chosen, e.a_rejected};
    out.grad.assign(policy.param_count(), 0.0);
    const double len_w = e.normalized ? static_cast<double>(ex.chosen.size()) : 1.0;
    const double len_l = e.normalized ? static_cast<double>(ex.rejected.size()) : 1.0;
    add_seq_score(policy, ex.prompt, ex.chosen, e.a_chosen / len_w, out.grad);
    add_seq_score(policy, ex.prompt, ex.rejected, e.a_rejected / len_l, out.grad);
    return out;
}

void require_objective(const LossSpec& spec, std::initializer_list<Objective> allowed, const char* op) {
    for (auto o : allowed) {
        if (spec.objective == o) return;
    }
    throw InvalidInput(std::string(op) + " does not handle objective " + std::string(objective_name(spec.objective)));
}

}  // namespace

double loss_value(const LossSpec& spec, const Policy& policy, const RefTerms& ref, const PreferenceExample& ex,
                  bool* clamped) {
    const auto e = evaluate(spec, policy, ref, ex);
    if (clamped) *clamped = e.clamped;
    return e.value;
}

LossOutput evaluate_loss(const LossSpec& spec, const Policy& policy, const RefTerms& ref,
                         const PreferenceExample& ex) {
    return assemble(evaluate(spec, policy, ref, ex), policy, ex);
}

LossOutput evaluate_loss(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                         const PreferenceExample& ex) {
    return evaluate_loss(spec, policy, ref_terms(ref_policy, ex), ex);
}

LossOutput loss_dpo(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                    const PreferenceExample& ex) {
    require_objective(spec, {Objective::dpo}, "loss_dpo");
    return evaluate_loss(spec, policy, ref_policy, ex);
}

LossOutput loss_infopo(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                       const PreferenceExample& ex) {
    require_objective(spec, {Objective::infopo}, "loss_infopo");
    return evaluate_loss(spec, policy, ref_policy, ex);
}

LossOutput loss_baseline(const LossSpec& spec, const Policy& policy, const Policy& ref_policy,
                         const PreferenceExample& ex) {
    require_objective(spec, {Objective::ipo, Objective::cpo, Objective::slic, Objective::simpo}, "loss_baseline");
    return evaluate_loss(spec, policy, ref_policy, ex);
}

double loss_rm_value(const LatentReward& reward_model, const PreferenceExample& ex) {
    const double rw = reward_model(ex.prompt, ex.chosen);
    const double rl = reward_model(ex.prompt, ex.rejected);
    require_finite(rw, "chosen reward");
    require_finite(rl, "rejected reward");
    return softplus(-(rw - rl));
}

LossOutput loss_rm(const LatentReward& reward_model, const PreferenceExample& ex) {
    const double rw = reward_model(ex.prompt, ex.chosen);
    const double rl = reward_model(ex.prompt, ex.rejected);
    require_finite(rw, "chosen reward");
    require_finite(rl, "rejected reward");
    const double s = sigmoid(-(rw - rl));
    LossOutput out;
    out.value = softplus(-(rw - rl));
    out.diag = {s, s};
    out.grad.assign(reward_model.params().size(), 0.0);
    reward_model.add_grad(ex.prompt, ex.chosen, -s, out.grad);
    reward_model.add_grad(ex.prompt, ex.rejected, s, out.grad);
    return out;
}

std::vector<WeightProfilePoint> grad_weight_profile(const LossSpec& spec, const TabularPolicy& policy,
                                                    const Policy& ref_policy, const PreferenceExample& ex,
                                                    std::size_t scale_steps) {
    std::size_t diverge = 0;
    while (diverge < ex.rejected.size() && diverge < ex.chosen.size() && ex.chosen[diverge] == ex.rejected[diverge]) {
        ++diverge;
    }
    if (diverge >= ex.rejected.size()) throw InvalidInput("chosen and rejected responses are identical");

    TabularPolicy work = policy;
    work.materialize(ex.prompt, ex.chosen);
    work.materialize(ex.prompt, ex.rejected);
    const auto prefix = std::span<const Token>(ex.rejected).first(diverge);
    const std::size_t row = work.materialize_row(ex.prompt, prefix);
    const auto token = static_cast<std::size_t>(ex.rejected[diverge]);
    const RefTerms ref = ref_terms(ref_policy, ex);
    const bool normalize = spec.length_normalize || spec.objective == Objective::simpo;
    const double len_l = normalize ? static_cast<double>(ex.rejected.size()) : 1.0;

    std::vector<WeightProfilePoint> profile;
    std::vector<double> lp(static_cast<std::size_t>(work.vocab_size()));
    for (std::size_t step = 0; step <= scale_steps; ++step) {
        const auto e = evaluate(spec, work, ref, ex);
        WeightProfilePoint pt;
        pt.pi_rejected = std::exp(seq_logprob(work, ex.prompt, ex.rejected));
        pt.w_rejected = e.a_rejected;
        // a * grad(log pi)/len = (a / (len * pi)) * grad(pi)
        pt.coefficient = e.a_rejected / (len_l * pt.pi_rejected);
        profile.push_back(pt);
        if (step == scale_steps) break;

        // Shift one logit so this conditional (and hence pi(y_l|x)) drops 10x.
        work.next_log_probs(ex.prompt, prefix, lp);
        const double p = std::exp(lp[token]);
        const double target = p / 10.0;
        const double shift = (std::log(target) - std::log1p(-target)) - (std::log(p) - std::log1p(-p));
        work.row(row)[token] += shift;
    }
    return profile;
}

}  // namespace prefopt
