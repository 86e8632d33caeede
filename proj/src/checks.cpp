#include "prefopt/checks.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>

#include "prefopt/errors.hpp"
#include "prefopt/log_bilinear_policy.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

namespace {

constexpr int kTabVocab = 4;
constexpr int kTabLen = 3;
constexpr int kLbVocab = 5;
constexpr int kLbLen = 3;
constexpr int kLbDim = 3;

std::unique_ptr<Policy> random_policy(Backend backend, const TokenSeq& prompt, Rng& rng) {
    if (backend == Backend::tabular) {
        auto p = std::make_unique<TabularPolicy>(kTabVocab, kTabLen);
        p->materialize_all(prompt);
        p->randomize(rng, 1.0);
        return p;
    }
    auto p = std::make_unique<LogBilinearPolicy>(kLbVocab, kLbLen, kLbDim);
    p->randomize(rng, 0.7);
    return p;
}

// Keeps finite differences away from the hinge and clamp kinks.
void avoid_kinks(GradInstance& inst) {
    if (inst.objective != Objective::slic) return;
    const bool norm = inst.spec.length_normalize;
    const auto& ex = inst.example;
    const double lw = seq_logprob(*inst.policy, ex.prompt, ex.chosen) / (norm ? ex.chosen.size() : 1.0);
    const double ll = seq_logprob(*inst.policy, ex.prompt, ex.rejected) / (norm ? ex.rejected.size() : 1.0);
    const double m = inst.spec.delta - lw + ll;
    if (std::abs(m) < 1e-2) inst.spec.delta += 0.5;
}

double inf_norm(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

}  // namespace

GradInstance make_grad_instance(Objective objective, Backend backend, std::uint64_t seed) {
    Rng rng(seed);
    const int vocab = backend == Backend::tabular ? kTabVocab : kLbVocab;
    GradInstance inst;
    inst.objective = objective;
    const TokenSeq prompt{static_cast<Token>(1 + rng.below(vocab - 1)), kEos};
    inst.policy = random_policy(backend, prompt, rng);
    inst.ref = random_policy(backend, prompt, rng);

    auto& ex = inst.example;
    ex.prompt = prompt;
    ex.chosen = sample(*inst.ref, prompt, rng);
    do {
        ex.rejected = sample(*inst.ref, prompt, rng);
    } while (ex.rejected == ex.chosen);

    auto& s = inst.spec;
    s.objective = objective;
    s.beta = 0.05 + 1.95 * rng.uniform();
    s.gamma = 0.5 * rng.uniform();
    s.lambda = 0.5 * rng.uniform();
    s.delta = 0.5 + rng.uniform();
    s.tau = 0.2 + rng.uniform();
    s.length_normalize = rng.below(2) == 1;

    if (objective == Objective::rm) {
        if (backend == Backend::tabular) {
            inst.reward = LatentReward::table(1.0, 0.0);
            inst.reward.set(prompt, ex.chosen, rng.normal());
            inst.reward.set(prompt, ex.rejected, rng.normal());
        } else {
            std::vector<double> w(static_cast<std::size_t>(vocab));
            for (double& x : w) x = rng.normal();
            inst.reward = LatentReward::feature_linear(std::move(w), 1.0);
        }
    }
    avoid_kinks(inst);
    return inst;
}

double grad_relative_error(GradInstance& inst, double h, bool flip_sign) {
    std::vector<double> analytic;
    std::span<double> params;
    std::function<double()> value;
    if (inst.objective == Objective::rm) {
        analytic = loss_rm(inst.reward, inst.example).grad;
        params = inst.reward.params();
        value = [&] { return loss_rm_value(inst.reward, inst.example); };
    } else {
        const RefTerms ref = ref_terms(*inst.ref, inst.example);
        analytic = evaluate_loss(inst.spec, *inst.policy, ref, inst.example).grad;
        params = inst.policy->params();
        value = [&, ref] { return loss_value(inst.spec, *inst.policy, ref, inst.example); };
    }
    if (flip_sign) {
        for (double& g : analytic) g = -g;
    }
    std::vector<double> numeric(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double saved = params[k];
        params[k] = saved + h;
        const double up = value();
        params[k] = saved - h;
        const double down = value();
        params[k] = saved;
        numeric[k] = (up - down) / (2.0 * h);
    }
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) worst = std::max(worst, std::abs(analytic[k] - numeric[k]));
    const double scale = std::max({inf_norm(analytic), inf_norm(numeric), 1e-8});
    return worst / scale;
}

std::vector<GradcheckRow> run_gradcheck(const GradcheckOptions& opts) {
    std::vector<GradcheckRow> rows;
    for (auto objective : all_objectives()) {
        for (auto backend : {Backend::tabular, Backend::log_bilinear}) {
            GradcheckRow row{objective, backend, opts.instances, 0.0, false};
            const std::string tag = std::string(objective_name(objective)) + "/" + std::string(backend_name(backend));
            std::vector<double> errs(opts.instances, 0.0);
            std::vector<std::exception_ptr> failures(opts.instances);
#pragma omp parallel for schedule(dynamic)
            for (std::size_t i = 0; i < opts.instances; ++i) {
                try {
                    auto inst = make_grad_instance(objective, backend,
                                                   derive_seed(derive_seed(opts.seed, tag), static_cast<std::uint64_t>(i)));
                    errs[i] = grad_relative_error(inst, 1e-5, opts.inject_sign_flip);
                } catch (...) {
                    failures[i] = std::current_exception();
                }
            }
            for (const auto& f : failures) {
                if (f) std::rethrow_exception(f);
            }
            for (double e : errs) row.max_rel_error = std::max(row.max_rel_error, e);
            row.pass = row.max_rel_error <= kGradcheckTolerance;
            rows.push_back(row);
        }
    }
    return rows;
}

std::vector<MicheckRow> run_micheck(std::uint64_t seed, std::size_t infonce_batch) {
    Rng joint_rng(derive_seed(seed, "micheck_joint"));
    const std::vector<std::pair<std::string, DiscreteJoint>> joints{
        {"independent", DiscreteJoint::independent(3, 0.3)},
        {"copy", DiscreteJoint::copy_binary()},
        {"random3", DiscreteJoint::random(joint_rng, 2, 3)},
    };
    std::vector<MicheckRow> rows;
    for (const auto& [name, joint] : joints) {
        MicheckRow row;
        row.joint = name;
        row.exact_cmi = exact_cmi(joint);
        row.infonce_ceiling = std::log(static_cast<double>(infonce_batch));
        TrainCriticOptions opts;
        opts.seed = derive_seed(seed, name + "/nwj");
        opts.infonce_batch = infonce_batch;
        const auto nwj = train_critic(joint, Bound::nwj, opts);
        opts.seed = derive_seed(seed, name + "/infonce");
        const auto nce = train_critic(joint, Bound::infonce, opts);
        row.nwj = nwj.trace.back().bound;
        row.infonce = nce.trace.back().bound;
        row.gap = row.exact_cmi - row.nwj;
        row.max_excess = -std::numeric_limits<double>::infinity();
        for (const auto* trace : {&nwj.trace, &nce.trace}) {
            for (const auto& p : *trace) row.max_excess = std::max(row.max_excess, p.bound - row.exact_cmi);
        }
        row.pass = row.gap <= kMicheckGapTolerance && row.max_excess <= 1e-9;
        rows.push_back(row);
    }
    return rows;
}

}  // namespace prefopt
