#include <doctest.h>

#include <cmath>

#include <omp.h>

#include "prefopt/batch.hpp"
#include "prefopt/checkpoint.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/losses.hpp"
#include "prefopt/numeric.hpp"
#include "support.hpp"

using namespace prefopt;
using namespace testsupport;

namespace {

const TokenSeq kPrompt{kEos};

// V=3, L=1: the sequences are EOS, (1 EOS), (2 EOS) with the given masses.
TabularPolicy three_seq(double p0, double p1, double p2) {
    TabularPolicy p(3, 1);
    p.materialize_all(kPrompt);
    auto row = p.row(*p.find_row(kPrompt, TokenSeq{}));
    row[0] = std::log(p0);
    row[1] = std::log(p1);
    row[2] = std::log(p2);
    return p;
}

PreferenceExample pair(TokenSeq w, TokenSeq l) {
    PreferenceExample ex;
    ex.prompt = kPrompt;
    ex.chosen = std::move(w);
    ex.rejected = std::move(l);
    return ex;
}

struct Instance {
    std::unique_ptr<Policy> policy;
    std::unique_ptr<Policy> ref;
    PreferenceExample ex;
    LossSpec spec;
};

Instance random_instance(Rng& rng, Backend backend, Objective obj) {
    Instance in;
    in.ex.prompt = random_prompt(rng, 4, 1);
    in.policy = random_policy(rng, backend, in.ex.prompt);
    in.ref = random_policy(rng, backend, in.ex.prompt);
    in.ex.chosen = random_response(rng, 4, 3);
    do {
        in.ex.rejected = random_response(rng, 4, 3);
    } while (in.ex.rejected == in.ex.chosen);
    in.spec.objective = obj;
    in.spec.beta = 0.05 + 2.0 * rng.uniform();
    in.spec.gamma = rng.uniform();
    in.spec.lambda = rng.uniform();
    in.spec.delta = 0.5 + rng.uniform();
    in.spec.tau = 0.2 + rng.uniform();
    in.spec.length_normalize = rng.below(2) == 1;
    return in;
}

/// Independent scalar evaluation of every policy objective.
double oracle_loss(const Instance& in) {
    const auto& ex = in.ex;
    const auto& s = in.spec;
    const bool norm = s.length_normalize || s.objective == Objective::simpo;
    const double nw = norm ? static_cast<double>(ex.chosen.size()) : 1.0;
    const double nl = norm ? static_cast<double>(ex.rejected.size()) : 1.0;
    const double lw = oracle_seq_logprob(*in.policy, ex.prompt, ex.chosen) / nw;
    const double ll = oracle_seq_logprob(*in.policy, ex.prompt, ex.rejected) / nl;
    const double rw = oracle_seq_logprob(*in.ref, ex.prompt, ex.chosen) / nw;
    const double rl = oracle_seq_logprob(*in.ref, ex.prompt, ex.rejected) / nl;
    const double h = (lw - rw) - (ll - rl);
    switch (s.objective) {
        case Objective::dpo: return neg_log_sigmoid(s.beta * h);
        case Objective::infopo: return -lw + std::exp(std::min(ll - rl, s.ratio_clamp_log));
        case Objective::ipo: return std::pow(h - 1 / (2 * s.tau), 2);
        case Objective::cpo: return neg_log_sigmoid(s.beta * (lw - ll)) - s.lambda * lw;
        case Objective::slic: return std::max(0.0, s.delta - lw + ll) - s.lambda * lw;
        case Objective::simpo: return neg_log_sigmoid(s.beta * lw - s.beta * ll - s.gamma);
        case Objective::rm: break;
    }
    throw std::logic_error("rm has no policy loss");
}

double avg_or_seq(bool norm, const Policy& pol, const TokenSeq& prompt, const TokenSeq& y) {
    return norm ? avg_logprob(pol, prompt, y) : seq_logprob(pol, prompt, y);
}

std::vector<Objective> policy_objectives() {
    std::vector<Objective> out;
    for (auto o : all_objectives()) {
        if (o != Objective::rm) out.push_back(o);
    }
    return out;
}

}  // namespace

TEST_CASE("objective names") {
    CHECK(all_objectives().size() == 7);
    for (auto o : all_objectives()) CHECK(parse_objective(objective_name(o)) == o);
    try {
        parse_objective("kto");
        FAIL("expected InvalidInput");
    } catch (const InvalidInput& e) {
        const std::string msg = e.what();
        for (auto o : all_objectives()) CHECK(msg.find(objective_name(o)) != std::string::npos);
    }
}

TEST_CASE("LossSpec validation") {
    LossSpec s;
    s.beta = 0.0;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.beta = 0.1;
    s.tau = 0.0;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
    s.tau = 1.0;
    s.lambda = -1.0;
    CHECK_THROWS_AS(s.validate(), InvalidInput);
}

TEST_CASE("every objective matches the scalar oracle") {
    Rng rng(41);
    for (auto backend : {Backend::tabular, Backend::log_bilinear}) {
        for (auto obj : policy_objectives()) {
            for (int trial = 0; trial < 40; ++trial) {
                const auto in = random_instance(rng, backend, obj);
                const auto out = evaluate_loss(in.spec, *in.policy, *in.ref, in.ex);
                CHECK(out.value == doctest::Approx(oracle_loss(in)).epsilon(1e-11));
                CHECK(out.grad.size() == in.policy->param_count());
                CHECK(loss_value(in.spec, *in.policy, ref_terms(*in.ref, in.ex), in.ex) == out.value);
            }
        }
    }
}

TEST_CASE("DPO hand cases") {
    const auto ref = three_seq(0.5, 0.2, 0.3);
    const auto ex = pair({1, kEos}, {2, kEos});
    LossSpec s;
    s.objective = Objective::dpo;
    s.beta = 1.0;
    CHECK(loss_dpo(s, ref, ref, ex).value == doctest::Approx(0.693147).epsilon(1e-6));
    // log-ratios (1, -1)
    const double p1 = 0.2 * std::exp(1.0), p2 = 0.3 * std::exp(-1.0);
    const auto pol = three_seq(1 - p1 - p2, p1, p2);
    const auto out = loss_dpo(s, pol, ref, ex);
    CHECK(out.value == doctest::Approx(0.126928).epsilon(1e-6));
    CHECK(out.diag.w_rejected == doctest::Approx(s.beta * sigmoid(-2.0)).epsilon(1e-12));
}

TEST_CASE("InfoPO hand cases") {
    const auto ref = three_seq(0.4, 0.4, 0.2);
    const auto ex = pair({1, kEos}, {2, kEos});
    LossSpec s;
    s.objective = Objective::infopo;
    const auto same = loss_infopo(s, ref, ref, ex);
    CHECK(same.value == doctest::Approx(-std::log(0.4) + 1.0).epsilon(1e-12));
    const auto pol = three_seq(0.4, 0.5, 0.1);
    const auto out = loss_infopo(s, pol, ref, ex);
    CHECK(out.value == doctest::Approx(1.193147).epsilon(1e-6));
    CHECK(out.diag.w_chosen == 1.0);
    CHECK(out.diag.w_rejected == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("InfoPO: zero reference probability on the rejected response") {
    TabularPolicy ref(3, 1);
    ref.materialize_all(kPrompt);
    ref.row(*ref.find_row(kPrompt, TokenSeq{}))[2] = kNegInf;
    const TabularPolicy pol(3, 1);
    LossSpec s;
    s.objective = Objective::infopo;
    CHECK_THROWS_AS(loss_infopo(s, pol, ref, pair({1, kEos}, {2, kEos})), NumericError);
}

TEST_CASE("InfoPO: ratio clamp and clamp flag") {
    const auto ref = three_seq(0.5, 0.5 - 1e-20, 1e-20);
    const auto pol = three_seq(0.4, 0.3, 0.3);
    const auto ex = pair({1, kEos}, {2, kEos});
    LossSpec s;
    s.objective = Objective::infopo;
    s.ratio_clamp_log = 30.0;
    const auto out = loss_infopo(s, pol, ref, ex);
    CHECK(out.clamped);
    CHECK(out.value == doctest::Approx(-std::log(0.3) + std::exp(30.0)).epsilon(1e-12));
    s.ratio_clamp_log = 60.0;
    CHECK_FALSE(loss_infopo(s, pol, ref, ex).clamped);
}

TEST_CASE("DPO: non-finite log-ratio names the term") {
    TabularPolicy pol(3, 1);
    pol.materialize_all(kPrompt);
    pol.row(*pol.find_row(kPrompt, TokenSeq{}))[1] = kNegInf;
    const TabularPolicy ref(3, 1);
    LossSpec s;
    try {
        loss_dpo(s, pol, ref, pair({1, kEos}, {2, kEos}));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("chosen log-ratio") != std::string::npos);
    }
}

TEST_CASE("baseline hand cases") {
    const auto ref = three_seq(0.5, 0.2, 0.3);
    const double p1 = 0.2 * std::exp(1.0), p2 = 0.3 * std::exp(-1.0);
    const auto pol = three_seq(1 - p1 - p2, p1, p2);  // h = 2
    const auto ex = pair({1, kEos}, {2, kEos});
    LossSpec s;
    s.objective = Objective::ipo;
    s.tau = 0.25;
    CHECK(std::abs(loss_baseline(s, pol, ref, ex).value) <= 1e-20);

    const auto uni = three_seq(1.0 / 3, 1.0 / 3, 1.0 / 3);
    s.objective = Objective::simpo;
    s.gamma = 0.0;
    s.beta = 2.0;
    CHECK(loss_baseline(s, uni, uni, ex).value == doctest::Approx(std::log(2.0)).epsilon(1e-15));

    s.objective = Objective::cpo;
    s.beta = 1.0;
    s.lambda = 0.5;
    CHECK(loss_baseline(s, uni, uni, ex).value == doctest::Approx(std::log(2.0) + 0.5 * std::log(3.0)).epsilon(1e-14));

    s.objective = Objective::slic;
    s.delta = 1.0;
    s.lambda = 0.0;
    CHECK(loss_baseline(s, uni, uni, ex).value == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(loss_baseline(LossSpec{}, uni, uni, ex), InvalidInput);
}

TEST_CASE("RM loss") {
    auto r = LatentReward::table();
    const auto ex = pair({1, kEos}, {2, kEos});
    r.set(kPrompt, ex.chosen, 0.3);
    r.set(kPrompt, ex.rejected, 0.3);
    CHECK(loss_rm(r, ex).value == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    r.set(kPrompt, ex.chosen, 50.3);
    CHECK(loss_rm(r, ex).value <= 1e-9);

    Rng rng(42);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> w(5);
        for (double& x : w) x = rng.normal();
        auto f = LatentReward::feature_linear(w, 0.5 + rng.uniform());
        PreferenceExample e = pair(random_response(rng, 5, 4), random_response(rng, 5, 4));
        if (e.chosen == e.rejected) continue;
        const auto g = loss_rm(f, e).grad;
        const auto n = central_diff(f.params(), [&] { return loss_rm_value(f, e); });
        worst = std::max(worst, rel_error(g, n));
        CHECK(loss_rm(f, e).value == doctest::Approx(neg_log_sigmoid(f(kPrompt, e.chosen) - f(kPrompt, e.rejected))).epsilon(1e-12));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("InfoNCE with a critic") {
    CHECK(loss_infonce_with_critic(0.7, 0.7) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    CHECK(loss_infonce_with_critic(2.0, 0.0) == doctest::Approx(0.126928).epsilon(1e-6));
    CHECK_THROWS_AS(loss_infonce_with_critic(NAN, 0.0), InvalidInput);
}

TEST_CASE("DPO equals InfoNCE under the implicit-reward critic") {
    Rng rng(43);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto in = random_instance(rng, trial % 2 ? Backend::tabular : Backend::log_bilinear, Objective::dpo);
        in.spec.length_normalize = false;
        const double dpo = loss_dpo(in.spec, *in.policy, *in.ref, in.ex).value;
        const auto& ex = in.ex;
        const double fw = implicit_reward_critic(in.spec.beta, seq_logprob(*in.policy, ex.prompt, ex.chosen),
                                                 seq_logprob(*in.ref, ex.prompt, ex.chosen));
        const double fl = implicit_reward_critic(in.spec.beta, seq_logprob(*in.policy, ex.prompt, ex.rejected),
                                                 seq_logprob(*in.ref, ex.prompt, ex.rejected));
        worst = std::max(worst, std::abs(dpo - loss_infonce_with_critic(fw, fl)));
    }
    CHECK(worst <= 1e-12);
}

TEST_CASE("analytic gradients match central differences") {
    Rng rng(44);
    for (auto backend : {Backend::tabular, Backend::log_bilinear}) {
        for (auto obj : policy_objectives()) {
            double worst = 0;
            int used = 0;
            while (used < 100) {
                auto in = random_instance(rng, backend, obj);
                if (obj == Objective::slic) {
                    const bool norm = in.spec.length_normalize;
                    const double m = in.spec.delta - avg_or_seq(norm, *in.policy, in.ex.prompt, in.ex.chosen) +
                                     avg_or_seq(norm, *in.policy, in.ex.prompt, in.ex.rejected);
                    if (std::abs(m) < 1e-3) continue;  // hinge kink
                }
                const auto ref = ref_terms(*in.ref, in.ex);
                const auto g = evaluate_loss(in.spec, *in.policy, ref, in.ex).grad;
                const auto n = central_diff(in.policy->params(),
                                            [&] { return loss_value(in.spec, *in.policy, ref, in.ex); });
                worst = std::max(worst, rel_error(g, n));
                ++used;
            }
            INFO(objective_name(obj), "/", backend_name(backend));
            CHECK(worst <= 1e-5);
        }
    }
}

TEST_CASE("DPO label antisymmetry") {
    Rng rng(45);
    for (int trial = 0; trial < 200; ++trial) {
        auto in = random_instance(rng, Backend::log_bilinear, Objective::dpo);
        const double v = loss_dpo(in.spec, *in.policy, *in.ref, in.ex).value;
        std::swap(in.ex.chosen, in.ex.rejected);
        const double swapped = loss_dpo(in.spec, *in.policy, *in.ref, in.ex).value;
        // sigma(z) + sigma(-z) = 1
        CHECK(std::exp(-v) + std::exp(-swapped) == doctest::Approx(1.0).epsilon(1e-12));
        if (v > 1e-6) CHECK(swapped == doctest::Approx(-std::log(-std::expm1(-v))).epsilon(1e-9));
    }
}

TEST_CASE("InfoPO value is bounded below by the chosen NLL") {
    Rng rng(46);
    for (int trial = 0; trial < 500; ++trial) {
        const auto in = random_instance(rng, trial % 2 ? Backend::tabular : Backend::log_bilinear, Objective::infopo);
        const double v = loss_infopo(in.spec, *in.policy, *in.ref, in.ex).value;
        const double n = in.spec.length_normalize ? static_cast<double>(in.ex.chosen.size()) : 1.0;
        CHECK(v >= -seq_logprob(*in.policy, in.ex.prompt, in.ex.chosen) / n);
    }
}

TEST_CASE("losses are identical after a serialization round trip") {
    Rng rng(47);
    for (int trial = 0; trial < 50; ++trial) {
        for (auto obj : policy_objectives()) {
            const auto in = random_instance(rng, trial % 2 ? Backend::tabular : Backend::log_bilinear, obj);
            const auto pol = policy_from_json(nlohmann::json::parse(dump_json(policy_to_json(*in.policy))));
            const auto ref = policy_from_json(nlohmann::json::parse(dump_json(policy_to_json(*in.ref))));
            const auto a = evaluate_loss(in.spec, *in.policy, *in.ref, in.ex);
            const auto b = evaluate_loss(in.spec, *pol, *ref, in.ex);
            CHECK(a.value == b.value);
            CHECK(a.grad == b.grad);
        }
    }
}

TEST_CASE("grad_weight_profile: InfoPO coefficient is 1 / pi_ref(y_l)") {
    Rng rng(48);
    for (int trial = 0; trial < 20; ++trial) {
        auto pol = random_tabular(rng, 4, 2, kPrompt, 1.0);
        auto ref = random_tabular(rng, 4, 2, kPrompt, 1.0);
        const auto ex = pair({1, 2, kEos}, {3, kEos});
        LossSpec s;
        s.objective = Objective::infopo;
        const auto prof = grad_weight_profile(s, *pol, *ref, ex, 6);
        REQUIRE(prof.size() == 7);
        const double expect = 1.0 / std::exp(seq_logprob(*ref, kPrompt, ex.rejected));
        for (const auto& p : prof) CHECK(std::abs(p.coefficient / expect - 1.0) <= 1e-9);
        CHECK(prof.back().pi_rejected / prof.front().pi_rejected == doctest::Approx(1e-6).epsilon(1e-9));
    }
}

TEST_CASE("grad_weight_profile: DPO starts at beta/2/pi_ref and grows with slope 1 once saturated") {
    auto ref = std::make_unique<TabularPolicy>(4, 2);
    ref->materialize_all(kPrompt);
    Rng rng(49);
    ref->randomize(rng, 0.5);
    const auto ex = pair({1, 2, kEos}, {3, kEos});
    LossSpec s;
    s.objective = Objective::dpo;
    s.beta = 0.1;
    const auto p0 = grad_weight_profile(s, *ref, *ref, ex, 0);
    CHECK(p0[0].coefficient ==
          doctest::Approx(s.beta * 0.5 / std::exp(seq_logprob(*ref, kPrompt, ex.rejected))).epsilon(1e-12));

    // Push the chosen response far below the reference so d saturates at 1.
    TabularPolicy pol = *ref;
    pol.row(*pol.find_row(kPrompt, TokenSeq{1}))[2] -= 150.0;
    const auto prof = grad_weight_profile(s, pol, *ref, ex, 6);
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& p : prof) {
        const double x = -std::log(p.pi_rejected), y = std::log(p.coefficient);
        sx += x, sy += y, sxx += x * x, sxy += x * y;
    }
    const double n = static_cast<double>(prof.size());
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(std::abs(slope - 1.0) <= 0.05);
}

TEST_CASE("batch kernels: OpenMP is bit-identical to serial") {
    Rng rng(50);
    auto ref = random_log_bilinear(rng, 6, 4, 3, 0.5);
    auto pol = random_log_bilinear(rng, 6, 4, 3, 0.5);
    GenConfig cfg;
    cfg.prompts = {{1, kEos}, {2, kEos}};
    cfg.n = 700;
    cfg.overlap = 0.5;
    cfg.seed = 3;
    const auto data = gen_dataset(*ref, LatentReward::feature_linear({0.1, 0.5, -0.2, 0.3, 0.0, 1.0}), cfg);
    const auto refs = compute_ref_terms(*ref, data.examples);
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = (i * 37) % idx.size();
    const int saved = omp_get_max_threads();
    omp_set_num_threads(std::max(4, saved));
    for (auto obj : policy_objectives()) {
        LossSpec s;
        s.objective = obj;
        const auto a = batch_loss_serial(s, *pol, refs, data.examples, idx);
        const auto b = batch_loss_omp(s, *pol, refs, data.examples, idx);
        CHECK(a.loss_sum == b.loss_sum);
        CHECK(a.grad_sum == b.grad_sum);
        CHECK(a.count == b.count);
        CHECK(a.clamp_count == b.clamp_count);
    }
    omp_set_num_threads(saved);
}
