#include "prefopt/prefdata.hpp"

#include <cmath>
#include <exception>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

// ---------------------------------------------------------------------------
// LatentReward

LatentReward LatentReward::zero() { return table(1.0, 0.0); }

LatentReward LatentReward::table(double scale, double default_value) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidInput("reward scale must be positive and finite");
    if (!std::isfinite(default_value)) throw InvalidInput("reward default value must be finite");
    LatentReward r;
    r.kind_ = Kind::table;
    r.scale_ = scale;
    r.default_value_ = default_value;
    return r;
}

LatentReward LatentReward::feature_linear(std::vector<double> weights, double scale) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidInput("reward scale must be positive and finite");
    for (double w : weights) {
        if (!std::isfinite(w)) throw InvalidInput("feature-linear reward weight is not finite");
    }
    LatentReward r;
    r.kind_ = Kind::feature_linear;
    r.scale_ = scale;
    r.params_ = std::move(weights);
    return r;
}

namespace {

std::vector<Token> reward_key(std::span<const Token> prompt, std::span<const Token> response) {
    std::vector<Token> key(prompt.begin(), prompt.end());
    key.insert(key.end(), response.begin(), response.end());
    return key;
}

}  // namespace

void LatentReward::set(std::span<const Token> prompt, std::span<const Token> response, double raw) {
    if (kind_ != Kind::table) throw InvalidInput("set() applies to table rewards only");
    if (!std::isfinite(raw)) throw InvalidInput("reward value must be finite");
    auto key = reward_key(prompt, response);
    if (const auto it = index_.find(key); it != index_.end()) {
        params_[it->second] = raw;
        return;
    }
    index_.emplace(key, params_.size());
    keys_.push_back(std::move(key));
    params_.push_back(raw);
}

double LatentReward::operator()(std::span<const Token> prompt, std::span<const Token> response) const {
    if (kind_ == Kind::table) {
        const auto it = index_.find(reward_key(prompt, response));
        return scale_ * (it == index_.end() ? default_value_ : params_[it->second]);
    }
    double acc = 0.0;
    for (Token t : response) {
        const auto k = static_cast<std::size_t>(t);
        if (k >= params_.size()) throw InvalidInput("token id outside feature-linear reward dimension");
        acc += params_[k];
    }
    return scale_ * acc;
}

void LatentReward::add_grad(std::span<const Token> prompt, std::span<const Token> response, double weight,
                            std::span<double> grad) const {
    if (kind_ == Kind::table) {
        const auto it = index_.find(reward_key(prompt, response));
        if (it != index_.end()) grad[it->second] += weight * scale_;
        return;
    }
    for (Token t : response) grad[static_cast<std::size_t>(t)] += weight * scale_;
}

nlohmann::json LatentReward::to_json() const {
    nlohmann::json doc{{"kind", kind_ == Kind::table ? "table" : "feature_linear"}, {"scale", scale_}};
    if (kind_ == Kind::table) {
        nlohmann::json keys = nlohmann::json::array();
        for (const auto& k : keys_) keys.push_back(k);
        doc["default"] = default_value_;
        doc["keys"] = std::move(keys);
    }
    doc["params"] = params_;
    return doc;
}

// ---------------------------------------------------------------------------
// labelling

double bt_preference_prob(double reward_a, double reward_b) {
    if (!std::isfinite(reward_a) || !std::isfinite(reward_b)) {
        throw InvalidInput("bt_preference_prob: rewards must be finite");
    }
    return sigmoid(reward_a - reward_b);
}

double shared_prefix_fraction(std::span<const Token> a, std::span<const Token> b) {
    const std::size_t shorter = std::min(a.size(), b.size());
    if (shorter == 0) return 0.0;
    std::size_t common = 0;
    while (common < shorter && a[common] == b[common]) ++common;
    return static_cast<double>(common) / static_cast<double>(shorter);
}

namespace {

void check_gen_config(const Policy& ref_policy, const GenConfig& cfg) {
    if (cfg.n < 1) throw InvalidInput("dataset size n must be at least 1");
    if (cfg.prompts.empty()) throw InvalidInput("prompt set is empty");
    if (!(cfg.overlap >= 0.0 && cfg.overlap <= 1.0)) throw InvalidInput("overlap must lie in [0, 1]");
    if (cfg.max_attempts < 1) throw InvalidInput("max_attempts must be positive");
    for (const auto& p : cfg.prompts) validate_seq(p, ref_policy.vocab_size(), "prompt");
}

TokenSeq draw_partner(const Policy& ref_policy, std::span<const Token> prompt, const TokenSeq& first,
                      double overlap, Rng& rng) {
    if (overlap <= 0.0) return sample(ref_policy, prompt, rng);
    const auto len = first.size();
    const auto want = static_cast<std::size_t>(std::ceil(overlap * static_cast<double>(len)));
    const std::size_t keep = std::min(want, len - 1);
    return sample_continuation(ref_policy, prompt, std::span<const Token>(first).first(keep), rng);
}

// Runs `make(i)` for every example index in parallel and rethrows the error
// of the lowest failing index, so failures are deterministic too.
template <typename Make>
std::vector<PreferenceExample> build_examples(std::size_t n, Make make) {
    std::vector<PreferenceExample> out(n);
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        try {
            out[i] = make(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    return out;
}

}  // namespace

PreferenceDataset gen_dataset(const Policy& ref_policy, const LatentReward& reward, const GenConfig& cfg) {
    check_gen_config(ref_policy, cfg);
    PreferenceDataset data;
    data.header.seed = cfg.seed;
    data.header.vocab_size = ref_policy.vocab_size();
    data.header.config_hash = cfg.config_hash;
    data.examples = build_examples(cfg.n, [&](std::size_t i) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        const auto& prompt = cfg.prompts[rng.below(cfg.prompts.size())];
        for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
            TokenSeq first = sample(ref_policy, prompt, rng);
            TokenSeq second = draw_partner(ref_policy, prompt, first, cfg.overlap, rng);
            if (first == second) continue;
            const double r_first = reward(prompt, first);
            const double r_second = reward(prompt, second);
            const bool first_won = rng.uniform() < bt_preference_prob(r_first, r_second);
            PreferenceExample ex;
            ex.prompt = prompt;
            ex.overlap_realized = shared_prefix_fraction(first, second);
            ex.first_won = first_won;
            if (first_won) {
                ex.chosen = std::move(first);
                ex.rejected = std::move(second);
                ex.reward_chosen = r_first;
                ex.reward_rejected = r_second;
            } else {
                ex.chosen = std::move(second);
                ex.rejected = std::move(first);
                ex.reward_chosen = r_second;
                ex.reward_rejected = r_first;
            }
            return ex;
        }
        throw GenerationError("example " + std::to_string(i) + ": " + std::to_string(cfg.max_attempts) +
                              " consecutive identical pairs for prompt " + seq_to_string(prompt));
    });
    return data;
}

PreferenceDataset gen_contrastive_dataset(const Policy& ref_policy, const std::vector<SeqDistribution>& chosen,
                                          const LatentReward& reward, const GenConfig& cfg) {
    check_gen_config(ref_policy, cfg);
    if (chosen.size() != cfg.prompts.size()) {
        throw InvalidInput("one chosen distribution per prompt is required");
    }
    std::vector<std::vector<double>> chosen_probs;
    for (const auto& d : chosen) chosen_probs.push_back(d.probs());

    PreferenceDataset data;
    data.header.seed = cfg.seed;
    data.header.vocab_size = ref_policy.vocab_size();
    data.header.config_hash = cfg.config_hash;
    data.examples = build_examples(cfg.n, [&](std::size_t i) {
        Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(i)));
        const std::size_t p = rng.below(cfg.prompts.size());
        const auto& prompt = cfg.prompts[p];
        TokenSeq win = chosen[p].seqs[rng.categorical(chosen_probs[p])];
        for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
            TokenSeq lose = draw_partner(ref_policy, prompt, win, cfg.overlap, rng);
            if (lose == win) continue;
            PreferenceExample ex;
            ex.prompt = prompt;
            ex.overlap_realized = shared_prefix_fraction(win, lose);
            ex.first_won = true;
            ex.reward_chosen = reward(prompt, win);
            ex.reward_rejected = reward(prompt, lose);
            ex.chosen = std::move(win);
            ex.rejected = std::move(lose);
            return ex;
        }
        throw GenerationError("example " + std::to_string(i) + ": rejected response kept colliding with chosen " +
                              seq_to_string(win) + " for prompt " + seq_to_string(prompt));
    });
    return data;
}

SeqDistribution chosen_distribution(const Policy& ref_policy, const LatentReward& reward,
                                    std::span<const Token> prompt, CollisionRule rule, std::uint64_t cap) {
    SeqDistribution space = enumerate_seqs(ref_policy, prompt, cap);
    const std::size_t n = space.size();
    const auto p = space.probs();
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n; ++i) r[i] = reward(prompt, space.seqs[i]);

    // P(winner = i) = sum over ordered pairs containing i of P(pair) * P(i wins).
    std::vector<double> win(n, 0.0);
    double self_mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            acc += p[j] * sigmoid(r[i] - r[j]);
        }
        win[i] = 2.0 * p[i] * acc;
        self_mass += p[i] * p[i];
    }
    if (rule == CollisionRule::keep) {
        for (std::size_t i = 0; i < n; ++i) win[i] += p[i] * p[i];
    } else {
        const double distinct = 1.0 - self_mass;
        if (!(distinct > 0.0)) {
            throw GenerationError("reference policy is deterministic for prompt " + seq_to_string(prompt) +
                                  "; distinct pairs are impossible");
        }
        for (double& w : win) w /= distinct;
    }
    for (std::size_t i = 0; i < n; ++i) space.log_probs[i] = std::log(win[i]);
    return space;
}

}  // namespace prefopt
