#include "prefopt/tabular_policy.hpp"

#include <cmath>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

std::size_t TokenVecHash::operator()(const std::vector<Token>& key) const noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Token t : key) {
        h ^= static_cast<std::uint32_t>(t);
        h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
}

TabularPolicy::TabularPolicy(int vocab_size, int max_len, std::vector<double> init_logits)
    : Policy(vocab_size, max_len), init_(std::move(init_logits)) {
    if (init_.empty()) init_.assign(static_cast<std::size_t>(vocab_size), 0.0);
    if (init_.size() != static_cast<std::size_t>(vocab_size)) {
        throw InvalidInput("init_logits must have vocab_size entries");
    }
}

std::vector<Token> TabularPolicy::make_key(std::span<const Token> prompt, std::span<const Token> prefix) {
    // The prompt ends with its only EOS, so prompt ++ prefix is unambiguous.
    std::vector<Token> key;
    key.reserve(prompt.size() + prefix.size());
    key.insert(key.end(), prompt.begin(), prompt.end());
    key.insert(key.end(), prefix.begin(), prefix.end());
    return key;
}

std::optional<std::size_t> TabularPolicy::find_row(std::span<const Token> prompt,
                                                   std::span<const Token> prefix) const {
    const auto it = index_.find(make_key(prompt, prefix));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t TabularPolicy::materialize_row(std::span<const Token> prompt, std::span<const Token> prefix) {
    auto key = make_key(prompt, prefix);
    if (const auto it = index_.find(key); it != index_.end()) return it->second;
    const std::size_t r = keys_.size();
    index_.emplace(key, r);
    keys_.push_back(std::move(key));
    logits_.insert(logits_.end(), init_.begin(), init_.end());
    return r;
}

void TabularPolicy::materialize(std::span<const Token> prompt, std::span<const Token> response) {
    validate_seq(prompt, vocab_size(), "prompt");
    validate_seq(response, vocab_size(), "response");
    for (std::size_t t = 0; t < response.size(); ++t) {
        const auto prefix = response.first(t);
        if (at_horizon(prefix)) break;
        materialize_row(prompt, prefix);
    }
}

void TabularPolicy::materialize_all(std::span<const Token> prompt, std::uint64_t cap) {
    validate_seq(prompt, vocab_size(), "prompt");
    if (sequence_space_size(vocab_size(), max_len()) > cap) {
        throw CapacityError("context tree under prompt exceeds cap " + std::to_string(cap));
    }
    // Breadth-first over content prefixes shorter than max_len.
    std::vector<std::vector<Token>> frontier{{}};
    while (!frontier.empty()) {
        std::vector<std::vector<Token>> next;
        for (const auto& prefix : frontier) {
            if (at_horizon(prefix)) continue;
            materialize_row(prompt, prefix);
            for (Token v = 1; v < vocab_size(); ++v) {
                auto child = prefix;
                child.push_back(v);
                next.push_back(std::move(child));
            }
        }
        frontier = std::move(next);
    }
}

void TabularPolicy::randomize(Rng& rng, double scale) {
    for (double& z : logits_) z = scale * rng.normal();
}

void TabularPolicy::next_log_probs(std::span<const Token> prompt, std::span<const Token> prefix,
                                   std::span<double> out) const {
    const auto r = find_row(prompt, prefix);
    log_softmax(r ? row(*r) : std::span<const double>(init_), out);
}

void TabularPolicy::add_token_score(std::span<const Token> prompt, std::span<const Token> prefix, Token token,
                                    double weight, std::span<double> grad) const {
    const auto r = find_row(prompt, prefix);
    if (!r) {
        throw InvalidInput("context " + seq_to_string(make_key(prompt, prefix)) +
                           " is not materialized; call materialize() before taking gradients");
    }
    const auto z = row(*r);
    std::vector<double> lp(z.size());
    log_softmax(z, lp);
    double* g = grad.data() + *r * vocab();
    for (std::size_t v = 0; v < z.size(); ++v) {
        const double indicator = v == static_cast<std::size_t>(token) ? 1.0 : 0.0;
        g[v] += weight * (indicator - std::exp(lp[v]));
    }
}

std::unique_ptr<Policy> TabularPolicy::clone() const { return std::make_unique<TabularPolicy>(*this); }

nlohmann::json TabularPolicy::params_json() const {
    nlohmann::json contexts = nlohmann::json::array();
    for (const auto& k : keys_) contexts.push_back(k);
    return {{"init_logits", init_}, {"contexts", std::move(contexts)}, {"logits", logits_}};
}

TabularPolicy TabularPolicy::from_params_json(int vocab_size, int max_len, const nlohmann::json& params) {
    TabularPolicy p(vocab_size, max_len, params.at("init_logits").get<std::vector<double>>());
    const auto& contexts = params.at("contexts");
    auto logits = params.at("logits").get<std::vector<double>>();
    if (logits.size() != contexts.size() * static_cast<std::size_t>(vocab_size)) {
        throw InvalidInput("tabular checkpoint: logits length does not match contexts x vocab_size");
    }
    for (const auto& key : contexts) {
        auto k = key.get<std::vector<Token>>();
        if (p.index_.contains(k)) throw InvalidInput("tabular checkpoint: duplicate context");
        p.index_.emplace(k, p.keys_.size());
        p.keys_.push_back(std::move(k));
    }
    p.logits_ = std::move(logits);
    return p;
}

}  // namespace prefopt
