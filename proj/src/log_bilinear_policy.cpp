#include "prefopt/log_bilinear_policy.hpp"

#include <cmath>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

LogBilinearPolicy::LogBilinearPolicy(int vocab_size, int max_len, int embed_dim, double context_decay)
    : Policy(vocab_size, max_len), dim_(embed_dim), decay_(context_decay) {
    if (embed_dim < 1) throw InvalidInput("embed_dim must be positive");
    if (!(context_decay >= 0.0 && context_decay <= 1.0)) throw InvalidInput("context_decay must lie in [0, 1]");
    const auto v = static_cast<std::size_t>(vocab_size);
    const auto d = static_cast<std::size_t>(embed_dim);
    params_.assign(v * d + d * d + v, 0.0);
}

void LogBilinearPolicy::randomize(Rng& rng, double scale) {
    for (double& p : params_) p = scale * rng.normal();
}

void LogBilinearPolicy::context_vector(std::span<const Token> prompt, std::span<const Token> prefix,
                                       std::span<double> c) const {
    const auto d = static_cast<std::size_t>(dim_);
    const double* emb = params_.data() + embedding_offset();
    std::fill(c.begin(), c.end(), 0.0);
    auto push = [&](Token s) {
        const double* e = emb + static_cast<std::size_t>(s) * d;
        for (std::size_t k = 0; k < d; ++k) c[k] = decay_ * c[k] + e[k];
    };
    for (Token s : prompt) push(s);
    for (Token s : prefix) push(s);
}

void LogBilinearPolicy::hidden_and_logits(std::span<const double> c, std::span<double> h,
                                          std::span<double> logits) const {
    const auto d = static_cast<std::size_t>(dim_);
    const auto v = static_cast<std::size_t>(vocab_size());
    const double* w = params_.data() + weight_offset();
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) acc += w[j * d + k] * c[k];
        h[j] = acc;
    }
    const double* emb = params_.data() + embedding_offset();
    const double* bias = params_.data() + bias_offset();
    for (std::size_t t = 0; t < v; ++t) {
        double acc = bias[t];
        for (std::size_t k = 0; k < d; ++k) acc += emb[t * d + k] * h[k];
        logits[t] = acc;
    }
}

void LogBilinearPolicy::next_log_probs(std::span<const Token> prompt, std::span<const Token> prefix,
                                       std::span<double> out) const {
    const auto d = static_cast<std::size_t>(dim_);
    std::vector<double> c(d), h(d), logits(static_cast<std::size_t>(vocab_size()));
    context_vector(prompt, prefix, c);
    hidden_and_logits(c, h, logits);
    log_softmax(logits, out);
}

void LogBilinearPolicy::add_token_score(std::span<const Token> prompt, std::span<const Token> prefix, Token token,
                                        double weight, std::span<double> grad) const {
    const auto d = static_cast<std::size_t>(dim_);
    const auto v = static_cast<std::size_t>(vocab_size());
    std::vector<double> c(d), h(d), logits(v), lp(v);
    context_vector(prompt, prefix, c);
    hidden_and_logits(c, h, logits);
    log_softmax(logits, lp);

    const double* emb = params_.data() + embedding_offset();
    const double* w = params_.data() + weight_offset();
    double* g_emb = grad.data() + embedding_offset();
    double* g_w = grad.data() + weight_offset();
    double* g_bias = grad.data() + bias_offset();

    // d/dlogits of log p(token) is onehot - softmax.
    std::vector<double> dh(d, 0.0);
    for (std::size_t t = 0; t < v; ++t) {
        const double g = weight * ((t == static_cast<std::size_t>(token) ? 1.0 : 0.0) - std::exp(lp[t]));
        g_bias[t] += g;
        for (std::size_t k = 0; k < d; ++k) {
            g_emb[t * d + k] += g * h[k];
            dh[k] += g * emb[t * d + k];
        }
    }

    std::vector<double> dc(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t k = 0; k < d; ++k) {
            g_w[j * d + k] += dh[j] * c[k];
            dc[k] += w[j * d + k] * dh[j];
        }
    }

    // Context token i contributes decay^(n-1-i) E[s_i] to c.
    const std::size_t n = prompt.size() + prefix.size();
    double scale = 1.0;
    for (std::size_t back = 0; back < n; ++back) {
        const std::size_t i = n - 1 - back;
        const Token s = i < prompt.size() ? prompt[i] : prefix[i - prompt.size()];
        double* ge = g_emb + static_cast<std::size_t>(s) * d;
        for (std::size_t k = 0; k < d; ++k) ge[k] += scale * dc[k];
        scale *= decay_;
        if (scale == 0.0) break;
    }
}

std::unique_ptr<Policy> LogBilinearPolicy::clone() const { return std::make_unique<LogBilinearPolicy>(*this); }

nlohmann::json LogBilinearPolicy::params_json() const {
    const auto e_end = params_.begin() + static_cast<std::ptrdiff_t>(weight_offset());
    const auto w_end = params_.begin() + static_cast<std::ptrdiff_t>(bias_offset());
    return {{"embed_dim", dim_},
            {"context_decay", decay_},
            {"embeddings", std::vector<double>(params_.begin(), e_end)},
            {"context_weights", std::vector<double>(e_end, w_end)},
            {"output_bias", std::vector<double>(w_end, params_.end())}};
}

LogBilinearPolicy LogBilinearPolicy::from_params_json(int vocab_size, int max_len, const nlohmann::json& params) {
    LogBilinearPolicy p(vocab_size, max_len, params.at("embed_dim").get<int>(),
                        params.at("context_decay").get<double>());
    const auto e = params.at("embeddings").get<std::vector<double>>();
    const auto w = params.at("context_weights").get<std::vector<double>>();
    const auto b = params.at("output_bias").get<std::vector<double>>();
    if (e.size() != p.weight_offset() || w.size() != p.bias_offset() - p.weight_offset() ||
        b.size() != static_cast<std::size_t>(vocab_size)) {
        throw InvalidInput("log_bilinear checkpoint: parameter block sizes do not match dimensions");
    }
    std::copy(e.begin(), e.end(), p.params_.begin());
    std::copy(w.begin(), w.end(), p.params_.begin() + static_cast<std::ptrdiff_t>(p.weight_offset()));
    std::copy(b.begin(), b.end(), p.params_.begin() + static_cast<std::ptrdiff_t>(p.bias_offset()));
    return p;
}

}  // namespace prefopt
