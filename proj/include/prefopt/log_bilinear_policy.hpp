#pragma once

#include "prefopt/seqmodel.hpp"

namespace prefopt {

/// Log-bilinear next-token model with tied input/output embeddings.
///
///   c = sum_i decay^(t-1-i) E[s_i]   over the context s_0..s_{t-1} (prompt then prefix)
///   h = W c
///   logits_v = E_v . h + b_v
///
/// Every sequence shares E, W and b, so updates on one response move the
/// likelihood of every other response that uses the same tokens.
///
/// Parameter layout (row-major): E (V x d), then W (d x d), then b (V).
class LogBilinearPolicy final : public Policy {
public:
    LogBilinearPolicy(int vocab_size, int max_len, int embed_dim, double context_decay = 0.5);

    Backend backend() const override { return Backend::log_bilinear; }
    std::size_t param_count() const override { return params_.size(); }
    std::span<const double> params() const override { return params_; }
    std::span<double> params() override { return params_; }

    void next_log_probs(std::span<const Token> prompt, std::span<const Token> prefix,
                        std::span<double> out) const override;
    void add_token_score(std::span<const Token> prompt, std::span<const Token> prefix, Token token, double weight,
                         std::span<double> grad) const override;
    std::unique_ptr<Policy> clone() const override;
    nlohmann::json params_json() const override;

    static LogBilinearPolicy from_params_json(int vocab_size, int max_len, const nlohmann::json& params);

    int embed_dim() const { return dim_; }
    double context_decay() const { return decay_; }

    /// Gaussian init with standard deviation `scale`.
    void randomize(Rng& rng, double scale);

    std::size_t embedding_offset() const { return 0; }
    std::size_t weight_offset() const { return static_cast<std::size_t>(vocab_size()) * dim_; }
    std::size_t bias_offset() const { return weight_offset() + static_cast<std::size_t>(dim_) * dim_; }

private:
    void context_vector(std::span<const Token> prompt, std::span<const Token> prefix, std::span<double> c) const;
    void hidden_and_logits(std::span<const double> c, std::span<double> h, std::span<double> logits) const;

    int dim_;
    double decay_;
    std::vector<double> params_;
};

}  // namespace prefopt
