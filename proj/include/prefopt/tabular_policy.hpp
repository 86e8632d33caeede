#pragma once

#include <optional>
#include <unordered_map>
#include <vector>

#include "prefopt/seqmodel.hpp"

namespace prefopt {

struct TokenVecHash {
    std::size_t operator()(const std::vector<Token>& key) const noexcept;
};

/// Softmax table keyed by the full (prompt, prefix) token string.
///
/// Rows are materialized explicitly; an unmaterialized context evaluates with
/// the initial logit row (zeros unless configured), but has no parameters and
/// therefore cannot receive gradient.
class TabularPolicy final : public Policy {
public:
    TabularPolicy(int vocab_size, int max_len, std::vector<double> init_logits = {});

    Backend backend() const override { return Backend::tabular; }
    std::size_t param_count() const override { return logits_.size(); }
    std::span<const double> params() const override { return logits_; }
    std::span<double> params() override { return logits_; }

    void next_log_probs(std::span<const Token> prompt, std::span<const Token> prefix,
                        std::span<double> out) const override;
    void add_token_score(std::span<const Token> prompt, std::span<const Token> prefix, Token token, double weight,
                         std::span<double> grad) const override;
    std::unique_ptr<Policy> clone() const override;
    nlohmann::json params_json() const override;

    static TabularPolicy from_params_json(int vocab_size, int max_len, const nlohmann::json& params);

    std::size_t row_count() const { return keys_.size(); }
    const std::vector<Token>& row_key(std::size_t row) const { return keys_[row]; }
    std::optional<std::size_t> find_row(std::span<const Token> prompt, std::span<const Token> prefix) const;

    /// Creates (if needed) the row for a context and returns its index.
    std::size_t materialize_row(std::span<const Token> prompt, std::span<const Token> prefix);

    /// Materializes every non-forced context visited by the response.
    void materialize(std::span<const Token> prompt, std::span<const Token> response);

    /// Materializes every non-forced context under the prompt.
    void materialize_all(std::span<const Token> prompt, std::uint64_t cap = kDefaultEnumerationCap);

    std::span<double> row(std::size_t r) { return {logits_.data() + r * vocab(), vocab()}; }
    std::span<const double> row(std::size_t r) const { return {logits_.data() + r * vocab(), vocab()}; }

    const std::vector<double>& init_logits() const { return init_; }

    /// Replaces every materialized logit with scale * N(0, 1).
    void randomize(Rng& rng, double scale);

private:
    std::size_t vocab() const { return static_cast<std::size_t>(vocab_size()); }
    static std::vector<Token> make_key(std::span<const Token> prompt, std::span<const Token> prefix);

    std::vector<double> init_;
    std::vector<std::vector<Token>> keys_;
    std::unordered_map<std::vector<Token>, std::size_t, TokenVecHash> index_;
    std::vector<double> logits_;
};

}  // namespace prefopt
