#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefopt/rng.hpp"

namespace prefopt {

using Token = std::int32_t;

/// Token ids terminated by a single end-of-sequence token (id 0).
using TokenSeq = std::vector<Token>;

inline constexpr Token kEos = 0;
inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

/// Throws InvalidInput unless every id is in [0, vocab) and kEos appears
/// exactly once, as the final element.
void validate_seq(std::span<const Token> seq, int vocab_size, std::string_view what);

/// Number of non-EOS tokens (seq.size() - 1 for a valid sequence).
inline std::size_t content_length(std::span<const Token> seq) { return seq.empty() ? 0 : seq.size() - 1; }

std::string seq_to_string(std::span<const Token> seq);

enum class Backend { tabular, log_bilinear };

std::string_view backend_name(Backend b);
Backend parse_backend(std::string_view name);

/// Autoregressive policy pi(y|x) over a small vocabulary.
///
/// Responses hold at most max_len content tokens; once a prefix reaches that
/// length the next token is EOS with probability one. The sequence space is
/// therefore finite and exactly normalized.
///
/// Evaluation is const and thread-safe. Only params() (non-const) and backend
/// specific mutators change the distribution.
class Policy {
public:
    Policy(int vocab_size, int max_len);
    virtual ~Policy() = default;

    virtual Backend backend() const = 0;
    int vocab_size() const { return vocab_size_; }
    int max_len() const { return max_len_; }

    virtual std::size_t param_count() const = 0;
    virtual std::span<const double> params() const = 0;
    virtual std::span<double> params() = 0;

    /// Unforced next-token log-probabilities given (prompt, prefix).
    virtual void next_log_probs(std::span<const Token> prompt, std::span<const Token> prefix,
                                std::span<double> out) const = 0;

    /// grad += weight * d/dtheta log p(token | prompt, prefix), unforced step.
    virtual void add_token_score(std::span<const Token> prompt, std::span<const Token> prefix, Token token,
                                 double weight, std::span<double> grad) const = 0;

    virtual std::unique_ptr<Policy> clone() const = 0;

    /// Backend-specific parameter block of the checkpoint document.
    virtual nlohmann::json params_json() const = 0;

    bool at_horizon(std::span<const Token> prefix) const {
        return prefix.size() >= static_cast<std::size_t>(max_len_);
    }

private:
    int vocab_size_;
    int max_len_;
};

/// sum_t log pi(y_t | x, y_<t); exact.
double seq_logprob(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response);

/// seq_logprob / |response|, where |response| counts EOS.
double avg_logprob(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response);

/// grad += weight * d/dtheta log pi(response | prompt). grad.size() == param_count().
void add_seq_score(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response,
                   double weight, std::span<double> grad);

std::vector<double> seq_logprob_grad(const Policy& policy, std::span<const Token> prompt,
                                     std::span<const Token> response);

/// Ancestral sampling until EOS (forced at the horizon).
TokenSeq sample(const Policy& policy, std::span<const Token> prompt, Rng& rng);
TokenSeq sample(const Policy& policy, std::span<const Token> prompt, std::uint64_t seed);

/// Continue sampling from a given content prefix.
TokenSeq sample_continuation(const Policy& policy, std::span<const Token> prompt, std::span<const Token> prefix,
                             Rng& rng);

struct SeqDistribution {
    std::vector<TokenSeq> seqs;
    std::vector<double> log_probs;

    std::size_t size() const { return seqs.size(); }
    std::vector<double> probs() const;
    /// Index of seq in seqs, or size() when absent.
    std::size_t index_of(std::span<const Token> seq) const;
};

/// Number of complete sequences: sum_{k=0}^{L} (V-1)^k.
std::uint64_t sequence_space_size(int vocab_size, int max_len);

/// Every complete response with its exact log-probability, in depth-first
/// order (EOS branch first). Throws CapacityError when V^L exceeds cap.
SeqDistribution enumerate_seqs(const Policy& policy, std::span<const Token> prompt,
                               std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace prefopt
