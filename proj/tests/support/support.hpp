#pragma once

// Generators and independent oracles shared by the test binaries. Oracles
// recompute from raw parameters and deliberately avoid the library's own
// helpers (enumeration, log_softmax, loss dispatch).

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <unistd.h>
#include <memory>
#include <string>
#include <vector>

#include "prefopt/log_bilinear_policy.hpp"
#include "prefopt/prefdata.hpp"
#include "prefopt/rng.hpp"
#include "prefopt/seqmodel.hpp"
#include "prefopt/tabular_policy.hpp"

namespace testsupport {

using prefopt::Policy;
using prefopt::Rng;
using prefopt::Token;
using prefopt::TokenSeq;

inline TokenSeq random_prompt(Rng& rng, int vocab, std::size_t len) {
    TokenSeq p;
    for (std::size_t i = 0; i < len; ++i) p.push_back(static_cast<Token>(1 + rng.below(vocab - 1)));
    p.push_back(prefopt::kEos);
    return p;
}

inline std::unique_ptr<prefopt::TabularPolicy> random_tabular(Rng& rng, int vocab, int max_len,
                                                               const TokenSeq& prompt, double scale) {
    auto p = std::make_unique<prefopt::TabularPolicy>(vocab, max_len);
    p->materialize_all(prompt);
    p->randomize(rng, scale);
    return p;
}

inline std::unique_ptr<prefopt::LogBilinearPolicy> random_log_bilinear(Rng& rng, int vocab, int max_len, int dim,
                                                                       double scale, double decay = 0.5) {
    auto p = std::make_unique<prefopt::LogBilinearPolicy>(vocab, max_len, dim, decay);
    p->randomize(rng, scale);
    return p;
}

inline std::unique_ptr<Policy> random_policy(Rng& rng, prefopt::Backend backend, const TokenSeq& prompt) {
    if (backend == prefopt::Backend::tabular) return random_tabular(rng, 4, 3, prompt, 1.0);
    return random_log_bilinear(rng, 4, 3, 3, 0.7);
}

/// A response of up to max_len content tokens drawn without the policy.
inline TokenSeq random_response(Rng& rng, int vocab, int max_len) {
    const auto len = rng.below(static_cast<std::uint64_t>(max_len) + 1);
    TokenSeq r;
    for (std::uint64_t i = 0; i < len; ++i) r.push_back(static_cast<Token>(1 + rng.below(vocab - 1)));
    r.push_back(prefopt::kEos);
    return r;
}

// ---------------------------------------------------------------------------
// Conditional-probability oracles in long double

inline std::vector<long double> softmax_ld(const std::vector<long double>& z) {
    long double hi = z[0];
    for (auto x : z) hi = std::max(hi, x);
    long double s = 0;
    std::vector<long double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - hi);
    for (auto& x : p) x /= s;
    return p;
}

inline std::vector<long double> tabular_conditional(const prefopt::TabularPolicy& pol, const TokenSeq& prompt,
                                                    const TokenSeq& prefix) {
    std::vector<long double> z(static_cast<std::size_t>(pol.vocab_size()), 0.0L);
    if (auto r = pol.find_row(prompt, prefix)) {
        auto row = pol.row(*r);
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = row[i];
    } else {
        for (std::size_t i = 0; i < z.size() && i < pol.init_logits().size(); ++i) z[i] = pol.init_logits()[i];
    }
    return softmax_ld(z);
}

inline std::vector<long double> log_bilinear_conditional(const prefopt::LogBilinearPolicy& pol,
                                                         const TokenSeq& prompt, const TokenSeq& prefix) {
    const auto v = static_cast<std::size_t>(pol.vocab_size());
    const auto d = static_cast<std::size_t>(pol.embed_dim());
    auto P = pol.params();
    auto E = [&](std::size_t t, std::size_t k) -> long double { return P[t * d + k]; };
    auto W = [&](std::size_t j, std::size_t k) -> long double { return P[v * d + j * d + k]; };
    auto b = [&](std::size_t t) -> long double { return P[v * d + d * d + t]; };
    TokenSeq ctx = prompt;
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    // c = sum_i decay^(T-1-i) E[s_i], written as an explicit power sum
    std::vector<long double> c(d, 0.0L);
    const std::size_t T = ctx.size();
    for (std::size_t i = 0; i < T; ++i) {
        const long double w = std::pow(static_cast<long double>(pol.context_decay()), static_cast<long double>(T - 1 - i));
        for (std::size_t k = 0; k < d; ++k) c[k] += w * E(static_cast<std::size_t>(ctx[i]), k);
    }
    std::vector<long double> h(d, 0.0L), z(v, 0.0L);
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = 0; k < d; ++k) h[j] += W(j, k) * c[k];
    for (std::size_t t = 0; t < v; ++t) {
        z[t] = b(t);
        for (std::size_t k = 0; k < d; ++k) z[t] += E(t, k) * h[k];
    }
    return softmax_ld(z);
}

inline std::vector<long double> conditional(const Policy& pol, const TokenSeq& prompt, const TokenSeq& prefix) {
    if (static_cast<int>(prefix.size()) >= pol.max_len()) {
        std::vector<long double> forced(static_cast<std::size_t>(pol.vocab_size()), 0.0L);
        forced[0] = 1.0L;
        return forced;
    }
    if (auto* t = dynamic_cast<const prefopt::TabularPolicy*>(&pol)) return tabular_conditional(*t, prompt, prefix);
    return log_bilinear_conditional(dynamic_cast<const prefopt::LogBilinearPolicy&>(pol), prompt, prefix);
}

/// Product of conditionals along the response, in long double.
inline long double oracle_seq_prob(const Policy& pol, const TokenSeq& prompt, const TokenSeq& response) {
    long double p = 1.0L;
    TokenSeq prefix;
    for (Token t : response) {
        p *= conditional(pol, prompt, prefix)[static_cast<std::size_t>(t)];
        prefix.push_back(t);
    }
    return p;
}

inline double oracle_seq_logprob(const Policy& pol, const TokenSeq& prompt, const TokenSeq& response) {
    return static_cast<double>(std::log(oracle_seq_prob(pol, prompt, response)));
}

/// Every response by breadth over lengths, independent of enumerate_seqs order.
inline std::vector<TokenSeq> all_responses(int vocab, int max_len) {
    std::vector<TokenSeq> out{{prefopt::kEos}};
    std::vector<TokenSeq> frontier{{}};
    for (int len = 1; len <= max_len; ++len) {
        std::vector<TokenSeq> next;
        for (const auto& f : frontier) {
            for (Token t = 1; t < vocab; ++t) {
                TokenSeq s = f;
                s.push_back(t);
                next.push_back(s);
                s.push_back(prefopt::kEos);
                out.push_back(s);
            }
        }
        frontier = std::move(next);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Finite differences

inline std::vector<double> central_diff(std::span<double> params, const std::function<double()>& f, double h = 1e-5) {
    std::vector<double> g(params.size());
    for (std::size_t k = 0; k < params.size(); ++k) {
        const double saved = params[k];
        params[k] = saved + h;
        const double up = f();
        params[k] = saved - h;
        const double down = f();
        params[k] = saved;
        g[k] = (up - down) / (2 * h);
    }
    return g;
}

inline double rel_error(std::span<const double> a, std::span<const double> n) {
    double worst = 0, sa = 0, sn = 0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        worst = std::max(worst, std::abs(a[k] - n[k]));
        sa = std::max(sa, std::abs(a[k]));
        sn = std::max(sn, std::abs(n[k]));
    }
    return worst / std::max({sa, sn, 1e-8});
}

// ---------------------------------------------------------------------------
// Scalar oracles

inline double neg_log_sigmoid(double z) {
    // -log(1/(1+e^-z)) evaluated in long double
    return static_cast<double>(std::log1p(std::exp(-static_cast<long double>(z))));
}

// ---------------------------------------------------------------------------
// Scratch directories

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        auto base = std::filesystem::temp_directory_path() / ("prefopt-test-" + tag + "-" + std::to_string(::getpid()));
        std::filesystem::remove_all(base);
        std::filesystem::create_directories(base);
        path_ = base;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

}  // namespace testsupport
