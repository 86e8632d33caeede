#include "prefopt/seqmodel.hpp"

#include <cmath>
#include <sstream>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

// ---------------------------------------------------------------------------
// rng

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * M_PI * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::size_t Rng::categorical(std::span<const double> probs) {
    double total = 0.0;
    for (double p : probs) total += p;
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (probs[i] <= 0.0) continue;
        acc += probs[i];
        last_positive = i;
        if (u < acc) return i;
    }
    return last_positive;
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view purpose) {
    return splitmix64(splitmix64(master) ^ fnv1a64(purpose));
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
    return splitmix64(splitmix64(master) + splitmix64(index ^ 0x5851f42d4c957f2dULL));
}

// ---------------------------------------------------------------------------
// token sequences

void validate_seq(std::span<const Token> seq, int vocab_size, std::string_view what) {
    if (seq.empty()) {
        throw InvalidInput(std::string(what) + ": empty token sequence");
    }
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const Token t = seq[i];
        if (t < 0 || t >= vocab_size) {
            throw InvalidInput(std::string(what) + ": token id " + std::to_string(t) + " at position " +
                               std::to_string(i) + " outside vocabulary of size " + std::to_string(vocab_size));
        }
        if (t == kEos && i + 1 != seq.size()) {
            throw InvalidInput(std::string(what) + ": EOS before the final position (" + std::to_string(i) + ")");
        }
    }
    if (seq.back() != kEos) {
        throw InvalidInput(std::string(what) + ": sequence not terminated by EOS");
    }
}

std::string seq_to_string(std::span<const Token> seq) {
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i) out << ',';
        out << seq[i];
    }
    out << ']';
    return out.str();
}

std::string_view backend_name(Backend b) {
    switch (b) {
        case Backend::tabular: return "tabular";
        case Backend::log_bilinear: return "log_bilinear";
    }
    return "unknown";
}

Backend parse_backend(std::string_view name) {
    if (name == "tabular") return Backend::tabular;
    if (name == "log_bilinear" || name == "log-bilinear") return Backend::log_bilinear;
    throw InvalidInput("unknown policy backend '" + std::string(name) + "' (valid: tabular, log_bilinear)");
}

Policy::Policy(int vocab_size, int max_len) : vocab_size_(vocab_size), max_len_(max_len) {
    if (vocab_size < 2) throw InvalidInput("vocab_size must be at least 2 (EOS plus one content token)");
    if (max_len < 1) throw InvalidInput("max_len must be at least 1");
}

// ---------------------------------------------------------------------------
// exact likelihoods

namespace {

void check_response(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response) {
    validate_seq(prompt, policy.vocab_size(), "prompt");
    validate_seq(response, policy.vocab_size(), "response");
    if (content_length(response) > static_cast<std::size_t>(policy.max_len())) {
        throw InvalidInput("response " + seq_to_string(response) + " longer than max_len " +
                           std::to_string(policy.max_len()));
    }
}

}  // namespace

double seq_logprob(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response) {
    check_response(policy, prompt, response);
    std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
    double total = 0.0;
    for (std::size_t t = 0; t < response.size(); ++t) {
        const auto prefix = response.first(t);
        if (policy.at_horizon(prefix)) continue;  // forced EOS contributes log 1
        policy.next_log_probs(prompt, prefix, lp);
        total += lp[static_cast<std::size_t>(response[t])];
    }
    return total;
}

double avg_logprob(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response) {
    return seq_logprob(policy, prompt, response) / static_cast<double>(response.size());
}

void add_seq_score(const Policy& policy, std::span<const Token> prompt, std::span<const Token> response,
                   double weight, std::span<double> grad) {
    check_response(policy, prompt, response);
    if (grad.size() != policy.param_count()) {
        throw InvalidInput("gradient buffer has " + std::to_string(grad.size()) + " entries, policy has " +
                           std::to_string(policy.param_count()) + " parameters");
    }
    for (std::size_t t = 0; t < response.size(); ++t) {
        const auto prefix = response.first(t);
        if (policy.at_horizon(prefix)) continue;
        policy.add_token_score(prompt, prefix, response[t], weight, grad);
    }
}

std::vector<double> seq_logprob_grad(const Policy& policy, std::span<const Token> prompt,
                                     std::span<const Token> response) {
    std::vector<double> grad(policy.param_count(), 0.0);
    add_seq_score(policy, prompt, response, 1.0, grad);
    return grad;
}

// ---------------------------------------------------------------------------
// sampling

TokenSeq sample_continuation(const Policy& policy, std::span<const Token> prompt, std::span<const Token> prefix,
                             Rng& rng) {
    validate_seq(prompt, policy.vocab_size(), "prompt");
    TokenSeq out(prefix.begin(), prefix.end());
    std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
    std::vector<double> p(lp.size());
    while (true) {
        if (policy.at_horizon(out)) {
            out.push_back(kEos);
            return out;
        }
        policy.next_log_probs(prompt, out, lp);
        for (std::size_t v = 0; v < lp.size(); ++v) p[v] = std::exp(lp[v]);
        const auto tok = static_cast<Token>(rng.categorical(p));
        out.push_back(tok);
        if (tok == kEos) return out;
    }
}

TokenSeq sample(const Policy& policy, std::span<const Token> prompt, Rng& rng) {
    return sample_continuation(policy, prompt, {}, rng);
}

TokenSeq sample(const Policy& policy, std::span<const Token> prompt, std::uint64_t seed) {
    Rng rng(seed);
    return sample(policy, prompt, rng);
}

// ---------------------------------------------------------------------------
// enumeration

std::vector<double> SeqDistribution::probs() const {
    std::vector<double> out(log_probs.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_probs[i]);
    return out;
}

std::size_t SeqDistribution::index_of(std::span<const Token> seq) const {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        if (std::equal(seqs[i].begin(), seqs[i].end(), seq.begin(), seq.end())) return i;
    }
    return seqs.size();
}

std::uint64_t sequence_space_size(int vocab_size, int max_len) {
    std::uint64_t total = 0;
    std::uint64_t level = 1;
    for (int k = 0; k <= max_len; ++k) {
        total += level;
        level *= static_cast<std::uint64_t>(vocab_size - 1);
    }
    return total;
}

namespace {

bool power_exceeds(std::uint64_t base, int exponent, std::uint64_t cap) {
    std::uint64_t acc = 1;
    for (int i = 0; i < exponent; ++i) {
        if (base != 0 && acc > cap / base) return true;
        acc *= base;
    }
    return acc > cap;
}

void enumerate_from(const Policy& policy, std::span<const Token> prompt, TokenSeq& prefix, double logp,
                    SeqDistribution& out) {
    if (policy.at_horizon(prefix)) {
        TokenSeq done = prefix;
        done.push_back(kEos);
        out.seqs.push_back(std::move(done));
        out.log_probs.push_back(logp);
        return;
    }
    std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
    policy.next_log_probs(prompt, prefix, lp);
    for (std::size_t v = 0; v < lp.size(); ++v) {
        const auto tok = static_cast<Token>(v);
        prefix.push_back(tok);
        if (tok == kEos) {
            out.seqs.push_back(prefix);
            out.log_probs.push_back(logp + lp[v]);
        } else {
            enumerate_from(policy, prompt, prefix, logp + lp[v], out);
        }
        prefix.pop_back();
    }
}

}  // namespace

SeqDistribution enumerate_seqs(const Policy& policy, std::span<const Token> prompt, std::uint64_t cap) {
    validate_seq(prompt, policy.vocab_size(), "prompt");
    if (power_exceeds(static_cast<std::uint64_t>(policy.vocab_size()), policy.max_len(), cap)) {
        throw CapacityError("sequence space V^L = " + std::to_string(policy.vocab_size()) + "^" +
                            std::to_string(policy.max_len()) + " exceeds enumeration cap " + std::to_string(cap));
    }
    SeqDistribution out;
    out.seqs.reserve(sequence_space_size(policy.vocab_size(), policy.max_len()));
    TokenSeq prefix;
    enumerate_from(policy, prompt, prefix, 0.0, out);
    return out;
}

}  // namespace prefopt
