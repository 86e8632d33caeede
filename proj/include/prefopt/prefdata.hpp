#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "prefopt/seqmodel.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

/// Linear latent reward r(x, y) = scale * <params, phi(x, y)>.
///
/// table:          phi is one-hot over registered (prompt, response) keys;
///                 unregistered responses score scale * default_value.
/// feature_linear: phi counts each token id in the response (EOS included),
///                 so params has vocab_size entries.
class LatentReward {
public:
    enum class Kind { table, feature_linear };

    static LatentReward zero();
    static LatentReward table(double scale = 1.0, double default_value = 0.0);
    static LatentReward feature_linear(std::vector<double> weights, double scale = 1.0);

    Kind kind() const { return kind_; }
    double scale() const { return scale_; }

    /// Registers a table entry (raw value; the reward is scale * raw).
    void set(std::span<const Token> prompt, std::span<const Token> response, double raw);

    double operator()(std::span<const Token> prompt, std::span<const Token> response) const;

    std::span<const double> params() const { return params_; }
    std::span<double> params() { return params_; }

    /// grad += weight * dr/dparams. Unregistered table entries have no parameter.
    void add_grad(std::span<const Token> prompt, std::span<const Token> response, double weight,
                  std::span<double> grad) const;

    nlohmann::json to_json() const;

private:
    Kind kind_ = Kind::table;
    double scale_ = 1.0;
    double default_value_ = 0.0;
    std::vector<double> params_;
    std::vector<std::vector<Token>> keys_;
    std::unordered_map<std::vector<Token>, std::size_t, TokenVecHash> index_;
};

struct PreferenceExample {
    TokenSeq prompt;
    TokenSeq chosen;
    TokenSeq rejected;
    double reward_chosen = 0.0;
    double reward_rejected = 0.0;
    double overlap_realized = 0.0;
    /// Generation-time only (not serialized): the first sampled response won.
    bool first_won = false;
};

struct DatasetHeader {
    std::string schema = "prefopt.dataset/1";
    std::uint64_t seed = 0;
    int vocab_size = 0;
    std::string config_hash;
};

struct PreferenceDataset {
    DatasetHeader header;
    std::vector<PreferenceExample> examples;

    std::size_t size() const { return examples.size(); }
    bool empty() const { return examples.empty(); }
};

/// sigma(reward_a - reward_b): probability that a beats b.
double bt_preference_prob(double reward_a, double reward_b);

/// Length of the common prefix divided by the shorter length.
double shared_prefix_fraction(std::span<const Token> a, std::span<const Token> b);

struct GenConfig {
    std::vector<TokenSeq> prompts;
    std::size_t n = 0;
    double overlap = 0.0;
    std::uint64_t seed = 0;
    int max_attempts = 100;
    /// Hash of the resolved generator configuration, stored in the header.
    std::string config_hash;
};

/// Pairs from the reference policy, labelled by sampled Bradley-Terry outcomes.
///
/// With overlap > 0 the second response copies a ceil(overlap * |first|)
/// token prefix of the first (capped so at least one token is resampled).
/// Identical pairs are redrawn; each example has its own RNG stream so the
/// output does not depend on the thread count.
PreferenceDataset gen_dataset(const Policy& ref_policy, const LatentReward& reward, const GenConfig& cfg);

/// Chosen responses drawn from an explicit distribution per prompt, rejected
/// responses from the reference policy (collisions redraw the rejected one).
/// `chosen` is indexed like cfg.prompts.
PreferenceDataset gen_contrastive_dataset(const Policy& ref_policy, const std::vector<SeqDistribution>& chosen,
                                          const LatentReward& reward, const GenConfig& cfg);

enum class CollisionRule {
    /// i.i.d. pairs, identical pairs kept (the winner is that sequence).
    keep,
    /// identical pairs rejected and redrawn, as gen_dataset does with overlap 0.
    resample,
};

/// Exact distribution of the winning response for one prompt, by enumeration.
/// Probabilities are aligned with enumerate_seqs(ref_policy, prompt).
SeqDistribution chosen_distribution(const Policy& ref_policy, const LatentReward& reward,
                                    std::span<const Token> prompt, CollisionRule rule = CollisionRule::keep,
                                    std::uint64_t cap = kDefaultEnumerationCap);

// ---------------------------------------------------------------------------
// JSON Lines format

std::string dataset_to_jsonl(const PreferenceDataset& data);
PreferenceDataset dataset_from_jsonl(const std::string& text, const std::string& source = "<memory>");

void save_dataset(const PreferenceDataset& data, const std::filesystem::path& path);
PreferenceDataset load_dataset(const std::filesystem::path& path);

}  // namespace prefopt
