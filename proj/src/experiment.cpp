#include "prefopt/experiment.hpp"

#include <cstdio>

#include "prefopt/config.hpp"
#include "prefopt/log_bilinear_policy.hpp"
#include "prefopt/oracle.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

using nlohmann::json;

namespace {

constexpr std::uint64_t kMetricEnumerationLimit = 100'000;

ConfigTable root_table(const json& cfg) { return ConfigTable(cfg, ""); }

int positive_int(const ConfigTable& t, std::string_view key, std::int64_t fallback) {
    const auto v = t.integer(key, fallback);
    if (v < 1 || v > 1'000'000'000) throw ConfigError("key '" + t.path_of(key) + "' must be a positive integer");
    return static_cast<int>(v);
}

std::size_t count(const ConfigTable& t, std::string_view key, std::int64_t fallback) {
    const auto v = t.integer(key, fallback);
    if (v < 0) throw ConfigError("key '" + t.path_of(key) + "' must be >= 0");
    return static_cast<std::size_t>(v);
}

double non_negative(const ConfigTable& t, std::string_view key, double fallback) {
    const double v = t.number(key, fallback);
    if (v < 0.0) throw ConfigError("key '" + t.path_of(key) + "' must be >= 0");
    return v;
}

TokenSeq with_eos(std::vector<Token> content) {
    content.push_back(kEos);
    return content;
}

std::vector<TokenSeq> build_prompts(const json& cfg, int vocab) {
    const auto data = root_table(cfg).table("data");
    std::vector<TokenSeq> prompts;
    if (data.has("prompts")) {
        for (auto& row : data.int_rows("prompts")) {
            for (Token t : row) {
                if (t <= 0 || t >= vocab) {
                    throw ConfigError("key 'data.prompts' holds token " + std::to_string(t) +
                                      "; prompt tokens must lie in [1, vocab_size)");
                }
            }
            prompts.push_back(with_eos(std::move(row)));
        }
        if (prompts.empty()) throw ConfigError("key 'data.prompts' must not be empty");
        return prompts;
    }
    const int count = positive_int(data, "num_prompts", 4);
    const int len = positive_int(data, "prompt_len", 2);
    Rng rng(derive_seed(root_table(cfg).seed("seed"), "prompts"));
    for (int p = 0; p < count; ++p) {
        std::vector<Token> content;
        for (int i = 0; i < len; ++i) content.push_back(static_cast<Token>(1 + rng.below(vocab - 1)));
        prompts.push_back(with_eos(std::move(content)));
    }
    return prompts;
}

std::unique_ptr<Policy> build_reference(const json& cfg, std::span<const TokenSeq> prompts, std::uint64_t seed) {
    const auto model = root_table(cfg).table("model");
    const int vocab = positive_int(model, "vocab_size", 8);
    const int max_len = positive_int(model, "max_len", 4);
    if (vocab < 2) throw ConfigError("key 'model.vocab_size' must be at least 2");
    const double init_scale = non_negative(model, "init_scale", 0.5);
    // Shifts the EOS logit everywhere, which sets the typical response length.
    const double eos_bias = model.number("eos_bias", 0.0);
    const auto backend_str = model.string("backend", "tabular");
    Backend backend;
    try {
        backend = parse_backend(backend_str);
    } catch (const InvalidInput& e) {
        throw ConfigError("key 'model.backend': " + std::string(e.what()));
    }
    Rng rng(derive_seed(seed, "reference"));
    if (backend == Backend::tabular) {
        std::vector<double> init(static_cast<std::size_t>(vocab), 0.0);
        init[kEos] = eos_bias;
        auto p = std::make_unique<TabularPolicy>(vocab, max_len, init);
        if (init_scale > 0.0) {
            for (const auto& prompt : prompts) p->materialize_all(prompt);
            p->randomize(rng, init_scale);
            for (std::size_t r = 0; r < p->row_count(); ++r) p->row(r)[kEos] += eos_bias;
        }
        return p;
    }
    const int dim = positive_int(model, "embed_dim", 8);
    const double decay = model.number("context_decay", 0.5);
    auto p = std::make_unique<LogBilinearPolicy>(vocab, max_len, dim, decay);
    p->randomize(rng, init_scale);
    p->params()[p->bias_offset() + kEos] += eos_bias;
    return p;
}

LatentReward build_reward(const json& cfg, const Policy& ref, std::span<const TokenSeq> prompts,
                          std::uint64_t seed) {
    const auto r = root_table(cfg).table("reward");
    const auto kind = r.string("kind", "feature_linear");
    const double scale = r.number("scale", 1.0);
    if (!(scale > 0.0)) throw ConfigError("key 'reward.scale' must be positive");
    Rng rng(derive_seed(seed, "reward"));
    const auto vocab = static_cast<std::size_t>(ref.vocab_size());
    if (kind == "zero") return LatentReward::zero();
    if (kind == "feature_linear") {
        std::vector<double> w;
        if (r.has("weights")) {
            w = r.numbers("weights");
            if (w.size() != vocab) throw ConfigError("key 'reward.weights' must have vocab_size entries");
        } else {
            for (std::size_t i = 0; i < vocab; ++i) w.push_back(rng.normal());
        }
        return LatentReward::feature_linear(std::move(w), scale);
    }
    if (kind == "table") {
        auto reward = LatentReward::table(scale, 0.0);
        for (const auto& prompt : prompts) {
            const auto space = enumerate_seqs(ref, prompt);
            for (const auto& s : space.seqs) reward.set(prompt, s, rng.normal());
        }
        return reward;
    }
    if (kind == "modes") {
        auto reward = LatentReward::table(scale, r.number("default", 0.0));
        const double value = r.number("mode_value", 1.0);
        for (auto& m : r.int_rows("modes")) {
            auto seq = with_eos(std::move(m));
            try {
                validate_seq(seq, ref.vocab_size(), "reward mode");
            } catch (const InvalidInput& e) {
                throw ConfigError("key 'reward.modes': " + std::string(e.what()));
            }
            for (const auto& prompt : prompts) reward.set(prompt, seq, value);
        }
        return reward;
    }
    throw ConfigError("key 'reward.kind' must be one of zero, feature_linear, table, modes (got '" + kind + "')");
}

bool enumerable_for_metrics(const Policy& ref) {
    if (ref.backend() != Backend::tabular) return false;
    return sequence_space_size(ref.vocab_size(), ref.max_len()) <= kMetricEnumerationLimit;
}

}  // namespace

void validate_config(const json& cfg) {
    const auto root = root_table(cfg);
    root.allow_only({"seed", "model", "reward", "data", "train", "sweep"});
    root.seed("seed");
    root.table("model").allow_only({"backend", "vocab_size", "max_len", "embed_dim", "context_decay", "init_scale",
                                     "eos_bias"});
    root.table("reward").allow_only({"kind", "scale", "weights", "modes", "mode_value", "default"});
    root.table("data").allow_only(
        {"n", "overlap", "prompts", "num_prompts", "prompt_len", "mode", "chosen_beta", "path", "max_attempts"});
    root.table("train").allow_only({"objective", "beta", "gamma", "lambda", "delta", "tau", "length_normalize",
                                    "ratio_clamp_log", "optimizer", "lr", "adam_beta1", "adam_beta2", "adam_eps",
                                    "batch_size", "epochs", "warmup_frac", "schedule", "eval_every", "parallel",
                                    "reverse_kl"});
    const auto sweep = root.table("sweep");
    sweep.allow_only({"objective", "lr", "beta", "seed", "beta_by_objective"});
    const auto by_objective = sweep.table("beta_by_objective");
    for (const auto& k : by_objective.keys()) {
        try {
            parse_objective(k);
        } catch (const InvalidInput& e) {
            throw ConfigError("key 'sweep.beta_by_objective." + k + "': " + e.what());
        }
        by_objective.numbers(k);
    }
    build_train_config(cfg);
}

std::string config_hash(const json& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(cfg.dump())));
    return buf;
}

TrainConfig build_train_config(const json& cfg) {
    const auto t = root_table(cfg).table("train");
    TrainConfig tc;
    try {
        tc.loss.objective = parse_objective(t.string("objective", "dpo"));
    } catch (const InvalidInput& e) {
        throw ConfigError("key 'train.objective': " + std::string(e.what()));
    }
    tc.loss.beta = t.number("beta", tc.loss.beta);
    tc.loss.gamma = t.number("gamma", tc.loss.gamma);
    tc.loss.lambda = t.number("lambda", tc.loss.lambda);
    tc.loss.delta = t.number("delta", tc.loss.delta);
    tc.loss.tau = t.number("tau", tc.loss.tau);
    tc.loss.length_normalize = t.boolean("length_normalize", false);
    tc.loss.ratio_clamp_log = t.number("ratio_clamp_log", tc.loss.ratio_clamp_log);
    try {
        tc.optimizer = parse_optimizer(t.string("optimizer", "adam"));
        tc.schedule = parse_schedule(t.string("schedule", "constant"));
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("section 'train': ") + e.what());
    }
    // Shared embeddings move every sequence at once, so log-bilinear models get a smaller default step.
    const bool shared = root_table(cfg).table("model").string("backend", "tabular") == "log_bilinear";
    tc.lr = t.number("lr", shared ? 1e-3 : 1e-2);
    tc.adam_beta1 = t.number("adam_beta1", tc.adam_beta1);
    tc.adam_beta2 = t.number("adam_beta2", tc.adam_beta2);
    tc.adam_eps = t.number("adam_eps", tc.adam_eps);
    tc.batch_size = static_cast<std::size_t>(positive_int(t, "batch_size", 64));
    tc.epochs = count(t, "epochs", 5);
    tc.warmup_frac = t.number("warmup_frac", 0.0);
    tc.eval_every = count(t, "eval_every", 0);
    tc.parallel = t.boolean("parallel", true);
    tc.seed = derive_seed(root_table(cfg).seed("seed"), "train");
    try {
        tc.validate();
    } catch (const InvalidInput& e) {
        throw ConfigError(std::string("section 'train': ") + e.what());
    }
    return tc;
}

Experiment build_experiment(const json& resolved) {
    validate_config(resolved);
    Experiment exp;
    exp.config = resolved;
    exp.seed = root_table(resolved).seed("seed");
    const int vocab = positive_int(root_table(resolved).table("model"), "vocab_size", 8);
    exp.prompts = build_prompts(resolved, vocab);
    exp.reference = build_reference(resolved, exp.prompts, exp.seed);
    exp.reward = build_reward(resolved, *exp.reference, exp.prompts, exp.seed);

    const auto data = root_table(resolved).table("data");
    const auto train = root_table(resolved).table("train");
    const auto mode = data.string("mode", "bt");
    if (mode != "bt" && mode != "contrastive") {
        throw ConfigError("key 'data.mode' must be \"bt\" or \"contrastive\" (got '" + mode + "')");
    }
    const bool can_enumerate = enumerable_for_metrics(*exp.reference);
    const bool want_kl = train.boolean("reverse_kl", can_enumerate);
    if ((want_kl || mode == "contrastive") && !can_enumerate) {
        throw ConfigError(std::string("key '") + (want_kl ? "train.reverse_kl" : "data.mode") +
                          "' needs an enumerable tabular model (at most " +
                          std::to_string(kMetricEnumerationLimit) + " responses)");
    }
    if (mode == "contrastive") {
        const double chosen_beta = data.number("chosen_beta", 1.0);
        if (!(chosen_beta > 0.0)) throw ConfigError("key 'data.chosen_beta' must be positive");
        for (const auto& prompt : exp.prompts) {
            exp.targets.push_back({prompt, optimal_policy(*exp.reference, exp.reward, chosen_beta, prompt)});
        }
    } else if (want_kl) {
        for (const auto& prompt : exp.prompts) {
            exp.targets.push_back(
                {prompt, chosen_distribution(*exp.reference, exp.reward, prompt, CollisionRule::resample)});
        }
    }
    if (!want_kl && mode == "contrastive") exp.config["train"]["reverse_kl"] = false;
    return exp;
}

PreferenceDataset generate_dataset(const Experiment& exp) {
    const auto data = root_table(exp.config).table("data");
    GenConfig g;
    g.prompts = exp.prompts;
    g.n = static_cast<std::size_t>(positive_int(data, "n", 1000));
    g.overlap = data.number("overlap", 0.0);
    if (!(g.overlap >= 0.0 && g.overlap <= 1.0)) throw ConfigError("key 'data.overlap' must lie in [0, 1]");
    g.max_attempts = positive_int(data, "max_attempts", 100);
    g.seed = derive_seed(exp.seed, "data");
    json gen_section = exp.config.value("data", json::object());
    gen_section["seed"] = exp.seed;
    gen_section["model"] = exp.config.value("model", json::object());
    gen_section["reward"] = exp.config.value("reward", json::object());
    gen_section.erase("path");
    g.config_hash = config_hash(gen_section);
    PreferenceDataset d;
    if (data.string("mode", "bt") == "contrastive") {
        std::vector<SeqDistribution> chosen;
        for (const auto& t : exp.targets) chosen.push_back(t.chosen);
        d = gen_contrastive_dataset(*exp.reference, chosen, exp.reward, g);
    } else {
        d = gen_dataset(*exp.reference, exp.reward, g);
    }
    d.header.seed = exp.seed;
    return d;
}

std::unique_ptr<Policy> initial_policy(const Experiment& exp) { return exp.reference->clone(); }

}  // namespace prefopt
