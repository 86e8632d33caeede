#include <doctest.h>

#include <cmath>
#include <map>

#include <omp.h>

#include "prefopt/errors.hpp"
#include "prefopt/numeric.hpp"
#include "prefopt/prefdata.hpp"
#include "support.hpp"

using namespace prefopt;
using namespace testsupport;

namespace {

const TokenSeq kPrompt{kEos};

GenConfig gen_cfg(std::size_t n, double overlap, std::uint64_t seed, std::vector<TokenSeq> prompts = {{kEos}}) {
    GenConfig cfg;
    cfg.prompts = std::move(prompts);
    cfg.n = n;
    cfg.overlap = overlap;
    cfg.seed = seed;
    cfg.config_hash = "test";
    return cfg;
}

LatentReward random_feature_reward(Rng& rng, int vocab, double scale) {
    std::vector<double> w(static_cast<std::size_t>(vocab));
    for (double& x : w) x = rng.normal();
    return LatentReward::feature_linear(w, scale);
}

}  // namespace

TEST_CASE("bt_preference_prob") {
    CHECK(bt_preference_prob(0.3, 0.3) == 0.5);
    CHECK(std::abs(bt_preference_prob(50.0, 0.0) - 1.0) <= 1e-9);
    CHECK(bt_preference_prob(1.0, 0.0) == doctest::Approx(0.731059).epsilon(1e-6));
    CHECK(bt_preference_prob(1.0, 0.0) + bt_preference_prob(0.0, 1.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(bt_preference_prob(std::nan(""), 0.0), InvalidInput);
    CHECK_THROWS_AS(bt_preference_prob(0.0, INFINITY), InvalidInput);
}

TEST_CASE("shared_prefix_fraction") {
    CHECK(shared_prefix_fraction(TokenSeq{1, 2, kEos}, TokenSeq{1, 3, kEos}) == doctest::Approx(1.0 / 3));
    CHECK(shared_prefix_fraction(TokenSeq{1, 2, 3, kEos}, TokenSeq{1, kEos}) == doctest::Approx(0.5));
    CHECK(shared_prefix_fraction(TokenSeq{2, kEos}, TokenSeq{1, kEos}) == 0.0);
}

TEST_CASE("latent reward: table and feature-linear values") {
    auto t = LatentReward::table(2.0, -1.0);
    t.set(kPrompt, TokenSeq{1, kEos}, 0.75);
    CHECK(t(kPrompt, TokenSeq{1, kEos}) == 1.5);
    CHECK(t(kPrompt, TokenSeq{2, kEos}) == -2.0);
    const auto f = LatentReward::feature_linear({0.5, 1.0, -2.0}, 3.0);
    // counts: token 1 twice, token 2 once, EOS once
    CHECK(f(kPrompt, TokenSeq{1, 2, 1, kEos}) == doctest::Approx(3.0 * (0.5 + 2 * 1.0 - 2.0)));
    CHECK(f(kPrompt, TokenSeq{1, 2, 1, kEos}) == f(kPrompt, TokenSeq{1, 2, 1, kEos}));
}

TEST_CASE("gen_dataset: pairs are distinct and overlap stays below 1") {
    Rng rng(31);
    auto ref = random_log_bilinear(rng, 6, 5, 3, 0.5);
    const auto data = gen_dataset(*ref, LatentReward::zero(), gen_cfg(2000, 1.0, 5));
    REQUIRE(data.size() == 2000);
    for (const auto& ex : data.examples) {
        CHECK(ex.chosen != ex.rejected);
        CHECK(ex.overlap_realized < 1.0);
    }
}

TEST_CASE("gen_dataset: overlap contract per example") {
    Rng rng(32);
    auto ref = random_log_bilinear(rng, 8, 8, 4, 0.5);
    for (double rho : {0.0, 0.3, 0.5, 0.7, 0.9}) {
        const auto data = gen_dataset(*ref, LatentReward::zero(), gen_cfg(1000, rho, 6));
        for (const auto& ex : data.examples) {
            const double len = static_cast<double>(std::min(ex.chosen.size(), ex.rejected.size()));
            CHECK(ex.overlap_realized >= rho - 1.0 / len - 1e-12);
            CHECK(ex.overlap_realized == shared_prefix_fraction(ex.chosen, ex.rejected));
        }
    }
}

TEST_CASE("gen_dataset: zero reward gives balanced labels") {
    Rng rng(33);
    auto ref = random_log_bilinear(rng, 6, 4, 3, 0.5);
    const std::size_t n = 10000;
    const auto data = gen_dataset(*ref, LatentReward::zero(), gen_cfg(n, 0.0, 7));
    std::size_t first = 0;
    for (const auto& ex : data.examples) first += ex.first_won ? 1 : 0;
    const double se = std::sqrt(0.25 / static_cast<double>(n));
    CHECK(std::abs(static_cast<double>(first) / n - 0.5) <= 3 * se);
}

TEST_CASE("gen_dataset: a +50 reward gap almost always wins") {
    TabularPolicy ref(3, 1);
    const TokenSeq star{2, kEos};
    auto reward = LatentReward::table();
    reward.set(kPrompt, star, 50.0);
    const auto data = gen_dataset(ref, reward, gen_cfg(10000, 0.0, 8));
    std::size_t containing = 0, won = 0;
    for (const auto& ex : data.examples) {
        if (ex.chosen == star || ex.rejected == star) {
            ++containing;
            won += ex.chosen == star ? 1 : 0;
        }
    }
    REQUIRE(containing > 1000);
    CHECK(static_cast<double>(won) / containing > 0.999);
}

TEST_CASE("gen_dataset: labels follow sigma of the reward gap") {
    Rng rng(34);
    auto ref = random_log_bilinear(rng, 6, 4, 3, 0.5);
    const auto reward = random_feature_reward(rng, 6, 0.7);
    const auto data = gen_dataset(*ref, reward, gen_cfg(20000, 0.3, 9));
    double expected = 0, var = 0;
    std::size_t hits = 0, m = 0;
    for (const auto& ex : data.examples) {
        CHECK(ex.reward_chosen == reward(ex.prompt, ex.chosen));
        CHECK(ex.reward_rejected == reward(ex.prompt, ex.rejected));
        if (ex.reward_chosen == ex.reward_rejected) continue;
        const double p = sigmoid(std::abs(ex.reward_chosen - ex.reward_rejected));
        expected += p;
        var += p * (1 - p);
        hits += ex.reward_chosen > ex.reward_rejected ? 1 : 0;
        ++m;
    }
    REQUIRE(m > 5000);
    CHECK(std::abs(static_cast<double>(hits) - expected) <= 3 * std::sqrt(var));
}

TEST_CASE("gen_dataset: deterministic and independent of thread count") {
    Rng rng(35);
    auto ref = random_log_bilinear(rng, 8, 6, 4, 0.5);
    const auto reward = random_feature_reward(rng, 8, 1.0);
    const auto cfg = gen_cfg(3000, 0.5, 10, {{1, kEos}, {2, 3, kEos}});
    const int saved = omp_get_max_threads();
    omp_set_num_threads(1);
    const auto a = dataset_to_jsonl(gen_dataset(*ref, reward, cfg));
    omp_set_num_threads(std::max(4, saved));
    const auto b = dataset_to_jsonl(gen_dataset(*ref, reward, cfg));
    omp_set_num_threads(saved);
    CHECK(a == b);
    auto other = cfg;
    other.seed = 11;
    CHECK(dataset_to_jsonl(gen_dataset(*ref, reward, other)) != a);
}

TEST_CASE("gen_dataset: a deterministic reference exhausts the retry budget") {
    TabularPolicy ref(3, 2, {0.0, kNegInf, kNegInf});
    try {
        gen_dataset(ref, LatentReward::zero(), gen_cfg(5, 0.0, 1, {{2, kEos}}));
        FAIL("expected GenerationError");
    } catch (const GenerationError& e) {
        CHECK(std::string(e.what()).find(seq_to_string(TokenSeq{2, kEos})) != std::string::npos);
    }
}

TEST_CASE("chosen_distribution: two-sequence hand case") {
    TabularPolicy ref(2, 1);  // sequences EOS and (1, EOS), each 0.5
    auto reward = LatentReward::table();
    reward.set(kPrompt, TokenSeq{1, kEos}, std::log(3.0));
    const auto d = chosen_distribution(ref, reward, kPrompt);
    CHECK(d.probs()[d.index_of(TokenSeq{1, kEos})] == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(d.probs()[d.index_of(TokenSeq{kEos})] == doctest::Approx(0.375).epsilon(1e-12));
}

TEST_CASE("chosen_distribution: zero reward reproduces the reference") {
    Rng rng(36);
    auto ref = random_log_bilinear(rng, 4, 3, 3, 1.0);
    const auto d = chosen_distribution(*ref, LatentReward::zero(), kPrompt);
    const auto e = enumerate_seqs(*ref, kPrompt);
    const auto pd = d.probs(), pe = e.probs();
    for (std::size_t k = 0; k < e.size(); ++k) CHECK(pd[k] == doctest::Approx(pe[k]).epsilon(1e-12));
}

TEST_CASE("chosen_distribution: deterministic reference is a point mass") {
    TabularPolicy ref(3, 2, {kNegInf, 0.0, kNegInf});
    const auto d = chosen_distribution(ref, LatentReward::feature_linear({0.1, 0.2, 0.3}), kPrompt);
    CHECK(d.probs()[d.index_of(TokenSeq{1, 1, kEos})] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("chosen_distribution: matches an explicit pair enumeration") {
    Rng rng(37);
    for (int trial = 0; trial < 10; ++trial) {
        auto ref = random_tabular(rng, 3, 2, kPrompt, 1.0);
        const auto reward = random_feature_reward(rng, 3, 1.0);
        const auto seqs = all_responses(3, 2);
        std::vector<long double> p(seqs.size());
        for (std::size_t i = 0; i < seqs.size(); ++i) p[i] = oracle_seq_prob(*ref, kPrompt, seqs[i]);
        for (auto rule : {CollisionRule::keep, CollisionRule::resample}) {
            // winner mass over ordered pairs (a, b): a wins with sigma(r_a - r_b)
            std::vector<long double> win(seqs.size(), 0.0L);
            long double kept = 0;
            for (std::size_t a = 0; a < seqs.size(); ++a) {
                for (std::size_t b = 0; b < seqs.size(); ++b) {
                    if (a == b && rule == CollisionRule::resample) continue;
                    const long double pair = p[a] * p[b];
                    const long double s = 1.0L / (1.0L + std::exp(-static_cast<long double>(
                                                                reward(kPrompt, seqs[a]) - reward(kPrompt, seqs[b]))));
                    win[a] += pair * s;
                    win[b] += pair * (1 - s);
                    kept += pair;
                }
            }
            const auto d = chosen_distribution(*ref, reward, kPrompt, rule);
            double total = 0;
            for (std::size_t i = 0; i < seqs.size(); ++i) {
                const double got = d.probs()[d.index_of(seqs[i])];
                total += got;
                CHECK(got == doctest::Approx(static_cast<double>(win[i] / kept)).epsilon(1e-10));
            }
            CHECK(std::abs(total - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("chosen_distribution agrees with generated winner frequencies (chi-square)") {
    Rng rng(38);
    auto ref = random_tabular(rng, 4, 1, kPrompt, 0.5);
    const auto reward = random_feature_reward(rng, 4, 1.0);
    const std::size_t n = 100000;
    const auto data = gen_dataset(*ref, reward, gen_cfg(n, 0.0, 12));
    const auto d = chosen_distribution(*ref, reward, kPrompt, CollisionRule::resample);
    std::map<TokenSeq, double> counts;
    for (const auto& ex : data.examples) counts[ex.chosen] += 1;
    double chi2 = 0;
    for (std::size_t k = 0; k < d.size(); ++k) {
        const double e = static_cast<double>(n) * d.probs()[k];
        const double diff = counts[d.seqs[k]] - e;
        chi2 += diff * diff / e;
    }
    // df = 3; the 0.999 quantile of chi-square(3) is 16.2662.
    CHECK(chi2 < 16.2662);
}

TEST_CASE("JSONL round trip and header") {
    Rng rng(39);
    auto ref = random_log_bilinear(rng, 6, 4, 3, 0.5);
    const auto reward = random_feature_reward(rng, 6, 1.0);
    auto data = gen_dataset(*ref, reward, gen_cfg(300, 0.5, 13, {{1, kEos}, {4, kEos}}));
    const auto text = dataset_to_jsonl(data);
    const auto first_line = text.substr(0, text.find('\n'));
    const auto header = nlohmann::json::parse(first_line);
    CHECK(header.at("schema") == "prefopt.dataset/1");
    CHECK(header.at("seed") == 13);
    CHECK(header.at("vocab_size") == 6);
    CHECK(header.at("config_hash") == "test");
    const auto rec = nlohmann::json::parse(text.substr(first_line.size() + 1, text.find('\n', first_line.size() + 1) -
                                                                               first_line.size() - 1));
    for (const char* key : {"prompt", "chosen", "rejected", "reward_chosen", "reward_rejected", "overlap_realized"}) {
        CHECK(rec.contains(key));
    }

    const auto back = dataset_from_jsonl(text);
    REQUIRE(back.size() == data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        CHECK(back.examples[i].chosen == data.examples[i].chosen);
        CHECK(back.examples[i].rejected == data.examples[i].rejected);
        CHECK(back.examples[i].reward_chosen == data.examples[i].reward_chosen);
        CHECK(back.examples[i].overlap_realized == data.examples[i].overlap_realized);
    }
    CHECK(dataset_to_jsonl(back) == text);

    TempDir tmp("jsonl");
    save_dataset(data, tmp / "d.jsonl");
    CHECK(dataset_to_jsonl(load_dataset(tmp / "d.jsonl")) == text);
}

TEST_CASE("JSONL: malformed input is rejected with a line number") {
    CHECK_THROWS_AS(dataset_from_jsonl("{\"prompt\": [0]}\n"), InvalidInput);
    const std::string header = "{\"schema\":\"prefopt.dataset/1\",\"seed\":1,\"vocab_size\":4,\"config_hash\":\"x\"}\n";
    try {
        dataset_from_jsonl(header + "not json\n", "d.jsonl");
        FAIL("expected InvalidInput");
    } catch (const InvalidInput& e) {
        CHECK(std::string(e.what()).find("d.jsonl:2") != std::string::npos);
    }
}
