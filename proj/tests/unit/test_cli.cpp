#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include "prefopt/checkpoint.hpp"
#include "prefopt/commands.hpp"
#include "prefopt/config.hpp"
#include "prefopt/prefdata.hpp"
#include "support.hpp"

using namespace prefopt;
using nlohmann::json;
using testsupport::TempDir;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = fs::path(PREFOPT_SOURCE_DIR) / "configs";

struct Cli {
    int code = -1;
    std::string out;
    std::string err;
};

// Runs the real binary so exit codes from argument parsing are covered too.
Cli run_binary(const std::string& args, const TempDir& tmp) {
    const auto out = tmp / "stdout.txt";
    const auto err = tmp / "stderr.txt";
    const std::string cmd =
        std::string(PREFOPT_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    Cli r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text_file(out);
    r.err = read_text_file(err);
    return r;
}

using Command = int (*)(const CliOptions&, std::ostream&, std::ostream&);

Cli run(Command cmd, const CliOptions& opts) {
    std::ostringstream out, err;
    Cli r;
    r.code = cmd(opts, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

CliOptions with_config(const fs::path& config, const fs::path& out) {
    CliOptions o;
    o.config = config;
    o.out = out;
    o.quiet = true;
    return o;
}

fs::path write_config(const TempDir& tmp, const std::string& name, const std::string& text) {
    const auto p = tmp / name;
    write_text_file(p, text);
    return p;
}

const char* kSmallTrain = R"(
seed = 4
[model]
backend = "tabular"
vocab_size = 4
max_len = 3
[reward]
kind = "feature_linear"
scale = 2.0
[data]
n = 60
num_prompts = 2
[train]
objective = "dpo"
batch_size = 20
epochs = 2
eval_every = 2
)";

}  // namespace

TEST_CASE("gen: minimal config is reproducible byte for byte") {
    TempDir tmp("gen");
    const auto cfg = kConfigs / "gen_minimal.toml";
    REQUIRE(run(cmd_gen, with_config(cfg, tmp / "a")).code == 0);
    REQUIRE(run(cmd_gen, with_config(cfg, tmp / "b")).code == 0);
    const auto a = read_text_file(tmp / "a" / "dataset.jsonl");
    CHECK(a == read_text_file(tmp / "b" / "dataset.jsonl"));
    const auto data = load_dataset(tmp / "a" / "dataset.jsonl");
    CHECK(data.header.seed == 7);
    CHECK(data.size() == 1000);
    CHECK(std::count(a.begin(), a.end(), '\n') == 1001);
    CHECK(fs::exists(tmp / "a" / "resolved_config.toml"));
    CHECK(a.find(tmp.path().string()) == std::string::npos);

    auto again = with_config(cfg, tmp / "c");
    again.seed = 8;
    REQUIRE(run(cmd_gen, again).code == 0);
    CHECK(read_text_file(tmp / "c" / "dataset.jsonl") != a);
}

TEST_CASE("gen: realized overlap at rho 0.5 and length 8") {
    TempDir tmp("gen_overlap");
    const auto cfg = write_config(tmp, "o.toml", R"(
seed = 9
[model]
backend = "log_bilinear"
vocab_size = 6
max_len = 8
embed_dim = 4
[reward]
kind = "feature_linear"
[data]
n = 500
overlap = 0.5
)");
    const auto r = run(cmd_gen, with_config(cfg, tmp / "out"));
    REQUIRE(r.code == 0);
    const auto data = load_dataset(tmp / "out" / "dataset.jsonl");
    double mean = 0;
    for (const auto& ex : data.examples) {
        CHECK(ex.overlap_realized == shared_prefix_fraction(ex.chosen, ex.rejected));
        mean += ex.overlap_realized;
    }
    mean /= static_cast<double>(data.size());
    CHECK(mean >= 0.5 - 1.0 / 8);
    CHECK(mean < 1.0);
}

TEST_CASE("config errors exit 2 and name the key") {
    TempDir tmp("cfgerr");
    const auto no_seed = write_config(tmp, "ns.toml", "[data]\nn = 5\n");
    const auto a = run_binary("gen --config " + no_seed.string() + " --out " + (tmp / "o").string(), tmp);
    CHECK(a.code == 2);
    CHECK(a.err.find("seed") != std::string::npos);

    std::string text(kSmallTrain);
    text.replace(text.find("\"dpo\""), 5, "\"orpo\"");
    const auto bad_obj = write_config(tmp, "bo.toml", text);
    const auto b = run_binary("train --config " + bad_obj.string() + " --out " + (tmp / "o").string(), tmp);
    CHECK(b.code == 2);
    for (const char* name : {"dpo", "infopo", "ipo", "cpo", "slic", "simpo"}) {
        CHECK(b.err.find(name) != std::string::npos);
    }

    CHECK(run_binary("train --bogus", tmp).code == 2);
    CHECK(run_binary("gen --config " + (tmp / "absent.toml").string(), tmp).code == 3);
}

TEST_CASE("train: demo config, artifacts, and byte-identical reruns") {
    TempDir tmp("train");
    const auto cfg = kConfigs / "train_infopo.toml";
    const auto r = run_binary("train --config " + cfg.string() + " --out " + (tmp / "a").string(), tmp);
    REQUIRE(r.code == 0);
    CHECK(r.out.find("margin") != std::string::npos);
    REQUIRE(run(cmd_train, with_config(cfg, tmp / "b")).code == 0);
    for (const char* f : {"trajectory.csv", "checkpoint.json", "run.json", "resolved_config.toml"}) {
        CHECK(read_text_file(tmp / "a" / f) == read_text_file(tmp / "b" / f));
    }
    const auto csv = read_text_file(tmp / "a" / "trajectory.csv");
    CHECK(csv.rfind("step,loss,chosen_avg_logp,rejected_avg_logp,margin,reward_accuracy,reverse_kl,clamp_count\n", 0) ==
          0);
    const auto ckpt = json::parse(read_text_file(tmp / "a" / "checkpoint.json"));
    CHECK(ckpt["optimizer"]["kind"] == "adam");

    // The resolved copy reproduces the run on its own.
    REQUIRE(run(cmd_train, with_config(tmp / "a" / "resolved_config.toml", tmp / "c")).code == 0);
    CHECK(read_text_file(tmp / "c" / "trajectory.csv") == csv);
}

TEST_CASE("train: loading a dataset file") {
    TempDir tmp("train_data");
    const auto gen_cfg = write_config(tmp, "g.toml", kSmallTrain);
    REQUIRE(run(cmd_gen, with_config(gen_cfg, tmp / "gen")).code == 0);
    const auto cfg = tmp / "t.toml";
    auto doc = parse_toml(kSmallTrain);
    doc["data"]["path"] = "gen/dataset.jsonl";
    write_text_file(cfg, emit_toml(doc));
    REQUIRE(run(cmd_train, with_config(cfg, tmp / "from_file")).code == 0);
    REQUIRE(run(cmd_train, with_config(gen_cfg, tmp / "inline")).code == 0);
    CHECK(read_text_file(tmp / "from_file" / "trajectory.csv") == read_text_file(tmp / "inline" / "trajectory.csv"));
    CHECK(fs::exists(tmp / "from_file" / "dataset.jsonl"));

    doc["data"]["path"] = "missing.jsonl";
    write_text_file(cfg, emit_toml(doc));
    CHECK(run(cmd_train, with_config(cfg, tmp / "x")).code == 3);
}

TEST_CASE("train: divergence exits 4 and keeps the partial trajectory") {
    TempDir tmp("diverge");
    auto doc = parse_toml(kSmallTrain);
    doc["train"]["lr"] = 1e308;
    doc["train"]["optimizer"] = "adam";
    doc["model"]["backend"] = "log_bilinear";
    doc["model"]["embed_dim"] = 3;
    const auto cfg = write_config(tmp, "d.toml", emit_toml(doc));
    const auto r = run(cmd_train, with_config(cfg, tmp / "o"));
    CHECK(r.code == 4);
    CHECK(r.err.find("step") != std::string::npos);
    CHECK(fs::exists(tmp / "o" / "trajectory.csv"));
    CHECK(fs::exists(tmp / "o" / "last_good.json"));
}

TEST_CASE("sweep: grid expansion, summary rows, and determinism") {
    TempDir tmp("sweep");
    const auto cfg = kConfigs / "sweep_demo.toml";
    REQUIRE(run(cmd_sweep, with_config(cfg, tmp / "a")).code == 0);
    auto par = with_config(cfg, tmp / "b");
    par.jobs = 4;
    REQUIRE(run(cmd_sweep, par).code == 0);

    std::size_t dirs = 0;
    for (const auto& e : fs::directory_iterator(tmp / "a")) dirs += e.is_directory() ? 1 : 0;
    CHECK(dirs == 4);
    const auto summary = read_text_file(tmp / "a" / "summary.csv");
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 5);
    CHECK(summary == read_text_file(tmp / "b" / "summary.csv"));
    CHECK(read_text_file(tmp / "a" / "run-003" / "trajectory.csv") ==
          read_text_file(tmp / "b" / "run-003" / "trajectory.csv"));
}

TEST_CASE("sweep: paper-grid beta grids and partial failure") {
    TempDir tmp("sweep_grid");
    const auto cfg = write_config(tmp, "pg.toml", R"(
preset = "paper-grid"
seed = 2
[model]
vocab_size = 4
max_len = 3
embed_dim = 3
[data]
n = 16
[sweep]
objective = ["dpo", "simpo"]
lr = [1e-6]
)");
    REQUIRE(run(cmd_sweep, with_config(cfg, tmp / "o")).code == 0);
    const auto summary = read_text_file(tmp / "o" / "summary.csv");
    for (const char* row : {",dpo,0.001,", ",dpo,0.01,", ",dpo,0.1,", ",simpo,0.5,", ",simpo,1,", ",simpo,2,"}) {
        CHECK(summary.find(row) != std::string::npos);
    }
    CHECK(std::count(summary.begin(), summary.end(), '\n') == 7);

    // One run diverges, the other succeeds: overall success, failure recorded.
    auto doc = parse_toml(kSmallTrain);
    doc["model"]["backend"] = "log_bilinear";
    doc["model"]["embed_dim"] = 3;
    doc["sweep"]["lr"] = json::array({1e-3, 1e308});
    write_text_file(cfg, emit_toml(doc));
    const auto r = run(cmd_sweep, with_config(cfg, tmp / "p"));
    CHECK(r.code == 0);
    const auto partial = read_text_file(tmp / "p" / "summary.csv");
    CHECK(partial.find(",4,,,,,,") != std::string::npos);

    doc["sweep"]["lr"] = json::array({1e308});
    write_text_file(cfg, emit_toml(doc));
    CHECK(run(cmd_sweep, with_config(cfg, tmp / "q")).code == 5);
}

TEST_CASE("gradcheck and micheck") {
    CliOptions o;
    o.instances = 5;
    const auto ok = run(cmd_gradcheck, o);
    CHECK(ok.code == 0);
    CHECK(std::count(ok.out.begin(), ok.out.end(), '\n') == 15);

    o.inject_sign_flip = true;
    const auto bad = run(cmd_gradcheck, o);
    CHECK(bad.code == 6);
    CHECK(bad.err.find("dpo/tabular") != std::string::npos);

    o.inject_sign_flip = false;
    o.seed = 12345;
    CHECK(run(cmd_gradcheck, o).code == 0);

    const auto mi = run(cmd_micheck, CliOptions{});
    CHECK(mi.code == 0);
    CHECK(mi.out.find("0.693147") != std::string::npos);
}

TEST_CASE("report: merged data and summary recomputed from the sources") {
    TempDir tmp("report");
    REQUIRE(run(cmd_sweep, with_config(kConfigs / "sweep_demo.toml", tmp / "s")).code == 0);
    CliOptions o;
    o.quiet = true;
    o.out = tmp / "r";
    o.run_dirs = {tmp / "s" / "run-000", tmp / "s" / "run-002"};
    REQUIRE(run(cmd_report, o).code == 0);

    const auto summary = json::parse(read_text_file(tmp / "r" / "summary.json"))["runs"];
    REQUIRE(summary.size() == 2);
    CHECK(summary[0]["objective"] == "dpo");
    CHECK(summary[1]["objective"] == "infopo");
    for (std::size_t i = 0; i < 2; ++i) {
        const auto csv = read_text_file(o.run_dirs[i] / "trajectory.csv");
        // Recompute from the raw CSV text rather than through the trajectory parser.
        std::istringstream in(csv);
        std::string line, first, last;
        std::getline(in, line);
        while (std::getline(in, line)) {
            if (first.empty()) first = line;
            last = line;
        }
        auto margin = [](const std::string& row) {
            std::istringstream cells(row);
            std::string c;
            for (int k = 0; k < 5; ++k) std::getline(cells, c, ',');
            return std::stod(c);
        };
        CHECK(summary[i]["margin_delta"].get<double>() == margin(last) - margin(first));
    }
    const auto long_csv = read_text_file(tmp / "r" / "dynamics_long.csv");
    CHECK(long_csv.rfind("objective,step,metric,value\n", 0) == 0);
    CHECK(long_csv.find("dpo,0,margin,") != std::string::npos);
    CHECK(long_csv.find("infopo,0,margin,") != std::string::npos);
    CHECK(long_csv.find("dpo,24,reverse_kl,") != std::string::npos);

    fs::create_directories(tmp / "empty");
    o.run_dirs = {tmp / "empty"};
    const auto r = run(cmd_report, o);
    CHECK(r.code == 3);
    CHECK(r.err.find((tmp / "empty").string()) != std::string::npos);
}
