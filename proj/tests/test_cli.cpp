// End-to-end checks of the command-line surface: every subcommand runs
// against real files and the outputs parse back.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <string>

#include "keep/harness.hpp"
#include "keep/serialize.hpp"

using namespace keep;

namespace {

const char* kConfigJson = R"({
  "seed": 4242, "num_segments": 12, "num_steps": 3, "retrieval_k": 5,
  "r_avg": 0.5, "query_tokens": 8, "embedding_dim": 8,
  "store": {"t": 3, "num_groups": 4},
  "model": {"num_layers": 4, "num_heads": 4, "model_dim": 32, "mlp_dim": 64,
            "vocab_size": 128},
  "cost": {"compute_tu_per_token_per_layer": 1.0, "eval_tu_per_layer": 0.5},
  "tier": {"fast_capacity_bytes": 32768, "fast_bandwidth_bytes_per_tu": 8192,
           "slow_to_fast_bandwidth_bytes_per_tu": 512},
  "categories": [
    {"name": "object-state", "count": 3, "tokens_per_segment": 8, "update_prob_per_step": 0.3},
    {"name": "agent-state", "count": 3, "tokens_per_segment": 8, "update_prob_per_step": 0.2},
    {"name": "task-history", "count": 3, "tokens_per_segment": 8, "update_prob_per_step": 0.02},
    {"name": "environment-layout", "count": 3, "tokens_per_segment": 8, "update_prob_per_step": 0.05}
  ]
})";

int run_cli(const std::string& args) {
    const std::string cmd = std::string(KEEP_CLI_PATH) + " " + args + " > cli_stdout.txt 2>&1";
    return std::system(cmd.c_str());
}

}  // namespace

TEST_CASE("the five subcommands cooperate end to end") {
    write_text_file("cli_cfg.json", kConfigJson);

    REQUIRE(run_cli("generate-episode --config cli_cfg.json --out cli_trace.jsonl") == 0);
    const auto trace = trace_from_jsonl(read_text_file("cli_trace.jsonl"));
    CHECK(trace.size() >= 12 + 3);  // inits plus one query per step

    REQUIRE(run_cli("run --trace cli_trace.jsonl --strategy keep --config cli_cfg.json "
                    "--out cli_report.json") == 0);
    const auto report = Json::parse(read_text_file("cli_report.json"));
    CHECK(report.at("strategy") == "keep");
    CHECK(report.at("per_step").size() == 3);

    REQUIRE(run_cli("compare --trace cli_trace.jsonl --strategies full,keep "
                    "--config cli_cfg.json --sweep-k 5,8 --out cli_cmp.csv") == 0);
    const auto csv = read_text_file("cli_cmp.csv");
    CHECK(csv.rfind("strategy,k,r_avg,", 0) == 0);
    CHECK(csv.find("\nfull,5,") != std::string::npos);
    CHECK(csv.find("\nkeep,8,") != std::string::npos);

    Workload w;
    w.num_layers = 3;
    w.compute_tu = {4, 4, 4};
    w.eval_tu = {0, 0, 0};
    w.items = {{1, OwnerRef::segment(1), 2048, 2.0},
               {2, OwnerRef::segment(2), 2048, 2.0},
               {2, OwnerRef::segment(3), 4096, 4.0}};
    RecomputePlan plan;
    plan.layers = {{3}, {}, {}};
    write_text_file("cli_wl.json", workload_to_json(w, plan).dump(2));
    REQUIRE(run_cli("schedule-sim --workload cli_wl.json --schedule balanced "
                    "--out cli_tl.json --gantt-csv cli_tl.csv") == 0);
    const auto file = timeline_from_json(Json::parse(read_text_file("cli_tl.json")));
    CHECK(file.timeline.makespan == doctest::Approx(12.0));
    CHECK(read_text_file("cli_tl.csv").rfind("resource,kind,layer,owner", 0) == 0);

    CHECK(run_cli("validate --timeline cli_tl.json") == 0);

    // A corrupted timeline is rejected with a nonzero exit.
    auto bad = Json::parse(read_text_file("cli_tl.json"));
    for (auto& e : bad.at("events"))
        if (e.at("kind") == "compute" && e.at("layer") == 2)
            e["start_tu"] = 0.0;
    write_text_file("cli_tl_bad.json", bad.dump(2));
    CHECK(run_cli("validate --timeline cli_tl_bad.json") != 0);

    // KEEP_SEED overrides the config seed.
    REQUIRE(std::system((std::string("KEEP_SEED=9 ") + KEEP_CLI_PATH +
                         " generate-episode --config cli_cfg.json --out cli_trace9.jsonl "
                         "> cli_stdout.txt 2>&1")
                            .c_str()) == 0);
    CHECK(read_text_file("cli_trace9.jsonl") != read_text_file("cli_trace.jsonl"));

    // Unknown strategies fail loudly.
    CHECK(run_cli("run --trace cli_trace.jsonl --strategy magic --config cli_cfg.json "
                  "--out cli_bad.json") != 0);
}
