// Command-line front end: episode generation, strategy runs, comparison
// sweeps, standalone schedule simulation and timeline validation.

#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "keep/harness.hpp"
#include "keep/serialize.hpp"

namespace {

keep::EpisodeConfig load_config(const std::string& path) {
    keep::EpisodeConfig cfg =
        keep::config_from_json(keep::Json::parse(keep::read_text_file(path)));
    keep::apply_env_seed(cfg);
    return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"KV-cache-centric memory management engine"};
    app.require_subcommand(1);

    std::string config_path, trace_path, out_path, strategy, strategies;
    std::string workload_path, schedule_name, timeline_path, gantt_path;
    std::string sweep_k, sweep_r;

    auto* gen = app.add_subcommand("generate-episode", "Generate a synthetic episode trace");
    gen->add_option("--config", config_path, "episode config JSON")->required();
    gen->add_option("--out", out_path, "output trace JSONL")->required();

    auto* run = app.add_subcommand("run", "Replay a trace under one strategy");
    run->add_option("--trace", trace_path, "trace JSONL")->required();
    run->add_option("--strategy", strategy,
                    "full | prefix | full-reuse | fixed-pos | deviation | keep")
        ->required();
    run->add_option("--config", config_path, "episode config JSON")->required();
    run->add_option("--out", out_path, "output report JSON")->required();

    auto* cmp = app.add_subcommand("compare", "Run several strategies and emit a CSV");
    cmp->add_option("--trace", trace_path, "trace JSONL")->required();
    cmp->add_option("--strategies", strategies, "comma-separated strategy names")->required();
    cmp->add_option("--config", config_path, "episode config JSON")->required();
    cmp->add_option("--sweep-k", sweep_k, "comma-separated retrieval sizes");
    cmp->add_option("--sweep-r", sweep_r, "comma-separated average recompute ratios");
    cmp->add_option("--out", out_path, "output CSV")->required();

    auto* sim = app.add_subcommand("schedule-sim", "Simulate one workload");
    sim->add_option("--workload", workload_path, "workload JSON")->required();
    sim->add_option("--schedule", schedule_name, "seq | overlap | balanced")->required();
    sim->add_option("--out", out_path, "output timeline JSON")->required();
    sim->add_option("--gantt-csv", gantt_path, "optional Gantt CSV");

    auto* val = app.add_subcommand("validate", "Validate a timeline JSON");
    val->add_option("--timeline", timeline_path, "timeline JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const auto cfg = load_config(config_path);
            const auto trace = keep::generate_episode(cfg);
            keep::write_text_file(out_path, keep::trace_to_jsonl(trace));
            std::printf("wrote %zu events to %s\n", trace.size(), out_path.c_str());
        } else if (run->parsed()) {
            const auto cfg = load_config(config_path);
            const auto trace = keep::trace_from_jsonl(keep::read_text_file(trace_path));
            const auto report = keep::run_episode(trace, strategy, cfg);
            keep::write_text_file(out_path, keep::report_to_json(report).dump(2) + "\n");
            std::printf("%s: mean_ttft=%s tu, mean_div_l2=%s over %zu steps\n",
                        strategy.c_str(), keep::fmt_tu(report.mean_ttft_tu).c_str(),
                        keep::fmt_tu(report.mean_div_l2).c_str(), report.steps.size());
        } else if (cmp->parsed()) {
            const auto cfg = load_config(config_path);
            const auto trace = keep::trace_from_jsonl(keep::read_text_file(trace_path));
            keep::SweepSpec sweep;
            for (const auto& k : split_csv(sweep_k)) sweep.ks.push_back(std::stoi(k));
            for (const auto& r : split_csv(sweep_r)) sweep.rs.push_back(std::stod(r));
            if (!sweep.ks.empty() && !sweep.rs.empty())
                throw keep::ConfigError("choose either --sweep-k or --sweep-r");
            const auto csv = keep::compare_csv(trace, split_csv(strategies), cfg, sweep);
            keep::write_text_file(out_path, csv);
            std::printf("wrote %s\n", out_path.c_str());
        } else if (sim->parsed()) {
            auto [workload, plan] =
                keep::workload_from_json(keep::Json::parse(keep::read_text_file(workload_path)));
            keep::Timeline tl;
            if (schedule_name == "seq") {
                tl = keep::simulate_sequential(workload);
            } else if (schedule_name == "overlap") {
                tl = keep::simulate_overlap(workload);
            } else if (schedule_name == "balanced") {
                tl = keep::simulate_balanced(workload, plan);
            } else {
                throw keep::ConfigError("unknown schedule '" + schedule_name + "'");
            }
            const auto violations = keep::validate_timeline(tl, plan, workload);
            if (!violations.empty()) {
                for (const auto& v : violations)
                    std::fprintf(stderr, "violation %s: %s\n", v.code.c_str(),
                                 v.message.c_str());
                return 1;
            }
            keep::write_text_file(out_path,
                                  keep::timeline_to_json(tl, workload, plan).dump(2) + "\n");
            if (!gantt_path.empty())
                keep::write_text_file(gantt_path, keep::timeline_to_gantt_csv(tl));
            std::printf("makespan %s tu\n", keep::fmt_tu(tl.makespan).c_str());
        } else if (val->parsed()) {
            const auto file =
                keep::timeline_from_json(keep::Json::parse(keep::read_text_file(timeline_path)));
            const auto violations =
                keep::validate_timeline(file.timeline, file.plan, file.workload);
            if (violations.empty()) {
                std::printf("timeline valid, makespan %s tu, %zu events\n",
                            keep::fmt_tu(file.timeline.makespan).c_str(),
                            file.timeline.events.size());
                return 0;
            }
            for (const auto& v : violations)
                std::fprintf(stderr, "violation %s: %s\n", v.code.c_str(), v.message.c_str());
            return 1;
        }
    } catch (const std::exception& err) {
        std::fprintf(stderr, "error: %s\n", err.what());
        return 2;
    }
    return 0;
}
