#pragma once

// JSON and CSV forms of workloads, plans and timelines. ordered_json keeps
// key order stable so identical inputs serialize to identical bytes.

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "keep/errors.hpp"
#include "keep/pipeline_sim.hpp"

namespace keep {

using Json = nlohmann::ordered_json;

inline std::string fmt_tu(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline Json plan_to_json(const RecomputePlan& plan) {
    Json layers = Json::array();
    for (const auto& layer : plan.layers) {
        Json ids = Json::array();
        for (SegmentId s : layer) ids.push_back(s);
        layers.push_back(ids);
    }
    return layers;
}

inline RecomputePlan plan_from_json(const Json& j) {
    RecomputePlan plan;
    for (const auto& layer : j) {
        std::set<SegmentId> ids;
        for (const auto& s : layer) ids.insert(s.get<SegmentId>());
        plan.layers.push_back(std::move(ids));
    }
    return plan;
}

inline Json workload_to_json(const Workload& w, const RecomputePlan& plan) {
    Json j;
    j["num_layers"] = w.num_layers;
    j["compute_tu"] = w.compute_tu;
    j["eval_tu"] = w.eval_tu;
    j["attention_fraction"] = w.attention_fraction;
    Json items = Json::array();
    for (const auto& item : w.items) {
        Json ji;
        ji["layer"] = item.layer;
        ji["owner"] = item.owner.str();
        ji["bytes"] = item.bytes;
        ji["tu"] = item.tu;
        items.push_back(ji);
    }
    j["items"] = items;
    Json members = Json::object();
    for (const auto& [owner, segs] : w.owner_members) members[owner.str()] = segs;
    j["owner_members"] = members;
    j["plan"] = plan_to_json(plan);
    return j;
}

inline std::pair<Workload, RecomputePlan> workload_from_json(const Json& j) {
    Workload w;
    w.num_layers = j.at("num_layers").get<int>();
    w.compute_tu = j.at("compute_tu").get<std::vector<double>>();
    w.eval_tu = j.at("eval_tu").get<std::vector<double>>();
    w.attention_fraction = j.value("attention_fraction", 0.5);
    for (const auto& ji : j.at("items")) {
        LoadItem item;
        item.layer = ji.at("layer").get<int>();
        auto owner = OwnerRef::parse(ji.at("owner").get<std::string>());
        if (!owner) throw TraceError("bad owner id in workload");
        item.owner = *owner;
        item.bytes = ji.at("bytes").get<std::uint64_t>();
        item.tu = ji.at("tu").get<double>();
        w.items.push_back(item);
    }
    if (j.contains("owner_members")) {
        for (const auto& [key, segs] : j.at("owner_members").items()) {
            auto owner = OwnerRef::parse(key);
            if (!owner) throw TraceError("bad owner id in owner_members");
            w.owner_members[*owner] = segs.get<std::vector<SegmentId>>();
        }
    }
    RecomputePlan plan;
    if (j.contains("plan")) plan = plan_from_json(j.at("plan"));
    if (plan.layers.empty()) plan.layers.resize(w.num_layers);
    return {std::move(w), std::move(plan)};
}

inline const char* sim_kind_name(SimKind k) {
    switch (k) {
        case SimKind::Load: return "load";
        case SimKind::Compute: return "compute";
        case SimKind::Eval: return "eval";
    }
    return "?";
}

inline const char* sim_resource_name(SimResource r) {
    switch (r) {
        case SimResource::LoadEngine: return "load-engine";
        case SimResource::ComputeEngine: return "compute-engine";
        case SimResource::EvalEngine: return "eval-engine";
    }
    return "?";
}

inline Json timeline_to_json(const Timeline& tl, const Workload& w, const RecomputePlan& plan) {
    Json j;
    j["makespan_tu"] = tl.makespan;
    Json events = Json::array();
    for (const auto& e : tl.events) {
        Json je;
        je["kind"] = sim_kind_name(e.kind);
        je["resource"] = sim_resource_name(e.resource);
        je["layer"] = e.layer;
        if (e.kind == SimKind::Load) {
            je["owner"] = e.owner.str();
            je["bytes"] = e.bytes;
        }
        je["start_tu"] = e.start;
        je["end_tu"] = e.end;
        events.push_back(je);
    }
    j["events"] = events;
    j["workload"] = workload_to_json(w, plan);
    return j;
}

struct TimelineFile {
    Timeline timeline;
    Workload workload;
    RecomputePlan plan;
};

inline TimelineFile timeline_from_json(const Json& j) {
    TimelineFile out;
    out.timeline.makespan = j.at("makespan_tu").get<double>();
    for (const auto& je : j.at("events")) {
        SimEvent e;
        const std::string kind = je.at("kind").get<std::string>();
        if (kind == "load") {
            e.kind = SimKind::Load;
        } else if (kind == "compute") {
            e.kind = SimKind::Compute;
        } else if (kind == "eval") {
            e.kind = SimKind::Eval;
        } else {
            throw TraceError("bad event kind '" + kind + "'");
        }
        const std::string res = je.at("resource").get<std::string>();
        if (res == "load-engine") {
            e.resource = SimResource::LoadEngine;
        } else if (res == "compute-engine") {
            e.resource = SimResource::ComputeEngine;
        } else if (res == "eval-engine") {
            e.resource = SimResource::EvalEngine;
        } else {
            throw TraceError("bad resource '" + res + "'");
        }
        e.layer = je.at("layer").get<int>();
        if (je.contains("owner")) {
            auto owner = OwnerRef::parse(je.at("owner").get<std::string>());
            if (!owner) throw TraceError("bad owner id in timeline");
            e.owner = *owner;
        }
        e.bytes = je.value("bytes", static_cast<std::uint64_t>(0));
        e.start = je.at("start_tu").get<double>();
        e.end = je.at("end_tu").get<double>();
        out.timeline.events.push_back(e);
    }
    auto [w, plan] = workload_from_json(j.at("workload"));
    out.workload = std::move(w);
    out.plan = std::move(plan);
    return out;
}

// Gantt-style CSV: one row per event.
inline std::string timeline_to_gantt_csv(const Timeline& tl) {
    std::string out = "resource,kind,layer,owner,start_tu,end_tu\n";
    for (const auto& e : tl.events) {
        out += sim_resource_name(e.resource);
        out += ',';
        out += sim_kind_name(e.kind);
        out += ',';
        out += std::to_string(e.layer);
        out += ',';
        out += e.kind == SimKind::Load ? e.owner.str() : std::string("-");
        out += ',';
        out += fmt_tu(e.start);
        out += ',';
        out += fmt_tu(e.end);
        out += '\n';
    }
    return out;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path + " for writing");
    f << text;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open " + path);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace keep
