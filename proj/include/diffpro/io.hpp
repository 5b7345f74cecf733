#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/daq.hpp"
#include "diffpro/deploy.hpp"
#include "diffpro/model.hpp"
#include "diffpro/pruner.hpp"
#include "diffpro/quant.hpp"
#include "diffpro/search.hpp"
#include "diffpro/sensitivity.hpp"

namespace diffpro {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ------------------------------------------------------------ file plumbing

inline void write_text_file(const fs::path& path, const std::string& content) {
    if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InvalidArgument("cannot write " + path.string());
    f << content;
}

inline std::string read_text_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InvalidArgument("missing artifact file: " + path.string());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_json_file(const fs::path& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

inline json read_json_file(const fs::path& path) { return json::parse(read_text_file(path)); }

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// --------------------------------------------------------- model checkpoint

// Layer weights are stored row-major with full double precision; reloading
// reproduces the model bit-exactly.
inline json checkpoint_to_json(const TinyDiT& model) {
    const auto& cfg = model.config();
    json layers = json::object();
    for (const auto& l : model.linears_raw()) {
        layers[l.id] = {{"shape", {l.w.rows, l.w.cols}},
                        {"weights", l.w.a},
                        {"bias", l.bias},
                        {"token_rows", l.token_rows}};
    }
    json norms = json::array();
    for (const auto& n : model.norms_raw()) norms.push_back({{"gamma", n.gamma}, {"beta", n.beta}});
    return json{{"format", "tinydit-checkpoint"},
                {"version", 1},
                {"seed", model.seed()},
                {"config",
                 {{"patch", cfg.patch},
                  {"hidden", cfg.hidden},
                  {"blocks", cfg.blocks},
                  {"heads", cfg.heads},
                  {"mlp_hidden", cfg.mlp_hidden},
                  {"classes", cfg.classes},
                  {"T", cfg.T}}},
                {"layers", layers},
                {"layer_norms", norms},
                {"class_embed", {{"shape", {model.class_embed_raw().rows,
                                            model.class_embed_raw().cols}},
                                 {"weights", model.class_embed_raw().a}}}};
}

inline TinyDiT checkpoint_from_json(const json& j) {
    if (j.value("format", "") != "tinydit-checkpoint")
        throw InvalidArgument("not a tinydit checkpoint");
    const auto& jc = j.at("config");
    DiTConfig cfg;
    cfg.patch = jc.at("patch").get<int>();
    cfg.hidden = jc.at("hidden").get<int>();
    cfg.blocks = jc.at("blocks").get<int>();
    cfg.heads = jc.at("heads").get<int>();
    cfg.mlp_hidden = jc.at("mlp_hidden").get<int>();
    cfg.classes = jc.at("classes").get<int>();
    cfg.T = jc.at("T").get<int>();
    TinyDiT model(cfg, j.at("seed").get<uint64_t>());
    for (auto& l : model.linears_raw()) {
        const auto& jl = j.at("layers").at(l.id);
        l.w.a = jl.at("weights").get<std::vector<double>>();
        l.bias = jl.at("bias").get<std::vector<double>>();
    }
    auto& norms = model.norms_raw();
    const auto& jn = j.at("layer_norms");
    for (size_t i = 0; i < norms.size(); ++i) {
        norms[i].gamma = jn.at(i).at("gamma").get<std::vector<double>>();
        norms[i].beta = jn.at(i).at("beta").get<std::vector<double>>();
    }
    model.class_embed_raw().a = j.at("class_embed").at("weights").get<std::vector<double>>();
    return model;
}

// ------------------------------------------------------------- plan formats

inline json bitplan_to_json(const BitPlan& plan) {
    json layers = json::object();
    for (const auto& [id, a] : plan.layers)
        layers[id] = {{"bits", a.bits}, {"group", a.group_size}, {"frozen", a.frozen}};
    return json{{"layers", layers}};
}

inline BitPlan bitplan_from_json(const json& j) {
    BitPlan plan;
    for (const auto& [id, a] : j.at("layers").items())
        plan.layers[id] = LayerAssignment{a.at("bits").get<int>(), a.at("group").get<int>(),
                                          a.at("frozen").get<bool>()};
    return plan;
}

inline json daq_to_json(const DaqPolicy& p) {
    return json{{"bits", {{"early", p.bits_early}, {"mid", p.bits_mid}, {"late", p.bits_late}}},
                {"percentile", p.percentile},
                {"group_size", p.group_size},
                {"boundaries", {p.boundary_early, p.boundary_mid}}};
}

inline DaqPolicy daq_from_json(const json& j) {
    DaqPolicy p;
    p.bits_early = j.at("bits").at("early").get<int>();
    p.bits_mid = j.at("bits").at("mid").get<int>();
    p.bits_late = j.at("bits").at("late").get<int>();
    p.percentile = j.at("percentile").get<double>();
    p.group_size = j.at("group_size").get<int>();
    p.boundary_early = j.at("boundaries").at(0).get<double>();
    p.boundary_mid = j.at("boundaries").at(1).get<double>();
    return p;
}

inline json schedule_to_json(const StepSchedule& s) {
    return json{{"kept", s.kept}, {"tail", s.tail}, {"rho", s.rho},
                {"k", static_cast<int>(s.kept.size())}};
}

inline StepSchedule schedule_from_json(const json& j) {
    StepSchedule s;
    s.kept = j.at("kept").get<std::vector<int>>();
    s.tail = j.at("tail").get<std::vector<int>>();
    s.rho = j.at("rho").get<double>();
    return s;
}

// --------------------------------------------------------------- stats.json

inline json stats_to_json(const std::vector<LayerStats>& layers) {
    json out = json::object();
    json jl = json::object();
    for (const auto& l : layers) {
        json env = json::array();
        for (const auto& [lo, hi] : l.group_envelopes) env.push_back({lo, hi});
        jl[l.layer_id] = {{"h_diag_mean", l.h_diag_mean},
                          {"k95", l.k95},
                          {"d", l.d},
                          {"spill", l.spill},
                          {"s_pca", l.s_pca},
                          {"score", l.score},
                          {"tvi", l.tvi},
                          {"signals",
                           {{"sx", l.signals.sx},
                            {"sd", l.signals.sd},
                            {"sk", l.signals.sk},
                            {"sn", l.signals.sn}}},
                          {"composite", l.composite},
                          {"tier", tier_name(l.tier)},
                          {"frozen", l.frozen},
                          {"knee", {{"bits", l.knee_bits}, {"group", l.knee_group}}},
                          {"envelopes", env}};
    }
    out["layers"] = jl;
    // the composite's undefined ingredients are stand-ins; flag them here
    out["meta"] = {{"stand_ins",
                    {{"sd", "leave-one-quantized drift at W4/g288"},
                     {"sx", "0.8 * combined score + 0.2 * normalized temporal variability"},
                     {"hf_bias", "omitted (no operational definition)"}}}};
    return out;
}

// -------------------------------------------------------------- csv writers

inline void write_drift_csv(const fs::path& path, const DriftProfile& prof,
                            const StepSchedule& sched) {
    std::string out = "t,delta,kept_flag,tail_flag\n";
    for (int t : prof.candidates) {
        const bool kept = sched.contains(t);
        const bool tail = std::binary_search(sched.tail.begin(), sched.tail.end(), t);
        out += std::to_string(t) + "," + fmt_double(prof.at(t)) + "," + (kept ? "1" : "0") + "," +
               (tail ? "1" : "0") + "\n";
    }
    write_text_file(path, out);
}

inline void write_evolution_csv(const fs::path& path, const std::vector<GenerationLog>& log) {
    std::string out = "generation,best,median\n";
    for (const auto& g : log)
        out += std::to_string(g.generation) + "," + fmt_double(g.best) + "," +
               fmt_double(g.median) + "\n";
    write_text_file(path, out);
}

inline void write_pareto_csv(const fs::path& path, const std::vector<PlanCandidate>& cands) {
    std::string out = "index,drift_mse,latency_units,bitops,mem_bytes,total,feasible\n";
    for (size_t i = 0; i < cands.size(); ++i) {
        const auto& s = cands[i].score;
        out += std::to_string(i) + "," + fmt_double(s.drift_mse) + "," +
               fmt_double(s.latency_units) + "," + fmt_double(s.bitops) + "," +
               fmt_double(s.mem_bytes) + "," + fmt_double(s.total) + "," +
               (s.feasible ? "1" : "0") + "\n";
    }
    write_text_file(path, out);
}

inline void write_bits_heatmap_csv(const fs::path& path, const BitPlan& plan) {
    std::string out = "layer,block,role,bits,group,frozen\n";
    for (const auto& [id, a] : plan.layers) {
        std::string block = "stem", role = id;
        const auto dot = id.find('.');
        if (id.rfind("block", 0) == 0 && dot != std::string::npos) {
            block = id.substr(0, dot);
            role = id.substr(dot + 1);
        } else if (id == "final_proj") {
            block = "head";
        }
        out += id + "," + block + "," + role + "," + std::to_string(a.bits) + "," +
               std::to_string(a.group_size) + "," + (a.frozen ? "1" : "0") + "\n";
    }
    write_text_file(path, out);
}

inline void write_steps_csv(const fs::path& path, const SampleResult& res) {
    std::string out = "image,t,bin,a_bits,mean_tau\n";
    for (size_t img = 0; img < res.step_log.size(); ++img)
        for (const auto& e : res.step_log[img])
            out += std::to_string(img) + "," + std::to_string(e.t) + "," + e.bin + "," +
                   std::to_string(e.a_bits) + "," + fmt_double(e.mean_tau) + "\n";
    write_text_file(path, out);
}

// ---------------------------------------------------------- packed plan file

// Layout: "DPK1" | u32 header bytes | header JSON | blobs.
// Codes are bit-packed little-endian at b_w bits (two's complement) per row,
// rows padded to whole bytes; scales are float64 little-endian. The analytic
// size model is independent of this container format.
inline void append_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::string pack_codes(const GroupQuantWeights& q) {
    const int b = q.bits;
    const size_t row_bytes = (static_cast<size_t>(q.cols) * b + 7) / 8;
    std::string out(row_bytes * q.rows, '\0');
    for (int r = 0; r < q.rows; ++r) {
        size_t bitpos = 0;
        char* base = out.data() + static_cast<size_t>(r) * row_bytes;
        for (int c = 0; c < q.cols; ++c) {
            const uint32_t u = static_cast<uint32_t>(q.code(r, c)) & ((1u << b) - 1);
            for (int k = 0; k < b; ++k, ++bitpos)
                if (u & (1u << k)) base[bitpos / 8] |= static_cast<char>(1 << (bitpos % 8));
        }
    }
    return out;
}

inline void unpack_codes(const std::string& blob, GroupQuantWeights& q) {
    const int b = q.bits;
    const size_t row_bytes = (static_cast<size_t>(q.cols) * b + 7) / 8;
    q.codes.assign(static_cast<size_t>(q.rows) * q.cols, 0);
    for (int r = 0; r < q.rows; ++r) {
        size_t bitpos = 0;
        const char* base = blob.data() + static_cast<size_t>(r) * row_bytes;
        for (int c = 0; c < q.cols; ++c) {
            uint32_t u = 0;
            for (int k = 0; k < b; ++k, ++bitpos)
                if (base[bitpos / 8] & (1 << (bitpos % 8))) u |= 1u << k;
            if (u & (1u << (b - 1))) u |= ~((1u << b) - 1);  // sign extend
            q.codes[static_cast<size_t>(r) * q.cols + c] = static_cast<int32_t>(u);
        }
    }
}

inline void write_packed_plan(const fs::path& path,
                              const std::vector<const GroupQuantWeights*>& layers) {
    json header = json::object();
    std::string blobs;
    json jl = json::object();
    for (const auto* q : layers) {
        const std::string codes = pack_codes(*q);
        std::string scales(q->scales.size() * sizeof(double), '\0');
        std::memcpy(scales.data(), q->scales.data(), scales.size());
        jl[q->layer_id] = {{"bits", q->bits},
                           {"group", q->group_size},
                           {"shape", {q->rows, q->cols}},
                           {"codes_offset", blobs.size()},
                           {"codes_bytes", codes.size()},
                           {"scales_offset", blobs.size() + codes.size()},
                           {"scales_bytes", scales.size()}};
        blobs += codes;
        blobs += scales;
    }
    header["version"] = 1;
    header["layers"] = jl;
    const std::string hj = header.dump();
    std::string out = "DPK1";
    append_u32(out, static_cast<uint32_t>(hj.size()));
    out += hj;
    out += blobs;
    write_text_file(path, out);
}

inline std::map<std::string, GroupQuantWeights> read_packed_plan(const fs::path& path) {
    const std::string raw = read_text_file(path);
    if (raw.size() < 8 || raw.compare(0, 4, "DPK1") != 0)
        throw InvalidArgument("not a packed plan file: " + path.string());
    uint32_t hlen = 0;
    for (int i = 0; i < 4; ++i) hlen |= static_cast<uint32_t>(static_cast<unsigned char>(raw[4 + i])) << (8 * i);
    const json header = json::parse(raw.substr(8, hlen));
    const std::string blobs = raw.substr(8 + hlen);
    std::map<std::string, GroupQuantWeights> out;
    for (const auto& [id, jl] : header.at("layers").items()) {
        GroupQuantWeights q;
        q.layer_id = id;
        q.bits = jl.at("bits").get<int>();
        q.group_size = jl.at("group").get<int>();
        q.rows = jl.at("shape").at(0).get<int>();
        q.cols = jl.at("shape").at(1).get<int>();
        unpack_codes(blobs.substr(jl.at("codes_offset").get<size_t>(),
                                  jl.at("codes_bytes").get<size_t>()),
                     q);
        const std::string sb = blobs.substr(jl.at("scales_offset").get<size_t>(),
                                            jl.at("scales_bytes").get<size_t>());
        q.scales.resize(sb.size() / sizeof(double));
        std::memcpy(q.scales.data(), sb.data(), sb.size());
        out[id] = std::move(q);
    }
    return out;
}

// ------------------------------------------------------------------ samples

inline json samples_to_json(const SampleResult& res) {
    json imgs = json::array();
    for (const auto& l : res.latents) imgs.push_back(std::vector<double>(l.v.begin(), l.v.end()));
    return json{{"shape", {Latent::kChannels, Latent::kHeight, Latent::kWidth}},
                {"latents", imgs}};
}

}  // namespace diffpro
