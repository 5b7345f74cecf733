#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/daq.hpp"
#include "diffpro/latent.hpp"
#include "diffpro/quant.hpp"

namespace diffpro {

struct DiTConfig {
    int patch = 2;
    int hidden = 64;
    int blocks = 4;
    int heads = 4;
    int mlp_hidden = 256;
    int classes = 10;
    int T = 100;

    int tokens() const { return (Latent::kHeight / patch) * (Latent::kWidth / patch); }
    int patch_features() const { return Latent::kChannels * patch * patch; }
};

struct LinearWeights {
    std::string id;
    Mat w;                       // out x in
    std::vector<double> bias;    // out
    int token_rows = 0;          // rows per forward (16 for token layers, 1 for time mlp)

    int out_features() const { return w.rows; }
    int in_features() const { return w.cols; }
    long param_count() const { return static_cast<long>(w.rows) * w.cols; }
};

struct LayerNormParams {
    std::vector<double> gamma;
    std::vector<double> beta;
};

// ------------------------------------------------------------- capture hooks

enum class CaptureWhat { Inputs, Outputs };

// Accumulates per-layer statistics during forwards. Capturing never alters
// forward results; reservoir selection is seeded and reproducible.
struct CaptureHook {
    std::string layer_id;
    CaptureWhat what = CaptureWhat::Inputs;
    int reservoir_cap = 2048;
    int envelope_group = 128;

    long rows_seen = 0;
    Mat reservoir;                       // up to cap rows
    std::vector<double> sum_sq;          // per feature (inputs only)
    std::vector<double> group_min;       // per envelope group
    std::vector<double> group_max;
    struct Moments {
        long n = 0;
        double sum = 0.0;
        double sum_sq = 0.0;
    };
    std::map<int, Moments> per_timestep;  // element-wise moments keyed by t

    explicit CaptureHook(std::string id, CaptureWhat w = CaptureWhat::Inputs, int cap = 2048,
                         uint64_t seed = 0)
        : layer_id(std::move(id)), what(w), reservoir_cap(cap), rng_(seed) {}

    void observe(const Mat& x, int t) {
        if (sum_sq.empty() && what == CaptureWhat::Inputs) {
            sum_sq.assign(x.cols, 0.0);
            const int ng = (x.cols + envelope_group - 1) / envelope_group;
            group_min.assign(ng, std::numeric_limits<double>::infinity());
            group_max.assign(ng, -std::numeric_limits<double>::infinity());
        }
        if (reservoir.cols == 0) reservoir = Mat(0, x.cols);
        auto& m = per_timestep[t];
        for (int r = 0; r < x.rows; ++r) {
            const double* row = x.row(r);
            if (what == CaptureWhat::Inputs) {
                for (int c = 0; c < x.cols; ++c) {
                    const double v = row[c];
                    sum_sq[c] += v * v;
                    auto& lo = group_min[c / envelope_group];
                    auto& hi = group_max[c / envelope_group];
                    lo = std::min(lo, v);
                    hi = std::max(hi, v);
                }
            }
            for (int c = 0; c < x.cols; ++c) {
                m.n++;
                m.sum += row[c];
                m.sum_sq += row[c] * row[c];
            }
            // Algorithm R
            if (reservoir.rows < reservoir_cap) {
                reservoir.a.insert(reservoir.a.end(), row, row + x.cols);
                reservoir.rows++;
            } else {
                const long j = static_cast<long>(rng_.next_u64() % static_cast<uint64_t>(rows_seen + 1));
                if (j < reservoir_cap)
                    std::copy(row, row + x.cols, reservoir.row(static_cast<int>(j)));
            }
            rows_seen++;
        }
    }

private:
    Rng rng_;
};

using HookHandle = std::vector<std::shared_ptr<CaptureHook>>;

// ------------------------------------------------------------- execution plan

enum class ActMode { None, Dynamic, Static };

struct LayerExec {
    bool passthrough = true;
    GroupQuantWeights packed;  // valid when !passthrough
    bool act_quant = false;
};

// How a student executes each linear layer. An empty/absent plan is the
// full-precision teacher path.
struct ExecPlan {
    std::map<std::string, LayerExec> layers;
    ActMode act_mode = ActMode::None;
    DaqPolicy policy;
    std::map<std::string, double> static_tau;
    int static_bits = 8;

    const LayerExec* find(const std::string& id) const {
        auto it = layers.find(id);
        return it == layers.end() ? nullptr : &it->second;
    }
};

// Additive perturbation of one layer's output (Jacobian probing).
struct OutputPerturbation {
    std::string layer_id;
    Mat delta;
};

// ------------------------------------------------------------------ TinyDiT

// Deterministic toy diffusion transformer. Weights come from a seeded
// normal(0, 0.02); layer norms, biases and the class table stay full
// precision. Exactly 20 quantizable linear layers.
class TinyDiT {
public:
    TinyDiT(const DiTConfig& cfg, uint64_t seed) : cfg_(cfg), seed_(seed) { init_weights(); }

    const DiTConfig& config() const { return cfg_; }
    uint64_t seed() const { return seed_; }

    const std::vector<std::string>& layer_ids() const { return layer_order_; }

    const LinearWeights& layer(const std::string& id) const {
        auto it = layer_index_.find(id);
        if (it == layer_index_.end()) throw InvalidArgument("unknown layer: " + id);
        return linears_[it->second];
    }
    LinearWeights& layer_mut(const std::string& id) {
        return linears_[layer_index_.at(id)];
    }

    bool has_layer(const std::string& id) const { return layer_index_.count(id) > 0; }

    // quantizable weight parameters / all parameters incl. norms, biases, table
    long quantizable_params() const {
        long n = 0;
        for (const auto& l : linears_) n += l.param_count();
        return n;
    }
    long aux_params() const {
        long n = 0;
        for (const auto& l : linears_) n += static_cast<long>(l.bias.size());
        for (const auto& ln : norms_) n += static_cast<long>(ln.gamma.size() + ln.beta.size());
        n += static_cast<long>(class_embed_.a.size());
        return n;
    }
    long total_params() const { return quantizable_params() + aux_params(); }

    // ---- hooks

    HookHandle register_hooks(const std::vector<std::string>& ids, CaptureWhat what, int cap,
                              uint64_t seed) const {
        HookHandle hs;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (!has_layer(ids[i])) throw InvalidArgument("unknown layer: " + ids[i]);
            auto h = std::make_shared<CaptureHook>(ids[i], what, cap,
                                                   derive_seed(seed, "hook", i));
            hooks_.push_back(h);
            hs.push_back(std::move(h));
        }
        return hs;
    }

    void remove_hooks(const HookHandle& hs) const {
        for (const auto& h : hs)
            hooks_.erase(std::remove(hooks_.begin(), hooks_.end(), h), hooks_.end());
    }

    // ---- forward

    Latent forward(const Latent& x_t, int t, int label) const {
        return forward(x_t, t, label, nullptr, nullptr, nullptr);
    }

    Latent forward(const Latent& x_t, int t, int label, const ExecPlan* exec,
                   TauTrace* trace = nullptr, const OutputPerturbation* pert = nullptr) const {
        if (label < 0 || label >= cfg_.classes) throw InvalidArgument("label out of range");
        if (t < 0 || t >= cfg_.T) throw InvalidArgument("timestep out of range");

        Mat tok = patchify(x_t);
        tok = apply_linear("patch_embed", tok, t, exec, trace, pert);

        Mat temb = time_embedding(t);
        temb = apply_linear("time_mlp.fc1", temb, t, exec, trace, pert);
        silu_inplace(temb);
        temb = apply_linear("time_mlp.fc2", temb, t, exec, trace, pert);

        // conditioning: time embedding + class table row, added to every token
        for (int i = 0; i < tok.rows; ++i)
            for (int c = 0; c < cfg_.hidden; ++c)
                tok(i, c) += temb(0, c) + class_embed_(label, c);

        const int head_dim = cfg_.hidden / cfg_.heads;
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pfx = "block" + std::to_string(b) + ".";
            // attention
            Mat h = layer_norm(tok, norms_[2 * b]);
            Mat qkv = apply_linear(pfx + "qkv", h, t, exec, trace, pert);
            Mat attn = attention(qkv, head_dim);
            attn = apply_linear(pfx + "attn_proj", attn, t, exec, trace, pert);
            for (size_t i = 0; i < tok.a.size(); ++i) tok.a[i] += attn.a[i];
            // mlp
            h = layer_norm(tok, norms_[2 * b + 1]);
            Mat m1 = apply_linear(pfx + "mlp_fc1", h, t, exec, trace, pert);
            gelu_inplace(m1);
            Mat m2 = apply_linear(pfx + "mlp_fc2", m1, t, exec, trace, pert);
            for (size_t i = 0; i < tok.a.size(); ++i) tok.a[i] += m2.a[i];
        }

        Mat h = layer_norm(tok, norms_.back());
        Mat out = apply_linear("final_proj", h, t, exec, trace, pert);
        return unpatchify(out);
    }

    // ---- raw parameter access for (de)serialization

    std::vector<LinearWeights>& linears_raw() { return linears_; }
    const std::vector<LinearWeights>& linears_raw() const { return linears_; }
    std::vector<LayerNormParams>& norms_raw() { return norms_; }
    const std::vector<LayerNormParams>& norms_raw() const { return norms_; }
    Mat& class_embed_raw() { return class_embed_; }
    const Mat& class_embed_raw() const { return class_embed_; }

    Mat patchify(const Latent& x) const {
        const int p = cfg_.patch;
        const int gh = Latent::kHeight / p, gw = Latent::kWidth / p;
        Mat tok(gh * gw, cfg_.patch_features());
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                double* row = tok.row(py * gw + px);
                int f = 0;
                for (int c = 0; c < Latent::kChannels; ++c)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx)
                            row[f++] = x.at(c, py * p + dy, px * p + dx);
            }
        return tok;
    }

    Latent unpatchify(const Mat& tok) const {
        const int p = cfg_.patch;
        const int gh = Latent::kHeight / p, gw = Latent::kWidth / p;
        Latent x;
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px) {
                const double* row = tok.row(py * gw + px);
                int f = 0;
                for (int c = 0; c < Latent::kChannels; ++c)
                    for (int dy = 0; dy < p; ++dy)
                        for (int dx = 0; dx < p; ++dx)
                            x.at(c, py * p + dy, px * p + dx) = row[f++];
            }
        return x;
    }

    // building blocks, exposed for independent-oracle reimplementations
    Mat time_embedding(int t) const {
        const int d = cfg_.hidden;
        const int half = d / 2;
        Mat e(1, d);
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            e(0, i) = std::cos(t * freq);
            e(0, half + i) = std::sin(t * freq);
        }
        return e;
    }

    static void silu_inplace(Mat& m) {
        for (double& v : m.a) v = v / (1.0 + std::exp(-v));
    }
    static void gelu_inplace(Mat& m) {
        for (double& v : m.a) v = 0.5 * v * (1.0 + std::erf(v * 0.70710678118654752440));
    }

    static Mat layer_norm(const Mat& x, const LayerNormParams& p) {
        Mat y(x.rows, x.cols);
        for (int r = 0; r < x.rows; ++r) {
            const double* in = x.row(r);
            double mean = 0.0;
            for (int c = 0; c < x.cols; ++c) mean += in[c];
            mean /= x.cols;
            double var = 0.0;
            for (int c = 0; c < x.cols; ++c) var += (in[c] - mean) * (in[c] - mean);
            var /= x.cols;
            const double inv = 1.0 / std::sqrt(var + 1e-5);
            double* out = y.row(r);
            for (int c = 0; c < x.cols; ++c)
                out[c] = (in[c] - mean) * inv * p.gamma[c] + p.beta[c];
        }
        return y;
    }

    static Mat attention(const Mat& qkv, int head_dim) {
        const int n = qkv.rows;
        const int d = qkv.cols / 3;
        const int heads = d / head_dim;
        const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
        Mat out(n, d);
        std::vector<double> scores(n);
        for (int h = 0; h < heads; ++h) {
            const int q0 = h * head_dim, k0 = d + h * head_dim, v0 = 2 * d + h * head_dim;
            for (int i = 0; i < n; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int k = 0; k < head_dim; ++k) s += qkv(i, q0 + k) * qkv(j, k0 + k);
                    scores[j] = s * scale;
                    mx = std::max(mx, scores[j]);
                }
                double z = 0.0;
                for (int j = 0; j < n; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    z += scores[j];
                }
                for (int k = 0; k < head_dim; ++k) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += scores[j] * qkv(j, v0 + k);
                    out(i, h * head_dim + k) = acc / z;
                }
            }
        }
        return out;
    }

private:
    void add_linear(const std::string& id, int out, int in, int token_rows, Rng& rng) {
        LinearWeights l;
        l.id = id;
        l.w = Mat(out, in);
        for (double& v : l.w.a) v = 0.02 * rng.normal();
        l.bias.assign(out, 0.0);
        l.token_rows = token_rows;
        layer_index_[id] = linears_.size();
        layer_order_.push_back(id);
        linears_.push_back(std::move(l));
    }

    void init_weights() {
        Rng rng(seed_);
        const int d = cfg_.hidden;
        const int ntok = cfg_.tokens();
        add_linear("patch_embed", d, cfg_.patch_features(), ntok, rng);
        add_linear("time_mlp.fc1", d, d, 1, rng);
        add_linear("time_mlp.fc2", d, d, 1, rng);
        for (int b = 0; b < cfg_.blocks; ++b) {
            const std::string pfx = "block" + std::to_string(b) + ".";
            add_linear(pfx + "qkv", 3 * d, d, ntok, rng);
            add_linear(pfx + "attn_proj", d, d, ntok, rng);
            add_linear(pfx + "mlp_fc1", cfg_.mlp_hidden, d, ntok, rng);
            add_linear(pfx + "mlp_fc2", d, cfg_.mlp_hidden, ntok, rng);
        }
        add_linear("final_proj", cfg_.patch_features(), d, ntok, rng);
        norms_.resize(2 * cfg_.blocks + 1);
        for (auto& ln : norms_) {
            ln.gamma.assign(d, 1.0);
            ln.beta.assign(d, 0.0);
        }
        class_embed_ = Mat(cfg_.classes, d);
        for (double& v : class_embed_.a) v = 0.02 * rng.normal();
    }

    Mat apply_linear(const std::string& id, const Mat& x, int t, const ExecPlan* exec,
                     TauTrace* trace, const OutputPerturbation* pert) const {
        const LinearWeights& l = linears_[layer_index_.at(id)];
        for (const auto& h : hooks_)
            if (h->what == CaptureWhat::Inputs && h->layer_id == id) h->observe(x, t);

        Mat y;
        const LayerExec* le = exec ? exec->find(id) : nullptr;
        if (le && !le->passthrough) {
            QuantActs qa;
            if (le->act_quant && exec->act_mode == ActMode::Dynamic) {
                const PhaseBin bin = phase_bin(t, cfg_.T, exec->policy.boundary_early,
                                               exec->policy.boundary_mid);
                qa = quantize_activations(x, exec->policy.bits_for(bin), exec->policy.percentile,
                                          exec->policy.group_size, trace);
            } else if (le->act_quant && exec->act_mode == ActMode::Static) {
                auto it = exec->static_tau.find(id);
                if (it == exec->static_tau.end())
                    throw InvalidArgument("no static activation scale for layer " + id);
                qa = quantize_activations_static(x, exec->static_bits, it->second, trace);
            } else {
                // weight-only quantization: activations pass through as exact
                // codes at 16 bits equivalent via identity scale 1 per element
                qa = quantize_activations(x, 16, 100.0, std::max(1, x.cols), nullptr);
            }
            y = int_gemm(qa, le->packed);
            for (int r = 0; r < y.rows; ++r)
                for (int c = 0; c < y.cols; ++c) y(r, c) += l.bias[c];
        } else {
            y = matmul_wt(x, l.w, l.bias);
        }

        if (pert && pert->layer_id == id)
            for (size_t i = 0; i < y.a.size(); ++i) y.a[i] += pert->delta.a[i];

        if (!y.all_finite())
            throw NumericFailure("non-finite activation at t=" + std::to_string(t), id);
        for (const auto& h : hooks_)
            if (h->what == CaptureWhat::Outputs && h->layer_id == id) h->observe(y, t);
        return y;
    }

    DiTConfig cfg_;
    uint64_t seed_;
    std::vector<LinearWeights> linears_;
    std::map<std::string, size_t> layer_index_;
    std::vector<std::string> layer_order_;
    std::vector<LayerNormParams> norms_;  // per block: ln1, ln2; last: final
    Mat class_embed_;
    mutable std::vector<std::shared_ptr<CaptureHook>> hooks_;
};

}  // namespace diffpro
