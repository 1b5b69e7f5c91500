#pragma once

#include <span>
#include <string>
#include <vector>

#include "wemoe/checkpoint.hpp"
#include "wemoe/merge.hpp"
#include "wemoe/model.hpp"
#include "wemoe/rng.hpp"

namespace wemoe {

// Which sublayers get upcycled into weight-space MoE sites.
enum class SiteScope { mlp_only, attn_and_mlp_separate, whole_block };

SiteScope parse_site_scope(std::string_view name);  // "mlp" | "attn-mlp" | "block"
std::string site_scope_name(SiteScope s);

// Trainable perceptron mapping a hidden token to T routing weights.
//   depth 2: r(h) = W2 relu(W1 h + b1) + b2
//   depth 1: r(h) = W1 h + b1
//   depth 0: r(h) = b0
struct Router {
    int depth = 2;
    int64_t d_in = 0;
    int64_t hidden = 0;
    int64_t n_tasks = 0;
    Tensor w1, b1, w2, b2, b0;  // allocated according to depth

    int64_t param_count() const;
    std::vector<Tensor*> params();
    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::vector<std::pair<std::string, const Tensor*>> named_params() const;
};

Router make_router(int depth, int64_t d_in, int64_t hidden, int64_t n_tasks);

// Linear weights sampled from a zero-mean Gaussian (variance 0.01 read as
// stddev 0.1 by default, adjustable); final bias set to lambda so the
// initial routing weights equal lambda for every input.
void init_router(Router& router, float lambda, Rng& rng, float init_stddev = 0.1f);

// Frozen per-site slices of all task vectors; column t reconstructs task
// vector t restricted to the site.
struct TaskDictionary {
    std::vector<std::vector<Tensor>> columns;  // [entry][task], entry order = site order
};

struct WEMoESite {
    std::string id;  // e.g. "layers.2.mlp"
    int layer = 0;
    SitePart part = SitePart::mlp;
    int64_t n_heads = 1;  // used by attn/block parts
    NamedParamSet theta0_site;
    TaskDictionary dict;
    Router router;
};

// Merged model with MoE sites: static parameters merged by task arithmetic,
// per-site frozen dictionaries combined by trainable routers. Every encoder
// parameter name lives either in static_params or in exactly one site.
struct UpscaledModel {
    ModelConfig cfg;
    SiteScope scope = SiteScope::mlp_only;
    float lambda = 0.3f;
    int router_depth = 2;
    int64_t router_hidden = 0;
    int64_t n_tasks = 0;
    NamedParamSet static_params;  // merged encoder remainder + all task heads
    std::vector<WEMoESite> sites;

    std::vector<Tensor*> trainable_params();
    std::vector<std::pair<std::string, Tensor*>> named_trainable();
    int64_t trainable_count() const;

    // forced_w (shape [T]) bypasses the routers at every site; used by the
    // equivalence harnesses and analyses.
    GradTape::Var forward_logits(GradTape& tape, const Batch& batch,
                                 const Tensor* forced_w = nullptr,
                                 std::vector<Tensor>* routing_out = nullptr) const;
    Tensor forward(const Batch& batch, const Tensor* forced_w = nullptr) const;

    // Per-site routing weights [B, T] for a batch.
    std::vector<Tensor> routing_weights(const Batch& batch) const;
};

UpscaledModel upscale(const NamedParamSet& theta0, std::span<const NamedParamSet> finetuned,
                      float lambda, SiteScope scope, int router_depth,
                      int64_t router_hidden /* 0 = d_model */, const ModelConfig& cfg,
                      uint64_t seed);

// Mean-over-tokens routing: w_b = mean_n r(h_{b,n}); no normalization.
Tensor route(const Router& router, const Tensor& hidden);  // [B,N,d] -> [B,T]

// Apply one site's sublayer with input-conditioned weights; per batch row,
// weights are theta0_site + sum_t w[b,t] * dict column t.
Tensor moe_forward(const WEMoESite& site, const Tensor& hidden);
Tensor moe_forward_forced(const WEMoESite& site, const Tensor& hidden, const Tensor& w);

// Closed-form router parameter counts.
int64_t router_param_count(int depth, int64_t d, int64_t hidden, int64_t n_tasks);
int64_t trainable_count_formula(int64_t n_sites, int depth, int64_t d, int64_t hidden,
                                int64_t n_tasks);

// .wemc persistence with site/router manifest sections.
void save_upscaled(const std::string& path, const UpscaledModel& model, CheckpointMeta meta = {});
UpscaledModel load_upscaled(const std::string& path);
std::string encode_upscaled(const UpscaledModel& model, CheckpointMeta meta = {});
UpscaledModel decode_upscaled(std::string_view bytes);

}  // namespace wemoe
