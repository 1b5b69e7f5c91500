#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>

#include "wemoe/params.hpp"
#include "wemoe/rng.hpp"

namespace wemoe {

constexpr float kLayerNormEps = 1e-5f;

// Desk-scale pre-LayerNorm ViT-style encoder over continuous token features.
struct ModelConfig {
    int64_t d_model = 32;
    int64_t n_layers = 4;
    int64_t n_heads = 4;
    int64_t d_ff = 64;
    int64_t seq_len = 16;
    int64_t input_dim = 16;
    std::vector<int64_t> n_classes;  // per task

    int64_t n_tasks() const { return static_cast<int64_t>(n_classes.size()); }
    void validate() const;
};

struct Batch {
    Tensor inputs;            // [B, N, input_dim]
    std::vector<int> labels;  // optional; empty for unlabeled test batches
    int task_id = 0;

    int64_t size() const { return inputs.shape[0]; }
};

// Which sublayers a WEMoE site replaces.
enum class SitePart { attn, mlp, block };

// Context handed to a replacement sublayer. `input` is the sublayer
// function's own input: post-ln1 hidden states for attn, post-ln2 for mlp,
// and the raw block input for block (the residual wiring stays outside for
// attn/mlp and moves inside the hook for block).
struct SublayerCall {
    GradTape& tape;
    GradTape::Var input;  // [B, N, d]
    int layer;
    int64_t batch;
    int64_t n_tokens;
};

using SublayerFn = std::function<GradTape::Var(const SublayerCall&)>;

// Per-(layer, part) replacement functions; absent entries fall back to the
// plain Transformer sublayer.
struct MoeOverride {
    std::map<int, SublayerFn> attn;
    std::map<int, SublayerFn> mlp;
    std::map<int, SublayerFn> block;
};

// name -> tape var for one model's parameters.
using ParamVarMap = std::map<std::string, GradTape::Var, std::less<>>;

ParamVarMap params_on_tape(GradTape& tape, const NamedParamSet& params);

NamedParamSet init_params(const ModelConfig& cfg, uint64_t seed);

// Taped forward producing logits [B, C_task] for the batch's task head.
GradTape::Var forward_on_tape(GradTape& tape, const ParamVarMap& params, const ModelConfig& cfg,
                              const Batch& batch, const MoeOverride* moe = nullptr);

// Pure evaluation wrapper.
Tensor forward(const NamedParamSet& params, const ModelConfig& cfg, const Batch& batch,
               const MoeOverride* moe = nullptr);

// Hidden states entering the MLP sublayer of block `layer_index`
// (post-attention residual, post-ln2). This is the router input for
// MLP-scope sites.
Tensor token_sequence_hidden(const NamedParamSet& params, const ModelConfig& cfg,
                             const Batch& batch, int layer_index);

// Accuracy of argmax(logits) against batch labels.
double accuracy(const Tensor& logits, const std::vector<int>& labels);

// Building blocks shared with the MoE sites, which apply them with
// materialized per-sample weights. `x` is [B, N, d].
GradTape::Var attention_on_tape(GradTape& tape, GradTape::Var x, int64_t n_heads,
                                GradTape::Var qw, GradTape::Var qb, GradTape::Var kw,
                                GradTape::Var kb, GradTape::Var vw, GradTape::Var vb,
                                GradTape::Var ow, GradTape::Var ob);
GradTape::Var mlp_on_tape(GradTape& tape, GradTape::Var x, GradTape::Var fc1w, GradTape::Var fc1b,
                          GradTape::Var fc2w, GradTape::Var fc2b);

}  // namespace wemoe
