#include "wemoe/model.hpp"

#include <cmath>

namespace wemoe {

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 || seq_len <= 0 ||
        input_dim <= 0)
        throw ConfigError("model config fields must be positive");
    if (d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                          std::to_string(n_heads));
    for (int64_t c : n_classes)
        if (c < 2) throw ConfigError("each task needs at least 2 classes");
}

namespace {

Tensor normal_tensor(Shape shape, Rng& rng, float stddev) {
    Tensor t = Tensor::zeros(std::move(shape));
    rng.fill_normal(t.data, 0.0f, stddev);
    return t;
}

}  // namespace

NamedParamSet init_params(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(derive_seed(seed, "init_params"));
    NamedParamSet p;
    const float embed_std = 1.0f / std::sqrt(static_cast<float>(cfg.input_dim));
    const float attn_std = 1.0f / std::sqrt(static_cast<float>(cfg.d_model));
    const float ff_std = 1.0f / std::sqrt(static_cast<float>(cfg.d_ff));

    p.add("embed.weight", normal_tensor({cfg.d_model, cfg.input_dim}, rng, embed_std));
    p.add("embed.bias", Tensor::zeros({cfg.d_model}));
    p.add("embed.pos", normal_tensor({cfg.seq_len, cfg.d_model}, rng, 0.02f));
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const std::string base = "layers." + std::to_string(i) + ".";
        p.add(base + "ln1.gain", Tensor::full({cfg.d_model}, 1.0f));
        p.add(base + "ln1.bias", Tensor::zeros({cfg.d_model}));
        for (const char* proj : {"q", "k", "v", "o"}) {
            p.add(base + "attn." + proj + ".weight",
                  normal_tensor({cfg.d_model, cfg.d_model}, rng, attn_std));
            p.add(base + "attn." + proj + ".bias", Tensor::zeros({cfg.d_model}));
        }
        p.add(base + "ln2.gain", Tensor::full({cfg.d_model}, 1.0f));
        p.add(base + "ln2.bias", Tensor::zeros({cfg.d_model}));
        p.add(base + "mlp.fc1.weight", normal_tensor({cfg.d_ff, cfg.d_model}, rng, attn_std));
        p.add(base + "mlp.fc1.bias", Tensor::zeros({cfg.d_ff}));
        p.add(base + "mlp.fc2.weight", normal_tensor({cfg.d_model, cfg.d_ff}, rng, ff_std));
        p.add(base + "mlp.fc2.bias", Tensor::zeros({cfg.d_model}));
    }
    p.add("final_ln.gain", Tensor::full({cfg.d_model}, 1.0f));
    p.add("final_ln.bias", Tensor::zeros({cfg.d_model}));
    for (int64_t t = 0; t < cfg.n_tasks(); ++t) {
        const std::string base = "heads." + std::to_string(t) + ".";
        p.add(base + "weight", normal_tensor({cfg.n_classes[static_cast<size_t>(t)], cfg.d_model},
                                             rng, attn_std));
        p.add(base + "bias", Tensor::zeros({cfg.n_classes[static_cast<size_t>(t)]}));
    }
    return p;
}

ParamVarMap params_on_tape(GradTape& tape, const NamedParamSet& params) {
    ParamVarMap m;
    for (size_t i = 0; i < params.size(); ++i) m.emplace(params.name(i), tape.leaf(params.tensor(i)));
    return m;
}

namespace {

GradTape::Var require_var(const ParamVarMap& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end())
        throw IncompatibleModelError("forward: missing parameter '" + name + "'");
    return it->second;
}

}  // namespace

// Scaled dot-product attention over already-normalized hidden states.
// `x` is [B, N, d]; weights follow the [out, in] linear convention.
GradTape::Var attention_on_tape(GradTape& tape, GradTape::Var x, int64_t n_heads,
                                GradTape::Var qw, GradTape::Var qb, GradTape::Var kw,
                                GradTape::Var kb, GradTape::Var vw, GradTape::Var vb,
                                GradTape::Var ow, GradTape::Var ob) {
    const int64_t d = tape.value(x).shape.back();
    const int64_t dh = d / n_heads;
    GradTape::Var q = tape.split_heads(tape.linear(x, qw, qb), n_heads);
    GradTape::Var k = tape.split_heads(tape.linear(x, kw, kb), n_heads);
    GradTape::Var v = tape.split_heads(tape.linear(x, vw, vb), n_heads);
    GradTape::Var scores =
        tape.scale(tape.bmm(q, tape.transpose_last(k)), 1.0f / std::sqrt(static_cast<float>(dh)));
    GradTape::Var att = tape.softmax(scores, -1);
    GradTape::Var ctx = tape.merge_heads(tape.bmm(att, v), n_heads);
    return tape.linear(ctx, ow, ob);
}

GradTape::Var mlp_on_tape(GradTape& tape, GradTape::Var x, GradTape::Var fc1w, GradTape::Var fc1b,
                          GradTape::Var fc2w, GradTape::Var fc2b) {
    return tape.linear(tape.gelu(tape.linear(x, fc1w, fc1b)), fc2w, fc2b);
}

namespace {

struct ForwardCapture {
    int capture_layer = -1;                       // record post-ln2 hidden of this layer
    std::optional<GradTape::Var> mlp_input;       // [B, N, d]
};

GradTape::Var forward_impl(GradTape& tape, const ParamVarMap& params, const ModelConfig& cfg,
                           const Batch& batch, const MoeOverride* moe, ForwardCapture* capture) {
    cfg.validate();
    const int64_t B = batch.inputs.shape[0];
    const int64_t N = batch.inputs.shape[1];
    if (batch.inputs.rank() != 3 || N != cfg.seq_len || batch.inputs.shape[2] != cfg.input_dim)
        throw DimensionError("forward: batch inputs " + shape_str(batch.inputs.shape) +
                             " incompatible with model config");
    if (batch.task_id < 0 || batch.task_id >= cfg.n_tasks())
        throw ConfigError("forward: task_id " + std::to_string(batch.task_id) + " out of range");

    GradTape::Var x = tape.constant(batch.inputs);
    GradTape::Var h = tape.linear(x, require_var(params, "embed.weight"),
                                  require_var(params, "embed.bias"));
    // broadcast position embedding over the batch
    {
        GradTape::Var pos = require_var(params, "embed.pos");
        std::vector<GradTape::Var> reps(static_cast<size_t>(B), pos);
        GradTape::Var pos3 = tape.stack0(reps);
        h = tape.add(h, pos3);
    }

    for (int layer = 0; layer < cfg.n_layers; ++layer) {
        if (moe) {
            auto bit = moe->block.find(layer);
            if (bit != moe->block.end()) {
                SublayerCall call{tape, h, layer, B, N};
                h = bit->second(call);
                continue;
            }
        }
        // parameters are looked up lazily: hooked sublayers own their
        // weights, so the static set may legitimately lack them
        const std::string base = "layers." + std::to_string(layer) + ".";
        GradTape::Var a_in = tape.layernorm(h, require_var(params, base + "ln1.gain"),
                                            require_var(params, base + "ln1.bias"), kLayerNormEps);
        GradTape::Var attn_out;
        const SublayerFn* attn_hook = nullptr;
        if (moe) {
            auto ait = moe->attn.find(layer);
            if (ait != moe->attn.end()) attn_hook = &ait->second;
        }
        if (attn_hook) {
            SublayerCall call{tape, a_in, layer, B, N};
            attn_out = (*attn_hook)(call);
        } else {
            attn_out = attention_on_tape(
                tape, a_in, cfg.n_heads, require_var(params, base + "attn.q.weight"),
                require_var(params, base + "attn.q.bias"),
                require_var(params, base + "attn.k.weight"),
                require_var(params, base + "attn.k.bias"),
                require_var(params, base + "attn.v.weight"),
                require_var(params, base + "attn.v.bias"),
                require_var(params, base + "attn.o.weight"),
                require_var(params, base + "attn.o.bias"));
        }
        h = tape.add(h, attn_out);

        GradTape::Var m_in = tape.layernorm(h, require_var(params, base + "ln2.gain"),
                                            require_var(params, base + "ln2.bias"), kLayerNormEps);
        if (capture && capture->capture_layer == layer) capture->mlp_input = m_in;
        GradTape::Var mlp_out;
        const SublayerFn* mlp_hook = nullptr;
        if (moe) {
            auto mit = moe->mlp.find(layer);
            if (mit != moe->mlp.end()) mlp_hook = &mit->second;
        }
        if (mlp_hook) {
            SublayerCall call{tape, m_in, layer, B, N};
            mlp_out = (*mlp_hook)(call);
        } else {
            mlp_out = mlp_on_tape(tape, m_in, require_var(params, base + "mlp.fc1.weight"),
                                  require_var(params, base + "mlp.fc1.bias"),
                                  require_var(params, base + "mlp.fc2.weight"),
                                  require_var(params, base + "mlp.fc2.bias"));
        }
        h = tape.add(h, mlp_out);
    }

    h = tape.layernorm(h, require_var(params, "final_ln.gain"),
                       require_var(params, "final_ln.bias"), kLayerNormEps);
    GradTape::Var pooled = tape.mean_axis1(h);  // [B, d]
    const std::string head = "heads." + std::to_string(batch.task_id) + ".";
    return tape.linear(pooled, require_var(params, head + "weight"),
                       require_var(params, head + "bias"));
}

}  // namespace

GradTape::Var forward_on_tape(GradTape& tape, const ParamVarMap& params, const ModelConfig& cfg,
                              const Batch& batch, const MoeOverride* moe) {
    return forward_impl(tape, params, cfg, batch, moe, nullptr);
}

Tensor forward(const NamedParamSet& params, const ModelConfig& cfg, const Batch& batch,
               const MoeOverride* moe) {
    GradTape tape;
    ParamVarMap vars;
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor t = params.tensor(i);
        t.requires_grad = false;
        vars.emplace(params.name(i), tape.leaf(std::move(t)));
    }
    return tape.value(forward_impl(tape, vars, cfg, batch, moe, nullptr));
}

Tensor token_sequence_hidden(const NamedParamSet& params, const ModelConfig& cfg,
                             const Batch& batch, int layer_index) {
    if (layer_index < 0 || layer_index >= cfg.n_layers)
        throw DimensionError("token_sequence_hidden: layer index " + std::to_string(layer_index) +
                             " out of range [0," + std::to_string(cfg.n_layers) + ")");
    GradTape tape;
    ParamVarMap vars;
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor t = params.tensor(i);
        t.requires_grad = false;
        vars.emplace(params.name(i), tape.leaf(std::move(t)));
    }
    ForwardCapture capture;
    capture.capture_layer = layer_index;
    forward_impl(tape, vars, cfg, batch, nullptr, &capture);
    return tape.value(*capture.mlp_input);
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2 || logits.shape[0] != static_cast<int64_t>(labels.size()))
        throw DimensionError("accuracy: logits " + shape_str(logits.shape) + " vs " +
                             std::to_string(labels.size()) + " labels");
    const int64_t B = logits.shape[0], C = logits.shape[1];
    int64_t hits = 0;
    for (int64_t b = 0; b < B; ++b) {
        int best = 0;
        for (int64_t c = 1; c < C; ++c)
            if (logits.at2(b, c) > logits.at2(b, best)) best = static_cast<int>(c);
        if (best == labels[static_cast<size_t>(b)]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(B);
}

}  // namespace wemoe
