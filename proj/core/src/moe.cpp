#include "wemoe/moe.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstring>

namespace wemoe {

SiteScope parse_site_scope(std::string_view name) {
    if (name == "mlp") return SiteScope::mlp_only;
    if (name == "attn-mlp") return SiteScope::attn_and_mlp_separate;
    if (name == "block") return SiteScope::whole_block;
    throw ConfigError("unknown up-scaling scope '" + std::string(name) +
                      "' (expected mlp | attn-mlp | block)");
}

std::string site_scope_name(SiteScope s) {
    switch (s) {
        case SiteScope::mlp_only: return "mlp";
        case SiteScope::attn_and_mlp_separate: return "attn-mlp";
        case SiteScope::whole_block: return "block";
    }
    return "?";
}

// ---- router ----------------------------------------------------------------------

int64_t router_param_count(int depth, int64_t d, int64_t hidden, int64_t n_tasks) {
    switch (depth) {
        case 0: return n_tasks;
        case 1: return n_tasks * d + n_tasks;
        case 2: return d * hidden + hidden + n_tasks * hidden + n_tasks;
        default: throw ConfigError("router depth must be 0, 1 or 2");
    }
}

int64_t trainable_count_formula(int64_t n_sites, int depth, int64_t d, int64_t hidden,
                                int64_t n_tasks) {
    return n_sites * router_param_count(depth, d, hidden, n_tasks);
}

Router make_router(int depth, int64_t d_in, int64_t hidden, int64_t n_tasks) {
    if (depth < 0 || depth > 2) throw ConfigError("router depth must be 0, 1 or 2");
    Router r;
    r.depth = depth;
    r.d_in = d_in;
    r.hidden = hidden;
    r.n_tasks = n_tasks;
    if (depth == 0) {
        r.b0 = Tensor::zeros({n_tasks});
        r.b0.requires_grad = true;
    } else if (depth == 1) {
        r.w1 = Tensor::zeros({n_tasks, d_in});
        r.b1 = Tensor::zeros({n_tasks});
        r.w1.requires_grad = r.b1.requires_grad = true;
    } else {
        r.w1 = Tensor::zeros({hidden, d_in});
        r.b1 = Tensor::zeros({hidden});
        r.w2 = Tensor::zeros({n_tasks, hidden});
        r.b2 = Tensor::zeros({n_tasks});
        r.w1.requires_grad = r.b1.requires_grad = true;
        r.w2.requires_grad = r.b2.requires_grad = true;
    }
    return r;
}

void init_router(Router& r, float lambda, Rng& rng, float init_stddev) {
    if (r.depth == 0) {
        for (float& v : r.b0.data) v = lambda;
    } else if (r.depth == 1) {
        rng.fill_normal(r.w1.data, 0.0f, init_stddev);
        for (float& v : r.b1.data) v = lambda;
    } else {
        rng.fill_normal(r.w1.data, 0.0f, init_stddev);
        for (float& v : r.b1.data) v = 0.0f;
        rng.fill_normal(r.w2.data, 0.0f, init_stddev);
        for (float& v : r.b2.data) v = lambda;
    }
}

int64_t Router::param_count() const { return router_param_count(depth, d_in, hidden, n_tasks); }

std::vector<Tensor*> Router::params() {
    switch (depth) {
        case 0: return {&b0};
        case 1: return {&w1, &b1};
        default: return {&w1, &b1, &w2, &b2};
    }
}

std::vector<std::pair<std::string, Tensor*>> Router::named_params() {
    switch (depth) {
        case 0: return {{"b0", &b0}};
        case 1: return {{"w1", &w1}, {"b1", &b1}};
        default: return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
    }
}

std::vector<std::pair<std::string, const Tensor*>> Router::named_params() const {
    switch (depth) {
        case 0: return {{"b0", &b0}};
        case 1: return {{"w1", &w1}, {"b1", &b1}};
        default: return {{"w1", &w1}, {"b1", &b1}, {"w2", &w2}, {"b2", &b2}};
    }
}

namespace {

struct RouterVars {
    int depth = 2;
    GradTape::Var w1 = -1, b1 = -1, w2 = -1, b2 = -1, b0 = -1;
};

RouterVars router_on_tape(GradTape& tape, const Router& r) {
    RouterVars v;
    v.depth = r.depth;
    if (r.depth == 0) {
        v.b0 = tape.leaf(r.b0);
    } else if (r.depth == 1) {
        v.w1 = tape.leaf(r.w1);
        v.b1 = tape.leaf(r.b1);
    } else {
        v.w1 = tape.leaf(r.w1);
        v.b1 = tape.leaf(r.b1);
        v.w2 = tape.leaf(r.w2);
        v.b2 = tape.leaf(r.b2);
    }
    return v;
}

// w_b = mean over tokens of r(h_{b,n}); unconstrained reals, no softmax.
GradTape::Var route_on_tape(GradTape& tape, const RouterVars& rv, GradTape::Var hidden,
                            int64_t batch) {
    if (rv.depth == 0) {
        std::vector<GradTape::Var> reps(static_cast<size_t>(batch), rv.b0);
        return tape.stack0(reps);  // [B,T]
    }
    GradTape::Var z;
    if (rv.depth == 1) {
        z = tape.linear(hidden, rv.w1, rv.b1);  // [B,N,T]
    } else {
        GradTape::Var h1 = tape.relu(tape.linear(hidden, rv.w1, rv.b1));
        z = tape.linear(h1, rv.w2, rv.b2);
    }
    return tape.mean_axis1(z);  // [B,T]
}

GradTape::Var site_var(GradTape& tape, const WEMoESite& site,
                       const std::vector<GradTape::Var>& entry_vars, const std::string& suffix) {
    const std::string name = "layers." + std::to_string(site.layer) + "." + suffix;
    return entry_vars[site.theta0_site.index_of(name)];
}

// One batch row through the site's sublayer with materialized weights.
GradTape::Var site_apply_row(GradTape& tape, const WEMoESite& site, GradTape::Var xb,
                             GradTape::Var wb) {
    // materialize every site tensor as theta0 + D_tau * w (affine in w)
    std::vector<GradTape::Var> vars(site.theta0_site.size());
    for (size_t k = 0; k < site.theta0_site.size(); ++k) {
        std::vector<const Tensor*> deltas;
        deltas.reserve(site.dict.columns[k].size());
        for (const Tensor& col : site.dict.columns[k]) deltas.push_back(&col);
        vars[k] = tape.dict_combine(wb, site.theta0_site.tensor(k), deltas);
    }
    auto sv = [&](const std::string& suffix) { return site_var(tape, site, vars, suffix); };

    const int64_t N = tape.value(xb).shape[0];
    const int64_t d = tape.value(xb).shape[1];
    auto attn_row = [&](GradTape::Var x) {
        GradTape::Var x3 = tape.reshape(x, {1, N, d});
        GradTape::Var out = attention_on_tape(
            tape, x3, site.n_heads, sv("attn.q.weight"), sv("attn.q.bias"), sv("attn.k.weight"),
            sv("attn.k.bias"), sv("attn.v.weight"), sv("attn.v.bias"), sv("attn.o.weight"),
            sv("attn.o.bias"));
        return tape.reshape(out, {N, d});
    };

    switch (site.part) {
        case SitePart::mlp:
            return mlp_on_tape(tape, xb, sv("mlp.fc1.weight"), sv("mlp.fc1.bias"),
                               sv("mlp.fc2.weight"), sv("mlp.fc2.bias"));
        case SitePart::attn:
            return attn_row(xb);
        case SitePart::block: {
            // the hook owns the whole block: both LayerNorms and residuals
            GradTape::Var a_in = tape.layernorm(xb, sv("ln1.gain"), sv("ln1.bias"), kLayerNormEps);
            GradTape::Var u = tape.add(xb, attn_row(a_in));
            GradTape::Var m_in = tape.layernorm(u, sv("ln2.gain"), sv("ln2.bias"), kLayerNormEps);
            GradTape::Var m = mlp_on_tape(tape, m_in, sv("mlp.fc1.weight"), sv("mlp.fc1.bias"),
                                          sv("mlp.fc2.weight"), sv("mlp.fc2.bias"));
            return tape.add(u, m);
        }
    }
    throw ContractError("unreachable site part");
}

GradTape::Var site_forward_on_tape(GradTape& tape, const WEMoESite& site, const RouterVars& rv,
                                   GradTape::Var hidden, const Tensor* forced_w,
                                   Tensor* routing_out) {
    const int64_t B = tape.value(hidden).shape[0];
    GradTape::Var w;
    if (forced_w) {
        if (forced_w->rank() != 1 || forced_w->shape[0] != site.router.n_tasks)
            throw DimensionError("forced routing weights " + shape_str(forced_w->shape) +
                                 " do not match task count " +
                                 std::to_string(site.router.n_tasks));
        GradTape::Var one = tape.constant(*forced_w);
        std::vector<GradTape::Var> reps(static_cast<size_t>(B), one);
        w = tape.stack0(reps);
    } else {
        w = route_on_tape(tape, rv, hidden, B);
    }
    if (routing_out) *routing_out = tape.value(w);

    std::vector<GradTape::Var> rows;
    rows.reserve(static_cast<size_t>(B));
    for (int64_t b = 0; b < B; ++b)
        rows.push_back(site_apply_row(tape, site, tape.row(hidden, b), tape.row(w, b)));
    return tape.stack0(rows);
}

}  // namespace

Tensor route(const Router& router, const Tensor& hidden) {
    if (hidden.rank() != 3 || hidden.shape[2] != router.d_in)
        throw DimensionError("route: hidden " + shape_str(hidden.shape) +
                             " incompatible with router input width " +
                             std::to_string(router.d_in));
    GradTape tape;
    RouterVars rv = router_on_tape(tape, router);
    return tape.value(route_on_tape(tape, rv, tape.constant(hidden), hidden.shape[0]));
}

Tensor moe_forward(const WEMoESite& site, const Tensor& hidden) {
    GradTape tape;
    RouterVars rv = router_on_tape(tape, site.router);
    return tape.value(site_forward_on_tape(tape, site, rv, tape.constant(hidden), nullptr, nullptr));
}

Tensor moe_forward_forced(const WEMoESite& site, const Tensor& hidden, const Tensor& w) {
    GradTape tape;
    RouterVars rv{};
    return tape.value(site_forward_on_tape(tape, site, rv, tape.constant(hidden), &w, nullptr));
}

// ---- upscale ----------------------------------------------------------------------

namespace {

bool site_owns(SiteScope scope, const std::string& name, int* layer, SitePart* part) {
    if (name.rfind("layers.", 0) != 0) return false;
    size_t dot = name.find('.', 7);
    int l = std::stoi(name.substr(7, dot - 7));
    std::string rest = name.substr(dot + 1);
    switch (scope) {
        case SiteScope::mlp_only:
            if (rest.rfind("mlp.", 0) == 0) {
                *layer = l;
                *part = SitePart::mlp;
                return true;
            }
            return false;
        case SiteScope::attn_and_mlp_separate:
            if (rest.rfind("mlp.", 0) == 0) {
                *layer = l;
                *part = SitePart::mlp;
                return true;
            }
            if (rest.rfind("attn.", 0) == 0) {
                *layer = l;
                *part = SitePart::attn;
                return true;
            }
            return false;
        case SiteScope::whole_block:
            // LayerNorms ride along with their block
            *layer = l;
            *part = SitePart::block;
            return true;
    }
    return false;
}

std::string part_name(SitePart p) {
    switch (p) {
        case SitePart::attn: return "attn";
        case SitePart::mlp: return "mlp";
        case SitePart::block: return "block";
    }
    return "?";
}

SitePart parse_part(std::string_view s) {
    if (s == "attn") return SitePart::attn;
    if (s == "mlp") return SitePart::mlp;
    if (s == "block") return SitePart::block;
    throw FormatError("unknown site part '" + std::string(s) + "'");
}

}  // namespace

UpscaledModel upscale(const NamedParamSet& theta0, std::span<const NamedParamSet> finetuned,
                      float lambda, SiteScope scope, int router_depth, int64_t router_hidden,
                      const ModelConfig& cfg, uint64_t seed) {
    if (finetuned.empty()) throw ConfigError("upscale: need at least one fine-tuned model");
    for (const NamedParamSet& m : finetuned) require_congruent(theta0, m, "upscale");
    const int64_t T = static_cast<int64_t>(finetuned.size());
    if (router_hidden <= 0) router_hidden = cfg.d_model;

    std::vector<TaskVector> taus;
    taus.reserve(finetuned.size());
    for (const NamedParamSet& m : finetuned) taus.push_back(task_vector(m, theta0));

    UpscaledModel model;
    model.cfg = cfg;
    model.scope = scope;
    model.lambda = lambda;
    model.router_depth = router_depth;
    model.router_hidden = router_hidden;
    model.n_tasks = T;

    // the merged remainder: task arithmetic on everything, site names dropped
    NamedParamSet merged = task_arithmetic(theta0, taus, lambda);

    std::vector<std::pair<int, SitePart>> site_keys;  // in first-seen order
    auto site_index = [&](int layer, SitePart part) -> size_t {
        for (size_t i = 0; i < site_keys.size(); ++i)
            if (site_keys[i].first == layer && site_keys[i].second == part) return i;
        site_keys.emplace_back(layer, part);
        model.sites.emplace_back();
        WEMoESite& s = model.sites.back();
        s.layer = layer;
        s.part = part;
        s.id = "layers." + std::to_string(layer) + "." + part_name(part);
        s.n_heads = cfg.n_heads;
        return site_keys.size() - 1;
    };

    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        if (is_head_name(name)) continue;
        int layer;
        SitePart part;
        if (site_owns(scope, name, &layer, &part)) {
            WEMoESite& s = model.sites[site_index(layer, part)];
            Tensor frozen = theta0.tensor(k);
            frozen.requires_grad = false;
            s.theta0_site.add(name, std::move(frozen));
            std::vector<Tensor> cols;
            cols.reserve(static_cast<size_t>(T));
            for (const TaskVector& tau : taus) cols.push_back(tau.entries.at(name));
            s.dict.columns.push_back(std::move(cols));
        } else {
            model.static_params.add(name, merged.at(name));
        }
    }
    // per-task heads, frozen
    {
        NamedParamSet with_heads = attach_heads(model.static_params, finetuned);
        model.static_params = std::move(with_heads);
    }

    for (size_t i = 0; i < model.sites.size(); ++i) {
        WEMoESite& s = model.sites[i];
        s.router = make_router(router_depth, cfg.d_model, router_hidden, T);
        Rng rng(derive_seed(seed, "router", i));
        init_router(s.router, lambda, rng);
    }
    return model;
}

std::vector<Tensor*> UpscaledModel::trainable_params() {
    std::vector<Tensor*> out;
    for (WEMoESite& s : sites)
        for (Tensor* t : s.router.params()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> UpscaledModel::named_trainable() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (WEMoESite& s : sites)
        for (auto& [n, t] : s.router.named_params()) out.emplace_back(s.id + ".router." + n, t);
    return out;
}

int64_t UpscaledModel::trainable_count() const {
    int64_t n = 0;
    for (const WEMoESite& s : sites) n += s.router.param_count();
    return n;
}

GradTape::Var UpscaledModel::forward_logits(GradTape& tape, const Batch& batch,
                                            const Tensor* forced_w,
                                            std::vector<Tensor>* routing_out) const {
    ParamVarMap vars;
    for (size_t k = 0; k < static_params.size(); ++k)
        vars.emplace(static_params.name(k), tape.constant(static_params.tensor(k)));

    if (routing_out) routing_out->assign(sites.size(), Tensor());

    MoeOverride moe;
    for (size_t si = 0; si < sites.size(); ++si) {
        const WEMoESite& site = sites[si];
        RouterVars rv = router_on_tape(tape, site.router);
        SublayerFn fn = [this, si, rv, forced_w, routing_out](const SublayerCall& call) {
            const WEMoESite& s = sites[si];
            Tensor* rout = routing_out ? &(*routing_out)[si] : nullptr;
            return site_forward_on_tape(call.tape, s, rv, call.input, forced_w, rout);
        };
        switch (site.part) {
            case SitePart::attn: moe.attn[site.layer] = std::move(fn); break;
            case SitePart::mlp: moe.mlp[site.layer] = std::move(fn); break;
            case SitePart::block: moe.block[site.layer] = std::move(fn); break;
        }
    }
    return forward_on_tape(tape, vars, cfg, batch, &moe);
}

Tensor UpscaledModel::forward(const Batch& batch, const Tensor* forced_w) const {
    GradTape tape;
    return tape.value(forward_logits(tape, batch, forced_w));
}

std::vector<Tensor> UpscaledModel::routing_weights(const Batch& batch) const {
    GradTape tape;
    std::vector<Tensor> out;
    forward_logits(tape, batch, nullptr, &out);
    return out;
}

// ---- persistence --------------------------------------------------------------------

namespace {

std::string float_token(float v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", static_cast<double>(v));
    return buf;
}

float parse_float_token(const std::string& s) { return std::strtof(s.c_str(), nullptr); }

}  // namespace

std::string encode_upscaled(const UpscaledModel& model, CheckpointMeta meta) {
    meta.set("kind", "upscaled");
    meta.set("scope", site_scope_name(model.scope));
    meta.set("lambda", float_token(model.lambda));
    meta.set("router_depth", std::to_string(model.router_depth));
    meta.set("router_hidden", std::to_string(model.router_hidden));
    meta.set("n_tasks", std::to_string(model.n_tasks));
    meta.set("n_sites", std::to_string(model.sites.size()));
    meta.set("cfg.d_model", std::to_string(model.cfg.d_model));
    meta.set("cfg.n_layers", std::to_string(model.cfg.n_layers));
    meta.set("cfg.n_heads", std::to_string(model.cfg.n_heads));
    meta.set("cfg.d_ff", std::to_string(model.cfg.d_ff));
    meta.set("cfg.seq_len", std::to_string(model.cfg.seq_len));
    meta.set("cfg.input_dim", std::to_string(model.cfg.input_dim));
    std::string classes;
    for (size_t i = 0; i < model.cfg.n_classes.size(); ++i) {
        if (i) classes += ",";
        classes += std::to_string(model.cfg.n_classes[i]);
    }
    meta.set("cfg.n_classes", classes);
    for (size_t i = 0; i < model.sites.size(); ++i) {
        const WEMoESite& s = model.sites[i];
        const std::string base = "site." + std::to_string(i) + ".";
        meta.set(base + "id", s.id);
        meta.set(base + "layer", std::to_string(s.layer));
        meta.set(base + "part", part_name(s.part));
        meta.set(base + "n_heads", std::to_string(s.n_heads));
    }

    NamedParamSet flat;
    for (size_t k = 0; k < model.static_params.size(); ++k)
        flat.add("static." + model.static_params.name(k), model.static_params.tensor(k));
    for (size_t i = 0; i < model.sites.size(); ++i) {
        const WEMoESite& s = model.sites[i];
        const std::string base = "sites." + std::to_string(i) + ".";
        for (size_t k = 0; k < s.theta0_site.size(); ++k) {
            flat.add(base + "theta0." + s.theta0_site.name(k), s.theta0_site.tensor(k));
            for (size_t t = 0; t < s.dict.columns[k].size(); ++t)
                flat.add(base + "tau." + std::to_string(t) + "." + s.theta0_site.name(k),
                         s.dict.columns[k][t]);
        }
        for (auto& [n, ptr] : s.router.named_params())
            flat.add(base + "router." + n, *ptr);
    }
    return encode_checkpoint(flat, meta);
}

UpscaledModel decode_upscaled(std::string_view bytes) {
    auto [flat, meta] = decode_checkpoint(bytes);
    if (meta.get("kind") != std::string("upscaled"))
        throw FormatError("checkpoint does not contain an up-scaled model");
    auto need = [&](const char* key) -> std::string {
        auto v = meta.get(key);
        if (!v) throw FormatError(std::string("upscaled checkpoint missing meta '") + key + "'");
        return *v;
    };

    UpscaledModel m;
    m.scope = parse_site_scope(need("scope"));
    m.lambda = parse_float_token(need("lambda"));
    m.router_depth = std::stoi(need("router_depth"));
    m.router_hidden = std::stoll(need("router_hidden"));
    m.n_tasks = std::stoll(need("n_tasks"));
    m.cfg.d_model = std::stoll(need("cfg.d_model"));
    m.cfg.n_layers = std::stoll(need("cfg.n_layers"));
    m.cfg.n_heads = std::stoll(need("cfg.n_heads"));
    m.cfg.d_ff = std::stoll(need("cfg.d_ff"));
    m.cfg.seq_len = std::stoll(need("cfg.seq_len"));
    m.cfg.input_dim = std::stoll(need("cfg.input_dim"));
    {
        std::string classes = need("cfg.n_classes");
        size_t pos = 0;
        while (pos < classes.size()) {
            size_t next = classes.find(',', pos);
            if (next == std::string::npos) next = classes.size();
            m.cfg.n_classes.push_back(std::stoll(classes.substr(pos, next - pos)));
            pos = next + 1;
        }
    }
    const size_t n_sites = std::stoul(need("n_sites"));
    m.sites.resize(n_sites);
    for (size_t i = 0; i < n_sites; ++i) {
        const std::string base = "site." + std::to_string(i) + ".";
        WEMoESite& s = m.sites[i];
        s.id = need((base + "id").c_str());
        s.layer = std::stoi(need((base + "layer").c_str()));
        s.part = parse_part(need((base + "part").c_str()));
        s.n_heads = std::stoll(need((base + "n_heads").c_str()));
        s.router = make_router(m.router_depth, m.cfg.d_model, m.router_hidden, m.n_tasks);
    }

    for (size_t k = 0; k < flat.size(); ++k) {
        const std::string& name = flat.name(k);
        if (name.rfind("static.", 0) == 0) {
            m.static_params.add(name.substr(7), flat.tensor(k));
        } else if (name.rfind("sites.", 0) == 0) {
            size_t dot = name.find('.', 6);
            size_t si = std::stoul(name.substr(6, dot - 6));
            if (si >= m.sites.size())
                throw IntegrityError("site index out of range in '" + name + "'");
            WEMoESite& s = m.sites[si];
            std::string rest = name.substr(dot + 1);
            if (rest.rfind("theta0.", 0) == 0) {
                s.theta0_site.add(rest.substr(7), flat.tensor(k));
                s.dict.columns.emplace_back();
            } else if (rest.rfind("tau.", 0) == 0) {
                size_t dot2 = rest.find('.', 4);
                size_t task = std::stoul(rest.substr(4, dot2 - 4));
                std::string pname = rest.substr(dot2 + 1);
                size_t entry = s.theta0_site.index_of(pname);
                if (task != s.dict.columns[entry].size())
                    throw IntegrityError("task vector columns out of order at '" + name + "'");
                s.dict.columns[entry].push_back(flat.tensor(k));
            } else if (rest.rfind("router.", 0) == 0) {
                std::string pname = rest.substr(7);
                bool found = false;
                for (auto& [n, ptr] : s.router.named_params())
                    if (n == pname) {
                        Tensor t = flat.tensor(k);
                        if (t.shape != ptr->shape)
                            throw IntegrityError("router tensor shape mismatch at '" + name + "'");
                        t.requires_grad = true;
                        *ptr = std::move(t);
                        found = true;
                    }
                if (!found) throw FormatError("unknown router tensor '" + name + "'");
            } else {
                throw FormatError("unknown site entry '" + name + "'");
            }
        } else {
            throw FormatError("unknown entry '" + name + "' in upscaled checkpoint");
        }
    }
    return m;
}

void save_upscaled(const std::string& path, const UpscaledModel& model, CheckpointMeta meta) {
    std::string bytes = encode_upscaled(model, std::move(meta));
    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw Error("cannot open '" + path + "' for writing");
    size_t written = std::fwrite(bytes.data(), 1, bytes.size(), f);
    std::fclose(f);
    if (written != bytes.size()) throw Error("write failed for '" + path + "'");
}

UpscaledModel load_upscaled(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw MissingArtifactError("cannot open checkpoint '" + path + "'");
    std::string bytes;
    char buf[65536];
    size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) bytes.append(buf, n);
    std::fclose(f);
    return decode_upscaled(bytes);
}

}  // namespace wemoe
