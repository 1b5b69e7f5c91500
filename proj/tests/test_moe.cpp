#include <cmath>
#include <set>

#include "doctest.h"
#include "wemoe/moe.hpp"
#include "wemoe/rng.hpp"

using namespace wemoe;
using Var = GradTape::Var;

namespace {

ModelConfig desk_cfg(int64_t layers = 2) {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = layers;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.seq_len = 4;
    cfg.input_dim = 6;
    cfg.n_classes = {3, 3, 2};
    return cfg;
}

NamedParamSet perturbed(const NamedParamSet& base, uint64_t seed, float stddev) {
    Rng rng(seed);
    NamedParamSet out;
    for (size_t i = 0; i < base.size(); ++i) {
        Tensor t = base.tensor(i);
        for (float& v : t.data) v += static_cast<float>(rng.normal(0.0, stddev));
        out.add(base.name(i), std::move(t));
    }
    return out;
}

struct Fixture {
    ModelConfig cfg;
    NamedParamSet theta0;
    std::vector<NamedParamSet> finetuned;

    explicit Fixture(uint64_t seed = 200, int64_t layers = 2) : cfg(desk_cfg(layers)) {
        theta0 = init_params(cfg, seed);
        for (uint64_t t = 0; t < 3; ++t)
            finetuned.push_back(perturbed(theta0, seed + 1 + t, 0.15f));
    }
};

Batch random_batch(const ModelConfig& cfg, int64_t B, uint64_t seed, int task = 0) {
    Rng rng(seed);
    Batch b;
    b.inputs = Tensor::zeros({B, cfg.seq_len, cfg.input_dim});
    rng.fill_normal(b.inputs.data, 0.0f, 1.0f);
    b.task_id = task;
    return b;
}

void zero_router_linear(Router& r, float lambda) {
    if (r.depth >= 1)
        for (float& v : r.w1.data) v = 0.0f;
    if (r.depth == 1)
        for (float& v : r.b1.data) v = lambda;
    if (r.depth == 2) {
        for (float& v : r.b1.data) v = 0.0f;
        for (float& v : r.w2.data) v = 0.0f;
        for (float& v : r.b2.data) v = lambda;
    }
    if (r.depth == 0)
        for (float& v : r.b0.data) v = lambda;
}

}  // namespace

TEST_CASE("trainable counts reproduce the published parameter table") {
    // l = 0 rows
    CHECK(trainable_count_formula(12, 0, 768, 768, 8) == 96);
    CHECK(trainable_count_formula(24, 0, 1024, 1024, 8) == 192);
    // l = 2 rows, router hidden width = embedding width
    CHECK(trainable_count_formula(12, 2, 768, 768, 8) == 7160928);
    CHECK(trainable_count_formula(24, 2, 1024, 1024, 8) == 25387200);
    // two-task variant
    CHECK(trainable_count_formula(12, 2, 768, 768, 2) == 7105560);
    // l = 1 on the base model: 73.8K
    CHECK(trainable_count_formula(12, 1, 768, 768, 8) == 73824);
}

TEST_CASE("upscale produces expected site layout and counts on constructed models") {
    Fixture fx(210, 12);
    UpscaledModel m = upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::mlp_only, 0, 0, fx.cfg, 1);
    CHECK(m.sites.size() == 12);
    CHECK(m.trainable_count() == 36);  // 12 sites x 3 tasks at l=0

    // l=0 count is d-independent: 12 sites x 8 tasks gives the 96 of the table
    CHECK(trainable_count_formula(static_cast<int64_t>(m.sites.size()), 0, fx.cfg.d_model,
                                  fx.cfg.d_model, 8) == 96);

    // brute force against the closed form for l=2
    UpscaledModel m2 = upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::mlp_only, 2, 0, fx.cfg, 1);
    int64_t brute = 0;
    for (Tensor* t : m2.trainable_params()) brute += t->numel();
    CHECK(brute == m2.trainable_count());
    CHECK(brute == trainable_count_formula(12, 2, 8, 8, 3));
}

TEST_CASE("partition property holds for every scope") {
    Fixture fx;
    for (SiteScope scope :
         {SiteScope::mlp_only, SiteScope::attn_and_mlp_separate, SiteScope::whole_block}) {
        UpscaledModel m = upscale(fx.theta0, fx.finetuned, 0.3f, scope, 2, 0, fx.cfg, 2);
        std::set<std::string> seen;
        for (size_t k = 0; k < m.static_params.size(); ++k) {
            if (is_head_name(m.static_params.name(k))) continue;
            CHECK(seen.insert(m.static_params.name(k)).second);
        }
        for (const WEMoESite& s : m.sites)
            for (size_t k = 0; k < s.theta0_site.size(); ++k)
                CHECK(seen.insert(s.theta0_site.name(k)).second);
        std::set<std::string> all;
        for (const std::string& n : fx.theta0.encoder_names()) all.insert(n);
        CHECK(seen == all);

        const size_t expected_sites = scope == SiteScope::attn_and_mlp_separate
                                          ? 2 * static_cast<size_t>(fx.cfg.n_layers)
                                          : static_cast<size_t>(fx.cfg.n_layers);
        CHECK(m.sites.size() == expected_sites);
    }
}

TEST_CASE("init_router gives constant lambda routing") {
    Rng rng(220);
    SUBCASE("depth 0 routes lambda for any input") {
        Router r = make_router(0, 8, 8, 3);
        init_router(r, 0.3f, rng);
        Tensor h = Tensor::zeros({2, 4, 8});
        Rng hr(221);
        hr.fill_normal(h.data, 0.0f, 2.0f);
        Tensor w = route(r, h);
        for (float v : w.data) CHECK(v == 0.3f);
    }
    SUBCASE("depth 2 with zero linear weights collapses to the bias") {
        Router r = make_router(2, 8, 8, 3);
        init_router(r, 0.3f, rng);
        zero_router_linear(r, 0.3f);
        Tensor h = Tensor::zeros({2, 4, 8});
        Rng hr(222);
        hr.fill_normal(h.data, 0.0f, 2.0f);
        Tensor w = route(r, h);
        for (float v : w.data) CHECK(v == 0.3f);
    }
    SUBCASE("sampled init routes near lambda on average") {
        // Monte-Carlo over the init distribution: many sampled routers, a few
        // random tokens each
        Rng mc(223);
        double acc = 0.0;
        int64_t count = 0;
        for (int rep = 0; rep < 50; ++rep) {
            Router r = make_router(2, 32, 32, 4);
            init_router(r, 0.3f, mc);
            Tensor h = Tensor::zeros({20, 1, 32});
            mc.fill_normal(h.data, 0.0f, 1.0f);
            Tensor w = route(r, h);
            for (float v : w.data) {
                acc += v;
                ++count;
            }
        }
        const double mean = acc / static_cast<double>(count);
        CHECK(std::abs(mean - 0.3) <= 0.05);
    }
}

TEST_CASE("route semantics") {
    Rng rng(230);
    Router r = make_router(2, 8, 8, 3);
    init_router(r, 0.3f, rng);

    SUBCASE("identical tokens give the per-token routing value") {
        Tensor one_tok = Tensor::zeros({1, 1, 8});
        Rng hr(231);
        hr.fill_normal(one_tok.data, 0.0f, 1.0f);
        Tensor rep = Tensor::zeros({1, 5, 8});
        for (int64_t n = 0; n < 5; ++n)
            for (int64_t j = 0; j < 8; ++j)
                rep.data[static_cast<size_t>(n * 8 + j)] = one_tok.data[static_cast<size_t>(j)];
        Tensor w1 = route(r, one_tok);
        Tensor w5 = route(r, rep);
        CHECK(max_abs_diff(w1, w5) <= 1e-6f);
    }

    SUBCASE("token order does not matter") {
        Tensor h = Tensor::zeros({1, 4, 8});
        Rng hr(232);
        hr.fill_normal(h.data, 0.0f, 1.0f);
        Tensor hp = h;
        const int perm[4] = {2, 0, 3, 1};
        for (int64_t n = 0; n < 4; ++n)
            for (int64_t j = 0; j < 8; ++j)
                hp.data[static_cast<size_t>(n * 8 + j)] = h.data[static_cast<size_t>(perm[n] * 8 + j)];
        CHECK(max_abs_diff(route(r, h), route(r, hp)) <= 1e-6f);
    }

    SUBCASE("depth 1 hand-computed case") {
        Router r1 = make_router(1, 4, 4, 2);
        // w1 row t = t+1 everywhere, bias zero
        for (int64_t t = 0; t < 2; ++t)
            for (int64_t j = 0; j < 4; ++j) r1.w1.at2(t, j) = static_cast<float>(t + 1);
        for (float& v : r1.b1.data) v = 0.0f;
        // two tokens: e0 and e1 -> r(e0) = r(e1) = (1, 2); mean = (1, 2)
        Tensor h = Tensor::zeros({1, 2, 4});
        h.data[0] = 1.0f;
        h.data[5] = 1.0f;
        Tensor w = route(r1, h);
        CHECK(w.data[0] == doctest::Approx(1.0f));
        CHECK(w.data[1] == doctest::Approx(2.0f));
    }

    SUBCASE("different rows get different weights") {
        Tensor h = Tensor::zeros({2, 4, 8});
        Rng hr(233);
        hr.fill_normal(h.data, 0.0f, 1.0f);
        Tensor w = route(r, h);
        bool differs = false;
        for (int64_t t = 0; t < 3; ++t)
            if (std::abs(w.at2(0, t) - w.at2(1, t)) > 1e-6f) differs = true;
        CHECK(differs);
    }
}

TEST_CASE("moe_forward weight forcing trio") {
    Fixture fx(240);
    UpscaledModel m =
        upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::mlp_only, 2, 0, fx.cfg, 3);
    const WEMoESite& site = m.sites[0];

    Tensor hidden = Tensor::zeros({2, fx.cfg.seq_len, fx.cfg.d_model});
    Rng rng(241);
    rng.fill_normal(hidden.data, 0.0f, 1.0f);

    auto plain_mlp = [&](const NamedParamSet& params) {
        GradTape t;
        const std::string base = "layers.0.mlp.";
        return t.value(mlp_on_tape(t, t.constant(hidden), t.constant(params.at(base + "fc1.weight")),
                                   t.constant(params.at(base + "fc1.bias")),
                                   t.constant(params.at(base + "fc2.weight")),
                                   t.constant(params.at(base + "fc2.bias"))));
    };

    SUBCASE("zero weights reproduce the pretrained sublayer") {
        Tensor w = Tensor::zeros({3});
        Tensor got = moe_forward_forced(site, hidden, w);
        CHECK(max_abs_diff(got, plain_mlp(fx.theta0)) == 0.0f);
    }
    SUBCASE("one-hot weights reproduce each fine-tuned sublayer") {
        for (int i = 0; i < 3; ++i) {
            Tensor w = Tensor::zeros({3});
            w.data[static_cast<size_t>(i)] = 1.0f;
            Tensor got = moe_forward_forced(site, hidden, w);
            CHECK(max_abs_diff(got, plain_mlp(fx.finetuned[static_cast<size_t>(i)])) <= 1e-6f);
        }
    }
    SUBCASE("lambda-constant weights reproduce the task-arithmetic sublayer") {
        std::vector<TaskVector> taus;
        for (const auto& f : fx.finetuned) taus.push_back(task_vector(f, fx.theta0));
        NamedParamSet merged = task_arithmetic(fx.theta0, taus, 0.3f);
        Tensor w = Tensor::full({3}, 0.3f);
        Tensor got = moe_forward_forced(site, hidden, w);
        CHECK(max_abs_diff(got, plain_mlp(merged)) == 0.0f);
    }
}

TEST_CASE("materialized site weights are affine in the routing vector") {
    Fixture fx(250);
    UpscaledModel m =
        upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::mlp_only, 2, 0, fx.cfg, 4);
    const WEMoESite& site = m.sites[1];

    Rng rng(251);
    Tensor w1 = Tensor::zeros({3});
    Tensor w2 = Tensor::zeros({3});
    rng.fill_normal(w1.data, 0.0f, 1.0f);
    rng.fill_normal(w2.data, 0.0f, 1.0f);
    const float alpha = 0.37f;
    Tensor wm = Tensor::zeros({3});
    for (size_t i = 0; i < 3; ++i) wm.data[i] = alpha * w1.data[i] + (1 - alpha) * w2.data[i];

    for (size_t k = 0; k < site.theta0_site.size(); ++k) {
        std::vector<const Tensor*> deltas;
        for (const Tensor& c : site.dict.columns[k]) deltas.push_back(&c);
        GradTape t;
        Tensor a = t.value(t.dict_combine(t.constant(w1), site.theta0_site.tensor(k), deltas));
        Tensor b = t.value(t.dict_combine(t.constant(w2), site.theta0_site.tensor(k), deltas));
        Tensor mix = t.value(t.dict_combine(t.constant(wm), site.theta0_site.tensor(k), deltas));
        for (size_t j = 0; j < mix.data.size(); ++j)
            CHECK(std::abs(mix.data[j] - (alpha * a.data[j] + (1 - alpha) * b.data[j])) <= 1e-5f);
    }
}

TEST_CASE("init equivalence: zeroed routers match task arithmetic logits") {
    Fixture fx(260);
    std::vector<TaskVector> taus;
    for (const auto& f : fx.finetuned) taus.push_back(task_vector(f, fx.theta0));
    NamedParamSet merged = attach_heads(task_arithmetic(fx.theta0, taus, 0.3f), fx.finetuned);

    for (SiteScope scope :
         {SiteScope::mlp_only, SiteScope::attn_and_mlp_separate, SiteScope::whole_block}) {
        for (int depth : {0, 1, 2}) {
            UpscaledModel m = upscale(fx.theta0, fx.finetuned, 0.3f, scope, depth, 0, fx.cfg, 5);
            for (WEMoESite& s : m.sites) zero_router_linear(s.router, 0.3f);
            for (int bi = 0; bi < 3; ++bi) {
                Batch b = random_batch(fx.cfg, 4, 261 + static_cast<uint64_t>(bi),
                                       bi % static_cast<int>(fx.cfg.n_tasks()));
                Tensor up = m.forward(b);
                Tensor ref = forward(merged, fx.cfg, b);
                CHECK(max_abs_diff(up, ref) <= 1e-5f);
            }
        }
    }
}

TEST_CASE("one-hot recovery reproduces each fine-tuned model") {
    Fixture fx(270);
    for (SiteScope scope :
         {SiteScope::mlp_only, SiteScope::attn_and_mlp_separate, SiteScope::whole_block}) {
        UpscaledModel m = upscale(fx.theta0, fx.finetuned, 0.3f, scope, 2, 0, fx.cfg, 6);
        for (int i = 0; i < 3; ++i) {
            // substitute fine-tuned non-site parameters
            UpscaledModel probe = m;
            const NamedParamSet& fi = fx.finetuned[static_cast<size_t>(i)];
            for (size_t k = 0; k < probe.static_params.size(); ++k)
                probe.static_params.tensor(k) = fi.at(probe.static_params.name(k));
            Tensor onehot = Tensor::zeros({3});
            onehot.data[static_cast<size_t>(i)] = 1.0f;
            Batch b = random_batch(fx.cfg, 3, 271 + static_cast<uint64_t>(i), i);
            Tensor got = probe.forward(b, &onehot);
            Tensor want = forward(fi, fx.cfg, b);
            CHECK(max_abs_diff(got, want) <= 1e-6f);
        }
    }
}

TEST_CASE("depth-0 upscaling equals MLP-restricted layer-wise adamerging") {
    Fixture fx(280);
    std::vector<TaskVector> taus;
    for (const auto& f : fx.finetuned) taus.push_back(task_vector(f, fx.theta0));

    UpscaledModel m = upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::mlp_only, 0, 0, fx.cfg, 7);

    NamedParamSet theta0_heads = attach_heads(fx.theta0, fx.finetuned);
    auto group_of = [](const std::string& name) -> std::string {
        if (name.rfind("layers.", 0) == 0) {
            size_t dot = name.find('.', 7);
            std::string rest = name.substr(dot + 1);
            if (rest.rfind("mlp.", 0) == 0) return name.substr(0, dot) + ".mlp";
        }
        return "frozen";
    };
    auto trainable = [](const std::string& g) { return g != "frozen"; };
    AdaMergingModel ada =
        adamerging_custom(theta0_heads, taus, fx.cfg, group_of, trainable, 0.3f);

    // identical trainable structure: one scalar per site per task
    CHECK(m.trainable_count() == ada.trainable_count());

    SUBCASE("logits agree at init") {
        Batch b = random_batch(fx.cfg, 4, 281, 1);
        CHECK(max_abs_diff(m.forward(b), ada.forward(b)) <= 1e-6f);
    }
    SUBCASE("logits agree for matched random coefficients") {
        Rng rng(282);
        for (WEMoESite& s : m.sites) {
            const std::string grp = "layers." + std::to_string(s.layer) + ".mlp";
            int g = -1;
            for (size_t i = 0; i < ada.group_names.size(); ++i)
                if (ada.group_names[i] == grp) g = static_cast<int>(i);
            REQUIRE(g >= 0);
            for (int64_t t = 0; t < 3; ++t) {
                float c = static_cast<float>(rng.normal(0.3, 0.2));
                s.router.b0.data[static_cast<size_t>(t)] = c;
                ada.coeffs.at2(g, t) = c;
            }
        }
        Batch b = random_batch(fx.cfg, 4, 283, 0);
        CHECK(max_abs_diff(m.forward(b), ada.forward(b)) <= 1e-6f);
    }
}

TEST_CASE("gradient reaches every router parameter") {
    Fixture fx(290);
    UpscaledModel m =
        upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::attn_and_mlp_separate, 2, 0, fx.cfg, 8);
    Batch b = random_batch(fx.cfg, 3, 291, 0);

    // track one router tensor at a time; its leaf is the unique tracked node
    // holding exactly its buffer, and the summed-logit gradient must be
    // nonzero somewhere in it
    for (auto& [name, t] : m.named_trainable()) {
        for (auto& [n2, t2] : m.named_trainable()) t2->requires_grad = (t2 == t);
        GradTape tape;
        Var logits = m.forward_logits(tape, b);
        tape.backward(tape.sum(logits));
        bool found = false, nonzero = false;
        for (size_t v = 0; v < tape.size() && !found; ++v) {
            Var var = static_cast<Var>(v);
            if (!tape.tracked(var)) continue;
            const Tensor& val = tape.value(var);
            if (val.shape == t->shape && val.data == t->data) {
                found = true;
                for (float x : tape.grad(var).data)
                    if (x != 0.0f) nonzero = true;
            }
        }
        INFO("router parameter ", name);
        CHECK(found);
        CHECK(nonzero);
    }
    for (auto& [name, t] : m.named_trainable()) t->requires_grad = true;
}

TEST_CASE("upscaled checkpoint round trip is bit identical") {
    Fixture fx(300);
    UpscaledModel m =
        upscale(fx.theta0, fx.finetuned, 0.3f, SiteScope::attn_and_mlp_separate, 2, 0, fx.cfg, 9);
    std::string bytes = encode_upscaled(m);
    UpscaledModel loaded = decode_upscaled(bytes);
    CHECK(encode_upscaled(loaded) == bytes);

    Batch b = random_batch(fx.cfg, 3, 301, 2);
    CHECK(max_abs_diff(m.forward(b), loaded.forward(b)) == 0.0f);

    // trainable structure survives
    CHECK(loaded.trainable_count() == m.trainable_count());
    std::vector<Tensor*> tp = loaded.trainable_params();
    for (Tensor* t : tp) CHECK(t->requires_grad);
}

TEST_CASE("unknown scope string rejected") {
    CHECK_THROWS_AS(parse_site_scope("banana"), ConfigError);
    CHECK(parse_site_scope("mlp") == SiteScope::mlp_only);
    CHECK(parse_site_scope("attn-mlp") == SiteScope::attn_and_mlp_separate);
    CHECK(parse_site_scope("block") == SiteScope::whole_block);
}
