#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "wemoe/checkpoint.hpp"
#include "wemoe/params.hpp"
#include "wemoe/rng.hpp"

using namespace wemoe;

namespace {

NamedParamSet tiny_set(float scale = 1.0f) {
    NamedParamSet p;
    p.add("embed.weight", Tensor::from({2, 2}, {scale, 2 * scale, 3 * scale, 4 * scale}));
    p.add("layers.0.mlp.fc1.weight", Tensor::from({2}, {5 * scale, 6 * scale}));
    p.add("heads.0.weight", Tensor::from({2}, {7, 8}));
    return p;
}

NamedParamSet add_noise(const NamedParamSet& base, uint64_t seed, float stddev) {
    Rng rng(seed);
    NamedParamSet out;
    for (size_t i = 0; i < base.size(); ++i) {
        Tensor t = base.tensor(i);
        if (!is_head_name(base.name(i)))
            for (float& v : t.data) v += static_cast<float>(rng.normal(0.0, stddev));
        out.add(base.name(i), std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("task_vector basics") {
    NamedParamSet theta0 = tiny_set();

    SUBCASE("identical models give a zero vector") {
        TaskVector tau = task_vector(theta0, theta0);
        CHECK(tau.entries.size() == 2);  // heads dropped
        for (size_t i = 0; i < tau.entries.size(); ++i)
            for (float v : tau.entries.tensor(i).data) CHECK(v == 0.0f);
    }

    SUBCASE("hand-computed difference") {
        NamedParamSet theta0s;
        theta0s.add("w", Tensor::from({2}, {1, 2}));
        NamedParamSet thetai;
        thetai.add("w", Tensor::from({2}, {1.5f, 1.0f}));
        TaskVector tau = task_vector(thetai, theta0s);
        CHECK(tau.entries.at("w").data[0] == doctest::Approx(0.5f));
        CHECK(tau.entries.at("w").data[1] == doctest::Approx(-1.0f));
    }

    SUBCASE("apply_vector inverts task_vector bit-exactly") {
        NamedParamSet thetai = add_noise(theta0, 5, 0.37f);
        TaskVector tau = task_vector(thetai, theta0);
        NamedParamSet recon = apply_vector(theta0, tau, 1.0f);
        for (size_t i = 0; i < theta0.size(); ++i) {
            if (is_head_name(theta0.name(i))) continue;
            // a + (b - a) == b holds in this direction for IEEE floats at
            // these magnitudes; asserted exactly because merge code relies
            // on scale=1 recovering the fine-tuned model
            CHECK(recon.tensor(i).data == thetai.at(theta0.name(i)).data);
        }
    }
}

TEST_CASE("apply_vector scaling") {
    NamedParamSet theta0;
    theta0.add("w", Tensor::from({1}, {1}));
    TaskVector tau;
    tau.entries.add("w", Tensor::from({1}, {2}));

    CHECK(apply_vector(theta0, tau, 0.0f).at("w").data[0] == 1.0f);
    CHECK(apply_vector(theta0, tau, 0.3f).at("w").data[0] == doctest::Approx(1.6f));
}

TEST_CASE("congruence errors name the first mismatch") {
    NamedParamSet a = tiny_set();
    NamedParamSet b;
    b.add("embed.weight", Tensor::from({2, 2}, {1, 2, 3, 4}));
    b.add("layers.0.mlp.fc1.weight", Tensor::from({3}, {5, 6, 7}));  // wrong shape
    try {
        task_vector(a, b);
        FAIL("expected CongruenceError");
    } catch (const CongruenceError& e) {
        CHECK(std::string(e.what()).find("layers.0.mlp.fc1.weight") != std::string::npos);
    }

    NamedParamSet c;
    c.add("embed.weight", Tensor::from({2, 2}, {1, 2, 3, 4}));
    try {
        task_vector(a, c);
        FAIL("expected CongruenceError");
    } catch (const CongruenceError& e) {
        CHECK(std::string(e.what()).find("layers.0.mlp.fc1.weight") != std::string::npos);
    }
}

TEST_CASE("congruence ignores heads and is an equivalence relation") {
    NamedParamSet a = tiny_set();
    NamedParamSet b = tiny_set();
    NamedParamSet c = add_noise(a, 9, 1.0f);
    CHECK(congruent(a, a));
    CHECK(congruent(a, b));
    CHECK(congruent(b, a));
    CHECK(congruent(a, c));

    // apply_vector preserves congruence
    TaskVector tau = task_vector(c, a);
    CHECK(congruent(apply_vector(a, tau, 0.7f), a));
}

TEST_CASE("task_vector is additive") {
    NamedParamSet theta0 = tiny_set();
    NamedParamSet pa = add_noise(theta0, 31, 0.5f);
    NamedParamSet pb = add_noise(theta0, 32, 0.5f);
    TaskVector ta = task_vector(pa, theta0);
    TaskVector tb = task_vector(pb, theta0);
    // theta0 + a + b where a, b are the deltas of pa, pb
    NamedParamSet pab = apply_vector(pa, tb, 1.0f);
    TaskVector tab = task_vector(pab, theta0);
    for (size_t i = 0; i < tab.entries.size(); ++i) {
        const Tensor& sum_direct = tab.entries.tensor(i);
        const Tensor& a_part = ta.entries.tensor(i);
        const Tensor& b_part = tb.entries.tensor(i);
        for (size_t j = 0; j < sum_direct.data.size(); ++j)
            CHECK(std::abs(sum_direct.data[j] - (a_part.data[j] + b_part.data[j])) <= 1e-6f);
    }
}

TEST_CASE("checkpoint round trip is bit identical") {
    NamedParamSet p = add_noise(tiny_set(), 77, 2.0f);
    CheckpointMeta meta;
    meta.set("task", "demo");
    meta.set("seed", "42");

    std::string path = "roundtrip_test.wemc";
    save_checkpoint(path, p, meta);
    auto [loaded, meta2] = load_checkpoint(path);

    REQUIRE(loaded.size() == p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        CHECK(loaded.name(i) == p.name(i));
        CHECK(loaded.tensor(i).shape == p.tensor(i).shape);
        CHECK(loaded.tensor(i).data == p.tensor(i).data);
    }
    CHECK(meta2.get("task") == std::string("demo"));
    CHECK(meta2.get("seed") == std::string("42"));

    // saving the loaded set reproduces the same bytes
    std::string again = encode_checkpoint(loaded, meta2);
    std::ifstream in(path, std::ios::binary);
    std::string orig((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(again == orig);
    std::remove(path.c_str());
}

TEST_CASE("corrupted manifest offset fails integrity check") {
    NamedParamSet p = tiny_set();
    CheckpointMeta meta;
    std::string bytes = encode_checkpoint(p, meta);
    // second tensor's offset is 16 (4 floats); rewrite it to 12
    size_t pos = bytes.find(" 16\n");
    REQUIRE(pos != std::string::npos);
    bytes.replace(pos, 4, " 12\n");
    CHECK_THROWS_AS(decode_checkpoint(bytes), IntegrityError);
}

TEST_CASE("truncated blob fails integrity check") {
    NamedParamSet p = tiny_set();
    CheckpointMeta meta;
    std::string bytes = encode_checkpoint(p, meta);
    bytes.resize(bytes.size() - 4);
    CHECK_THROWS_AS(decode_checkpoint(bytes), IntegrityError);
}

TEST_CASE("future version is rejected naming both versions") {
    NamedParamSet p = tiny_set();
    CheckpointMeta meta;
    std::string bytes = encode_checkpoint(p, meta);
    bytes[4] = 9;  // version little-endian low byte
    try {
        decode_checkpoint(bytes);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        std::string msg = e.what();
        CHECK(msg.find("9") != std::string::npos);
        CHECK(msg.find(std::to_string(kCheckpointVersion)) != std::string::npos);
    }
}

TEST_CASE("bad magic is a format error") {
    std::string bytes = "NOPE this is not a checkpoint";
    CHECK_THROWS_AS(decode_checkpoint(bytes), FormatError);
}
