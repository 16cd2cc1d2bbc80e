#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "relgen/fixture.hpp"
#include "relgen/model.hpp"
#include "relgen/trainer.hpp"

using namespace relgen;
using model::ModelConfig;
using model::StepOutput;
using model::Transformer;

namespace {

ModelConfig tiny_config(bool use_copy) {
    ModelConfig mc;
    mc.num_layers = 1;
    mc.num_heads = 1;
    mc.d_model = 8;
    mc.d_ff = 16;
    mc.dropout = 0.0;
    mc.max_len = 32;
    mc.use_copy = use_copy;
    return mc;
}

tokenizer::Vocabulary tiny_vocab() {
    return testutil::make_vocab({"a", "b", "c", "d", "x", "y"}, 4);
}

}  // namespace

TEST_CASE("copy_mix reproduces the hand-computed mixture") {
    StepOutput step;
    step.vocab_dist = {0.25, 0.25, 0.25, 0.25};
    step.src_attention = {0.2, 0.3, 0.5};
    step.p_gen = 0.5;
    const auto m = model::copy_mix(step, {0, 1, 0});
    REQUIRE(m.size() == 4);
    CHECK(m[0] == doctest::Approx(0.475).epsilon(1e-12));
    CHECK(m[1] == doctest::Approx(0.275).epsilon(1e-12));
    CHECK(m[2] == doctest::Approx(0.125).epsilon(1e-12));
    CHECK(m[3] == doctest::Approx(0.125).epsilon(1e-12));
    CHECK(std::accumulate(m.begin(), m.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("copy_mix degenerate gates") {
    StepOutput step;
    step.vocab_dist = {0.7, 0.1, 0.2};
    step.src_attention = {1.0};
    step.p_gen = 1.0;
    const auto m1 = model::copy_mix(step, {2});
    for (size_t j = 0; j < m1.size(); ++j) CHECK(m1[j] == step.vocab_dist[j]);

    step.p_gen = 0.0;
    const auto m0 = model::copy_mix(step, {2});
    CHECK(m0[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(m0[0] == 0.0);
}

TEST_CASE("encode produces masked per-position memory") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 7);
    const std::vector<int> src = {v.token_to_id.at("a"), v.token_to_id.at("b"),
                                  v.token_to_id.at("c")};
    const auto mem = m.encode(src);
    CHECK(mem.memory.rows == 3);
    CHECK(mem.memory.cols == 8);
    CHECK(mem.src_mask == std::vector<uint8_t>{1, 1, 1});
    CHECK(!mem.truncated);
    CHECK_THROWS(m.encode({}));

    // appended pads leave non-pad rows bit-identical
    std::vector<int> padded = src;
    padded.push_back(v.pad_id);
    padded.push_back(v.pad_id);
    const auto mem2 = m.encode(padded);
    CHECK(mem2.src_mask == std::vector<uint8_t>{1, 1, 1, 0, 0});
    for (int t = 0; t < 3; ++t)
        for (int j = 0; j < 8; ++j) CHECK(mem2.memory.at(t, j) == mem.memory.at(t, j));
}

TEST_CASE("decode_step emits a valid distribution and attention") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 7);
    const std::vector<int> src = {v.token_to_id.at("a"), v.oov_id(0)};
    const auto mem = m.encode(src);
    const auto step = m.decode_step(mem, {v.sos_id, v.token_to_id.at("b")});
    REQUIRE(static_cast<int>(step.vocab_dist.size()) == v.size());
    double sum = 0.0;
    for (double p : step.vocab_dist) {
        CHECK(p >= 0.0);
        sum += p;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    double asum = 0.0;
    for (double a : step.src_attention) asum += a;
    CHECK(asum == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(step.p_gen >= 0.0);
    CHECK(step.p_gen <= 1.0);
    // with the copy head active, the generation softmax cannot emit OOV slots
    for (int j = 0; j < v.oov_slots; ++j) CHECK(step.vocab_dist[v.oov_id(j)] == 0.0);
    CHECK_THROWS(m.decode_step(mem, {}));
}

TEST_CASE("attention over a single source position is exactly one") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 3);
    const auto mem = m.encode({v.token_to_id.at("x")});
    const auto step = m.decode_step(mem, {v.sos_id});
    REQUIRE(step.src_attention.size() == 1);
    CHECK(step.src_attention[0] == 1.0);
}

TEST_CASE("incremental decoding matches the teacher-forced pass bitwise") {
    const auto v = tiny_vocab();
    for (bool use_copy : {true, false}) {
        Transformer m(tiny_config(use_copy), v, 11);
        const std::vector<int> src = {v.token_to_id.at("a"), v.oov_id(0), v.token_to_id.at("c")};
        const std::vector<int> tgt_in = {v.sos_id, v.token_to_id.at("b"), v.oov_id(0),
                                         v.token_to_id.at("d")};
        const auto full = m.teacher_forced_mdist(src, tgt_in);
        const auto mem = m.encode(src);
        for (size_t t = 0; t < tgt_in.size(); ++t) {
            const std::vector<int> prefix(tgt_in.begin(), tgt_in.begin() + t + 1);
            const auto step = m.decode_step(mem, prefix);
            const auto mixed = model::copy_mix(step, src);
            for (int j = 0; j < full.cols; ++j) CHECK(mixed[static_cast<size_t>(j)] == full.at(static_cast<int>(t), j));
        }
    }
}

TEST_CASE("future target positions never leak into earlier rows") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 13);
    std::mt19937_64 rng(5);
    const std::vector<int> src = {v.token_to_id.at("a"), v.token_to_id.at("b")};
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<int> tgt_in = {v.sos_id};
        for (int i = 0; i < 6; ++i)
            tgt_in.push_back(static_cast<int>(rng() % static_cast<uint64_t>(v.n_ordinary)));
        const auto base = m.teacher_forced_mdist(src, tgt_in);
        const size_t j = 2 + rng() % 4;  // perturb position j
        auto mut = tgt_in;
        mut[j] = (mut[j] + 1) % v.n_ordinary;
        const auto pert = m.teacher_forced_mdist(src, mut);
        for (size_t t = 0; t < j; ++t)
            for (int c = 0; c < base.cols; ++c)
                CHECK(base.at(static_cast<int>(t), c) == pert.at(static_cast<int>(t), c));
    }
}

TEST_CASE("analytic gradients match finite differences on a miniature model") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 17);
    const std::vector<int> src = {v.token_to_id.at("a"), v.oov_id(0), v.token_to_id.at("b")};
    const std::vector<int> tgt = {v.sos_id,  v.token_to_id.at("c"), v.oov_id(0),
                                  v.unk_id, v.token_to_id.at("a"), v.eos_id};
    m.zero_grads();
    m.sequence_nll(src, tgt, nullptr, true, nullptr);

    std::mt19937_64 rng(23);
    int probes = 0;
    bool pgen_probed = false;
    auto& params = m.params();
    while (probes < 40) {
        auto& tensor = params[rng() % params.size()];
        const size_t idx = rng() % tensor.w.a.size();
        if (tensor.name.rfind("pgen.", 0) == 0) pgen_probed = true;
        const double analytic = tensor.g.a[idx];
        const double h = 1e-5;
        const double orig = tensor.w.a[idx];
        tensor.w.a[idx] = orig + h;
        const double lp = m.sequence_nll(src, tgt, nullptr, false, nullptr);
        tensor.w.a[idx] = orig - h;
        const double lm = m.sequence_nll(src, tgt, nullptr, false, nullptr);
        tensor.w.a[idx] = orig;
        const double fd = (lp - lm) / (2.0 * h);
        // absolute floor: central differences on this loss are noise below
        // ~1e-9, and structurally-zero gradients (key biases) live there
        if (std::abs(analytic - fd) <= 1e-8) {
            ++probes;
            continue;
        }
        const double rel = std::abs(analytic - fd) / std::max(1e-8, std::abs(analytic) + std::abs(fd));
        INFO(tensor.name << "[" << idx << "] analytic " << analytic << " fd " << fd);
        CHECK(rel <= 1e-3);
        ++probes;
    }
    // make sure the copy head itself is exercised
    for (const char* name : {"pgen.wc", "pgen.ws", "pgen.we", "pgen.b"}) {
        for (auto& tensor : params) {
            if (tensor.name != name) continue;
            pgen_probed = true;
            const double analytic = tensor.g.a[0];
            const double h = 1e-5;
            const double orig = tensor.w.a[0];
            tensor.w.a[0] = orig + h;
            const double lp = m.sequence_nll(src, tgt, nullptr, false, nullptr);
            tensor.w.a[0] = orig - h;
            const double lm = m.sequence_nll(src, tgt, nullptr, false, nullptr);
            tensor.w.a[0] = orig;
            const double fd = (lp - lm) / (2.0 * h);
            const double rel =
                std::abs(analytic - fd) / std::max(1e-8, std::abs(analytic) + std::abs(fd));
            INFO(tensor.name << " analytic " << analytic << " fd " << fd);
            CHECK(rel <= 1e-3);
        }
    }
    CHECK(pgen_probed);
}

TEST_CASE("a short training run reduces the loss") {
    const auto pairs = fixture::make_pairs(10, 41);
    const auto v = tokenizer::build_vocabulary(pairs, 200, 20);
    ModelConfig mc = tiny_config(true);
    mc.d_model = 16;
    mc.d_ff = 32;
    Transformer m(mc, v, 1);
    std::vector<tokenizer::EncodedPair> enc;
    for (const auto& p : pairs) enc.push_back(tokenizer::encode_pair(p, v));

    model::TrainConfig tc;
    tc.lr = 3e-3;
    tc.warmup_steps = 10;
    tc.batch_tokens = 120;
    tc.epochs = 20;
    tc.seed = 2;
    model::Trainer tr(m, tc);
    const double before = tr.dataset_loss(enc);
    for (int e = 0; e < tc.epochs; ++e) tr.run_epoch(enc);
    const double after = tr.dataset_loss(enc);
    CHECK(after < before);
}

TEST_CASE("the copy head wins on a pure copying task") {
    // every target equals its source: random in-vocab sequences
    std::vector<std::string> pool;
    for (int i = 0; i < 25; ++i) pool.push_back("tok" + std::to_string(i));
    const auto v = testutil::make_vocab(pool, 4);
    std::mt19937_64 rng(3);
    std::vector<tokenizer::EncodedPair> data;
    for (int i = 0; i < 12; ++i) {
        const int len = 3 + static_cast<int>(rng() % 4);
        std::vector<std::string> toks;
        for (int j = 0; j < len; ++j) toks.push_back(pool[rng() % pool.size()]);
        const auto src = tokenizer::encode_source(toks, v);
        tokenizer::EncodedPair ep;
        ep.src_ids = src.ids;
        ep.tgt_ids = tokenizer::encode_target(toks, v, src);
        data.push_back(std::move(ep));
    }

    auto final_loss = [&](bool use_copy) {
        ModelConfig mc = tiny_config(use_copy);
        mc.d_model = 16;
        mc.num_heads = 2;
        mc.d_ff = 32;
        Transformer m(mc, v, 5);
        model::TrainConfig tc;
        tc.lr = 5e-3;
        tc.warmup_steps = 10;
        tc.batch_tokens = 100;
        tc.seed = 9;
        model::Trainer tr(m, tc);
        for (int e = 0; e < 30; ++e) tr.run_epoch(data);
        return tr.dataset_loss(data);
    };
    const double with_copy = final_loss(true);
    const double without = final_loss(false);
    CHECK(with_copy < without);
}

TEST_CASE("untrained model still emits a valid distribution") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(false), v, 29);
    const auto mem = m.encode({v.token_to_id.at("a")});
    const auto step = m.decode_step(mem, {v.sos_id});
    double sum = 0.0;
    for (double p : step.vocab_dist) sum += p;
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    // the base model generates over the whole table, OOV slots included
    CHECK(step.p_gen == 1.0);
}

TEST_CASE("checkpoints round trip bitwise and reject vocabulary changes") {
    const auto dir = testutil::scratch_dir("model_ckpt");
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 31);
    model::save_checkpoint(dir + "/m.ckpt", m);
    const auto back = model::load_checkpoint(dir + "/m.ckpt", v);
    REQUIRE(back.params().size() == m.params().size());
    for (size_t i = 0; i < m.params().size(); ++i) {
        CHECK(back.params()[i].name == m.params()[i].name);
        REQUIRE(back.params()[i].w.a.size() == m.params()[i].w.a.size());
        for (size_t j = 0; j < m.params()[i].w.a.size(); ++j)
            CHECK(back.params()[i].w.a[j] == m.params()[i].w.a[j]);
    }
    CHECK(back.config().use_copy == m.config().use_copy);
    CHECK(back.vocab_hash() == m.vocab_hash());

    const auto other = testutil::make_vocab({"a", "b", "c", "d", "x", "z"}, 4);
    CHECK_THROWS(model::load_checkpoint(dir + "/m.ckpt", other));
    CHECK_THROWS(model::load_checkpoint(dir + "/absent.ckpt", v));
}

TEST_CASE("sequence_nll validates its target frame") {
    const auto v = tiny_vocab();
    Transformer m(tiny_config(true), v, 37);
    CHECK_THROWS(m.sequence_nll({v.token_to_id.at("a")}, {v.sos_id}, nullptr, false, nullptr));
}
