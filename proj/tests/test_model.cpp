#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "ppcd/gradcheck.hpp"
#include "ppcd/model.hpp"

using namespace ppcd;
using namespace ppcd::ops;

namespace {

template <typename T>
TensorT<T> randn(Shape shape, uint64_t seed, double stddev = 1.0) {
    TensorT<T> t(std::move(shape));
    Rng rng(seed);
    rng.fill_normal(t, 0.0, stddev);
    return t;
}

template <typename M>
std::map<std::string, Tensor*> named_params(M& m, const std::string& prefix) {
    ParamList list;
    m.collect_params(prefix, list);
    std::map<std::string, Tensor*> out;
    for (auto& p : list) out[p.name] = p.tensor;
    return out;
}

}  // namespace

TEST_CASE("config validation catches broken chains") {
    GenConfig g = default_gen_config(16, 8, 4, 16);
    CHECK(g.blocks.size() == 5);
    CHECK(g.image_size() == 16);
    g.blocks[1].in = 99;
    CHECK_THROWS_AS(g.validate(), std::runtime_error);

    GenConfig g2 = default_gen_config(32, 8, 4, 16);
    CHECK(g2.image_size() == 32);
    g2.attn_after = 7;
    CHECK_THROWS_AS(g2.validate(), std::runtime_error);

    DiscConfig d = default_disc_config(16, 8, 4);
    d.blocks[1].in = 3;
    CHECK_THROWS_AS(d.validate(), std::runtime_error);
    CHECK_THROWS_AS(default_gen_config(17, 8, 4, 16), std::runtime_error);
}

TEST_CASE("same seed builds bit-identical models") {
    GenConfig cfg = default_gen_config(16, 8, 4, 16);
    auto g1 = build_generator<float>(cfg, 42);
    auto g2 = build_generator<float>(cfg, 42);
    auto g3 = build_generator<float>(cfg, 43);
    auto p1 = named_params(g1, "g");
    auto p2 = named_params(g2, "g");
    auto p3 = named_params(g3, "g");
    REQUIRE(p1.size() == p2.size());
    bool identical = true, distinct = false;
    for (auto& [name, t] : p1) {
        identical = identical && (t->vec() == p2[name]->vec());
        if (t->vec() != p3[name]->vec()) distinct = true;
    }
    CHECK(identical);
    CHECK(distinct);

    auto d1 = build_discriminator<float>(default_disc_config(16, 8, 4), 7);
    auto d2 = build_discriminator<float>(default_disc_config(16, 8, 4), 7);
    auto q1 = named_params(d1, "d");
    auto q2 = named_params(d2, "d");
    for (auto& [name, t] : q1) CHECK(t->vec() == q2[name]->vec());
}

TEST_CASE("generator forward emits bounded images and one tap per block") {
    GenConfig cfg = default_gen_config(16, 8, 4, 16);
    auto g = build_generator<float>(cfg, 1);
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto z = tape.leaf(randn<float>({3, 16}, 2));
    auto out = g.forward(ctx, z, ClassBatch::hard({0, 1, 3}));
    CHECK(out.image.value().shape() == Shape{3, 3, 16, 16});
    CHECK(out.taps.size() == 5);
    for (int64_t i = 0; i < out.image.value().size(); ++i) {
        CHECK(out.image.value()[i] <= 1.0f);
        CHECK(out.image.value()[i] >= -1.0f);
    }
    // spatial schedule: 8,16,16,16,16 for two upsampling blocks
    CHECK(out.taps[0].value().dim(2) == 8);
    CHECK(out.taps[1].value().dim(2) == 16);
    CHECK(out.taps[4].value().dim(2) == 16);

    CHECK_THROWS_AS(g.forward(ctx, tape.leaf(Tensor({3, 7})), ClassBatch::hard({0, 1, 2})),
                    std::runtime_error);
    CHECK_THROWS_AS(g.forward(ctx, z, ClassBatch::hard({0, 1})), std::runtime_error);
    CHECK_THROWS_AS(g.forward(ctx, z, ClassBatch::hard({0, 1, 9})), std::runtime_error);
}

TEST_CASE("generator is deterministic in eval mode") {
    auto g = build_generator<float>(default_gen_config(16, 8, 4, 16), 11);
    auto run = [&]() {
        Tape tape;
        Ctx ctx{&tape, false, false, false};
        auto z = tape.leaf(randn<float>({2, 16}, 5));
        return g.forward(ctx, z, ClassBatch::hard({1, 2})).image.value();
    };
    Tensor a = run(), b = run();
    CHECK(a.vec() == b.vec());
}

TEST_CASE("masked student with identity transitions equals its unmasked twin") {
    GenConfig scfg = default_gen_config(16, 8, 4, 16, true);
    GenConfig tcfg = scfg;
    tcfg.masked = false;
    auto student = build_generator<float>(scfg, 21);
    auto twin = build_generator<float>(tcfg, 99);  // different seed on purpose

    // share every parameter the twin knows about
    auto sp = named_params(student, "m");
    ParamList tl;
    twin.collect_params("m", tl);
    for (auto& p : tl) *p.tensor = *sp.at(p.name);

    // freeze all student masks to ones; transitions are identity by init
    for (MaskState* m : student.masks()) {
        m->frozen = true;
        m->m_star = Tensor::full({m->n()}, 1.0f);
    }

    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto z = tape.leaf(randn<float>({2, 16}, 31));
    auto cls = ClassBatch::hard({0, 3});
    auto a = student.forward(ctx, z, cls).image.value();
    Tape tape2;
    Ctx ctx2{&tape2, false, true, false};
    auto z2 = tape2.leaf(randn<float>({2, 16}, 31));
    auto b = twin.forward(ctx2, z2, cls).image.value();
    REQUIRE(a.same_shape(b));
    for (int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("shapes survive randomized frozen masks") {
    auto g = build_generator<float>(default_gen_config(16, 8, 4, 16), 41);
    Rng rng(42);
    for (MaskState* m : g.masks()) {
        m->frozen = true;
        m->m_star = Tensor({m->n()});
        for (int i = 0; i < m->n(); ++i) m->m_star[i] = rng.uniform() < 0.5 ? 0.0f : 1.0f;
    }
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto out = g.forward(ctx, tape.leaf(randn<float>({2, 16}, 43)), ClassBatch::hard({0, 1}));
    CHECK(out.image.value().shape() == Shape{2, 3, 16, 16});
    CHECK(out.image.value().all_finite());
}

TEST_CASE("an all-dead mask layer degenerates gracefully") {
    auto g = build_generator<float>(default_gen_config(16, 8, 4, 16), 51);
    MaskState* m = g.masks()[2];  // block1.mask1
    m->frozen = true;
    m->m_star = Tensor({m->n()});
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto out = g.forward(ctx, tape.leaf(randn<float>({2, 16}, 52)), ClassBatch::hard({2, 3}));
    CHECK(out.image.value().all_finite());
}

TEST_CASE("masks are enumerated in block order") {
    auto g = build_generator<float>(default_gen_config(16, 8, 4, 16), 61);
    auto ms = g.masks();
    CHECK(ms.size() == 10);  // 2 per block, 5 blocks
    CHECK(ms[0] == &g.blocks[0].mask1);
    CHECK(ms[1] == &g.blocks[0].mask2);
    CHECK(ms[9] == &g.blocks[4].mask2);
    CHECK_FALSE(g.all_masks_frozen());
    for (MaskState* m : ms) {
        m->frozen = true;
        m->m_star = Tensor::full({m->n()}, 1.0f);
    }
    CHECK(g.all_masks_frozen());

    auto teacher = build_generator<float>(teacher_config_for(default_gen_config(16, 8, 4, 16)), 62);
    CHECK(teacher.masks().empty());
}

TEST_CASE("teacher taps are wider but spatially matched") {
    GenConfig scfg = default_gen_config(16, 8, 4, 16);
    auto student = build_generator<float>(scfg, 71);
    auto teacher = build_generator<float>(teacher_config_for(scfg), 72);
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto z = tape.leaf(randn<float>({2, 16}, 73));
    auto so = student.forward(ctx, z, ClassBatch::hard({0, 1}));
    auto to = teacher.forward(ctx, z, ClassBatch::hard({0, 1}));
    REQUIRE(so.taps.size() == to.taps.size());
    for (size_t k = 0; k < so.taps.size(); ++k) {
        CHECK(to.taps[k].value().dim(1) == 2 * so.taps[k].value().dim(1));
        CHECK(to.taps[k].value().dim(2) == so.taps[k].value().dim(2));
        CHECK(to.taps[k].value().dim(3) == so.taps[k].value().dim(3));
    }
}

TEST_CASE("discriminator produces one logit per sample") {
    auto d = build_discriminator<float>(default_disc_config(16, 8, 4), 81);
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto img = tape.leaf(randn<float>({3, 3, 16, 16}, 82));
    auto logit = d.forward(ctx, img, ClassBatch::hard({0, 1, 2}));
    CHECK(logit.value().shape() == Shape{3});
    CHECK(logit.value().all_finite());
    CHECK_THROWS_AS(d.forward(ctx, tape.leaf(Tensor({3, 1, 16, 16})), ClassBatch::hard({0, 1, 2})),
                    std::runtime_error);
}

TEST_CASE("discriminator logits depend on the class embedding") {
    auto d = build_discriminator<float>(default_disc_config(16, 8, 4), 91);
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    TensorT<float> one = randn<float>({1, 3, 16, 16}, 92);
    TensorT<float> img({2, 3, 16, 16});
    for (int64_t i = 0; i < one.size(); ++i) img[i] = img[one.size() + i] = one[i];
    auto logit = d.forward(ctx, tape.leaf(img), ClassBatch::hard({0, 1}));
    CHECK(logit.value()[0] != logit.value()[1]);
}

TEST_CASE("zero weights give zero logit") {
    auto cfg = default_disc_config(16, 8, 4);
    cfg.spectral_norm = false;
    auto d = build_discriminator<float>(cfg, 93);
    ParamList ps;
    d.collect_params("d", ps);
    for (auto& p : ps) *p.tensor = Tensor(p.tensor->shape());
    Tape tape;
    Ctx ctx{&tape, false, true, false};
    auto logit = d.forward(ctx, tape.leaf(Tensor({2, 3, 16, 16})), ClassBatch::hard({0, 1}));
    CHECK(logit.value()[0] == 0.0f);
    CHECK(logit.value()[1] == 0.0f);
}

TEST_CASE("soft class mixtures drive both generator and discriminator") {
    auto g = build_generator<float>(default_gen_config(16, 8, 4, 16), 95);
    Tape tape;
    Ctx ctx{&tape, false, false, false};
    Tensor w({2, 4}, {1, 0, 0, 0, 0.5f, 0.5f, 0, 0});
    auto z = tape.leaf(randn<float>({2, 16}, 96));
    auto out = g.forward(ctx, z, ClassBatch::mixture(w));
    CHECK(out.image.value().shape() == Shape{2, 3, 16, 16});

    // a pure one-hot mixture matches the hard index path exactly
    Tape tape2;
    Ctx ctx2{&tape2, false, false, false};
    auto z2 = tape2.leaf(randn<float>({2, 16}, 96));
    Tensor w2({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0});
    auto soft = g.forward(ctx2, z2, ClassBatch::mixture(w2)).image.value();
    Tape tape3;
    Ctx ctx3{&tape3, false, false, false};
    auto z3 = tape3.leaf(randn<float>({2, 16}, 96));
    auto hard = g.forward(ctx3, z3, ClassBatch::hard({0, 0})).image.value();
    for (int64_t i = 0; i < soft.size(); ++i)
        CHECK(soft[i] == doctest::Approx(hard[i]).epsilon(1e-5));
}

TEST_CASE("full masked block passes gradcheck") {
    BlockSpec spec{4, 4, true};
    auto blk = build_gblock<double>(spec, 2, true, 0.7, 5.0, 0.005, 7, "blk");
    Rng rng(8);
    rng.fill_normal(blk.mask1.W, 0.0, 0.3);
    rng.fill_normal(blk.mask2.W, 0.0, 0.3);
    auto cls = ClassBatchT<double>::hard({0, 1});

    std::vector<std::pair<std::string, TensorD>> leaves = {
        {"x", randn<double>({2, 4, 3, 3}, 9, 0.8)},
        {"conv1.w", blk.conv1.weight},
        {"conv1.b", blk.conv1.bias},
        {"conv2.w", blk.conv2.weight},
        {"conv2.b", blk.conv2.bias},
        {"skip.w", blk.skip.weight},
        {"skip.b", blk.skip.bias},
        {"transition.w", blk.transition.weight},
        {"transition.b", blk.transition.bias},
        {"cbn1.gain", blk.cbn1.gain.table},
        {"cbn1.bias", blk.cbn1.bias.table},
        {"cbn2.gain", blk.cbn2.gain.table},
        {"cbn2.bias", blk.cbn2.bias.table},
        {"mask1.W", blk.mask1.W},
        {"mask2.W", blk.mask2.W},
    };
    auto report = grad_check(leaves, [&](TapeD& tape, const std::vector<VarD>& v) {
        CtxT<double> ctx{&tape, false, true, false};
        ctx.bind(blk.conv1.weight, v[1]);
        ctx.bind(blk.conv1.bias, v[2]);
        ctx.bind(blk.conv2.weight, v[3]);
        ctx.bind(blk.conv2.bias, v[4]);
        ctx.bind(blk.skip.weight, v[5]);
        ctx.bind(blk.skip.bias, v[6]);
        ctx.bind(blk.transition.weight, v[7]);
        ctx.bind(blk.transition.bias, v[8]);
        ctx.bind(blk.cbn1.gain.table, v[9]);
        ctx.bind(blk.cbn1.bias.table, v[10]);
        ctx.bind(blk.cbn2.gain.table, v[11]);
        ctx.bind(blk.cbn2.bias.table, v[12]);
        ctx.bind(blk.mask1.W, v[13]);
        ctx.bind(blk.mask2.W, v[14]);
        return sum_all(square(blk.forward(ctx, v[0], cls)));
    });
    for (const auto& b : report.blocks) {
        INFO(b.name);
        CHECK(b.max_rel_err < 1e-4);
    }
}
