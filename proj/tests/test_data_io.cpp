#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include "ppcd/config.hpp"
#include "ppcd/dataset.hpp"
#include "ppcd/image_io.hpp"
#include "ppcd/metrics.hpp"
#include "ppcd/model_io.hpp"

using namespace ppcd;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path p = fs::temp_directory_path() / ("ppcd_io_" + std::to_string(::getpid()) + "_" +
                                              std::to_string(counter++));
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), {});
}

}  // namespace

TEST_CASE("synthetic dataset is deterministic and fully labeled") {
    auto a = synth_dataset(7, 4, 16, 5);
    auto b = synth_dataset(7, 4, 16, 5);
    auto c = synth_dataset(8, 4, 16, 5);
    CHECK(a.size() == 20);
    CHECK(a.images.vec() == b.images.vec());
    CHECK(a.labels == b.labels);
    CHECK(a.images.vec() != c.images.vec());

    std::vector<int> counts(4, 0);
    for (int l : a.labels) {
        REQUIRE(l >= 0);
        REQUIRE(l < 4);
        ++counts[l];
    }
    for (int cnt : counts) CHECK(cnt == 5);
    for (int64_t i = 0; i < a.images.size(); ++i) {
        CHECK(a.images[i] >= -1.0f);
        CHECK(a.images[i] <= 1.0f);
    }
}

TEST_CASE("class mean images are pairwise distinct") {
    auto ds = synth_dataset(11, 8, 32, 16);
    std::vector<Tensor> means;
    for (int k = 0; k < 8; ++k) means.push_back(ds.class_mean(k));
    for (int i = 0; i < 8; ++i)
        for (int j = i + 1; j < 8; ++j) {
            double d2 = 0;
            for (int64_t t = 0; t < means[i].size(); ++t) {
                double d = means[i][t] - means[j][t];
                d2 += d * d;
            }
            CHECK(std::sqrt(d2 / means[i].size()) > 0.1);
        }
}

TEST_CASE("dataset rejects bad recipes") {
    CHECK_THROWS_AS(synth_dataset(1, 1, 16, 4), std::runtime_error);
    CHECK_THROWS_AS(synth_dataset(1, 4, 15, 4), std::runtime_error);
    CHECK_THROWS_AS(synth_dataset(1, 4, 64, 4), std::runtime_error);
    CHECK_THROWS_AS(synth_dataset(1, 4, 16, 0), std::runtime_error);
}

TEST_CASE("batch gathering pulls the right samples") {
    auto ds = synth_dataset(3, 2, 16, 3);
    auto batch = ds.gather({5, 0});
    CHECK(batch.shape() == Shape{2, 3, 16, 16});
    int64_t stride = 3 * 16 * 16;
    for (int64_t i = 0; i < stride; ++i) {
        CHECK(batch[i] == ds.images[5 * stride + i]);
        CHECK(batch[stride + i] == ds.images[i]);
    }
    CHECK(ds.gather_labels({5, 0}) == std::vector<int>{ds.labels[5], ds.labels[0]});
    CHECK_THROWS_AS(ds.gather({6}), std::runtime_error);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    fs::path dir = temp_dir();
    Checkpoint c;
    c.meta = {{"step", 123}, {"seed", 9}, {"pruned", false}};
    Tensor w({2, 3}, {1.5f, -2.25f, 0.0f, 1e-30f, 3.14159f, -0.0f});
    Rng rng(5);
    Tensor big({4, 3, 3, 3});
    rng.fill_normal(big, 0.0, 1.0);
    c.add("gen.w", w);
    c.add("gen.big", big);
    CHECK_THROWS_AS(c.add("gen.w", w), std::runtime_error);

    std::string path = (dir / "ck.ppcd").string();
    save_checkpoint(path, c);
    Checkpoint r = load_checkpoint(path);
    CHECK(r.meta == c.meta);
    REQUIRE(r.tensors.size() == 2);
    CHECK(r.tensors[0].first == "gen.w");
    CHECK(r.at("gen.w").shape() == Shape{2, 3});
    CHECK(std::memcmp(r.at("gen.w").vec().data(), w.vec().data(), w.size() * 4) == 0);
    CHECK(std::memcmp(r.at("gen.big").vec().data(), big.vec().data(), big.size() * 4) == 0);

    // saving the loaded copy reproduces the file byte for byte
    std::string path2 = (dir / "ck2.ppcd").string();
    save_checkpoint(path2, r);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint failure modes are distinct") {
    fs::path dir = temp_dir();
    Checkpoint c;
    c.add("t", Tensor({2}, {1.0f, 2.0f}));
    std::string path = (dir / "ck.ppcd").string();
    save_checkpoint(path, c);
    std::string bytes = slurp(path);

    auto write_variant = [&](const std::string& name, const std::string& body) {
        std::string p = (dir / name).string();
        std::ofstream os(p, std::ios::binary);
        os.write(body.data(), static_cast<std::streamsize>(body.size()));
        os.close();
        return p;
    };

    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        load_checkpoint(write_variant("bad_magic", bad_magic));
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("not a checkpoint") != std::string::npos);
    }

    std::string bad_version = bytes;
    bad_version[4] = 99;
    try {
        load_checkpoint(write_variant("bad_version", bad_version));
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    try {
        load_checkpoint(write_variant("truncated", bytes.substr(0, bytes.size() - 3)));
        FAIL("expected error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }

    CHECK_THROWS_AS(load_checkpoint((dir / "missing.ppcd").string()), std::runtime_error);
}

TEST_CASE("generator state survives a checkpoint round trip") {
    GenConfig cfg = default_gen_config(16, 8, 4, 16);
    auto g = build_generator<float>(cfg, 31);
    g.blocks[1].mask1.frozen = true;
    g.blocks[1].mask1.frozen_reg = 2.5f;
    g.blocks[1].mask1.m_star = Tensor({8}, {1, 0, 1, 0, 1, 1, 0, 0});
    g.out_bn.core.running_mean[2] = 0.75f;

    Checkpoint c;
    c.meta["step"] = 7;
    pack_generator(c, g, "g");
    fs::path dir = temp_dir();
    std::string path = (dir / "gen.ppcd").string();
    save_checkpoint(path, c);

    Checkpoint r = load_checkpoint(path);
    GenConfig rcfg = gen_config_from_json(r.meta.at("g_config"));
    CHECK(rcfg.blocks.size() == cfg.blocks.size());
    auto g2 = build_generator<float>(rcfg, 999);
    unpack_generator(r, g2, "g");

    ParamList a, b;
    g.collect_params("g", a);
    g.collect_buffers("g", a);
    g2.collect_params("g", b);
    g2.collect_buffers("g", b);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].tensor->vec() == b[i].tensor->vec());
    }
    CHECK(g2.blocks[1].mask1.frozen);
    CHECK(g2.blocks[1].mask1.frozen_reg == 2.5f);
    CHECK(g2.blocks[1].mask1.m_star.vec() == g.blocks[1].mask1.m_star.vec());
    CHECK_FALSE(g2.blocks[0].mask1.frozen);

    // generators agree exactly after restore
    Tape t1, t2;
    Ctx x1{&t1, false, false, false}, x2{&t2, false, false, false};
    Tensor z({2, 16});
    Rng rng(32);
    rng.fill_normal(z, 0.0, 1.0);
    auto o1 = g.forward(x1, t1.leaf(z), ClassBatch::hard({0, 1})).image.value();
    auto o2 = g2.forward(x2, t2.leaf(z), ClassBatch::hard({0, 1})).image.value();
    CHECK(o1.vec() == o2.vec());
}

TEST_CASE("discriminator and distillation head round trip") {
    DiscConfig dcfg = default_disc_config(16, 8, 4);
    auto d = build_discriminator<float>(dcfg, 41);
    GenConfig scfg = default_gen_config(16, 8, 4, 16);
    auto head = build_distill_head<float>(scfg, teacher_config_for(scfg));
    head.norms[0].gain.table[3] = 1.75f;

    Checkpoint c;
    pack_discriminator(c, d, "d");
    pack_distill_head(c, head, "cd");
    fs::path dir = temp_dir();
    std::string path = (dir / "dh.ppcd").string();
    save_checkpoint(path, c);
    Checkpoint r = load_checkpoint(path);

    auto d2 = build_discriminator<float>(disc_config_from_json(r.meta.at("d_config")), 99);
    unpack_discriminator(r, d2, "d");
    auto head2 = build_distill_head<float>(scfg, teacher_config_for(scfg));
    unpack_distill_head(r, head2, "cd");

    ParamList a, b;
    d.collect_params("d", a);
    d.collect_buffers("d", a);
    d2.collect_params("d", b);
    d2.collect_buffers("d", b);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(a[i].tensor->vec() == b[i].tensor->vec());
    CHECK(head2.norms[0].gain.table[3] == 1.75f);

    // missing tensor and shape mismatch are rejected
    auto d3 = build_discriminator<float>(default_disc_config(16, 16, 4), 98);
    CHECK_THROWS_AS(unpack_discriminator(r, d3, "d"), std::runtime_error);
    Checkpoint empty;
    CHECK_THROWS_AS(unpack_discriminator(empty, d2, "d"), std::runtime_error);
}

TEST_CASE("config files load, validate and reject typos") {
    HarnessConfig cfg;
    cfg.width = 24;
    cfg.train.epochs = 3;
    cfg.train.ablation = Ablation::no_cd;
    fs::path dir = temp_dir();
    std::string path = (dir / "cfg.json").string();
    save_harness_config(path, cfg);
    HarnessConfig r = load_harness_config(path);
    CHECK(r.width == 24);
    CHECK(r.train.epochs == 3);
    CHECK(r.train.ablation == Ablation::no_cd);
    CHECK(to_json(r) == to_json(cfg));

    std::ofstream(dir / "typo.json") << R"({"widht": 16})";
    CHECK_THROWS_AS(load_harness_config((dir / "typo.json").string()), std::runtime_error);
    std::ofstream(dir / "bad.json") << "{ not json";
    CHECK_THROWS_AS(load_harness_config((dir / "bad.json").string()), std::runtime_error);
    std::ofstream(dir / "invalid.json") << R"({"width": 12})";
    CHECK_THROWS_AS(load_harness_config((dir / "invalid.json").string()), std::runtime_error);
    CHECK_THROWS_AS(load_harness_config((dir / "missing.json").string()), std::runtime_error);
}

TEST_CASE("png files carry the right header and survive zlib") {
    fs::path dir = temp_dir();
    std::string path = (dir / "img.png").string();
    std::vector<unsigned char> rgb(4 * 2 * 3);
    for (size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<unsigned char>(i * 10);
    write_png(path, 4, 2, rgb);
    std::string bytes = slurp(path);
    REQUIRE(bytes.size() > 8);
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x89);
    CHECK(bytes.substr(1, 3) == "PNG");
    CHECK(bytes.find("IHDR") != std::string::npos);
    CHECK(bytes.find("IDAT") != std::string::npos);
    CHECK(bytes.find("IEND") != std::string::npos);
    CHECK_THROWS_AS(write_png(path, 3, 2, rgb), std::runtime_error);

    Tensor images({5, 3, 16, 16});
    Rng rng(6);
    rng.fill_normal(images, 0.0, 0.6);
    write_image_grid((dir / "grid.png").string(), images, 3);
    std::string grid = slurp(dir / "grid.png");
    CHECK(grid.substr(1, 3) == "PNG");
    // 3 cols x 2 rows of 16x16 -> 48x32, big-endian dims in IHDR
    CHECK(static_cast<unsigned char>(grid[19]) == 48);
    CHECK(static_cast<unsigned char>(grid[23]) == 32);
}

TEST_CASE("metrics stream has a fixed header and stable formatting") {
    fs::path dir = temp_dir();
    std::string path = (dir / "metrics.csv").string();
    MetricsWriter w;
    w.open(path);
    w.open_mask_log((dir / "masks.csv").string(), {"m1", "m2"});
    LossBundle l;
    l.l_pp = 1.25;
    l.l_cd = 0.5;
    l.l_adv_d = 1.3862943611198906;
    l.l_adv_g = 0.6931471805599453;
    l.total_g = l.l_pp * 0.01 + l.l_cd + l.l_adv_g;
    w.row(0, 0, 2e-4, l, 3, 0.4375);
    w.row(1, 0, 2e-4, l, 3, 0.4375);
    w.mask_row(0, {0.25, 0.625});
    w.flush();

    std::string text = slurp(path);
    auto first_line = text.substr(0, text.find('\n'));
    CHECK(first_line ==
          "step,epoch,lr,l_pp,l_cd,l_adv_d,l_adv_g,total,frozen_masks,mean_zero_fraction");
    int commas = 0, lines = 0;
    for (char ch : text) {
        if (ch == ',') ++commas;
        if (ch == '\n') ++lines;
    }
    CHECK(lines == 3);
    CHECK(commas == 3 * 9);
    CHECK(text.find("0.4375") != std::string::npos);

    std::string masks = slurp(dir / "masks.csv");
    CHECK(masks.substr(0, masks.find('\n')) == "step,m1,m2");
    CHECK(masks.find("0.25,0.625") != std::string::npos);
    CHECK_THROWS_AS(w.mask_row(1, {0.5}), std::runtime_error);
}
