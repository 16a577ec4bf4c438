#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ppcd/config.hpp"
#include "ppcd/gradcheck.hpp"
#include "ppcd/image_io.hpp"
#include "ppcd/metrics.hpp"
#include "ppcd/model_io.hpp"
#include "ppcd/prune.hpp"

namespace fs = std::filesystem;
using namespace ppcd;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "out";
    long long seed = -1;
    double alpha = -1.0;
    std::string ablation;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file (defaults used when omitted)");
    cmd->add_option("--out", o.out_dir, "output directory")->capture_default_str();
    cmd->add_option("--seed", o.seed, "seed override");
    cmd->add_option("--alpha", o.alpha, "binarization threshold override");
    cmd->add_option("--ablation", o.ablation, "full|no_pp|no_cd|two_step");
}

HarnessConfig resolve(const CommonOpts& o) {
    HarnessConfig cfg;
    if (!o.config_path.empty()) cfg = load_harness_config(o.config_path);
    if (o.seed >= 0) cfg.train.seed = static_cast<uint64_t>(o.seed);
    if (o.alpha > 0) cfg.train.alpha = o.alpha;
    if (!o.ablation.empty()) cfg.train.ablation = ablation_from_string(o.ablation);
    cfg.validate();
    return cfg;
}

SyntheticDataset dataset_of(const HarnessConfig& cfg) {
    return synth_dataset(cfg.data_seed, cfg.num_classes, cfg.image_size, cfg.per_class);
}

Tensor render(Generator& g, const Tensor& z, const ClassBatch& cls) {
    Tape tape;
    Ctx ctx(&tape, false, false, false);
    return g.forward(ctx, tape.leaf(z), cls).image.value();
}

// One row per class, `cols` samples each, from a fixed per-run noise draw.
void sample_grid(Generator& g, uint64_t seed, const std::string& path, int cols = 8) {
    int num_classes = g.cfg.num_classes;
    int batch = num_classes * cols;
    Tensor z({batch, g.cfg.z_dim});
    Rng rng(derive_seed(seed, "samples"));
    rng.fill_normal(z, 0.0, 1.0);
    std::vector<int> cls(batch);
    for (int i = 0; i < batch; ++i) cls[i] = i / cols;
    write_image_grid(path, render(g, z, ClassBatch::hard(cls)), cols);
}

std::vector<std::string> mask_names(Generator& g, const std::string& prefix) {
    std::vector<std::string> names;
    for (size_t k = 0; k < g.blocks.size(); ++k)
        if (g.blocks[k].has_masks) {
            names.push_back(prefix + ".block" + std::to_string(k) + ".mask1");
            names.push_back(prefix + ".block" + std::to_string(k) + ".mask2");
        }
    return names;
}

void save_teacher(const std::string& path, Generator& teacher, const HarnessConfig& cfg, int step,
                  int epoch) {
    Checkpoint c;
    c.meta["kind"] = "teacher";
    c.meta["step"] = step;
    c.meta["epoch"] = epoch;
    c.meta["seed"] = cfg.train.seed;
    pack_generator(c, teacher, "g");
    save_checkpoint(path, c);
}

void save_student(const std::string& path, TrainState& st, const HarnessConfig& cfg) {
    Checkpoint c;
    c.meta["kind"] = "student";
    c.meta["step"] = st.step;
    c.meta["epoch"] = st.epoch;
    c.meta["seed"] = cfg.train.seed;
    pack_generator(c, st.student, "g");
    pack_discriminator(c, st.disc, "d");
    pack_distill_head(c, st.head, "head");
    save_checkpoint(path, c);
}

// Loads a generator from any checkpoint kind, rebuilding pruned shells from
// the recorded hidden widths.
Generator load_generator(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    if (!c.meta.contains("g_config")) fail(path + " holds no generator");
    GenConfig cfg = gen_config_from_json(c.meta.at("g_config"));
    Generator g;
    if (c.meta.value("pruned", false)) {
        std::vector<std::pair<int, int>> hidden;
        for (const auto& row : c.meta.at("g_hidden"))
            hidden.push_back({row.at(0).get<int>(), row.at(1).get<int>()});
        g = build_pruned_shell(cfg, hidden, 1);
    } else {
        g = build_generator<float>(cfg, 1);
    }
    unpack_generator(c, g, "g");
    return g;
}

GenConfig teacher_config_from(const std::string& path) {
    Checkpoint c = load_checkpoint(path);
    if (!c.meta.contains("g_config")) fail(path + " holds no generator");
    return gen_config_from_json(c.meta.at("g_config"));
}

int cmd_teacher_train(const CommonOpts& o) {
    HarnessConfig cfg = resolve(o);
    fs::create_directories(o.out_dir);
    fs::create_directories(o.out_dir + "/teacher_samples");
    SyntheticDataset data = dataset_of(cfg);
    Generator teacher =
        build_generator<float>(cfg.teacher_config(), derive_seed(cfg.train.seed, "teacher"));
    Discriminator disc = build_discriminator<float>(cfg.disc_config(),
                                                    derive_seed(cfg.train.seed, "teacher_disc"));
    MetricsWriter mw;
    mw.open(o.out_dir + "/teacher_metrics.csv");
    std::string ckpt = o.out_dir + "/teacher.ckpt";
    int steps_per_epoch = data.size() / cfg.train.batch_size;
    auto hook = [&](const StepRecord& r) {
        mw.row(r.step, r.epoch, r.lr, r.losses, r.frozen_masks, r.mean_zero_fraction);
        if (r.step % steps_per_epoch == 0) {
            save_teacher(ckpt, teacher, cfg, r.step, r.epoch);
            char name[64];
            std::snprintf(name, sizeof name, "/teacher_samples/epoch_%03d.png", r.epoch);
            sample_grid(teacher, cfg.train.seed, o.out_dir + name);
        }
    };
    std::vector<StepRecord> records = teacher_train(teacher, disc, cfg.train, data, hook);
    save_teacher(ckpt, teacher, cfg, records.empty() ? 0 : records.back().step, cfg.train.epochs);
    mw.flush();
    std::cout << "teacher checkpoint: " << ckpt << "\n"
              << "metrics: " << o.out_dir << "/teacher_metrics.csv (" << records.size()
              << " steps)\n";
    return 0;
}

int cmd_train(const CommonOpts& o, const std::string& teacher_path_opt) {
    HarnessConfig cfg = resolve(o);
    fs::create_directories(o.out_dir);
    fs::create_directories(o.out_dir + "/student_samples");
    std::string teacher_path =
        teacher_path_opt.empty() ? o.out_dir + "/teacher.ckpt" : teacher_path_opt;
    SyntheticDataset data = dataset_of(cfg);

    GenConfig teacher_cfg = teacher_config_from(teacher_path);
    TrainState st = make_train_state(cfg.student_config(), teacher_cfg, cfg.disc_config(),
                                     cfg.train);
    Checkpoint teacher_ckpt = load_checkpoint(teacher_path);
    unpack_generator(teacher_ckpt, st.teacher, "g");

    MetricsWriter mw;
    mw.open(o.out_dir + "/metrics.csv");
    mw.open_mask_log(o.out_dir + "/masks.csv", mask_names(st.student, "g"));
    std::string ckpt = o.out_dir + "/student.ckpt";
    int steps_per_epoch = data.size() / cfg.train.batch_size;
    auto hook = [&](const StepRecord& r) {
        mw.row(r.step, r.epoch, r.lr, r.losses, r.frozen_masks, r.mean_zero_fraction);
        mw.mask_row(r.step, r.mask_zero_fractions);
        if (r.step % steps_per_epoch == 0) {
            save_student(ckpt, st, cfg);
            char name[64];
            std::snprintf(name, sizeof name, "/student_samples/epoch_%03d.png", r.epoch);
            sample_grid(st.student, cfg.train.seed, o.out_dir + name);
        }
    };
    std::vector<StepRecord> records = train_student(st, cfg.train, data, hook);
    save_student(ckpt, st, cfg);
    mw.flush();

    int frozen = records.empty() ? 0 : records.back().frozen_masks;
    std::cout << "student checkpoint: " << ckpt << "\n"
              << "metrics: " << o.out_dir << "/metrics.csv (" << records.size() << " steps)\n"
              << "frozen masks: " << frozen << "/" << st.student.masks().size() << "\n";
    return 0;
}

int cmd_compress(const CommonOpts& o, const std::string& ckpt_opt, int trials) {
    HarnessConfig cfg = resolve(o);
    fs::create_directories(o.out_dir);
    std::string ckpt_path = ckpt_opt.empty() ? o.out_dir + "/student.ckpt" : ckpt_opt;
    Generator masked = load_generator(ckpt_path);
    if (!masked.cfg.masked) fail(ckpt_path + " already holds a pruned generator");

    Generator pruned = strip_and_rewire(masked);
    PruneReport report = make_prune_report(masked, pruned);
    double dev = equivalence_check(masked, pruned, trials, derive_seed(cfg.train.seed, "equiv"));

    Checkpoint c;
    c.meta["kind"] = "compressed";
    c.meta["pruned"] = true;
    c.meta["seed"] = cfg.train.seed;
    json hidden = json::array();
    for (auto [h1, h2] : hidden_widths(pruned)) hidden.push_back({h1, h2});
    c.meta["g_hidden"] = hidden;
    pack_generator(c, pruned, "g");
    // the shell rebuilds from the original (masked) architecture description
    c.meta["g_config"] = to_json(masked.cfg);
    save_checkpoint(o.out_dir + "/compressed.ckpt", c);

    std::ofstream csv(o.out_dir + "/prune_report.csv");
    csv << report.to_csv();
    std::ofstream txt(o.out_dir + "/prune_report.txt");
    txt << report.to_table();
    std::cout << report.to_table() << "max |masked - pruned| over " << trials
              << " trials: " << MetricsWriter::fmt(dev) << "\n"
              << "compressed checkpoint: " << o.out_dir << "/compressed.ckpt\n";
    return 0;
}

int cmd_generate(const CommonOpts& o, const std::string& ckpt_opt, const std::string& interpolate,
                 int steps, int cls_a, int cls_b) {
    HarnessConfig cfg = resolve(o);
    fs::create_directories(o.out_dir);
    std::string ckpt_path = ckpt_opt.empty() ? o.out_dir + "/student.ckpt" : ckpt_opt;
    Generator g = load_generator(ckpt_path);
    int num_classes = g.cfg.num_classes;
    if (cls_a < 0 || cls_a >= num_classes || cls_b < 0 || cls_b >= num_classes)
        fail("class index out of range; the generator has " + std::to_string(num_classes) +
             " classes");
    if (steps < 2) fail("interpolation needs at least 2 steps");
    Rng rng(derive_seed(cfg.train.seed, "generate"));

    if (interpolate.empty()) {
        std::string path = o.out_dir + "/samples.png";
        sample_grid(g, cfg.train.seed, path);
        std::cout << "wrote " << path << " (" << num_classes << " classes x 8)\n";
        return 0;
    }

    Tensor z({steps, g.cfg.z_dim});
    std::string path;
    ClassBatch cls = ClassBatch::hard({});
    if (interpolate == "z") {
        // straight line between two noise draws, class held fixed
        Tensor z0({g.cfg.z_dim}), z1({g.cfg.z_dim});
        rng.fill_normal(z0, 0.0, 1.0);
        rng.fill_normal(z1, 0.0, 1.0);
        for (int i = 0; i < steps; ++i) {
            float t = static_cast<float>(i) / static_cast<float>(steps - 1);
            for (int j = 0; j < g.cfg.z_dim; ++j) z[i * g.cfg.z_dim + j] = (1 - t) * z0[j] + t * z1[j];
        }
        cls = ClassBatch::hard(std::vector<int>(steps, cls_a));
        path = o.out_dir + "/interp_z.png";
    } else if (interpolate == "class") {
        // fixed noise, convex blend of the two class embeddings
        Tensor z0({g.cfg.z_dim});
        rng.fill_normal(z0, 0.0, 1.0);
        for (int i = 0; i < steps; ++i)
            for (int j = 0; j < g.cfg.z_dim; ++j) z[i * g.cfg.z_dim + j] = z0[j];
        Tensor w({steps, num_classes});
        for (int i = 0; i < steps; ++i) {
            float t = static_cast<float>(i) / static_cast<float>(steps - 1);
            w[i * num_classes + cls_a] += 1 - t;
            w[i * num_classes + cls_b] += t;
        }
        cls = ClassBatch::mixture(w);
        path = o.out_dir + "/interp_class.png";
    } else {
        fail("--interpolate expects z or class, got '" + interpolate + "'");
    }
    write_image_grid(path, render(g, z, cls), steps);
    std::cout << "wrote " << path << " (" << steps << " steps)\n";
    return 0;
}

int cmd_count(const CommonOpts& o, const std::string& ckpt_opt) {
    std::vector<LayerCount> rows;
    if (!ckpt_opt.empty()) {
        Generator g = load_generator(ckpt_opt);
        rows = count_generator(g);
    } else {
        HarnessConfig cfg = resolve(o);
        Generator g = build_generator<float>(cfg.student_config(), cfg.train.seed);
        rows = count_generator(g);
    }
    size_t width = 5;
    for (const LayerCount& r : rows) width = std::max(width, r.name.size());
    std::printf("%-*s %12s %14s %9s\n", static_cast<int>(width), "layer", "params", "macs",
                "channels");
    for (const LayerCount& r : rows)
        std::printf("%-*s %12lld %14lld %9d\n", static_cast<int>(width), r.name.c_str(), r.params,
                    r.macs, r.channels);
    std::printf("%-*s %12lld %14lld\n", static_cast<int>(width), "total", total_params(rows),
                total_macs(rows));
    return 0;
}

int cmd_gradcheck() {
    BlockSpec spec{4, 4, true};
    auto blk = build_gblock<double>(spec, 2, true, 0.7, 5.0, 0.005, 7, "blk");
    Rng rng(8);
    rng.fill_normal(blk.mask1.W, 0.0, 0.3);
    rng.fill_normal(blk.mask2.W, 0.0, 0.3);
    auto cls = ClassBatchT<double>::hard({0, 1});
    TensorD x({2, 4, 3, 3});
    Rng xrng(9);
    xrng.fill_normal(x, 0.0, 0.8);

    std::vector<std::pair<std::string, TensorD>> leaves = {
        {"input", x},
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
        return ops::sum_all(ops::square(blk.forward(ctx, v[0], cls)));
    });
    const double tol = 1e-4;
    bool ok = true;
    for (const auto& b : report.blocks) {
        bool pass = b.max_rel_err < tol;
        ok = ok && pass;
        std::printf("%-14s max rel err %.3e  %s\n", b.name.c_str(), b.max_rel_err,
                    pass ? "ok" : "FAIL");
    }
    std::printf("gradcheck %s (tolerance %.0e)\n", ok ? "passed" : "FAILED", tol);
    return ok ? 0 : 1;
}

int cmd_sweep_alpha(const CommonOpts& o, const std::string& teacher_path_opt) {
    HarnessConfig base = resolve(o);
    fs::create_directories(o.out_dir);
    std::string teacher_path =
        teacher_path_opt.empty() ? o.out_dir + "/teacher.ckpt" : teacher_path_opt;
    GenConfig teacher_cfg = teacher_config_from(teacher_path);
    Checkpoint teacher_ckpt = load_checkpoint(teacher_path);
    SyntheticDataset data = dataset_of(base);

    std::ofstream summary(o.out_dir + "/sweep_summary.csv");
    summary << "alpha,frozen_masks,total_masks,mean_zero_fraction,pruned_params\n";
    for (double alpha : {0.5, 0.6, 0.7, 0.8}) {
        HarnessConfig cfg = base;
        cfg.train.alpha = alpha;
        char sub[32];
        std::snprintf(sub, sizeof sub, "/alpha_%.1f", alpha);
        std::string dir = o.out_dir + sub;
        fs::create_directories(dir);

        TrainState st = make_train_state(cfg.student_config(), teacher_cfg, cfg.disc_config(),
                                         cfg.train);
        unpack_generator(teacher_ckpt, st.teacher, "g");
        MetricsWriter mw;
        mw.open(dir + "/metrics.csv");
        mw.open_mask_log(dir + "/masks.csv", mask_names(st.student, "g"));
        auto hook = [&](const StepRecord& r) {
            mw.row(r.step, r.epoch, r.lr, r.losses, r.frozen_masks, r.mean_zero_fraction);
            mw.mask_row(r.step, r.mask_zero_fractions);
        };
        std::vector<StepRecord> records = train_student(st, cfg.train, data, hook);
        save_student(dir + "/student.ckpt", st, cfg);
        mw.flush();

        const StepRecord& last = records.back();
        summary << MetricsWriter::fmt(alpha) << "," << last.frozen_masks << ","
                << st.student.masks().size() << "," << MetricsWriter::fmt(last.mean_zero_fraction)
                << ",";
        if (st.student.all_masks_frozen()) {
            Generator pruned = strip_and_rewire(st.student);
            summary << total_params(count_generator(pruned));
        }
        summary << "\n";
        std::cout << "alpha " << alpha << ": " << last.frozen_masks << "/"
                  << st.student.masks().size() << " masks frozen, mean zero fraction "
                  << MetricsWriter::fmt(last.mean_zero_fraction) << "\n";
    }
    std::cout << "summary: " << o.out_dir << "/sweep_summary.csv\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"progressive channel pruning with class-aware distillation for conditional GANs"};
    app.require_subcommand(1);

    CommonOpts tt_opts;
    CLI::App* tt = app.add_subcommand("teacher-train", "adversarially pretrain the wide teacher");
    add_common(tt, tt_opts);

    CommonOpts tr_opts;
    std::string tr_teacher;
    CLI::App* tr = app.add_subcommand("train", "train the masked student against the teacher");
    add_common(tr, tr_opts);
    tr->add_option("--teacher", tr_teacher, "teacher checkpoint (default OUT/teacher.ckpt)");

    CommonOpts co_opts;
    std::string co_ckpt;
    int co_trials = 20;
    CLI::App* co = app.add_subcommand("compress", "strip frozen masks into a dense generator");
    add_common(co, co_opts);
    co->add_option("--checkpoint", co_ckpt, "student checkpoint (default OUT/student.ckpt)");
    co->add_option("--trials", co_trials, "equivalence check draws")->capture_default_str();

    CommonOpts ge_opts;
    std::string ge_ckpt, ge_interp;
    int ge_steps = 8, ge_cls_a = 0, ge_cls_b = 1;
    CLI::App* ge = app.add_subcommand("generate", "sample images or interpolations");
    add_common(ge, ge_opts);
    ge->add_option("--checkpoint", ge_ckpt, "generator checkpoint (default OUT/student.ckpt)");
    ge->add_option("--interpolate", ge_interp, "z|class");
    ge->add_option("--steps", ge_steps, "interpolation steps")->capture_default_str();
    ge->add_option("--class-a", ge_cls_a, "first class")->capture_default_str();
    ge->add_option("--class-b", ge_cls_b, "second class")->capture_default_str();

    CommonOpts cn_opts;
    std::string cn_ckpt;
    CLI::App* cn = app.add_subcommand("count", "per-layer parameter and MAC table");
    add_common(cn, cn_opts);
    cn->add_option("--checkpoint", cn_ckpt, "count a saved generator instead of the config build");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of a masked block");

    CommonOpts sw_opts;
    std::string sw_teacher;
    CLI::App* sw = app.add_subcommand("sweep-alpha", "train at alpha 0.5/0.6/0.7/0.8");
    add_common(sw, sw_opts);
    sw->add_option("--teacher", sw_teacher, "teacher checkpoint (default OUT/teacher.ckpt)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (tt->parsed()) return cmd_teacher_train(tt_opts);
        if (tr->parsed()) return cmd_train(tr_opts, tr_teacher);
        if (co->parsed()) return cmd_compress(co_opts, co_ckpt, co_trials);
        if (ge->parsed()) return cmd_generate(ge_opts, ge_ckpt, ge_interp, ge_steps, ge_cls_a,
                                              ge_cls_b);
        if (cn->parsed()) return cmd_count(cn_opts, cn_ckpt);
        if (gc->parsed()) return cmd_gradcheck();
        if (sw->parsed()) return cmd_sweep_alpha(sw_opts, sw_teacher);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
