#include "ppcd/trainer.hpp"

#include <cmath>
#include <numeric>
#include <unordered_map>

namespace ppcd {
namespace {

// Deterministic Fisher-Yates; std::shuffle leaves the permutation up to the
// library, which would break run-to-run reproducibility guarantees.
std::vector<int> shuffled_indices(int n, uint64_t seed) {
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (int i = n - 1; i > 0; --i) {
        int j = rng.uniform_int(0, i);
        std::swap(idx[i], idx[j]);
    }
    return idx;
}

double scalar_of(const Var& v) { return static_cast<double>(v.value()[0]); }

// Gradient sums keyed by parameter pointer, kept in first-use order so the
// optimizer walk is reproducible.
struct GradAccum {
    std::vector<Tensor*> order;
    std::unordered_map<Tensor*, Tensor> sums;

    void add(Tape& tape, Ctx& ctx) {
        for (auto& [ptr, var] : ctx.bound) {
            Tensor g = tape.grad_of(var);
            auto it = sums.find(ptr);
            if (it == sums.end()) {
                order.push_back(ptr);
                sums.emplace(ptr, std::move(g));
            } else {
                Tensor& acc = it->second;
                for (int64_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
            }
        }
    }

    void apply(Adam& opt, const ParamList& registry, double scale, double lr) {
        std::unordered_map<const Tensor*, const ParamRefT<float>*> by_ptr;
        for (const auto& p : registry) by_ptr.emplace(p.tensor, &p);
        ParamList params;
        std::vector<Tensor> grads;
        params.reserve(order.size());
        grads.reserve(order.size());
        for (Tensor* t : order) {
            auto it = by_ptr.find(t);
            if (it == by_ptr.end()) fail("gradient reached a parameter missing from the registry");
            params.push_back(*it->second);
            Tensor g = std::move(sums.at(t));
            if (scale != 1.0)
                for (int64_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(g[i] * scale);
            grads.push_back(std::move(g));
        }
        opt.step(params, grads, static_cast<float>(lr));
    }
};

// One alternating update. `teacher`/`head` are null for plain adversarial
// runs (teacher pretraining).
LossBundle step_impl(Generator& gen, Generator* teacher, DistillHead* head, Discriminator& disc,
                     Adam& opt_g, Adam& opt_d, const TrainConfig& cfg, const Tensor& real,
                     const std::vector<int>& labels, Rng& noise_rng, double lr, bool phase_pp,
                     bool phase_cd, int* zero_norm_guards, int step_tag) {
    if (real.rank() != 4 || real.dim(0) == 0) fail("training batch must be (B,C,H,W)");
    int B = real.dim(0);
    if (static_cast<int>(labels.size()) != B) fail("labels do not match the batch");
    if (B % cfg.grad_accum_steps != 0)
        fail("batch of " + std::to_string(B) + " does not split into " +
             std::to_string(cfg.grad_accum_steps) + " micro-batches");
    const int zdim = gen.cfg.z_dim;
    const int num_classes = gen.cfg.num_classes;
    LossBundle out;

    // critic step on the full batch; fakes are sampled on a throwaway tape so
    // the critic pass never backpropagates into the generator
    {
        Tensor fake_img;
        std::vector<int> fake_cls(B);
        {
            Tape gtape;
            Ctx g_ctx(&gtape, false, true, false);
            Tensor z({B, zdim});
            noise_rng.fill_normal(z, 0.0, 1.0);
            for (int& c : fake_cls) c = noise_rng.uniform_int(0, num_classes - 1);
            fake_img = gen.forward(g_ctx, gtape.leaf(z), ClassBatch::hard(fake_cls)).image.value();
        }
        Tape tape;
        Ctx d_ctx(&tape, true, true, true);
        Var d_real = disc.forward(d_ctx, tape.leaf(real), ClassBatch::hard(labels));
        Var d_fake = disc.forward(d_ctx, tape.leaf(fake_img), ClassBatch::hard(fake_cls));
        auto pair = adversarial_losses(d_real, d_fake, cfg.adv);
        tape.backward(pair.d);
        GradAccum acc;
        acc.add(tape, d_ctx);
        ParamList registry;
        disc.collect_params("d", registry);
        acc.apply(opt_d, registry, 1.0, lr);
        out.l_adv_d = scalar_of(pair.d);
    }

    // generator step, gradients averaged over micro-batches
    std::vector<MaskState*> masks = gen.masks();
    const int micro = B / cfg.grad_accum_steps;
    GradAccum acc;
    double sum_pp = 0, sum_cd = 0, sum_adv = 0, sum_total = 0;
    for (int a = 0; a < cfg.grad_accum_steps; ++a) {
        Tape tape;
        Ctx s_ctx(&tape, true, true, true);
        Ctx d_ctx(&tape, false, true, false);
        Tensor z({micro, zdim});
        noise_rng.fill_normal(z, 0.0, 1.0);
        std::vector<int> cls(micro);
        for (int& c : cls) c = noise_rng.uniform_int(0, num_classes - 1);
        ClassBatch cb = ClassBatch::hard(cls);
        Var zv = tape.leaf(z);
        auto student_out = gen.forward(s_ctx, zv, cb);

        Var l_pp = phase_pp && !masks.empty() ? aggregate_pp(s_ctx, masks)
                                              : s_ctx.constant(Tensor::scalar(0.0f));
        Var l_cd = s_ctx.constant(Tensor::scalar(0.0f));
        if (phase_cd && teacher != nullptr && head != nullptr) {
            Ctx t_ctx(&tape, false, false, false);
            auto teacher_out = teacher->forward(t_ctx, zv, cb);
            std::vector<Var> teacher_taps;
            teacher_taps.reserve(teacher_out.taps.size());
            // re-leaf the taps so the backward sweep stops at the teacher
            for (Var& t : teacher_out.taps) teacher_taps.push_back(tape.leaf(t.value()));
            l_cd = head->forward(s_ctx, teacher_taps, student_out.taps, cb, zero_norm_guards);
        }
        Var d_fake = disc.forward(d_ctx, student_out.image, cb);
        // the g branch reads only the fake logits
        Var l_adv_g = adversarial_losses(d_fake, d_fake, cfg.adv).g;
        Var total = total_loss(l_pp, l_cd, l_adv_g, static_cast<float>(cfg.pp_weight));
        tape.backward(total);
        acc.add(tape, s_ctx);
        sum_pp += scalar_of(l_pp);
        sum_cd += scalar_of(l_cd);
        sum_adv += scalar_of(l_adv_g);
        sum_total += scalar_of(total);
    }
    ParamList registry;
    gen.collect_params("g", registry);
    if (head != nullptr) head->collect_params("head", registry);
    acc.apply(opt_g, registry, 1.0 / cfg.grad_accum_steps, lr);

    out.l_pp = sum_pp / cfg.grad_accum_steps;
    out.l_cd = sum_cd / cfg.grad_accum_steps;
    out.l_adv_g = sum_adv / cfg.grad_accum_steps;
    out.total_g = sum_total / cfg.grad_accum_steps;
    if (!std::isfinite(out.l_pp) || !std::isfinite(out.l_cd) || !std::isfinite(out.l_adv_d) ||
        !std::isfinite(out.l_adv_g) || !std::isfinite(out.total_g))
        fail("non-finite loss at step " + std::to_string(step_tag) +
             "; restart from the last epoch checkpoint");

    // pruning phase only: masks may flip to their binary form after the update
    if (phase_pp)
        for (MaskState* m : masks) binarize_check(*m);
    return out;
}

using StepFn = std::function<LossBundle(const Tensor&, const std::vector<int>&, Rng&, double, int,
                                        int*)>;

std::vector<StepRecord> run_loop(Generator& gen, const TrainConfig& cfg,
                                 const SyntheticDataset& data, const StepHook& hook, int& step_io,
                                 int& epoch_io, const StepFn& do_step) {
    cfg.validate();
    if (data.size() < cfg.batch_size) fail("dataset smaller than one batch");
    if (gen.cfg.image_size() != data.image_size)
        fail("generator emits " + std::to_string(gen.cfg.image_size()) + "x" +
             std::to_string(gen.cfg.image_size()) + " but the dataset holds " +
             std::to_string(data.image_size) + "x" + std::to_string(data.image_size));
    if (gen.cfg.num_classes != data.num_classes)
        fail("generator and dataset disagree on the class count");

    Rng noise_rng(derive_seed(cfg.seed, "noise"));
    std::vector<StepRecord> records;
    const int steps_per_epoch = data.size() / cfg.batch_size;
    for (int epoch = epoch_io; epoch < cfg.epochs; ++epoch) {
        epoch_io = epoch;
        double lr = cfg.lr(epoch);
        std::vector<int> order =
            shuffled_indices(data.size(), derive_seed(cfg.seed, "shuffle." + std::to_string(epoch)));
        for (int b = 0; b < steps_per_epoch; ++b) {
            std::vector<int> take(order.begin() + static_cast<size_t>(b) * cfg.batch_size,
                                  order.begin() + static_cast<size_t>(b + 1) * cfg.batch_size);
            Tensor real = data.gather(take);
            std::vector<int> labels = data.gather_labels(take);
            int guards = 0;
            LossBundle lb = do_step(real, labels, noise_rng, lr, epoch, &guards);
            ++step_io;

            StepRecord rec;
            rec.step = step_io;
            rec.epoch = epoch;
            rec.lr = lr;
            rec.losses = lb;
            rec.zero_norm_guards = guards;
            std::vector<MaskState*> masks = gen.masks();
            for (MaskState* m : masks) {
                if (m->frozen) ++rec.frozen_masks;
                double zf = m->zero_fraction();
                rec.mask_zero_fractions.push_back(zf);
                rec.mean_zero_fraction += zf;
            }
            if (!masks.empty()) rec.mean_zero_fraction /= static_cast<double>(masks.size());
            if (hook) hook(rec);
            records.push_back(std::move(rec));
            if (cfg.stop_after_freeze && !masks.empty() && gen.all_masks_frozen()) return records;
        }
    }
    return records;
}

}  // namespace

TrainState make_train_state(const GenConfig& student_cfg, const GenConfig& teacher_cfg,
                            const DiscConfig& disc_cfg, const TrainConfig& cfg) {
    cfg.validate();
    GenConfig scfg = student_cfg;
    // the trainer owns the pruning knobs; the config file sets them once
    scfg.alpha = cfg.alpha;
    scfg.delta = cfg.delta;
    scfg.pivot = cfg.pivot;
    scfg.validate();
    teacher_cfg.validate();
    disc_cfg.validate();
    if (scfg.image_size() != teacher_cfg.image_size())
        fail("teacher and student must emit the same image size");

    TrainState st;
    st.student_cfg = scfg;
    st.teacher_cfg = teacher_cfg;
    st.disc_cfg = disc_cfg;
    st.student = build_generator<float>(scfg, derive_seed(cfg.seed, "student"));
    st.teacher = build_generator<float>(teacher_cfg, derive_seed(cfg.seed, "teacher"));
    st.disc = build_discriminator<float>(disc_cfg, derive_seed(cfg.seed, "disc"));
    st.head = build_distill_head<float>(scfg, teacher_cfg);
    st.opt_g.beta1 = st.opt_d.beta1 = static_cast<float>(cfg.beta1);
    st.opt_g.beta2 = st.opt_d.beta2 = static_cast<float>(cfg.beta2);
    st.opt_g.eps = st.opt_d.eps = static_cast<float>(cfg.adam_eps);
    return st;
}

LossBundle train_step(TrainState& st, const TrainConfig& cfg, const Tensor& real,
                      const std::vector<int>& labels, Rng& noise_rng, double lr, bool phase_pp,
                      bool phase_cd, int* zero_norm_guards) {
    return step_impl(st.student, &st.teacher, &st.head, st.disc, st.opt_g, st.opt_d, cfg, real,
                     labels, noise_rng, lr, phase_pp, phase_cd, zero_norm_guards, st.step);
}

std::vector<StepRecord> train_student(TrainState& st, const TrainConfig& cfg,
                                      const SyntheticDataset& data, const StepHook& hook) {
    auto do_step = [&](const Tensor& real, const std::vector<int>& labels, Rng& rng, double lr,
                       int epoch, int* guards) {
        bool pp = true, cd = true;
        switch (cfg.ablation) {
            case Ablation::full: break;
            case Ablation::no_pp: pp = false; break;
            case Ablation::no_cd: cd = false; break;
            case Ablation::two_step: {
                // phase 1 prunes; phase 2 distills once every mask is frozen
                // or half the epoch budget is spent
                bool phase2 = st.student.all_masks_frozen() || epoch >= cfg.epochs / 2;
                pp = !phase2;
                cd = phase2;
                break;
            }
        }
        return train_step(st, cfg, real, labels, rng, lr, pp, cd, guards);
    };
    return run_loop(st.student, cfg, data, hook, st.step, st.epoch, do_step);
}

std::vector<StepRecord> teacher_train(Generator& teacher, Discriminator& disc,
                                      const TrainConfig& cfg, const SyntheticDataset& data,
                                      const StepHook& hook) {
    if (!teacher.masks().empty()) fail("teacher must be an unmasked generator");
    Adam opt_g, opt_d;
    opt_g.beta1 = opt_d.beta1 = static_cast<float>(cfg.beta1);
    opt_g.beta2 = opt_d.beta2 = static_cast<float>(cfg.beta2);
    opt_g.eps = opt_d.eps = static_cast<float>(cfg.adam_eps);
    int step = 0, epoch = 0;
    auto do_step = [&](const Tensor& real, const std::vector<int>& labels, Rng& rng, double lr,
                       int, int* guards) {
        return step_impl(teacher, nullptr, nullptr, disc, opt_g, opt_d, cfg, real, labels, rng, lr,
                         false, false, guards, step);
    };
    return run_loop(teacher, cfg, data, hook, step, epoch, do_step);
}

}  // namespace ppcd
