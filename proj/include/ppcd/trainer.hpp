#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ppcd/dataset.hpp"
#include "ppcd/losses.hpp"
#include "ppcd/optim.hpp"

namespace ppcd {

enum class Ablation { full, no_pp, no_cd, two_step };

inline Ablation ablation_from_string(const std::string& s) {
    if (s == "full") return Ablation::full;
    if (s == "no_pp") return Ablation::no_pp;
    if (s == "no_cd") return Ablation::no_cd;
    if (s == "two_step") return Ablation::two_step;
    fail("unknown ablation '" + s + "'; expected full, no_pp, no_cd or two_step");
}

inline const char* to_string(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_pp: return "no_pp";
        case Ablation::no_cd: return "no_cd";
        default: return "two_step";
    }
}

struct TrainConfig {
    int epochs = 100;
    double base_lr = 2e-4;  // 0.1 mirrors the reference schedule; 2e-4 is the desk default
    std::vector<int> lr_drop_epochs = {30, 60, 90};
    double lr_drop_factor = 10.0;
    int batch_size = 8;
    int grad_accum_steps = 2;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double pp_weight = 0.01;
    uint64_t seed = 1;
    Ablation ablation = Ablation::full;
    AdvLoss adv = AdvLoss::non_saturating;
    double alpha = 0.7;
    double delta = 1000.0;
    double pivot = 0.005;
    bool stop_after_freeze = false;  // halt once every mask is frozen

    void validate() const {
        if (epochs <= 0) fail("training needs epochs > 0");
        if (batch_size < 1) fail("training needs batch_size >= 1");
        if (grad_accum_steps < 1) fail("training needs grad_accum_steps >= 1");
        if (batch_size % grad_accum_steps != 0)
            fail("batch_size must be divisible by grad_accum_steps");
        for (size_t k = 0; k + 1 < lr_drop_epochs.size(); ++k)
            if (lr_drop_epochs[k] > lr_drop_epochs[k + 1])
                fail("lr drop epochs must be sorted ascending");
        if (base_lr <= 0 || lr_drop_factor <= 0) fail("learning rates must be positive");
        if (alpha <= 0 || alpha > 1) fail("alpha must lie in (0, 1]");
        if (delta <= 0) fail("delta must be positive");
        if (pivot <= 0 || pivot >= 1) fail("pivot must lie in (0, 1)");
    }

    double lr(int epoch) const {
        return lr_at_epoch(base_lr, lr_drop_epochs, lr_drop_factor, epoch, epochs);
    }
};

// Models and optimizer state for a student run. The teacher is loaded frozen;
// the distillation normalizers train jointly with the student.
struct TrainState {
    GenConfig student_cfg, teacher_cfg;
    DiscConfig disc_cfg;
    Generator student, teacher;
    Discriminator disc;
    DistillHead head;
    Adam opt_g, opt_d;
    int step = 0;
    int epoch = 0;
};

// Per-step readings surfaced to metrics and tests.
struct StepRecord {
    int step = 0;
    int epoch = 0;
    double lr = 0;
    LossBundle losses;
    int frozen_masks = 0;
    double mean_zero_fraction = 0;
    int zero_norm_guards = 0;
    std::vector<double> mask_zero_fractions;
};

using StepHook = std::function<void(const StepRecord&)>;

TrainState make_train_state(const GenConfig& student_cfg, const GenConfig& teacher_cfg,
                            const DiscConfig& disc_cfg, const TrainConfig& cfg);

// One alternating update: D step, then G step accumulated over micro-batches,
// then binarization checks on every live mask. `phase_cd`/`phase_pp` gate the
// distillation and pruning terms (ablations and two-step phases).
LossBundle train_step(TrainState& st, const TrainConfig& cfg, const Tensor& real,
                      const std::vector<int>& labels, Rng& noise_rng, double lr, bool phase_pp,
                      bool phase_cd, int* zero_norm_guards = nullptr);

// Full student run over the dataset. Returns every per-step record.
std::vector<StepRecord> train_student(TrainState& st, const TrainConfig& cfg,
                                      const SyntheticDataset& data,
                                      const StepHook& hook = nullptr);

// Adversarial pretraining of the wide teacher (no masks, no distillation).
std::vector<StepRecord> teacher_train(Generator& teacher, Discriminator& disc,
                                      const TrainConfig& cfg, const SyntheticDataset& data,
                                      const StepHook& hook = nullptr);

}  // namespace ppcd
