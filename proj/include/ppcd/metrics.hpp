#pragma once

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ppcd/losses.hpp"

namespace ppcd {

// Appends one CSV row per training step; the column layout is fixed so logs
// from different runs diff cleanly. A sidecar file carries per-mask zero
// fractions under the mask names.
class MetricsWriter {
  public:
    MetricsWriter() = default;

    void open(const std::string& path) {
        out_.open(path);
        if (!out_) fail("cannot open metrics file " + path);
        out_ << "step,epoch,lr,l_pp,l_cd,l_adv_d,l_adv_g,total,frozen_masks,mean_zero_fraction\n";
    }

    void open_mask_log(const std::string& path, const std::vector<std::string>& mask_names) {
        mask_out_.open(path);
        if (!mask_out_) fail("cannot open mask log " + path);
        mask_out_ << "step";
        for (const std::string& n : mask_names) mask_out_ << "," << n;
        mask_out_ << "\n";
        mask_cols_ = mask_names.size();
    }

    void row(int step, int epoch, double lr, const LossBundle& l, int frozen_masks,
             double mean_zero_fraction) {
        if (!out_.is_open()) fail("metrics stream not open");
        out_ << step << "," << epoch << "," << fmt(lr) << "," << fmt(l.l_pp) << ","
             << fmt(l.l_cd) << "," << fmt(l.l_adv_d) << "," << fmt(l.l_adv_g) << ","
             << fmt(l.total_g) << "," << frozen_masks << "," << fmt(mean_zero_fraction) << "\n";
        if (!out_) fail("failed while writing metrics");
    }

    void mask_row(int step, const std::vector<double>& fractions) {
        if (!mask_out_.is_open()) return;
        if (fractions.size() != mask_cols_) fail("mask log column count changed");
        mask_out_ << step;
        for (double f : fractions) mask_out_ << "," << fmt(f);
        mask_out_ << "\n";
    }

    void flush() {
        if (out_.is_open()) out_.flush();
        if (mask_out_.is_open()) mask_out_.flush();
    }

    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.9g", v);
        return buf;
    }

  private:
    std::ofstream out_, mask_out_;
    size_t mask_cols_ = 0;
};

}  // namespace ppcd
