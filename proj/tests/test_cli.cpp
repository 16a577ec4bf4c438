#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::string& scratch() {
    static const std::string dir = [] {
        std::string d = "/tmp/ppcd_cli_" + std::to_string(getpid());
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

struct CmdResult {
    int code = -1;
    std::string output;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

CmdResult run_cli(const std::string& args) {
    std::string log = scratch() + "/cmd_output.txt";
    std::string cmd = std::string(PPCD_CLI_PATH) + " " + args + " > " + log + " 2>&1";
    int rc = std::system(cmd.c_str());
    CmdResult r;
    r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    r.output = slurp(log);
    return r;
}

json base_config() {
    return json{{"num_classes", 4}, {"image_size", 16}, {"per_class", 4},   {"z_dim", 8},
                {"width", 8},       {"epochs", 2},      {"batch_size", 4},  {"grad_accum_steps", 2},
                {"base_lr", 0.002}, {"pp_weight", 5.0}, {"seed", 9},        {"data_seed", 7},
                {"lr_drop_epochs", json::array({1})}};
}

json freeze_config() {
    json j = base_config();
    j["epochs"] = 20;
    j["base_lr"] = 0.05;
    j["pp_weight"] = 50.0;
    j["lr_drop_epochs"] = json::array();
    j["stop_after_freeze"] = true;
    return j;
}

std::string write_config(const std::string& name, const json& j) {
    std::string path = scratch() + "/" + name;
    std::ofstream out(path);
    out << j.dump(2);
    return path;
}

bool is_png(const std::string& path) {
    std::string d = slurp(path);
    static const unsigned char magic[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (d.size() < 24) return false;
    for (int i = 0; i < 8; ++i)
        if (static_cast<unsigned char>(d[i]) != magic[i]) return false;
    return true;
}

int png_width(const std::string& path) {
    std::string d = slurp(path);
    REQUIRE(d.size() >= 24);
    auto b = [&](int i) { return static_cast<int>(static_cast<unsigned char>(d[i])); };
    return (b(16) << 24) | (b(17) << 16) | (b(18) << 8) | b(19);
}

std::vector<std::string> csv_lines(const std::string& path) {
    std::ifstream in(path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    return cells;
}

// teacher shared by the pipeline cases; trained once
const std::string& teacher_dir() {
    static const std::string dir = [] {
        std::string d = scratch() + "/teacher_run";
        std::string cfg = write_config("base.json", base_config());
        CmdResult r = run_cli("teacher-train --config " + cfg + " --out " + d);
        REQUIRE(r.code == 0);
        return d;
    }();
    return dir;
}

}  // namespace

TEST_CASE("teacher-train writes checkpoint, metrics and sample grids") {
    const std::string& dir = teacher_dir();
    CHECK(fs::exists(dir + "/teacher.ckpt"));
    std::vector<std::string> lines = csv_lines(dir + "/teacher_metrics.csv");
    REQUIRE(lines.size() == 9);  // header + 2 epochs x 4 steps
    CHECK(lines[0] ==
          "step,epoch,lr,l_pp,l_cd,l_adv_d,l_adv_g,total,frozen_masks,mean_zero_fraction");
    for (size_t i = 1; i < lines.size(); ++i) {
        std::vector<std::string> cells = split_csv(lines[i]);
        REQUIRE(cells.size() == 10);
        CHECK(cells[3] == "0");  // adversarial pretraining has no pruning term
        CHECK(cells[4] == "0");
    }
    CHECK(is_png(dir + "/teacher_samples/epoch_000.png"));
    CHECK(is_png(dir + "/teacher_samples/epoch_001.png"));
    CHECK(png_width(dir + "/teacher_samples/epoch_000.png") == 8 * 16);
}

TEST_CASE("train, compress and the pipeline artifacts") {
    std::string cfg = write_config("freeze.json", freeze_config());
    std::string d1 = scratch() + "/pipe1";
    std::string d2 = scratch() + "/pipe2";
    std::string teacher = teacher_dir() + "/teacher.ckpt";

    for (const std::string& d : {d1, d2}) {
        CmdResult train = run_cli("train --config " + cfg + " --out " + d + " --teacher " + teacher);
        REQUIRE(train.code == 0);
        CHECK(fs::exists(d + "/student.ckpt"));
        CmdResult comp = run_cli("compress --config " + cfg + " --out " + d);
        REQUIRE(comp.code == 0);
        CHECK(comp.output.find("compression:") != std::string::npos);
        CHECK(fs::exists(d + "/compressed.ckpt"));
        CHECK(fs::exists(d + "/prune_report.csv"));
        CHECK(fs::exists(d + "/prune_report.txt"));
    }

    // metrics column layout
    std::vector<std::string> lines = csv_lines(d1 + "/metrics.csv");
    REQUIRE(lines.size() >= 2);
    CHECK(lines[0] ==
          "step,epoch,lr,l_pp,l_cd,l_adv_d,l_adv_g,total,frozen_masks,mean_zero_fraction");
    std::vector<std::string> mask_lines = csv_lines(d1 + "/masks.csv");
    CHECK(split_csv(mask_lines[0]).size() == 11);  // step + 10 masks

    // one build, one seed: byte-identical metrics and prune reports
    CHECK(slurp(d1 + "/metrics.csv") == slurp(d2 + "/metrics.csv"));
    CHECK(slurp(d1 + "/prune_report.csv") == slurp(d2 + "/prune_report.csv"));
    CHECK(slurp(d1 + "/compressed.ckpt") == slurp(d2 + "/compressed.ckpt"));

    std::vector<std::string> report = csv_lines(d1 + "/prune_report.csv");
    CHECK(report[0] ==
          "name,params_before,params_after,macs_before,macs_after,channels_before,channels_after");

    // compress refuses a second pass over an already pruned checkpoint
    CmdResult again =
        run_cli("compress --config " + cfg + " --out " + d1 + " --checkpoint " + d1 +
                "/compressed.ckpt");
    CHECK(again.code != 0);
    CHECK(again.output.find("pruned") != std::string::npos);
}

TEST_CASE("generate emits grids and interpolation strips") {
    std::string cfg = write_config("freeze.json", freeze_config());
    std::string d = scratch() + "/pipe1";  // produced by the pipeline case
    REQUIRE(fs::exists(d + "/student.ckpt"));

    CmdResult plain = run_cli("generate --config " + cfg + " --out " + d);
    REQUIRE(plain.code == 0);
    CHECK(is_png(d + "/samples.png"));
    CHECK(png_width(d + "/samples.png") == 8 * 16);

    CmdResult iz = run_cli("generate --config " + cfg + " --out " + d + " --interpolate z --steps 5");
    REQUIRE(iz.code == 0);
    CHECK(png_width(d + "/interp_z.png") == 5 * 16);

    CmdResult ic = run_cli("generate --config " + cfg + " --out " + d +
                           " --interpolate class --steps 7 --class-a 0 --class-b 3");
    REQUIRE(ic.code == 0);
    CHECK(png_width(d + "/interp_class.png") == 7 * 16);

    // compressed checkpoints generate too
    CmdResult comp = run_cli("generate --config " + cfg + " --out " + d + " --checkpoint " + d +
                             "/compressed.ckpt");
    CHECK(comp.code == 0);

    CmdResult bad = run_cli("generate --config " + cfg + " --out " + d + " --interpolate spiral");
    CHECK(bad.code != 0);
    CmdResult bad_cls = run_cli("generate --config " + cfg + " --out " + d + " --class-a 11");
    CHECK(bad_cls.code != 0);
}

TEST_CASE("count prints the layer table") {
    std::string cfg = write_config("base.json", base_config());
    CmdResult r = run_cli("count --config " + cfg);
    REQUIRE(r.code == 0);
    CHECK(r.output.find("g.stem") != std::string::npos);
    CHECK(r.output.find("g.block0.conv1") != std::string::npos);
    CHECK(r.output.find("total") != std::string::npos);

    std::string d = scratch() + "/pipe1";
    CmdResult ck = run_cli("count --checkpoint " + d + "/compressed.ckpt");
    REQUIRE(ck.code == 0);
    CHECK(ck.output.find("total") != std::string::npos);
}

TEST_CASE("gradcheck subcommand passes") {
    CmdResult r = run_cli("gradcheck");
    CHECK(r.code == 0);
    CHECK(r.output.find("gradcheck passed") != std::string::npos);
}

TEST_CASE("ablation flag gates the pruning column") {
    std::string cfg = write_config("base.json", base_config());
    std::string d = scratch() + "/ablate";
    std::string teacher = teacher_dir() + "/teacher.ckpt";
    CmdResult r = run_cli("train --config " + cfg + " --out " + d + " --teacher " + teacher +
                          " --ablation no_pp");
    REQUIRE(r.code == 0);
    std::vector<std::string> lines = csv_lines(d + "/metrics.csv");
    REQUIRE(lines.size() >= 2);
    for (size_t i = 1; i < lines.size(); ++i) {
        std::vector<std::string> cells = split_csv(lines[i]);
        CHECK(cells[3] == "0");  // l_pp
        CHECK(cells[8] == "0");  // frozen_masks
    }
}

TEST_CASE("sweep-alpha emits one directory per threshold") {
    std::string cfg = write_config("freeze.json", freeze_config());
    std::string d = scratch() + "/sweep";
    fs::create_directories(d);
    fs::copy_file(teacher_dir() + "/teacher.ckpt", d + "/teacher.ckpt",
                  fs::copy_options::overwrite_existing);
    CmdResult r = run_cli("sweep-alpha --config " + cfg + " --out " + d);
    REQUIRE(r.code == 0);
    for (const char* a : {"0.5", "0.6", "0.7", "0.8"}) {
        CHECK(fs::exists(d + "/alpha_" + std::string(a) + "/metrics.csv"));
        CHECK(fs::exists(d + "/alpha_" + std::string(a) + "/student.ckpt"));
    }
    std::vector<std::string> lines = csv_lines(d + "/sweep_summary.csv");
    REQUIRE(lines.size() == 5);
    CHECK(split_csv(lines[0])[0] == "alpha");
}

TEST_CASE("bad invocations exit nonzero with usage") {
    CmdResult none = run_cli("");
    CHECK(none.code != 0);
    CHECK(none.output.find("Usage") != std::string::npos);

    CmdResult unknown = run_cli("frobnicate");
    CHECK(unknown.code != 0);
    CHECK(unknown.output.find("Usage") != std::string::npos);

    CmdResult bad_flag = run_cli("count --no-such-flag");
    CHECK(bad_flag.code != 0);

    CmdResult bad_ablation = run_cli("train --ablation sideways --out " + scratch() + "/x");
    CHECK(bad_ablation.code != 0);
    CHECK(bad_ablation.output.find("unknown ablation") != std::string::npos);

    CmdResult missing_teacher = run_cli("train --out " + scratch() + "/empty_dir");
    CHECK(missing_teacher.code != 0);

    CmdResult bad_config = run_cli("count --config /nonexistent/cfg.json");
    CHECK(bad_config.code != 0);
}
