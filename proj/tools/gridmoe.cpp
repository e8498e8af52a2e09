// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// gridmoe command-line tool. Talks to the library only through the C API.
// Exit codes: 0 success, 2 invalid configuration or usage, 3 runtime abort.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gridmoe/gridmoe.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int exit_code(gm_status status) {
    switch (status) {
        case GM_OK: return kExitOk;
        case GM_ERR_INVALID_ARGUMENT:
        case GM_ERR_CONFIG:
        case GM_ERR_OUTPUT_EXISTS: return kExitConfig;
        case GM_ERR_RUNTIME:
        case GM_ERR_IO: return kExitRuntime;
    }
    return kExitRuntime;
}

int report(gm_status status) {
    if (status != GM_OK) std::cerr << "error: " << gm_last_error() << '\n';
    return exit_code(status);
}

struct ConfigDeleter {
    void operator()(gm_config* c) const { gm_config_free(c); }
};
using ConfigPtr = std::unique_ptr<gm_config, ConfigDeleter>;

struct StringDeleter {
    void operator()(char* s) const { gm_free_string(s); }
};
using StringPtr = std::unique_ptr<char, StringDeleter>;

// Loads the config and applies --seed and --set overrides.
gm_status load_config(const std::string& path, const std::vector<std::string>& sets, std::optional<std::uint64_t> seed,
                      ConfigPtr& out) {
    gm_config* raw = nullptr;
    gm_status st = gm_config_load(path.c_str(), &raw);
    if (st != GM_OK) return st;
    out.reset(raw);
    for (const std::string& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos) {
            std::cerr << "error: override '" << s << "' is not of the form section.key=value\n";
            return GM_ERR_CONFIG;
        }
        st = gm_config_set(out.get(), s.substr(0, eq).c_str(), s.substr(eq + 1).c_str());
        if (st != GM_OK) return st;
    }
    if (seed) st = gm_config_set_seed(out.get(), *seed);
    return st;
}

struct TrainArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    bool no_dso = false;
    bool no_moe = false;
    bool force = false;
    std::vector<std::string> sets;
};

int cmd_train(const TrainArgs& a) {
    ConfigPtr cfg;
    if (gm_status st = load_config(a.config, a.sets, a.seed, cfg); st != GM_OK) return report(st);
    unsigned flags = 0;
    if (a.no_dso) flags |= GM_TRAIN_NO_DSO;
    if (a.no_moe) flags |= GM_TRAIN_NO_MOE;
    if (a.force) flags |= GM_TRAIN_FORCE;
    char* dir = nullptr;
    const gm_status st = gm_train(cfg.get(), a.out.empty() ? nullptr : a.out.c_str(), flags, &dir);
    StringPtr owned(dir);
    if (st == GM_OK) std::cout << "run written to " << dir << '\n';
    return report(st);
}

struct SweepArgs {
    std::string config;
    std::string grid;
    std::string out;
    bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
    char* dir = nullptr;
    std::size_t cells = 0;
    const gm_status st = gm_sweep(a.config.c_str(), a.grid.c_str(), a.out.empty() ? nullptr : a.out.c_str(),
                                  a.force ? unsigned{GM_TRAIN_FORCE} : 0u, &cells, &dir);
    StringPtr owned(dir);
    if (dir != nullptr && cells > 0) {
        std::cout << cells << " runs, summary in " << (std::filesystem::path(dir) / "sweep.csv").string() << '\n';
    }
    return report(st);
}

struct InspectArgs {
    std::string checkpoint;
    std::string config;
    std::string modality = "A";
    std::size_t n = 16;
    std::string out;
    bool force = false;
};

int cmd_inspect(const InspectArgs& a) {
    std::string config = a.config;
    if (config.empty()) {
        const std::filesystem::path ckpt(a.checkpoint);
        const std::filesystem::path dir = std::filesystem::is_directory(ckpt) ? ckpt : ckpt.parent_path();
        config = (dir / "config.json").string();
    }
    ConfigPtr cfg;
    if (gm_status st = load_config(config, {}, std::nullopt, cfg); st != GM_OK) return report(st);
    char* summary = nullptr;
    const gm_status st = gm_inspect_gates(cfg.get(), a.checkpoint.c_str(), a.modality.c_str(), a.n,
                                          a.out.empty() ? nullptr : a.out.c_str(), a.force ? unsigned{GM_TRAIN_FORCE} : 0u,
                                          &summary);
    StringPtr owned(summary);
    if (st == GM_OK) std::cout << summary;
    return report(st);
}

int cmd_validate(const std::string& path, const std::vector<std::string>& sets) {
    ConfigPtr cfg;
    if (gm_status st = load_config(path, sets, std::nullopt, cfg); st != GM_OK) return report(st);
    char* json = nullptr;
    char* hash = nullptr;
    gm_status st = gm_config_to_json(cfg.get(), &json);
    StringPtr json_owned(json);
    if (st == GM_OK) st = gm_config_hash(cfg.get(), &hash);
    StringPtr hash_owned(hash);
    if (st == GM_OK) std::cout << json << "sha256 " << hash << '\n';
    return report(st);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Grid-level sparse mixture of experts with a dynamic learning-rate governor"};
    app.set_version_flag("--version", std::string(gm_version()));
    app.require_subcommand(1);

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train from a config file and write all run artifacts");
    t->add_option("--config", train.config, "Run config (JSON)")->required();
    t->add_option("--seed", train.seed, "Override run.seed");
    t->add_option("--out", train.out, "Output directory");
    t->add_flag("--no-dso", train.no_dso, "Keep every learning-rate multiplier at 1");
    t->add_flag("--no-moe", train.no_moe, "Use the plain linear block wherever an MoE block would go");
    t->add_flag("--force", train.force, "Overwrite a non-empty output directory");
    t->add_option("--set", train.sets, "Config override section.key=value (repeatable)");

    SweepArgs sweep;
    auto* s = app.add_subcommand("sweep", "Train every cell of a parameter grid");
    s->add_option("--config", sweep.config, "Base run config (JSON)")->required();
    s->add_option("--grid", sweep.grid, "Space-separated section.key=v1,v2,... lists")->required();
    s->add_option("--out", sweep.out, "Output directory");
    s->add_flag("--force", sweep.force, "Overwrite a non-empty output directory");

    InspectArgs inspect;
    auto* g = app.add_subcommand("inspect-gates", "Route fresh samples through a checkpoint and report expert use");
    g->add_option("--checkpoint", inspect.checkpoint, "checkpoint.bin or a run directory")->required();
    g->add_option("--config", inspect.config, "Run config (default: config.json next to the checkpoint)");
    g->add_option("--modality", inspect.modality, "A, B or C")->check(CLI::IsMember({"A", "B", "C"}));
    g->add_option("--n", inspect.n, "Number of samples");
    g->add_option("--out", inspect.out, "Output directory");
    g->add_flag("--force", inspect.force, "Overwrite a non-empty output directory");

    std::string validate_path;
    std::vector<std::string> validate_sets;
    auto* v = app.add_subcommand("validate", "Check a config and print its resolved form and hash");
    v->add_option("--config", validate_path, "Run config (JSON)")->required();
    v->add_option("--set", validate_sets, "Config override section.key=value (repeatable)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (*t) return cmd_train(train);
    if (*s) return cmd_sweep(sweep);
    if (*g) return cmd_inspect(inspect);
    if (*v) return cmd_validate(validate_path, validate_sets);
    return kExitConfig;
}
