// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/gridmoe.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "gridmoe/config.hpp"
#include "gridmoe/dso.hpp"
#include "gridmoe/moe.hpp"
#include "gridmoe/run.hpp"

#ifndef GRIDMOE_VERSION
#define GRIDMOE_VERSION "0.0.0"
#endif

struct gm_config {
    std::string path;  // empty for configs parsed from memory
    std::string text;  // JSON with every override applied so far
    gridmoe::RunConfig cfg;
};

struct gm_moe_layer {
    gridmoe::MoEConfig cfg;
    gridmoe::MoELayer layer;
};

struct gm_dso {
    gridmoe::DsoGovernor governor;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_field;

gm_status fail(gm_status status, const std::string& message, const std::string& field = {}) {
    g_error = message;
    g_field = field;
    return status;
}

// Runs fn and maps exceptions to status codes.
template <typename Fn>
gm_status guarded(Fn&& fn) {
    try {
        fn();
        return GM_OK;
    } catch (const gridmoe::OutputExistsError& e) {
        return fail(GM_ERR_OUTPUT_EXISTS, e.what(), e.field());
    } catch (const gridmoe::ConfigError& e) {
        return fail(GM_ERR_CONFIG, e.what(), e.field());
    } catch (const gridmoe::ShapeError& e) {
        return fail(GM_ERR_CONFIG, e.what());
    } catch (const gridmoe::UsageError& e) {
        return fail(GM_ERR_INVALID_ARGUMENT, e.what());
    } catch (const std::filesystem::filesystem_error& e) {
        return fail(GM_ERR_IO, e.what());
    } catch (const std::bad_alloc&) {
        return fail(GM_ERR_RUNTIME, "out of memory");
    } catch (const std::exception& e) {
        return fail(GM_ERR_RUNTIME, e.what());
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

std::string str_or_empty(const char* s) { return s == nullptr ? std::string() : std::string(s); }

#define GM_REQUIRE(ptr)                                                                   \
    do {                                                                                  \
        if ((ptr) == nullptr) return fail(GM_ERR_INVALID_ARGUMENT, #ptr " must not be null"); \
    } while (0)

}  // namespace

extern "C" {

const char* gm_version(void) { return GRIDMOE_VERSION; }
const char* gm_last_error(void) { return g_error.c_str(); }
const char* gm_last_error_field(void) { return g_field.c_str(); }
void gm_free_string(char* s) { std::free(s); }

gm_status gm_config_parse(const char* json_text, gm_config** out) {
    GM_REQUIRE(json_text);
    GM_REQUIRE(out);
    *out = nullptr;
    return guarded([&] {
        auto c = std::make_unique<gm_config>();
        c->text = gridmoe::apply_overrides(json_text, {});
        c->cfg = gridmoe::parse_config(c->text);
        *out = c.release();
    });
}

gm_status gm_config_load(const char* path, gm_config** out) {
    GM_REQUIRE(path);
    GM_REQUIRE(out);
    *out = nullptr;
    std::string text;
    const gm_status st = guarded([&] { text = gridmoe::read_text_file(path); });
    if (st != GM_OK) return st;
    const gm_status parsed = gm_config_parse(text.c_str(), out);
    if (parsed == GM_OK) (*out)->path = path;
    return parsed;
}

gm_status gm_config_set(gm_config* cfg, const char* key, const char* value) {
    GM_REQUIRE(cfg);
    GM_REQUIRE(key);
    GM_REQUIRE(value);
    return guarded([&] {
        const gridmoe::Overrides o{{key, value}};
        std::string text = gridmoe::apply_overrides(cfg->text, o);
        gridmoe::RunConfig parsed = gridmoe::parse_config(text);
        cfg->text = std::move(text);
        cfg->cfg = std::move(parsed);
    });
}

gm_status gm_config_set_seed(gm_config* cfg, uint64_t seed) {
    return gm_config_set(cfg, "run.seed", std::to_string(seed).c_str());
}

gm_status gm_config_to_json(const gm_config* cfg, char** out) {
    GM_REQUIRE(cfg);
    GM_REQUIRE(out);
    return guarded([&] { *out = dup_string(gridmoe::config_to_json(cfg->cfg)); });
}

gm_status gm_config_hash(const gm_config* cfg, char** out) {
    GM_REQUIRE(cfg);
    GM_REQUIRE(out);
    return guarded([&] { *out = dup_string(gridmoe::config_hash(cfg->cfg)); });
}

void gm_config_free(gm_config* cfg) { delete cfg; }

gm_status gm_resolve_out_dir(const gm_config* cfg, const char* out_dir, const char* default_name, char** resolved) {
    GM_REQUIRE(default_name);
    GM_REQUIRE(resolved);
    return guarded([&] {
        const std::string config_out = cfg == nullptr ? std::string() : cfg->cfg.out_dir;
        *resolved = dup_string(gridmoe::resolve_out_dir(str_or_empty(out_dir), config_out, default_name).string());
    });
}

gm_status gm_train(const gm_config* cfg, const char* out_dir, unsigned flags, char** resolved_out) {
    GM_REQUIRE(cfg);
    if (resolved_out != nullptr) *resolved_out = nullptr;
    gm_status aborted = GM_OK;
    const gm_status st = guarded([&] {
        gridmoe::RunConfig run = cfg->cfg;
        if (flags & GM_TRAIN_NO_DSO) run.dso_enabled = false;
        if (flags & GM_TRAIN_NO_MOE) run.model.moe_enabled = false;
        const auto dir = gridmoe::resolve_out_dir(str_or_empty(out_dir), run.out_dir, "train");
        if (resolved_out != nullptr) *resolved_out = dup_string(dir.string());
        const std::string source = cfg->path.empty() ? "<memory>" : cfg->path;
        const gridmoe::RunOutcome outcome = gridmoe::run_training(run, source, dir, (flags & GM_TRAIN_FORCE) != 0);
        if (outcome.exit_status != 0) aborted = fail(GM_ERR_RUNTIME, outcome.message);
    });
    return st != GM_OK ? st : aborted;
}

gm_status gm_sweep(const char* config_path, const char* grid, const char* out_dir, unsigned flags, size_t* cells,
                   char** resolved_out) {
    GM_REQUIRE(config_path);
    GM_REQUIRE(grid);
    if (resolved_out != nullptr) *resolved_out = nullptr;
    gm_status failed = GM_OK;
    const gm_status st = guarded([&] {
        const std::string text = gridmoe::read_text_file(config_path);
        const auto axes = gridmoe::parse_grid(grid);
        const gridmoe::RunConfig base = gridmoe::parse_config(text);
        const auto dir = gridmoe::resolve_out_dir(str_or_empty(out_dir), base.out_dir, "sweep");
        if (resolved_out != nullptr) *resolved_out = dup_string(dir.string());
        const gridmoe::SweepOutcome outcome =
            gridmoe::run_sweep(text, config_path, axes, dir, (flags & GM_TRAIN_FORCE) != 0);
        if (cells != nullptr) *cells = outcome.cells;
        if (outcome.failed != 0) {
            failed = fail(GM_ERR_RUNTIME, std::to_string(outcome.failed) + " sweep cell(s) aborted; see " +
                                              outcome.csv_path.string());
        }
    });
    return st != GM_OK ? st : failed;
}

gm_status gm_inspect_gates(const gm_config* cfg, const char* checkpoint, const char* modality, size_t n,
                           const char* out_dir, unsigned flags, char** summary) {
    GM_REQUIRE(cfg);
    GM_REQUIRE(checkpoint);
    GM_REQUIRE(modality);
    if (summary != nullptr) *summary = nullptr;
    return guarded([&] {
        std::filesystem::path bin = checkpoint;
        if (std::filesystem::is_directory(bin)) bin /= "checkpoint.bin";
        if (!std::filesystem::exists(bin)) {
            throw gridmoe::ConfigError("'" + bin.string() + "' does not exist", "checkpoint");
        }
        std::filesystem::path manifest = bin;
        manifest.replace_extension(".manifest");
        const auto dir = gridmoe::resolve_out_dir(str_or_empty(out_dir), "", "inspect");
        const gridmoe::InspectOutcome outcome = gridmoe::inspect_gates(
            cfg->cfg, bin, manifest, gridmoe::parse_modality(modality), n, dir, (flags & GM_TRAIN_FORCE) != 0);
        if (summary != nullptr) *summary = dup_string(outcome.summary + "written to " + dir.string() + "\n");
    });
}

gm_status gm_verify_manifest(const char* run_dir, int* ok) {
    GM_REQUIRE(run_dir);
    GM_REQUIRE(ok);
    return guarded([&] { *ok = gridmoe::verify_manifest(run_dir) ? 1 : 0; });
}

void gm_moe_default_options(gm_moe_options* options) {
    if (options == nullptr) return;
    const gridmoe::MoEConfig cfg;
    const gridmoe::MoEInitOptions init;
    options->n_experts = cfg.n_experts;
    options->top_k = cfg.top_k;
    options->gate_temperature = cfg.gate_temperature;
    options->in_channels = cfg.in_channels;
    options->out_channels = cfg.out_channels;
    options->gate_dim = cfg.gate_dim;
    options->seed = init.seed;
    options->init_std = init.init_std;
    options->identical_embeddings = init.identical_embeddings ? 1 : 0;
}

gm_status gm_moe_create_from_pretrained(const gm_moe_options* options, const double* weight, const double* bias,
                                        gm_moe_layer** out) {
    GM_REQUIRE(options);
    GM_REQUIRE(weight);
    GM_REQUIRE(out);
    *out = nullptr;
    return guarded([&] {
        gridmoe::MoEConfig cfg;
        cfg.n_experts = options->n_experts;
        cfg.top_k = options->top_k;
        cfg.gate_temperature = options->gate_temperature;
        cfg.in_channels = options->in_channels;
        cfg.out_channels = options->out_channels;
        cfg.gate_dim = options->gate_dim;
        cfg.validate();
        const std::size_t co = cfg.out_channels;
        const std::size_t ci = cfg.in_channels;
        std::vector<double> b(co, 0.0);
        if (bias != nullptr) b.assign(bias, bias + co);
        gridmoe::MoEInitOptions init;
        init.seed = options->seed;
        init.init_std = options->init_std;
        init.identical_embeddings = options->identical_embeddings != 0;
        auto layer = std::make_unique<gm_moe_layer>();
        layer->cfg = cfg;
        layer->layer = gridmoe::init_from_pretrained(
            gridmoe::Tensor::from_data({co, ci}, std::vector<double>(weight, weight + co * ci)),
            gridmoe::Tensor::from_data({co}, std::move(b)), cfg, init);
        *out = layer.release();
    });
}

gm_status gm_moe_gate(const gm_moe_layer* layer, const double* x, size_t* selected, double* weights) {
    GM_REQUIRE(layer);
    GM_REQUIRE(x);
    GM_REQUIRE(selected);
    GM_REQUIRE(weights);
    return guarded([&] {
        const gridmoe::RoutingDecision d =
            gridmoe::gate({x, layer->cfg.in_channels}, layer->layer.gate, layer->cfg);
        for (std::size_t i = 0; i < d.selected.size(); ++i) {
            selected[i] = d.selected[i];
            weights[i] = d.gate_weights[i];
        }
    });
}

gm_status gm_moe_forward(const gm_moe_layer* layer, const double* x, size_t height, size_t width, double* out,
                         size_t* expert_applications) {
    GM_REQUIRE(layer);
    GM_REQUIRE(x);
    GM_REQUIRE(out);
    return guarded([&] {
        const std::size_t ci = layer->cfg.in_channels;
        const gridmoe::Tensor input =
            gridmoe::Tensor::from_data({height, width, ci}, std::vector<double>(x, x + height * width * ci));
        const gridmoe::MoEOutput result =
            gridmoe::moe_forward(input, layer->layer.bank, layer->layer.gate, layer->cfg);
        const auto values = result.output.data();
        std::copy(values.begin(), values.end(), out);
        if (expert_applications != nullptr) *expert_applications = result.expert_applications;
    });
}

void gm_moe_free(gm_moe_layer* layer) { delete layer; }

void gm_dso_default_options(gm_dso_options* options) {
    if (options == nullptr) return;
    const gridmoe::DsoConfig cfg;
    options->alpha = cfg.alpha;
    options->theta = cfg.theta;
    options->tau = cfg.tau;
    options->bias_b = cfg.bias_b;
    options->n_tasks = cfg.n_tasks;
}

gm_status gm_dso_create(const gm_dso_options* options, gm_dso** out) {
    GM_REQUIRE(options);
    GM_REQUIRE(out);
    *out = nullptr;
    return guarded([&] {
        gridmoe::DsoConfig cfg;
        cfg.alpha = options->alpha;
        cfg.theta = options->theta;
        cfg.tau = options->tau;
        cfg.bias_b = options->bias_b;
        cfg.n_tasks = options->n_tasks;
        *out = new gm_dso{gridmoe::DsoGovernor(cfg)};
    });
}

gm_status gm_dso_step(gm_dso* dso, const double* losses, double* lambdas, double* gamma, double* consistency,
                      int* skipped) {
    GM_REQUIRE(dso);
    GM_REQUIRE(losses);
    return guarded([&] {
        const std::size_t t = dso->governor.config().n_tasks;
        const auto step = dso->governor.step({losses, t});
        if (lambdas != nullptr) std::copy(step.multipliers.head_lambdas.begin(), step.multipliers.head_lambdas.end(), lambdas);
        if (gamma != nullptr) *gamma = step.multipliers.backbone_gamma;
        if (consistency != nullptr) *consistency = step.multipliers.consistency;
        if (skipped != nullptr) *skipped = step.skipped ? 1 : 0;
    });
}

void gm_dso_free(gm_dso* dso) { delete dso; }

}  // extern "C"
