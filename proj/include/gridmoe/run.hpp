// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk side of a run: output directories, CSV artifacts, checkpoints,
// the run manifest, sweeps and gate inspection.

#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "gridmoe/config.hpp"
#include "gridmoe/harness.hpp"

namespace gridmoe {

namespace fs = std::filesystem;

// Thrown when the output directory exists and is not empty.
class OutputExistsError : public ConfigError {
public:
    explicit OutputExistsError(const fs::path& dir)
        : ConfigError("'" + dir.string() + "' exists and is not empty; pass --force to overwrite", "out") {}
};

// Precedence: explicit path, then run.out_dir, then $GRIDMOE_OUT/<name>,
// then runs/<name>.
fs::path resolve_out_dir(const std::string& explicit_out, const std::string& config_out,
                         const std::string& default_name);

// Creates the directory; refuses a non-empty one unless force is set, in
// which case its contents are removed first.
void prepare_out_dir(const fs::path& dir, bool force);

void write_losses_csv(std::ostream& os, const std::vector<LossRow>& rows, std::size_t n_tasks);
void write_dso_log_csv(std::ostream& os, const std::vector<DsoRow>& rows, std::size_t n_tasks);
void write_metrics_csv(std::ostream& os, const TrainResult& result);

// Flat little-endian float64 values plus a text manifest of names and shapes.
void save_checkpoint(const Model& model, const fs::path& bin, const fs::path& manifest);
// Overwrites the model's parameters. Throws ShapeError when the parameter
// names or shapes differ from the model's.
void load_checkpoint(const Model& model, const fs::path& bin, const fs::path& manifest);

struct RunManifest {
    std::string config_path;
    std::string config_hash;
    std::uint64_t seed = 0;
    std::string started_at;
    std::string finished_at;
    std::vector<std::string> artifacts;
    int exit_status = 0;

    std::string to_json() const;
    static RunManifest from_json(const std::string& text);
};

// Recomputes the hash of config.json in dir and compares it with the
// manifest's recorded hash.
bool verify_manifest(const fs::path& dir);

struct RunOutcome {
    fs::path out_dir;
    int exit_status = 0;        // 0 ok, 3 aborted
    std::string message;        // abort diagnostic, empty on success
    TrainResult result;         // partial when aborted
};

// Trains and writes every artifact plus manifest.json. A TrainingAborted is
// caught: the last iterations go to abort_dump.csv and exit_status is 3.
RunOutcome run_training(const RunConfig& cfg, const std::string& config_path, const fs::path& out_dir,
                        bool force, const TrainHooks& hooks = {});

struct SweepAxis {
    std::string key;                  // dotted config key
    std::vector<std::string> values;  // raw JSON texts
};

// "a.b=1,2,3 c.d=x" -> axes; throws ConfigError on an empty grid.
std::vector<SweepAxis> parse_grid(const std::string& spec);

struct SweepOutcome {
    std::size_t cells = 0;
    std::size_t failed = 0;
    fs::path csv_path;
};

// One run per cell of the cross product (first axis varies slowest), each in
// <out>/cell_NNN, summarized in <out>/sweep.csv.
SweepOutcome run_sweep(const std::string& config_text, const std::string& config_path,
                       const std::vector<SweepAxis>& axes, const fs::path& out_dir, bool force);

struct InspectOutcome {
    ExpertStats stats;
    std::string summary;
};

// Loads the checkpoint into a model built from the config, routes n fresh
// samples of one modality and writes top1_maps/ and participation.csv.
InspectOutcome inspect_gates(const RunConfig& cfg, const fs::path& checkpoint_bin, const fs::path& checkpoint_manifest,
                             Modality modality, std::size_t n, const fs::path& out_dir, bool force);

// Fresh samples for inspection live past both training and evaluation streams.
inline constexpr std::uint64_t kInspectIndexBase = std::uint64_t{1} << 41;

}  // namespace gridmoe
