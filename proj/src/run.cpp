// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/run.hpp"

#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <fstream>
#include <sstream>

#include "gridmoe/csv.hpp"
#include "json.hpp"

namespace gridmoe {

namespace {

using nlohmann::json;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write '" + path.string() + "'");
    return os;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os = open_out(path);
    os << text;
}

template <typename Fn>
void write_csv_file(const fs::path& path, Fn&& fn) {
    std::ofstream os = open_out(path);
    fn(os);
    if (!os) throw Error("failed writing '" + path.string() + "'");
}

void write_row(std::ostream& os, const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << cells[i];
    os << '\n';
}

std::vector<std::string> indexed(const std::string& prefix, std::size_t n) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

void append(std::vector<std::string>& row, const std::vector<double>& values) {
    for (double v : values) row.push_back(csv::format(v));
}

std::string checkpoint_header() { return "# gridmoe checkpoint v1"; }

}  // namespace

fs::path resolve_out_dir(const std::string& explicit_out, const std::string& config_out,
                         const std::string& default_name) {
    if (!explicit_out.empty()) return explicit_out;
    if (!config_out.empty()) return config_out;
    if (const char* root = std::getenv("GRIDMOE_OUT"); root != nullptr && *root != '\0') {
        return fs::path(root) / default_name;
    }
    return fs::path("runs") / default_name;
}

void prepare_out_dir(const fs::path& dir, bool force) {
    if (fs::exists(dir)) {
        if (!fs::is_directory(dir)) throw ConfigError("'" + dir.string() + "' exists and is not a directory", "out");
        if (!fs::is_empty(dir)) {
            if (!force) throw OutputExistsError(dir);
            for (const auto& entry : fs::directory_iterator(dir)) fs::remove_all(entry.path());
        }
    }
    fs::create_directories(dir);
}

void write_losses_csv(std::ostream& os, const std::vector<LossRow>& rows, std::size_t t) {
    csv::write_schema(os, "gridmoe.losses", 1);
    std::vector<std::string> header{"iteration"};
    for (const auto& h : indexed("loss_task", t)) header.push_back(h);
    header.push_back("total");
    write_row(os, header);
    for (const LossRow& r : rows) {
        std::vector<std::string> row{std::to_string(r.iteration)};
        append(row, r.task_losses);
        row.push_back(csv::format(r.total));
        write_row(os, row);
    }
}

void write_dso_log_csv(std::ostream& os, const std::vector<DsoRow>& rows, std::size_t t) {
    csv::write_schema(os, "gridmoe.dso_log", 1);
    std::vector<std::string> header{"iteration"};
    for (const char* name : {"cur_", "his_", "w_", "lambda_"}) {
        for (const auto& h : indexed(name, t)) header.push_back(h);
    }
    for (const char* name : {"consistency", "gamma", "lr_backbone"}) header.push_back(name);
    for (const auto& h : indexed("lr_head_", t)) header.push_back(h);
    header.push_back("skipped");
    write_row(os, header);
    for (const DsoRow& r : rows) {
        std::vector<std::string> row{std::to_string(r.iteration)};
        append(row, r.cur);
        append(row, r.his);
        append(row, r.ratio);
        append(row, r.lambda);
        append(row, {r.consistency, r.gamma, r.lr_backbone});
        append(row, r.lr_head);
        row.push_back(r.skipped ? "1" : "0");
        write_row(os, row);
    }
}

void write_metrics_csv(std::ostream& os, const TrainResult& result) {
    csv::write_schema(os, "gridmoe.metrics", 1);
    write_row(os, {"task", "modality", "initial_loss", "final_loss", "normalized_loss", "initial_entropy",
                   "final_entropy"});
    const std::vector<double> norm = result.normalized_losses();
    for (std::size_t t = 0; t < norm.size(); ++t) {
        std::vector<std::string> row{std::to_string(t), modality_name(static_cast<Modality>(t))};
        append(row, {result.initial.task_losses[t], result.final.task_losses[t], norm[t], result.initial.entropy[t],
                     result.final.entropy[t]});
        write_row(os, row);
    }
}

void save_checkpoint(const Model& model, const fs::path& bin, const fs::path& manifest) {
    std::ofstream data = open_out(bin);
    std::ofstream meta = open_out(manifest);
    meta << checkpoint_header() << '\n';
    std::size_t offset = 0;
    for (const NamedParameter& p : model.parameters()) {
        const Shape& shape = p.tensor.shape();
        meta << p.name << ' ' << shape.size();
        for (std::size_t d : shape) meta << ' ' << d;
        meta << ' ' << offset << ' ' << p.tensor.numel() << '\n';
        for (double v : p.tensor.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, sizeof bits);
            unsigned char bytes[8];
            for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
            data.write(reinterpret_cast<const char*>(bytes), 8);
        }
        offset += p.tensor.numel();
    }
    if (!data || !meta) throw Error("failed writing checkpoint '" + bin.string() + "'");
}

void load_checkpoint(const Model& model, const fs::path& bin, const fs::path& manifest) {
    std::ifstream meta(manifest);
    if (!meta) throw ConfigError("cannot read '" + manifest.string() + "'", "checkpoint");
    std::string line;
    if (!std::getline(meta, line) || line != checkpoint_header()) {
        throw ConfigError("'" + manifest.string() + "' is not a gridmoe checkpoint manifest", "checkpoint");
    }
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset = 0;
        std::size_t count = 0;
    };
    std::vector<Entry> entries;
    while (std::getline(meta, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        Entry e;
        std::size_t rank = 0;
        ls >> e.name >> rank;
        e.shape.resize(rank);
        for (std::size_t& d : e.shape) ls >> d;
        ls >> e.offset >> e.count;
        if (!ls) throw ConfigError("malformed line '" + line + "'", "checkpoint");
        entries.push_back(std::move(e));
    }

    const std::vector<NamedParameter> params = model.parameters();
    if (entries.size() != params.size()) {
        throw ShapeError("checkpoint has " + std::to_string(entries.size()) + " tensors, model expects " +
                         std::to_string(params.size()));
    }
    std::ifstream data(bin, std::ios::binary);
    if (!data) throw ConfigError("cannot read '" + bin.string() + "'", "checkpoint");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(data)), std::istreambuf_iterator<char>());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Entry& e = entries[i];
        Tensor t = params[i].tensor;
        if (e.name != params[i].name || e.shape != t.shape()) {
            throw ShapeError("checkpoint tensor " + e.name + " " + shape_to_string(e.shape) + " does not match model " +
                             params[i].name + " " + shape_to_string(t.shape()));
        }
        if ((e.offset + e.count) * 8 > bytes.size() || e.count != t.numel()) {
            throw ShapeError("checkpoint data for " + e.name + " is truncated");
        }
        auto out = t.mutable_data();
        for (std::size_t j = 0; j < e.count; ++j) {
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b) bits |= std::uint64_t{bytes[(e.offset + j) * 8 + b]} << (8 * b);
            std::memcpy(&out[j], &bits, sizeof bits);
        }
    }
}

std::string RunManifest::to_json() const {
    json j{
        {"config_path", config_path}, {"config_hash", config_hash}, {"seed", seed},
        {"started_at", started_at},   {"finished_at", finished_at}, {"artifacts", artifacts},
        {"exit_status", exit_status},
    };
    return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json(const std::string& text) {
    RunManifest m;
    try {
        const json j = json::parse(text);
        m.config_path = j.at("config_path").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.started_at = j.at("started_at").get<std::string>();
        m.finished_at = j.at("finished_at").get<std::string>();
        m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
        m.exit_status = j.at("exit_status").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed run manifest: ") + e.what(), "manifest");
    }
    return m;
}

bool verify_manifest(const fs::path& dir) {
    const RunManifest m = RunManifest::from_json(read_text_file((dir / "manifest.json").string()));
    try {
        return config_hash(parse_config(read_text_file((dir / "config.json").string()))) == m.config_hash;
    } catch (const ConfigError&) {
        return false;
    }
}

RunOutcome run_training(const RunConfig& cfg, const std::string& config_path, const fs::path& out_dir, bool force,
                        const TrainHooks& hooks) {
    cfg.validate();
    prepare_out_dir(out_dir, force);
    RunManifest manifest;
    manifest.config_path = config_path;
    manifest.config_hash = config_hash(cfg);
    manifest.seed = cfg.seed;
    manifest.started_at = utc_now();
    write_file(out_dir / "config.json", config_to_json(cfg));
    manifest.artifacts.push_back("config.json");

    RunOutcome outcome;
    outcome.out_dir = out_dir;
    try {
        outcome.result = train(cfg, hooks);
    } catch (const TrainingAborted& e) {
        write_csv_file(out_dir / "abort_dump.csv", [&](std::ostream& os) {
            os << "# " << e.what() << '\n';
            write_dso_log_csv(os, e.recent_dso(), cfg.model.heads.size());
        });
        manifest.artifacts.push_back("abort_dump.csv");
        manifest.exit_status = 3;
        manifest.finished_at = utc_now();
        write_file(out_dir / "manifest.json", manifest.to_json());
        outcome.exit_status = 3;
        outcome.message = std::string(e.what()) + "; diagnostic dump in " + (out_dir / "abort_dump.csv").string();
        return outcome;
    }

    const TrainResult& r = outcome.result;
    write_csv_file(out_dir / "losses.csv", [&](std::ostream& os) { write_losses_csv(os, r.losses, cfg.model.heads.size()); });
    write_csv_file(out_dir / "dso_log.csv", [&](std::ostream& os) { write_dso_log_csv(os, r.dso_log, cfg.model.heads.size()); });
    write_csv_file(out_dir / "metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r); });
    write_csv_file(out_dir / "expert_stats.csv", [&](std::ostream& os) { r.final.stats.write_csv(os); });
    write_csv_file(out_dir / "expert_stats_init.csv", [&](std::ostream& os) { r.initial.stats.write_csv(os); });
    for (const char* name : {"losses.csv", "dso_log.csv", "metrics.csv", "expert_stats.csv", "expert_stats_init.csv"}) {
        manifest.artifacts.push_back(name);
    }

    fs::create_directories(out_dir / "top1_maps");
    const std::vector<std::size_t> moe = r.model.moe_blocks();
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        for (std::size_t l = 0; l < moe.size(); ++l) {
            const std::string name = "top1_maps/" + modality_name(static_cast<Modality>(m)) + "_block" +
                                     std::to_string(moe[l]) + ".csv";
            write_csv_file(out_dir / name,
                           [&](std::ostream& os) { write_top1_map_csv(os, r.final.first_routing[m][l]); });
            manifest.artifacts.push_back(name);
        }
    }
    save_checkpoint(r.model, out_dir / "checkpoint.bin", out_dir / "checkpoint.manifest");
    manifest.artifacts.push_back("checkpoint.bin");
    manifest.artifacts.push_back("checkpoint.manifest");

    manifest.finished_at = utc_now();
    manifest.artifacts.push_back("manifest.json");
    write_file(out_dir / "manifest.json", manifest.to_json());
    return outcome;
}

std::vector<SweepAxis> parse_grid(const std::string& spec) {
    std::vector<SweepAxis> axes;
    std::istringstream in(spec);
    std::string token;
    while (in >> token) {
        const auto [key, list] = parse_override(token);
        SweepAxis axis{key, {}};
        std::size_t start = 0;
        while (start <= list.size()) {
            const std::size_t comma = list.find(',', start);
            const std::string value = list.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
            if (value.empty()) throw ConfigError("empty value in sweep list", key);
            axis.values.push_back(value);
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        axes.push_back(std::move(axis));
    }
    if (axes.empty()) throw ConfigError("sweep grid is empty", "grid");
    return axes;
}

SweepOutcome run_sweep(const std::string& config_text, const std::string& config_path,
                       const std::vector<SweepAxis>& axes, const fs::path& out_dir, bool force) {
    if (axes.empty()) throw ConfigError("sweep grid is empty", "grid");
    std::vector<Overrides> cells(1);
    for (const SweepAxis& axis : axes) {
        std::vector<Overrides> next;
        for (const Overrides& prefix : cells) {
            for (const std::string& v : axis.values) {
                Overrides o = prefix;
                o.emplace_back(axis.key, v);
                next.push_back(std::move(o));
            }
        }
        cells = std::move(next);
    }
    // Validate every cell before any training starts.
    std::vector<RunConfig> configs;
    for (const Overrides& o : cells) configs.push_back(parse_config(config_text, o));

    prepare_out_dir(out_dir, force);
    SweepOutcome outcome;
    outcome.csv_path = out_dir / "sweep.csv";
    std::ofstream os = open_out(outcome.csv_path);
    csv::write_schema(os, "gridmoe.sweep", 1);
    std::vector<std::string> header{"cell"};
    for (const SweepAxis& axis : axes) header.push_back(axis.key);
    for (const char* h : {"seed", "exit_status"}) header.push_back(h);
    for (const auto& h : indexed("final_loss_task", kNumModalities)) header.push_back(h);
    for (const auto& h : indexed("normalized_loss_task", kNumModalities)) header.push_back(h);
    header.push_back("normalized_loss_std");
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        header.push_back("final_entropy_" + modality_name(static_cast<Modality>(m)));
    }
    for (const char* h : {"gamma_min", "gamma_max"}) header.push_back(h);
    write_row(os, header);

    for (std::size_t c = 0; c < cells.size(); ++c) {
        char name[32];
        std::snprintf(name, sizeof name, "cell_%03zu", c);
        const RunOutcome run = run_training(configs[c], config_path, out_dir / name, false);
        std::vector<std::string> row{name};
        for (const auto& [key, value] : cells[c]) {
            // Values containing commas or quotes would break the CSV.
            std::string v = value;
            for (char& ch : v) {
                if (ch == ',' || ch == '"') ch = ';';
            }
            row.push_back(v);
        }
        row.push_back(std::to_string(configs[c].seed));
        row.push_back(std::to_string(run.exit_status));
        if (run.exit_status == 0) {
            append(row, run.result.final.task_losses);
            const std::vector<double> norm = run.result.normalized_losses();
            append(row, norm);
            row.push_back(csv::format(std_dev(norm)));
            append(row, run.result.final.entropy);
            append(row, {run.result.gamma_min, run.result.gamma_max});
        } else {
            ++outcome.failed;
            for (std::size_t i = 0; i < 3 * kNumModalities + 3; ++i) row.push_back("nan");
        }
        write_row(os, row);
        ++outcome.cells;
    }
    return outcome;
}

InspectOutcome inspect_gates(const RunConfig& cfg, const fs::path& checkpoint_bin,
                             const fs::path& checkpoint_manifest, Modality modality, std::size_t n,
                             const fs::path& out_dir, bool force) {
    cfg.validate();
    const Model model(cfg.model, cfg.data.grid.channels, 0);
    load_checkpoint(model, checkpoint_bin, checkpoint_manifest);
    prepare_out_dir(out_dir, force);
    fs::create_directories(out_dir / "top1_maps");

    const auto modalities = run_modalities(cfg);
    const ModalitySpec& spec = modalities[static_cast<std::size_t>(modality)];
    const std::string dataset = modality_name(modality);
    const std::vector<std::size_t> moe = model.moe_blocks();
    InspectOutcome out;
    for (std::size_t b : moe) out.stats.register_layer(static_cast<int>(b), model.blocks()[b].moe_cfg.n_experts);
    out.stats.add_dataset(dataset);
    for (std::size_t i = 0; i < n; ++i) {
        const Sample sample = generate_sample(spec, cfg.data.grid, kInspectIndexBase + i);
        const Model::Forward f = model.forward(sample.image, spec.task.task_id);
        for (std::size_t l = 0; l < moe.size(); ++l) {
            out.stats.accumulate(dataset, static_cast<int>(moe[l]), f.routing[l]);
            char name[64];
            std::snprintf(name, sizeof name, "%s_block%zu_sample%04zu.csv", dataset.c_str(), moe[l], i);
            write_csv_file(out_dir / "top1_maps" / name,
                           [&](std::ostream& os) { write_top1_map_csv(os, f.routing[l]); });
        }
    }
    write_csv_file(out_dir / "participation.csv", [&](std::ostream& os) { out.stats.write_csv(os); });

    std::ostringstream summary;
    summary << "modality " << dataset << ", " << n << " samples, " << moe.size() << " MoE blocks\n";
    for (std::size_t b : moe) {
        const ExpertStats::Cell cell = out.stats.cell(dataset, static_cast<int>(b));
        summary << "block " << b << ": positions " << cell.grid_positions << ", top1 share";
        for (std::uint64_t count : cell.top1_count) {
            const double share =
                cell.grid_positions ? static_cast<double>(count) / static_cast<double>(cell.grid_positions) : 0.0;
            summary << ' ' << csv::format(std::round(share * 1e4) / 1e4);
        }
        summary << ", entropy " << csv::format(std::round(out.stats.participation_entropy(dataset, static_cast<int>(b)) * 1e4) / 1e4)
                << '\n';
    }
    out.summary = summary.str();
    return out;
}

}  // namespace gridmoe
