// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/config.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

namespace gridmoe {

namespace {

using nlohmann::json;

const std::set<std::string> kSections{"model", "moe", "dso", "sampler", "data", "run"};

const std::map<std::string, std::set<std::string>> kKeys{
    {"model",
     {"depth", "channels", "moe_placement", "moe_enabled", "gate_init_std", "identical_embeddings",
      "input_standardization"}},
    {"moe", {"n_experts", "top_k", "gate_temperature", "gate_dim"}},
    {"dso", {"enabled", "alpha", "theta", "tau", "bias_b"}},
    {"sampler", {"counts", "batch_size"}},
    {"data", {"height", "width", "channels", "label_noise", "signal_strength", "classes", "eval_samples"}},
    {"run", {"seed", "iterations", "base_lr", "out_dir"}},
};

const std::vector<std::string> kRequired{"moe.n_experts", "moe.top_k", "run.iterations"};

// Reads section.key into out when present; type mismatches become ConfigErrors.
class Reader {
public:
    explicit Reader(const json& root) : root_(root) {}

    template <typename T>
    void get(const std::string& section, const std::string& key, T& out) const {
        const json* v = find(section, key);
        if (v == nullptr) return;
        try {
            if constexpr (std::is_unsigned_v<T> && !std::is_same_v<T, bool>) {
                if (!v->is_number_unsigned()) {
                    throw ConfigError("expected a non-negative integer, got " + v->dump(), section + "." + key);
                }
            }
            if constexpr (std::is_same_v<T, bool>) {
                if (!v->is_boolean()) throw ConfigError("expected true or false, got " + v->dump(), section + "." + key);
            }
            out = v->get<T>();
        } catch (const json::exception&) {
            throw ConfigError("wrong type: " + v->dump(), section + "." + key);
        }
    }

    const json* find(const std::string& section, const std::string& key) const {
        auto s = root_.find(section);
        if (s == root_.end()) return nullptr;
        auto k = s->find(key);
        return k == s->end() ? nullptr : &*k;
    }

private:
    const json& root_;
};

json parse_json(std::string_view text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("not valid JSON: ") + e.what(), "config");
    }
}

void check_keys(const json& root) {
    if (!root.is_object()) throw ConfigError("top level must be an object", "config");
    for (const auto& [section, body] : root.items()) {
        if (!kSections.count(section)) throw ConfigError("unknown section", section);
        if (!body.is_object()) throw ConfigError("section must be an object", section);
        const auto& allowed = kKeys.at(section);
        for (const auto& [key, value] : body.items()) {
            if (!allowed.count(key)) throw ConfigError("unknown key", section + "." + key);
        }
    }
    for (const std::string& field : kRequired) {
        const auto dot = field.find('.');
        if (Reader(root).find(field.substr(0, dot), field.substr(dot + 1)) == nullptr) {
            throw ConfigError("required field is missing", field);
        }
    }
}

RunConfig from_json(const json& root) {
    check_keys(root);
    Reader r(root);
    RunConfig cfg;

    r.get("model", "depth", cfg.model.depth);
    r.get("model", "channels", cfg.model.channels);
    r.get("model", "moe_enabled", cfg.model.moe_enabled);
    r.get("model", "gate_init_std", cfg.model.gate_init_std);
    r.get("model", "identical_embeddings", cfg.model.identical_embeddings);
    r.get("model", "input_standardization", cfg.model.input_standardization);
    if (const json* p = r.find("model", "moe_placement")) {
        if (p->is_string()) {
            cfg.model.moe_placement = placement_from_name(p->get<std::string>(), cfg.model.depth);
        } else if (p->is_array()) {
            for (const json& e : *p) {
                if (!e.is_boolean()) throw ConfigError("list entries must be true or false", "model.moe_placement");
                cfg.model.moe_placement.push_back(e.get<bool>());
            }
        } else {
            throw ConfigError("expected a name or a list of booleans", "model.moe_placement");
        }
    }

    r.get("moe", "n_experts", cfg.model.moe.n_experts);
    r.get("moe", "top_k", cfg.model.moe.top_k);
    r.get("moe", "gate_temperature", cfg.model.moe.gate_temperature);
    r.get("moe", "gate_dim", cfg.model.moe.gate_dim);

    r.get("dso", "enabled", cfg.dso_enabled);
    r.get("dso", "alpha", cfg.dso.alpha);
    r.get("dso", "theta", cfg.dso.theta);
    r.get("dso", "tau", cfg.dso.tau);
    r.get("dso", "bias_b", cfg.dso.bias_b);

    if (const json* c = r.find("sampler", "counts")) {
        if (!c->is_array() || c->size() != kNumModalities) {
            throw ConfigError("expected a list of " + std::to_string(kNumModalities) + " counts", "sampler.counts");
        }
        for (std::size_t m = 0; m < kNumModalities; ++m) {
            if (!(*c)[m].is_number_integer() || (*c)[m].get<long long>() < 0) {
                throw ConfigError("counts must be non-negative integers", "sampler.counts");
            }
            cfg.sampler.counts[m] = (*c)[m].get<std::size_t>();
        }
    }
    r.get("sampler", "batch_size", cfg.sampler.batch_size);

    r.get("data", "height", cfg.data.grid.height);
    r.get("data", "width", cfg.data.grid.width);
    r.get("data", "channels", cfg.data.grid.channels);
    if (const json* n = r.find("data", "label_noise")) {
        if (n->is_number()) {
            cfg.data.label_noise.fill(n->get<double>());
        } else if (n->is_array() && n->size() == kNumModalities) {
            for (std::size_t m = 0; m < kNumModalities; ++m) {
                if (!(*n)[m].is_number()) throw ConfigError("entries must be numbers", "data.label_noise");
                cfg.data.label_noise[m] = (*n)[m].get<double>();
            }
        } else {
            throw ConfigError("expected a number or a list of " + std::to_string(kNumModalities) + " numbers",
                              "data.label_noise");
        }
    }
    r.get("data", "signal_strength", cfg.data.signal_strength);
    r.get("data", "classes", cfg.data.classes);
    r.get("data", "eval_samples", cfg.data.eval_samples);

    r.get("run", "seed", cfg.seed);
    r.get("run", "iterations", cfg.iterations);
    r.get("run", "base_lr", cfg.base_lr);
    r.get("run", "out_dir", cfg.out_dir);

    cfg.resolve();
    cfg.validate();
    return cfg;
}

json to_json(const RunConfig& cfg) {
    json j;
    j["model"] = {
        {"depth", cfg.model.depth},
        {"channels", cfg.model.channels},
        {"moe_placement", cfg.model.placement()},
        {"moe_enabled", cfg.model.moe_enabled},
        {"gate_init_std", cfg.model.gate_init_std},
        {"identical_embeddings", cfg.model.identical_embeddings},
        {"input_standardization", cfg.model.input_standardization},
    };
    j["moe"] = {
        {"n_experts", cfg.model.moe.n_experts},
        {"top_k", cfg.model.moe.top_k},
        {"gate_temperature", cfg.model.moe.gate_temperature},
        {"gate_dim", cfg.model.moe.gate_dim},
    };
    j["dso"] = {
        {"enabled", cfg.dso_enabled}, {"alpha", cfg.dso.alpha},   {"theta", cfg.dso.theta},
        {"tau", cfg.dso.tau},         {"bias_b", cfg.dso.bias_b},
    };
    j["sampler"] = {{"counts", cfg.sampler.counts}, {"batch_size", cfg.sampler.batch_size}};
    j["data"] = {
        {"height", cfg.data.grid.height},
        {"width", cfg.data.grid.width},
        {"channels", cfg.data.grid.channels},
        {"label_noise", cfg.data.label_noise},
        {"signal_strength", cfg.data.signal_strength},
        {"classes", cfg.data.classes},
        {"eval_samples", cfg.data.eval_samples},
    };
    j["run"] = {
        {"seed", cfg.seed},
        {"iterations", cfg.iterations},
        {"base_lr", cfg.base_lr},
        {"out_dir", cfg.out_dir},
    };
    return j;
}

}  // namespace

std::pair<std::string, std::string> parse_override(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ConfigError("expected key=value, got '" + std::string(assignment) + "'", "override");
    }
    return {std::string(assignment.substr(0, eq)), std::string(assignment.substr(eq + 1))};
}

std::string apply_overrides(std::string_view json_text, const Overrides& overrides) {
    json root = parse_json(json_text);
    if (!root.is_object()) throw ConfigError("top level must be an object", "config");
    for (const auto& [key, text] : overrides) {
        const auto dot = key.find('.');
        if (dot == std::string::npos || dot == 0 || dot + 1 == key.size() ||
            key.find('.', dot + 1) != std::string::npos) {
            throw ConfigError("override keys have the form section.key", key);
        }
        json value = json::parse(text, nullptr, false);
        if (value.is_discarded()) value = text;
        root[key.substr(0, dot)][key.substr(dot + 1)] = std::move(value);
    }
    return root.dump();
}

RunConfig parse_config(std::string_view json_text, const Overrides& overrides) {
    return from_json(parse_json(apply_overrides(json_text, overrides)));
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read '" + path + "'", "config");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

RunConfig load_config(const std::string& path, const Overrides& overrides) {
    return parse_config(read_text_file(path), overrides);
}

std::string config_to_json(const RunConfig& cfg, bool pretty) {
    return pretty ? to_json(cfg).dump(2) + "\n" : to_json(cfg).dump();
}

std::string config_hash(const RunConfig& cfg) { return sha256_hex(config_to_json(cfg, false)); }

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

}  // namespace gridmoe
