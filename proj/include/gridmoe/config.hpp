// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Run configuration files. A config is a JSON object with the sections
// model, moe, dso, sampler, data and run. Unknown keys are rejected, and
// moe.n_experts, moe.top_k and run.iterations must be present. Every error
// is a ConfigError naming the dotted field.

#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gridmoe/harness.hpp"

namespace gridmoe {

// "section.key=value" assignments; the value is parsed as JSON and falls
// back to a plain string when it is not valid JSON.
using Overrides = std::vector<std::pair<std::string, std::string>>;

std::pair<std::string, std::string> parse_override(std::string_view assignment);

// Applies overrides to the JSON text, then parses, resolves and validates.
RunConfig parse_config(std::string_view json_text, const Overrides& overrides = {});
RunConfig load_config(const std::string& path, const Overrides& overrides = {});
std::string read_text_file(const std::string& path);

// JSON text with overrides applied but not validated.
std::string apply_overrides(std::string_view json_text, const Overrides& overrides);

// Canonical, fully resolved JSON (every key present, stable order).
std::string config_to_json(const RunConfig& cfg, bool pretty = true);

// SHA-256 (hex) of the compact canonical form.
std::string config_hash(const RunConfig& cfg);

std::string sha256_hex(std::string_view bytes);

}  // namespace gridmoe
