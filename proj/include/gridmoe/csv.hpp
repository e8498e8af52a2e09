// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>
#include <string>
#include <string_view>

namespace gridmoe::csv {

// Shortest representation that round-trips to the same double.
std::string format(double value);

// Every CSV file starts with `# schema: <name> v<version>` followed by the
// header row. Readers skip lines that begin with '#'.
void write_schema(std::ostream& os, std::string_view name, int version);

}  // namespace gridmoe::csv
