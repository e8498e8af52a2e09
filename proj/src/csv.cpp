// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/csv.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <ostream>

namespace gridmoe::csv {

std::string format(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    std::array<char, 32> buf{};
    const auto result = std::to_chars(buf.data(), buf.data() + buf.size(), value);
    return std::string(buf.data(), result.ptr);
}

void write_schema(std::ostream& os, std::string_view name, int version) {
    os << "# schema: " << name << " v" << version << '\n';
}

}  // namespace gridmoe::csv
