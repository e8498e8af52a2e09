// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Seeded synthetic stand-ins for three imaging modalities, each paired with
// one dense grid task. A sample is a function of (spec, seed, index) only.

#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gridmoe/tensor.hpp"

namespace gridmoe {

enum class Modality : std::size_t { A = 0, B = 1, C = 2 };

inline constexpr std::size_t kNumModalities = 3;

std::string modality_name(Modality m);
Modality parse_modality(const std::string& name);  // throws ConfigError

enum class TargetType {
    grid_classification,    // per-position class, cross-entropy
    grid_regression_angle,  // per-position (objectness, cos 2phi, sin 2phi), smooth L1
};

struct TaskSpec {
    std::size_t task_id = 0;
    TargetType target = TargetType::grid_classification;
    std::size_t head_width = 4;
};

// Channels per regression target: objectness plus a doubled-angle pair.
inline constexpr std::size_t kRegressionWidth = 3;

struct GridSize {
    std::size_t height = 8;
    std::size_t width = 8;
    std::size_t channels = 8;
};

struct ModalitySpec {
    Modality id = Modality::A;
    std::vector<double> channel_mean;
    std::vector<double> channel_std;
    double spatial_frequency = 1.0;  // texture cycles across the grid
    double texture_amplitude = 0.5;
    double speckle_rate = 0.0;       // fraction of values hit by multiplicative speckle
    double blob_density = 0.3;       // expected object blobs per 6 grid cells
    double signal_strength = 1.0;
    double label_noise = 0.05;       // flip probability (classes) or target noise std (regression)
    std::size_t classes = 4;
    std::uint64_t seed = 0;          // sample stream
    std::uint64_t world_seed = 7;    // class prototypes shared by every sample
    TaskSpec task;
};

struct Sample {
    Modality modality = Modality::A;
    Tensor image;                 // H x W x C
    std::vector<int> labels;      // H*W, classification tasks
    Tensor regression_target;     // H x W x 3, regression tasks
};

// The three default modalities for a grid size; modality m feeds task m.
std::array<ModalitySpec, kNumModalities> default_modalities(const GridSize& grid, std::uint64_t seed,
                                                            const std::array<double, kNumModalities>& label_noise,
                                                            double signal_strength = 1.0, std::size_t classes = 4);

Sample generate_sample(const ModalitySpec& spec, const GridSize& grid, std::uint64_t index);

// Pairwise symmetric KL between per-channel value histograms of the
// modalities, averaged over channels. Entry [a][b] compares modality a and b.
using SeparationMatrix = std::array<std::array<double, kNumModalities>, kNumModalities>;
SeparationMatrix modality_separation(const std::array<ModalitySpec, kNumModalities>& specs, const GridSize& grid,
                                     std::size_t samples_per_modality);

// True when every pair of distinct modalities is separated by more than 0.5.
bool modality_self_test(const std::array<ModalitySpec, kNumModalities>& specs, const GridSize& grid,
                        std::size_t samples_per_modality = 10000);

// Stream-splitting helper: a well-mixed 64-bit key for (seed, a, b).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace gridmoe
