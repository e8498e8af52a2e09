// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gridmoe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "gridmoe/error.hpp"

namespace gridmoe {

std::string modality_name(Modality m) {
    switch (m) {
        case Modality::A: return "A";
        case Modality::B: return "B";
        case Modality::C: return "C";
    }
    return "?";
}

Modality parse_modality(const std::string& name) {
    if (name == "A" || name == "a") return Modality::A;
    if (name == "B" || name == "b") return Modality::B;
    if (name == "C" || name == "c") return Modality::C;
    throw ConfigError("unknown modality '" + name + "' (expected A, B or C)", "modality");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    auto splitmix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

std::array<ModalitySpec, kNumModalities> default_modalities(const GridSize& grid, std::uint64_t seed,
                                                            const std::array<double, kNumModalities>& label_noise,
                                                            double signal_strength, std::size_t classes) {
    struct Profile {
        double mean;
        double std;
        double frequency;
        double speckle;
        double blobs;
        TargetType target;
    };
    // SAR-like speckled, bright low-contrast optical-like, dark high-contrast infrared-like.
    constexpr std::array<Profile, kNumModalities> profiles{{
        {0.0, 1.0, 1.0, 0.3, 0.3, TargetType::grid_classification},
        {2.5, 0.6, 2.0, 0.0, 0.4, TargetType::grid_regression_angle},
        {-2.0, 1.4, 0.5, 0.0, 0.2, TargetType::grid_classification},
    }};

    std::array<ModalitySpec, kNumModalities> specs;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        const Profile& p = profiles[m];
        ModalitySpec& s = specs[m];
        s.id = static_cast<Modality>(m);
        s.channel_mean.resize(grid.channels);
        s.channel_std.assign(grid.channels, p.std);
        for (std::size_t c = 0; c < grid.channels; ++c) {
            s.channel_mean[c] = p.mean + 0.3 * (static_cast<double>(c % 3) - 1.0);
        }
        s.spatial_frequency = p.frequency;
        s.speckle_rate = p.speckle;
        s.blob_density = p.blobs;
        s.signal_strength = signal_strength;
        s.label_noise = label_noise[m];
        s.classes = classes;
        s.seed = seed;
        s.task.task_id = m;
        s.task.target = p.target;
        s.task.head_width = p.target == TargetType::grid_classification ? classes : kRegressionWidth;
    }
    return specs;
}

Sample generate_sample(const ModalitySpec& spec, const GridSize& grid, std::uint64_t index) {
    const std::size_t h = grid.height;
    const std::size_t w = grid.width;
    const std::size_t c = grid.channels;
    const std::size_t k = spec.classes;
    if (spec.channel_mean.size() != c || spec.channel_std.size() != c) {
        throw ShapeError("modality channel statistics do not match " + std::to_string(c) + " channels");
    }
    if (k < 2) throw ConfigError("need at least two classes", "data.classes");
    const auto m = static_cast<std::uint64_t>(spec.id);

    // Prototypes are fixed per modality so every sample shares one "world".
    std::mt19937_64 world(mix_seed(spec.world_seed, 1000 + m));
    std::normal_distribution<double> unit;
    std::vector<double> prototype(k * c);
    for (double& v : prototype) v = unit(world);
    std::vector<double> angle_dir(2 * c);
    for (double& v : angle_dir) v = unit(world);

    std::mt19937_64 rng(mix_seed(spec.seed, m, index));
    std::uniform_real_distribution<double> uniform(0.0, 1.0);

    std::vector<std::size_t> latent(h * w, 0);
    std::vector<double> objectness(h * w, 0.0);
    std::vector<double> angle(h * w, 0.0);
    std::poisson_distribution<int> blob_count(spec.blob_density * static_cast<double>(h * w) / 6.0);
    const int blobs = blob_count(rng);
    for (int b = 0; b < blobs; ++b) {
        const double ci = uniform(rng) * static_cast<double>(h);
        const double cj = uniform(rng) * static_cast<double>(w);
        const double radius = 0.8 + 1.2 * uniform(rng);
        const std::size_t cls = 1 + static_cast<std::size_t>(uniform(rng) * static_cast<double>(k - 1)) % (k - 1);
        const double phi = uniform(rng) * std::numbers::pi;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const double di = static_cast<double>(i) + 0.5 - ci;
                const double dj = static_cast<double>(j) + 0.5 - cj;
                if (di * di + dj * dj <= radius * radius) {
                    latent[i * w + j] = cls;
                    objectness[i * w + j] = 1.0;
                    angle[i * w + j] = phi;
                }
            }
        }
    }

    const double psi = uniform(rng) * std::numbers::pi;
    std::vector<double> phase(c);
    for (double& p : phase) p = uniform(rng) * 2.0 * std::numbers::pi;
    std::exponential_distribution<double> speckle(1.0);

    const double extent = static_cast<double>(std::max(h, w));
    std::vector<double> image(h * w * c);
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = i * w + j;
            const double wave = 2.0 * std::numbers::pi * spec.spatial_frequency *
                                (static_cast<double>(i) * std::cos(psi) + static_cast<double>(j) * std::sin(psi)) /
                                extent;
            const double c2 = std::cos(2.0 * angle[p]);
            const double s2 = std::sin(2.0 * angle[p]);
            for (std::size_t ch = 0; ch < c; ++ch) {
                double noise = unit(rng);
                if (uniform(rng) < spec.speckle_rate) noise *= 2.0 * speckle(rng);
                const double texture = spec.texture_amplitude * std::sin(wave + phase[ch]);
                const double signal =
                    spec.signal_strength * (prototype[latent[p] * c + ch] +
                                            objectness[p] * (c2 * angle_dir[ch] + s2 * angle_dir[c + ch]));
                image[p * c + ch] = spec.channel_mean[ch] + spec.channel_std[ch] * (0.5 * noise + texture + signal);
            }
        }
    }

    Sample s;
    s.modality = spec.id;
    s.image = Tensor::from_data({h, w, c}, std::move(image));
    s.labels.resize(h * w);
    std::vector<double> reg(h * w * kRegressionWidth);
    std::normal_distribution<double> target_noise(0.0, 1.0);
    for (std::size_t p = 0; p < h * w; ++p) {
        int label = static_cast<int>(latent[p]);
        if (uniform(rng) < spec.label_noise) label = static_cast<int>(uniform(rng) * static_cast<double>(k)) % static_cast<int>(k);
        s.labels[p] = label;
        reg[p * 3 + 0] = objectness[p] + spec.label_noise * target_noise(rng);
        reg[p * 3 + 1] = objectness[p] * std::cos(2.0 * angle[p]) + spec.label_noise * target_noise(rng);
        reg[p * 3 + 2] = objectness[p] * std::sin(2.0 * angle[p]) + spec.label_noise * target_noise(rng);
    }
    s.regression_target = Tensor::from_data({h, w, kRegressionWidth}, std::move(reg));
    return s;
}

SeparationMatrix modality_separation(const std::array<ModalitySpec, kNumModalities>& specs, const GridSize& grid,
                                     std::size_t samples_per_modality) {
    constexpr std::size_t kBins = 80;
    constexpr double kLo = -10.0;
    constexpr double kHi = 10.0;
    const std::size_t c = grid.channels;
    // hist[m][ch][bin]
    std::vector<std::vector<std::vector<double>>> hist(
        kNumModalities, std::vector<std::vector<double>>(c, std::vector<double>(kBins, 0.0)));
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        for (std::size_t n = 0; n < samples_per_modality; ++n) {
            const Sample s = generate_sample(specs[m], grid, n);
            const auto v = s.image.data();
            for (std::size_t p = 0; p < v.size(); ++p) {
                const double t = std::clamp((v[p] - kLo) / (kHi - kLo), 0.0, 1.0 - 1e-12);
                hist[m][p % c][static_cast<std::size_t>(t * kBins)] += 1.0;
            }
        }
        for (auto& ch : hist[m]) {
            double total = 0.0;
            for (double x : ch) total += x;
            for (double& x : ch) x = (x + 1e-6) / (total + 1e-6 * kBins);
        }
    }
    SeparationMatrix out{};
    for (std::size_t a = 0; a < kNumModalities; ++a) {
        for (std::size_t b = 0; b < kNumModalities; ++b) {
            double total = 0.0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t bin = 0; bin < kBins; ++bin) {
                    const double p = hist[a][ch][bin];
                    const double q = hist[b][ch][bin];
                    total += (p - q) * std::log(p / q);
                }
            }
            out[a][b] = total / static_cast<double>(c);
        }
    }
    return out;
}

bool modality_self_test(const std::array<ModalitySpec, kNumModalities>& specs, const GridSize& grid,
                        std::size_t samples_per_modality) {
    const SeparationMatrix sep = modality_separation(specs, grid, samples_per_modality);
    for (std::size_t a = 0; a < kNumModalities; ++a) {
        for (std::size_t b = a + 1; b < kNumModalities; ++b) {
            if (!(sep[a][b] > 0.5)) return false;
        }
    }
    return true;
}

}  // namespace gridmoe
