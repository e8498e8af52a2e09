// Copyright 2026 The gridmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cstring>
#include <cmath>
#include <limits>
#include <map>

#include "doctest.h"
#include "gridmoe/harness.hpp"
#include "test_util.hpp"

using namespace gridmoe;

namespace {

RunConfig small_config(std::size_t iterations, std::uint64_t seed = 0) {
    RunConfig cfg;
    cfg.seed = seed;
    cfg.iterations = iterations;
    cfg.base_lr = 0.01;
    cfg.model.moe.n_experts = 4;
    cfg.model.moe.top_k = 2;
    cfg.resolve();
    return cfg;
}

bool same_bits(std::span<const double> a, std::span<const double> b) {
    return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

bool same_parameters(const Model& a, const Model& b) {
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].name != pb[i].name || !same_bits(pa[i].tensor.data(), pb[i].tensor.data())) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("generate_sample") {
    const GridSize grid;
    const auto specs = default_modalities(grid, 11, {0.05, 0.05, 0.2});

    SUBCASE("same seed and index give a bit-identical sample") {
        for (const ModalitySpec& spec : specs) {
            const Sample a = generate_sample(spec, grid, 42);
            const Sample b = generate_sample(spec, grid, 42);
            CHECK(same_bits(a.image.data(), b.image.data()));
            CHECK(a.labels == b.labels);
            CHECK(same_bits(a.regression_target.data(), b.regression_target.data()));
            const Sample c = generate_sample(spec, grid, 43);
            CHECK_FALSE(same_bits(a.image.data(), c.image.data()));
        }
    }

    SUBCASE("zero std and zero speckle give a constant image at the channel means") {
        ModalitySpec spec = specs[0];
        spec.speckle_rate = 0.0;
        spec.channel_std.assign(grid.channels, 0.0);
        const Sample s = generate_sample(spec, grid, 3);
        const auto v = s.image.data();
        for (std::size_t p = 0; p < grid.height * grid.width; ++p) {
            for (std::size_t c = 0; c < grid.channels; ++c) CHECK(v[p * grid.channels + c] == spec.channel_mean[c]);
        }
    }

    SUBCASE("values are finite and targets match the task") {
        for (const ModalitySpec& spec : specs) {
            for (std::uint64_t i = 0; i < 50; ++i) {
                const Sample s = generate_sample(spec, grid, i);
                for (double v : s.image.data()) REQUIRE(std::isfinite(v));
                REQUIRE(s.labels.size() == grid.height * grid.width);
                for (int l : s.labels) REQUIRE((l >= 0 && l < static_cast<int>(spec.classes)));
                CHECK(s.regression_target.shape() == Shape{grid.height, grid.width, kRegressionWidth});
            }
        }
        CHECK(specs[0].task.target == TargetType::grid_classification);
        CHECK(specs[1].task.target == TargetType::grid_regression_angle);
        CHECK(specs[1].task.head_width == kRegressionWidth);
        CHECK(specs[2].task.target == TargetType::grid_classification);
        for (std::size_t m = 0; m < kNumModalities; ++m) CHECK(specs[m].task.task_id == m);
    }

    SUBCASE("mismatched channel statistics are rejected") {
        ModalitySpec spec = specs[0];
        spec.channel_mean.pop_back();
        CHECK_THROWS_AS(generate_sample(spec, grid, 0), ShapeError);
    }
}

TEST_CASE("modalities are separated by histogram symmetric KL over 10^4 samples") {
    const GridSize grid;
    const auto specs = default_modalities(grid, 0, {0.05, 0.05, 0.05});
    const SeparationMatrix sep = modality_separation(specs, grid, 10000);
    for (std::size_t a = 0; a < kNumModalities; ++a) {
        CHECK(sep[a][a] == doctest::Approx(0.0));
        for (std::size_t b = 0; b < kNumModalities; ++b) {
            CHECK(sep[a][b] == doctest::Approx(sep[b][a]).epsilon(1e-12));
            if (a != b) CHECK(sep[a][b] > 0.5);
        }
    }
    CHECK(modality_self_test(specs, grid, 1000));

    // Modalities that differ only in their id and carry no class signal
    // share one distribution and must fail the self-test.
    auto same = specs;
    same[0].signal_strength = 0.0;
    same[1] = same[0];
    same[1].id = Modality::B;
    same[2] = same[0];
    same[2].id = Modality::C;
    CHECK_FALSE(modality_self_test(same, grid, 200));
}

TEST_CASE("sample_batch") {
    SUBCASE("2:1:1 in a batch of 4") {
        SamplerConfig cfg;
        const auto batch = sample_batch(cfg, 0);
        std::map<Modality, int> count;
        for (const BatchItem& item : batch) ++count[item.modality];
        CHECK(batch.size() == 4);
        CHECK(count[Modality::A] == 2);
        CHECK(count[Modality::B] == 1);
        CHECK(count[Modality::C] == 1);
    }
    SUBCASE("1:1:1 in a batch of 3") {
        SamplerConfig cfg;
        cfg.counts = {1, 1, 1};
        cfg.batch_size = 3;
        std::map<Modality, int> count;
        for (const BatchItem& item : sample_batch(cfg, 5)) ++count[item.modality];
        CHECK(count[Modality::A] == 1);
        CHECK(count[Modality::B] == 1);
        CHECK(count[Modality::C] == 1);
    }
    SUBCASE("1000 batches give frequencies of exactly one half and two quarters") {
        SamplerConfig cfg;
        cfg.seed = 9;
        std::array<std::size_t, kNumModalities> count{};
        std::map<std::pair<Modality, std::uint64_t>, int> seen;
        bool reordered = false;
        for (std::uint64_t it = 0; it < 1000; ++it) {
            const auto batch = sample_batch(cfg, it);
            if (batch.front().modality != Modality::A || batch[1].modality != Modality::A) reordered = true;
            for (const BatchItem& item : batch) {
                ++count[static_cast<std::size_t>(item.modality)];
                ++seen[{item.modality, item.index}];
            }
        }
        CHECK(static_cast<double>(count[0]) / 4000.0 == 0.5);
        CHECK(static_cast<double>(count[1]) / 4000.0 == 0.25);
        CHECK(static_cast<double>(count[2]) / 4000.0 == 0.25);
        CHECK(seen.size() == 4000);  // no sample is drawn twice
        CHECK(reordered);
    }
    SUBCASE("order is deterministic in the seed") {
        SamplerConfig a;
        a.seed = 3;
        SamplerConfig b = a;
        for (std::uint64_t it = 0; it < 20; ++it) {
            const auto x = sample_batch(a, it);
            const auto y = sample_batch(b, it);
            for (std::size_t i = 0; i < x.size(); ++i) {
                CHECK(x[i].modality == y[i].modality);
                CHECK(x[i].index == y[i].index);
            }
        }
    }
    SUBCASE("invalid counts are configuration errors") {
        SamplerConfig cfg;
        cfg.counts = {2, 1, 0};
        cfg.batch_size = 3;
        CHECK_THROWS_AS(sample_batch(cfg, 0), ConfigError);
        cfg.counts = {2, 1, 1};
        cfg.batch_size = 5;
        try {
            sample_batch(cfg, 0);
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(e.field() == "sampler.counts");
        }
    }
}

TEST_CASE("model structure") {
    RunConfig cfg = small_config(1);
    const Model model = build_model(cfg);
    CHECK(model.moe_blocks() == std::vector<std::size_t>{0, 2});
    CHECK(model.heads().size() == 3);
    CHECK(model.heads()[1].weight.shape() == Shape{kRegressionWidth, 8});

    std::size_t backbone = 0;
    std::map<std::size_t, std::size_t> heads;
    for (const NamedParameter& p : model.parameters()) {
        CHECK(p.tensor.requires_grad());
        CHECK(p.tensor.is_leaf());
        if (p.group.kind == ParamGroup::Kind::backbone) {
            ++backbone;
        } else {
            ++heads[p.group.task];
        }
    }
    CHECK(backbone == 2 * 4 + 2 * 2);  // two MoE blocks, two linear blocks
    CHECK(heads.size() == 3);

    SUBCASE("placement masks") {
        CHECK(placement_from_name("odd", 4) == std::vector<bool>{false, true, false, true});
        CHECK(placement_from_name("all", 2) == std::vector<bool>{true, true});
        CHECK(placement_from_name("none", 2) == std::vector<bool>{false, false});
        CHECK_THROWS_AS(placement_from_name("sometimes", 2), ConfigError);
        RunConfig bad = cfg;
        bad.model.moe_placement = {true, false};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    SUBCASE("switching MoE off leaves the other initial values unchanged") {
        RunConfig plain = cfg;
        plain.model.moe_enabled = false;
        const Model p = build_model(plain);
        CHECK(p.moe_blocks().empty());
        for (std::size_t b = 0; b < 4; ++b) {
            CHECK(same_bits(p.blocks()[b].weight.data(), model.blocks()[b].weight.data()));
        }
        for (std::size_t t = 0; t < 3; ++t) {
            CHECK(same_bits(p.heads()[t].weight.data(), model.heads()[t].weight.data()));
        }
    }
}

TEST_CASE("identity trunk reproduces the raw-feature predictor") {
    ModelSpec spec;
    spec.depth = 2;
    spec.channels = 2;
    spec.moe_enabled = false;
    spec.input_standardization = false;
    spec.moe.gate_dim = 2;
    spec.heads = {TaskSpec{0, TargetType::grid_classification, 2}};
    const Model model(spec, 2, 0);
    for (const NamedParameter& p : model.parameters()) {
        Tensor t = p.tensor;
        auto v = t.mutable_data();
        std::fill(v.begin(), v.end(), 0.0);
        if (t.rank() == 2) {
            for (std::size_t i = 0; i < 2; ++i) v[i * 2 + i] = 1.0;
        }
    }
    Sample s;
    s.image = Tensor::from_data({1, 2, 2}, {1.0, -1.0, 0.5, 2.0});
    s.labels = {0, 1};
    const Tensor loss = task_loss(model.forward(s.image, 0).prediction, spec.heads[0], s);
    // Logits are relu(x) = (1, 0) and (0.5, 2):
    // mean(log(1 + e^-1), log(1 + e^-1.5)).
    CHECK(loss.item() == doctest::Approx(0.2573374827504877).epsilon(1e-14));
}

TEST_CASE("identical embeddings scale the trunk by k/N at every MoE block") {
    for (std::size_t n : {2, 4, 8}) {
        for (std::size_t k = 1; k <= std::min<std::size_t>(n, 3); ++k) {
            RunConfig cfg = small_config(1, 100 + n * 10 + k);
            cfg.model.moe.n_experts = n;
            cfg.model.moe.top_k = k;
            cfg.model.identical_embeddings = true;
            RunConfig plain = cfg;
            plain.model.moe_enabled = false;
            const Model moe = build_model(cfg);
            const Model ref = build_model(plain);
            const auto mods = run_modalities(cfg);
            const double s = static_cast<double>(k) / static_cast<double>(n);
            for (std::size_t m = 0; m < kNumModalities; ++m) {
                const Sample sample = generate_sample(mods[m], cfg.data.grid, 7);
                const Tensor pa = moe.forward(sample.image, m).prediction;
                const Tensor pb = ref.forward(sample.image, m).prediction;
                const auto a = pa.data();
                const auto b = pb.data();
                // Biases start at zero, so the whole network is positively
                // homogeneous and the two MoE blocks contribute (k/N)^2.
                for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - s * s * b[i]) <= 1e-12);
            }
        }
    }
}

TEST_CASE("forward_model") {
    RunConfig cfg = small_config(1, 5);
    const Model model = build_model(cfg);
    const auto mods = run_modalities(cfg);
    std::vector<Sample> batch;
    for (const BatchItem& item : sample_batch(cfg.sampler, 0)) {
        batch.push_back(generate_sample(mods[static_cast<std::size_t>(item.modality)], cfg.data.grid, item.index));
    }
    const BatchLoss loss = forward_model(model, mods, batch);
    REQUIRE(loss.task_losses.size() == 3);

    SUBCASE("per-task loss is the mean over that task's samples") {
        for (std::size_t t = 0; t < 3; ++t) {
            double total = 0.0;
            int count = 0;
            for (const Sample& s : batch) {
                if (static_cast<std::size_t>(s.modality) != t) continue;
                total += task_loss(model.forward(s.image, t).prediction, mods[t].task, s).item();
                ++count;
            }
            CHECK(loss.task_losses[t].item() == doctest::Approx(total / count).epsilon(1e-14));
        }
        CHECK(loss.total.item() ==
              doctest::Approx(loss.task_losses[0].item() + loss.task_losses[1].item() + loss.task_losses[2].item()));
    }

    SUBCASE("per-task loss does not depend on sample order") {
        std::vector<Sample> reversed(batch.rbegin(), batch.rend());
        const BatchLoss r = forward_model(model, mods, reversed);
        for (std::size_t t = 0; t < 3; ++t) {
            CHECK(std::abs(r.task_losses[t].item() - loss.task_losses[t].item()) <= 1e-12);
        }
    }

    SUBCASE("expert applications are H*W*k per MoE block per sample") {
        CHECK(loss.expert_applications == batch.size() * 2 * 64 * 2);
        CHECK(loss.routing.size() == batch.size());
        for (const auto& per_sample : loss.routing) CHECK(per_sample.size() == 2);
    }

    SUBCASE("a batch missing a task is rejected") {
        std::vector<Sample> partial;
        for (const Sample& s : batch) {
            if (s.modality != Modality::C) partial.push_back(s);
        }
        CHECK_THROWS_AS(forward_model(model, mods, partial), UsageError);
    }
}

TEST_CASE("train") {
    SUBCASE("with DSO disabled the trajectory equals a plain SGD loop bit for bit") {
        RunConfig cfg = small_config(30, 4);
        cfg.dso_enabled = false;
        const TrainResult result = train(cfg);

        const Model model = build_model(cfg);
        const auto mods = run_modalities(cfg);
        const auto params = model.parameters();
        for (std::size_t it = 0; it < cfg.iterations; ++it) {
            std::vector<Sample> batch;
            for (const BatchItem& item : sample_batch(cfg.sampler, it)) {
                batch.push_back(
                    generate_sample(mods[static_cast<std::size_t>(item.modality)], cfg.data.grid, item.index));
            }
            forward_model(model, mods, batch).total.backward();
            for (const NamedParameter& p : params) {
                Tensor t = p.tensor;
                if (!t.has_grad()) continue;
                auto v = t.mutable_data();
                const auto g = t.grad();
                for (std::size_t i = 0; i < v.size(); ++i) v[i] -= cfg.base_lr * g[i];
                t.zero_grad();
            }
        }
        CHECK(same_parameters(result.model, model));
        for (const DsoRow& row : result.dso_log) {
            CHECK(row.gamma == 1.0);
            CHECK(row.lr_backbone == cfg.base_lr);
            for (double l : row.lambda) CHECK(l == 1.0);
        }
    }

    SUBCASE("two runs with the same seed end with identical parameters") {
        const RunConfig cfg = small_config(40, 8);
        const TrainResult a = train(cfg);
        const TrainResult b = train(cfg);
        CHECK(same_parameters(a.model, b.model));
        RunConfig other = cfg;
        other.seed = 9;
        other.resolve();
        CHECK_FALSE(same_parameters(a.model, train(other).model));
    }

    SUBCASE("the governor drives the logged learning rates") {
        const RunConfig cfg = small_config(20, 2);
        const TrainResult r = train(cfg);
        REQUIRE(r.dso_log.size() == 20);
        for (const DsoRow& row : r.dso_log) {
            double sum = 0.0;
            for (double l : row.lambda) sum += l;
            CHECK(sum == doctest::Approx(3.0).epsilon(1e-12));
            CHECK(row.gamma > 0.0);
            CHECK(row.gamma < 2.0);
            CHECK(row.lr_backbone == doctest::Approx(cfg.base_lr * row.gamma).epsilon(1e-15));
            for (std::size_t t = 0; t < 3; ++t) {
                CHECK(row.lr_head[t] == doctest::Approx(cfg.base_lr * row.lambda[t]).epsilon(1e-15));
            }
        }
        // First iteration: his == cur, so lambda = 1 and C = 1.
        CHECK(r.dso_log[0].consistency == 1.0);
        CHECK(r.dso_log[0].gamma == doctest::Approx(1.7162978701990246).epsilon(1e-12));
    }

    SUBCASE("500-iteration smoke run is fast and every task loss decreases") {
        RunConfig cfg = small_config(500, 0);
        const auto start = std::chrono::steady_clock::now();
        const TrainResult r = train(cfg);
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        CHECK(seconds < 60.0);
        for (std::size_t t = 0; t < 3; ++t) {
            CHECK(r.final.task_losses[t] < r.initial.task_losses[t]);
            // Training losses too: mean of the first 25 iterations vs the last 25.
            double head = 0.0;
            double tail = 0.0;
            for (std::size_t i = 0; i < 25; ++i) {
                head += r.losses[i].task_losses[t];
                tail += r.losses[r.losses.size() - 1 - i].task_losses[t];
            }
            CHECK(tail < head);
        }
        CHECK(r.expert_applications == 500 * 4 * 2 * 64 * 2);
    }

    SUBCASE("a non-finite loss aborts with the last ten iterations") {
        const RunConfig cfg = small_config(50, 1);
        TrainHooks hooks;
        hooks.on_losses = [](std::size_t it, std::vector<double>& losses) {
            if (it == 23) losses[1] = std::numeric_limits<double>::quiet_NaN();
        };
        try {
            train(cfg, hooks);
            FAIL("expected TrainingAborted");
        } catch (const TrainingAborted& e) {
            REQUIRE(e.recent_losses().size() == 10);
            CHECK(e.recent_losses().front().iteration == 14);
            CHECK(e.recent_losses().back().iteration == 23);
            CHECK(e.recent_dso().size() == 10);
            CHECK(std::string(e.what()).find("iteration 23") != std::string::npos);
        }
    }

    SUBCASE("expert statistics count every evaluated position") {
        const RunConfig cfg = small_config(5, 3);
        const TrainResult r = train(cfg);
        for (const EvalResult* e : {&r.initial, &r.final}) {
            for (const std::string& d : {"A", "B", "C"}) {
                for (int layer : {0, 2}) {
                    const ExpertStats::Cell cell = e->stats.cell(d, layer);
                    std::uint64_t top1 = 0;
                    for (auto c : cell.top1_count) top1 += c;
                    CHECK(top1 == cfg.data.eval_samples * 64);
                    CHECK(cell.grid_positions == cfg.data.eval_samples * 64);
                }
            }
        }
    }
}

TEST_CASE("summary statistics") {
    CHECK(median({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
    CHECK(std::isnan(median({})));
    CHECK(std_dev({1.0, 1.0}) == 0.0);
    CHECK(std_dev({1.0, 3.0}) == doctest::Approx(1.0));
}
