#pragma once

#include <filesystem>

#include "twinforge/graybox.hpp"
#include "twinforge/train.hpp"
#include "twinforge/twin.hpp"

namespace twinforge {

/// One experiment: gray-box case, control, objective, and training settings.
/// Parsed from a versioned JSON document (schema 1).
struct ExperimentConfig {
    int schema = 1;
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "out";
    int jobs = 1;

    GrayBoxCase gray_case;

    bool control_scalar = true;
    double control_value = 0.0;

    Objective::Kind objective_kind = Objective::Kind::terminal_quadratic;
    double objective_target = 0.5;

    TrainConfig train;

    ControlField make_control() const;
    Objective make_objective() const;
    TwinModel make_twin_prototype() const; // same grid/ic/cfl as the gray box
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);

} // namespace twinforge
