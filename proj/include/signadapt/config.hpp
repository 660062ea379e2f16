#pragma once

// Run configuration: one JSON document with sections data / vpe / monitor / nst / retrain / harness.
// Every field has a default; unknown keys are rejected so typos fail loudly.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "signadapt/adapt.hpp"
#include "signadapt/harness.hpp"

namespace signadapt {

struct MonitorConfig {
    /// Used until calibration replaces them.
    Thresholds thresholds{1.0, 0.5};
    std::size_t buffer_capacity = 256;
    std::size_t trigger_min = 16;
    /// Synthetic unknowns generated for calibration.
    std::size_t calibration_unknowns = 200;
};

struct PipelineConfig {
    std::uint64_t seed = 0;
    BenchmarkConfig data;
    TrainingConfig vpe;
    MonitorConfig monitor;
    StyleTransferConfig nst;
    AugmentationOptions augmentation;
    RetrainConfig retrain;
    double mix_p = 0.5;
    std::size_t mixed_size = 0;
    AugSource aug_source = AugSource::oracle;
    DegradationKind aug_kind = DegradationKind::rust;
    double aug_severity = 0.8;
    std::filesystem::path runs_dir = "runs";

    /// Push `seed` into every section that draws randomness.
    void propagate_seed();
    void validate() const;
};

PipelineConfig parse_config(std::string_view json_text);
PipelineConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const PipelineConfig& config);

/// SIGNADAPT_SEED, when set, replaces the seed. Throws ConfigError on a malformed value.
void apply_env_overrides(PipelineConfig& config);

HarnessConfig harness_config(const PipelineConfig& config);
AdaptationConfig adaptation_config(const PipelineConfig& config);

/// Allocator tuning for the many short-lived large matrices the trainer creates.
void configure_runtime();

}  // namespace signadapt
