#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/losses.hpp"
#include "mde/optim.hpp"
#include "mde/traineval.hpp"

namespace mde {

struct PathsConfig {
    std::string interactions;
    std::string features_visual;
    std::string features_textual;
    std::string output_dir = "out";
};

struct ModelSizeConfig {
    std::size_t embed_dim = 64;
    int layers = 2;
    std::size_t knn_item = 10;
    std::size_t knn_user = 40;
};

struct OptimRunConfig {
    double lr = 1e-3;
    std::size_t batch_size = 2048;
    std::size_t max_epochs = 1000;
    std::size_t patience = 20;
    bool early_stopping = true;
};

struct EvalRunConfig {
    std::size_t k = 5;
    std::size_t early_stop_k = 5;
};

struct AblateRunConfig {
    std::vector<std::uint64_t> seeds; // empty -> {seed, seed+1, seed+2}
    std::vector<AblationSpec> variants; // empty -> the three w/o variants
};

/// Everything a run needs; strict-parsed from one JSON file, overridable by
/// flags. See README for the key set.
struct RunConfig {
    std::uint64_t seed = 0;
    PathsConfig paths;
    ModelSizeConfig model;
    LossConfig losses;
    OptimRunConfig optim;
    EvalRunConfig eval;
    std::array<double, 3> split_ratios{0.8, 0.1, 0.1};
    SynthConfig synth;
    AblationSpec ablation;
    AblateRunConfig ablate;
    std::size_t gradcheck_samples = 200;

    // CLI-only knobs, never part of the config file or the hash.
    std::string eval_checkpoint;
    std::string eval_split = "test";

    void validate() const;

    /// Semantic identity of a training run (everything that changes the
    /// learned model except the data itself).
    std::uint64_t config_hash() const;

    /// Identity of the prepared artifacts: data content plus graph knobs.
    std::uint64_t prep_hash(std::uint64_t data_hash) const;
};

/// Strict JSON parse: unknown keys and wrong types are UsageErrors.
RunConfig parse_config_json(const std::string& text, const std::string& source_name);
RunConfig load_config_file(const std::string& path);

/// Resolved config as pretty JSON (file keys only).
std::string config_to_json(const RunConfig& cfg);

/// Applies one `section.key=value` override; values parse as JSON scalars
/// with a string fallback.
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

} // namespace mde
