#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/graph.hpp"
#include "mde/losses.hpp"
#include "mde/model.hpp"
#include "mde/optim.hpp"

namespace mde {

struct MetricReport {
    std::size_t k = 0;
    double recall = 0.0;
    double precision = 0.0;
    double map = 0.0;
    double ndcg = 0.0;
    std::size_t num_users = 0; // users with ground truth in the split
};

/// Full-sort top-K ranking metrics. Train items of each user are excluded
/// from the candidate list unless exclude_train is false; ties rank the lower
/// item index first; users without ground truth in the split are skipped.
MetricReport evaluate(const Matrix& fused_user, const Matrix& fused_item,
                      const UserItemIndex& index, Split split, std::size_t k,
                      bool exclude_train = true);

/// One model variant of the ablation study.
struct AblationSpec {
    std::string name;
    bool disable_mda = false;
    bool disable_msa = false;
    bool disable_nlt = false;               // trade-off weights pinned to 1
    std::optional<double> fixed_pref_weight; // constant fusion instead of learned
    bool independent_weights = false;        // w_diff from a dedicated tensor

    void validate() const;
    std::string display_name() const;
};

struct TrainConfig {
    std::size_t embed_dim = 64;
    int layers = 2;
    LossConfig loss;
    AdamConfig adam;
    std::size_t batch_size = 2048;
    std::size_t max_epochs = 1000;
    std::size_t patience = 20;    // epochs of no improvement tolerated
    bool early_stopping = true;
    std::size_t early_stop_k = 5; // validation recall cutoff
    std::uint64_t seed = 0;
    AblationSpec ablation;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double mean_total_loss = 0.0;
    double val_recall = 0.0;
    bool improved = false;
};

struct TrainResult {
    ModelParams best_params;  // highest validation recall
    ModelParams final_params; // last completed epoch
    std::size_t best_epoch = 0;
    double best_val_recall = 0.0;
    std::size_t epochs_run = 0;
    std::size_t steps = 0;
    bool diverged = false;
    std::vector<EpochRecord> epochs;
};

using StepLogFn = std::function<void(std::size_t step, const LossBreakdown&)>;
using EpochLogFn = std::function<void(const EpochRecord&)>;

/// BPR training with Adam, per-epoch validation recall and patience-based
/// early stopping. All randomness (shuffling, negatives, init, anchors)
/// derives from cfg.seed.
TrainResult train(const InteractionDataset& ds, const UserItemIndex& index,
                  const ModalityFeatures& visual, const ModalityFeatures& textual,
                  const GraphBundle& graphs, const TrainConfig& cfg,
                  const StepLogFn& on_step = {}, const EpochLogFn& on_epoch = {});

ForwardOptions forward_options(const TrainConfig& cfg);

struct AblationRow {
    std::string name;
    MetricReport metrics; // averaged over seeds
};

struct AblationTable {
    std::size_t k = 0;
    std::vector<std::uint64_t> seeds;
    std::vector<AblationRow> rows; // full model first, then the variants
};

/// Trains the full model plus each variant for every seed and reports
/// seed-averaged test metrics.
AblationTable run_ablation(const InteractionDataset& ds, const UserItemIndex& index,
                           const ModalityFeatures& visual, const ModalityFeatures& textual,
                           const GraphBundle& graphs, const TrainConfig& base,
                           const std::vector<AblationSpec>& variants,
                           const std::vector<std::uint64_t>& seeds, std::size_t eval_k,
                           const std::function<void(const std::string&)>& progress = {});

std::string format_metrics_tsv(const MetricReport& report);
std::string format_ablation_tsv(const AblationTable& table);

} // namespace mde
