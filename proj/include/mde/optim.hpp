#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/graph.hpp"
#include "mde/losses.hpp"
#include "mde/matrix.hpp"
#include "mde/model.hpp"
#include "mde/rng.hpp"

namespace mde {

/// One gradient per trainable tensor, same shapes and iteration order as
/// ModelParams.
struct GradientSet {
    std::array<Matrix, kNumModalities> user_embed;
    std::array<Matrix, kNumModalities> proj_weight;
    std::array<Matrix, kNumModalities> proj_bias;
    Matrix pref_user;
    Matrix pref_item;
    Matrix nlt_logits;

    static GradientSet zeros_like(const ModelParams& params);

    template <class F> void for_each_tensor(F&& f) {
        f("user_embed_visual", user_embed[kVisual]);
        f("user_embed_textual", user_embed[kTextual]);
        f("proj_weight_visual", proj_weight[kVisual]);
        f("proj_weight_textual", proj_weight[kTextual]);
        f("proj_bias_visual", proj_bias[kVisual]);
        f("proj_bias_textual", proj_bias[kTextual]);
        f("pref_user", pref_user);
        f("pref_item", pref_item);
        if (!nlt_logits.empty())
            f("nlt_logits", nlt_logits);
    }
    template <class F> void for_each_tensor(F&& f) const {
        const_cast<GradientSet*>(this)->for_each_tensor(
            [&](const char* name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }
};

struct GradientResult {
    LossBreakdown losses;
    GradientSet grads;
};

/// Loss and exact reverse-mode gradients for one batch on the full forward
/// pass. With full scope and anchor_sample > 0, `anchor_rng` draws the item
/// subset the MDA/MSA terms run over; `anchor_override` pins it instead
/// (used by the finite-difference checker).
GradientResult gradients(const ModelParams& params, const ModalityFeatures& visual,
                         const ModalityFeatures& textual, const GraphBundle& graphs,
                         const TripletBatch& batch, const LossConfig& loss_cfg,
                         const ForwardOptions& opts, Rng* anchor_rng = nullptr,
                         const std::vector<std::uint32_t>* anchor_override = nullptr);

/// Loss recomputation with no gradient work; shares the anchor-set rules with
/// gradients().
LossBreakdown eval_loss(const ModelParams& params, const ModalityFeatures& visual,
                        const ModalityFeatures& textual, const GraphBundle& graphs,
                        const TripletBatch& batch, const LossConfig& loss_cfg,
                        const ForwardOptions& opts,
                        const std::vector<std::uint32_t>* anchor_override = nullptr);

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig cfg;
    std::size_t step = 0;
    GradientSet m; // first-moment accumulators
    GradientSet v; // second-moment accumulators

    static AdamState init(const ModelParams& params, const AdamConfig& cfg);
};

/// One bias-corrected Adam update over every trainable tensor.
void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state);

struct GradCheckEntry {
    std::string tensor;
    std::size_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    double mean_rel_err = 0.0;
    std::size_t num_checked = 0;
    std::vector<GradCheckEntry> per_tensor_worst; // one entry per tensor
    GradCheckEntry worst;

    bool passed(double threshold) const { return max_rel_err < threshold; }
};

/// Central finite differences (h = 1e-5) on `samples` coordinates per tensor
/// against the analytic gradients. rel_err = |a-n| / max(|a|,|n|,1e-6); pairs
/// with both |a| and |n| <= 1e-8 count as exact.
GradCheckReport grad_check(const ModelParams& params, const ModalityFeatures& visual,
                           const ModalityFeatures& textual, const GraphBundle& graphs,
                           const TripletBatch& batch, const LossConfig& loss_cfg,
                           const ForwardOptions& opts, std::size_t samples,
                           std::uint64_t seed);

std::string format_grad_check_table(const GradCheckReport& report);

} // namespace mde
