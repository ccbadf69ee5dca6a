#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/graph.hpp"
#include "mde/matrix.hpp"

namespace mde {

/// Trainable tensors. Modality-indexed arrays follow kVisual/kTextual.
struct ModelParams {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    std::size_t embed_dim = 0;

    std::array<Matrix, kNumModalities> user_embed;  // M x d
    std::array<Matrix, kNumModalities> proj_weight; // d_m x d
    std::array<Matrix, kNumModalities> proj_bias;   // 1 x d
    Matrix pref_user;                               // M x 2 logits
    Matrix pref_item;                               // N x 2 logits
    Matrix nlt_logits; // N x 1, only allocated for the independent-weights variant

    bool has_nlt_logits() const { return !nlt_logits.empty(); }

    /// Visits every allocated tensor in a fixed order; f(name, matrix).
    template <class F> void for_each_tensor(F&& f) {
        f("user_embed_visual", user_embed[kVisual]);
        f("user_embed_textual", user_embed[kTextual]);
        f("proj_weight_visual", proj_weight[kVisual]);
        f("proj_weight_textual", proj_weight[kTextual]);
        f("proj_bias_visual", proj_bias[kVisual]);
        f("proj_bias_textual", proj_bias[kTextual]);
        f("pref_user", pref_user);
        f("pref_item", pref_item);
        if (has_nlt_logits())
            f("nlt_logits", nlt_logits);
    }
    template <class F> void for_each_tensor(F&& f) const {
        const_cast<ModelParams*>(this)->for_each_tensor(
            [&](const char* name, Matrix& m) { f(name, static_cast<const Matrix&>(m)); });
    }
};

/// Structural switches for the forward pass; defaults reproduce the full model.
struct ForwardOptions {
    int layers = 2;
    /// Fuse with the constant row (1 - w, w) instead of learned preferences.
    std::optional<double> fixed_pref_weight;
    /// Trade-off weights from a dedicated sigmoid tensor instead of preferences.
    bool independent_nlt = false;
    /// Both trade-off weights pinned to 1 (node-level trade-off removed).
    bool unit_nlt = false;
};

/// Every intermediate the losses and the backward pass need.
struct ForwardState {
    std::array<Matrix, kNumModalities> item_embed;  // N x d, projected features
    std::array<Matrix, kNumModalities> hbar;        // (M+N) x d, layer-averaged
    std::array<Matrix, kNumModalities> hstar_user;  // M x d
    std::array<Matrix, kNumModalities> hstar_item;  // N x d
    Matrix pref_user_probs;                         // M x 2
    Matrix pref_item_probs;                         // N x 2
    std::vector<double> w_diff;                     // per item
    std::vector<double> w_cl;                       // per item
    Matrix fused_user;                              // M x 2d
    Matrix fused_item;                              // N x 2d
};

/// Xavier-uniform embeddings and projections, zero biases and preference
/// logits. Draws come from the "init" stream of the given root seed.
ModelParams init_params(const InteractionDataset& ds, const ModalityFeatures& visual,
                        const ModalityFeatures& textual, std::size_t embed_dim,
                        std::uint64_t seed);

/// Allocates the independent trade-off tensor (zeros, so w_diff starts at 0.5).
void enable_independent_nlt(ModelParams& params);

/// features * W + b (bias broadcast over rows).
Matrix project_features(const Matrix& features, const Matrix& weight, const Matrix& bias);

/// Average of the embedding stack E^0..E^L under repeated propagation.
Matrix propagate_hetero(const Matrix& e0, const SparseAdjacency& hetero, int layers);

/// One homogeneous hop on the layer-averaged embeddings; returns the user and
/// item halves.
std::pair<Matrix, Matrix> propagate_homo(const Matrix& hbar, const GraphBundle& graphs,
                                         std::size_t modality);

/// Row-wise softmax over two logits, max-subtracted so equal logits give
/// exactly one half.
Matrix softmax_rows2(const Matrix& logits);

/// [p_v * h_v, p_t * h_t] concatenation, width 2d.
Matrix fuse(const Matrix& hstar_v, const Matrix& hstar_t, const Matrix& probs);

double score(const Matrix& fused_user, const Matrix& fused_item, std::size_t user,
             std::size_t item);

/// Dense M x N score table.
Matrix full_scores(const Matrix& fused_user, const Matrix& fused_item);

ForwardState forward(const ModelParams& params, const ModalityFeatures& visual,
                     const ModalityFeatures& textual, const GraphBundle& graphs,
                     const ForwardOptions& opts);

struct Checkpoint {
    ModelParams params;
    std::uint64_t config_hash = 0;
    std::uint64_t prep_hash = 0;
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     std::uint64_t config_hash, std::uint64_t prep_hash);
Checkpoint load_checkpoint(const std::string& path);

} // namespace mde
