#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/matrix.hpp"

namespace mde {

struct ModelParams;

/// Candidate set of the alignment loss: every item, or only the batch items.
enum class ClScope { full, in_batch };

ClScope cl_scope_from_string(const std::string& s);
const char* cl_scope_to_string(ClScope s);

struct LossConfig {
    double sigma_diff = 0.1;
    double sigma_cl = 0.01;
    double sigma_reg = 1e-4;
    double tau = 0.2;
    ClScope cl_scope = ClScope::full;
    /// Print/optimize the squared-norm disagreement form instead of the
    /// absolute one.
    bool mda_squared = false;
    /// With full scope, restrict the item-side losses to this many sampled
    /// anchor items per step (0 = all items).
    std::size_t anchor_sample = 0;

    void validate() const;
};

/// Per-item disagreement and alignment weights; w_diff + w_cl == 1 row-wise.
struct TradeoffWeights {
    std::vector<double> w_diff;
    std::vector<double> w_cl;
};

/// w_diff = |p_v - p_t| from the two-column preference probabilities.
TradeoffWeights tradeoff_weights(const Matrix& pref_item_probs);

/// Weighted mean absolute disagreement between the modality item embeddings,
/// negated (maximized magnitude). The squared flag switches to the weighted
/// mean squared form with squared weights.
double mda_loss(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                const std::vector<double>& w_diff, double sigma_diff,
                bool squared = false);

/// Symmetric InfoNCE over row-normalized modality embeddings; each anchor's
/// -log term is weighted by w_cl, means taken per direction. The candidate
/// set is every item (full) or the batch's unique positives (in_batch).
double msa_loss(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                const std::vector<double>& w_cl, double sigma_cl, double tau,
                ClScope scope, const std::vector<std::uint32_t>& batch_items);

/// MSA core over an explicit sorted anchor/candidate set.
double msa_loss_over(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                     const std::vector<double>& w_cl, double sigma_cl, double tau,
                     const std::vector<std::uint32_t>& items);

/// Deduplicated, sorted positive items of a batch.
std::vector<std::uint32_t> unique_batch_items(const TripletBatch& batch);

/// Mean softplus(-(s_ui - s_uj)) over the batch triples.
double bpr_loss(const Matrix& user_embed, const Matrix& item_embed,
                const TripletBatch& batch);

/// Same ranking loss evaluated in one modality's pre-fusion space.
inline double modality_bpr_loss(const Matrix& hstar_user_m, const Matrix& hstar_item_m,
                                const TripletBatch& batch) {
    return bpr_loss(hstar_user_m, hstar_item_m, batch);
}

struct LossBreakdown {
    double bpr = 0.0;        // L_g
    double bpr_visual = 0.0; // L_v
    double bpr_textual = 0.0;
    double mda = 0.0;
    double msa = 0.0;
    double reg = 0.0;
    double total = 0.0;
};

/// Sums the components plus sigma_reg * ||theta||^2; throws NumericError
/// naming the first non-finite term.
LossBreakdown total_loss(double bpr, double bpr_visual, double bpr_textual, double mda,
                         double msa, const ModelParams& params, const LossConfig& cfg);

double softplus(double x);
double sigmoid(double x);

} // namespace mde
