#include "mde/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"
#include "mde/model.hpp"

namespace mde {

double softplus(double x) {
    // log(1 + e^x) without overflow for large |x|.
    if (x > 0.0)
        return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

double sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

ClScope cl_scope_from_string(const std::string& s) {
    if (s == "full")
        return ClScope::full;
    if (s == "in_batch")
        return ClScope::in_batch;
    throw UsageError("unknown cl_scope '" + s + "' (expected full or in_batch)");
}

const char* cl_scope_to_string(ClScope s) {
    return s == ClScope::full ? "full" : "in_batch";
}

void LossConfig::validate() const {
    if (sigma_diff < 0.0 || sigma_cl < 0.0 || sigma_reg < 0.0)
        throw UsageError("loss weights must be non-negative");
    if (!(tau > 0.0))
        throw UsageError("tau must be positive");
}

TradeoffWeights tradeoff_weights(const Matrix& pref_item_probs) {
    if (pref_item_probs.cols != 2)
        throw DataError("tradeoff_weights: expected two columns");
    TradeoffWeights tw;
    tw.w_diff.resize(pref_item_probs.rows);
    tw.w_cl.resize(pref_item_probs.rows);
    for (std::size_t i = 0; i < pref_item_probs.rows; ++i) {
        const double wd = std::abs(pref_item_probs(i, 0) - pref_item_probs(i, 1));
        tw.w_diff[i] = wd;
        tw.w_cl[i] = 1.0 - wd;
    }
    return tw;
}

double mda_loss(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                const std::vector<double>& w_diff, double sigma_diff, bool squared) {
    if (!hstar_item_v.same_shape(hstar_item_t))
        throw DataError("mda_loss: modality shapes differ");
    if (w_diff.size() != hstar_item_v.rows)
        throw DataError("mda_loss: weight count mismatch");
    const std::size_t n = hstar_item_v.rows;
    const std::size_t d = hstar_item_v.cols;
    if (n == 0 || d == 0)
        return 0.0;
    double sum = 0.0;
    if (squared) {
        for (std::size_t i = 0; i < n; ++i) {
            const double* a = hstar_item_v.row(i);
            const double* b = hstar_item_t.row(i);
            double sq = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = a[k] - b[k];
                sq += diff * diff;
            }
            sum += w_diff[i] * w_diff[i] * sq;
        }
        // Squared entries of the (negated) disagreement matrix: the negation
        // cancels, so this printed form rewards small differences.
        return sigma_diff * sum / static_cast<double>(n * d);
    }
    for (std::size_t i = 0; i < n; ++i)
        sum += w_diff[i] *
               kernels::abs_diff_sum(hstar_item_v.row(i), hstar_item_t.row(i), d);
    return -sigma_diff * sum / static_cast<double>(n * d);
}

std::vector<std::uint32_t> unique_batch_items(const TripletBatch& batch) {
    std::vector<std::uint32_t> items;
    items.reserve(batch.size());
    for (const Triplet& t : batch.triples)
        items.push_back(t.pos);
    std::sort(items.begin(), items.end());
    items.erase(std::unique(items.begin(), items.end()), items.end());
    return items;
}

namespace {

/// Row-normalized copies of the selected rows; norms get the ε guard.
Matrix normalized_rows(const Matrix& src, const std::vector<std::uint32_t>& items) {
    Matrix out(items.size(), src.cols);
    for (std::size_t p = 0; p < items.size(); ++p) {
        const double* r = src.row(items[p]);
        const double norm = std::sqrt(kernels::sumsq(r, src.cols)) + 1e-12;
        double* dst = out.row(p);
        for (std::size_t k = 0; k < src.cols; ++k)
            dst[k] = r[k] / norm;
    }
    return out;
}

/// Sum over anchors of w_cl[a] * (-log softmax_a), one direction.
double infonce_direction(const Matrix& anchors, const Matrix& candidates,
                         const std::vector<double>& w_cl,
                         const std::vector<std::uint32_t>& items, double tau) {
    const std::size_t s = items.size();
    const std::size_t d = anchors.cols;
    std::vector<double> logits(s);
    double total = 0.0;
    for (std::size_t a = 0; a < s; ++a) {
        double lmax = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < s; ++j) {
            logits[j] = kernels::dot(anchors.row(a), candidates.row(j), d) / tau;
            lmax = std::max(lmax, logits[j]);
        }
        double expsum = 0.0;
        for (std::size_t j = 0; j < s; ++j)
            expsum += std::exp(logits[j] - lmax);
        const double lse = lmax + std::log(expsum);
        total += w_cl[items[a]] * (lse - logits[a]);
    }
    return total / static_cast<double>(s);
}

} // namespace

double msa_loss_over(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                     const std::vector<double>& w_cl, double sigma_cl, double tau,
                     const std::vector<std::uint32_t>& items) {
    if (!hstar_item_v.same_shape(hstar_item_t))
        throw DataError("msa_loss: modality shapes differ");
    if (w_cl.size() != hstar_item_v.rows)
        throw DataError("msa_loss: weight count mismatch");
    if (!(tau > 0.0))
        throw UsageError("msa_loss: tau must be positive");
    if (items.empty())
        return 0.0;
    for (std::uint32_t i : items)
        if (i >= hstar_item_v.rows)
            throw DataError("msa_loss: item index out of range");

    const Matrix zv = normalized_rows(hstar_item_v, items);
    const Matrix zt = normalized_rows(hstar_item_t, items);
    const double fwd = infonce_direction(zv, zt, w_cl, items, tau);
    const double bwd = infonce_direction(zt, zv, w_cl, items, tau);
    return sigma_cl * (fwd + bwd);
}

double msa_loss(const Matrix& hstar_item_v, const Matrix& hstar_item_t,
                const std::vector<double>& w_cl, double sigma_cl, double tau,
                ClScope scope, const std::vector<std::uint32_t>& batch_items) {
    std::vector<std::uint32_t> items;
    if (scope == ClScope::full) {
        items.resize(hstar_item_v.rows);
        for (std::size_t i = 0; i < items.size(); ++i)
            items[i] = static_cast<std::uint32_t>(i);
    } else {
        if (batch_items.empty())
            throw DataError("msa_loss: in_batch scope needs a non-empty batch");
        items = batch_items;
        std::sort(items.begin(), items.end());
        items.erase(std::unique(items.begin(), items.end()), items.end());
    }
    return msa_loss_over(hstar_item_v, hstar_item_t, w_cl, sigma_cl, tau, items);
}

double bpr_loss(const Matrix& user_embed, const Matrix& item_embed,
                const TripletBatch& batch) {
    if (batch.empty())
        throw DataError("bpr_loss: empty batch");
    if (user_embed.cols != item_embed.cols)
        throw DataError("bpr_loss: embedding width mismatch");
    const std::size_t d = user_embed.cols;
    double total = 0.0;
    for (const Triplet& t : batch.triples) {
        const double* u = user_embed.row(t.user);
        const double x = kernels::dot(u, item_embed.row(t.pos), d) -
                         kernels::dot(u, item_embed.row(t.neg), d);
        total += softplus(-x);
    }
    return total / static_cast<double>(batch.size());
}

LossBreakdown total_loss(double bpr, double bpr_visual, double bpr_textual, double mda,
                         double msa, const ModelParams& params, const LossConfig& cfg) {
    LossBreakdown out;
    out.bpr = bpr;
    out.bpr_visual = bpr_visual;
    out.bpr_textual = bpr_textual;
    out.mda = mda;
    out.msa = msa;
    double reg = 0.0;
    params.for_each_tensor([&](const char*, const Matrix& m) {
        reg += kernels::sumsq(m.data.data(), m.size());
    });
    out.reg = cfg.sigma_reg * reg;

    const std::pair<const char*, double> terms[] = {
        {"L_g", out.bpr},    {"L_v", out.bpr_visual}, {"L_t", out.bpr_textual},
        {"L_diff", out.mda}, {"L_cl", out.msa},       {"reg", out.reg},
    };
    double total = 0.0;
    for (const auto& [name, value] : terms) {
        if (!std::isfinite(value))
            throw NumericError(std::string("non-finite loss term ") + name);
        total += value;
    }
    out.total = total;
    return out;
}

} // namespace mde
