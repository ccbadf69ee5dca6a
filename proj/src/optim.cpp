#include "mde/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <limits>
#include <numeric>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"

namespace mde {

GradientSet GradientSet::zeros_like(const ModelParams& params) {
    GradientSet g;
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        g.user_embed[m] = Matrix(params.user_embed[m].rows, params.user_embed[m].cols);
        g.proj_weight[m] = Matrix(params.proj_weight[m].rows, params.proj_weight[m].cols);
        g.proj_bias[m] = Matrix(params.proj_bias[m].rows, params.proj_bias[m].cols);
    }
    g.pref_user = Matrix(params.pref_user.rows, params.pref_user.cols);
    g.pref_item = Matrix(params.pref_item.rows, params.pref_item.cols);
    if (params.has_nlt_logits())
        g.nlt_logits = Matrix(params.nlt_logits.rows, params.nlt_logits.cols);
    return g;
}

namespace {

std::vector<std::uint32_t> all_items(std::size_t n) {
    std::vector<std::uint32_t> v(n);
    std::iota(v.begin(), v.end(), 0u);
    return v;
}

/// Item set the MDA/MSA terms run over this step (the "S" set).
std::vector<std::uint32_t> resolve_anchor_set(const LossConfig& cfg, std::size_t num_items,
                                              Rng* rng,
                                              const std::vector<std::uint32_t>* override_set) {
    if (override_set) {
        std::vector<std::uint32_t> s(*override_set);
        std::sort(s.begin(), s.end());
        s.erase(std::unique(s.begin(), s.end()), s.end());
        return s;
    }
    if (cfg.anchor_sample > 0 && cfg.anchor_sample < num_items && rng) {
        std::vector<std::uint32_t> idx = all_items(num_items);
        // Partial Fisher-Yates: the first anchor_sample entries are a uniform
        // sample without replacement.
        for (std::size_t i = 0; i < cfg.anchor_sample; ++i) {
            const std::size_t j = i + rng->uniform_index(num_items - i);
            std::swap(idx[i], idx[j]);
        }
        idx.resize(cfg.anchor_sample);
        std::sort(idx.begin(), idx.end());
        return idx;
    }
    return all_items(num_items);
}

Matrix slice_rows(const Matrix& src, const std::vector<std::uint32_t>& rows) {
    Matrix out(rows.size(), src.cols);
    for (std::size_t p = 0; p < rows.size(); ++p)
        std::memcpy(out.row(p), src.row(rows[p]), src.cols * sizeof(double));
    return out;
}

std::vector<double> slice_vec(const std::vector<double>& src,
                              const std::vector<std::uint32_t>& idx) {
    std::vector<double> out(idx.size());
    for (std::size_t p = 0; p < idx.size(); ++p)
        out[p] = src[idx[p]];
    return out;
}

struct Components {
    double bpr = 0, bpr_v = 0, bpr_t = 0, mda = 0, msa = 0;
    std::vector<std::uint32_t> mda_items;
    std::vector<std::uint32_t> msa_items;
};

Components loss_components(const ForwardState& st, const TripletBatch& batch,
                           const LossConfig& cfg, std::size_t num_items, Rng* anchor_rng,
                           const std::vector<std::uint32_t>* anchor_override) {
    Components c;
    c.mda_items = resolve_anchor_set(cfg, num_items, anchor_rng, anchor_override);
    c.msa_items = cfg.cl_scope == ClScope::in_batch ? unique_batch_items(batch)
                                                    : c.mda_items;
    c.bpr = bpr_loss(st.fused_user, st.fused_item, batch);
    c.bpr_v = modality_bpr_loss(st.hstar_user[kVisual], st.hstar_item[kVisual], batch);
    c.bpr_t = modality_bpr_loss(st.hstar_user[kTextual], st.hstar_item[kTextual], batch);
    if (c.mda_items.size() == num_items) {
        c.mda = mda_loss(st.hstar_item[kVisual], st.hstar_item[kTextual], st.w_diff,
                         cfg.sigma_diff, cfg.mda_squared);
    } else {
        c.mda = mda_loss(slice_rows(st.hstar_item[kVisual], c.mda_items),
                         slice_rows(st.hstar_item[kTextual], c.mda_items),
                         slice_vec(st.w_diff, c.mda_items), cfg.sigma_diff,
                         cfg.mda_squared);
    }
    c.msa = msa_loss_over(st.hstar_item[kVisual], st.hstar_item[kTextual], st.w_cl,
                          cfg.sigma_cl, cfg.tau, c.msa_items);
    return c;
}

void check_batch(const TripletBatch& batch, std::size_t num_users, std::size_t num_items) {
    if (batch.empty())
        throw DataError("gradients: empty batch");
    for (const Triplet& t : batch.triples) {
        if (t.user >= num_users || t.pos >= num_items || t.neg >= num_items)
            throw DataError("gradients: batch index out of range");
    }
}

/// Pullback of row-wise l2 normalization (norms carry the ε guard).
void normalization_pullback(const double* h, const double* g_hat, double* g_out,
                            std::size_t d) {
    const double r = std::sqrt(kernels::sumsq(h, d));
    const double n = r + 1e-12;
    kernels::axpy(1.0 / n, g_hat, g_out, d);
    if (r > 0.0) {
        const double hg = kernels::dot(h, g_hat, d);
        kernels::axpy(-hg / (n * n * r), h, g_out, d);
    }
}

} // namespace

GradientResult gradients(const ModelParams& params, const ModalityFeatures& visual,
                         const ModalityFeatures& textual, const GraphBundle& graphs,
                         const TripletBatch& batch, const LossConfig& loss_cfg,
                         const ForwardOptions& opts, Rng* anchor_rng,
                         const std::vector<std::uint32_t>* anchor_override) {
    loss_cfg.validate();
    check_batch(batch, params.num_users, params.num_items);

    const std::size_t m_users = params.num_users;
    const std::size_t n_items = params.num_items;
    const std::size_t d = params.embed_dim;
    const double batch_sz = static_cast<double>(batch.size());

    ForwardState st = forward(params, visual, textual, graphs, opts);
    Components comp =
        loss_components(st, batch, loss_cfg, n_items, anchor_rng, anchor_override);

    GradientResult result;
    result.losses = total_loss(comp.bpr, comp.bpr_v, comp.bpr_t, comp.mda, comp.msa,
                               params, loss_cfg);
    result.grads = GradientSet::zeros_like(params);
    GradientSet& grads = result.grads;

    // Upstream gradients on the pre-fusion representations, preference
    // probabilities and trade-off weights.
    std::array<Matrix, kNumModalities> g_su{Matrix(m_users, d), Matrix(m_users, d)};
    std::array<Matrix, kNumModalities> g_si{Matrix(n_items, d), Matrix(n_items, d)};
    Matrix g_pu(m_users, 2);
    Matrix g_pi(n_items, 2);
    std::vector<double> g_wdiff(n_items, 0.0);
    std::vector<double> g_wcl(n_items, 0.0);

    // Fused BPR. The fused score decomposes per modality as
    // P_u[u,m] * P_i[a,m] * <hstar_user_m[u], hstar_item_m[a]>.
    for (const Triplet& trip : batch.triples) {
        const std::uint32_t u = trip.user;
        const std::uint32_t i = trip.pos;
        const std::uint32_t j = trip.neg;
        const double x = score(st.fused_user, st.fused_item, u, i) -
                         score(st.fused_user, st.fused_item, u, j);
        const double g = -sigmoid(-x) / batch_sz;
        const std::pair<std::uint32_t, double> sides[2] = {{i, g}, {j, -g}};
        for (const auto& [a, coeff] : sides) {
            for (std::size_t m = 0; m < kNumModalities; ++m) {
                const double pu = st.pref_user_probs(u, m);
                const double pi = st.pref_item_probs(a, m);
                const double* su = st.hstar_user[m].row(u);
                const double* si = st.hstar_item[m].row(a);
                const double sdot = kernels::dot(su, si, d);
                kernels::axpy(coeff * pu * pi, si, g_su[m].row(u), d);
                kernels::axpy(coeff * pu * pi, su, g_si[m].row(a), d);
                g_pu(u, m) += coeff * pi * sdot;
                g_pi(a, m) += coeff * pu * sdot;
            }
        }
    }

    // Modality BPR terms.
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        for (const Triplet& trip : batch.triples) {
            const std::uint32_t u = trip.user;
            const std::uint32_t i = trip.pos;
            const std::uint32_t j = trip.neg;
            const double* su = st.hstar_user[m].row(u);
            const double x = kernels::dot(su, st.hstar_item[m].row(i), d) -
                             kernels::dot(su, st.hstar_item[m].row(j), d);
            const double g = -sigmoid(-x) / batch_sz;
            kernels::axpy(g, st.hstar_item[m].row(i), g_su[m].row(u), d);
            kernels::axpy(-g, st.hstar_item[m].row(j), g_su[m].row(u), d);
            kernels::axpy(g, su, g_si[m].row(i), d);
            kernels::axpy(-g, su, g_si[m].row(j), d);
        }
    }

    // Disagreement term over the anchor set.
    if (loss_cfg.sigma_diff != 0.0 && !comp.mda_items.empty()) {
        const double c = loss_cfg.sigma_diff /
                         static_cast<double>(comp.mda_items.size() * d);
        for (std::uint32_t i : comp.mda_items) {
            const double* a = st.hstar_item[kVisual].row(i);
            const double* b = st.hstar_item[kTextual].row(i);
            double* gv = g_si[kVisual].row(i);
            double* gt = g_si[kTextual].row(i);
            const double w = st.w_diff[i];
            if (loss_cfg.mda_squared) {
                double sq = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = a[k] - b[k];
                    sq += diff * diff;
                    gv[k] += c * 2.0 * w * w * diff;
                    gt[k] -= c * 2.0 * w * w * diff;
                }
                g_wdiff[i] += c * 2.0 * w * sq;
            } else {
                double adsum = 0.0;
                for (std::size_t k = 0; k < d; ++k) {
                    const double diff = a[k] - b[k];
                    adsum += std::abs(diff);
                    const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
                    gv[k] += -c * w * sgn;
                    gt[k] += c * w * sgn;
                }
                g_wdiff[i] += -c * adsum;
            }
        }
    }

    // Alignment term: InfoNCE over normalized rows, both directions.
    if (loss_cfg.sigma_cl != 0.0 && !comp.msa_items.empty()) {
        const std::vector<std::uint32_t>& items = comp.msa_items;
        const std::size_t s = items.size();
        const double alpha = loss_cfg.sigma_cl / static_cast<double>(s);
        Matrix zv(s, d), zt(s, d);
        for (std::size_t p = 0; p < s; ++p) {
            const double* hv = st.hstar_item[kVisual].row(items[p]);
            const double* ht = st.hstar_item[kTextual].row(items[p]);
            const double nv = std::sqrt(kernels::sumsq(hv, d)) + 1e-12;
            const double nt = std::sqrt(kernels::sumsq(ht, d)) + 1e-12;
            for (std::size_t k = 0; k < d; ++k) {
                zv(p, k) = hv[k] / nv;
                zt(p, k) = ht[k] / nt;
            }
        }
        Matrix g_zv(s, d), g_zt(s, d);
        std::vector<double> logits(s), probs(s);
        // directions: 0 = visual anchors vs textual candidates, 1 = reverse
        for (int dir = 0; dir < 2; ++dir) {
            const Matrix& anc = dir == 0 ? zv : zt;
            const Matrix& cnd = dir == 0 ? zt : zv;
            Matrix& g_anc = dir == 0 ? g_zv : g_zt;
            Matrix& g_cnd = dir == 0 ? g_zt : g_zv;
            for (std::size_t a = 0; a < s; ++a) {
                double lmax = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < s; ++j) {
                    logits[j] = kernels::dot(anc.row(a), cnd.row(j), d) / loss_cfg.tau;
                    lmax = std::max(lmax, logits[j]);
                }
                double expsum = 0.0;
                for (std::size_t j = 0; j < s; ++j) {
                    probs[j] = std::exp(logits[j] - lmax);
                    expsum += probs[j];
                }
                for (std::size_t j = 0; j < s; ++j)
                    probs[j] /= expsum;
                const double term = lmax + std::log(expsum) - logits[a];
                g_wcl[items[a]] += alpha * term;
                const double coef = alpha * st.w_cl[items[a]] / loss_cfg.tau;
                for (std::size_t j = 0; j < s; ++j) {
                    const double q = probs[j] - (j == a ? 1.0 : 0.0);
                    if (q == 0.0)
                        continue;
                    kernels::axpy(coef * q, cnd.row(j), g_anc.row(a), d);
                    kernels::axpy(coef * q, anc.row(a), g_cnd.row(j), d);
                }
            }
        }
        for (std::size_t p = 0; p < s; ++p) {
            normalization_pullback(st.hstar_item[kVisual].row(items[p]), g_zv.row(p),
                                   g_si[kVisual].row(items[p]), d);
            normalization_pullback(st.hstar_item[kTextual].row(items[p]), g_zt.row(p),
                                   g_si[kTextual].row(items[p]), d);
        }
    }

    // Trade-off weights back into their source.
    if (!opts.unit_nlt) {
        if (opts.independent_nlt) {
            for (std::size_t i = 0; i < n_items; ++i) {
                const double sgm = st.w_diff[i];
                grads.nlt_logits(i, 0) +=
                    (g_wdiff[i] - g_wcl[i]) * sgm * (1.0 - sgm);
            }
        } else if (!opts.fixed_pref_weight) {
            // w_diff = |p0 - p1|, w_cl = 1 - w_diff.
            for (std::size_t i = 0; i < n_items; ++i) {
                const double delta = st.pref_item_probs(i, 0) - st.pref_item_probs(i, 1);
                const double sgn = delta > 0.0 ? 1.0 : (delta < 0.0 ? -1.0 : 0.0);
                const double g = (g_wdiff[i] - g_wcl[i]) * sgn;
                g_pi(i, 0) += g;
                g_pi(i, 1) -= g;
            }
        }
    }

    // Two-column softmax pullback into the preference logits.
    if (!opts.fixed_pref_weight) {
        for (std::size_t u = 0; u < m_users; ++u) {
            const double t = st.pref_user_probs(u, 0) * st.pref_user_probs(u, 1) *
                             (g_pu(u, 0) - g_pu(u, 1));
            grads.pref_user(u, 0) += t;
            grads.pref_user(u, 1) -= t;
        }
        for (std::size_t i = 0; i < n_items; ++i) {
            const double t = st.pref_item_probs(i, 0) * st.pref_item_probs(i, 1) *
                             (g_pi(i, 0) - g_pi(i, 1));
            grads.pref_item(i, 0) += t;
            grads.pref_item(i, 1) -= t;
        }
    }

    // Homogeneous hop pullback, then the averaged hetero stack, per modality.
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        Matrix g_hbar(m_users + n_items, d);
        Matrix gu = spmm(graphs.user_homo_t, g_su[m]);
        Matrix gi = spmm(graphs.item_homo_t[m], g_si[m]);
        std::memcpy(g_hbar.row(0), gu.data.data(), gu.size() * sizeof(double));
        std::memcpy(g_hbar.row(m_users), gi.data.data(), gi.size() * sizeof(double));

        // hbar = (1/(L+1)) sum_l A^l E0 with symmetric A, so the adjoint runs
        // the same accumulation on the upstream gradient.
        Matrix g_e0 = propagate_hetero(g_hbar, graphs.hetero, opts.layers);

        kernels::axpy(1.0, g_e0.row(0), grads.user_embed[m].data.data(),
                      m_users * d);
        const Matrix& feats = m == kVisual ? visual.matrix : textual.matrix;
        double* bias = grads.proj_bias[m].row(0);
        for (std::size_t i = 0; i < n_items; ++i) {
            const double* gi_row = g_e0.row(m_users + i);
            const double* f = feats.row(i);
            for (std::size_t l = 0; l < feats.cols; ++l)
                if (f[l] != 0.0)
                    kernels::axpy(f[l], gi_row, grads.proj_weight[m].row(l), d);
            kernels::axpy(1.0, gi_row, bias, d);
        }
    }

    // L2 regularizer: d(sigma_reg * theta^2) = 2 sigma_reg theta.
    if (loss_cfg.sigma_reg != 0.0) {
        const double two_reg = 2.0 * loss_cfg.sigma_reg;
        const ModelParams& p = params;
        auto add = [&](const Matrix& theta, Matrix& g) {
            kernels::axpy(two_reg, theta.data.data(), g.data.data(), theta.size());
        };
        for (std::size_t m = 0; m < kNumModalities; ++m) {
            add(p.user_embed[m], grads.user_embed[m]);
            add(p.proj_weight[m], grads.proj_weight[m]);
            add(p.proj_bias[m], grads.proj_bias[m]);
        }
        add(p.pref_user, grads.pref_user);
        add(p.pref_item, grads.pref_item);
        if (p.has_nlt_logits())
            add(p.nlt_logits, grads.nlt_logits);
    }

    grads.for_each_tensor([&](const char* name, const Matrix& g) {
        for (double v : g.data)
            if (!std::isfinite(v))
                throw NumericError(std::string("non-finite gradient in ") + name);
    });
    return result;
}

LossBreakdown eval_loss(const ModelParams& params, const ModalityFeatures& visual,
                        const ModalityFeatures& textual, const GraphBundle& graphs,
                        const TripletBatch& batch, const LossConfig& loss_cfg,
                        const ForwardOptions& opts,
                        const std::vector<std::uint32_t>* anchor_override) {
    loss_cfg.validate();
    check_batch(batch, params.num_users, params.num_items);
    ForwardState st = forward(params, visual, textual, graphs, opts);
    Components comp = loss_components(st, batch, loss_cfg, params.num_items, nullptr,
                                      anchor_override);
    return total_loss(comp.bpr, comp.bpr_v, comp.bpr_t, comp.mda, comp.msa, params,
                      loss_cfg);
}

AdamState AdamState::init(const ModelParams& params, const AdamConfig& cfg) {
    AdamState st;
    st.cfg = cfg;
    st.m = GradientSet::zeros_like(params);
    st.v = GradientSet::zeros_like(params);
    return st;
}

void adam_step(ModelParams& params, const GradientSet& grads, AdamState& state) {
    const AdamConfig& c = state.cfg;
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 / (1.0 - std::pow(c.beta1, t));
    const double c2 = 1.0 / (1.0 - std::pow(c.beta2, t));

    auto update = [&](Matrix& p, const Matrix& g, Matrix& m, Matrix& v) {
        if (!p.same_shape(g))
            throw DataError("adam_step: gradient shape mismatch");
        kernels::adam_update(p.data.data(), g.data.data(), m.data.data(), v.data.data(),
                             c.beta1, c.beta2, c.eps, c.lr, c1, c2, p.size());
    };
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        update(params.user_embed[m], grads.user_embed[m], state.m.user_embed[m],
               state.v.user_embed[m]);
        update(params.proj_weight[m], grads.proj_weight[m], state.m.proj_weight[m],
               state.v.proj_weight[m]);
        update(params.proj_bias[m], grads.proj_bias[m], state.m.proj_bias[m],
               state.v.proj_bias[m]);
    }
    update(params.pref_user, grads.pref_user, state.m.pref_user, state.v.pref_user);
    update(params.pref_item, grads.pref_item, state.m.pref_item, state.v.pref_item);
    if (params.has_nlt_logits())
        update(params.nlt_logits, grads.nlt_logits, state.m.nlt_logits,
               state.v.nlt_logits);
}

GradCheckReport grad_check(const ModelParams& params, const ModalityFeatures& visual,
                           const ModalityFeatures& textual, const GraphBundle& graphs,
                           const TripletBatch& batch, const LossConfig& loss_cfg,
                           const ForwardOptions& opts, std::size_t samples,
                           std::uint64_t seed) {
    if (samples == 0)
        throw UsageError("grad_check: samples must be positive");
    SeedStreams streams(seed);
    Rng coord_rng = streams.stream("gradcheck-coords");

    // Pin the anchor set so every loss evaluation sees the same subset.
    std::vector<std::uint32_t> anchors;
    {
        Rng anchor_rng = streams.stream("gradcheck-anchors");
        anchors = resolve_anchor_set(loss_cfg, params.num_items, &anchor_rng, nullptr);
    }

    GradientResult analytic =
        gradients(params, visual, textual, graphs, batch, loss_cfg, opts, nullptr,
                  &anchors);

    ModelParams work = params;
    const double h = 1e-5;
    GradCheckReport report;
    double err_sum = 0.0;

    std::vector<std::pair<const char*, Matrix*>> work_tensors;
    work.for_each_tensor(
        [&](const char* name, Matrix& m) { work_tensors.emplace_back(name, &m); });
    std::vector<const Matrix*> grad_tensors;
    analytic.grads.for_each_tensor(
        [&](const char*, const Matrix& m) { grad_tensors.push_back(&m); });

    for (std::size_t t = 0; t < work_tensors.size(); ++t) {
        const char* name = work_tensors[t].first;
        Matrix& tensor = *work_tensors[t].second;
        const Matrix& grad = *grad_tensors[t];
        const std::size_t total = tensor.size();

        std::vector<std::size_t> coords;
        if (total <= samples) {
            coords.resize(total);
            std::iota(coords.begin(), coords.end(), std::size_t{0});
        } else {
            std::vector<std::size_t> idx(total);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            for (std::size_t i = 0; i < samples; ++i) {
                const std::size_t j = i + coord_rng.uniform_index(total - i);
                std::swap(idx[i], idx[j]);
            }
            idx.resize(samples);
            std::sort(idx.begin(), idx.end());
            coords = std::move(idx);
        }

        GradCheckEntry tensor_worst;
        tensor_worst.tensor = name;
        for (std::size_t c : coords) {
            const double old = tensor.data[c];
            tensor.data[c] = old + h;
            const double lp = eval_loss(work, visual, textual, graphs, batch, loss_cfg,
                                        opts, &anchors)
                                  .total;
            tensor.data[c] = old - h;
            const double lm = eval_loss(work, visual, textual, graphs, batch, loss_cfg,
                                        opts, &anchors)
                                  .total;
            tensor.data[c] = old;

            const double numeric = (lp - lm) / (2.0 * h);
            const double analytic_v = grad.data[c];
            const double mag = std::max(std::abs(analytic_v), std::abs(numeric));
            const double rel =
                mag <= 1e-8 ? 0.0
                            : std::abs(analytic_v - numeric) / std::max(mag, 1e-6);
            err_sum += rel;
            ++report.num_checked;
            if (rel >= tensor_worst.rel_err) {
                tensor_worst.coord = c;
                tensor_worst.analytic = analytic_v;
                tensor_worst.numeric = numeric;
                tensor_worst.rel_err = rel;
            }
        }
        report.per_tensor_worst.push_back(tensor_worst);
        if (tensor_worst.rel_err >= report.max_rel_err) {
            report.max_rel_err = tensor_worst.rel_err;
            report.worst = tensor_worst;
        }
    }
    report.mean_rel_err =
        report.num_checked > 0 ? err_sum / static_cast<double>(report.num_checked) : 0.0;
    return report;
}

std::string format_grad_check_table(const GradCheckReport& report) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-22s %10s %14s %14s %12s\n", "tensor", "coord",
                  "analytic", "numeric", "rel_err");
    out += line;
    for (const GradCheckEntry& e : report.per_tensor_worst) {
        std::snprintf(line, sizeof(line), "%-22s %10zu %14.6e %14.6e %12.3e\n",
                      e.tensor.c_str(), e.coord, e.analytic, e.numeric, e.rel_err);
        out += line;
    }
    std::snprintf(line, sizeof(line),
                  "checked %zu coordinates: max rel err %.3e, mean %.3e\n",
                  report.num_checked, report.max_rel_err, report.mean_rel_err);
    out += line;
    return out;
}

} // namespace mde
