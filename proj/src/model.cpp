#include "mde/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"
#include "mde/losses.hpp"
#include "mde/rng.hpp"

namespace mde {

namespace {

/// Xavier-uniform fill: bound sqrt(6 / (rows + cols)).
void xavier_fill(Matrix& m, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(m.rows + m.cols));
    for (double& v : m.data)
        v = rng.uniform_range(-bound, bound);
}

} // namespace

ModelParams init_params(const InteractionDataset& ds, const ModalityFeatures& visual,
                        const ModalityFeatures& textual, std::size_t embed_dim,
                        std::uint64_t seed) {
    if (embed_dim == 0)
        throw UsageError("embed_dim must be positive");
    visual.validate(ds.num_items);
    textual.validate(ds.num_items);

    ModelParams p;
    p.num_users = ds.num_users;
    p.num_items = ds.num_items;
    p.embed_dim = embed_dim;
    const std::size_t dims[kNumModalities] = {visual.dim(), textual.dim()};
    for (std::size_t m = 0; m < kNumModalities; ++m) {
        p.user_embed[m] = Matrix(ds.num_users, embed_dim);
        p.proj_weight[m] = Matrix(dims[m], embed_dim);
        p.proj_bias[m] = Matrix(1, embed_dim);
    }
    p.pref_user = Matrix(ds.num_users, 2);
    p.pref_item = Matrix(ds.num_items, 2);

    SeedStreams streams(seed);
    Rng rng = streams.stream("init");
    for (std::size_t m = 0; m < kNumModalities; ++m)
        xavier_fill(p.user_embed[m], rng);
    for (std::size_t m = 0; m < kNumModalities; ++m)
        xavier_fill(p.proj_weight[m], rng);
    return p;
}

void enable_independent_nlt(ModelParams& params) {
    params.nlt_logits = Matrix(params.num_items, 1);
}

Matrix project_features(const Matrix& features, const Matrix& weight, const Matrix& bias) {
    if (features.cols != weight.rows)
        throw DataError("project_features: feature dim " + std::to_string(features.cols) +
                        " does not match projection rows " + std::to_string(weight.rows));
    if (bias.rows != 1 || bias.cols != weight.cols)
        throw DataError("project_features: bias shape mismatch");
    Matrix out(features.rows, weight.cols);
    for (std::size_t i = 0; i < features.rows; ++i) {
        double* dst = out.row(i);
        std::memcpy(dst, bias.row(0), weight.cols * sizeof(double));
        const double* f = features.row(i);
        for (std::size_t l = 0; l < features.cols; ++l)
            if (f[l] != 0.0)
                kernels::axpy(f[l], weight.row(l), dst, weight.cols);
    }
    return out;
}

Matrix propagate_hetero(const Matrix& e0, const SparseAdjacency& hetero, int layers) {
    if (layers < 0)
        throw UsageError("layers must be non-negative");
    if (hetero.num_rows != e0.rows)
        throw DataError("propagate_hetero: graph/embedding size mismatch");
    Matrix sum = e0;
    Matrix cur = e0;
    Matrix next(e0.rows, e0.cols);
    for (int l = 0; l < layers; ++l) {
        spmm_into(hetero, cur, next);
        std::swap(cur, next);
        kernels::axpy(1.0, cur.data.data(), sum.data.data(), sum.size());
    }
    kernels::scale(1.0 / static_cast<double>(layers + 1), sum.data.data(), sum.size());
    return sum;
}

std::pair<Matrix, Matrix> propagate_homo(const Matrix& hbar, const GraphBundle& graphs,
                                         std::size_t modality) {
    const std::size_t m = graphs.num_users;
    const std::size_t n = graphs.num_items;
    if (hbar.rows != m + n)
        throw DataError("propagate_homo: embedding rows do not match graph size");
    Matrix hbar_user(m, hbar.cols);
    Matrix hbar_item(n, hbar.cols);
    std::memcpy(hbar_user.data.data(), hbar.row(0), m * hbar.cols * sizeof(double));
    std::memcpy(hbar_item.data.data(), hbar.row(m), n * hbar.cols * sizeof(double));
    return {spmm(graphs.user_homo, hbar_user),
            spmm(graphs.item_homo[modality], hbar_item)};
}

Matrix softmax_rows2(const Matrix& logits) {
    if (logits.cols != 2)
        throw DataError("softmax_rows2: expected two columns");
    Matrix probs(logits.rows, 2);
    for (std::size_t i = 0; i < logits.rows; ++i) {
        const double a = logits(i, 0);
        const double b = logits(i, 1);
        const double m = std::max(a, b);
        const double ea = std::exp(a - m);
        const double eb = std::exp(b - m);
        probs(i, 0) = ea / (ea + eb);
        probs(i, 1) = eb / (ea + eb);
    }
    return probs;
}

Matrix fuse(const Matrix& hstar_v, const Matrix& hstar_t, const Matrix& probs) {
    if (!hstar_v.same_shape(hstar_t))
        throw DataError("fuse: modality shapes differ");
    if (probs.rows != hstar_v.rows || probs.cols != 2)
        throw DataError("fuse: probability shape mismatch");
    const std::size_t d = hstar_v.cols;
    Matrix out(hstar_v.rows, 2 * d);
    for (std::size_t i = 0; i < out.rows; ++i) {
        double* dst = out.row(i);
        const double* v = hstar_v.row(i);
        const double* t = hstar_t.row(i);
        const double pv = probs(i, 0);
        const double pt = probs(i, 1);
        for (std::size_t k = 0; k < d; ++k) {
            dst[k] = pv * v[k];
            dst[d + k] = pt * t[k];
        }
    }
    return out;
}

double score(const Matrix& fused_user, const Matrix& fused_item, std::size_t user,
             std::size_t item) {
    if (user >= fused_user.rows || item >= fused_item.rows)
        throw DataError("score: index out of range");
    if (fused_user.cols != fused_item.cols)
        throw DataError("score: embedding width mismatch");
    return kernels::dot(fused_user.row(user), fused_item.row(item), fused_user.cols);
}

Matrix full_scores(const Matrix& fused_user, const Matrix& fused_item) {
    if (fused_user.cols != fused_item.cols)
        throw DataError("full_scores: embedding width mismatch");
    Matrix s(fused_user.rows, fused_item.rows);
    for (std::size_t u = 0; u < fused_user.rows; ++u) {
        double* row = s.row(u);
        for (std::size_t i = 0; i < fused_item.rows; ++i)
            row[i] = kernels::dot(fused_user.row(u), fused_item.row(i), fused_user.cols);
    }
    return s;
}

ForwardState forward(const ModelParams& params, const ModalityFeatures& visual,
                     const ModalityFeatures& textual, const GraphBundle& graphs,
                     const ForwardOptions& opts) {
    if (graphs.num_users != params.num_users || graphs.num_items != params.num_items)
        throw DataError("forward: graph and parameter sizes disagree");
    if (opts.fixed_pref_weight &&
        (*opts.fixed_pref_weight < 0.0 || *opts.fixed_pref_weight > 1.0))
        throw UsageError("fixed preference weight must lie in [0, 1]");
    if (opts.independent_nlt && !params.has_nlt_logits())
        throw UsageError("independent trade-off requested but tensor is not allocated");

    const std::size_t m = params.num_users;
    const std::size_t n = params.num_items;
    const std::size_t d = params.embed_dim;
    const Matrix* feats[kNumModalities] = {&visual.matrix, &textual.matrix};

    ForwardState st;
    for (std::size_t mod = 0; mod < kNumModalities; ++mod) {
        st.item_embed[mod] =
            project_features(*feats[mod], params.proj_weight[mod], params.proj_bias[mod]);
        Matrix e0(m + n, d);
        std::memcpy(e0.row(0), params.user_embed[mod].data.data(), m * d * sizeof(double));
        std::memcpy(e0.row(m), st.item_embed[mod].data.data(), n * d * sizeof(double));
        st.hbar[mod] = propagate_hetero(e0, graphs.hetero, opts.layers);
        auto [hu, hi] = propagate_homo(st.hbar[mod], graphs, mod);
        st.hstar_user[mod] = std::move(hu);
        st.hstar_item[mod] = std::move(hi);
    }

    if (opts.fixed_pref_weight) {
        const double wt = *opts.fixed_pref_weight;
        st.pref_user_probs = Matrix(m, 2);
        st.pref_item_probs = Matrix(n, 2);
        for (std::size_t u = 0; u < m; ++u) {
            st.pref_user_probs(u, 0) = 1.0 - wt;
            st.pref_user_probs(u, 1) = wt;
        }
        for (std::size_t i = 0; i < n; ++i) {
            st.pref_item_probs(i, 0) = 1.0 - wt;
            st.pref_item_probs(i, 1) = wt;
        }
    } else {
        st.pref_user_probs = softmax_rows2(params.pref_user);
        st.pref_item_probs = softmax_rows2(params.pref_item);
    }

    if (opts.unit_nlt) {
        st.w_diff.assign(n, 1.0);
        st.w_cl.assign(n, 1.0);
    } else if (opts.independent_nlt) {
        st.w_diff.resize(n);
        st.w_cl.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double s = 1.0 / (1.0 + std::exp(-params.nlt_logits(i, 0)));
            st.w_diff[i] = s;
            st.w_cl[i] = 1.0 - s;
        }
    } else {
        TradeoffWeights tw = tradeoff_weights(st.pref_item_probs);
        st.w_diff = std::move(tw.w_diff);
        st.w_cl = std::move(tw.w_cl);
    }

    st.fused_user =
        fuse(st.hstar_user[kVisual], st.hstar_user[kTextual], st.pref_user_probs);
    st.fused_item =
        fuse(st.hstar_item[kVisual], st.hstar_item[kTextual], st.pref_item_probs);
    return st;
}

namespace {

constexpr char kCkptMagic[8] = {'M', 'D', 'E', 'C', 'K', 'P', 'T', '1'};

void write_tensor(std::ofstream& out, const std::string& name, const Matrix& m) {
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(name.data(), len);
    const std::uint64_t rows = m.rows, cols = m.cols;
    out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
    out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
    out.write(reinterpret_cast<const char*>(m.data.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
}

} // namespace

void save_checkpoint(const std::string& path, const ModelParams& params,
                     std::uint64_t config_hash, std::uint64_t prep_hash) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open for write: " + path);
    out.write(kCkptMagic, sizeof(kCkptMagic));
    out.write(reinterpret_cast<const char*>(&config_hash), sizeof(config_hash));
    out.write(reinterpret_cast<const char*>(&prep_hash), sizeof(prep_hash));
    const std::uint64_t dims[3] = {params.num_users, params.num_items, params.embed_dim};
    out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    std::uint32_t count = 0;
    params.for_each_tensor([&](const char*, const Matrix&) { ++count; });
    out.write(reinterpret_cast<const char*>(&count), sizeof(count));
    params.for_each_tensor(
        [&](const char* name, const Matrix& m) { write_tensor(out, name, m); });
    if (!out)
        throw DataError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kCkptMagic))
        throw DataError("checkpoint has wrong magic: " + path);

    Checkpoint ck;
    std::uint64_t dims[3];
    in.read(reinterpret_cast<char*>(&ck.config_hash), sizeof(ck.config_hash));
    in.read(reinterpret_cast<char*>(&ck.prep_hash), sizeof(ck.prep_hash));
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    std::uint32_t count = 0;
    in.read(reinterpret_cast<char*>(&count), sizeof(count));
    if (!in)
        throw DataError("checkpoint truncated: " + path);
    ck.params.num_users = dims[0];
    ck.params.num_items = dims[1];
    ck.params.embed_dim = dims[2];

    std::map<std::string, Matrix> tensors;
    for (std::uint32_t t = 0; t < count; ++t) {
        std::uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!in || len > 256)
            throw DataError("checkpoint truncated: " + path);
        std::string name(len, '\0');
        in.read(name.data(), len);
        std::uint64_t rows = 0, cols = 0;
        in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
        in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
        if (!in)
            throw DataError("checkpoint truncated: " + path);
        Matrix m(rows, cols);
        in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in)
            throw DataError("checkpoint truncated: " + path);
        tensors.emplace(std::move(name), std::move(m));
    }

    auto take = [&](const std::string& name, bool required) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            if (required)
                throw DataError("checkpoint missing tensor '" + name + "': " + path);
            return Matrix();
        }
        Matrix m = std::move(it->second);
        tensors.erase(it);
        return m;
    };
    ModelParams& p = ck.params;
    p.user_embed[kVisual] = take("user_embed_visual", true);
    p.user_embed[kTextual] = take("user_embed_textual", true);
    p.proj_weight[kVisual] = take("proj_weight_visual", true);
    p.proj_weight[kTextual] = take("proj_weight_textual", true);
    p.proj_bias[kVisual] = take("proj_bias_visual", true);
    p.proj_bias[kTextual] = take("proj_bias_textual", true);
    p.pref_user = take("pref_user", true);
    p.pref_item = take("pref_item", true);
    p.nlt_logits = take("nlt_logits", false);
    if (!tensors.empty())
        throw DataError("checkpoint has unknown tensor '" + tensors.begin()->first +
                        "': " + path);
    return ck;
}

} // namespace mde
