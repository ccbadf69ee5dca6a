#include "mde/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mde/errors.hpp"
#include "mde/kernels.hpp"

namespace mde {

const char* modality_name(std::size_t m) {
    switch (m) {
    case kVisual: return "visual";
    case kTextual: return "textual";
    default: throw UsageError("unknown modality index " + std::to_string(m));
    }
}

void SparseAdjacency::validate() const {
    if (row_offsets.size() != num_rows + 1)
        throw DataError("csr: row_offsets size mismatch");
    if (row_offsets.front() != 0 || row_offsets.back() != nnz())
        throw DataError("csr: row_offsets endpoints mismatch");
    if (values.size() != col_indices.size())
        throw DataError("csr: values/col_indices size mismatch");
    for (std::size_t r = 0; r < num_rows; ++r) {
        if (row_offsets[r] > row_offsets[r + 1])
            throw DataError("csr: row_offsets not monotone at row " + std::to_string(r));
        for (auto p = row_offsets[r]; p < row_offsets[r + 1]; ++p) {
            if (col_indices[p] >= num_cols)
                throw DataError("csr: column index out of range at row " + std::to_string(r));
            if (p > row_offsets[r] && col_indices[p] <= col_indices[p - 1])
                throw DataError("csr: columns not strictly increasing in row " +
                                std::to_string(r));
        }
    }
}

void GraphBundle::finalize_transposes() {
    for (std::size_t m = 0; m < kNumModalities; ++m)
        item_homo_t[m] = transpose(item_homo[m]);
    user_homo_t = transpose(user_homo);
}

namespace {

/// Assembles a CSR matrix from per-row (column, value) lists; columns need not
/// be pre-sorted.
SparseAdjacency from_rows(std::size_t num_rows, std::size_t num_cols,
                          std::vector<std::vector<std::pair<std::uint32_t, double>>>& rows) {
    SparseAdjacency a;
    a.num_rows = num_rows;
    a.num_cols = num_cols;
    a.row_offsets.assign(num_rows + 1, 0);
    std::size_t nnz = 0;
    for (std::size_t r = 0; r < num_rows; ++r) {
        std::sort(rows[r].begin(), rows[r].end());
        nnz += rows[r].size();
        a.row_offsets[r + 1] = nnz;
    }
    a.col_indices.reserve(nnz);
    a.values.reserve(nnz);
    for (std::size_t r = 0; r < num_rows; ++r) {
        for (const auto& [c, v] : rows[r]) {
            a.col_indices.push_back(c);
            a.values.push_back(v);
        }
    }
    return a;
}

} // namespace

SparseAdjacency build_bipartite(const InteractionDataset& ds) {
    const std::size_t m = ds.num_users;
    const std::size_t n = ds.num_items;
    std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(m + n);
    for (const Edge& e : ds.edges) {
        if (e.tag != Split::train && e.tag != Split::unsplit)
            continue;
        rows[e.user].emplace_back(static_cast<std::uint32_t>(m + e.item), 1.0);
        rows[m + e.item].emplace_back(e.user, 1.0);
    }
    return from_rows(m + n, m + n, rows);
}

SparseAdjacency normalize_symmetric(const SparseAdjacency& a) {
    if (a.num_rows != a.num_cols)
        throw DataError("normalize_symmetric: matrix is not square");
    std::vector<double> inv_sqrt(a.num_rows, 0.0);
    for (std::size_t r = 0; r < a.num_rows; ++r) {
        double deg = 0.0;
        for (auto p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p) {
            if (a.values[p] < 0.0)
                throw DataError("normalize_symmetric: negative value at row " +
                                std::to_string(r));
            deg += a.values[p];
        }
        if (deg > 0.0)
            inv_sqrt[r] = 1.0 / std::sqrt(deg);
    }
    SparseAdjacency out = a;
    for (std::size_t r = 0; r < a.num_rows; ++r)
        for (auto p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p)
            out.values[p] = a.values[p] * inv_sqrt[r] * inv_sqrt[a.col_indices[p]];
    return out;
}

SparseAdjacency build_item_knn(const ModalityFeatures& features, std::size_t k) {
    const std::size_t n = features.matrix.rows;
    const std::size_t d = features.matrix.cols;
    if (k == 0)
        throw UsageError("item knn: K must be positive");
    if (k >= n)
        throw UsageError("item knn: K=" + std::to_string(k) + " must be < num_items=" +
                         std::to_string(n));

    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i)
        norms[i] = std::sqrt(kernels::sumsq(features.matrix.row(i), d));

    std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(n);
    std::vector<std::pair<double, std::uint32_t>> cand;
    for (std::size_t i = 0; i < n; ++i) {
        if (norms[i] == 0.0)
            continue;
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i || norms[j] == 0.0)
                continue;
            double sim = kernels::dot(features.matrix.row(i), features.matrix.row(j), d) /
                         (norms[i] * norms[j]);
            cand.emplace_back(-sim, static_cast<std::uint32_t>(j));
        }
        const std::size_t keep = std::min(k, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep),
                          cand.end());
        const double w = keep > 0 ? 1.0 / static_cast<double>(keep) : 0.0;
        for (std::size_t p = 0; p < keep; ++p)
            rows[i].emplace_back(cand[p].second, w);
    }
    return from_rows(n, n, rows);
}

SparseAdjacency build_user_cooccurrence(const InteractionDataset& ds, std::size_t k) {
    const std::size_t m = ds.num_users;
    if (k == 0)
        throw UsageError("user co-occurrence: K must be positive");
    if (k >= m)
        throw UsageError("user co-occurrence: K=" + std::to_string(k) +
                         " must be < num_users=" + std::to_string(m));

    std::vector<std::vector<std::uint32_t>> item_users(ds.num_items);
    std::vector<std::vector<std::uint32_t>> user_items(m);
    for (const Edge& e : ds.edges) {
        if (e.tag != Split::train && e.tag != Split::unsplit)
            continue;
        item_users[e.item].push_back(e.user);
        user_items[e.user].push_back(e.item);
    }

    std::vector<std::uint32_t> counts(m, 0);
    std::vector<std::uint32_t> touched;
    std::vector<std::vector<std::pair<std::uint32_t, double>>> rows(m);
    std::vector<std::pair<std::pair<std::int64_t, std::uint32_t>, double>> cand;
    for (std::size_t u = 0; u < m; ++u) {
        touched.clear();
        for (std::uint32_t i : user_items[u]) {
            for (std::uint32_t v : item_users[i]) {
                if (v == u)
                    continue;
                if (counts[v] == 0)
                    touched.push_back(v);
                ++counts[v];
            }
        }
        cand.clear();
        for (std::uint32_t v : touched)
            cand.push_back({{-static_cast<std::int64_t>(counts[v]), v}, 0.0});
        const std::size_t keep = std::min(k, cand.size());
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep),
                          cand.end());
        const double w = keep > 0 ? 1.0 / static_cast<double>(keep) : 0.0;
        for (std::size_t p = 0; p < keep; ++p)
            rows[u].emplace_back(cand[p].first.second, w);
        for (std::uint32_t v : touched)
            counts[v] = 0;
    }
    return from_rows(m, m, rows);
}

SparseAdjacency transpose(const SparseAdjacency& a) {
    SparseAdjacency t;
    t.num_rows = a.num_cols;
    t.num_cols = a.num_rows;
    t.row_offsets.assign(t.num_rows + 1, 0);
    for (std::uint32_t c : a.col_indices)
        ++t.row_offsets[c + 1];
    for (std::size_t r = 0; r < t.num_rows; ++r)
        t.row_offsets[r + 1] += t.row_offsets[r];
    t.col_indices.resize(a.nnz());
    t.values.resize(a.nnz());
    std::vector<std::uint64_t> cursor(t.row_offsets.begin(), t.row_offsets.end() - 1);
    for (std::size_t r = 0; r < a.num_rows; ++r) {
        for (auto p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p) {
            const std::uint32_t c = a.col_indices[p];
            t.col_indices[cursor[c]] = static_cast<std::uint32_t>(r);
            t.values[cursor[c]] = a.values[p];
            ++cursor[c];
        }
    }
    return t;
}

Matrix spmm(const SparseAdjacency& a, const Matrix& x) {
    Matrix y(a.num_rows, x.cols);
    spmm_into(a, x, y);
    return y;
}

void spmm_into(const SparseAdjacency& a, const Matrix& x, Matrix& y) {
    if (a.num_cols != x.rows)
        throw DataError("spmm: inner dimension mismatch (" + std::to_string(a.num_cols) +
                        " vs " + std::to_string(x.rows) + ")");
    if (y.rows != a.num_rows || y.cols != x.cols)
        throw DataError("spmm: output shape mismatch");
    y.set_zero();
    for (std::size_t r = 0; r < a.num_rows; ++r) {
        double* out = y.row(r);
        for (auto p = a.row_offsets[r]; p < a.row_offsets[r + 1]; ++p)
            kernels::axpy(a.values[p], x.row(a.col_indices[p]), out, x.cols);
    }
}

GraphBundle build_graphs(const InteractionDataset& ds, const ModalityFeatures& visual,
                         const ModalityFeatures& textual, std::size_t k_item,
                         std::size_t k_user) {
    visual.validate(ds.num_items);
    textual.validate(ds.num_items);
    GraphBundle g;
    g.num_users = ds.num_users;
    g.num_items = ds.num_items;
    g.hetero = normalize_symmetric(build_bipartite(ds));
    g.item_homo[kVisual] = build_item_knn(visual, k_item);
    g.item_homo[kTextual] = build_item_knn(textual, k_item);
    g.user_homo = build_user_cooccurrence(ds, k_user);
    g.finalize_transposes();
    return g;
}

namespace {

constexpr char kCsrMagic[8] = {'M', 'D', 'E', 'C', 'S', 'R', '0', '1'};

template <class T> void write_raw(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T> void read_raw(std::ifstream& in, T& v, const std::string& path) {
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in)
        throw DataError("csr cache truncated: " + path);
}

} // namespace

void save_csr(const std::string& path, const SparseAdjacency& a) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open for write: " + path);
    out.write(kCsrMagic, sizeof(kCsrMagic));
    write_raw(out, static_cast<std::uint64_t>(a.num_rows));
    write_raw(out, static_cast<std::uint64_t>(a.num_cols));
    write_raw(out, static_cast<std::uint64_t>(a.nnz()));
    out.write(reinterpret_cast<const char*>(a.row_offsets.data()),
              static_cast<std::streamsize>(a.row_offsets.size() * sizeof(std::uint64_t)));
    out.write(reinterpret_cast<const char*>(a.col_indices.data()),
              static_cast<std::streamsize>(a.col_indices.size() * sizeof(std::uint32_t)));
    out.write(reinterpret_cast<const char*>(a.values.data()),
              static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    if (!out)
        throw DataError("write failed: " + path);
}

SparseAdjacency load_csr(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kCsrMagic))
        throw DataError("csr cache has wrong magic: " + path);
    std::uint64_t rows = 0, cols = 0, nnz = 0;
    read_raw(in, rows, path);
    read_raw(in, cols, path);
    read_raw(in, nnz, path);
    SparseAdjacency a;
    a.num_rows = rows;
    a.num_cols = cols;
    a.row_offsets.resize(rows + 1);
    a.col_indices.resize(nnz);
    a.values.resize(nnz);
    in.read(reinterpret_cast<char*>(a.row_offsets.data()),
            static_cast<std::streamsize>(a.row_offsets.size() * sizeof(std::uint64_t)));
    in.read(reinterpret_cast<char*>(a.col_indices.data()),
            static_cast<std::streamsize>(a.col_indices.size() * sizeof(std::uint32_t)));
    in.read(reinterpret_cast<char*>(a.values.data()),
            static_cast<std::streamsize>(a.values.size() * sizeof(double)));
    if (!in)
        throw DataError("csr cache truncated: " + path);
    a.validate();
    return a;
}

} // namespace mde
