#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mde/data.hpp"
#include "mde/matrix.hpp"

namespace mde {

// Modality slots used across graphs, parameters and forward state.
inline constexpr std::size_t kVisual = 0;
inline constexpr std::size_t kTextual = 1;
inline constexpr std::size_t kNumModalities = 2;

const char* modality_name(std::size_t m);

/// Compressed sparse row matrix; the one sparse container used for the
/// heterogeneous and homogeneous graphs.
struct SparseAdjacency {
    std::size_t num_rows = 0;
    std::size_t num_cols = 0;
    std::vector<std::uint64_t> row_offsets; // num_rows + 1, monotone
    std::vector<std::uint32_t> col_indices; // strictly increasing within a row
    std::vector<double> values;

    std::size_t nnz() const { return col_indices.size(); }
    void validate() const;
};

/// All graphs one model instance propagates over. Homogeneous transposes are
/// cached for the gradient pullback (top-K graphs are directed).
struct GraphBundle {
    std::size_t num_users = 0;
    std::size_t num_items = 0;
    SparseAdjacency hetero; // (M+N)x(M+N), symmetric-normalized, train edges only
    std::array<SparseAdjacency, kNumModalities> item_homo;
    SparseAdjacency user_homo; // shared across modalities
    std::array<SparseAdjacency, kNumModalities> item_homo_t;
    SparseAdjacency user_homo_t;

    void finalize_transposes();
};

/// 0/1 symmetric (M+N)x(M+N) incidence of the train edges, user rows first.
SparseAdjacency build_bipartite(const InteractionDataset& ds);

/// D^{-1/2} A D^{-1/2} with row-sum degrees; zero-degree rows stay zero.
SparseAdjacency normalize_symmetric(const SparseAdjacency& a);

/// Row i keeps the K items most cosine-similar to i (self excluded, ties to
/// the lower index, zero-norm rows and candidates excluded), each kept edge
/// weighted 1/(row count).
SparseAdjacency build_item_knn(const ModalityFeatures& features, std::size_t k);

/// Row u keeps the K users with the highest train co-interaction count
/// (zero counts excluded, ties to the lower index), row-normalized.
SparseAdjacency build_user_cooccurrence(const InteractionDataset& ds, std::size_t k);

SparseAdjacency transpose(const SparseAdjacency& a);

/// Exact sparse-times-dense product.
Matrix spmm(const SparseAdjacency& a, const Matrix& x);
void spmm_into(const SparseAdjacency& a, const Matrix& x, Matrix& y);

GraphBundle build_graphs(const InteractionDataset& ds, const ModalityFeatures& visual,
                         const ModalityFeatures& textual, std::size_t k_item,
                         std::size_t k_user);

// Binary CSR cache: magic, shape, offsets/indices/values, little-endian.
void save_csr(const std::string& path, const SparseAdjacency& a);
SparseAdjacency load_csr(const std::string& path);

} // namespace mde
