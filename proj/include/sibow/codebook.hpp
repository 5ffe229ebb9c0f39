#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "sibow/sift.hpp"

namespace sibow {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Concatenated descriptor pool, one row per descriptor, with image provenance.
struct Pool {
    MatrixRM rows;

    struct Provenance {
        Eigen::Index begin = 0;
        Eigen::Index end = 0;  // half-open
        std::string image_id;
    };
    std::vector<Provenance> provenance;

    Eigen::Index count() const { return rows.rows(); }
    Eigen::Index dim() const { return rows.cols(); }
};

struct KMeansParams {
    int max_iters = 100;
    double tol = 1e-4;  // relative inertia change
    std::uint64_t seed = 0;
    int n_init = 3;  // k-means++ restarts, best inertia kept
};

struct Codebook {
    MatrixRM centroids;  // M x D
    int passes_used = 1;
    std::uint64_t seed = 0;
    double inertia = 0;

    int size() const { return static_cast<int>(centroids.rows()); }
    int dim() const { return static_cast<int>(centroids.cols()); }
};

Pool build_pool(const std::vector<DescriptorSet>& sets);

// Lloyd iterations with k-means++ seeding; deterministic for a fixed seed and
// independent of the worker count.
Codebook kmeans(const Pool& pool, int m, const KMeansParams& params, int workers = 1);

struct MultipassOptions {
    enum class Pass { automatic, single, two };
    Pass pass = Pass::automatic;  // automatic: single pass when M <= 128
    Eigen::Index chunk_rows = 1'000'000;  // pass-1 chunk size (chunks = ceil(N / chunk_rows))
    int chunk_count_override = 0;         // > 0 forces an explicit chunk count
};

// Two-pass variant: pass 1 clusters random equal-size chunks, pass 2 clusters
// the chunk centroids weighted by member counts. Falls back to plain kmeans
// when a single pass (or a single chunk) is selected.
Codebook multipass_kmeans(const Pool& pool, int m, const KMeansParams& params,
                          const MultipassOptions& options = {}, int workers = 1);

// "SBWC" binary artifact.
void save_codebook(const Codebook& book, const std::string& path);
Codebook load_codebook(const std::string& path);
void export_codebook_csv(const Codebook& book, const std::string& path);

// Exposed for tests: weighted Lloyd core over arbitrary points.
struct WeightedKMeansResult {
    MatrixRM centroids;
    std::vector<int> assignment;
    double inertia = 0;
    std::vector<double> inertia_trace;  // one entry per Lloyd iteration
};
WeightedKMeansResult weighted_kmeans(const MatrixRM& points, const Eigen::VectorXd& weights,
                                     int m, const KMeansParams& params, int workers = 1);

}  // namespace sibow
