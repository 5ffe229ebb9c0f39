#include "sibow/encoding.hpp"

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "sibow/errors.hpp"

namespace sibow {

namespace {

constexpr double kDropBelow = 1e-12;

void check_dims(const Eigen::VectorXd& x, const Codebook& book) {
    if (x.size() != book.centroids.cols())
        throw DataError("encoder dimension mismatch: descriptor " + std::to_string(x.size()) +
                        " vs codebook " + std::to_string(book.centroids.cols()));
}

// Sparsify, then renormalize so the kept weights sum to exactly one.
VisualCode sparsify_sum_to_one(const Eigen::VectorXd& dense, const std::vector<int>* positions,
                               int m) {
    VisualCode code;
    code.m = m;
    double sum = 0.0;
    for (Eigen::Index i = 0; i < dense.size(); ++i) {
        if (std::abs(dense(i)) < kDropBelow) continue;
        code.indices.push_back(positions ? (*positions)[static_cast<std::size_t>(i)]
                                         : static_cast<int>(i));
        code.weights.push_back(dense(i));
        sum += dense(i);
    }
    if (positions) {
        // Scatter order follows the neighbor list; restore index order.
        std::vector<std::size_t> order(code.indices.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return code.indices[a] < code.indices[b]; });
        VisualCode sorted;
        sorted.m = m;
        for (std::size_t i : order) {
            sorted.indices.push_back(code.indices[i]);
            sorted.weights.push_back(code.weights[i]);
        }
        code = std::move(sorted);
    }
    if (code.indices.empty() || sum == 0.0)
        throw NumericError("llc code collapsed to zero weight");
    for (double& w : code.weights) w /= sum;
    return code;
}

}  // namespace

double VisualCode::weight_sum() const {
    double s = 0.0;
    for (double w : weights) s += w;
    return s;
}

EncoderKind parse_encoder(const std::string& name) {
    if (name == "vq") return EncoderKind::vq;
    if (name == "llc") return EncoderKind::llc;
    if (name == "fast_llc") return EncoderKind::fast_llc;
    throw ConfigError("unknown encoder '" + name + "' (want vq, llc or fast_llc)");
}

std::string to_string(EncoderKind kind) {
    switch (kind) {
        case EncoderKind::vq: return "vq";
        case EncoderKind::llc: return "llc";
        case EncoderKind::fast_llc: return "fast_llc";
    }
    return "?";
}

VisualCode encode_vq(const Eigen::VectorXd& x, const Codebook& book) {
    check_dims(x, book);
    const int m = book.size();
    const int d = book.dim();
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) {
        double dist = 0.0;
        for (int k = 0; k < d; ++k) {
            const double diff = x(k) - book.centroids(j, k);
            dist += diff * diff;
        }
        if (dist < best_dist) {
            best_dist = dist;
            best = j;
        }
    }
    VisualCode code;
    code.m = m;
    code.indices.push_back(best);
    code.weights.push_back(1.0);
    return code;
}

VisualCode encode_llc(const Eigen::VectorXd& x, const Codebook& book, const LlcParams& p) {
    check_dims(x, book);
    if (p.lambda <= 0 || p.sigma <= 0) throw ConfigError("llc lambda and sigma must be positive");
    const int m = book.size();
    if (m == 1) {
        VisualCode code;
        code.m = 1;
        code.indices.push_back(0);
        code.weights.push_back(1.0);
        return code;
    }

    const MatrixRM centered = book.centroids.rowwise() - x.transpose();
    Eigen::VectorXd dist(m);
    for (int j = 0; j < m; ++j) dist(j) = centered.row(j).norm();

    // Locality adaptor, max-shifted so the farthest basis carries weight 1.
    const double dmax = dist.maxCoeff();
    Eigen::VectorXd adaptor(m);
    for (int j = 0; j < m; ++j) adaptor(j) = std::exp((dist(j) - dmax) / p.sigma);

    Eigen::MatrixXd system = centered * centered.transpose();
    for (int j = 0; j < m; ++j) system(j, j) += p.lambda * adaptor(j) * adaptor(j);

    const Eigen::LDLT<Eigen::MatrixXd> solver(system);
    if (solver.info() != Eigen::Success)
        throw NumericError("llc local system is singular (ill-conditioned codebook)");
    const Eigen::VectorXd w = solver.solve(Eigen::VectorXd::Ones(m));
    const double residual = (system * w - Eigen::VectorXd::Ones(m)).cwiseAbs().maxCoeff();
    if (!w.allFinite() || residual > 1e-6 * std::max(1.0, w.cwiseAbs().maxCoeff()))
        throw NumericError("llc local system is singular (ill-conditioned codebook)");

    const double sum = w.sum();
    if (sum == 0.0 || !std::isfinite(sum))
        throw NumericError("llc code has zero total weight");
    return sparsify_sum_to_one(w / sum, nullptr, m);
}

VisualCode encode_fast_llc(const Eigen::VectorXd& x, const Codebook& book, const LlcParams& p) {
    check_dims(x, book);
    const int m = book.size();
    if (p.knn < 1 || p.knn > m) throw ConfigError("llc knn must lie in [1, codebook size]");
    const int k = p.knn;

    Eigen::VectorXd dist(m);
    for (int j = 0; j < m; ++j) dist(j) = (x.transpose() - book.centroids.row(j)).squaredNorm();
    std::vector<int> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
        if (dist(a) != dist(b)) return dist(a) < dist(b);
        return a < b;
    });
    std::vector<int> neighbors(order.begin(), order.begin() + k);

    if (k == 1) {
        VisualCode code;
        code.m = m;
        code.indices.push_back(neighbors[0]);
        code.weights.push_back(1.0);
        return code;
    }

    Eigen::MatrixXd centered(k, x.size());
    for (int i = 0; i < k; ++i)
        centered.row(i) = book.centroids.row(neighbors[static_cast<std::size_t>(i)]) - x.transpose();
    Eigen::MatrixXd gram = centered * centered.transpose();
    const double ridge = p.ridge_eps * gram.trace();
    for (int i = 0; i < k; ++i) gram(i, i) += ridge;

    const Eigen::LDLT<Eigen::MatrixXd> solver(gram);
    if (solver.info() != Eigen::Success)
        throw NumericError("fast llc local system is singular (ill-conditioned codebook)");
    const Eigen::VectorXd w = solver.solve(Eigen::VectorXd::Ones(k));
    const double residual = (gram * w - Eigen::VectorXd::Ones(k)).cwiseAbs().maxCoeff();
    if (!w.allFinite() || residual > 1e-6 * std::max(1.0, w.cwiseAbs().maxCoeff()))
        throw NumericError("fast llc local system is singular (ill-conditioned codebook)");
    const double sum = w.sum();
    if (sum == 0.0 || !std::isfinite(sum))
        throw NumericError("fast llc code has zero total weight");
    return sparsify_sum_to_one(w / sum, &neighbors, m);
}

CodeMatrix encode_image(const DescriptorSet& set, const Codebook& book, EncoderKind kind,
                        const LlcParams& p) {
    CodeMatrix matrix;
    matrix.m = book.size();
    matrix.codes.reserve(set.descriptors.size());
    for (const Descriptor& d : set.descriptors) {
        Eigen::VectorXd x(kDescriptorDim);
        for (int j = 0; j < kDescriptorDim; ++j) x(j) = d.values[static_cast<std::size_t>(j)];
        switch (kind) {
            case EncoderKind::vq: matrix.codes.push_back(encode_vq(x, book)); break;
            case EncoderKind::llc: matrix.codes.push_back(encode_llc(x, book, p)); break;
            case EncoderKind::fast_llc: matrix.codes.push_back(encode_fast_llc(x, book, p)); break;
        }
    }
    return matrix;
}

}  // namespace sibow
