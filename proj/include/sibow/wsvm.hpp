#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sibow/pooling.hpp"

namespace sibow {

struct KernelSpec {
    enum class Kind { rbf, linear };
    Kind kind = Kind::rbf;
    double gamma = 1.0;  // rbf bandwidth: K(u,v) = exp(-gamma * |u-v|^2)
};

std::string to_string(KernelSpec::Kind kind);
KernelSpec::Kind parse_kernel_kind(const std::string& name);

double kernel_value(const Eigen::VectorXd& u, const Eigen::VectorXd& v, const KernelSpec& k);
// Entry (i, j) = K(a_i, b_j); rows are points.
Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const KernelSpec& k);

// Median pairwise squared distance, the center of the default gamma grid.
double median_sq_distance(const Eigen::MatrixXd& points);

struct SolverControl {
    double kkt_tol = 1e-3;
    long max_iters = 1'000'000;
};

// One binary weighted-SVM trained at a single weight pi. `coef` holds
// alpha_i * y_i over the component's training rows.
struct BinaryWsvmModel {
    Eigen::VectorXd coef;
    double bias = 0;
    double pi = 0.5;
    double lambda = 1;
    KernelSpec kernel;
    double kkt_violation = 0;
    long iters = 0;
};

BinaryWsvmModel train_binary_wsvm(const Eigen::MatrixXd& x, const std::vector<int>& y, double pi,
                                  double lambda, const KernelSpec& kernel,
                                  const SolverControl& control = {});

// Dual objective sum(alpha) - 0.5 * alpha' Q alpha of a trained model, for
// cross-checking against independent QP solvers.
double dual_objective(const BinaryWsvmModel& model, const Eigen::MatrixXd& x,
                      const std::vector<int>& y);

double decision_value(const BinaryWsvmModel& model, const Eigen::VectorXd& kernel_column);

// Classifier series over an increasing pi grid sharing one training subset.
struct PiSeriesModel {
    std::vector<double> pis;
    std::vector<int> rows;  // indices into the training feature matrix
    std::vector<BinaryWsvmModel> models;
};

std::vector<double> uniform_pi_grid(int size);

PiSeriesModel train_pi_series(const Eigen::MatrixXd& x, const std::vector<int>& y,
                              const std::vector<double>& grid, double lambda,
                              const KernelSpec& kernel, const SolverControl& control = {},
                              int workers = 1);

enum class ProbRule {
    largest_nonneg,  // largest m with f_pi_m(x) >= 0 (default)
    count_nonneg     // number of nonnegative decision values
};

// Bracketing estimator: p = (pi_{m*} + pi_{m*+1}) / 2 with pi_0 = 0 and
// pi_{M+1} = 1.
double series_probability(const PiSeriesModel& series, const Eigen::VectorXd& kernel_column,
                          ProbRule rule = ProbRule::largest_nonneg);
double estimate_binary_prob(const PiSeriesModel& series, const Eigen::MatrixXd& train_x,
                            const Eigen::VectorXd& x, ProbRule rule = ProbRule::largest_nonneg);

enum class Scheme { pairwise, baseline_b1, baseline_b2, bp1, bp2, ova };

std::string to_string(Scheme scheme);
Scheme parse_scheme(const std::string& name);
bool is_baseline(Scheme scheme);
bool reconstructs_pairwise(Scheme scheme);

// Full pairwise conditional table: q(j, j') with q(j, j') + q(j', j) = 1.
struct PairTable {
    Eigen::MatrixXd q;  // K x K, 0-based; diagonal unused

    double at(int j, int jp) const { return q(j - 1, jp - 1); }
};

struct ProbabilityEstimate {
    Eigen::VectorXd probs;  // K, sums to one
    std::optional<PairTable> pairwise_table;
};

// Coupling primitives, exposed for direct verification.
Eigen::VectorXd couple_with_anchor(const PairTable& table, int anchor);
Eigen::VectorXd couple_median(const PairTable& table);
Eigen::VectorXd probs_from_ratios(const Eigen::VectorXd& ratios);
PairTable table_from_ratios(const Eigen::VectorXd& ratios);

struct MulticlassModel {
    Scheme scheme = Scheme::pairwise;
    int k = 0;
    int baseline_class = 0;  // k*, 1-based; 0 when not applicable
    std::vector<double> pi_grid;
    double lambda = 1;
    KernelSpec kernel;
    PoolingId pooling_id;
    std::uint64_t features_hash = 0;
    std::vector<long> class_counts;

    // pairwise: (positive=j, negative=j'), j < j'; baseline: (j, k*);
    // ova: (j, 0) with 0 meaning "rest".
    struct Component {
        int positive = 0;
        int negative = 0;
        PiSeriesModel series;
    };
    std::vector<Component> components;

    Eigen::MatrixXd train_x;  // attached training features, row-indexed by components
};

MulticlassModel fit_multiclass(const Eigen::MatrixXd& x, const std::vector<int>& y, Scheme scheme,
                               const std::vector<double>& pi_grid, double lambda,
                               const KernelSpec& kernel, const SolverControl& control = {},
                               int workers = 1);

ProbabilityEstimate predict_proba(const MulticlassModel& model, const Eigen::VectorXd& x,
                                  ProbRule rule = ProbRule::largest_nonneg);
// Guarded variant: refuses features pooled differently from the training set.
ProbabilityEstimate predict_proba(const MulticlassModel& model, const ImageFeature& feature,
                                  ProbRule rule = ProbRule::largest_nonneg);

enum class ClassifyRule { argmax, maxvote };

int classify(const ProbabilityEstimate& estimate, ClassifyRule rule);

struct TunePoint {
    double lambda = 0;
    double gamma = 0;
    double egkl = 0;
};

struct TuneResult {
    double lambda = 0;
    double gamma = 0;
    double egkl = 0;
    std::vector<TunePoint> report;
};

std::vector<double> default_lambda_grid();
std::vector<double> default_gamma_grid(const Eigen::MatrixXd& x);

// Splits the pool 50/50 (stratified), fits each grid point on one half and
// scores held-out negative log-likelihood on the other; smallest wins, ties
// broken by smaller lambda then smaller gamma.
TuneResult tune_egkl(const Eigen::MatrixXd& x, const std::vector<int>& y, Scheme scheme,
                     const std::vector<double>& lambda_grid, const std::vector<double>& gamma_grid,
                     std::uint64_t split_seed, const std::vector<double>& pi_grid,
                     KernelSpec::Kind kernel_kind, const SolverControl& control = {},
                     int workers = 1);

// "SBWM" artifact. The training feature matrix is referenced by content hash
// and re-attached on load.
void save_model(const MulticlassModel& model, const std::string& path);
MulticlassModel load_model(const std::string& path, const FeatureMatrix& train_features);

}  // namespace sibow
