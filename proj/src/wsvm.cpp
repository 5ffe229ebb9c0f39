#include "sibow/wsvm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "sibow/errors.hpp"
#include "sibow/parallel.hpp"
#include "sibow/rng.hpp"
#include "sibow/serialize.hpp"

namespace sibow {

namespace {

constexpr double kProbClamp = 1e-6;

double clamp_prob(double q) { return std::min(std::max(q, kProbClamp), 1.0 - kProbClamp); }

}  // namespace

std::string to_string(KernelSpec::Kind kind) {
    return kind == KernelSpec::Kind::rbf ? "rbf" : "linear";
}

KernelSpec::Kind parse_kernel_kind(const std::string& name) {
    if (name == "rbf") return KernelSpec::Kind::rbf;
    if (name == "linear") return KernelSpec::Kind::linear;
    throw ConfigError("unknown kernel '" + name + "' (want rbf or linear)");
}

double kernel_value(const Eigen::VectorXd& u, const Eigen::VectorXd& v, const KernelSpec& k) {
    if (u.size() != v.size()) throw DataError("kernel dimension mismatch");
    if (k.kind == KernelSpec::Kind::linear) return u.dot(v);
    return std::exp(-k.gamma * (u - v).squaredNorm());
}

Eigen::MatrixXd kernel_matrix(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                              const KernelSpec& k) {
    if (a.cols() != b.cols())
        throw DataError("kernel dimension mismatch: " + std::to_string(a.cols()) + " vs " +
                        std::to_string(b.cols()));
    if (k.kind == KernelSpec::Kind::rbf && !(k.gamma > 0 && std::isfinite(k.gamma)))
        throw ConfigError("rbf gamma must be positive and finite");
    Eigen::MatrixXd out(a.rows(), b.rows());
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = 0; j < b.rows(); ++j) {
            if (k.kind == KernelSpec::Kind::linear)
                out(i, j) = a.row(i).dot(b.row(j));
            else
                out(i, j) = std::exp(-k.gamma * (a.row(i) - b.row(j)).squaredNorm());
        }
    }
    return out;
}

double median_sq_distance(const Eigen::MatrixXd& points) {
    const Eigen::Index n = std::min<Eigen::Index>(points.rows(), 512);
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j)
            dists.push_back((points.row(i) - points.row(j)).squaredNorm());
    if (dists.empty()) return 1.0;
    std::sort(dists.begin(), dists.end());
    const std::size_t mid = dists.size() / 2;
    const double med = dists.size() % 2 == 1 ? dists[mid] : 0.5 * (dists[mid - 1] + dists[mid]);
    return std::max(med, 1e-12);
}

namespace {

struct SmoResult {
    Eigen::VectorXd alpha;
    double bias = 0;
    double kkt_violation = 0;
    long iters = 0;
};

// Sequential minimal optimization on the weighted-SVM dual:
//   min 0.5 a'Qa - 1'a  s.t.  y'a = 0,  0 <= a_i <= C_i,
// with Q_ij = y_i y_j K_ij and per-point box C_i = w(y_i) / (n * lambda),
// w(+1) = 1 - pi, w(-1) = pi. Pairs are picked by maximal KKT violation.
SmoResult solve_smo(const Eigen::MatrixXd& gram, const std::vector<int>& y, double pi,
                    double lambda, const SolverControl& control) {
    const Eigen::Index n = gram.rows();
    if (n < 2) throw DataError("wsvm needs at least two training points");
    if (!(pi > 0 && pi < 1)) throw ConfigError("pi must lie in (0, 1)");
    if (!(lambda > 0)) throw ConfigError("lambda must be positive");

    bool has_pos = false, has_neg = false;
    for (int label : y) {
        if (label == 1) has_pos = true;
        else if (label == -1) has_neg = true;
        else throw DataError("binary wsvm labels must be +1/-1");
    }
    if (!has_pos || !has_neg) throw DataError("wsvm requires both classes present");

    Eigen::VectorXd box(n);
    Eigen::VectorXd ys(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        ys(i) = y[static_cast<std::size_t>(i)];
        const double w = y[static_cast<std::size_t>(i)] == 1 ? 1.0 - pi : pi;
        box(i) = w / (static_cast<double>(n) * lambda);
    }

    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0);  // Q a - 1 at a = 0

    SmoResult res;
    double gap = std::numeric_limits<double>::infinity();
    for (res.iters = 0; res.iters < control.max_iters; ++res.iters) {
        // Maximal violating pair.
        int i = -1, j = -1;
        double up_val = -std::numeric_limits<double>::infinity();
        double low_val = std::numeric_limits<double>::infinity();
        for (Eigen::Index t = 0; t < n; ++t) {
            const double v = -ys(t) * grad(t);
            const bool in_up = (ys(t) > 0 && alpha(t) < box(t)) || (ys(t) < 0 && alpha(t) > 0);
            const bool in_low = (ys(t) > 0 && alpha(t) > 0) || (ys(t) < 0 && alpha(t) < box(t));
            if (in_up && v > up_val) {
                up_val = v;
                i = static_cast<int>(t);
            }
            if (in_low && v < low_val) {
                low_val = v;
                j = static_cast<int>(t);
            }
        }
        gap = up_val - low_val;
        if (i < 0 || j < 0 || gap <= control.kkt_tol) break;

        const double curvature = gram(i, i) + gram(j, j) - 2.0 * gram(i, j);
        double step = gap / std::max(curvature, 1e-12);

        // Keep both coordinates inside their boxes.
        const double room_i = ys(i) > 0 ? box(i) - alpha(i) : alpha(i);
        const double room_j = ys(j) > 0 ? alpha(j) : box(j) - alpha(j);
        step = std::min(step, std::min(room_i, room_j));

        alpha(i) += ys(i) * step;
        alpha(j) -= ys(j) * step;
        // Snap to the box to keep the working sets exact.
        if (alpha(i) < 1e-14 * box(i)) alpha(i) = 0;
        if (alpha(i) > box(i) - 1e-14 * box(i)) alpha(i) = box(i);
        if (alpha(j) < 1e-14 * box(j)) alpha(j) = 0;
        if (alpha(j) > box(j) - 1e-14 * box(j)) alpha(j) = box(j);

        for (Eigen::Index t = 0; t < n; ++t)
            grad(t) += step * ys(t) * (gram(t, i) - gram(t, j));
    }

    if (gap > control.kkt_tol && res.iters >= control.max_iters)
        throw NumericError("wsvm solver did not converge: KKT violation " + std::to_string(gap) +
                           " after " + std::to_string(res.iters) + " iterations");
    res.kkt_violation = std::max(gap, 0.0);

    // Bias from free support vectors; fall back to the violation midpoint.
    double bias_sum = 0;
    long bias_count = 0;
    for (Eigen::Index t = 0; t < n; ++t) {
        if (alpha(t) > 0 && alpha(t) < box(t)) {
            bias_sum += -ys(t) * grad(t);
            ++bias_count;
        }
    }
    if (bias_count > 0) {
        res.bias = bias_sum / static_cast<double>(bias_count);
    } else {
        double up_val = -std::numeric_limits<double>::infinity();
        double low_val = std::numeric_limits<double>::infinity();
        for (Eigen::Index t = 0; t < n; ++t) {
            const double v = -ys(t) * grad(t);
            const bool in_up = (ys(t) > 0 && alpha(t) < box(t)) || (ys(t) < 0 && alpha(t) > 0);
            const bool in_low = (ys(t) > 0 && alpha(t) > 0) || (ys(t) < 0 && alpha(t) < box(t));
            if (in_up) up_val = std::max(up_val, v);
            if (in_low) low_val = std::min(low_val, v);
        }
        if (std::isfinite(up_val) && std::isfinite(low_val))
            res.bias = 0.5 * (up_val + low_val);
        else if (std::isfinite(up_val))
            res.bias = up_val;
        else
            res.bias = std::isfinite(low_val) ? low_val : 0.0;
    }
    res.alpha = std::move(alpha);
    return res;
}

BinaryWsvmModel model_from_smo(SmoResult&& smo, const std::vector<int>& y, double pi,
                               double lambda, const KernelSpec& kernel) {
    BinaryWsvmModel model;
    model.coef.resize(smo.alpha.size());
    for (Eigen::Index t = 0; t < smo.alpha.size(); ++t)
        model.coef(t) = smo.alpha(t) * y[static_cast<std::size_t>(t)];
    model.bias = smo.bias;
    model.pi = pi;
    model.lambda = lambda;
    model.kernel = kernel;
    model.kkt_violation = smo.kkt_violation;
    model.iters = smo.iters;
    return model;
}

}  // namespace

BinaryWsvmModel train_binary_wsvm(const Eigen::MatrixXd& x, const std::vector<int>& y, double pi,
                                  double lambda, const KernelSpec& kernel,
                                  const SolverControl& control) {
    if (static_cast<Eigen::Index>(y.size()) != x.rows())
        throw DataError("wsvm: labels and features disagree on sample count");
    const Eigen::MatrixXd gram = kernel_matrix(x, x, kernel);
    return model_from_smo(solve_smo(gram, y, pi, lambda, control), y, pi, lambda, kernel);
}

double dual_objective(const BinaryWsvmModel& model, const Eigen::MatrixXd& x,
                      const std::vector<int>& y) {
    const Eigen::MatrixXd gram = kernel_matrix(x, x, model.kernel);
    double alpha_sum = 0;
    for (Eigen::Index t = 0; t < model.coef.size(); ++t)
        alpha_sum += model.coef(t) * y[static_cast<std::size_t>(t)];
    return alpha_sum - 0.5 * model.coef.dot(gram * model.coef);
}

double decision_value(const BinaryWsvmModel& model, const Eigen::VectorXd& kernel_column) {
    return model.coef.dot(kernel_column) + model.bias;
}

std::vector<double> uniform_pi_grid(int size) {
    if (size < 1) throw ConfigError("pi grid size must be positive");
    std::vector<double> grid(static_cast<std::size_t>(size));
    for (int m = 1; m <= size; ++m)
        grid[static_cast<std::size_t>(m - 1)] = static_cast<double>(m) / (size + 1);
    return grid;
}

PiSeriesModel train_pi_series(const Eigen::MatrixXd& x, const std::vector<int>& y,
                              const std::vector<double>& grid, double lambda,
                              const KernelSpec& kernel, const SolverControl& control,
                              int workers) {
    if (grid.empty()) throw ConfigError("pi grid is empty");
    for (std::size_t m = 0; m + 1 < grid.size(); ++m)
        if (!(grid[m] < grid[m + 1])) throw ConfigError("pi grid must be strictly increasing");
    if (!(grid.front() > 0 && grid.back() < 1)) throw ConfigError("pi grid must lie in (0, 1)");

    PiSeriesModel series;
    series.pis = grid;
    series.rows.resize(static_cast<std::size_t>(x.rows()));
    std::iota(series.rows.begin(), series.rows.end(), 0);
    series.models.resize(grid.size());

    const Eigen::MatrixXd gram = kernel_matrix(x, x, kernel);
    parallel_for(grid.size(), workers, [&](std::size_t m) {
        series.models[m] = model_from_smo(solve_smo(gram, y, grid[m], lambda, control), y, grid[m],
                                          lambda, kernel);
    });
    return series;
}

double series_probability(const PiSeriesModel& series, const Eigen::VectorXd& kernel_column,
                          ProbRule rule) {
    const int grid_size = static_cast<int>(series.pis.size());
    int m_star = 0;
    if (rule == ProbRule::largest_nonneg) {
        for (int m = grid_size - 1; m >= 0; --m) {
            if (decision_value(series.models[static_cast<std::size_t>(m)], kernel_column) >= 0) {
                m_star = m + 1;
                break;
            }
        }
    } else {
        for (int m = 0; m < grid_size; ++m)
            if (decision_value(series.models[static_cast<std::size_t>(m)], kernel_column) >= 0)
                ++m_star;
    }
    const double lo = m_star == 0 ? 0.0 : series.pis[static_cast<std::size_t>(m_star - 1)];
    const double hi = m_star == grid_size ? 1.0 : series.pis[static_cast<std::size_t>(m_star)];
    return 0.5 * (lo + hi);
}

double estimate_binary_prob(const PiSeriesModel& series, const Eigen::MatrixXd& train_x,
                            const Eigen::VectorXd& x, ProbRule rule) {
    Eigen::VectorXd column(static_cast<Eigen::Index>(series.rows.size()));
    const KernelSpec& kernel = series.models.front().kernel;
    for (std::size_t t = 0; t < series.rows.size(); ++t)
        column(static_cast<Eigen::Index>(t)) =
            kernel_value(train_x.row(series.rows[t]).transpose(), x, kernel);
    return series_probability(series, column, rule);
}

std::string to_string(Scheme scheme) {
    switch (scheme) {
        case Scheme::pairwise: return "pairwise";
        case Scheme::baseline_b1: return "baseline_b1";
        case Scheme::baseline_b2: return "baseline_b2";
        case Scheme::bp1: return "bp1";
        case Scheme::bp2: return "bp2";
        case Scheme::ova: return "ova";
    }
    return "?";
}

Scheme parse_scheme(const std::string& name) {
    if (name == "pairwise") return Scheme::pairwise;
    if (name == "baseline_b1" || name == "b1") return Scheme::baseline_b1;
    if (name == "baseline_b2" || name == "b2") return Scheme::baseline_b2;
    if (name == "bp" || name == "bp1") return Scheme::bp1;
    if (name == "bp2") return Scheme::bp2;
    if (name == "ova") return Scheme::ova;
    throw ConfigError("unknown scheme '" + name +
                      "' (want pairwise, b1, b2, bp1, bp2 or ova)");
}

bool is_baseline(Scheme scheme) {
    return scheme == Scheme::baseline_b1 || scheme == Scheme::baseline_b2 ||
           scheme == Scheme::bp1 || scheme == Scheme::bp2;
}

bool reconstructs_pairwise(Scheme scheme) {
    return scheme == Scheme::bp1 || scheme == Scheme::bp2;
}

Eigen::VectorXd couple_with_anchor(const PairTable& table, int anchor) {
    const int k = static_cast<int>(table.q.rows());
    if (anchor < 1 || anchor > k) throw ConfigError("anchor class out of range");
    Eigen::VectorXd ratios(k);
    for (int j = 1; j <= k; ++j) {
        if (j == anchor) {
            ratios(j - 1) = 1.0;
            continue;
        }
        const double q = clamp_prob(table.at(j, anchor));
        const double q_anchor = clamp_prob(table.at(anchor, j));
        ratios(j - 1) = q / q_anchor;
    }
    return ratios / ratios.sum();
}

Eigen::VectorXd couple_median(const PairTable& table) {
    const int k = static_cast<int>(table.q.rows());
    Eigen::MatrixXd per_anchor(k, k);  // row = class, col = anchor
    for (int anchor = 1; anchor <= k; ++anchor)
        per_anchor.col(anchor - 1) = couple_with_anchor(table, anchor);

    Eigen::VectorXd med(k);
    std::vector<double> vals(static_cast<std::size_t>(k));
    for (int j = 0; j < k; ++j) {
        for (int a = 0; a < k; ++a) vals[static_cast<std::size_t>(a)] = per_anchor(j, a);
        std::sort(vals.begin(), vals.end());
        const std::size_t mid = vals.size() / 2;
        med(j) = vals.size() % 2 == 1 ? vals[mid] : 0.5 * (vals[mid - 1] + vals[mid]);
    }
    return med / med.sum();
}

Eigen::VectorXd probs_from_ratios(const Eigen::VectorXd& ratios) {
    return ratios / ratios.sum();
}

PairTable table_from_ratios(const Eigen::VectorXd& ratios) {
    const int k = static_cast<int>(ratios.size());
    PairTable table;
    table.q = Eigen::MatrixXd::Zero(k, k);
    for (int j = 0; j < k; ++j)
        for (int jp = 0; jp < k; ++jp) {
            if (j == jp) continue;
            table.q(j, jp) = ratios(j) / (ratios(j) + ratios(jp));
        }
    return table;
}

namespace {

std::vector<long> count_classes(const std::vector<int>& y, int k) {
    std::vector<long> counts(static_cast<std::size_t>(k), 0);
    for (int label : y) {
        if (label < 1 || label > k) throw DataError("class label out of range [1, K]");
        ++counts[static_cast<std::size_t>(label - 1)];
    }
    return counts;
}

int pick_baseline(const Eigen::MatrixXd& x, const std::vector<int>& y, int k,
                  const std::vector<long>& counts, Scheme scheme) {
    if (scheme == Scheme::baseline_b1 || scheme == Scheme::bp1) {
        // Most abundant class, ties to the smaller index.
        int best = 1;
        for (int j = 2; j <= k; ++j)
            if (counts[static_cast<std::size_t>(j - 1)] > counts[static_cast<std::size_t>(best - 1)])
                best = j;
        return best;
    }
    // Smallest aggregated distance between class-mean features.
    Eigen::MatrixXd means = Eigen::MatrixXd::Zero(k, x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        means.row(y[static_cast<std::size_t>(i)] - 1) += x.row(i);
    for (int j = 0; j < k; ++j) means.row(j) /= static_cast<double>(counts[static_cast<std::size_t>(j)]);
    int best = 1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int j = 1; j <= k; ++j) {
        double total = 0;
        for (int other = 1; other <= k; ++other)
            if (other != j) total += (means.row(j - 1) - means.row(other - 1)).norm();
        if (total < best_dist) {
            best_dist = total;
            best = j;
        }
    }
    return best;
}

}  // namespace

MulticlassModel fit_multiclass(const Eigen::MatrixXd& x, const std::vector<int>& y, Scheme scheme,
                               const std::vector<double>& pi_grid, double lambda,
                               const KernelSpec& kernel, const SolverControl& control,
                               int workers) {
    if (static_cast<Eigen::Index>(y.size()) != x.rows())
        throw DataError("fit_multiclass: labels and features disagree on sample count");
    if (y.empty()) throw DataError("fit_multiclass: empty training set");
    const int k = *std::max_element(y.begin(), y.end());
    if (k < 2) throw DataError("fit_multiclass needs at least two classes");
    const std::vector<long> counts = count_classes(y, k);
    for (int j = 1; j <= k; ++j) {
        if (counts[static_cast<std::size_t>(j - 1)] == 0)
            throw DataError("class " + std::to_string(j) + " missing from the training set");
        if (counts[static_cast<std::size_t>(j - 1)] < 2)
            throw DataError("class " + std::to_string(j) + " has fewer than 2 training points");
    }

    MulticlassModel model;
    model.scheme = scheme;
    model.k = k;
    model.pi_grid = pi_grid;
    model.lambda = lambda;
    model.kernel = kernel;
    model.class_counts = counts;
    model.train_x = x;

    std::vector<std::pair<int, int>> pairs;  // (positive, negative); negative 0 = rest
    if (scheme == Scheme::pairwise) {
        for (int j = 1; j <= k; ++j)
            for (int jp = j + 1; jp <= k; ++jp) pairs.emplace_back(j, jp);
    } else if (is_baseline(scheme)) {
        model.baseline_class = pick_baseline(x, y, k, counts, scheme);
        for (int j = 1; j <= k; ++j)
            if (j != model.baseline_class) pairs.emplace_back(j, model.baseline_class);
    } else {
        for (int j = 1; j <= k; ++j) pairs.emplace_back(j, 0);
    }

    model.components.resize(pairs.size());
    for (std::size_t c = 0; c < pairs.size(); ++c) {
        MulticlassModel::Component& comp = model.components[c];
        comp.positive = pairs[c].first;
        comp.negative = pairs[c].second;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const int label = y[static_cast<std::size_t>(i)];
            if (comp.negative == 0 || label == comp.positive || label == comp.negative)
                comp.series.rows.push_back(static_cast<int>(i));
        }
        comp.series.pis = pi_grid;
        comp.series.models.resize(pi_grid.size());
    }

    // One job per (component, pi); the component Gram is shared read-only.
    std::vector<Eigen::MatrixXd> grams(model.components.size());
    parallel_for(model.components.size(), workers, [&](std::size_t c) {
        const std::vector<int>& rows = model.components[c].series.rows;
        Eigen::MatrixXd sub(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t t = 0; t < rows.size(); ++t) sub.row(static_cast<Eigen::Index>(t)) = x.row(rows[t]);
        grams[c] = kernel_matrix(sub, sub, kernel);
    });

    struct Job {
        std::size_t component;
        std::size_t pi_index;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < model.components.size(); ++c)
        for (std::size_t m = 0; m < pi_grid.size(); ++m) jobs.push_back({c, m});

    parallel_for(jobs.size(), workers, [&](std::size_t idx) {
        const Job job = jobs[idx];
        MulticlassModel::Component& comp = model.components[job.component];
        std::vector<int> labels(comp.series.rows.size());
        for (std::size_t t = 0; t < comp.series.rows.size(); ++t) {
            const int label = y[static_cast<std::size_t>(comp.series.rows[t])];
            labels[t] = label == comp.positive ? 1 : -1;
        }
        const double pi = pi_grid[job.pi_index];
        comp.series.models[job.pi_index] = model_from_smo(
            solve_smo(grams[job.component], labels, pi, lambda, control), labels, pi, lambda,
            kernel);
    });
    return model;
}

namespace {

// Pairwise conditional estimate for every trained component.
std::vector<double> component_conditionals(const MulticlassModel& model, const Eigen::VectorXd& x,
                                           ProbRule rule) {
    std::vector<double> out(model.components.size(), 0.0);
    for (std::size_t c = 0; c < model.components.size(); ++c) {
        const MulticlassModel::Component& comp = model.components[c];
        Eigen::VectorXd column(static_cast<Eigen::Index>(comp.series.rows.size()));
        for (std::size_t t = 0; t < comp.series.rows.size(); ++t)
            column(static_cast<Eigen::Index>(t)) =
                kernel_value(model.train_x.row(comp.series.rows[t]).transpose(), x, model.kernel);
        out[c] = series_probability(comp.series, column, rule);
    }
    return out;
}

}  // namespace

ProbabilityEstimate predict_proba(const MulticlassModel& model, const Eigen::VectorXd& x,
                                  ProbRule rule) {
    if (x.size() != model.train_x.cols())
        throw DataError("predict: feature dimension mismatch");
    const int k = model.k;
    const std::vector<double> cond = component_conditionals(model, x, rule);

    ProbabilityEstimate est;
    if (model.scheme == Scheme::pairwise) {
        PairTable table;
        table.q = Eigen::MatrixXd::Zero(k, k);
        for (std::size_t c = 0; c < model.components.size(); ++c) {
            const auto& comp = model.components[c];
            const double q = clamp_prob(cond[c]);
            table.q(comp.positive - 1, comp.negative - 1) = q;
            table.q(comp.negative - 1, comp.positive - 1) = 1.0 - q;
        }
        est.probs = couple_median(table);
        est.pairwise_table = std::move(table);
    } else if (is_baseline(model.scheme)) {
        Eigen::VectorXd ratios = Eigen::VectorXd::Ones(k);
        for (std::size_t c = 0; c < model.components.size(); ++c) {
            const auto& comp = model.components[c];
            const double q = clamp_prob(cond[c]);
            ratios(comp.positive - 1) = q / (1.0 - q);
        }
        est.probs = probs_from_ratios(ratios);
        if (reconstructs_pairwise(model.scheme)) est.pairwise_table = table_from_ratios(ratios);
    } else {  // one-vs-all
        Eigen::VectorXd probs(k);
        for (std::size_t c = 0; c < model.components.size(); ++c)
            probs(model.components[c].positive - 1) = clamp_prob(cond[c]);
        est.probs = probs / probs.sum();
    }
    return est;
}

ProbabilityEstimate predict_proba(const MulticlassModel& model, const ImageFeature& feature,
                                  ProbRule rule) {
    if (!(feature.pooling_id == model.pooling_id))
        throw DataError("pooling mismatch: model trained on " + to_string(model.pooling_id) +
                        " features, got " + to_string(feature.pooling_id));
    return predict_proba(model, feature.values, rule);
}

int classify(const ProbabilityEstimate& estimate, ClassifyRule rule) {
    const int k = static_cast<int>(estimate.probs.size());
    auto argmax = [&]() {
        int best = 1;
        for (int j = 2; j <= k; ++j)
            if (estimate.probs(j - 1) > estimate.probs(best - 1)) best = j;
        return best;
    };
    if (rule == ClassifyRule::argmax) return argmax();

    if (!estimate.pairwise_table)
        throw ConfigError("max voting requires a pairwise conditional table");
    const PairTable& table = *estimate.pairwise_table;
    std::vector<double> votes(static_cast<std::size_t>(k), 0.0);
    for (int j = 1; j <= k; ++j) {
        for (int jp = j + 1; jp <= k; ++jp) {
            const double q = table.at(j, jp);
            if (q > 0.5) {
                votes[static_cast<std::size_t>(j - 1)] += 1.0;
            } else if (q < 0.5) {
                votes[static_cast<std::size_t>(jp - 1)] += 1.0;
            } else {
                votes[static_cast<std::size_t>(j - 1)] += 0.5;
                votes[static_cast<std::size_t>(jp - 1)] += 0.5;
            }
        }
    }
    double max_votes = *std::max_element(votes.begin(), votes.end());
    int best = 0;
    double best_prob = -1;
    for (int j = 1; j <= k; ++j) {
        if (votes[static_cast<std::size_t>(j - 1)] == max_votes &&
            estimate.probs(j - 1) > best_prob) {
            best_prob = estimate.probs(j - 1);
            best = j;
        }
    }
    return best;
}

std::vector<double> default_lambda_grid() {
    std::vector<double> grid;
    for (int e = -10; e <= 4; ++e) grid.push_back(std::pow(2.0, e));
    return grid;
}

std::vector<double> default_gamma_grid(const Eigen::MatrixXd& x) {
    const double center = 1.0 / median_sq_distance(x);
    std::vector<double> grid;
    for (int e = -8; e <= 2; ++e) grid.push_back(std::pow(2.0, e) * center);
    return grid;
}

TuneResult tune_egkl(const Eigen::MatrixXd& x, const std::vector<int>& y, Scheme scheme,
                     const std::vector<double>& lambda_grid, const std::vector<double>& gamma_grid,
                     std::uint64_t split_seed, const std::vector<double>& pi_grid,
                     KernelSpec::Kind kernel_kind, const SolverControl& control, int workers) {
    if (lambda_grid.empty() || gamma_grid.empty()) throw ConfigError("empty tuning grid");
    const int k = *std::max_element(y.begin(), y.end());

    // Stratified 50/50 split into train and tune halves.
    std::mt19937_64 gen(split_seed);
    std::vector<Eigen::Index> train_rows, tune_rows;
    for (int j = 1; j <= k; ++j) {
        std::vector<Eigen::Index> members;
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y[i] == j) members.push_back(static_cast<Eigen::Index>(i));
        shuffle(members, gen);
        const std::size_t half = members.size() / 2;
        for (std::size_t i = 0; i < members.size(); ++i)
            (i < half ? train_rows : tune_rows).push_back(members[i]);
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(tune_rows.begin(), tune_rows.end());

    Eigen::MatrixXd train_x(static_cast<Eigen::Index>(train_rows.size()), x.cols());
    std::vector<int> train_y(train_rows.size());
    for (std::size_t i = 0; i < train_rows.size(); ++i) {
        train_x.row(static_cast<Eigen::Index>(i)) = x.row(train_rows[i]);
        train_y[i] = y[static_cast<std::size_t>(train_rows[i])];
    }
    Eigen::MatrixXd tune_x(static_cast<Eigen::Index>(tune_rows.size()), x.cols());
    std::vector<int> tune_y(tune_rows.size());
    for (std::size_t i = 0; i < tune_rows.size(); ++i) {
        tune_x.row(static_cast<Eigen::Index>(i)) = x.row(tune_rows[i]);
        tune_y[i] = y[static_cast<std::size_t>(tune_rows[i])];
    }

    std::vector<double> lambdas = lambda_grid;
    std::vector<double> gammas = gamma_grid;
    std::sort(lambdas.begin(), lambdas.end());
    std::sort(gammas.begin(), gammas.end());

    struct Point {
        double lambda, gamma;
    };
    std::vector<Point> points;
    for (double lambda : lambdas)
        for (double gamma : gammas) points.push_back({lambda, gamma});

    std::vector<double> scores(points.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(points.size(), workers, [&](std::size_t p) {
        KernelSpec kernel;
        kernel.kind = kernel_kind;
        kernel.gamma = points[p].gamma;
        try {
            const MulticlassModel model = fit_multiclass(train_x, train_y, scheme, pi_grid,
                                                         points[p].lambda, kernel, control, 1);
            double total = 0;
            for (Eigen::Index i = 0; i < tune_x.rows(); ++i) {
                const ProbabilityEstimate est = predict_proba(model, tune_x.row(i).transpose());
                const double p_true =
                    std::max(est.probs(tune_y[static_cast<std::size_t>(i)] - 1), kProbClamp);
                total -= std::log(p_true);
            }
            scores[p] = total / static_cast<double>(tune_x.rows());
        } catch (const std::exception&) {
            // Degenerate grid point; skipped in the argmin below.
        }
    });

    TuneResult result;
    result.egkl = std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t p = 0; p < points.size(); ++p) {
        if (std::isnan(scores[p])) continue;
        result.report.push_back({points[p].lambda, points[p].gamma, scores[p]});
        if (scores[p] < result.egkl) {  // first strict improvement keeps the tie rule
            result.egkl = scores[p];
            result.lambda = points[p].lambda;
            result.gamma = points[p].gamma;
            any = true;
        }
    }
    if (!any) throw NumericError("egkl tuning failed: every grid point was degenerate");
    return result;
}

void save_model(const MulticlassModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write model: " + path);
    BinaryWriter w(out);
    w.magic("SBWM");
    w.u32(1);  // version
    w.str(to_string(model.scheme));
    w.u32(static_cast<std::uint32_t>(model.k));
    w.i32(model.baseline_class);
    w.str(to_string(model.kernel.kind));
    w.f64(model.kernel.gamma);
    w.f64(model.lambda);
    w.str(to_string(model.pooling_id));
    w.u64(model.features_hash);
    w.u64(model.pi_grid.size());
    for (double pi : model.pi_grid) w.f64(pi);
    w.u64(model.class_counts.size());
    for (long c : model.class_counts) w.i64(c);
    w.u64(model.components.size());
    for (const auto& comp : model.components) {
        w.i32(comp.positive);
        w.i32(comp.negative);
        w.u64(comp.series.rows.size());
        for (int row : comp.series.rows) w.i32(row);
        for (const BinaryWsvmModel& bm : comp.series.models) {
            for (Eigen::Index t = 0; t < bm.coef.size(); ++t) w.f64(bm.coef(t));
            w.f64(bm.bias);
            w.f64(bm.kkt_violation);
            w.i64(bm.iters);
        }
    }
}

MulticlassModel load_model(const std::string& path, const FeatureMatrix& train_features) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open model: " + path);
    BinaryReader r(in, "model " + path);
    r.expect_magic("SBWM");
    if (r.u32() != 1) throw DataError("model " + path + ": unsupported version");

    MulticlassModel model;
    model.scheme = parse_scheme(r.str());
    model.k = static_cast<int>(r.u32());
    model.baseline_class = r.i32();
    model.kernel.kind = parse_kernel_kind(r.str());
    model.kernel.gamma = r.f64();
    model.lambda = r.f64();
    model.pooling_id = parse_pooling_id(r.str());
    model.features_hash = r.u64();
    const std::uint64_t grid_size = r.u64();
    for (std::uint64_t m = 0; m < grid_size; ++m) model.pi_grid.push_back(r.f64());
    const std::uint64_t n_classes = r.u64();
    for (std::uint64_t j = 0; j < n_classes; ++j) model.class_counts.push_back(r.i64());
    const std::uint64_t n_components = r.u64();
    for (std::uint64_t c = 0; c < n_components; ++c) {
        MulticlassModel::Component comp;
        comp.positive = r.i32();
        comp.negative = r.i32();
        const std::uint64_t n_rows = r.u64();
        for (std::uint64_t t = 0; t < n_rows; ++t) comp.series.rows.push_back(r.i32());
        comp.series.pis = model.pi_grid;
        for (std::uint64_t m = 0; m < grid_size; ++m) {
            BinaryWsvmModel bm;
            bm.coef.resize(static_cast<Eigen::Index>(n_rows));
            for (std::uint64_t t = 0; t < n_rows; ++t)
                bm.coef(static_cast<Eigen::Index>(t)) = r.f64();
            bm.bias = r.f64();
            bm.kkt_violation = r.f64();
            bm.iters = r.i64();
            bm.pi = model.pi_grid[static_cast<std::size_t>(m)];
            bm.lambda = model.lambda;
            bm.kernel = model.kernel;
            comp.series.models.push_back(std::move(bm));
        }
        model.components.push_back(std::move(comp));
    }

    if (content_hash(train_features) != model.features_hash)
        throw DataError("model " + path +
                        ": training feature matrix does not match the referenced content hash");
    model.train_x.resize(static_cast<Eigen::Index>(train_features.rows.size()),
                         train_features.m);
    for (std::size_t i = 0; i < train_features.rows.size(); ++i)
        model.train_x.row(static_cast<Eigen::Index>(i)) = train_features.rows[i].values;
    return model;
}

}  // namespace sibow
