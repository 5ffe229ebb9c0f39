#include "sibow/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "sibow/errors.hpp"

namespace sibow {

namespace {

int class_count(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw DataError("empty evaluation record set");
    const int k = static_cast<int>(records.front().probs.size());
    for (const EvalRecord& r : records) {
        if (static_cast<int>(r.probs.size()) != k)
            throw DataError("evaluation records disagree on class count");
        if (r.true_label < 1 || r.true_label > k)
            throw DataError("true label out of range [1, K]");
    }
    return k;
}

int predicted_label(const EvalRecord& r, ClassifyRule rule) {
    if (rule == ClassifyRule::argmax) return r.predicted_argmax;
    if (r.predicted_maxvote < 1)
        throw DataError("max voting prediction missing from evaluation record");
    return r.predicted_maxvote;
}

}  // namespace

double misclassification(const std::vector<EvalRecord>& records, ClassifyRule rule) {
    class_count(records);
    long wrong = 0;
    for (const EvalRecord& r : records)
        if (predicted_label(r, rule) != r.true_label) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(records.size());
}

MacroPrf macro_prf(const std::vector<EvalRecord>& records) {
    const int k = class_count(records);
    std::vector<long> tp(static_cast<std::size_t>(k), 0);
    std::vector<long> fp(static_cast<std::size_t>(k), 0);
    std::vector<long> fn(static_cast<std::size_t>(k), 0);
    for (const EvalRecord& r : records) {
        const int pred = r.predicted_argmax;
        if (pred == r.true_label) {
            ++tp[static_cast<std::size_t>(pred - 1)];
        } else {
            if (pred >= 1 && pred <= k) ++fp[static_cast<std::size_t>(pred - 1)];
            ++fn[static_cast<std::size_t>(r.true_label - 1)];
        }
    }
    MacroPrf out;
    for (int j = 0; j < k; ++j) {
        const double denom_p = static_cast<double>(tp[static_cast<std::size_t>(j)] + fp[static_cast<std::size_t>(j)]);
        const double denom_r = static_cast<double>(tp[static_cast<std::size_t>(j)] + fn[static_cast<std::size_t>(j)]);
        const double precision = denom_p > 0 ? tp[static_cast<std::size_t>(j)] / denom_p : 0.0;
        const double recall = denom_r > 0 ? tp[static_cast<std::size_t>(j)] / denom_r : 0.0;
        const double f1 = precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
        out.precision += precision;
        out.recall += recall;
        out.f1 += f1;
    }
    out.precision /= k;
    out.recall /= k;
    out.f1 /= k;
    return out;
}

CalibrationReport ece(const std::vector<EvalRecord>& records, int bin_count) {
    class_count(records);
    if (bin_count < 1) throw ConfigError("ece bin count must be positive");

    CalibrationReport report;
    report.n = static_cast<long>(records.size());
    std::vector<long> counts(static_cast<std::size_t>(bin_count), 0);
    std::vector<double> conf_sum(static_cast<std::size_t>(bin_count), 0.0);
    std::vector<long> correct(static_cast<std::size_t>(bin_count), 0);

    for (const EvalRecord& r : records) {
        const double top = r.probs(r.predicted_argmax - 1);
        if (top < 0 || top > 1) throw DataError("top probability outside [0, 1]");
        // Half-open bins ((m-1)/M, m/M]; an exact 0 joins the first bin.
        int bin = static_cast<int>(std::ceil(top * bin_count));
        bin = std::clamp(bin, 1, bin_count);
        const std::size_t idx = static_cast<std::size_t>(bin - 1);
        ++counts[idx];
        conf_sum[idx] += top;
        if (r.predicted_argmax == r.true_label) ++correct[idx];
    }

    report.bins.resize(static_cast<std::size_t>(bin_count));
    double total = 0;
    for (int b = 0; b < bin_count; ++b) {
        const std::size_t idx = static_cast<std::size_t>(b);
        CalibrationBin& bin = report.bins[idx];
        bin.count = counts[idx];
        if (bin.count > 0) {
            bin.accuracy = static_cast<double>(correct[idx]) / static_cast<double>(bin.count);
            bin.confidence = conf_sum[idx] / static_cast<double>(bin.count);
            total += static_cast<double>(bin.count) * std::abs(bin.accuracy - bin.confidence);
        }
    }
    report.ece = total / static_cast<double>(report.n);
    return report;
}

namespace {

// Rank-based AUC of `scores` with positives marked true, midranks on ties.
double rank_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
    const std::size_t n = scores.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double midrank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = midrank;
        i = j + 1;
    }

    double rank_sum = 0;
    long n_pos = 0;
    for (std::size_t t = 0; t < n; ++t) {
        if (positive[t]) {
            rank_sum += ranks[t];
            ++n_pos;
        }
    }
    const long n_neg = static_cast<long>(n) - n_pos;
    return (rank_sum - static_cast<double>(n_pos) * (n_pos + 1) / 2.0) /
           (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

}  // namespace

double hand_till_auc(const std::vector<EvalRecord>& records) {
    const int k = class_count(records);
    if (k < 2) throw DataError("multiclass auc needs at least two classes");
    std::vector<long> support(static_cast<std::size_t>(k), 0);
    for (const EvalRecord& r : records) ++support[static_cast<std::size_t>(r.true_label - 1)];
    for (int j = 1; j <= k; ++j)
        if (support[static_cast<std::size_t>(j - 1)] == 0)
            throw DataError("class " + std::to_string(j) + " absent from the evaluation records");

    auto pair_auc = [&](int pos, int other) {
        std::vector<double> scores;
        std::vector<bool> positive;
        for (const EvalRecord& r : records) {
            if (r.true_label != pos && r.true_label != other) continue;
            scores.push_back(r.probs(pos - 1));
            positive.push_back(r.true_label == pos);
        }
        return rank_auc(scores, positive);
    };

    double total = 0;
    for (int j = 1; j <= k; ++j)
        for (int jp = j + 1; jp <= k; ++jp)
            total += 0.5 * (pair_auc(j, jp) + pair_auc(jp, j));
    return 2.0 * total / (static_cast<double>(k) * (k - 1));
}

std::vector<std::vector<long>> confusion_matrix(const std::vector<EvalRecord>& records,
                                                ClassifyRule rule) {
    const int k = class_count(records);
    std::vector<std::vector<long>> matrix(static_cast<std::size_t>(k),
                                          std::vector<long>(static_cast<std::size_t>(k), 0));
    for (const EvalRecord& r : records) {
        const int pred = predicted_label(r, rule);
        if (pred < 1 || pred > k) throw DataError("predicted label out of range [1, K]");
        ++matrix[static_cast<std::size_t>(r.true_label - 1)][static_cast<std::size_t>(pred - 1)];
    }
    return matrix;
}

EvaluationReport evaluate(const std::vector<EvalRecord>& records, int ece_bins) {
    EvaluationReport report;
    report.k = class_count(records);
    report.n = static_cast<long>(records.size());
    report.te1 = misclassification(records, ClassifyRule::argmax);
    const bool has_maxvote = std::all_of(records.begin(), records.end(),
                                         [](const EvalRecord& r) { return r.predicted_maxvote >= 1; });
    report.te2 = has_maxvote ? misclassification(records, ClassifyRule::maxvote) : -1.0;
    report.prf = macro_prf(records);
    report.auc = hand_till_auc(records);
    report.calibration = ece(records, ece_bins);
    report.confusion = confusion_matrix(records, ClassifyRule::argmax);

    long trace = 0;
    for (int j = 0; j < report.k; ++j)
        trace += report.confusion[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)];
    const double identity = 1.0 - static_cast<double>(trace) / static_cast<double>(report.n);
    if (std::abs(identity - report.te1) > 1e-12)
        throw NumericError("confusion trace identity violated");
    return report;
}

std::string report_to_json(const EvaluationReport& report) {
    nlohmann::json j;
    j["n"] = report.n;
    j["classes"] = report.k;
    j["te1"] = report.te1;
    if (report.te2 >= 0)
        j["te2"] = report.te2;
    else
        j["te2"] = nullptr;
    j["macro_precision"] = report.prf.precision;
    j["macro_recall"] = report.prf.recall;
    j["macro_f1"] = report.prf.f1;
    j["auc"] = report.auc;
    j["ece"] = report.calibration.ece;
    nlohmann::json bins = nlohmann::json::array();
    for (const CalibrationBin& b : report.calibration.bins)
        bins.push_back({{"count", b.count}, {"accuracy", b.accuracy}, {"confidence", b.confidence}});
    j["reliability_bins"] = bins;
    j["confusion"] = report.confusion;
    return j.dump(2);
}

void write_report_json(const EvaluationReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write report: " + path);
    out << report_to_json(report) << "\n";
}

void write_reliability_csv(const CalibrationReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write reliability csv: " + path);
    out << "bin,count,accuracy,confidence\n";
    for (std::size_t b = 0; b < report.bins.size(); ++b)
        out << (b + 1) << "," << report.bins[b].count << "," << report.bins[b].accuracy << ","
            << report.bins[b].confidence << "\n";
}

}  // namespace sibow
