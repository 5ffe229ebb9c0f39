#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

#include "sibow/codebook.hpp"
#include "sibow/sift.hpp"

namespace sibow {

// Sparse M-dimensional visual code: strictly increasing indices with weights.
struct VisualCode {
    std::vector<int> indices;
    std::vector<double> weights;
    int m = 0;

    double weight_sum() const;
};

struct CodeMatrix {
    std::vector<VisualCode> codes;
    int m = 0;
};

struct LlcParams {
    double lambda = 1e-4;   // locality regularization
    double sigma = 1.0;     // locality adaptor bandwidth
    int knn = 5;            // nearest bases kept by the fast approximation
    double ridge_eps = 1e-8;  // relative ridge for the local Gram system
};

enum class EncoderKind { vq, llc, fast_llc };

EncoderKind parse_encoder(const std::string& name);
std::string to_string(EncoderKind kind);

// One-hot code at the nearest centroid (Euclidean); ties break to the
// smallest index.
VisualCode encode_vq(const Eigen::VectorXd& x, const Codebook& book);

// Full locality-constrained code: solves the sum-to-one constrained least
// squares with the exponential locality adaptor analytically.
VisualCode encode_llc(const Eigen::VectorXd& x, const Codebook& book, const LlcParams& p);

// K-nearest-bases approximation; remaining M-K positions stay zero.
VisualCode encode_fast_llc(const Eigen::VectorXd& x, const Codebook& book, const LlcParams& p);

CodeMatrix encode_image(const DescriptorSet& set, const Codebook& book, EncoderKind kind,
                        const LlcParams& p = {});

}  // namespace sibow
