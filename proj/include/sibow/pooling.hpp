#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "sibow/encoding.hpp"

namespace sibow {

enum class PoolMode { sum, max };
enum class NormMode { sum, l2, ltf };
enum class CodeSource { vq, llc };

// One of the six pooling/normalization combinations, e.g. "sum-LTF".
struct PoolingId {
    PoolMode pool = PoolMode::sum;
    NormMode norm = NormMode::ltf;

    bool operator==(const PoolingId&) const = default;
};

std::string to_string(PoolingId id);
PoolingId parse_pooling_id(const std::string& name);
std::string to_string(CodeSource source);
CodeSource parse_code_source(const std::string& name);

struct PooledVector {
    Eigen::VectorXd values;
    CodeSource source = CodeSource::vq;
    bool degenerate = false;  // pooled from an empty code matrix
};

struct ImageFeature {
    Eigen::VectorXd values;
    PoolingId pooling_id;
    std::string image_id;
    int label = 0;  // class index in [1, K]; 0 when unlabeled
    bool degenerate = false;
};

// Column-wise aggregation; an empty code matrix yields the zero vector with
// the degenerate flag set.
PooledVector pool(const CodeMatrix& codes, PoolMode mode, CodeSource source);

ImageFeature normalize(const PooledVector& pooled, NormMode mode);

ImageFeature featurize(const CodeMatrix& codes, PoolingId id, CodeSource source);

// Feature-matrix artifact ("SBWF") plus CSV export.
struct FeatureMatrix {
    int m = 0;
    PoolingId pooling_id;
    std::uint64_t codebook_hash = 0;
    std::vector<ImageFeature> rows;
};

void save_features(const FeatureMatrix& features, const std::string& path);
FeatureMatrix load_features(const std::string& path);
void export_features_csv(const FeatureMatrix& features, const std::string& path);

// Hash of the feature data itself (not the file bytes); used by models to
// pin the exact matrix they were trained against.
std::uint64_t content_hash(const FeatureMatrix& features);

}  // namespace sibow
