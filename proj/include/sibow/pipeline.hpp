#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sibow/codebook.hpp"
#include "sibow/encoding.hpp"
#include "sibow/metrics.hpp"
#include "sibow/pooling.hpp"
#include "sibow/sift.hpp"
#include "sibow/wsvm.hpp"

namespace sibow {

enum class DescriptorSource { builtin, vlfeat_import };

struct PipelineConfig {
    DescriptorSource descriptor_source = DescriptorSource::builtin;
    std::string descriptor_dir;  // <image_id>.sift.txt files for vlfeat_import
    int resize_width = 384;
    int resize_height = 384;
    SiftParams sift;

    int codebook_size = 64;
    KMeansParams kmeans;
    MultipassOptions multipass;

    EncoderKind encoder = EncoderKind::vq;
    LlcParams llc;

    PoolingId pooling;

    Scheme scheme = Scheme::baseline_b1;
    int pi_grid_size = 19;
    KernelSpec::Kind kernel = KernelSpec::Kind::rbf;
    std::optional<double> lambda;  // fixed when set, otherwise tuned
    std::optional<double> gamma;
    std::vector<double> lambda_grid;  // empty = default grid
    std::vector<double> gamma_grid;
    SolverControl solver;

    std::uint64_t split_seed = 1;
    std::uint64_t tune_seed = 1;
    double train_fraction = 0.8;
    int repeats = 0;  // > 0 enables repeated train/tune split evaluation
    int ece_bins = 10;
    int workers = 0;  // 0 = hardware parallelism

    void validate() const;
};

PipelineConfig load_config(const std::string& path);
std::string config_fingerprint(const PipelineConfig& config);  // stable serialization for hashing

struct DatasetManifest {
    std::vector<std::string> class_names;  // size K
    struct Entry {
        std::string path;
        std::string image_id;
        int label = 0;  // 1-based
    };
    std::vector<Entry> entries;

    int k() const { return static_cast<int>(class_names.size()); }
};

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

struct SplitResult {
    DatasetManifest train;
    DatasetManifest test;
};

// Deterministic stratified split; each class keeps at least one entry on
// both sides.
SplitResult split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed,
                  bool stratified = true);

struct PipelineResult {
    std::string codebook_path;
    std::string train_features_path;
    std::string test_features_path;
    std::string model_path;
    std::string report_path;
    EvaluationReport report;
};

enum class PipelineStage { descriptors, codebook, features, model, evaluate };

// Runs extract -> codebook -> encode -> train -> evaluate up to `run_until`,
// persisting every stage under out_dir. Stages whose inputs are unchanged
// (tracked by content hashes in pipeline_state.json) are reloaded instead of
// recomputed.
PipelineResult run_pipeline(const PipelineConfig& config, const DatasetManifest& manifest,
                            const std::string& out_dir,
                            PipelineStage run_until = PipelineStage::evaluate);

struct Prediction {
    std::string image_id;
    Eigen::VectorXd probs;
    int argmax = 0;
    int maxvote = 0;  // 0 when unavailable
};

std::vector<Prediction> predict_features(const MulticlassModel& model,
                                         const FeatureMatrix& features);
void write_predictions_csv(const std::vector<Prediction>& predictions, int k,
                           const std::string& path);

}  // namespace sibow
