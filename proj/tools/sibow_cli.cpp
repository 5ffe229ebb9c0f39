// Command-line driver for the full pipeline and its individual stages.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "sibow/errors.hpp"
#include "sibow/parallel.hpp"
#include "sibow/pipeline.hpp"
#include "sibow/serialize.hpp"

namespace fs = std::filesystem;
using namespace sibow;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_set = false;
    int workers = 0;
};

PipelineConfig resolve_config(const CommonArgs& args) {
    PipelineConfig config;
    if (!args.config_path.empty()) config = load_config(args.config_path);
    if (args.seed_set) {
        config.split_seed = args.seed;
        config.kmeans.seed = args.seed;
        config.tune_seed = args.seed;
    }
    if (args.workers > 0) config.workers = args.workers;
    return config;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Pipeline config JSON");
    cmd->add_option("--out", args.out_dir, "Output directory");
    cmd->add_option("--seed", args.seed, "Override every seed in the config")
        ->each([&args](const std::string&) { args.seed_set = true; });
    cmd->add_option("--workers", args.workers, "Worker threads (0 = hardware)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SIFT bag-of-features image classification with weighted-SVM "
                 "probability estimation"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string manifest_path, model_path, features_path, train_features_path;
    std::string input_path, output_path, image_id = "image";

    auto* extract_cmd = app.add_subcommand("extract", "SIFT descriptors for one PGM image");
    add_common(extract_cmd, args);
    extract_cmd->add_option("image", input_path, "PGM image path")->required();
    extract_cmd->add_option("--id", image_id, "Image id used in the output name");

    auto* codebook_cmd = app.add_subcommand("codebook", "Cluster training descriptors");
    add_common(codebook_cmd, args);
    codebook_cmd->add_option("--manifest", manifest_path, "Dataset manifest JSON")->required();

    auto* encode_cmd = app.add_subcommand("encode", "Encode and pool image features");
    add_common(encode_cmd, args);
    encode_cmd->add_option("--manifest", manifest_path, "Dataset manifest JSON")->required();

    auto* train_cmd = app.add_subcommand("train", "Fit the multiclass wSVM model");
    add_common(train_cmd, args);
    train_cmd->add_option("--manifest", manifest_path, "Dataset manifest JSON")->required();

    auto* tune_cmd = app.add_subcommand("tune", "Grid-search lambda/gamma by held-out EGKL");
    add_common(tune_cmd, args);
    tune_cmd->add_option("--features", features_path, "Training feature artifact (SBWF)")
        ->required();

    auto* predict_cmd = app.add_subcommand("predict", "Per-image class probabilities");
    add_common(predict_cmd, args);
    predict_cmd->add_option("--model", model_path, "Model artifact (SBWM)")->required();
    predict_cmd->add_option("--train-features", train_features_path,
                            "Feature artifact the model was trained on")->required();
    predict_cmd->add_option("--features", features_path, "Feature artifact to score")->required();
    predict_cmd->add_option("--out-csv", output_path, "Prediction CSV path");

    auto* evaluate_cmd = app.add_subcommand("evaluate", "Metrics and calibration on features");
    add_common(evaluate_cmd, args);
    evaluate_cmd->add_option("--model", model_path, "Model artifact (SBWM)")->required();
    evaluate_cmd->add_option("--train-features", train_features_path,
                             "Feature artifact the model was trained on")->required();
    evaluate_cmd->add_option("--features", features_path, "Labeled feature artifact to score")
        ->required();

    auto* pipeline_cmd = app.add_subcommand("pipeline", "Run every stage end to end");
    add_common(pipeline_cmd, args);
    pipeline_cmd->add_option("--manifest", manifest_path, "Dataset manifest JSON")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const PipelineConfig config = resolve_config(args);

        if (*extract_cmd) {
            GrayImage img = read_pgm_file(input_path);
            if (img.width != config.resize_width || img.height != config.resize_height)
                img = resize_bilinear(img, config.resize_width, config.resize_height);
            const ExtractResult res = extract_with_keypoints(img, config.sift, image_id);
            fs::create_directories(args.out_dir);
            const std::string out_path = args.out_dir + "/" + image_id + ".sift.txt";
            std::ofstream out(out_path);
            if (!out) throw DataError("cannot write " + out_path);
            export_vlfeat(res, out);
            std::cout << res.set.descriptors.size() << " descriptors -> " << out_path << "\n";
        } else if (*pipeline_cmd) {
            const DatasetManifest manifest = load_manifest(manifest_path);
            const PipelineResult res = run_pipeline(config, manifest, args.out_dir);
            std::cout << "model: " << res.model_path << "\n"
                      << "report: " << res.report_path << "\n"
                      << "te1: " << res.report.te1 << "  ece: " << res.report.calibration.ece
                      << "\n";
        } else if (*codebook_cmd || *encode_cmd || *train_cmd) {
            // Stage subcommands run the shared artifact chain up to the
            // requested stage; earlier artifacts are reused when unchanged.
            const DatasetManifest manifest = load_manifest(manifest_path);
            const PipelineStage until = *codebook_cmd  ? PipelineStage::codebook
                                        : *encode_cmd ? PipelineStage::features
                                                      : PipelineStage::model;
            const PipelineResult res = run_pipeline(config, manifest, args.out_dir, until);
            if (*codebook_cmd)
                std::cout << "codebook: " << res.codebook_path << "\n";
            else if (*encode_cmd)
                std::cout << "features: " << res.train_features_path << ", "
                          << res.test_features_path << "\n";
            else
                std::cout << "model: " << res.model_path << "\n";
        } else if (*tune_cmd) {
            const FeatureMatrix features = load_features(features_path);
            Eigen::MatrixXd x(static_cast<Eigen::Index>(features.rows.size()), features.m);
            std::vector<int> y(features.rows.size());
            for (std::size_t i = 0; i < features.rows.size(); ++i) {
                x.row(static_cast<Eigen::Index>(i)) = features.rows[i].values;
                y[i] = features.rows[i].label;
            }
            const std::vector<double> lambda_grid =
                config.lambda_grid.empty() ? default_lambda_grid() : config.lambda_grid;
            const std::vector<double> gamma_grid =
                config.kernel == KernelSpec::Kind::linear
                    ? std::vector<double>{1.0}
                    : (config.gamma_grid.empty() ? default_gamma_grid(x) : config.gamma_grid);
            const TuneResult tuned =
                tune_egkl(x, y, config.scheme, lambda_grid, gamma_grid, config.tune_seed,
                          uniform_pi_grid(config.pi_grid_size), config.kernel, config.solver,
                          config.workers);
            std::cout << "lambda: " << tuned.lambda << "\ngamma: " << tuned.gamma
                      << "\negkl: " << tuned.egkl << "\n";
        } else if (*predict_cmd || *evaluate_cmd) {
            const FeatureMatrix train_features = load_features(train_features_path);
            const FeatureMatrix features = load_features(features_path);
            const MulticlassModel model = load_model(model_path, train_features);
            if (*predict_cmd) {
                const std::vector<Prediction> preds = predict_features(model, features);
                const std::string out_path =
                    output_path.empty() ? args.out_dir + "/predictions.csv" : output_path;
                fs::create_directories(fs::path(out_path).parent_path().string().empty()
                                           ? "."
                                           : fs::path(out_path).parent_path().string());
                write_predictions_csv(preds, model.k, out_path);
                std::cout << preds.size() << " predictions -> " << out_path << "\n";
            } else {
                std::vector<EvalRecord> records(features.rows.size());
                for (std::size_t i = 0; i < features.rows.size(); ++i) {
                    const ProbabilityEstimate est = predict_proba(model, features.rows[i]);
                    records[i].true_label = features.rows[i].label;
                    records[i].probs = est.probs;
                    records[i].predicted_argmax = classify(est, ClassifyRule::argmax);
                    records[i].predicted_maxvote =
                        est.pairwise_table ? classify(est, ClassifyRule::maxvote) : 0;
                }
                const EvaluationReport report = evaluate(records, config.ece_bins);
                fs::create_directories(args.out_dir);
                write_report_json(report, args.out_dir + "/evaluation.json");
                write_reliability_csv(report.calibration, args.out_dir + "/reliability.csv");
                std::cout << report_to_json(report) << "\n";
            }
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
