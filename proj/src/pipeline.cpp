#include "sibow/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sibow/errors.hpp"
#include "sibow/parallel.hpp"
#include "sibow/rng.hpp"
#include "sibow/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace sibow {

void PipelineConfig::validate() const {
    if (resize_width < 16 || resize_height < 16)
        throw ConfigError("resize target must be at least 16x16");
    if (codebook_size < 1) throw ConfigError("codebook_size must be positive");
    if (pi_grid_size < 1) throw ConfigError("pi_grid_size must be positive");
    if (!(train_fraction > 0 && train_fraction < 1))
        throw ConfigError("train_fraction must lie in (0, 1)");
    if (repeats < 0) throw ConfigError("repeats must be non-negative");
    if (ece_bins < 1) throw ConfigError("ece_bins must be positive");
    if (encoder != EncoderKind::vq && llc.knn > codebook_size)
        throw ConfigError("llc knn exceeds the codebook size");
    if (descriptor_source == DescriptorSource::vlfeat_import && descriptor_dir.empty())
        throw ConfigError("vlfeat_import requires descriptor_dir");
    if (lambda && !(*lambda > 0)) throw ConfigError("lambda must be positive");
    if (gamma && !(*gamma > 0)) throw ConfigError("gamma must be positive");
}

namespace {

json read_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw DataError(std::string("cannot open ") + what + ": " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError(std::string(what) + " " + path + ": invalid JSON: " + e.what());
    }
    return j;
}

}  // namespace

PipelineConfig load_config(const std::string& path) {
    const json j = read_json_file(path, "config");
    PipelineConfig c;
    try {
        if (j.contains("descriptor_source")) {
            const std::string s = j["descriptor_source"];
            if (s == "builtin")
                c.descriptor_source = DescriptorSource::builtin;
            else if (s == "vlfeat_import")
                c.descriptor_source = DescriptorSource::vlfeat_import;
            else
                throw ConfigError("unknown descriptor_source '" + s + "'");
        }
        c.descriptor_dir = j.value("descriptor_dir", std::string{});
        if (j.contains("resize")) {
            c.resize_width = j["resize"].at(0);
            c.resize_height = j["resize"].at(1);
        }
        if (j.contains("sift")) {
            const json& s = j["sift"];
            c.sift.n_octaves = s.value("n_octaves", c.sift.n_octaves);
            c.sift.scales_per_octave = s.value("scales_per_octave", c.sift.scales_per_octave);
            c.sift.base_sigma = s.value("base_sigma", c.sift.base_sigma);
            c.sift.contrast_threshold = s.value("contrast_threshold", c.sift.contrast_threshold);
            c.sift.edge_threshold = s.value("edge_threshold", c.sift.edge_threshold);
            c.sift.subpixel_refine = s.value("subpixel_refine", c.sift.subpixel_refine);
        }
        c.codebook_size = j.value("codebook_size", c.codebook_size);
        if (j.contains("kmeans")) {
            const json& s = j["kmeans"];
            c.kmeans.max_iters = s.value("max_iters", c.kmeans.max_iters);
            c.kmeans.tol = s.value("tol", c.kmeans.tol);
            c.kmeans.seed = s.value("seed", c.kmeans.seed);
            c.kmeans.n_init = s.value("n_init", c.kmeans.n_init);
            if (s.contains("chunk_count")) c.multipass.chunk_count_override = s["chunk_count"];
            if (s.contains("pass_mode")) {
                const std::string mode = s["pass_mode"];
                if (mode == "auto")
                    c.multipass.pass = MultipassOptions::Pass::automatic;
                else if (mode == "single")
                    c.multipass.pass = MultipassOptions::Pass::single;
                else if (mode == "two")
                    c.multipass.pass = MultipassOptions::Pass::two;
                else
                    throw ConfigError("unknown kmeans pass_mode '" + mode + "'");
            }
        }
        if (j.contains("encoder")) c.encoder = parse_encoder(j["encoder"]);
        if (j.contains("llc")) {
            if (c.encoder == EncoderKind::vq)
                throw ConfigError("llc parameters are only valid for llc/fast_llc encoders");
            const json& s = j["llc"];
            c.llc.lambda = s.value("lambda", c.llc.lambda);
            c.llc.sigma = s.value("sigma", c.llc.sigma);
            c.llc.knn = s.value("knn", c.llc.knn);
            c.llc.ridge_eps = s.value("ridge_eps", c.llc.ridge_eps);
        }
        if (j.contains("pooling")) c.pooling = parse_pooling_id(j["pooling"]);
        if (j.contains("scheme")) c.scheme = parse_scheme(j["scheme"]);
        c.pi_grid_size = j.value("pi_grid_size", c.pi_grid_size);
        if (j.contains("kernel")) c.kernel = parse_kernel_kind(j["kernel"]);
        if (j.contains("lambda") && !j["lambda"].is_null()) c.lambda = j["lambda"].get<double>();
        if (j.contains("gamma") && !j["gamma"].is_null()) c.gamma = j["gamma"].get<double>();
        if (j.contains("lambda_grid")) c.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
        if (j.contains("gamma_grid")) c.gamma_grid = j["gamma_grid"].get<std::vector<double>>();
        if (j.contains("seeds")) {
            const json& s = j["seeds"];
            c.split_seed = s.value("split", c.split_seed);
            c.kmeans.seed = s.value("kmeans", c.kmeans.seed);
            c.tune_seed = s.value("tuning", c.tune_seed);
        }
        c.train_fraction = j.value("train_fraction", c.train_fraction);
        c.repeats = j.value("repeats", c.repeats);
        c.ece_bins = j.value("ece_bins", c.ece_bins);
        c.workers = j.value("workers", c.workers);
        if (j.contains("solver")) {
            const json& s = j["solver"];
            c.solver.kkt_tol = s.value("kkt_tol", c.solver.kkt_tol);
            c.solver.max_iters = s.value("max_iters", c.solver.max_iters);
        }
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + ": " + e.what());
    }
    c.validate();
    return c;
}

std::string config_fingerprint(const PipelineConfig& c) {
    json j;
    j["descriptor_source"] =
        c.descriptor_source == DescriptorSource::builtin ? "builtin" : "vlfeat_import";
    j["descriptor_dir"] = c.descriptor_dir;
    j["resize"] = {c.resize_width, c.resize_height};
    j["sift"] = {{"n_octaves", c.sift.n_octaves},
                 {"scales_per_octave", c.sift.scales_per_octave},
                 {"base_sigma", c.sift.base_sigma},
                 {"contrast_threshold", c.sift.contrast_threshold},
                 {"edge_threshold", c.sift.edge_threshold},
                 {"subpixel_refine", c.sift.subpixel_refine}};
    j["codebook_size"] = c.codebook_size;
    j["kmeans"] = {{"max_iters", c.kmeans.max_iters},
                   {"tol", c.kmeans.tol},
                   {"seed", c.kmeans.seed},
                   {"n_init", c.kmeans.n_init},
                   {"chunk_count", c.multipass.chunk_count_override},
                   {"pass_mode", static_cast<int>(c.multipass.pass)}};
    j["encoder"] = to_string(c.encoder);
    j["llc"] = {{"lambda", c.llc.lambda},
                {"sigma", c.llc.sigma},
                {"knn", c.llc.knn},
                {"ridge_eps", c.llc.ridge_eps}};
    j["pooling"] = to_string(c.pooling);
    j["scheme"] = to_string(c.scheme);
    j["pi_grid_size"] = c.pi_grid_size;
    j["kernel"] = to_string(c.kernel);
    j["lambda"] = c.lambda ? json(*c.lambda) : json(nullptr);
    j["gamma"] = c.gamma ? json(*c.gamma) : json(nullptr);
    j["lambda_grid"] = c.lambda_grid;
    j["gamma_grid"] = c.gamma_grid;
    j["split_seed"] = c.split_seed;
    j["tune_seed"] = c.tune_seed;
    j["train_fraction"] = c.train_fraction;
    j["repeats"] = c.repeats;
    j["ece_bins"] = c.ece_bins;
    j["solver"] = {{"kkt_tol", c.solver.kkt_tol}, {"max_iters", c.solver.max_iters}};
    return j.dump();
}

DatasetManifest load_manifest(const std::string& path) {
    const json j = read_json_file(path, "manifest");
    DatasetManifest m;
    try {
        m.class_names = j.at("classes").get<std::vector<std::string>>();
        for (const json& e : j.at("entries")) {
            DatasetManifest::Entry entry;
            entry.path = e.at("path");
            entry.image_id = e.at("id");
            entry.label = e.at("label");
            m.entries.push_back(std::move(entry));
        }
    } catch (const json::exception& e) {
        throw DataError("manifest " + path + ": " + e.what());
    }
    if (m.k() < 2) throw DataError("manifest " + path + ": need at least 2 classes");
    for (const auto& e : m.entries)
        if (e.label < 1 || e.label > m.k())
            throw DataError("manifest " + path + ": label " + std::to_string(e.label) +
                            " for image '" + e.image_id + "' outside [1, " +
                            std::to_string(m.k()) + "]");
    return m;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    json j;
    j["classes"] = manifest.class_names;
    json entries = json::array();
    for (const auto& e : manifest.entries)
        entries.push_back({{"path", e.path}, {"id", e.image_id}, {"label", e.label}});
    j["entries"] = entries;
    std::ofstream out(path);
    if (!out) throw DataError("cannot write manifest: " + path);
    out << j.dump(2) << "\n";
}

SplitResult split(const DatasetManifest& manifest, double train_fraction, std::uint64_t seed,
                  bool stratified) {
    if (!(train_fraction > 0 && train_fraction < 1))
        throw ConfigError("train fraction must lie in (0, 1)");

    std::mt19937_64 gen(seed);
    std::vector<char> in_train(manifest.entries.size(), 0);

    auto take = [&](std::vector<std::size_t>& members) {
        if (members.size() < 2)
            throw DataError("split: a class has fewer than 2 members");
        shuffle(members, gen);
        auto n_train = static_cast<std::size_t>(
            std::lround(train_fraction * static_cast<double>(members.size())));
        n_train = std::clamp<std::size_t>(n_train, 1, members.size() - 1);
        for (std::size_t i = 0; i < n_train; ++i) in_train[members[i]] = 1;
    };

    if (stratified) {
        const int k = manifest.k();
        for (int j = 1; j <= k; ++j) {
            std::vector<std::size_t> members;
            for (std::size_t i = 0; i < manifest.entries.size(); ++i)
                if (manifest.entries[i].label == j) members.push_back(i);
            take(members);
        }
    } else {
        std::vector<std::size_t> members(manifest.entries.size());
        std::iota(members.begin(), members.end(), 0);
        take(members);
    }

    SplitResult result;
    result.train.class_names = manifest.class_names;
    result.test.class_names = manifest.class_names;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i)
        (in_train[i] ? result.train : result.test).entries.push_back(manifest.entries[i]);
    return result;
}

namespace {

struct StageState {
    json j = json::object();
    std::string path;

    void load(const std::string& state_path) {
        path = state_path;
        if (fs::exists(state_path)) j = read_json_file(state_path, "pipeline state");
    }
    bool matches(const std::string& stage, std::uint64_t upstream) const {
        return j.contains(stage) && j[stage].value("upstream", std::string{}) == to_hex(upstream);
    }
    void record(const std::string& stage, std::uint64_t upstream) {
        j[stage] = {{"upstream", to_hex(upstream)}};
        std::ofstream out(path);
        if (!out) throw DataError("cannot write pipeline state: " + path);
        out << j.dump(2) << "\n";
    }
};

std::uint64_t hash_strings(std::initializer_list<std::string> parts, std::uint64_t seed = 0xcbf29ce484222325ull) {
    std::uint64_t h = seed;
    for (const std::string& s : parts) {
        h = fnv1a(s, h);
        h = fnv1a("|", h);
    }
    return h;
}

std::string descriptor_path(const PipelineConfig& config, const std::string& out_dir,
                            const std::string& image_id) {
    const std::string dir = config.descriptor_source == DescriptorSource::vlfeat_import
                                ? config.descriptor_dir
                                : out_dir + "/descriptors";
    return dir + "/" + image_id + ".sift.txt";
}

// Extracts (or reuses) per-image descriptor files; returns the stage output
// hash over the produced files.
std::uint64_t descriptor_stage(const PipelineConfig& config, const DatasetManifest& manifest,
                               const std::string& out_dir, StageState& state) {
    std::uint64_t upstream = hash_strings({config_fingerprint(config), "descriptors"});
    for (const auto& e : manifest.entries)
        upstream = hash_strings({e.image_id, std::to_string(e.label), e.path}, upstream);

    if (config.descriptor_source == DescriptorSource::builtin) {
        for (const auto& e : manifest.entries) upstream = hash_file(e.path) ^ (upstream * 31);

        bool have_all = true;
        for (const auto& e : manifest.entries)
            if (!fs::exists(descriptor_path(config, out_dir, e.image_id))) have_all = false;

        if (!state.matches("descriptors", upstream) || !have_all) {
            fs::create_directories(out_dir + "/descriptors");
            parallel_for(manifest.entries.size(), config.workers, [&](std::size_t i) {
                const auto& e = manifest.entries[i];
                GrayImage img = read_pgm_file(e.path);
                if (img.width != config.resize_width || img.height != config.resize_height)
                    img = resize_bilinear(img, config.resize_width, config.resize_height);
                const ExtractResult res = extract_with_keypoints(img, config.sift, e.image_id);
                std::ofstream out(descriptor_path(config, out_dir, e.image_id));
                if (!out)
                    throw DataError("descriptor stage: cannot write descriptors for image '" +
                                    e.image_id + "'");
                export_vlfeat(res, out);
            });
            state.record("descriptors", upstream);
        }
    } else {
        for (const auto& e : manifest.entries) {
            const std::string p = descriptor_path(config, out_dir, e.image_id);
            if (!fs::exists(p))
                throw DataError("descriptor stage: missing descriptor file " + p + " for image '" +
                                e.image_id + "'");
        }
        state.record("descriptors", upstream);
    }

    std::uint64_t output = upstream;
    for (const auto& e : manifest.entries)
        output = hash_file(descriptor_path(config, out_dir, e.image_id)) ^ (output * 31);
    return output;
}

std::vector<DescriptorSet> load_descriptor_sets(const PipelineConfig& config,
                                                const DatasetManifest& manifest,
                                                const std::string& out_dir, int workers) {
    std::vector<DescriptorSet> sets(manifest.entries.size());
    parallel_for(manifest.entries.size(), workers, [&](std::size_t i) {
        const auto& e = manifest.entries[i];
        sets[i] = import_vlfeat_file(descriptor_path(config, out_dir, e.image_id), e.image_id);
    });
    return sets;
}

FeatureMatrix featurize_manifest(const PipelineConfig& config, const DatasetManifest& manifest,
                                 const std::string& out_dir, const Codebook& book,
                                 std::uint64_t codebook_hash) {
    const std::vector<DescriptorSet> sets =
        load_descriptor_sets(config, manifest, out_dir, config.workers);
    const CodeSource source = config.encoder == EncoderKind::vq ? CodeSource::vq : CodeSource::llc;

    FeatureMatrix features;
    features.m = book.size();
    features.pooling_id = config.pooling;
    features.codebook_hash = codebook_hash;
    features.rows.resize(sets.size());
    parallel_for(sets.size(), config.workers, [&](std::size_t i) {
        const CodeMatrix codes = encode_image(sets[i], book, config.encoder, config.llc);
        ImageFeature f = featurize(codes, config.pooling, source);
        f.image_id = manifest.entries[i].image_id;
        f.label = manifest.entries[i].label;
        features.rows[i] = std::move(f);
    });
    return features;
}

void features_to_dataset(const FeatureMatrix& features, Eigen::MatrixXd& x, std::vector<int>& y) {
    x.resize(static_cast<Eigen::Index>(features.rows.size()), features.m);
    y.resize(features.rows.size());
    for (std::size_t i = 0; i < features.rows.size(); ++i) {
        x.row(static_cast<Eigen::Index>(i)) = features.rows[i].values;
        y[i] = features.rows[i].label;
    }
}

std::vector<EvalRecord> score_features(const MulticlassModel& model,
                                       const FeatureMatrix& features, int workers) {
    std::vector<EvalRecord> records(features.rows.size());
    parallel_for(features.rows.size(), workers, [&](std::size_t i) {
        const ProbabilityEstimate est = predict_proba(model, features.rows[i]);
        EvalRecord rec;
        rec.true_label = features.rows[i].label;
        rec.probs = est.probs;
        rec.predicted_argmax = classify(est, ClassifyRule::argmax);
        rec.predicted_maxvote =
            est.pairwise_table ? classify(est, ClassifyRule::maxvote) : 0;
        records[i] = std::move(rec);
    });
    return records;
}

struct RepeatStats {
    std::vector<double> te1, te2, precision, recall, f1, auc, ece_vals;
};

json summarize(const std::vector<double>& values) {
    if (values.empty()) return nullptr;
    double mean = 0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0;
    for (double v : values) var += (v - mean) * (v - mean);
    const double stderr_val =
        values.size() > 1
            ? std::sqrt(var / static_cast<double>(values.size() - 1)) /
                  std::sqrt(static_cast<double>(values.size()))
            : 0.0;
    return {{"mean", mean}, {"stderr", stderr_val}, {"values", values}};
}

}  // namespace

std::vector<Prediction> predict_features(const MulticlassModel& model,
                                         const FeatureMatrix& features) {
    std::vector<Prediction> out(features.rows.size());
    for (std::size_t i = 0; i < features.rows.size(); ++i) {
        const ProbabilityEstimate est = predict_proba(model, features.rows[i]);
        out[i].image_id = features.rows[i].image_id;
        out[i].probs = est.probs;
        out[i].argmax = classify(est, ClassifyRule::argmax);
        out[i].maxvote = est.pairwise_table ? classify(est, ClassifyRule::maxvote) : 0;
    }
    return out;
}

void write_predictions_csv(const std::vector<Prediction>& predictions, int k,
                           const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write predictions: " + path);
    out << "image_id";
    for (int j = 1; j <= k; ++j) out << ",p_" << j;
    out << ",argmax,maxvote\n";
    char buf[32];
    for (const Prediction& p : predictions) {
        out << p.image_id;
        for (Eigen::Index j = 0; j < p.probs.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", p.probs(j));
            out << "," << buf;
        }
        out << "," << p.argmax << ",";
        if (p.maxvote >= 1) out << p.maxvote;
        out << "\n";
    }
}

PipelineResult run_pipeline(const PipelineConfig& config, const DatasetManifest& manifest,
                            const std::string& out_dir, PipelineStage run_until) {
    config.validate();
    fs::create_directories(out_dir);
    StageState state;
    state.load(out_dir + "/pipeline_state.json");
    const std::string fingerprint = config_fingerprint(config);

    // Split.
    const SplitResult parts = split(manifest, config.train_fraction, config.split_seed, true);
    save_manifest(parts.train, out_dir + "/split_train.json");
    save_manifest(parts.test, out_dir + "/split_test.json");

    // Descriptors for every image (train and test share the stage).
    DatasetManifest all;
    all.class_names = manifest.class_names;
    all.entries = parts.train.entries;
    all.entries.insert(all.entries.end(), parts.test.entries.begin(), parts.test.entries.end());
    const std::uint64_t desc_hash = descriptor_stage(config, all, out_dir, state);

    PipelineResult result;
    if (run_until == PipelineStage::descriptors) return result;

    // Codebook from the training pool only.
    result.codebook_path = out_dir + "/codebook.sbwc";
    {
        std::uint64_t upstream = hash_strings({fingerprint, "codebook", to_hex(desc_hash)});
        for (const auto& e : parts.train.entries) upstream = fnv1a(e.image_id, upstream);
        if (!state.matches("codebook", upstream) || !fs::exists(result.codebook_path)) {
            const std::vector<DescriptorSet> sets =
                load_descriptor_sets(config, parts.train, out_dir, config.workers);
            const Pool pool = build_pool(sets);
            const Codebook book = multipass_kmeans(pool, config.codebook_size, config.kmeans,
                                                   config.multipass, config.workers);
            save_codebook(book, result.codebook_path);
            export_codebook_csv(book, out_dir + "/codebook.csv");
            state.record("codebook", upstream);
        }
    }
    if (run_until == PipelineStage::codebook) return result;
    const Codebook book = load_codebook(result.codebook_path);
    const std::uint64_t codebook_hash = hash_file(result.codebook_path);

    // Feature matrices.
    result.train_features_path = out_dir + "/train_features.sbwf";
    result.test_features_path = out_dir + "/test_features.sbwf";
    for (const bool is_train : {true, false}) {
        const DatasetManifest& part = is_train ? parts.train : parts.test;
        const std::string stage = is_train ? "train_features" : "test_features";
        const std::string path = is_train ? result.train_features_path : result.test_features_path;
        std::uint64_t upstream =
            hash_strings({fingerprint, stage, to_hex(desc_hash), to_hex(codebook_hash)});
        for (const auto& e : part.entries) upstream = fnv1a(e.image_id, upstream);
        if (!state.matches(stage, upstream) || !fs::exists(path)) {
            const FeatureMatrix features =
                featurize_manifest(config, part, out_dir, book, codebook_hash);
            save_features(features, path);
            export_features_csv(features, out_dir + "/" + stage + ".csv");
            state.record(stage, upstream);
        }
    }
    if (run_until == PipelineStage::features) return result;
    const FeatureMatrix train_features = load_features(result.train_features_path);
    const FeatureMatrix test_features = load_features(result.test_features_path);
    if (train_features.codebook_hash != codebook_hash ||
        test_features.codebook_hash != codebook_hash)
        throw DataError("feature matrices reference a different codebook");

    // Model.
    result.model_path = out_dir + "/model.sbwm";
    const std::uint64_t train_features_hash = hash_file(result.train_features_path);
    {
        const std::uint64_t upstream =
            hash_strings({fingerprint, "model", to_hex(train_features_hash)});
        if (!state.matches("model", upstream) || !fs::exists(result.model_path)) {
            Eigen::MatrixXd x;
            std::vector<int> y;
            features_to_dataset(train_features, x, y);

            double lambda = config.lambda.value_or(0);
            double gamma = config.gamma.value_or(0);
            if (!config.lambda || (!config.gamma && config.kernel == KernelSpec::Kind::rbf)) {
                const std::vector<double> lambda_grid =
                    config.lambda ? std::vector<double>{*config.lambda}
                    : (config.lambda_grid.empty() ? default_lambda_grid() : config.lambda_grid);
                std::vector<double> gamma_grid;
                if (config.kernel == KernelSpec::Kind::linear)
                    gamma_grid = {1.0};
                else if (config.gamma)
                    gamma_grid = {*config.gamma};
                else
                    gamma_grid = config.gamma_grid.empty() ? default_gamma_grid(x) : config.gamma_grid;

                const TuneResult tuned = tune_egkl(
                    x, y, config.scheme, lambda_grid, gamma_grid, config.tune_seed,
                    uniform_pi_grid(config.pi_grid_size), config.kernel, config.solver,
                    config.workers);
                lambda = tuned.lambda;
                gamma = tuned.gamma;
                json tj;
                tj["selected"] = {{"lambda", tuned.lambda}, {"gamma", tuned.gamma}, {"egkl", tuned.egkl}};
                json pts = json::array();
                for (const TunePoint& p : tuned.report)
                    pts.push_back({{"lambda", p.lambda}, {"gamma", p.gamma}, {"egkl", p.egkl}});
                tj["grid"] = pts;
                std::ofstream tout(out_dir + "/tuning.json");
                tout << tj.dump(2) << "\n";
            }

            KernelSpec kernel;
            kernel.kind = config.kernel;
            kernel.gamma = config.kernel == KernelSpec::Kind::rbf ? gamma : 1.0;
            MulticlassModel model =
                fit_multiclass(x, y, config.scheme, uniform_pi_grid(config.pi_grid_size), lambda,
                               kernel, config.solver, config.workers);
            model.pooling_id = train_features.pooling_id;
            model.features_hash = content_hash(train_features);
            save_model(model, result.model_path);
            state.record("model", upstream);
        }
    }
    if (run_until == PipelineStage::model) return result;
    const MulticlassModel model = load_model(result.model_path, train_features);

    // Evaluation.
    result.report_path = out_dir + "/evaluation.json";
    const std::vector<EvalRecord> records = score_features(model, test_features, config.workers);
    result.report = evaluate(records, config.ece_bins);

    json report_json = json::parse(report_to_json(result.report));
    if (config.repeats > 0) {
        // Re-run the train/tune split protocol: each repeat tunes on half of
        // the training features, fits at the selected point, and scores the
        // fixed test set; means and standard errors are reported per metric.
        Eigen::MatrixXd x;
        std::vector<int> y;
        features_to_dataset(train_features, x, y);
        const std::vector<double> lambda_grid =
            config.lambda ? std::vector<double>{*config.lambda}
            : (config.lambda_grid.empty() ? default_lambda_grid() : config.lambda_grid);
        std::vector<double> gamma_grid;
        if (config.kernel == KernelSpec::Kind::linear)
            gamma_grid = {1.0};
        else if (config.gamma)
            gamma_grid = {*config.gamma};
        else
            gamma_grid = config.gamma_grid.empty() ? default_gamma_grid(x) : config.gamma_grid;

        RepeatStats stats;
        for (int r = 0; r < config.repeats; ++r) {
            const std::uint64_t seed = config.tune_seed + 7717ull * static_cast<std::uint64_t>(r + 1);
            const TuneResult tuned =
                tune_egkl(x, y, config.scheme, lambda_grid, gamma_grid, seed,
                          uniform_pi_grid(config.pi_grid_size), config.kernel, config.solver,
                          config.workers);

            // Refit on the same train half used during tuning.
            std::mt19937_64 gen(seed);
            std::vector<Eigen::Index> half;
            for (int j = 1; j <= model.k; ++j) {
                std::vector<Eigen::Index> members;
                for (std::size_t i = 0; i < y.size(); ++i)
                    if (y[i] == j) members.push_back(static_cast<Eigen::Index>(i));
                shuffle(members, gen);
                for (std::size_t i = 0; i < members.size() / 2; ++i) half.push_back(members[i]);
            }
            std::sort(half.begin(), half.end());
            Eigen::MatrixXd hx(static_cast<Eigen::Index>(half.size()), x.cols());
            std::vector<int> hy(half.size());
            for (std::size_t i = 0; i < half.size(); ++i) {
                hx.row(static_cast<Eigen::Index>(i)) = x.row(half[i]);
                hy[i] = y[static_cast<std::size_t>(half[i])];
            }
            KernelSpec kernel;
            kernel.kind = config.kernel;
            kernel.gamma = config.kernel == KernelSpec::Kind::rbf ? tuned.gamma : 1.0;
            MulticlassModel repeat_model =
                fit_multiclass(hx, hy, config.scheme, uniform_pi_grid(config.pi_grid_size),
                               tuned.lambda, kernel, config.solver, config.workers);
            repeat_model.pooling_id = train_features.pooling_id;

            const std::vector<EvalRecord> rec = score_features(repeat_model, test_features,
                                                               config.workers);
            const EvaluationReport rep = evaluate(rec, config.ece_bins);
            stats.te1.push_back(rep.te1);
            if (rep.te2 >= 0) stats.te2.push_back(rep.te2);
            stats.precision.push_back(rep.prf.precision);
            stats.recall.push_back(rep.prf.recall);
            stats.f1.push_back(rep.prf.f1);
            stats.auc.push_back(rep.auc);
            stats.ece_vals.push_back(rep.calibration.ece);
        }
        report_json["repeated"] = {{"repeats", config.repeats},
                                   {"te1", summarize(stats.te1)},
                                   {"te2", summarize(stats.te2)},
                                   {"macro_precision", summarize(stats.precision)},
                                   {"macro_recall", summarize(stats.recall)},
                                   {"macro_f1", summarize(stats.f1)},
                                   {"auc", summarize(stats.auc)},
                                   {"ece", summarize(stats.ece_vals)}};
    }

    {
        std::ofstream out(result.report_path);
        if (!out) throw DataError("cannot write report: " + result.report_path);
        out << report_json.dump(2) << "\n";
    }
    write_reliability_csv(result.report.calibration, out_dir + "/reliability.csv");
    write_predictions_csv(predict_features(model, test_features), model.k,
                          out_dir + "/predictions.csv");
    return result;
}

}  // namespace sibow
