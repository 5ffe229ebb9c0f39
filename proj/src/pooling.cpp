#include "sibow/pooling.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "sibow/errors.hpp"
#include "sibow/serialize.hpp"

namespace sibow {

std::string to_string(PoolingId id) {
    std::string s = id.pool == PoolMode::sum ? "sum-" : "max-";
    switch (id.norm) {
        case NormMode::sum: return s + "sum";
        case NormMode::l2: return s + "L2";
        case NormMode::ltf: return s + "LTF";
    }
    return s + "?";
}

PoolingId parse_pooling_id(const std::string& name) {
    PoolingId id;
    const auto dash = name.find('-');
    if (dash != std::string::npos) {
        const std::string pool = name.substr(0, dash);
        const std::string norm = name.substr(dash + 1);
        if (pool == "sum" || pool == "max") {
            id.pool = pool == "sum" ? PoolMode::sum : PoolMode::max;
            if (norm == "sum") {
                id.norm = NormMode::sum;
                return id;
            }
            if (norm == "L2" || norm == "l2") {
                id.norm = NormMode::l2;
                return id;
            }
            if (norm == "LTF" || norm == "ltf") {
                id.norm = NormMode::ltf;
                return id;
            }
        }
    }
    throw ConfigError("unknown pooling id '" + name +
                      "' (want {sum,max}-{sum,L2,LTF})");
}

std::string to_string(CodeSource source) { return source == CodeSource::vq ? "vq" : "llc"; }

CodeSource parse_code_source(const std::string& name) {
    if (name == "vq") return CodeSource::vq;
    if (name == "llc") return CodeSource::llc;
    throw ConfigError("unknown code source '" + name + "'");
}

PooledVector pool(const CodeMatrix& codes, PoolMode mode, CodeSource source) {
    PooledVector out;
    out.source = source;
    out.values = Eigen::VectorXd::Zero(codes.m);
    if (codes.codes.empty()) {
        out.degenerate = true;
        return out;
    }

    if (mode == PoolMode::sum) {
        for (const VisualCode& code : codes.codes)
            for (std::size_t i = 0; i < code.indices.size(); ++i)
                out.values(code.indices[i]) += code.weights[i];
        return out;
    }

    // Max pooling: positions absent from a row count as zero, so a column's
    // maximum includes 0 unless every row holds that index explicitly.
    const auto n_rows = codes.codes.size();
    Eigen::VectorXd best = Eigen::VectorXd::Constant(codes.m, -std::numeric_limits<double>::infinity());
    std::vector<std::size_t> seen(static_cast<std::size_t>(codes.m), 0);
    for (const VisualCode& code : codes.codes) {
        for (std::size_t i = 0; i < code.indices.size(); ++i) {
            const int j = code.indices[i];
            best(j) = std::max(best(j), code.weights[i]);
            ++seen[static_cast<std::size_t>(j)];
        }
    }
    for (int j = 0; j < codes.m; ++j) {
        if (seen[static_cast<std::size_t>(j)] == 0)
            out.values(j) = 0.0;
        else if (seen[static_cast<std::size_t>(j)] < n_rows)
            out.values(j) = std::max(best(j), 0.0);
        else
            out.values(j) = best(j);
    }
    return out;
}

namespace {

// 1 + log10 of positive entries, 0 elsewhere.
void ltf_inplace(Eigen::VectorXd& v) {
    for (Eigen::Index j = 0; j < v.size(); ++j)
        v(j) = v(j) > 0 ? 1.0 + std::log10(v(j)) : 0.0;
}

}  // namespace

ImageFeature normalize(const PooledVector& pooled, NormMode mode) {
    ImageFeature feat;
    feat.values = pooled.values;
    feat.degenerate = pooled.degenerate;
    feat.pooling_id.norm = mode;

    switch (mode) {
        case NormMode::sum: {
            const double total = feat.values.sum();
            if (total != 0.0)
                feat.values /= total;
            else
                feat.degenerate = true;
            break;
        }
        case NormMode::l2: {
            const double norm = feat.values.norm();
            if (norm != 0.0)
                feat.values /= norm;
            else
                feat.degenerate = true;
            break;
        }
        case NormMode::ltf: {
            if (pooled.source == CodeSource::vq) {
                ltf_inplace(feat.values);
            } else {
                // Negative term frequencies are dropped, then the smallest
                // positive entry is rescaled to 1 before the log weighting.
                double min_pos = std::numeric_limits<double>::infinity();
                for (Eigen::Index j = 0; j < feat.values.size(); ++j) {
                    if (feat.values(j) < 0) feat.values(j) = 0.0;
                    if (feat.values(j) > 0) min_pos = std::min(min_pos, feat.values(j));
                }
                if (std::isinf(min_pos)) {
                    feat.values.setZero();
                    feat.degenerate = true;
                } else {
                    feat.values /= min_pos;
                    ltf_inplace(feat.values);
                }
            }
            break;
        }
    }
    return feat;
}

ImageFeature featurize(const CodeMatrix& codes, PoolingId id, CodeSource source) {
    ImageFeature feat = normalize(pool(codes, id.pool, source), id.norm);
    feat.pooling_id = id;
    return feat;
}

void save_features(const FeatureMatrix& features, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write features: " + path);
    BinaryWriter w(out);
    w.magic("SBWF");
    w.u32(1);  // version
    w.u32(static_cast<std::uint32_t>(features.m));
    w.str(to_string(features.pooling_id));
    w.u64(features.codebook_hash);
    w.u64(features.rows.size());
    for (const ImageFeature& f : features.rows) {
        w.str(f.image_id);
        w.i32(f.label);
        w.u8(f.degenerate ? 1 : 0);
        for (Eigen::Index j = 0; j < f.values.size(); ++j) w.f64(f.values(j));
    }
}

FeatureMatrix load_features(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open features: " + path);
    BinaryReader r(in, "features " + path);
    r.expect_magic("SBWF");
    if (r.u32() != 1) throw DataError("features " + path + ": unsupported version");
    FeatureMatrix features;
    features.m = static_cast<int>(r.u32());
    features.pooling_id = parse_pooling_id(r.str());
    features.codebook_hash = r.u64();
    const std::uint64_t n = r.u64();
    features.rows.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        ImageFeature f;
        f.image_id = r.str();
        f.label = r.i32();
        f.degenerate = r.u8() != 0;
        f.pooling_id = features.pooling_id;
        f.values.resize(features.m);
        for (int j = 0; j < features.m; ++j) f.values(j) = r.f64();
        features.rows.push_back(std::move(f));
    }
    return features;
}

std::uint64_t content_hash(const FeatureMatrix& features) {
    std::uint64_t h = fnv1a(to_string(features.pooling_id));
    const std::uint64_t m = static_cast<std::uint64_t>(features.m);
    h = fnv1a(&m, sizeof m, h);
    for (const ImageFeature& f : features.rows) {
        h = fnv1a(f.image_id, h);
        const std::int32_t label = f.label;
        h = fnv1a(&label, sizeof label, h);
        const std::uint8_t flag = f.degenerate ? 1 : 0;
        h = fnv1a(&flag, sizeof flag, h);
        for (Eigen::Index j = 0; j < f.values.size(); ++j) {
            const double v = f.values(j);
            h = fnv1a(&v, sizeof v, h);
        }
    }
    return h;
}

void export_features_csv(const FeatureMatrix& features, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write features csv: " + path);
    out << "image_id,label";
    for (int j = 0; j < features.m; ++j) out << ",q_" << j;
    out << "\n";
    char buf[32];
    for (const ImageFeature& f : features.rows) {
        out << f.image_id << "," << f.label;
        for (Eigen::Index j = 0; j < f.values.size(); ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", f.values(j));
            out << "," << buf;
        }
        out << "\n";
    }
}

}  // namespace sibow
