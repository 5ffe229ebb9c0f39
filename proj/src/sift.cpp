#include "sibow/sift.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sibow/errors.hpp"

namespace sibow {

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;
constexpr int kOriHistBins = 36;
constexpr double kOriPeakRatio = 0.8;
constexpr int kDescWidth = 4;   // 4x4 spatial grid
constexpr int kDescBins = 8;    // orientation bins per cell
constexpr double kDescClamp = 0.2;
constexpr double kAssumedInputBlur = 0.5;

std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

Raster downsample_half(const Raster& src) {
    Raster out((src.w + 1) / 2, (src.h + 1) / 2);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            out.at(x, y) = src.at(x * 2, y * 2);
    return out;
}

double wrap_angle(double a) {
    a = std::fmod(a, kTwoPi);
    if (a < 0) a += kTwoPi;
    return a;
}

struct GradSample {
    double mag;
    double angle;
};

GradSample gradient_at(const Raster& plane, int x, int y) {
    const double dx = 0.5 * (plane.at_clamped(x + 1, y) - plane.at_clamped(x - 1, y));
    const double dy = 0.5 * (plane.at_clamped(x, y + 1) - plane.at_clamped(x, y - 1));
    return {std::sqrt(dx * dx + dy * dy), wrap_angle(std::atan2(dy, dx))};
}

// 3x3 circular smoothing of the orientation histogram.
void smooth_histogram(std::vector<double>& h) {
    std::vector<double> tmp(h.size());
    const int n = static_cast<int>(h.size());
    for (int pass = 0; pass < 2; ++pass) {
        for (int i = 0; i < n; ++i) {
            const double prev = h[static_cast<std::size_t>((i + n - 1) % n)];
            const double next = h[static_cast<std::size_t>((i + 1) % n)];
            tmp[static_cast<std::size_t>(i)] = (prev + h[static_cast<std::size_t>(i)] + next) / 3.0;
        }
        h = tmp;
    }
}

}  // namespace

double Descriptor::norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return std::sqrt(s);
}

double ScaleSpace::sigma_at(int octave, double layer) const {
    const double per = static_cast<double>(params.scales_per_octave);
    return octaves[static_cast<std::size_t>(octave)].downscale * params.base_sigma *
           std::pow(2.0, layer / per);
}

Raster gaussian_blur(const Raster& src, double sigma) {
    if (sigma <= 0) return src;
    const std::vector<double> k = gaussian_kernel(sigma);
    const int radius = (static_cast<int>(k.size()) - 1) / 2;

    Raster tmp(src.w, src.h);
    for (int y = 0; y < src.h; ++y) {
        for (int x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * src.at_clamped(x + i, y);
            tmp.at(x, y) = acc;
        }
    }
    Raster out(src.w, src.h);
    for (int y = 0; y < src.h; ++y) {
        for (int x = 0; x < src.w; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += k[static_cast<std::size_t>(i + radius)] * tmp.at_clamped(x, y + i);
            out.at(x, y) = acc;
        }
    }
    return out;
}

ScaleSpace build_scale_space(const GrayImage& img, const SiftParams& params) {
    if (img.width < 16 || img.height < 16)
        throw DataError("image too small for scale space: " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " (minimum 16x16)");
    if (params.n_octaves < 1 || params.scales_per_octave < 1 || params.base_sigma <= 0)
        throw ConfigError("invalid sift parameters");

    // Truncate the octave count so no octave drops below 8x8.
    int max_octaves = 1;
    {
        int w = img.width, h = img.height;
        while ((w + 1) / 2 >= 8 && (h + 1) / 2 >= 8 && max_octaves < 16) {
            w = (w + 1) / 2;
            h = (h + 1) / 2;
            ++max_octaves;
        }
    }

    ScaleSpace space;
    space.params = params;
    space.base_width = img.width;
    space.base_height = img.height;
    const int s = params.scales_per_octave;
    const int n_octaves = std::min(params.n_octaves, max_octaves);
    const int n_gauss = s + 3;

    space.layer_sigmas.resize(static_cast<std::size_t>(n_gauss));
    for (int i = 0; i < n_gauss; ++i)
        space.layer_sigmas[static_cast<std::size_t>(i)] =
            params.base_sigma * std::pow(2.0, static_cast<double>(i) / s);

    Raster base(img.width, img.height);
    std::copy(img.pixels.begin(), img.pixels.end(), base.v.begin());

    for (int o = 0; o < n_octaves; ++o) {
        Octave oct;
        oct.downscale = std::pow(2.0, o);
        if (o == 0) {
            const double delta =
                std::sqrt(std::max(params.base_sigma * params.base_sigma -
                                       kAssumedInputBlur * kAssumedInputBlur,
                                   1e-12));
            oct.gauss.push_back(gaussian_blur(base, delta));
        } else {
            // gauss[s] of the previous octave carries blur 2*base_sigma, which
            // becomes base_sigma after halving.
            oct.gauss.push_back(downsample_half(space.octaves.back().gauss[static_cast<std::size_t>(s)]));
        }
        oct.width = oct.gauss[0].w;
        oct.height = oct.gauss[0].h;
        for (int i = 1; i < n_gauss; ++i) {
            const double s_prev = space.layer_sigmas[static_cast<std::size_t>(i - 1)];
            const double s_cur = space.layer_sigmas[static_cast<std::size_t>(i)];
            const double delta = std::sqrt(s_cur * s_cur - s_prev * s_prev);
            oct.gauss.push_back(gaussian_blur(oct.gauss.back(), delta));
        }
        oct.dog.reserve(static_cast<std::size_t>(n_gauss - 1));
        for (int i = 0; i + 1 < n_gauss; ++i) {
            Raster d(oct.width, oct.height);
            const Raster& a = oct.gauss[static_cast<std::size_t>(i)];
            const Raster& b = oct.gauss[static_cast<std::size_t>(i + 1)];
            for (std::size_t p = 0; p < d.v.size(); ++p) d.v[p] = b.v[p] - a.v[p];
            oct.dog.push_back(std::move(d));
        }
        space.octaves.push_back(std::move(oct));
    }
    return space;
}

namespace {

bool is_extremum(const Octave& oct, int layer, int x, int y) {
    const double v = oct.dog[static_cast<std::size_t>(layer)].at(x, y);
    bool is_max = true, is_min = true;
    for (int dl = -1; dl <= 1; ++dl) {
        const Raster& plane = oct.dog[static_cast<std::size_t>(layer + dl)];
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                if (dl == 0 && dx == 0 && dy == 0) continue;
                const double n = plane.at(x + dx, y + dy);
                if (n >= v) is_max = false;
                if (n <= v) is_min = false;
                if (!is_max && !is_min) return false;
            }
        }
    }
    return is_max || is_min;
}

struct Refined {
    double ox = 0, oy = 0, os = 0;  // sub-pixel offsets
    double value = 0;               // interpolated DoG value
    bool ok = false;
};

// Quadratic fit of the DoG around (x, y, layer); offsets beyond half a sample
// step move the probe to the neighboring sample (up to 3 relocations).
Refined refine_extremum(const Octave& oct, int s, int& layer, int& x, int& y) {
    Refined r;
    for (int attempt = 0; attempt < 3; ++attempt) {
        const Raster& d0 = oct.dog[static_cast<std::size_t>(layer - 1)];
        const Raster& d1 = oct.dog[static_cast<std::size_t>(layer)];
        const Raster& d2 = oct.dog[static_cast<std::size_t>(layer + 1)];

        const double gx = 0.5 * (d1.at(x + 1, y) - d1.at(x - 1, y));
        const double gy = 0.5 * (d1.at(x, y + 1) - d1.at(x, y - 1));
        const double gs = 0.5 * (d2.at(x, y) - d0.at(x, y));

        const double v = d1.at(x, y);
        const double hxx = d1.at(x + 1, y) + d1.at(x - 1, y) - 2 * v;
        const double hyy = d1.at(x, y + 1) + d1.at(x, y - 1) - 2 * v;
        const double hss = d2.at(x, y) + d0.at(x, y) - 2 * v;
        const double hxy = 0.25 * (d1.at(x + 1, y + 1) - d1.at(x - 1, y + 1) -
                                   d1.at(x + 1, y - 1) + d1.at(x - 1, y - 1));
        const double hxs = 0.25 * (d2.at(x + 1, y) - d2.at(x - 1, y) -
                                   d0.at(x + 1, y) + d0.at(x - 1, y));
        const double hys = 0.25 * (d2.at(x, y + 1) - d2.at(x, y - 1) -
                                   d0.at(x, y + 1) + d0.at(x, y - 1));

        // Solve H * offset = -g with explicit 3x3 cofactors.
        const double det = hxx * (hyy * hss - hys * hys) - hxy * (hxy * hss - hys * hxs) +
                           hxs * (hxy * hys - hyy * hxs);
        if (std::abs(det) < 1e-30) return r;
        const double inv = 1.0 / det;
        const double ox = -inv * ((hyy * hss - hys * hys) * gx + (hxs * hys - hxy * hss) * gy +
                                  (hxy * hys - hxs * hyy) * gs);
        const double oy = -inv * ((hys * hxs - hxy * hss) * gx + (hxx * hss - hxs * hxs) * gy +
                                  (hxy * hxs - hxx * hys) * gs);
        const double os = -inv * ((hxy * hys - hyy * hxs) * gx + (hxy * hxs - hxx * hys) * gy +
                                  (hxx * hyy - hxy * hxy) * gs);

        if (std::abs(ox) <= 0.5 && std::abs(oy) <= 0.5 && std::abs(os) <= 0.5) {
            r.ox = ox;
            r.oy = oy;
            r.os = os;
            r.value = v + 0.5 * (gx * ox + gy * oy + gs * os);
            r.ok = true;
            return r;
        }
        x += ox > 0.5 ? 1 : (ox < -0.5 ? -1 : 0);
        y += oy > 0.5 ? 1 : (oy < -0.5 ? -1 : 0);
        layer += os > 0.5 ? 1 : (os < -0.5 ? -1 : 0);
        if (layer < 1 || layer > s || x < 1 || x >= oct.width - 1 || y < 1 || y >= oct.height - 1)
            return r;
    }
    return r;
}

bool passes_edge_test(const Raster& plane, int x, int y, double edge_threshold) {
    const double v = plane.at(x, y);
    const double dxx = plane.at(x + 1, y) + plane.at(x - 1, y) - 2 * v;
    const double dyy = plane.at(x, y + 1) + plane.at(x, y - 1) - 2 * v;
    const double dxy = 0.25 * (plane.at(x + 1, y + 1) - plane.at(x - 1, y + 1) -
                               plane.at(x + 1, y - 1) + plane.at(x - 1, y - 1));
    const double tr = dxx + dyy;
    const double det = dxx * dyy - dxy * dxy;
    if (det <= 0) return false;
    const double r = edge_threshold;
    return tr * tr * r < (r + 1) * (r + 1) * det;
}

// Dominant gradient orientations around (x, y) on one gauss plane. Peaks
// within 80% of the histogram maximum each produce an orientation.
std::vector<double> dominant_orientations(const Raster& plane, double x, double y,
                                          double sigma_rel) {
    const double win_sigma = 1.5 * sigma_rel;
    const int radius = std::max(1, static_cast<int>(std::lround(3.0 * win_sigma)));
    const int cx = static_cast<int>(std::lround(x));
    const int cy = static_cast<int>(std::lround(y));

    std::vector<double> hist(kOriHistBins, 0.0);
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            const int px = cx + dx;
            const int py = cy + dy;
            if (px < 1 || px >= plane.w - 1 || py < 1 || py >= plane.h - 1) continue;
            const GradSample g = gradient_at(plane, px, py);
            const double w = std::exp(-(static_cast<double>(dx) * dx + static_cast<double>(dy) * dy) /
                                      (2.0 * win_sigma * win_sigma));
            int bin = static_cast<int>(std::floor(g.angle / kTwoPi * kOriHistBins));
            if (bin >= kOriHistBins) bin = 0;
            hist[static_cast<std::size_t>(bin)] += w * g.mag;
        }
    }
    smooth_histogram(hist);

    const double peak = *std::max_element(hist.begin(), hist.end());
    std::vector<double> result;
    if (peak <= 0) return result;
    for (int i = 0; i < kOriHistBins; ++i) {
        const double prev = hist[static_cast<std::size_t>((i + kOriHistBins - 1) % kOriHistBins)];
        const double next = hist[static_cast<std::size_t>((i + 1) % kOriHistBins)];
        const double cur = hist[static_cast<std::size_t>(i)];
        if (cur <= prev || cur <= next || cur < kOriPeakRatio * peak) continue;
        // Parabolic peak interpolation.
        const double denom = prev - 2 * cur + next;
        const double shift = denom == 0 ? 0 : 0.5 * (prev - next) / denom;
        result.push_back(wrap_angle((i + 0.5 + shift) * kTwoPi / kOriHistBins));
    }
    return result;
}

}  // namespace

std::vector<Keypoint> detect_keypoints(const ScaleSpace& space, const SiftParams& params) {
    std::vector<Keypoint> keypoints;
    const int s = params.scales_per_octave;
    const double pre_threshold =
        params.subpixel_refine ? 0.8 * params.contrast_threshold : params.contrast_threshold;

    for (std::size_t oi = 0; oi < space.octaves.size(); ++oi) {
        const Octave& oct = space.octaves[oi];
        for (int layer = 1; layer <= s; ++layer) {
            const Raster& plane = oct.dog[static_cast<std::size_t>(layer)];
            for (int y = 1; y < oct.height - 1; ++y) {
                for (int x = 1; x < oct.width - 1; ++x) {
                    if (std::abs(plane.at(x, y)) < pre_threshold) continue;
                    if (!is_extremum(oct, layer, x, y)) continue;

                    int rl = layer, rx = x, ry = y;
                    double fx = x, fy = y, fl = layer;
                    if (params.subpixel_refine) {
                        Refined ref = refine_extremum(oct, s, rl, rx, ry);
                        if (!ref.ok) continue;
                        if (std::abs(ref.value) < params.contrast_threshold) continue;
                        fx = rx + ref.ox;
                        fy = ry + ref.oy;
                        fl = rl + ref.os;
                    }
                    if (!passes_edge_test(oct.dog[static_cast<std::size_t>(rl)], rx, ry,
                                          params.edge_threshold))
                        continue;

                    const double sigma_rel =
                        params.base_sigma * std::pow(2.0, fl / static_cast<double>(s));
                    int grad_layer = static_cast<int>(std::lround(fl));
                    grad_layer = std::clamp(grad_layer, 0, s + 2);
                    const std::vector<double> orientations = dominant_orientations(
                        oct.gauss[static_cast<std::size_t>(grad_layer)], fx, fy, sigma_rel);

                    for (double theta : orientations) {
                        Keypoint kp;
                        kp.x = fx * oct.downscale;
                        kp.y = fy * oct.downscale;
                        kp.scale = sigma_rel * oct.downscale;
                        kp.orientation = theta;
                        keypoints.push_back(kp);
                    }
                }
            }
        }
    }
    return keypoints;
}

std::optional<Descriptor> compute_descriptor(const ScaleSpace& space, const Keypoint& kp) {
    if (kp.scale <= 0) throw DataError("keypoint with non-positive scale");
    const int s = space.params.scales_per_octave;

    // Locate the octave whose sigma ladder brackets the keypoint scale.
    int octave = static_cast<int>(std::floor(std::log2(kp.scale / space.params.base_sigma)));
    octave = std::clamp(octave, 0, static_cast<int>(space.octaves.size()) - 1);
    const Octave& oct = space.octaves[static_cast<std::size_t>(octave)];
    const double sigma_rel = kp.scale / oct.downscale;
    double layer = static_cast<double>(s) * std::log2(sigma_rel / space.params.base_sigma);
    int grad_layer = static_cast<int>(std::lround(layer));
    grad_layer = std::clamp(grad_layer, 0, s + 2);
    const Raster& plane = oct.gauss[static_cast<std::size_t>(grad_layer)];

    const double x = kp.x / oct.downscale;
    const double y = kp.y / oct.downscale;
    const double bin_width = 3.0 * sigma_rel;
    const double radius = bin_width * std::sqrt(2.0) * (kDescWidth + 1) * 0.5;
    const int r = static_cast<int>(std::ceil(radius));

    // The sample grid plus the 1-px gradient border must fit inside the plane.
    if (x - r < 1 || x + r >= plane.w - 1 || y - r < 1 || y + r >= plane.h - 1)
        return std::nullopt;

    const double cos_t = std::cos(kp.orientation);
    const double sin_t = std::sin(kp.orientation);
    std::array<double, kDescriptorDim> acc{};

    for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
            // Rotate into the keypoint frame, measured in descriptor cells.
            const double u = (cos_t * dx + sin_t * dy) / bin_width;
            const double v = (-sin_t * dx + cos_t * dy) / bin_width;
            const double rbin = v + kDescWidth / 2.0 - 0.5;
            const double cbin = u + kDescWidth / 2.0 - 0.5;
            if (rbin <= -1 || rbin >= kDescWidth || cbin <= -1 || cbin >= kDescWidth) continue;

            const int px = static_cast<int>(std::lround(x)) + dx;
            const int py = static_cast<int>(std::lround(y)) + dy;
            const GradSample g = gradient_at(plane, px, py);
            const double angle = wrap_angle(g.angle - kp.orientation);
            const double obin = angle / kTwoPi * kDescBins;
            const double weight =
                std::exp(-(u * u + v * v) / (2.0 * (0.5 * kDescWidth) * (0.5 * kDescWidth)));
            const double contrib = g.mag * weight;

            const int r0 = static_cast<int>(std::floor(rbin));
            const int c0 = static_cast<int>(std::floor(cbin));
            const int o0 = static_cast<int>(std::floor(obin));
            const double fr = rbin - r0;
            const double fc = cbin - c0;
            const double fo = obin - o0;
            for (int ri = 0; ri < 2; ++ri) {
                const int rr = r0 + ri;
                if (rr < 0 || rr >= kDescWidth) continue;
                const double wr = contrib * (ri == 0 ? 1 - fr : fr);
                for (int ci = 0; ci < 2; ++ci) {
                    const int cc = c0 + ci;
                    if (cc < 0 || cc >= kDescWidth) continue;
                    const double wc = wr * (ci == 0 ? 1 - fc : fc);
                    for (int oi = 0; oi < 2; ++oi) {
                        const int oo = (o0 + oi) % kDescBins;
                        const double wo = wc * (oi == 0 ? 1 - fo : fo);
                        acc[static_cast<std::size_t>((rr * kDescWidth + cc) * kDescBins + oo)] += wo;
                    }
                }
            }
        }
    }

    Descriptor desc;
    desc.values = acc;
    double norm = desc.norm();
    if (norm <= 0) return desc;  // flat neighborhood: all-zero descriptor
    for (double& v : desc.values) v = std::min(v / norm, kDescClamp);
    norm = desc.norm();
    if (norm > 0)
        for (double& v : desc.values) v = std::min(v / norm, kDescClamp);
    return desc;
}

ExtractResult extract_with_keypoints(const GrayImage& img, const SiftParams& params,
                                     const std::string& image_id) {
    ExtractResult result;
    result.set.image_id = image_id;
    const ScaleSpace space = build_scale_space(img, params);
    const std::vector<Keypoint> candidates = detect_keypoints(space, params);
    for (const Keypoint& kp : candidates) {
        std::optional<Descriptor> d = compute_descriptor(space, kp);
        if (!d) {
            ++result.skipped_margin;
            continue;
        }
        result.set.descriptors.push_back(*d);
        result.keypoints.push_back(kp);
    }
    return result;
}

DescriptorSet extract(const GrayImage& img, const SiftParams& params, const std::string& image_id) {
    return extract_with_keypoints(img, params, image_id).set;
}

DescriptorSet import_vlfeat(std::istream& in, const std::string& image_id) {
    DescriptorSet set;
    set.image_id = image_id;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::vector<double> fields;
        fields.reserve(4 + kDescriptorDim);
        const char* p = line.c_str();
        const char* end = p + line.size();
        while (p < end) {
            while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
            if (p >= end) break;
            double value = 0;
            const auto [next, ec] = std::from_chars(p, end, value);
            if (ec != std::errc{} || (next < end && !std::isspace(static_cast<unsigned char>(*next)))) {
                const char* tok_end = p;
                while (tok_end < end && !std::isspace(static_cast<unsigned char>(*tok_end))) ++tok_end;
                throw DataError("descriptor file line " + std::to_string(line_no) +
                                ": non-numeric token '" + std::string(p, tok_end) + "'");
            }
            fields.push_back(value);
            p = next;
        }
        if (fields.empty()) continue;
        if (fields.size() != 4 + kDescriptorDim)
            throw DataError("descriptor file line " + std::to_string(line_no) + ": expected " +
                            std::to_string(4 + kDescriptorDim) + " fields, got " +
                            std::to_string(fields.size()));

        Descriptor d;
        double sq = 0.0;
        for (int i = 0; i < kDescriptorDim; ++i) {
            const double v = fields[static_cast<std::size_t>(4 + i)];
            if (v < 0)
                throw DataError("descriptor file line " + std::to_string(line_no) +
                                ": negative descriptor value");
            d.values[static_cast<std::size_t>(i)] = v;
            sq += v * v;
        }
        // Restore the unit-capped convention regardless of the source scaling.
        if (sq > 0) {
            const double inv = 1.0 / std::sqrt(sq);
            for (double& v : d.values) v = std::min(v * inv, kDescClamp);
        }
        set.descriptors.push_back(d);
    }
    return set;
}

DescriptorSet import_vlfeat_file(const std::string& path, const std::string& image_id) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open descriptor file: " + path);
    try {
        return import_vlfeat(in, image_id);
    } catch (const DataError& e) {
        throw DataError(path + ": " + e.what());
    }
}

void export_vlfeat(const ExtractResult& result, std::ostream& out) {
    char buf[32];
    for (std::size_t i = 0; i < result.set.descriptors.size(); ++i) {
        const Keypoint& kp = result.keypoints[i];
        const double frame[4] = {kp.x, kp.y, kp.scale, kp.orientation};
        for (double f : frame) {
            std::snprintf(buf, sizeof buf, "%.17g", f);
            out << buf << ' ';
        }
        const Descriptor& d = result.set.descriptors[i];
        for (int j = 0; j < kDescriptorDim; ++j) {
            std::snprintf(buf, sizeof buf, "%.17g", d.values[static_cast<std::size_t>(j)]);
            out << buf << (j + 1 < kDescriptorDim ? " " : "\n");
        }
    }
}

}  // namespace sibow
