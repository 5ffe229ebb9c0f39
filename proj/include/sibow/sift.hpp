#pragma once

#include <array>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "sibow/image.hpp"

namespace sibow {

inline constexpr int kDescriptorDim = 128;

// 4x4 spatial grid x 8 orientation bins, unit-normalized then clamped at 0.2.
struct Descriptor {
    std::array<double, kDescriptorDim> values{};

    double norm() const;
};

struct Keypoint {
    double x = 0;            // pixels, original image coordinates
    double y = 0;
    double scale = 1;        // pixels
    double orientation = 0;  // radians in [0, 2*pi)
};

struct DescriptorSet {
    std::string image_id;
    std::vector<Descriptor> descriptors;
};

struct SiftParams {
    int n_octaves = 4;
    int scales_per_octave = 3;
    double base_sigma = 1.6;
    double contrast_threshold = 0.03;
    double edge_threshold = 10.0;
    bool subpixel_refine = true;
};

// Unconstrained raster used for blurred layers and their differences.
struct Raster {
    int w = 0;
    int h = 0;
    std::vector<double> v;

    Raster() = default;
    Raster(int width, int height) : w(width), h(height), v(static_cast<std::size_t>(width) * height, 0.0) {}
    double at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
    double& at(int x, int y) { return v[static_cast<std::size_t>(y) * w + x]; }
    double at_clamped(int x, int y) const {
        if (x < 0) x = 0;
        if (x >= w) x = w - 1;
        if (y < 0) y = 0;
        if (y >= h) y = h - 1;
        return at(x, y);
    }
};

struct Octave {
    int width = 0;
    int height = 0;
    double downscale = 1;          // 2^octave_index
    std::vector<Raster> gauss;     // scales_per_octave + 3 layers
    std::vector<Raster> dog;       // scales_per_octave + 2 layers
};

struct ScaleSpace {
    SiftParams params;
    int base_width = 0;
    int base_height = 0;
    std::vector<Octave> octaves;
    std::vector<double> layer_sigmas;  // octave-relative sigma of each gauss layer

    // Effective blur of gauss layer `layer` in octave `octave`, in original
    // image pixels.
    double sigma_at(int octave, double layer) const;
};

// Separable Gaussian blur with clamp-to-edge borders, kernel radius ceil(4*sigma).
Raster gaussian_blur(const Raster& src, double sigma);

ScaleSpace build_scale_space(const GrayImage& img, const SiftParams& params);

std::vector<Keypoint> detect_keypoints(const ScaleSpace& space, const SiftParams& params);

// Empty when the 16x16 sample grid does not fit inside the image at the
// keypoint's scale.
std::optional<Descriptor> compute_descriptor(const ScaleSpace& space, const Keypoint& kp);

struct ExtractResult {
    DescriptorSet set;
    std::vector<Keypoint> keypoints;  // one per descriptor, same order
    int skipped_margin = 0;
};

ExtractResult extract_with_keypoints(const GrayImage& img, const SiftParams& params,
                                     const std::string& image_id);
DescriptorSet extract(const GrayImage& img, const SiftParams& params, const std::string& image_id);

// VLFeat ASCII descriptor format: one keypoint per line, 4 frame fields
// (x, y, scale, orientation) then 128 descriptor fields. Imported values are
// L2-renormalized and re-clamped at 0.2 so both descriptor sources share one
// numeric convention.
DescriptorSet import_vlfeat(std::istream& in, const std::string& image_id);
DescriptorSet import_vlfeat_file(const std::string& path, const std::string& image_id);
void export_vlfeat(const ExtractResult& result, std::ostream& out);

}  // namespace sibow
