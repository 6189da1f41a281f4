#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "agrikd/common.hpp"
#include "agrikd/tensor.hpp"

namespace agrikd {

/// Synthetic class-template dataset description. Per class, one fixed template
/// is drawn from seeded uniform noise and box-smoothed; every sample is the
/// template plus Gaussian pixel noise, clipped to [0,1].
struct SyntheticSpec {
    std::vector<std::size_t> per_class_counts;
    std::size_t image_side = 32;
    std::size_t channels = 1;
    double noise_sigma = 0.1;
    std::uint64_t seed = 0;
};

struct Dataset {
    Tensor images;  // [N x H x W x ch], values in [0,1]
    std::vector<std::size_t> labels;
    std::vector<std::string> class_names;
    std::string provenance;

    std::size_t size() const { return labels.size(); }
    std::size_t num_classes() const { return class_names.size(); }
    std::size_t image_side() const { return images.dim(1); }
    std::size_t channels() const { return images.dim(3); }
    std::vector<std::size_t> class_counts() const;

    /// Copies the selected samples into a fresh [B x H x W x ch] batch.
    Tensor gather_images(const std::vector<std::size_t>& indices) const;
    std::vector<std::size_t> gather_labels(const std::vector<std::size_t>& indices) const;
};

Dataset generate_synthetic(const SyntheticSpec& spec);

/// The per-class templates underlying a spec, [C x H x W x ch]; test oracles
/// use them for nearest-template classification.
Tensor synthetic_templates(const SyntheticSpec& spec);

// CSV interchange: header `label,p0,...,p_{H*W*ch-1}`, one row per sample,
// pixels in [0,1]. Labels are mapped in first-appearance order. The image side
// is inferred from the pixel count (side*side or 3*side*side).
Dataset load_csv(const std::string& path);
void save_csv(const Dataset& ds, const std::string& path);

std::uint64_t dataset_checksum(const Dataset& ds);
/// Manifest JSON: per-class counts, shape, checksum, label mapping.
std::string dataset_manifest_json(const Dataset& ds);

}  // namespace agrikd
