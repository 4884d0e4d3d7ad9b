#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sca/tensor.hpp"

namespace sca {

struct DatasetContainer {
    Tensor4 images;           // (N, C, H, W), values in [0, 1]
    std::vector<int> labels;  // length N, in [0, class_count)
    int class_count = 0;
    std::string split = "train";

    int size() const { return images.n(); }
    void validate() const;
};

struct EncoderConfig {
    int t_steps = 4;  // scheme: direct repeat
};

// Deterministic synthetic classification task: each class is a distinct
// binary stripe template (orientation x band width) plus Gaussian noise,
// clipped to [0, 1].
DatasetContainer synth_generate(int classes, int n_per_class, int hw, double noise,
                                std::uint64_t seed, const std::string& split = "train");

// Constant-current direct encoding: the image repeated at each of T steps.
std::vector<Tensor4> encode_direct(const Tensor4& batch, const EncoderConfig& cfg);

// Fixed permutation per (seed, epoch); the final partial batch is kept.
std::vector<std::vector<int>> batch_indices(int n, int batch_size, bool shuffle,
                                            std::uint64_t seed, int epoch);

// Copies the given rows into a batch tensor and label vector.
Tensor4 gather_batch(const DatasetContainer& data, const std::vector<int>& idx,
                     std::vector<int>& labels_out);

// Directory layout: manifest.txt (classes, n, h, w, split), images.scat,
// labels.scat.
void save_dataset(const std::filesystem::path& dir, const DatasetContainer& data);
DatasetContainer load_dataset(const std::filesystem::path& dir);

}  // namespace sca
