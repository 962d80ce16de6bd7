#pragma once

#include <string>
#include <vector>

#include "repq/tensor.hpp"

namespace repq {

// In-memory labelled image set, NHWC float32.
struct Dataset {
    int64_t height = 16, width = 16, channels = 1;
    int num_classes = 10;
    std::vector<float> images;  // count * H * W * C
    std::vector<int> labels;

    int64_t count() const { return int64_t(labels.size()); }
    int64_t image_size() const { return height * width * channels; }
};

struct DatasetPair {
    Dataset train;
    Dataset eval_set;
};

// Built-in 10-class 16x16x1 texture set: oriented gratings at five angles
// and two spatial frequencies, with random phase, contrast jitter and
// additive noise. Deterministic for a given seed.
DatasetPair make_synthetic(int64_t n_train, int64_t n_eval, double noise, uint64_t seed);

// Two-class set that is linearly separable by global mean intensity.
Dataset make_separable(int64_t n, uint64_t seed);

// Loads a folder with images.u8 (raw NHWC bytes), labels.u8 (one byte per
// image) and meta.json {"count","height","width","channels","num_classes"}.
// Pixel bytes map to [0,1).
Dataset load_u8_folder(const std::string& dir);

Tensor<float> batch_images(const Dataset& ds, const std::vector<int64_t>& idx);
std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& idx);

}  // namespace repq
