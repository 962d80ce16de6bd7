#include "repq/dataset.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "repq/rng.hpp"

namespace repq {

namespace {

constexpr double kTwoPi = 6.283185307179586;

// class k: grating oriented at k * 18 degrees, 3 cycles across the image
void render_grating(float* out, int64_t side, int cls, Rng& rng, double noise) {
    const double theta = cls * (kTwoPi / 20.0);
    const double freq = 3.0;
    const double phase = rng.uniform(0, kTwoPi);
    const double amp = rng.uniform(0.8, 1.2);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int64_t h = 0; h < side; ++h)
        for (int64_t d = 0; d < side; ++d) {
            double u = double(h) / double(side), v = double(d) / double(side);
            double val = amp * std::sin(kTwoPi * freq * (u * ct + v * st) + phase);
            out[h * side + d] = float(val + noise * rng.normal());
        }
}

Dataset synth(int64_t n, double noise, Rng& rng) {
    Dataset ds;
    ds.height = ds.width = 16;
    ds.channels = 1;
    ds.num_classes = 10;
    ds.images.resize(n * ds.image_size());
    ds.labels.resize(n);
    for (int64_t i = 0; i < n; ++i) {
        int cls = int(i % 10);  // balanced
        ds.labels[i] = cls;
        render_grating(ds.images.data() + i * ds.image_size(), 16, cls, rng, noise);
    }
    return ds;
}

}  // namespace

DatasetPair make_synthetic(int64_t n_train, int64_t n_eval, double noise, uint64_t seed) {
    require(n_train > 0 && n_eval > 0, "make_synthetic: counts must be positive");
    Rng rng(seed);
    DatasetPair p;
    p.train = synth(n_train, noise, rng);
    p.eval_set = synth(n_eval, noise, rng);
    return p;
}

Dataset make_separable(int64_t n, uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    ds.height = ds.width = 16;
    ds.channels = 1;
    ds.num_classes = 2;
    ds.images.resize(n * ds.image_size());
    ds.labels.resize(n);
    for (int64_t i = 0; i < n; ++i) {
        int cls = int(i % 2);
        ds.labels[i] = cls;
        double shift = cls == 0 ? -0.5 : 0.5;  // separable by global mean
        for (int64_t j = 0; j < ds.image_size(); ++j)
            ds.images[i * ds.image_size() + j] = float(shift + 0.2 * rng.normal());
    }
    return ds;
}

Dataset load_u8_folder(const std::string& dir) {
    std::ifstream meta_in(dir + "/meta.json");
    if (!meta_in) throw std::runtime_error("load_u8_folder: cannot open " + dir + "/meta.json");
    nlohmann::json meta = nlohmann::json::parse(meta_in);
    Dataset ds;
    int64_t count = meta.at("count").get<int64_t>();
    ds.height = meta.at("height").get<int64_t>();
    ds.width = meta.at("width").get<int64_t>();
    ds.channels = meta.at("channels").get<int64_t>();
    ds.num_classes = meta.at("num_classes").get<int>();
    require(count > 0 && ds.height > 0 && ds.width > 0 && ds.channels > 0,
            "load_u8_folder: bad meta dimensions");

    std::ifstream img(dir + "/images.u8", std::ios::binary);
    if (!img) throw std::runtime_error("load_u8_folder: cannot open " + dir + "/images.u8");
    std::vector<unsigned char> raw(size_t(count * ds.image_size()));
    img.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (img.gcount() != std::streamsize(raw.size()))
        throw std::runtime_error("load_u8_folder: images.u8 shorter than meta declares");
    ds.images.resize(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) ds.images[i] = float(raw[i]) / 256.0f;

    std::ifstream lab(dir + "/labels.u8", std::ios::binary);
    if (!lab) throw std::runtime_error("load_u8_folder: cannot open " + dir + "/labels.u8");
    std::vector<unsigned char> lraw(static_cast<size_t>(count), 0);
    lab.read(reinterpret_cast<char*>(lraw.data()), count);
    if (lab.gcount() != count)
        throw std::runtime_error("load_u8_folder: labels.u8 shorter than meta declares");
    ds.labels.assign(lraw.begin(), lraw.end());
    for (int l : ds.labels)
        require(l < ds.num_classes, "load_u8_folder: label out of range");
    return ds;
}

Tensor<float> batch_images(const Dataset& ds, const std::vector<int64_t>& idx) {
    Tensor<float> t({int64_t(idx.size()), ds.height, ds.width, ds.channels});
    const int64_t sz = ds.image_size();
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(ds.images.data() + idx[i] * sz, sz, t.data().data() + int64_t(i) * sz);
    return t;
}

std::vector<int> batch_labels(const Dataset& ds, const std::vector<int64_t>& idx) {
    std::vector<int> out(idx.size());
    for (size_t i = 0; i < idx.size(); ++i) out[i] = ds.labels[idx[i]];
    return out;
}

}  // namespace repq
