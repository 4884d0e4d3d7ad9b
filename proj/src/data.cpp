#include "sca/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>

#include "sca/rng.hpp"
#include "sca/tensor_io.hpp"

namespace sca {

void DatasetContainer::validate() const {
    if (images.n() <= 0) throw IoError("dataset: empty image container");
    if (int(labels.size()) != images.n()) {
        throw IoError("dataset: " + std::to_string(images.n()) + " images but " +
                      std::to_string(labels.size()) + " labels");
    }
    if (class_count < 2) throw IoError("dataset: class_count must be >= 2");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= class_count) {
            throw IoError("dataset: label " + std::to_string(labels[i]) + " at row " +
                          std::to_string(i) + " outside [0, " + std::to_string(class_count) + ")");
        }
    }
}

namespace {

// Class c template: stripes along one axis with band width (c % 5) + 1,
// horizontal for the first half of the classes, vertical for the rest.
// Binary patterns, so any two distinct templates differ by 1.0 somewhere.
void class_template(int cls, int classes, int hw, scalar* out) {
    const int half = (classes + 1) / 2;
    const bool horizontal = cls < half;
    const int band = (cls % half) % 5 + 1;
    const int phase = (cls % half) / 5;  // shifts when >5 classes share an axis
    for (int y = 0; y < hw; ++y) {
        for (int x = 0; x < hw; ++x) {
            const int coord = horizontal ? y : x;
            out[std::size_t(y) * hw + x] =
                ((coord / band + phase) % 2 == 0) ? scalar(1) : scalar(0);
        }
    }
}

}  // namespace

DatasetContainer synth_generate(int classes, int n_per_class, int hw, double noise,
                                std::uint64_t seed, const std::string& split) {
    if (classes < 2) throw ConfigError("synth_generate: need at least 2 classes");
    if (n_per_class < 1 || hw < 2) throw ConfigError("synth_generate: bad size arguments");

    DatasetContainer data;
    data.class_count = classes;
    data.split = split;
    const int n = classes * n_per_class;
    data.images = Tensor4(n, 1, hw, hw);
    data.labels.resize(std::size_t(n));

    std::vector<scalar> tmpl(std::size_t(hw) * hw);
    SplitMix64 rng(derive_seed(seed, split == "train" ? 0xD1 : 0xD2));
    int row = 0;
    for (int cls = 0; cls < classes; ++cls) {
        class_template(cls, classes, hw, tmpl.data());
        for (int i = 0; i < n_per_class; ++i, ++row) {
            data.labels[std::size_t(row)] = cls;
            scalar* img = data.images.plane(row, 0);
            for (int j = 0; j < hw * hw; ++j) {
                double v = double(tmpl[std::size_t(j)]);
                if (noise > 0.0) v += noise * rng.gaussian();
                img[j] = scalar(std::clamp(v, 0.0, 1.0));
            }
        }
    }
    data.validate();
    return data;
}

std::vector<Tensor4> encode_direct(const Tensor4& batch, const EncoderConfig& cfg) {
    if (cfg.t_steps < 1) throw ConfigError("encode_direct: t_steps must be >= 1");
    return std::vector<Tensor4>(std::size_t(cfg.t_steps), batch);
}

std::vector<std::vector<int>> batch_indices(int n, int batch_size, bool shuffle,
                                            std::uint64_t seed, int epoch) {
    if (batch_size < 1 || batch_size > n) {
        throw ConfigError("batch_indices: batch_size must be in [1, n]");
    }
    std::vector<int> order(std::size_t(n));
    for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
    if (shuffle) {
        SplitMix64 rng(derive_seed(seed, 0xB000 + std::uint64_t(epoch)));
        rng.shuffle(order);
    }
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < n; start += batch_size) {
        const int end = std::min(n, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

Tensor4 gather_batch(const DatasetContainer& data, const std::vector<int>& idx,
                     std::vector<int>& labels_out) {
    Tensor4 batch(int(idx.size()), data.images.c(), data.images.h(), data.images.w());
    labels_out.resize(idx.size());
    const std::size_t row = std::size_t(data.images.c()) * data.images.h() * data.images.w();
    for (std::size_t i = 0; i < idx.size(); ++i) {
        std::memcpy(batch.data() + i * row, data.images.data() + std::size_t(idx[i]) * row,
                    row * sizeof(scalar));
        labels_out[i] = data.labels[std::size_t(idx[i])];
    }
    return batch;
}

void save_dataset(const std::filesystem::path& dir, const DatasetContainer& data) {
    data.validate();
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir / "manifest.txt", std::ios::trunc);
    if (!mf) throw IoError("cannot write dataset manifest in '" + dir.string() + "'");
    mf << "classes = " << data.class_count << "\n";
    mf << "n = " << data.size() << "\n";
    mf << "h = " << data.images.h() << "\n";
    mf << "w = " << data.images.w() << "\n";
    mf << "split = " << data.split << "\n";
    mf.close();
    save_tensor(dir / "images.scat", data.images);
    std::vector<scalar> labels(data.labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = scalar(data.labels[i]);
    save_vector(dir / "labels.scat", labels);
}

DatasetContainer load_dataset(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("missing dataset manifest in '" + dir.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const char* ws = " \t\r";
            s.erase(0, s.find_first_not_of(ws));
            auto last = s.find_last_not_of(ws);
            s.erase(last == std::string::npos ? 0 : last + 1);
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto need = [&](const char* k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError("dataset manifest missing key '" + std::string(k) + "'");
        return it->second;
    };

    DatasetContainer data;
    data.class_count = std::stoi(need("classes"));
    data.split = need("split");
    data.images = load_tensor(dir / "images.scat");
    auto labels = load_vector(dir / "labels.scat");
    data.labels.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) data.labels[i] = int(labels[i]);
    if (data.size() != std::stoi(need("n")) || data.images.h() != std::stoi(need("h")) ||
        data.images.w() != std::stoi(need("w"))) {
        throw IoError("dataset manifest dims disagree with containers in '" + dir.string() + "'");
    }
    data.validate();
    return data;
}

}  // namespace sca
