#pragma once

#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "vlmir/core/tensor.hpp"

namespace vlmir {

using json = nlohmann::ordered_json;

// Named, ordered collection of trainable tensors. Registration order is the
// iteration order, which keeps optimizer state and checkpoints stable.
template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> t, bool trainable = true) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        t.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back({name, std::move(t), trainable});
        return entries_.back().tensor;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second].tensor;
    }
    const Tensor<T>& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    struct Entry {
        std::string name;
        Tensor<T> tensor;
        bool trainable;
    };
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void set_trainable(const std::string& name, bool trainable) {
        entries_[index_.at(name)].trainable = trainable;
    }
    void set_trainable_prefix(const std::string& prefix, bool trainable) {
        for (auto& e : entries_)
            if (e.name.rfind(prefix, 0) == 0) e.trainable = trainable;
    }

    void zero_grad() {
        for (auto& e : entries_) std::fill(e.tensor.grad().begin(), e.tensor.grad().end(), T(0));
    }

    int64_t total_size() const {
        int64_t n = 0;
        for (auto& e : entries_) n += e.tensor.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

// Checkpoint directory: manifest.json + weights.bin (little-endian float32).
namespace ckpt {

inline void write_f32_le(std::ofstream& os, float v) {
    uint32_t u;
    std::memcpy(&u, &v, 4);
    unsigned char b[4] = {(unsigned char)(u & 0xff), (unsigned char)((u >> 8) & 0xff),
                          (unsigned char)((u >> 16) & 0xff), (unsigned char)((u >> 24) & 0xff)};
    os.write(reinterpret_cast<char*>(b), 4);
}

inline float read_f32_le(const unsigned char* b) {
    uint32_t u = uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
                 (uint32_t(b[3]) << 24);
    float v;
    std::memcpy(&v, &u, 4);
    return v;
}

template <typename T>
void save(const ParamStore<T>& params, const std::string& dir, const json& metadata = json::object()) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    json manifest;
    manifest["format"] = "vlmir-checkpoint-v1";
    manifest["metadata"] = metadata;
    json tensors = json::object();
    int64_t offset = 0;
    std::ofstream blob(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw std::runtime_error("cannot write weights.bin under " + dir);
    for (const auto& e : params.entries()) {
        json t;
        t["dtype"] = "f32";
        t["shape"] = e.tensor.shape();
        t["offset"] = offset;
        t["nbytes"] = e.tensor.size() * 4;
        tensors[e.name] = t;
        for (T v : e.tensor.data()) write_f32_le(blob, float(v));
        offset += e.tensor.size() * 4;
    }
    manifest["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << manifest.dump(2) << "\n";
}

// Loads weights for every tensor registered in `params`. Throws on missing
// tensors, unknown manifest entries, shape mismatch, overlapping offsets, or
// a truncated blob.
template <typename T>
json load(ParamStore<T>& params, const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("checkpoint manifest not found in " + dir);
    json manifest = json::parse(mf);
    const auto& tensors = manifest.at("tensors");

    std::ifstream blob(fs::path(dir) / "weights.bin", std::ios::binary | std::ios::ate);
    if (!blob) throw std::runtime_error("weights.bin not found in " + dir);
    const int64_t blob_size = int64_t(blob.tellg());
    blob.seekg(0);
    std::vector<unsigned char> bytes(size_t(blob_size), 0);
    blob.read(reinterpret_cast<char*>(bytes.data()), blob_size);

    // overlap / bounds validation
    std::vector<std::pair<int64_t, int64_t>> ranges;
    for (auto& [name, t] : tensors.items()) {
        const int64_t off = t.at("offset"), nb = t.at("nbytes");
        if (off < 0 || off + nb > blob_size)
            throw std::runtime_error("corrupt checkpoint: tensor '" + name +
                                     "' exceeds blob (truncated?)");
        ranges.push_back({off, off + nb});
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].second)
            throw std::runtime_error("corrupt checkpoint: overlapping tensor offsets");

    for (auto& [name, t] : tensors.items())
        if (!params.contains(name))
            throw std::runtime_error("checkpoint tensor '" + name + "' unknown to this model");

    for (auto& e : params.entries()) {
        if (!tensors.contains(e.name))
            throw std::runtime_error("checkpoint is missing tensor '" + e.name + "'");
        const auto& t = tensors.at(e.name);
        const Shape shape = t.at("shape").template get<Shape>();
        if (shape != e.tensor.shape())
            throw std::runtime_error("checkpoint shape mismatch for '" + e.name + "'");
        const int64_t off = t.at("offset"), nb = t.at("nbytes");
        if (nb != e.tensor.size() * 4)
            throw std::runtime_error("corrupt checkpoint: nbytes mismatch for '" + e.name + "'");
        for (int64_t i = 0; i < e.tensor.size(); ++i)
            e.tensor.data()[size_t(i)] = T(read_f32_le(bytes.data() + off + i * 4));
    }
    return manifest.at("metadata");
}

}  // namespace ckpt

// Adam with cosine-annealed learning rate over trainable entries.
template <typename T>
class AdamOptimizer {
public:
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.99;
        double eps = 1e-8;
        int64_t total_steps = 1;  // for cosine annealing
    };

    AdamOptimizer(ParamStore<T>& params, Config cfg) : params_(params), cfg_(cfg) {
        for (auto& e : params_.entries()) {
            m_.emplace_back(size_t(e.tensor.size()), T(0));
            v_.emplace_back(size_t(e.tensor.size()), T(0));
        }
    }

    double current_lr() const {
        const double t = std::min<double>(double(step_), double(cfg_.total_steps));
        return cfg_.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t / double(cfg_.total_steps)));
    }

    void step() {
        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (size_t pi = 0; pi < params_.entries().size(); ++pi) {
            auto& e = params_.entries()[pi];
            if (!e.trainable) continue;
            auto& g = e.tensor.grad();
            auto& d = e.tensor.data();
            for (size_t i = 0; i < d.size(); ++i) {
                m_[pi][i] = T(cfg_.beta1) * m_[pi][i] + T(1.0 - cfg_.beta1) * g[i];
                v_[pi][i] = T(cfg_.beta2) * v_[pi][i] + T(1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = double(m_[pi][i]) / bc1;
                const double vhat = double(v_[pi][i]) / bc2;
                d[i] -= T(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

    int64_t step_count() const { return step_; }

private:
    ParamStore<T>& params_;
    Config cfg_;
    int64_t step_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace vlmir
