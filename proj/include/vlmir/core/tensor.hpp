#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "vlmir/core/rng.hpp"

namespace vlmir {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + ")";
}

// Reverse-mode autodiff tensor. Graphs are built eagerly; Tensor is a cheap
// shared handle onto the underlying node, so intermediate results can be
// passed around by value while the tape stays alive until backward().
template <typename T>
class Tensor {
public:
    struct Node {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;

        void ensure_grad() {
            if (grad.size() != data.size()) grad.assign(data.size(), T(0));
        }
    };

    Tensor() = default;

    static Tensor zeros(const Shape& s, bool requires_grad = false) {
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = s;
        t.n_->data.assign(size_t(numel(s)), T(0));
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(const Shape& s, T value) {
        Tensor t = zeros(s);
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }

    static Tensor from_data(const Shape& s, std::vector<T> values, bool requires_grad = false) {
        if (int64_t(values.size()) != numel(s))
            throw std::invalid_argument("tensor data size does not match shape " + shape_str(s));
        Tensor t;
        t.n_ = std::make_shared<Node>();
        t.n_->shape = s;
        t.n_->data = std::move(values);
        t.n_->requires_grad = requires_grad;
        return t;
    }

    static Tensor randn(const Shape& s, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        Tensor t = zeros(s, requires_grad);
        for (auto& v : t.data()) v = T(rng.normal()) * stddev;
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[size_t(i)]; }
    int64_t size() const { return int64_t(n_->data.size()); }
    std::vector<T>& data() { return n_->data; }
    const std::vector<T>& data() const { return n_->data; }
    std::vector<T>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }
    std::shared_ptr<Node> node() const { return n_; }

    T item() const {
        if (n_->data.size() != 1) throw std::logic_error("item() on non-scalar tensor");
        return n_->data[0];
    }

    // Run reverse-mode accumulation from this (scalar) tensor.
    void backward() {
        if (n_->data.size() != 1) throw std::logic_error("backward() requires a scalar loss");
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, size_t>> stack;
        stack.push_back({n_.get(), 0});
        seen.insert(n_.get());
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                Node* p = node->parents[idx++].get();
                if (seen.insert(p).second) stack.push_back({p, 0});
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        for (Node* node : order) node->ensure_grad();
        n_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backward) (*it)->backward(**it);
        }
    }

    // Helper for op implementations: make a result node wired to its parents.
    static Tensor make(const Shape& s, std::vector<std::shared_ptr<Node>> parents,
                       std::function<void(Node&)> backward) {
        Tensor t = zeros(s);
        bool rg = false;
        for (auto& p : parents) rg = rg || p->requires_grad || p->backward;
        t.n_->requires_grad = rg;
        if (rg) {
            t.n_->parents = std::move(parents);
            t.n_->backward = std::move(backward);
        }
        return t;
    }

private:
    std::shared_ptr<Node> n_;
};

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {
template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    auto out = Tensor<T>::make(a.shape(), {a.node(), b.node()}, [](auto& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.grad.size(); ++i) {
            pa.grad[i] += n.grad[i];
            pb.grad[i] += n.grad[i];
        }
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    auto out = Tensor<T>::make(a.shape(), {a.node(), b.node()}, [](auto& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.grad.size(); ++i) {
            pa.grad[i] += n.grad[i];
            pb.grad[i] -= n.grad[i];
        }
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    auto out = Tensor<T>::make(a.shape(), {a.node(), b.node()}, [](auto& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (size_t i = 0; i < n.grad.size(); ++i) {
            pa.grad[i] += n.grad[i] * pb.data[i];
            pb.grad[i] += n.grad[i] * pa.data[i];
        }
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T k) {
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [k](auto& n) {
        auto& pa = *n.parents[0];
        for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * k;
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * k;
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T k) {
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [](auto& n) {
        auto& pa = *n.parents[0];
        for (size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + k;
    return out;
}

// out[r, :] = a[r, :] + bias ; a is (rows, cols), bias is (cols)
template <typename T>
Tensor<T> add_row_broadcast(const Tensor<T>& a, const Tensor<T>& bias) {
    const int cols = a.shape().back();
    if (int64_t(cols) != numel(bias.shape()))
        throw std::invalid_argument("add_row_broadcast: bias size mismatch");
    const int64_t rows = numel(a.shape()) / cols;
    auto out = Tensor<T>::make(a.shape(), {a.node(), bias.node()}, [rows, cols](auto& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        for (int64_t r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) {
                const T g = n.grad[size_t(r * cols + c)];
                pa.grad[size_t(r * cols + c)] += g;
                pb.grad[size_t(c)] += g;
            }
    });
    for (int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out.data()[size_t(r * cols + c)] = a.data()[size_t(r * cols + c)] + bias.data()[size_t(c)];
    return out;
}

// (m, k) x (k, n) -> (m, n)
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = Tensor<T>::make({m, n}, {a.node(), b.node()}, [m, k, n](auto& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        ECMap<T> G(nd.grad.data(), m, n);
        ECMap<T> A(pa.data.data(), m, k);
        ECMap<T> B(pb.data.data(), k, n);
        EMap<T>(pa.grad.data(), m, k).noalias() += G * B.transpose();
        EMap<T>(pb.grad.data(), k, n).noalias() += A.transpose() * G;
    });
    ECMap<T> A(a.data().data(), m, k);
    ECMap<T> B(b.data().data(), k, n);
    EMap<T>(out.data().data(), m, n).noalias() = A * B;
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.shape().size() != 2) throw std::invalid_argument("transpose2d: need 2-D tensor");
    const int m = a.dim(0), n = a.dim(1);
    auto out = Tensor<T>::make({n, m}, {a.node()}, [m, n](auto& nd) {
        auto& pa = *nd.parents[0];
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) pa.grad[size_t(i * n + j)] += nd.grad[size_t(j * m + i)];
    });
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[size_t(j * m + i)] = a.data()[size_t(i * n + j)];
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
    if (numel(s) != numel(a.shape()))
        throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) +
                                    " -> " + shape_str(s));
    auto out = Tensor<T>::make(s, {a.node()}, [](auto& nd) {
        auto& pa = *nd.parents[0];
        for (size_t i = 0; i < nd.grad.size(); ++i) pa.grad[i] += nd.grad[i];
    });
    out.data() = a.data();
    return out;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, int start, int len) {
    const int rows = a.dim(0);
    const int cols = int(numel(a.shape()) / rows);
    if (start < 0 || start + len > rows) throw std::out_of_range("slice_rows: range out of bounds");
    Shape s = a.shape();
    s[0] = len;
    auto out = Tensor<T>::make(s, {a.node()}, [start, cols](auto& nd) {
        auto& pa = *nd.parents[0];
        for (size_t i = 0; i < nd.grad.size(); ++i)
            pa.grad[size_t(start * cols) + i] += nd.grad[i];
    });
    std::copy(a.data().begin() + int64_t(start) * cols,
              a.data().begin() + int64_t(start + len) * cols, out.data().begin());
    return out;
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
    Shape s = parts[0].shape();
    const int cols = int(numel(s) / s[0]);
    int rows = 0;
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> parents;
    for (auto& p : parts) {
        rows += p.dim(0);
        parents.push_back(p.node());
    }
    s[0] = rows;
    auto out = Tensor<T>::make(s, std::move(parents), [cols](auto& nd) {
        size_t off = 0;
        for (auto& pp : nd.parents) {
            for (size_t i = 0; i < pp->data.size(); ++i) pp->grad[i] += nd.grad[off + i];
            off += pp->data.size();
        }
    });
    size_t off = 0;
    for (auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + int64_t(off));
        off += p.data().size();
    }
    return out;
}

// table is (V, d); output row i is table[ids[i]].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<int>& ids) {
    const int d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= table.dim(0)) throw std::out_of_range("gather_rows: id out of range");
    auto out = Tensor<T>::make({int(ids.size()), d}, {table.node()}, [ids, d](auto& nd) {
        auto& pt = *nd.parents[0];
        for (size_t i = 0; i < ids.size(); ++i)
            for (int c = 0; c < d; ++c)
                pt.grad[size_t(ids[i]) * d + size_t(c)] += nd.grad[i * size_t(d) + size_t(c)];
    });
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(table.data().begin() + int64_t(ids[i]) * d,
                  table.data().begin() + int64_t(ids[i] + 1) * d,
                  out.data().begin() + int64_t(i) * d);
    return out;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [](auto& nd) {
        auto& pa = *nd.parents[0];
        for (size_t i = 0; i < nd.grad.size(); ++i) {
            const T x = pa.data[i];
            const T sig = T(1) / (T(1) + std::exp(-x));
            pa.grad[i] += nd.grad[i] * (sig * (T(1) + x * (T(1) - sig)));
        }
    });
    for (size_t i = 0; i < out.data().size(); ++i) {
        const T x = a.data()[i];
        out.data()[i] = x / (T(1) + std::exp(-x));
    }
    return out;
}

template <typename T>
Tensor<T> abs_t(const Tensor<T>& a) {
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [](auto& nd) {
        auto& pa = *nd.parents[0];
        for (size_t i = 0; i < nd.grad.size(); ++i)
            pa.grad[i] += nd.grad[i] * (pa.data[i] >= T(0) ? T(1) : T(-1));
    });
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = std::abs(a.data()[i]);
    return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    return mul(a, a);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    auto out = Tensor<T>::make({1}, {a.node()}, [](auto& nd) {
        auto& pa = *nd.parents[0];
        for (size_t i = 0; i < pa.grad.size(); ++i) pa.grad[i] += nd.grad[0];
    });
    out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), T(0));
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return scale(sum_all(a), T(1) / T(a.size()));
}

// mean over rows: (rows, cols) -> (1, cols)
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    const int rows = a.dim(0);
    const int cols = int(numel(a.shape()) / rows);
    auto out = Tensor<T>::make({1, cols}, {a.node()}, [rows, cols](auto& nd) {
        auto& pa = *nd.parents[0];
        const T inv = T(1) / T(rows);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < cols; ++c) pa.grad[size_t(r * cols + c)] += nd.grad[size_t(c)] * inv;
    });
    for (int c = 0; c < cols; ++c) {
        T acc = T(0);
        for (int r = 0; r < rows; ++r) acc += a.data()[size_t(r * cols + c)];
        out.data()[size_t(c)] = acc / T(rows);
    }
    return out;
}

// Row-wise softmax over the last dimension.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    const int cols = a.shape().back();
    const int64_t rows = numel(a.shape()) / cols;
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [rows, cols](auto& nd) {
        auto& pa = *nd.parents[0];
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = nd.data.data() + r * cols;
            const T* g = nd.grad.data() + r * cols;
            T dot = T(0);
            for (int c = 0; c < cols; ++c) dot += y[c] * g[c];
            T* pg = pa.grad.data() + r * cols;
            for (int c = 0; c < cols; ++c) pg[c] += y[c] * (g[c] - dot);
        }
    });
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * cols;
        T* y = out.data().data() + r * cols;
        T mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T sum = T(0);
        for (int c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            sum += y[c];
        }
        for (int c = 0; c < cols; ++c) y[c] /= sum;
    }
    return out;
}

// Row-wise log-softmax (max-subtracted).
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
    const int cols = a.shape().back();
    const int64_t rows = numel(a.shape()) / cols;
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [rows, cols](auto& nd) {
        auto& pa = *nd.parents[0];
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = nd.data.data() + r * cols;
            const T* g = nd.grad.data() + r * cols;
            T gsum = T(0);
            for (int c = 0; c < cols; ++c) gsum += g[c];
            T* pg = pa.grad.data() + r * cols;
            for (int c = 0; c < cols; ++c) pg[c] += g[c] - std::exp(y[c]) * gsum;
        }
    });
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * cols;
        T* y = out.data().data() + r * cols;
        T mx = x[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
        T sum = T(0);
        for (int c = 0; c < cols; ++c) sum += std::exp(x[c] - mx);
        const T lse = mx + std::log(sum);
        for (int c = 0; c < cols; ++c) y[c] = x[c] - lse;
    }
    return out;
}

// LayerNorm over the last dimension with learnable gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const int cols = a.shape().back();
    const int64_t rows = numel(a.shape()) / cols;
    if (int64_t(cols) != numel(gain.shape()) || int64_t(cols) != numel(bias.shape()))
        throw std::invalid_argument("layer_norm: gain/bias size mismatch");
    auto out = Tensor<T>::make(
        a.shape(), {a.node(), gain.node(), bias.node()}, [rows, cols, eps](auto& nd) {
            auto& pa = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            for (int64_t r = 0; r < rows; ++r) {
                const T* x = pa.data.data() + r * cols;
                const T* g = nd.grad.data() + r * cols;
                T mean = T(0), var = T(0);
                for (int c = 0; c < cols; ++c) mean += x[c];
                mean /= T(cols);
                for (int c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
                var /= T(cols);
                const T inv = T(1) / std::sqrt(var + eps);
                // dL/dxhat, then the standard layernorm backward
                T s1 = T(0), s2 = T(0);
                std::vector<T> dxhat(size_t(cols), T(0));
                for (int c = 0; c < cols; ++c) {
                    const T xhat = (x[c] - mean) * inv;
                    const T dxh = g[c] * pg.data[size_t(c)];
                    dxhat[size_t(c)] = dxh;
                    s1 += dxh;
                    s2 += dxh * xhat;
                    pg.grad[size_t(c)] += g[c] * xhat;
                    pb.grad[size_t(c)] += g[c];
                }
                T* px = pa.grad.data() + r * cols;
                for (int c = 0; c < cols; ++c) {
                    const T xhat = (x[c] - mean) * inv;
                    px[c] += inv / T(cols) * (T(cols) * dxhat[size_t(c)] - s1 - xhat * s2);
                }
            }
        });
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * cols;
        T* y = out.data().data() + r * cols;
        T mean = T(0), var = T(0);
        for (int c = 0; c < cols; ++c) mean += x[c];
        mean /= T(cols);
        for (int c = 0; c < cols; ++c) var += (x[c] - mean) * (x[c] - mean);
        var /= T(cols);
        const T inv = T(1) / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c)
            y[c] = (x[c] - mean) * inv * gain.data()[size_t(c)] + bias.data()[size_t(c)];
    }
    return out;
}

// L2-normalize each row; rows with vanishing norm are rejected.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& a, T min_norm = T(1e-12)) {
    const int cols = a.shape().back();
    const int64_t rows = numel(a.shape()) / cols;
    for (int64_t r = 0; r < rows; ++r) {
        T nrm = T(0);
        for (int c = 0; c < cols; ++c) {
            const T v = a.data()[size_t(r * cols + c)];
            nrm += v * v;
        }
        if (std::sqrt(nrm) <= min_norm)
            throw std::invalid_argument("l2_normalize_rows: zero-norm row");
    }
    auto out = Tensor<T>::make(a.shape(), {a.node()}, [rows, cols](auto& nd) {
        auto& pa = *nd.parents[0];
        for (int64_t r = 0; r < rows; ++r) {
            const T* x = pa.data.data() + r * cols;
            const T* g = nd.grad.data() + r * cols;
            T nrm2 = T(0), dot = T(0);
            for (int c = 0; c < cols; ++c) nrm2 += x[c] * x[c];
            const T nrm = std::sqrt(nrm2);
            for (int c = 0; c < cols; ++c) dot += x[c] * g[c];
            T* px = pa.grad.data() + r * cols;
            for (int c = 0; c < cols; ++c) px[c] += g[c] / nrm - x[c] * dot / (nrm2 * nrm);
        }
    });
    for (int64_t r = 0; r < rows; ++r) {
        const T* x = a.data().data() + r * cols;
        T* y = out.data().data() + r * cols;
        T nrm = T(0);
        for (int c = 0; c < cols; ++c) nrm += x[c] * x[c];
        nrm = std::sqrt(nrm);
        for (int c = 0; c < cols; ++c) y[c] = x[c] / nrm;
    }
    return out;
}

// Detach: same values, no gradient flow.
template <typename T>
Tensor<T> detach(const Tensor<T>& a) {
    return Tensor<T>::from_data(a.shape(), a.data());
}

}  // namespace vlmir
