#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gaitkit/common.hpp"
#include "gaitkit/rng.hpp"

namespace gaitkit {

class Tensor;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first needed
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<Tensor> parents;
    // Accumulates d(loss)/d(parent) into each parent's grad buffer, reading
    // d(loss)/d(self) from this node's grad.
    std::function<void(Node&)> backprop;

    std::vector<double>& grad_buf() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

// Dense row-major tensor of 64-bit reals with optional gradient tracking.
// A Tensor is a cheap shared handle; values are immutable once created except
// for gradient accumulation and explicit parameter updates via
// mutable_values() (optimizer step, running statistics).
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<double> values) {
        for (std::size_t e : shape) {
            if (e == 0) throw ShapeError("tensor: zero-length axis in " + shape_str(shape));
        }
        if (values.size() != numel(shape)) {
            throw ShapeError("tensor: " + std::to_string(values.size()) +
                             " values for shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = std::move(shape);
        t.node_->value = std::move(values);
        return t;
    }

    static Tensor full(Shape shape, double v) {
        return from(std::move(shape), std::vector<double>(numel(shape), v));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
    static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
    static Tensor scalar(double v) { return from({}, {v}); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        std::vector<double> v(numel(shape));
        for (double& x : v) x = rng.normal(0.0, stddev);
        return from(std::move(shape), std::move(v));
    }

    static Tensor uniform(Shape shape, Rng& rng, double lo, double hi) {
        std::vector<double> v(numel(shape));
        for (double& x : v) x = rng.uniform(lo, hi);
        return from(std::move(shape), std::move(v));
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return check().shape; }
    std::size_t rank() const { return check().shape.size(); }
    std::size_t size() const { return check().value.size(); }
    std::size_t extent(std::size_t axis) const {
        if (axis >= rank()) {
            throw ShapeError("extent: axis " + std::to_string(axis) +
                             " out of range for " + shape_str(shape()));
        }
        return shape()[axis];
    }

    std::span<const double> values() const { return check().value; }

    // In-place mutation escape hatch for parameters and running-stat buffers.
    std::span<double> mutable_values() { return check().value; }

    bool requires_grad() const { return check().requires_grad; }
    Tensor& set_requires_grad(bool b) {
        detail::Node& n = check();
        if (!n.is_leaf && !b) {
            throw Error("set_requires_grad: cannot clear on a graph node");
        }
        n.requires_grad = b;
        return *this;
    }

    bool has_grad() const { return defined() && !node_->grad.empty(); }
    std::span<const double> grad() const {
        const detail::Node& n = check();
        if (n.grad.empty()) throw Error("grad: no gradient present");
        return n.grad;
    }
    void zero_grad() { check().grad.clear(); }

    double item() const {
        const detail::Node& n = check();
        if (n.value.size() != 1) {
            throw ShapeError("item: tensor " + shape_str(n.shape) + " is not scalar");
        }
        return n.value[0];
    }

    double at(std::initializer_list<std::size_t> idx) const {
        const detail::Node& n = check();
        if (idx.size() != n.shape.size()) {
            throw ShapeError("at: index rank mismatch");
        }
        std::size_t flat = 0, stride = 1;
        auto it = idx.end();
        for (std::size_t axis = n.shape.size(); axis-- > 0;) {
            --it;
            if (*it >= n.shape[axis]) throw ShapeError("at: index out of range");
            flat += *it * stride;
            stride *= n.shape[axis];
        }
        return n.value[flat];
    }

    // Same values, detached from any graph.
    Tensor detach() const {
        const detail::Node& n = check();
        return from(n.shape, n.value);
    }

    // Reverse-mode differentiation from this scalar. Populates grad on every
    // requires_grad leaf reachable from it; accumulation is additive across
    // calls. The graph behind this tensor is released afterwards.
    void backward() const;

    // --- checkpoint encoding -------------------------------------------------
    // Little-endian: "GTSR", u32 version=1, u32 rank, u64 extents..., raw f64.
    void save(std::ostream& out) const;
    static Tensor load(std::istream& in);
    void save_file(const std::filesystem::path& p) const;
    static Tensor load_file(const std::filesystem::path& p);

    detail::Node* node() const { return node_.get(); }

    static Tensor wrap(std::shared_ptr<detail::Node> node) {
        Tensor t;
        t.node_ = std::move(node);
        return t;
    }

private:
    detail::Node& check() const {
        if (!node_) throw Error("tensor: use of undefined tensor");
        return *node_;
    }

    std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(Node&)> backprop) {
    bool track = false;
    for (const Tensor& p : parents) track = track || p.requires_grad();
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    if (track) {
        Node* n = out.node();
        n->requires_grad = true;
        n->is_leaf = false;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return out;
}

inline void topo_sort(Node* root, std::vector<Node*>& order) {
    // Iterative post-order DFS over parents.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].node();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

inline void Tensor::backward() const {
    detail::Node& root = check();
    if (root.value.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(root.shape));
    }
    if (!root.requires_grad) return;  // nothing reachable tracks gradients

    std::vector<detail::Node*> order;
    detail::topo_sort(&root, order);

    root.grad_buf()[0] += 1.0;
    for (std::size_t i = order.size(); i-- > 0;) {
        detail::Node* n = order[i];
        if (n->backprop) n->backprop(*n);
    }
    // Release the graph: interior nodes drop their edges, closures and
    // gradient scratch; leaves keep accumulated gradients.
    for (detail::Node* n : order) {
        if (!n->is_leaf) {
            n->backprop = nullptr;
            n->parents.clear();
            n->grad.clear();
            n->grad.shrink_to_fit();
        }
    }
}

// --- GTSR encoding -----------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    write_u64(out, bits);
}

inline std::uint32_t read_u32(std::istream& in, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("GTSR: truncated ") + what);
    }
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t read_u64(std::istream& in, const char* what) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) {
        throw FormatError(std::string("GTSR: truncated ") + what);
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double read_f64(std::istream& in, const char* what) {
    std::uint64_t bits = read_u64(in, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

}  // namespace detail

inline void Tensor::save(std::ostream& out) const {
    const detail::Node& n = check();
    out.write("GTSR", 4);
    detail::write_u32(out, 1);
    detail::write_u32(out, static_cast<std::uint32_t>(n.shape.size()));
    for (std::size_t e : n.shape) detail::write_u64(out, e);
    for (double v : n.value) detail::write_f64(out, v);
    if (!out) throw IoError("GTSR: write failed");
}

inline Tensor Tensor::load(std::istream& in) {
    char magic[4];
    if (!in.read(magic, 4)) throw FormatError("GTSR: truncated magic");
    if (std::memcmp(magic, "GTSR", 4) != 0) {
        throw FormatError("GTSR: bad magic \"" + std::string(magic, 4) + "\"");
    }
    std::uint32_t version = detail::read_u32(in, "version");
    if (version != 1) {
        throw FormatError("GTSR: unsupported version " + std::to_string(version));
    }
    std::uint32_t rank = detail::read_u32(in, "rank");
    if (rank > 16) throw FormatError("GTSR: implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = detail::read_u64(in, "extent");
        if (shape[i] == 0) throw FormatError("GTSR: zero extent");
    }
    std::size_t count = numel(shape);
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) values[i] = detail::read_f64(in, "payload");
    return from(std::move(shape), std::move(values));
}

inline void Tensor::save_file(const std::filesystem::path& p) const {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw IoError("cannot open for write: " + p.string());
    save(out);
}

inline Tensor Tensor::load_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open for read: " + p.string());
    return load(in);
}

}  // namespace gaitkit
