#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dwp {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels peel loops based on the data address, so a fixed
/// alignment keeps results independent of where the allocator happens to place a buffer.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlignment = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kAlignment}));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kAlignment}); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const noexcept {
        return true;
    }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t num_elements(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape);

/// Raised when a value that must stay finite (loss, gradient, activation) is NaN/Inf.
class NonFiniteError : public std::runtime_error {
 public:
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

/// Dense row-major (C-order) array. Value semantics; copying copies storage.
template <typename T>
class Tensor {
 public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), values_(num_elements(shape_), fill) {
        check_extents();
    }

    Tensor(Shape shape, const std::vector<T>& values)
        : shape_(std::move(shape)), values_(values.begin(), values.end()) {
        check_extents();
        if (values_.size() != num_elements(shape_)) {
            throw std::invalid_argument("tensor value count " + std::to_string(values_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    T* data() { return values_.data(); }
    const T* data() const { return values_.data(); }
    std::span<T> values() { return values_; }
    std::span<const T> values() const { return values_; }

    T& operator[](std::size_t i) { return values_[i]; }
    const T& operator[](std::size_t i) const { return values_[i]; }

    void fill(T v) { std::fill(values_.begin(), values_.end(), v); }

    bool operator==(const Tensor& other) const = default;

 private:
    void check_extents() const {
        for (auto e : shape_) {
            if (e == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_string(shape_));
        }
    }

    Shape shape_;
    AlignedVector<T> values_;
};

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    Tensor<To> out(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
    return out;
}

template <typename T>
bool all_finite(std::span<const T> v) {
    for (T x : v) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

template <typename T>
void require_finite(const Tensor<T>& t, const std::string& what) {
    if (!all_finite(t.values())) throw NonFiniteError("non-finite values in " + what);
}

/// Ordered map of named tensors. Iteration follows insertion order.
template <typename T>
class ParamSet {
 public:
    struct Entry {
        std::string name;
        Tensor<T> value;
        bool operator==(const Entry&) const = default;
    };

    void add(std::string name, Tensor<T> value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
        index_.emplace(name, entries_.size());
        entries_.push_back({std::move(name), std::move(value)});
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<T>& at(const std::string& name) { return entries_[lookup(name)].value; }
    const Tensor<T>& at(const std::string& name) const { return entries_[lookup(name)].value; }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.name);
        return out;
    }

    /// Same names and shapes, all values set to `fill`.
    ParamSet like(T fill = T(0)) const {
        ParamSet out;
        for (const auto& e : entries_) out.add(e.name, Tensor<T>(e.value.shape(), fill));
        return out;
    }

    bool operator==(const ParamSet& other) const { return entries_ == other.entries_; }

 private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
        return it->second;
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Total scalar count over all tensors.
template <typename T>
std::size_t param_count(const ParamSet<T>& p) {
    std::size_t n = 0;
    for (const auto& e : p) n += e.value.size();
    return n;
}

template <typename To, typename From>
ParamSet<To> paramset_cast(const ParamSet<From>& p) {
    ParamSet<To> out;
    for (const auto& e : p) out.add(e.name, tensor_cast<To>(e.value));
    return out;
}

/// True when both sets hold the same names in the same order with equal shapes.
template <typename A, typename B>
bool congruent(const ParamSet<A>& a, const ParamSet<B>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a.entry(i).name != b.entry(i).name || a.entry(i).value.shape() != b.entry(i).value.shape()) return false;
    }
    return true;
}

}  // namespace dwp
