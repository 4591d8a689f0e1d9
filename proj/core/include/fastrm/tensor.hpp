#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastrm {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace alloc_tracker {

// Live-byte accounting for Tensor payloads. Single-threaded per scope stack
// (thread_local), nesting allowed.
void on_alloc(std::size_t bytes);
void on_free(std::size_t bytes);
std::size_t live_bytes();

class Scope {
public:
    Scope();
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

    // Maximum bytes live above the level at scope entry.
    std::size_t peak_bytes() const { return peak_; }

private:
    friend void on_alloc(std::size_t);
    std::size_t start_;
    std::size_t peak_ = 0;
};

}  // namespace alloc_tracker

// Dense row-major f64 tensor. The universal value carrier.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);
    Tensor(const Tensor& other);
    Tensor(Tensor&& other) noexcept;
    Tensor& operator=(const Tensor& other);
    Tensor& operator=(Tensor&& other) noexcept;
    ~Tensor();

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<std::size_t> shape, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> vals);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;
    std::string shape_str() const;

    void fill(double v);

    void serialize(std::ostream& os) const;
    static Tensor deserialize(std::istream& is);

private:
    void track_();
    void untrack_();

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    std::size_t tracked_bytes_ = 0;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace fastrm
