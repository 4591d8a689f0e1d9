#include "fastrm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace fastrm {

namespace alloc_tracker {

namespace {
thread_local std::size_t g_live = 0;
thread_local std::vector<Scope*> g_scopes;
}  // namespace

void on_alloc(std::size_t bytes) {
    g_live += bytes;
    for (Scope* s : g_scopes) {
        if (g_live > s->start_ && g_live - s->start_ > s->peak_) {
            s->peak_ = g_live - s->start_;
        }
    }
}

void on_free(std::size_t bytes) { g_live -= bytes; }

std::size_t live_bytes() { return g_live; }

Scope::Scope() : start_(g_live) { g_scopes.push_back(this); }

Scope::~Scope() {
    if (g_scopes.empty() || g_scopes.back() != this) {
        // unbalanced nesting is a programming error
        std::terminate();
    }
    g_scopes.pop_back();
}

}  // namespace alloc_tracker

namespace {
std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}
}  // namespace

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {
    track_();
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
    track_();
}

Tensor::Tensor(const Tensor& other) : shape_(other.shape_), data_(other.data_) { track_(); }

Tensor::Tensor(Tensor&& other) noexcept
    : shape_(std::move(other.shape_)),
      data_(std::move(other.data_)),
      tracked_bytes_(other.tracked_bytes_) {
    other.tracked_bytes_ = 0;
    other.shape_.clear();
    other.data_.clear();
}

Tensor& Tensor::operator=(const Tensor& other) {
    if (this != &other) {
        untrack_();
        shape_ = other.shape_;
        data_ = other.data_;
        track_();
    }
    return *this;
}

Tensor& Tensor::operator=(Tensor&& other) noexcept {
    if (this != &other) {
        untrack_();
        shape_ = std::move(other.shape_);
        data_ = std::move(other.data_);
        tracked_bytes_ = other.tracked_bytes_;
        other.tracked_bytes_ = 0;
        other.shape_.clear();
        other.data_.clear();
    }
    return *this;
}

Tensor::~Tensor() { untrack_(); }

void Tensor::track_() {
    tracked_bytes_ = data_.size() * sizeof(double);
    if (tracked_bytes_) alloc_tracker::on_alloc(tracked_bytes_);
}

void Tensor::untrack_() {
    if (tracked_bytes_) {
        alloc_tracker::on_free(tracked_bytes_);
        tracked_bytes_ = 0;
    }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> vals) {
    return Tensor({rows, cols}, std::vector<double>(vals));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows() on non-matrix " + shape_str());
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols() on non-matrix " + shape_str());
    return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

bool Tensor::all_finite() const {
    for (double v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

// Layout: "TNSR", u32 rank, u64 extents, raw little-endian f64 payload.
void Tensor::serialize(std::ostream& os) const {
    os.write("TNSR", 4);
    std::uint32_t r = static_cast<std::uint32_t>(rank());
    os.write(reinterpret_cast<const char*>(&r), sizeof(r));
    for (std::size_t e : shape_) {
        std::uint64_t e64 = e;
        os.write(reinterpret_cast<const char*>(&e64), sizeof(e64));
    }
    os.write(reinterpret_cast<const char*>(data_.data()),
             static_cast<std::streamsize>(data_.size() * sizeof(double)));
}

Tensor Tensor::deserialize(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TNSR", 4) != 0) {
        throw std::runtime_error("bad tensor magic");
    }
    std::uint32_t r = 0;
    is.read(reinterpret_cast<char*>(&r), sizeof(r));
    std::vector<std::size_t> shape(r);
    for (auto& e : shape) {
        std::uint64_t e64 = 0;
        is.read(reinterpret_cast<char*>(&e64), sizeof(e64));
        e = static_cast<std::size_t>(e64);
    }
    std::size_t n = shape_product(shape);
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!is) throw std::runtime_error("truncated tensor payload");
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace fastrm
