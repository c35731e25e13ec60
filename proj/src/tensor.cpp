#include "sag/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sag {

int64_t shape_size(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("tensor shape has non-positive dim " + shape_str(s));
        n *= d;
    }
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream out;
    out << "[";
    for (size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
    out << "]";
    return out.str();
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(shape_size(shape)), 0.0);
}

Tensor Tensor::zeros(std::vector<int> s) { return Tensor(std::move(s)); }

Tensor Tensor::full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> values) {
    Tensor t;
    t.shape = std::move(s);
    if (static_cast<int64_t>(values.size()) != shape_size(t.shape))
        throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(t.shape));
    t.data = std::move(values);
    return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

int Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return shape[0];
    throw std::invalid_argument("rows() on rank-" + std::to_string(rank()) + " tensor");
}

int Tensor::cols() const {
    if (rank() == 1) return shape[0];
    if (rank() == 2) return shape[1];
    throw std::invalid_argument("cols() on rank-" + std::to_string(rank()) + " tensor");
}

double& Tensor::at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
double Tensor::at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

double Tensor::mean() const {
    if (data.empty()) return 0.0;
    double s = std::accumulate(data.begin(), data.end(), 0.0);
    return s / static_cast<double>(data.size());
}

double Tensor::checksum() const {
    // order-sensitive: detects any in-place mutation
    double acc = 0.0;
    double k = 1.0;
    for (double v : data) {
        acc += v * k;
        k = k * 1.0000001 + 1e-9;
    }
    return acc;
}

double Rng::uniform() {
    // 53-bit mantissa in [0,1)
    return static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
    if (hi < lo) throw std::invalid_argument("uniform_int with hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    // modulo bias is irrelevant at the ranges used here (span << 2^64)
    return lo + static_cast<int>(next_u64() % span);
}

Tensor Rng::normal_tensor(std::vector<int> s) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = normal();
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int> s, double lo, double hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = lo + (hi - lo) * uniform();
    return t;
}

static uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

}  // namespace sag
