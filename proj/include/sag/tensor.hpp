#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace sag {

/// Dense row-major tensor of 64-bit floats with an optional gradient slot.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty, or same length as data

    Tensor() = default;
    explicit Tensor(std::vector<int> s);

    static Tensor zeros(std::vector<int> s);
    static Tensor full(std::vector<int> s, double v);
    static Tensor from(std::vector<int> s, std::vector<double> values);
    static Tensor scalar(double v);

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    // rank-2 accessors (also accept rank-1 as a single row)
    int rows() const;
    int cols() const;
    double& at(int r, int c);
    double at(int r, int c) const;

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void ensure_grad();  // allocate a zeroed grad slot if absent
    void zero_grad();

    double mean() const;
    double checksum() const;  // order-sensitive digest for freeze checks
};

int64_t shape_size(const std::vector<int>& s);
std::string shape_str(const std::vector<int>& s);

/// Deterministic RNG. Gaussians come from an explicit Box-Muller transform so
/// sequences are reproducible across standard libraries.
class Rng {
   public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }
    double uniform();                  // [0, 1)
    double normal();                   // N(0, 1)
    int uniform_int(int lo, int hi);   // inclusive bounds
    Tensor normal_tensor(std::vector<int> s);
    Tensor uniform_tensor(std::vector<int> s, double lo, double hi);

   private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Stable child-seed derivation (splitmix64 over base and stream index).
uint64_t derive_seed(uint64_t base, uint64_t stream);

}  // namespace sag
