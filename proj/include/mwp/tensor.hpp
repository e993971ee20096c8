#pragma once

#include <cassert>
#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace mwp {

using Vec = std::vector<double>;

struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    Vec data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& at(size_t r, size_t c) {
        assert(r < rows && c < cols);
        return data[r * cols + c];
    }
    double at(size_t r, size_t c) const {
        assert(r < rows && c < cols);
        return data[r * cols + c];
    }
    double* row(size_t r) { return data.data() + r * cols; }
    const double* row(size_t r) const { return data.data() + r * cols; }
    void zero() { std::fill(data.begin(), data.end(), 0.0); }
};

// y = W x
Vec mul(const Matrix& w, const Vec& x);
// y += W x
void mul_acc(Vec& y, const Matrix& w, const Vec& x);
// dx += W^T dy
void mul_t_acc(Vec& dx, const Matrix& w, const Vec& dy);
// dW += dy x^T
void outer_acc(Matrix& dw, const Vec& dy, const Vec& x);

Vec concat(const Vec& a, const Vec& b);

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// log(sum exp(v)) computed stably
double log_sum_exp(const Vec& v);
Vec softmax(const Vec& logits);

// A named value/gradient pair. Tensors live in a registry so optimization,
// gradient checking and serialization can iterate them uniformly.
struct Tensor {
    std::string name;
    Matrix value;
    Matrix grad;
};

class ParamRegistry {
  public:
    Tensor& add(const std::string& name, size_t rows, size_t cols);
    Tensor* find(const std::string& name);
    const Tensor* find(const std::string& name) const;

    std::vector<Tensor*> all();
    std::vector<const Tensor*> all() const;

    void zero_grads();
    double grad_norm() const;
    void clip_grads(double max_norm);
    void sgd_step(double lr);
    size_t parameter_count() const;
    bool all_finite() const;

    // uniform(-scale, scale) for weights whose name does not start with "b_",
    // zeros for those that do
    void init_uniform(double scale, uint64_t seed);

  private:
    std::vector<std::unique_ptr<Tensor>> tensors_;
    std::unordered_map<std::string, Tensor*> index_;
};

}  // namespace mwp
