#include "mwp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mwp {

Vec mul(const Matrix& w, const Vec& x) {
    Vec y(w.rows, 0.0);
    mul_acc(y, w, x);
    return y;
}

void mul_acc(Vec& y, const Matrix& w, const Vec& x) {
    assert(x.size() == w.cols && y.size() == w.rows);
    for (size_t r = 0; r < w.rows; ++r) {
        const double* wr = w.row(r);
        double acc = 0.0;
        for (size_t c = 0; c < w.cols; ++c) acc += wr[c] * x[c];
        y[r] += acc;
    }
}

void mul_t_acc(Vec& dx, const Matrix& w, const Vec& dy) {
    assert(dx.size() == w.cols && dy.size() == w.rows);
    for (size_t r = 0; r < w.rows; ++r) {
        const double* wr = w.row(r);
        double g = dy[r];
        if (g == 0.0) continue;
        for (size_t c = 0; c < w.cols; ++c) dx[c] += wr[c] * g;
    }
}

void outer_acc(Matrix& dw, const Vec& dy, const Vec& x) {
    assert(dy.size() == dw.rows && x.size() == dw.cols);
    for (size_t r = 0; r < dw.rows; ++r) {
        double g = dy[r];
        if (g == 0.0) continue;
        double* wr = dw.row(r);
        for (size_t c = 0; c < dw.cols; ++c) wr[c] += g * x[c];
    }
}

Vec concat(const Vec& a, const Vec& b) {
    Vec out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.begin(), a.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
}

double log_sum_exp(const Vec& v) {
    assert(!v.empty());
    double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

Vec softmax(const Vec& logits) {
    Vec p(logits.size());
    double lse = log_sum_exp(logits);
    for (size_t i = 0; i < logits.size(); ++i) p[i] = std::exp(logits[i] - lse);
    return p;
}

Tensor& ParamRegistry::add(const std::string& name, size_t rows, size_t cols) {
    if (index_.count(name)) throw std::runtime_error("duplicate tensor name: " + name);
    auto t = std::make_unique<Tensor>();
    t->name = name;
    t->value = Matrix(rows, cols);
    t->grad = Matrix(rows, cols);
    Tensor* ptr = t.get();
    tensors_.push_back(std::move(t));
    index_[name] = ptr;
    return *ptr;
}

Tensor* ParamRegistry::find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

const Tensor* ParamRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : it->second;
}

std::vector<Tensor*> ParamRegistry::all() {
    std::vector<Tensor*> out;
    out.reserve(tensors_.size());
    for (auto& t : tensors_) out.push_back(t.get());
    return out;
}

std::vector<const Tensor*> ParamRegistry::all() const {
    std::vector<const Tensor*> out;
    out.reserve(tensors_.size());
    for (auto& t : tensors_) out.push_back(t.get());
    return out;
}

void ParamRegistry::zero_grads() {
    for (auto& t : tensors_) t->grad.zero();
}

double ParamRegistry::grad_norm() const {
    double s = 0.0;
    for (const auto& t : tensors_)
        for (double g : t->grad.data) s += g * g;
    return std::sqrt(s);
}

void ParamRegistry::clip_grads(double max_norm) {
    double norm = grad_norm();
    if (norm <= max_norm || norm == 0.0) return;
    double scale = max_norm / norm;
    for (auto& t : tensors_)
        for (double& g : t->grad.data) g *= scale;
}

void ParamRegistry::sgd_step(double lr) {
    for (auto& t : tensors_)
        for (size_t i = 0; i < t->value.data.size(); ++i)
            t->value.data[i] -= lr * t->grad.data[i];
}

size_t ParamRegistry::parameter_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t->value.data.size();
    return n;
}

bool ParamRegistry::all_finite() const {
    for (const auto& t : tensors_)
        for (double v : t->value.data)
            if (!std::isfinite(v)) return false;
    return true;
}

void ParamRegistry::init_uniform(double scale, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-scale, scale);
    for (auto& t : tensors_) {
        if (t->name.rfind("b_", 0) == 0) {
            t->value.zero();
        } else {
            for (double& v : t->value.data) v = dist(rng);
        }
    }
}

}  // namespace mwp
