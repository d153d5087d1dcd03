#pragma once

#include <cstdint>
#include <vector>

#include "mw/autograd.hpp"

namespace mw {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adam with bias correction. Moments are kept in double regardless of T.
template <class T>
class Adam {
public:
    Adam(std::vector<Param<T>*> params, AdamConfig cfg);

    // Applies one update from each parameter's grad; grads are left intact.
    // Throws NumericError (before touching any parameter) if a grad is not finite.
    void step();
    void zero_grad();

    std::int64_t steps() const { return t_; }
    double lr() const { return cfg_.lr; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const std::vector<std::vector<double>>& first_moments() const { return m_; }
    const std::vector<std::vector<double>>& second_moments() const { return v_; }

private:
    std::vector<Param<T>*> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::int64_t t_ = 0;
};

// Plain gradient descent.
template <class T>
class Sgd {
public:
    Sgd(std::vector<Param<T>*> params, double lr, double weight_decay = 0.0)
        : params_(std::move(params)), lr_(lr), wd_(weight_decay) {}
    void step();
    void zero_grad();
    std::int64_t steps() const { return t_; }

private:
    std::vector<Param<T>*> params_;
    double lr_;
    double wd_;
    std::int64_t t_ = 0;
};

// Global L2 norm over all parameter gradients.
template <class T>
double grad_norm(const std::vector<Param<T>*>& params);
// Rescales gradients so the global norm is at most max_norm; returns the norm before clipping.
template <class T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm);

}  // namespace mw
