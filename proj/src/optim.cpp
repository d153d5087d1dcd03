#include "mw/optim.hpp"

#include <cmath>

namespace mw {

namespace {

template <class T>
void check_grads(const std::vector<Param<T>*>& params) {
    for (const Param<T>* p : params) {
        if (p->grad.shape() != p->value.shape()) {
            throw ShapeError("gradient shape of " + p->name + " does not match parameter");
        }
        if (!p->grad.all_finite()) throw NumericError("non-finite gradient for " + p->name);
    }
}

}  // namespace

template <class T>
Adam<T>::Adam(std::vector<Param<T>*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const Param<T>* p : params_) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
    }
}

template <class T>
void Adam<T>::step() {
    check_grads(params_);
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param<T>& p = *params_[i];
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = static_cast<double>(p.grad[j]);
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mh = m[j] / bc1;
            const double vh = v[j] / bc2;
            double w = static_cast<double>(p.value[j]);
            if (cfg_.weight_decay != 0.0) w -= cfg_.lr * cfg_.weight_decay * w;
            w -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            p.value[j] = static_cast<T>(w);
        }
    }
}

template <class T>
void Adam<T>::zero_grad() {
    for (Param<T>* p : params_) p->zero_grad();
}

template <class T>
void Sgd<T>::step() {
    check_grads(params_);
    ++t_;
    for (Param<T>* p : params_) {
        for (std::size_t j = 0; j < p->value.size(); ++j) {
            const double w = static_cast<double>(p->value[j]);
            p->value[j] = static_cast<T>(w - lr_ * (static_cast<double>(p->grad[j]) + wd_ * w));
        }
    }
}

template <class T>
void Sgd<T>::zero_grad() {
    for (Param<T>* p : params_) p->zero_grad();
}

template <class T>
double grad_norm(const std::vector<Param<T>*>& params) {
    double s = 0.0;
    for (const Param<T>* p : params) {
        for (T g : p->grad.vec()) s += static_cast<double>(g) * static_cast<double>(g);
    }
    return std::sqrt(s);
}

template <class T>
double clip_grad_norm(const std::vector<Param<T>*>& params, double max_norm) {
    const double n = grad_norm(params);
    if (n > max_norm && n > 0.0) {
        const T f = static_cast<T>(max_norm / n);
        for (Param<T>* p : params) {
            for (T& g : p->grad.vec()) g *= f;
        }
    }
    return n;
}

template class Adam<float>;
template class Adam<double>;
template class Sgd<float>;
template class Sgd<double>;
template double grad_norm(const std::vector<Param<float>*>&);
template double grad_norm(const std::vector<Param<double>*>&);
template double clip_grad_norm(const std::vector<Param<float>*>&, double);
template double clip_grad_norm(const std::vector<Param<double>*>&, double);

}  // namespace mw
