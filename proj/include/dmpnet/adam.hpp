#pragma once

// Adam optimizer over named parameter tensors. Weight decay is classic L2
// regularization folded into the gradient before the moment updates.

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "dmpnet/tensor.hpp"

namespace dmpnet {

struct AdamConfig {
    float lr = 5e-5f;
    float weight_decay = 5e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
};

class Adam {
   public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    void set_lr(float lr) { cfg_.lr = lr; }
    long step_count() const { return t_; }

    // One update over all parameters. Call with the full parameter list every
    // time; moment buffers are keyed by name and sized on first sight.
    void step(const std::vector<std::pair<std::string, TensorF>>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(cfg_.beta1), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(cfg_.beta2), t_);
        for (const auto& [name, p] : params) update_one(name, p, bc1, bc2);
    }

   private:
    struct Moments {
        std::vector<float> m, v;
    };

    void update_one(const std::string& name, const TensorF& p, double bc1, double bc2) {
        require(p.requires_grad(), "adam: parameter '" + name + "' has no gradient buffer");
        auto& st = state_[name];
        const std::size_t n = static_cast<std::size_t>(p.numel());
        if (st.m.empty()) {
            st.m.assign(n, 0.f);
            st.v.assign(n, 0.f);
        }
        require(st.m.size() == n,
                "adam: parameter '" + name + "' changed size between steps");

        TensorF param = p;  // shallow handle; updates write through shared storage
        float* w = param.data();
        const float* g = param.grad().data();
        for (std::size_t i = 0; i < n; ++i) {
            const float grad = g[i] + cfg_.weight_decay * w[i];
            require(std::isfinite(grad), "adam: non-finite gradient for parameter '" + name + "'");
            st.m[i] = cfg_.beta1 * st.m[i] + (1.f - cfg_.beta1) * grad;
            st.v[i] = cfg_.beta2 * st.v[i] + (1.f - cfg_.beta2) * grad * grad;
            const double mhat = st.m[i] / bc1;
            const double vhat = st.v[i] / bc2;
            w[i] -= static_cast<float>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }

    AdamConfig cfg_;
    long t_ = 0;
    std::unordered_map<std::string, Moments> state_;
};

}  // namespace dmpnet
