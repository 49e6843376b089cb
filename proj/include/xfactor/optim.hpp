#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "xfactor/tensor.hpp"

namespace xfactor {

inline double cosine_lr(int64_t step, int64_t total_steps, double lr_start, double lr_end) {
  if (step < 0 || step > total_steps) throw std::out_of_range("cosine_lr: step out of range");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// AdamW with decoupled weight decay applied before the Adam update.
template <typename T>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<std::pair<std::string, Tensor<T>>> params, Hyper hyper = {})
      : params_(std::move(params)), hyper_(hyper) {
    for (const auto& [name, p] : params_) {
      (void)name;
      slots_.push_back({std::vector<T>(p.data().size(), T(0)),
                        std::vector<T>(p.data().size(), T(0))});
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi].second;
      auto& data = p.data();
      if (p.grad().empty()) continue;  // parameter untouched this step
      const auto& g = p.grad();
      auto& m = slots_[pi].m;
      auto& v = slots_[pi].v;
      const double wd = hyper_.weight_decay;
      for (size_t i = 0; i < data.size(); ++i) {
        if (wd != 0.0) data[i] -= static_cast<T>(lr * wd * static_cast<double>(data[i]));
        const double gi = static_cast<double>(g[i]);
        m[i] = static_cast<T>(hyper_.beta1 * static_cast<double>(m[i]) + (1.0 - hyper_.beta1) * gi);
        v[i] = static_cast<T>(hyper_.beta2 * static_cast<double>(v[i]) +
                              (1.0 - hyper_.beta2) * gi * gi);
        const double mhat = static_cast<double>(m[i]) / bc1;
        const double vhat = static_cast<double>(v[i]) / bc2;
        data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + hyper_.eps));
      }
    }
  }

  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  const Hyper& hyper() const { return hyper_; }
  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }

  void load_state(const std::vector<std::pair<std::string, std::vector<T>>>& state) {
    auto ns = named_state();
    for (auto& [name, buf] : ns) {
      bool found = false;
      for (const auto& [sn, sv] : state)
        if (sn == name) {
          if (sv.size() != buf->size())
            throw std::runtime_error("optimizer state size mismatch for " + name);
          *buf = sv;
          found = true;
          break;
        }
      if (!found) throw std::runtime_error("missing optimizer state for " + name);
    }
  }

  // Moment buffers exposed for checkpointing; order matches the param list.
  std::vector<std::pair<std::string, std::vector<T>*>> named_state() {
    std::vector<std::pair<std::string, std::vector<T>*>> out;
    for (size_t i = 0; i < params_.size(); ++i) {
      out.push_back({"opt." + params_[i].first + ".m", &slots_[i].m});
      out.push_back({"opt." + params_[i].first + ".v", &slots_[i].v});
    }
    return out;
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<Slot> slots_;
  Hyper hyper_;
  int64_t t_ = 0;
};

}  // namespace xfactor
