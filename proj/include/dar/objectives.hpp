#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>

#include <Eigen/Core>
#include <json.hpp>

#include "dar/data_model.hpp"
#include "dar/error.hpp"

namespace dar {

/// Batch x Q, one sample per row.
template <typename T>
using BatchMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LossConfig {
  double mu = 0.5;     // CF weight
  double delta = 0.5;  // LR weight
  double eps = 1e-7;   // log clamp floor

  void validate() const {
    if (mu < 0.0 || delta < 0.0) throw ConfigError("loss weights must be non-negative");
    if (!(eps > 0.0 && eps <= 1e-3)) throw ConfigError("log clamp eps must lie in (0, 1e-3]");
  }
};

struct ScheduleConfig {
  double lr0 = 1e-4;
  long long total_steps = 1;
  double power = 0.9;

  void validate() const {
    if (!(lr0 > 0.0)) throw ConfigError("initial learning rate must be positive");
    if (total_steps < 1) throw ConfigError("schedule needs at least one step");
    if (!(power > 0.0)) throw ConfigError("poly power must be positive");
  }
};

/// lr0 * (1 - t/T)^power for 0 <= t <= T.
inline double poly_lr(long long step, const ScheduleConfig& cfg) {
  if (step < 0 || step > cfg.total_steps) {
    throw DataError("poly_lr: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.total_steps) + "]");
  }
  const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps);
  return cfg.lr0 * std::pow(frac, cfg.power);
}

/// Stacks label vectors into a batch matrix, checking they are all of `kind`.
BatchMatrix<double> label_matrix(std::span<const LabelVector> labels, LabelKind kind);

template <typename T>
BatchMatrix<T> softmax_rows(const BatchMatrix<T>& logits) {
  BatchMatrix<T> p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const T mx = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

template <typename T>
BatchMatrix<T> sigmoid_all(const BatchMatrix<T>& logits) {
  return logits.unaryExpr([](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
  });
}

namespace detail {
template <typename T>
void require_batch_match(const BatchMatrix<T>& pred, const BatchMatrix<T>& labels, const char* op) {
  if (pred.rows() != labels.rows()) {
    throw DataError(std::string(op) + ": batch size mismatch (" + std::to_string(pred.rows()) + " predictions vs " +
                    std::to_string(labels.rows()) + " labels)");
  }
  if (pred.cols() != labels.cols()) throw DataError(std::string(op) + ": class count mismatch");
  if (pred.rows() == 0) throw DataError(std::string(op) + ": empty batch");
}
}  // namespace detail

/// Mean cross-entropy -(1/N) sum_i y_i . log(max(p_i, eps)). Shared by the
/// Prd and LR objectives.
template <typename T>
T cross_entropy(const BatchMatrix<T>& probs, const BatchMatrix<T>& labels, T eps) {
  detail::require_batch_match(probs, labels, "cross_entropy");
  T total = T(0);
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      if (labels(i, c) != T(0)) total -= labels(i, c) * std::log(std::clamp(probs(i, c), eps, T(1)));
    }
  }
  return total / static_cast<T>(probs.rows());
}

template <typename T>
T loss_prd(const BatchMatrix<T>& probs, const BatchMatrix<T>& onehots, T eps = T(1e-7)) {
  return cross_entropy(probs, onehots, eps);
}

template <typename T>
T loss_lr(const BatchMatrix<T>& probs, const BatchMatrix<T>& onehots, T eps = T(1e-7)) {
  return cross_entropy(probs, onehots, eps);
}

/// Counterfactual loss on independent sigmoid outputs:
/// -(1/N) sum_i (1 - y_i) . log(max(s_i, eps)), y_i the candidate mask.
template <typename T>
T loss_cf(const BatchMatrix<T>& sig, const BatchMatrix<T>& candidates, T eps = T(1e-7)) {
  detail::require_batch_match(sig, candidates, "loss_cf");
  T total = T(0);
  for (Eigen::Index i = 0; i < sig.rows(); ++i) {
    for (Eigen::Index c = 0; c < sig.cols(); ++c) {
      const T w = T(1) - candidates(i, c);
      if (w != T(0)) total -= w * std::log(std::clamp(sig(i, c), eps, T(1)));
    }
  }
  return total / static_cast<T>(sig.rows());
}

/// d cross_entropy(softmax(z)) / dz given p = softmax(z). Entries whose
/// probability sits below the clamp contribute nothing.
template <typename T>
BatchMatrix<T> cross_entropy_grad_logits(const BatchMatrix<T>& probs, const BatchMatrix<T>& labels, T eps) {
  detail::require_batch_match(probs, labels, "cross_entropy_grad_logits");
  BatchMatrix<T> g = BatchMatrix<T>::Zero(probs.rows(), probs.cols());
  const T inv_n = T(1) / static_cast<T>(probs.rows());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    T active = T(0);
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      if (labels(i, c) != T(0) && probs(i, c) >= eps) {
        active += labels(i, c);
        g(i, c) -= labels(i, c);
      }
    }
    g.row(i) += active * probs.row(i);
    g.row(i) *= inv_n;
  }
  return g;
}

/// d loss_cf(sigmoid(z)) / dz given s = sigmoid(z).
template <typename T>
BatchMatrix<T> loss_cf_grad_logits(const BatchMatrix<T>& sig, const BatchMatrix<T>& candidates, T eps) {
  detail::require_batch_match(sig, candidates, "loss_cf_grad_logits");
  BatchMatrix<T> g = BatchMatrix<T>::Zero(sig.rows(), sig.cols());
  const T inv_n = T(1) / static_cast<T>(sig.rows());
  for (Eigen::Index i = 0; i < sig.rows(); ++i) {
    for (Eigen::Index c = 0; c < sig.cols(); ++c) {
      const T w = T(1) - candidates(i, c);
      if (w != T(0) && sig(i, c) >= eps) g(i, c) = -w * (T(1) - sig(i, c)) * inv_n;
    }
  }
  return g;
}

struct DarLossBreakdown {
  double prd = 0.0;
  double cf = 0.0;
  double lr = 0.0;
  double total = 0.0;
};

/// Fine-tuning objective L_prd + mu * L_cf + delta * L_lr on CR onehots. The
/// CF term treats the onehot as the candidate set, so its complement marks the
/// Q - 1 wrong classes.
template <typename T>
DarLossBreakdown loss_dar(const BatchMatrix<T>& y_prd, const BatchMatrix<T>& y_cf, const BatchMatrix<T>& y_lr,
                          const BatchMatrix<T>& onehots, const LossConfig& cfg) {
  const T eps = static_cast<T>(cfg.eps);
  DarLossBreakdown out;
  out.prd = static_cast<double>(loss_prd(y_prd, onehots, eps));
  out.cf = static_cast<double>(loss_cf(y_cf, onehots, eps));
  out.lr = static_cast<double>(loss_lr(y_lr, onehots, eps));
  out.total = out.prd + cfg.mu * out.cf + cfg.delta * out.lr;
  return out;
}

struct DarLogitGrads {
  BatchMatrix<double> prd;
  BatchMatrix<double> cf;
  BatchMatrix<double> lr;
};

/// Gradients of loss_dar with respect to the three heads' pre-activation logits.
template <typename T>
DarLogitGrads loss_dar_grad_logits(const BatchMatrix<T>& y_prd, const BatchMatrix<T>& y_cf,
                                   const BatchMatrix<T>& y_lr, const BatchMatrix<T>& onehots,
                                   const LossConfig& cfg) {
  const T eps = static_cast<T>(cfg.eps);
  DarLogitGrads g;
  g.prd = cross_entropy_grad_logits(y_prd, onehots, eps).template cast<double>();
  g.cf = (loss_cf_grad_logits(y_cf, onehots, eps) * static_cast<T>(cfg.mu)).template cast<double>();
  g.lr = (cross_entropy_grad_logits(y_lr, onehots, eps) * static_cast<T>(cfg.delta)).template cast<double>();
  return g;
}

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

}  // namespace dar
