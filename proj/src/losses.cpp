#include "musclab/losses.hpp"

#include <cmath>

#include "musclab/rng.hpp"

namespace musclab {

namespace {

VectorXi reversed(const VectorXi& y) {
  return y.reverse();
}

MatrixXd reversed_rows(const MatrixXd& m) {
  return m.colwise().reverse();
}

}  // namespace

Arm arm_from_string(const std::string& s) {
  if (s == "-" || s == "ce") return Arm::baseline;
  if (s == "sc") return Arm::supcon_only;
  if (s == "mu") return Arm::mixup_only;
  if (s == "sc+mu") return Arm::supcon_mixup;
  if (s == "full" || s == "L") return Arm::full;
  throw ConfigError("unknown ablation arm: " + s +
                    " (expected -, sc, mu, sc+mu, full)");
}

const char* arm_key(Arm arm) {
  switch (arm) {
    case Arm::baseline: return "-";
    case Arm::supcon_only: return "sc";
    case Arm::mixup_only: return "mu";
    case Arm::supcon_mixup: return "sc+mu";
    case Arm::full: return "full";
  }
  return "?";
}

const char* arm_display_name(Arm arm) {
  switch (arm) {
    case Arm::baseline: return "-";
    case Arm::supcon_only: return "L_sc";
    case Arm::mixup_only: return "L_mu";
    case Arm::supcon_mixup: return "L_sc+L_mu";
    case Arm::full: return "L";
  }
  return "?";
}

void LossConfig::validate() const {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("lambda must be in [0,1]");
  if (tau <= 0.0) throw ConfigError("tau must be positive");
  if (alpha_policy == AlphaPolicy::fixed && (alpha_fixed < 0.0 || alpha_fixed > 1.0))
    throw ConfigError("fixed alpha must be in [0,1]");
  if (alpha_policy == AlphaPolicy::beta && (beta_a <= 0.0 || beta_b <= 0.0))
    throw ConfigError("beta parameters must be positive");
}

double sample_alpha(const LossConfig& cfg, Rng& rng) {
  if (cfg.alpha_policy == LossConfig::AlphaPolicy::fixed) return cfg.alpha_fixed;
  return rng.beta(cfg.beta_a, cfg.beta_b);
}

double cross_entropy(const MatrixXd& Q, const VectorXi& y, MatrixXd* dQ) {
  const int n = static_cast<int>(Q.rows());
  const int num_classes = static_cast<int>(Q.cols());
  if (y.size() != n) throw UsageError("cross_entropy: label count mismatch");
  if (dQ) dQ->setZero(n, num_classes);
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int label = y(i);
    if (label < 0 || label >= num_classes)
      throw UsageError("cross_entropy: label out of range");
    const double m = Q.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (Q.row(i).array() - m).exp();
    const double sum = e.sum();
    loss += -(Q(i, label) - m - std::log(sum));
    if (dQ) {
      dQ->row(i) = e / (sum * n);
      (*dQ)(i, label) -= 1.0 / n;
    }
  }
  return loss / n;
}

double supcon_core(const MatrixXd& Z, const VectorXi& labels, double tau,
                   MatrixXd* dZ) {
  if (tau <= 0.0) throw ConfigError("supcon temperature must be positive");
  const int m = static_cast<int>(Z.rows());
  if (labels.size() != m) throw UsageError("supcon: label count mismatch");
  if (dZ) dZ->setZero(m, Z.cols());
  if (m < 2) return 0.0;

  const MatrixXd scores = (Z * Z.transpose()) / tau;
  // Coefficients c(i,j) with dZ = (C + C^T) Z / tau.
  MatrixXd coeff = MatrixXd::Zero(m, m);
  double loss = 0.0;
  for (int i = 0; i < m; ++i) {
    int positives = 0;
    double row_max = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      if (labels(j) == labels(i)) ++positives;
      row_max = std::max(row_max, scores(i, j));
    }
    if (positives == 0) continue;

    double sum_pos = 0.0, sum_all = 0.0;
    for (int j = 0; j < m; ++j) {
      if (j == i) continue;
      const double e = std::exp(scores(i, j) - row_max);
      sum_all += e;
      if (labels(j) == labels(i)) sum_pos += e;
    }
    loss += -(std::log(sum_pos) - std::log(positives) - std::log(sum_all));
    if (dZ) {
      for (int j = 0; j < m; ++j) {
        if (j == i) continue;
        const double e = std::exp(scores(i, j) - row_max);
        double c = e / sum_all;
        if (labels(j) == labels(i)) c -= e / sum_pos;
        coeff(i, j) = c;
      }
    }
  }
  if (dZ) *dZ = ((coeff + coeff.transpose()) * Z) / tau;
  return loss;
}

double supcon(const MatrixXd& Z_S, const MatrixXd& Z_T, const VectorXi& y,
              double tau, MatrixXd* dZ_S, MatrixXd* dZ_T) {
  const int n = static_cast<int>(Z_S.rows());
  if (Z_T.rows() != n || y.size() != n)
    throw UsageError("supcon: batch size mismatch between halves and labels");
  MatrixXd Z(2 * n, Z_S.cols());
  Z.topRows(n) = Z_S;
  Z.bottomRows(n) = Z_T;
  VectorXi labels(2 * n);
  labels.head(n) = y;
  labels.tail(n) = y;
  MatrixXd dZ;
  const double loss = supcon_core(Z, labels, tau, (dZ_S || dZ_T) ? &dZ : nullptr);
  if (dZ_S) *dZ_S = dZ.topRows(n);
  if (dZ_T) *dZ_T = dZ.bottomRows(n);
  return loss;
}

double mixup_ce(const MatrixXd& Q_mixed, const VectorXi& y, double alpha,
                MatrixXd* dQ) {
  if (alpha < 0.0 || alpha > 1.0) throw UsageError("mixup alpha must be in [0,1]");
  MatrixXd d_up, d_down;
  const double up = cross_entropy(Q_mixed, y, dQ ? &d_up : nullptr);
  const VectorXi y_down = reversed(y);
  const double down = cross_entropy(Q_mixed, y_down, dQ ? &d_down : nullptr);
  if (dQ) *dQ = alpha * d_up + (1.0 - alpha) * d_down;
  return alpha * up + (1.0 - alpha) * down;
}

double musc(const MatrixXd& Z_mixed_A, const MatrixXd& Z_B, const VectorXi& y,
            double alpha, double tau, MatrixXd* dZ_mixed_A, MatrixXd* dZ_B) {
  if (alpha < 0.0 || alpha > 1.0) throw UsageError("musc alpha must be in [0,1]");
  const bool want_grads = dZ_mixed_A || dZ_B;

  MatrixXd d_up_A, d_up_B;
  const double up = supcon(Z_mixed_A, Z_B, y, tau, want_grads ? &d_up_A : nullptr,
                           want_grads ? &d_up_B : nullptr);

  const MatrixXd Z_B_down = reversed_rows(Z_B);
  const VectorXi y_down = reversed(y);
  MatrixXd d_down_A, d_down_B;
  const double down = supcon(Z_mixed_A, Z_B_down, y_down, tau,
                             want_grads ? &d_down_A : nullptr,
                             want_grads ? &d_down_B : nullptr);

  if (dZ_mixed_A) *dZ_mixed_A = alpha * d_up_A + (1.0 - alpha) * d_down_A;
  if (dZ_B) *dZ_B = alpha * d_up_B + (1.0 - alpha) * reversed_rows(d_down_B);
  return alpha * up + (1.0 - alpha) * down;
}

LossBreakdown total_loss(const ForwardBundle& bundle, const VectorXi& y,
                         const LossConfig& cfg, BundleGrads* dout) {
  cfg.validate();
  const int n = static_cast<int>(bundle.source.Q.Q.rows());
  if (bundle.target.Q.Q.rows() != n || bundle.mixed_source.Q.Q.rows() != n ||
      bundle.mixed_target.Q.Q.rows() != n || y.size() != n)
    throw UsageError("total_loss: bundle and labels disagree on batch size");

  const bool with_mu = cfg.arm == Arm::mixup_only || cfg.arm == Arm::supcon_mixup ||
                       cfg.arm == Arm::full;
  const bool with_sc = cfg.arm == Arm::supcon_only || cfg.arm == Arm::supcon_mixup ||
                       cfg.arm == Arm::full;
  const bool with_musc = cfg.arm == Arm::full;

  const double alpha = bundle.alpha;
  const double lambda = cfg.lambda;

  LossBreakdown lb;
  lb.alpha = alpha;
  lb.lambda = lambda;
  lb.tau = cfg.tau;

  MatrixXd d_ce_s, d_ce_t, d_mu_s, d_mu_t;
  MatrixXd d_sc_s, d_sc_t;
  MatrixXd d_musc_s_anchor, d_musc_s_other;  // anchors Z~_S, other Z_T
  MatrixXd d_musc_t_anchor, d_musc_t_other;  // anchors Z~_T, other Z_S

  lb.ce_s = cross_entropy(bundle.source.Q.Q, y, dout ? &d_ce_s : nullptr);
  lb.ce_t = cross_entropy(bundle.target.Q.Q, y, dout ? &d_ce_t : nullptr);
  if (with_mu) {
    lb.mu_s = mixup_ce(bundle.mixed_source.Q.Q, y, alpha, dout ? &d_mu_s : nullptr);
    lb.mu_t = mixup_ce(bundle.mixed_target.Q.Q, y, alpha, dout ? &d_mu_t : nullptr);
  }
  if (with_sc) {
    lb.sc = supcon(bundle.source.Z.Z, bundle.target.Z.Z, y, cfg.tau,
                   dout ? &d_sc_s : nullptr, dout ? &d_sc_t : nullptr);
    lb.sc_mean = lb.sc / (2.0 * n);
  }
  if (with_musc) {
    lb.musc_s = musc(bundle.mixed_source.Z.Z, bundle.target.Z.Z, y, alpha, cfg.tau,
                     dout ? &d_musc_s_anchor : nullptr, dout ? &d_musc_s_other : nullptr);
    lb.musc_t = musc(bundle.mixed_target.Z.Z, bundle.source.Z.Z, y, alpha, cfg.tau,
                     dout ? &d_musc_t_anchor : nullptr, dout ? &d_musc_t_other : nullptr);
    lb.musc_s_mean = lb.musc_s / (2.0 * n);
    lb.musc_t_mean = lb.musc_t / (2.0 * n);
  }

  lb.total = (1.0 - lambda) * (lb.ce_s + lb.ce_t + lb.mu_s + lb.mu_t) +
             lambda * (lb.sc + lb.musc_s + lb.musc_t);

  if (dout) {
    const int num_classes = static_cast<int>(bundle.source.Q.Q.cols());
    const int proj_dim = static_cast<int>(bundle.source.Z.Z.cols());
    const auto zero_like = [&](int cols) { return MatrixXd::Zero(n, cols); };

    dout->dQ_S = (1.0 - lambda) * d_ce_s;
    dout->dQ_T = (1.0 - lambda) * d_ce_t;
    dout->dQm_S = with_mu ? MatrixXd((1.0 - lambda) * d_mu_s) : zero_like(num_classes);
    dout->dQm_T = with_mu ? MatrixXd((1.0 - lambda) * d_mu_t) : zero_like(num_classes);

    dout->dZ_S = zero_like(proj_dim);
    dout->dZ_T = zero_like(proj_dim);
    dout->dZm_S = zero_like(proj_dim);
    dout->dZm_T = zero_like(proj_dim);
    if (with_sc) {
      dout->dZ_S += lambda * d_sc_s;
      dout->dZ_T += lambda * d_sc_t;
    }
    if (with_musc) {
      dout->dZm_S += lambda * d_musc_s_anchor;
      dout->dZ_T += lambda * d_musc_s_other;
      dout->dZm_T += lambda * d_musc_t_anchor;
      dout->dZ_S += lambda * d_musc_t_other;
    }
  }
  return lb;
}

}  // namespace musclab
