#pragma once

#include <Eigen/Dense>
#include <string>

#include "musclab/errors.hpp"
#include "musclab/model.hpp"

namespace musclab {

class Rng;

// The ablation arms: cross-entropy alone, each auxiliary loss on its own,
// their plain conjunction, and the full objective.
enum class Arm { baseline, supcon_only, mixup_only, supcon_mixup, full };

Arm arm_from_string(const std::string& s);
const char* arm_key(Arm arm);           // stable config/CLI token
const char* arm_display_name(Arm arm);  // table row label

struct LossConfig {
  double lambda = 0.5;  // trade-off between CE/MixUp and contrastive terms
  double tau = 0.1;     // SupCon temperature

  enum class AlphaPolicy { fixed, beta };
  AlphaPolicy alpha_policy = AlphaPolicy::beta;
  double alpha_fixed = 1.0;
  double beta_a = 2.0;
  double beta_b = 2.0;

  Arm arm = Arm::full;

  void validate() const;
};

double sample_alpha(const LossConfig& cfg, Rng& rng);

// Per-step loss record. Sum-aggregated contrastive terms are accompanied by
// their per-anchor means for readability; disabled terms stay zero.
struct LossBreakdown {
  double total = 0.0;
  double ce_s = 0.0, ce_t = 0.0;
  double mu_s = 0.0, mu_t = 0.0;
  double sc = 0.0, musc_s = 0.0, musc_t = 0.0;
  double sc_mean = 0.0, musc_s_mean = 0.0, musc_t_mean = 0.0;
  double alpha = 1.0, lambda = 0.0, tau = 0.0;
};

// Mean over the batch of -log softmax(Q_i)[y_i].
double cross_entropy(const MatrixXd& Q, const VectorXi& y, MatrixXd* dQ = nullptr);

// Supervised contrastive loss over a single already-concatenated batch with
// arbitrary labels; anchors with an empty positive set contribute zero.
// Summed over anchors (no 1/M normalization).
double supcon_core(const MatrixXd& Z, const VectorXi& labels, double tau,
                   MatrixXd* dZ = nullptr);

// SupCon over [Z_S; Z_T] with the batch labels duplicated across both halves.
double supcon(const MatrixXd& Z_S, const MatrixXd& Z_T, const VectorXi& y,
              double tau, MatrixXd* dZ_S = nullptr, MatrixXd* dZ_T = nullptr);

// alpha * CE(Q~, y) + (1 - alpha) * CE(Q~, reverse(y)).
double mixup_ce(const MatrixXd& Q_mixed, const VectorXi& y, double alpha,
                MatrixXd* dQ = nullptr);

// Mixed-anchor SupCon, decomposed in the two batch orders:
// alpha * supcon(Z~_A, Z_B, y) + (1-alpha) * supcon(Z~_A, reverse(Z_B), reverse(y)).
double musc(const MatrixXd& Z_mixed_A, const MatrixXd& Z_B, const VectorXi& y,
            double alpha, double tau, MatrixXd* dZ_mixed_A = nullptr,
            MatrixXd* dZ_B = nullptr);

// The lambda-weighted objective over one forward bundle, honoring the
// configured ablation arm. When `dout` is given, gradients w.r.t. all eight
// bundle outputs are produced alongside.
LossBreakdown total_loss(const ForwardBundle& bundle, const VectorXi& y,
                         const LossConfig& cfg, BundleGrads* dout = nullptr);

}  // namespace musclab
