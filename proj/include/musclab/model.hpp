#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "musclab/errors.hpp"

namespace musclab {

using Eigen::MatrixXd;
using Eigen::MatrixXi;
using Eigen::VectorXi;

struct ModelConfig {
  int vocab_size = 0;       // shared id space for both languages, incl. pad
  int embed_dim = 32;       // d
  int seq_len = 16;         // L (without the prepended [CLS])
  int proj_dim = 16;        // d_p
  int proj_hidden = 32;     // projector hidden width
  int num_classes = 0;      // C
  int encoder_layers = 2;
  int attention_heads = 2;
  int ffn_dim = 64;
  double init_std = 0.02;
  bool normalize_projections = true;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EncoderLayerParams {
  MatrixXd Wq, Wk, Wv, Wo;    // d x d
  MatrixXd bq, bk, bv, bo;    // 1 x d
  MatrixXd ln1_gamma, ln1_beta;  // 1 x d
  MatrixXd W1, b1;            // d x ffn, 1 x ffn
  MatrixXd W2, b2;            // ffn x d, 1 x d
  MatrixXd ln2_gamma, ln2_beta;  // 1 x d
};

// Parameters and gradients share this layout; visit() walks the tensors in a
// fixed order which defines the checkpoint and optimizer-state ordering.
struct ModelParams {
  MatrixXd embedding;  // |V| x d
  MatrixXd cls;        // 1 x d, learned [CLS] embedding
  std::vector<EncoderLayerParams> layers;
  MatrixXd proj_W1, proj_b1;  // d x proj_hidden, 1 x proj_hidden
  MatrixXd proj_W2, proj_b2;  // proj_hidden x d_p, 1 x d_p
  MatrixXd head_W, head_b;    // d x C, 1 x C

  static ModelParams zeros_like(const ModelConfig& cfg);
  static ModelParams init(const ModelConfig& cfg);

  void visit(const std::function<void(const std::string&, MatrixXd&)>& fn);
  void visit(const std::function<void(const std::string&, const MatrixXd&)>& fn) const;
  void set_zero();
  std::size_t parameter_count() const;
  bool all_finite() const;
};

using ModelGrads = ModelParams;

enum class BatchOrder { normal, reversed, mixed };

// E is (n * L) x d with the token (i, l) embedding at row i*L + l. The mask
// marks attendable positions (pad token 0 is masked out).
struct EmbeddingBatch {
  int n = 0;
  int seq_len = 0;
  MatrixXd data;
  MatrixXd mask;  // n x L, entries 0/1
  BatchOrder order_tag = BatchOrder::normal;
};

struct ProjectionBatch {
  MatrixXd Z;  // n x d_p, rows unit-norm when normalization is enabled
};

struct LogitBatch {
  MatrixXd Q;  // n x C
};

// Caches carried from forward to backward.
struct LayerCache {
  MatrixXd H_in;          // (n*T) x d, input to the layer
  MatrixXd Q, K, V;       // (n*T) x d
  std::vector<MatrixXd> attn;  // per (example, head): T x T softmax rows
  MatrixXd attn_concat;   // (n*T) x d, heads concatenated
  MatrixXd attn_out;      // (n*T) x d, after Wo
  MatrixXd ln1_xhat;      // normalized pre-scale activations
  MatrixXd ln1_inv_std;   // (n*T) x 1
  MatrixXd H_mid;         // after first LayerNorm
  MatrixXd ffn_pre;       // (n*T) x ffn, before activation
  MatrixXd ffn_act;       // (n*T) x ffn
  MatrixXd ln2_xhat;
  MatrixXd ln2_inv_std;
};

struct EncoderCache {
  int n = 0;
  int tokens = 0;  // T = L + 1 with [CLS] at position 0
  MatrixXd mask;   // n x T
  std::vector<LayerCache> layers;
  MatrixXd H_out;  // (n*T) x d, output of the final layer
};

struct ProjectorCache {
  MatrixXd R_in;      // n x d
  MatrixXd hidden_pre;
  MatrixXd hidden_act;
  MatrixXd Z_raw;     // before normalization
  MatrixXd row_norms; // n x 1
};

// One encoder/projector/classifier pass over one embedding batch.
struct StreamState {
  EmbeddingBatch E;
  EncoderCache enc;
  MatrixXd R;  // n x d [CLS] representations
  ProjectorCache proj;
  ProjectionBatch Z;
  LogitBatch Q;
};

// All logits and projections produced by one paired forward pass: plain
// source/target plus the within-language mixed variants.
struct ForwardBundle {
  StreamState source, target;
  StreamState mixed_source, mixed_target;
  double alpha = 1.0;

  int batch_size() const { return source.Z.Z.rows() > 0 ? static_cast<int>(source.Z.Z.rows()) : 0; }
};

double gelu(double x);
double gelu_grad(double x);

EmbeddingBatch embed(const MatrixXi& X, const ModelParams& params,
                     const ModelConfig& cfg);

EmbeddingBatch mix_embeddings(const EmbeddingBatch& E, double alpha);

MatrixXd encode_cls(const EmbeddingBatch& E, const ModelParams& params,
                    const ModelConfig& cfg, EncoderCache* cache = nullptr);

ProjectionBatch project(const MatrixXd& R, const ModelParams& params,
                        const ModelConfig& cfg, ProjectorCache* cache = nullptr);

LogitBatch classify(const MatrixXd& R, const ModelParams& params);

StreamState run_stream(const EmbeddingBatch& E, const ModelParams& params,
                       const ModelConfig& cfg);

ForwardBundle forward_all(const MatrixXi& X_S, const MatrixXi& X_T, double alpha,
                          const ModelParams& params, const ModelConfig& cfg);

// Backward passes. Parameter gradients accumulate into `grads`; the returned
// matrices are gradients w.r.t. the respective inputs.
MatrixXd classify_backward(const MatrixXd& dQ, const MatrixXd& R,
                           const ModelParams& params, ModelGrads& grads);

MatrixXd project_backward(const MatrixXd& dZ, const ProjectorCache& cache,
                          const ModelParams& params, const ModelConfig& cfg,
                          ModelGrads& grads);

MatrixXd encode_cls_backward(const MatrixXd& dR, const EncoderCache& cache,
                             const ModelParams& params, const ModelConfig& cfg,
                             ModelGrads& grads);

void embed_backward(const MatrixXi& X, const MatrixXd& dE, ModelGrads& grads);

// Scatters the gradient of a mixed batch back onto the normal-order batch:
// dE[i] += alpha * dMix[i] + (1 - alpha) * dMix[n-1-i].
void mix_backward(const MatrixXd& dMix, double alpha, int n, int seq_len,
                  MatrixXd& dE);

// Gradients w.r.t. the eight bundle outputs, produced by the loss layer.
struct BundleGrads {
  MatrixXd dQ_S, dQ_T, dQm_S, dQm_T;
  MatrixXd dZ_S, dZ_T, dZm_S, dZm_T;
};

// Full backward through all four streams; accumulates into `grads`.
void backward_all(const ForwardBundle& bundle, const MatrixXi& X_S,
                  const MatrixXi& X_T, const BundleGrads& dout,
                  const ModelParams& params, const ModelConfig& cfg,
                  ModelGrads& grads);

// Checkpoint container: config JSON plus flat named tensors, little-endian
// binary, byte-stable for identical inputs.
void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params);
void load_checkpoint(const std::string& path, ModelConfig& cfg, ModelParams& params);

}  // namespace musclab
