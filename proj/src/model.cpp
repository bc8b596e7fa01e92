#include "musclab/model.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "musclab/rng.hpp"

namespace musclab {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskedScore = -1e30;

MatrixXd normal_matrix(Rng& rng, int rows, int cols, double std) {
  MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal(0.0, std);
  return m;
}

// y = LN(x) rowwise with learned scale/shift; xhat and inv_std are cached for
// the backward pass.
MatrixXd layer_norm(const MatrixXd& x, const MatrixXd& gamma, const MatrixXd& beta,
                    MatrixXd& xhat, MatrixXd& inv_std) {
  const int rows = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  xhat.resize(rows, d);
  inv_std.resize(rows, 1);
  MatrixXd y(rows, d);
  for (int r = 0; r < rows; ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().sum() / d;
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std(r, 0) = is;
    xhat.row(r) = (x.row(r).array() - mean) * is;
    y.row(r) = xhat.row(r).cwiseProduct(gamma.row(0)) + beta.row(0);
  }
  return y;
}

MatrixXd layer_norm_backward(const MatrixXd& dy, const MatrixXd& xhat,
                             const MatrixXd& inv_std, const MatrixXd& gamma,
                             MatrixXd& dgamma, MatrixXd& dbeta) {
  const int rows = static_cast<int>(dy.rows());
  const int d = static_cast<int>(dy.cols());
  MatrixXd dx(rows, d);
  for (int r = 0; r < rows; ++r) {
    dgamma.row(0) += dy.row(r).cwiseProduct(xhat.row(r));
    dbeta.row(0) += dy.row(r);
    const Eigen::RowVectorXd dxhat = dy.row(r).cwiseProduct(gamma.row(0));
    const double mean_dxhat = dxhat.mean();
    const double mean_dxhat_xhat = dxhat.cwiseProduct(xhat.row(r)).mean();
    dx.row(r) = (dxhat.array() - mean_dxhat - xhat.row(r).array() * mean_dxhat_xhat) *
                inv_std(r, 0);
  }
  return dx;
}

}  // namespace

double gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (embed_dim < 1 || seq_len < 1 || proj_dim < 1 || proj_hidden < 1 || ffn_dim < 1)
    throw ConfigError("model dimensions must be >= 1");
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (encoder_layers < 0) throw ConfigError("encoder_layers must be >= 0");
  if (attention_heads < 1) throw ConfigError("attention_heads must be >= 1");
  if (embed_dim % attention_heads != 0)
    throw ConfigError("embed_dim must be divisible by attention_heads");
  if (init_std <= 0.0) throw ConfigError("init_std must be positive");
}

ModelParams ModelParams::zeros_like(const ModelConfig& cfg) {
  cfg.validate();
  ModelParams p;
  p.embedding = MatrixXd::Zero(cfg.vocab_size, cfg.embed_dim);
  p.cls = MatrixXd::Zero(1, cfg.embed_dim);
  p.layers.resize(static_cast<std::size_t>(cfg.encoder_layers));
  for (auto& layer : p.layers) {
    layer.Wq = MatrixXd::Zero(cfg.embed_dim, cfg.embed_dim);
    layer.Wk = MatrixXd::Zero(cfg.embed_dim, cfg.embed_dim);
    layer.Wv = MatrixXd::Zero(cfg.embed_dim, cfg.embed_dim);
    layer.Wo = MatrixXd::Zero(cfg.embed_dim, cfg.embed_dim);
    layer.bq = MatrixXd::Zero(1, cfg.embed_dim);
    layer.bk = MatrixXd::Zero(1, cfg.embed_dim);
    layer.bv = MatrixXd::Zero(1, cfg.embed_dim);
    layer.bo = MatrixXd::Zero(1, cfg.embed_dim);
    layer.ln1_gamma = MatrixXd::Zero(1, cfg.embed_dim);
    layer.ln1_beta = MatrixXd::Zero(1, cfg.embed_dim);
    layer.W1 = MatrixXd::Zero(cfg.embed_dim, cfg.ffn_dim);
    layer.b1 = MatrixXd::Zero(1, cfg.ffn_dim);
    layer.W2 = MatrixXd::Zero(cfg.ffn_dim, cfg.embed_dim);
    layer.b2 = MatrixXd::Zero(1, cfg.embed_dim);
    layer.ln2_gamma = MatrixXd::Zero(1, cfg.embed_dim);
    layer.ln2_beta = MatrixXd::Zero(1, cfg.embed_dim);
  }
  p.proj_W1 = MatrixXd::Zero(cfg.embed_dim, cfg.proj_hidden);
  p.proj_b1 = MatrixXd::Zero(1, cfg.proj_hidden);
  p.proj_W2 = MatrixXd::Zero(cfg.proj_hidden, cfg.proj_dim);
  p.proj_b2 = MatrixXd::Zero(1, cfg.proj_dim);
  p.head_W = MatrixXd::Zero(cfg.embed_dim, cfg.num_classes);
  p.head_b = MatrixXd::Zero(1, cfg.num_classes);
  return p;
}

ModelParams ModelParams::init(const ModelConfig& cfg) {
  ModelParams p = zeros_like(cfg);
  Rng rng(Rng::derive(cfg.seed, 7));
  const double std = cfg.init_std;
  p.embedding = normal_matrix(rng, cfg.vocab_size, cfg.embed_dim, std);
  p.cls = normal_matrix(rng, 1, cfg.embed_dim, std);
  for (auto& layer : p.layers) {
    layer.Wq = normal_matrix(rng, cfg.embed_dim, cfg.embed_dim, std);
    layer.Wk = normal_matrix(rng, cfg.embed_dim, cfg.embed_dim, std);
    layer.Wv = normal_matrix(rng, cfg.embed_dim, cfg.embed_dim, std);
    layer.Wo = normal_matrix(rng, cfg.embed_dim, cfg.embed_dim, std);
    layer.ln1_gamma.setOnes();
    layer.ln2_gamma.setOnes();
    layer.W1 = normal_matrix(rng, cfg.embed_dim, cfg.ffn_dim, std);
    layer.W2 = normal_matrix(rng, cfg.ffn_dim, cfg.embed_dim, std);
  }
  p.proj_W1 = normal_matrix(rng, cfg.embed_dim, cfg.proj_hidden, std);
  p.proj_W2 = normal_matrix(rng, cfg.proj_hidden, cfg.proj_dim, std);
  p.head_W = normal_matrix(rng, cfg.embed_dim, cfg.num_classes, std);
  return p;
}

void ModelParams::visit(const std::function<void(const std::string&, MatrixXd&)>& fn) {
  fn("embedding", embedding);
  fn("cls", cls);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "enc" + std::to_string(i) + ".";
    auto& l = layers[i];
    fn(prefix + "Wq", l.Wq);
    fn(prefix + "bq", l.bq);
    fn(prefix + "Wk", l.Wk);
    fn(prefix + "bk", l.bk);
    fn(prefix + "Wv", l.Wv);
    fn(prefix + "bv", l.bv);
    fn(prefix + "Wo", l.Wo);
    fn(prefix + "bo", l.bo);
    fn(prefix + "ln1_gamma", l.ln1_gamma);
    fn(prefix + "ln1_beta", l.ln1_beta);
    fn(prefix + "W1", l.W1);
    fn(prefix + "b1", l.b1);
    fn(prefix + "W2", l.W2);
    fn(prefix + "b2", l.b2);
    fn(prefix + "ln2_gamma", l.ln2_gamma);
    fn(prefix + "ln2_beta", l.ln2_beta);
  }
  fn("proj.W1", proj_W1);
  fn("proj.b1", proj_b1);
  fn("proj.W2", proj_W2);
  fn("proj.b2", proj_b2);
  fn("head.W", head_W);
  fn("head.b", head_b);
}

void ModelParams::visit(
    const std::function<void(const std::string&, const MatrixXd&)>& fn) const {
  const_cast<ModelParams*>(this)->visit(
      [&fn](const std::string& name, MatrixXd& m) { fn(name, m); });
}

void ModelParams::set_zero() {
  visit([](const std::string&, MatrixXd& m) { m.setZero(); });
}

std::size_t ModelParams::parameter_count() const {
  std::size_t count = 0;
  visit([&count](const std::string&, const MatrixXd& m) {
    count += static_cast<std::size_t>(m.size());
  });
  return count;
}

bool ModelParams::all_finite() const {
  bool finite = true;
  visit([&finite](const std::string&, const MatrixXd& m) {
    if (!m.allFinite()) finite = false;
  });
  return finite;
}

EmbeddingBatch embed(const MatrixXi& X, const ModelParams& params,
                     const ModelConfig& cfg) {
  const int n = static_cast<int>(X.rows());
  const int L = static_cast<int>(X.cols());
  EmbeddingBatch batch;
  batch.n = n;
  batch.seq_len = L;
  batch.order_tag = BatchOrder::normal;
  batch.data.resize(n * L, cfg.embed_dim);
  batch.mask.resize(n, L);
  for (int i = 0; i < n; ++i) {
    for (int l = 0; l < L; ++l) {
      const int token = X(i, l);
      if (token < 0 || token >= cfg.vocab_size)
        throw UsageError("token id out of range: " + std::to_string(token));
      batch.data.row(i * L + l) = params.embedding.row(token);
      batch.mask(i, l) = token == 0 ? 0.0 : 1.0;
    }
  }
  return batch;
}

EmbeddingBatch mix_embeddings(const EmbeddingBatch& E, double alpha) {
  if (alpha < 0.0 || alpha > 1.0)
    throw UsageError("mix coefficient alpha must be in [0,1]");
  if (E.order_tag != BatchOrder::normal)
    throw UsageError("mix_embeddings expects a normal-order batch");
  EmbeddingBatch mixed;
  mixed.n = E.n;
  mixed.seq_len = E.seq_len;
  mixed.order_tag = BatchOrder::mixed;
  mixed.data.resize(E.data.rows(), E.data.cols());
  mixed.mask.resize(E.n, E.seq_len);
  const int L = E.seq_len;
  for (int i = 0; i < E.n; ++i) {
    const int j = E.n - 1 - i;
    mixed.data.middleRows(i * L, L) = alpha * E.data.middleRows(i * L, L) +
                                      (1.0 - alpha) * E.data.middleRows(j * L, L);
    // A position is attendable if it is attendable in either constituent.
    mixed.mask.row(i) = E.mask.row(i).cwiseMax(E.mask.row(j));
  }
  return mixed;
}

MatrixXd encode_cls(const EmbeddingBatch& E, const ModelParams& params,
                    const ModelConfig& cfg, EncoderCache* cache) {
  EncoderCache local;
  EncoderCache& c = cache ? *cache : local;
  const int n = E.n;
  const int L = E.seq_len;
  const int T = L + 1;
  const int d = cfg.embed_dim;
  const int heads = cfg.attention_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  c.n = n;
  c.tokens = T;
  c.mask.resize(n, T);
  for (int i = 0; i < n; ++i) {
    c.mask(i, 0) = 1.0;  // [CLS] always attendable
    for (int l = 0; l < L; ++l) c.mask(i, 1 + l) = E.mask(i, l);
  }

  MatrixXd H(n * T, d);
  for (int i = 0; i < n; ++i) {
    H.row(i * T) = params.cls.row(0);
    H.middleRows(i * T + 1, L) = E.data.middleRows(i * L, L);
  }

  c.layers.resize(static_cast<std::size_t>(cfg.encoder_layers));
  for (int layer_idx = 0; layer_idx < cfg.encoder_layers; ++layer_idx) {
    const auto& p = params.layers[static_cast<std::size_t>(layer_idx)];
    LayerCache& lc = c.layers[static_cast<std::size_t>(layer_idx)];
    lc.H_in = H;

    lc.Q = (H * p.Wq).rowwise() + p.bq.row(0);
    lc.K = (H * p.Wk).rowwise() + p.bk.row(0);
    lc.V = (H * p.Wv).rowwise() + p.bv.row(0);

    lc.attn.assign(static_cast<std::size_t>(n * heads), MatrixXd());
    lc.attn_concat.resize(n * T, d);
    for (int i = 0; i < n; ++i) {
      for (int h = 0; h < heads; ++h) {
        const auto Qi = lc.Q.block(i * T, h * dh, T, dh);
        const auto Ki = lc.K.block(i * T, h * dh, T, dh);
        const auto Vi = lc.V.block(i * T, h * dh, T, dh);
        MatrixXd scores = Qi * Ki.transpose() * scale;
        for (int t = 0; t < T; ++t)
          if (c.mask(i, t) == 0.0) scores.col(t).setConstant(kMaskedScore);
        MatrixXd& A = lc.attn[static_cast<std::size_t>(i * heads + h)];
        A.resize(T, T);
        for (int r = 0; r < T; ++r) {
          const double m = scores.row(r).maxCoeff();
          Eigen::RowVectorXd e = (scores.row(r).array() - m).exp();
          A.row(r) = e / e.sum();
        }
        lc.attn_concat.block(i * T, h * dh, T, dh) = A * Vi;
      }
    }
    lc.attn_out = (lc.attn_concat * p.Wo).rowwise() + p.bo.row(0);

    const MatrixXd res1 = H + lc.attn_out;
    lc.H_mid = layer_norm(res1, p.ln1_gamma, p.ln1_beta, lc.ln1_xhat, lc.ln1_inv_std);

    lc.ffn_pre = (lc.H_mid * p.W1).rowwise() + p.b1.row(0);
    lc.ffn_act = lc.ffn_pre.unaryExpr([](double v) { return gelu(v); });
    const MatrixXd ffn_out = (lc.ffn_act * p.W2).rowwise() + p.b2.row(0);

    const MatrixXd res2 = lc.H_mid + ffn_out;
    H = layer_norm(res2, p.ln2_gamma, p.ln2_beta, lc.ln2_xhat, lc.ln2_inv_std);
  }

  c.H_out = H;
  MatrixXd R(n, d);
  for (int i = 0; i < n; ++i) R.row(i) = H.row(i * T);
  return R;
}

ProjectionBatch project(const MatrixXd& R, const ModelParams& params,
                        const ModelConfig& cfg, ProjectorCache* cache) {
  ProjectorCache local;
  ProjectorCache& c = cache ? *cache : local;
  c.R_in = R;
  c.hidden_pre = (R * params.proj_W1).rowwise() + params.proj_b1.row(0);
  c.hidden_act = c.hidden_pre.unaryExpr([](double v) { return gelu(v); });
  c.Z_raw = (c.hidden_act * params.proj_W2).rowwise() + params.proj_b2.row(0);

  ProjectionBatch out;
  if (!cfg.normalize_projections) {
    c.row_norms = MatrixXd::Ones(R.rows(), 1);
    out.Z = c.Z_raw;
    return out;
  }
  const int n = static_cast<int>(R.rows());
  c.row_norms.resize(n, 1);
  out.Z.resize(n, cfg.proj_dim);
  for (int i = 0; i < n; ++i) {
    const double norm = c.Z_raw.row(i).norm();
    if (norm < 1e-12)
      throw DivergenceError("projection row has vanishing norm");
    c.row_norms(i, 0) = norm;
    out.Z.row(i) = c.Z_raw.row(i) / norm;
  }
  return out;
}

LogitBatch classify(const MatrixXd& R, const ModelParams& params) {
  LogitBatch out;
  out.Q = (R * params.head_W).rowwise() + params.head_b.row(0);
  return out;
}

StreamState run_stream(const EmbeddingBatch& E, const ModelParams& params,
                       const ModelConfig& cfg) {
  StreamState s;
  s.E = E;
  s.R = encode_cls(E, params, cfg, &s.enc);
  s.Z = project(s.R, params, cfg, &s.proj);
  s.Q = classify(s.R, params);
  return s;
}

ForwardBundle forward_all(const MatrixXi& X_S, const MatrixXi& X_T, double alpha,
                          const ModelParams& params, const ModelConfig& cfg) {
  if (X_S.rows() != X_T.rows())
    throw UsageError("paired batches must have equal size");
  ForwardBundle b;
  b.alpha = alpha;
  const EmbeddingBatch E_S = embed(X_S, params, cfg);
  const EmbeddingBatch E_T = embed(X_T, params, cfg);
  // MixUp stays within each language: each stream mixes with its own
  // batch-reversed view.
  b.source = run_stream(E_S, params, cfg);
  b.target = run_stream(E_T, params, cfg);
  b.mixed_source = run_stream(mix_embeddings(E_S, alpha), params, cfg);
  b.mixed_target = run_stream(mix_embeddings(E_T, alpha), params, cfg);
  return b;
}

MatrixXd classify_backward(const MatrixXd& dQ, const MatrixXd& R,
                           const ModelParams& params, ModelGrads& grads) {
  grads.head_W += R.transpose() * dQ;
  grads.head_b.row(0) += dQ.colwise().sum();
  return dQ * params.head_W.transpose();
}

MatrixXd project_backward(const MatrixXd& dZ, const ProjectorCache& cache,
                          const ModelParams& params, const ModelConfig& cfg,
                          ModelGrads& grads) {
  MatrixXd dZraw;
  if (cfg.normalize_projections) {
    const int n = static_cast<int>(dZ.rows());
    dZraw.resize(n, dZ.cols());
    for (int i = 0; i < n; ++i) {
      const double norm = cache.row_norms(i, 0);
      const Eigen::RowVectorXd z = cache.Z_raw.row(i) / norm;
      const double dot = dZ.row(i).dot(z);
      dZraw.row(i) = (dZ.row(i) - dot * z) / norm;
    }
  } else {
    dZraw = dZ;
  }
  grads.proj_W2 += cache.hidden_act.transpose() * dZraw;
  grads.proj_b2.row(0) += dZraw.colwise().sum();
  MatrixXd dhidden = dZraw * params.proj_W2.transpose();
  dhidden.array() *= cache.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
  grads.proj_W1 += cache.R_in.transpose() * dhidden;
  grads.proj_b1.row(0) += dhidden.colwise().sum();
  return dhidden * params.proj_W1.transpose();
}

MatrixXd encode_cls_backward(const MatrixXd& dR, const EncoderCache& cache,
                             const ModelParams& params, const ModelConfig& cfg,
                             ModelGrads& grads) {
  const int n = cache.n;
  const int T = cache.tokens;
  const int L = T - 1;
  const int d = cfg.embed_dim;
  const int heads = cfg.attention_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  MatrixXd dH = MatrixXd::Zero(n * T, d);
  for (int i = 0; i < n; ++i) dH.row(i * T) = dR.row(i);

  for (int layer_idx = cfg.encoder_layers - 1; layer_idx >= 0; --layer_idx) {
    const auto& p = params.layers[static_cast<std::size_t>(layer_idx)];
    auto& g = grads.layers[static_cast<std::size_t>(layer_idx)];
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(layer_idx)];

    // H_out = LN2(H_mid + FFN(H_mid))
    const MatrixXd dres2 = layer_norm_backward(dH, lc.ln2_xhat, lc.ln2_inv_std,
                                               p.ln2_gamma, g.ln2_gamma, g.ln2_beta);
    MatrixXd dH_mid = dres2;
    g.W2 += lc.ffn_act.transpose() * dres2;
    g.b2.row(0) += dres2.colwise().sum();
    MatrixXd dffn = dres2 * p.W2.transpose();
    dffn.array() *= lc.ffn_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    g.W1 += lc.H_mid.transpose() * dffn;
    g.b1.row(0) += dffn.colwise().sum();
    dH_mid += dffn * p.W1.transpose();

    // H_mid = LN1(H_in + attention(H_in))
    const MatrixXd dres1 = layer_norm_backward(dH_mid, lc.ln1_xhat, lc.ln1_inv_std,
                                               p.ln1_gamma, g.ln1_gamma, g.ln1_beta);
    MatrixXd dH_in = dres1;

    g.Wo += lc.attn_concat.transpose() * dres1;
    g.bo.row(0) += dres1.colwise().sum();
    const MatrixXd dconcat = dres1 * p.Wo.transpose();

    MatrixXd dQ = MatrixXd::Zero(n * T, d);
    MatrixXd dK = MatrixXd::Zero(n * T, d);
    MatrixXd dV = MatrixXd::Zero(n * T, d);
    for (int i = 0; i < n; ++i) {
      for (int h = 0; h < heads; ++h) {
        const MatrixXd& A = lc.attn[static_cast<std::size_t>(i * heads + h)];
        const auto dO = dconcat.block(i * T, h * dh, T, dh);
        const auto Qi = lc.Q.block(i * T, h * dh, T, dh);
        const auto Ki = lc.K.block(i * T, h * dh, T, dh);
        const auto Vi = lc.V.block(i * T, h * dh, T, dh);

        dV.block(i * T, h * dh, T, dh) += A.transpose() * dO;
        const MatrixXd dA = dO * Vi.transpose();
        // softmax rows: dS = A .* (dA - rowsum(dA .* A))
        MatrixXd dS(T, T);
        for (int r = 0; r < T; ++r) {
          const double dot = dA.row(r).dot(A.row(r));
          dS.row(r) = A.row(r).cwiseProduct(dA.row(r).array() - dot);
        }
        dQ.block(i * T, h * dh, T, dh) += dS * Ki * scale;
        dK.block(i * T, h * dh, T, dh) += dS.transpose() * Qi * scale;
      }
    }

    g.Wq += lc.H_in.transpose() * dQ;
    g.bq.row(0) += dQ.colwise().sum();
    g.Wk += lc.H_in.transpose() * dK;
    g.bk.row(0) += dK.colwise().sum();
    g.Wv += lc.H_in.transpose() * dV;
    g.bv.row(0) += dV.colwise().sum();
    dH_in += dQ * p.Wq.transpose() + dK * p.Wk.transpose() + dV * p.Wv.transpose();

    dH = dH_in;
  }

  MatrixXd dE(n * L, d);
  for (int i = 0; i < n; ++i) {
    grads.cls.row(0) += dH.row(i * T);
    dE.middleRows(i * L, L) = dH.middleRows(i * T + 1, L);
  }
  return dE;
}

void embed_backward(const MatrixXi& X, const MatrixXd& dE, ModelGrads& grads) {
  const int n = static_cast<int>(X.rows());
  const int L = static_cast<int>(X.cols());
  for (int i = 0; i < n; ++i)
    for (int l = 0; l < L; ++l)
      grads.embedding.row(X(i, l)) += dE.row(i * L + l);
}

void mix_backward(const MatrixXd& dMix, double alpha, int n, int seq_len,
                  MatrixXd& dE) {
  for (int i = 0; i < n; ++i) {
    const int j = n - 1 - i;
    dE.middleRows(i * seq_len, seq_len) +=
        alpha * dMix.middleRows(i * seq_len, seq_len) +
        (1.0 - alpha) * dMix.middleRows(j * seq_len, seq_len);
  }
}

void backward_all(const ForwardBundle& bundle, const MatrixXi& X_S,
                  const MatrixXi& X_T, const BundleGrads& dout,
                  const ModelParams& params, const ModelConfig& cfg,
                  ModelGrads& grads) {
  const int n = bundle.source.E.n;
  const int L = bundle.source.E.seq_len;
  const double alpha = bundle.alpha;

  const auto stream_backward = [&](const StreamState& s, const MatrixXd& dQ,
                                   const MatrixXd& dZ) -> MatrixXd {
    MatrixXd dR = classify_backward(dQ, s.R, params, grads);
    dR += project_backward(dZ, s.proj, params, cfg, grads);
    return encode_cls_backward(dR, s.enc, params, cfg, grads);
  };

  MatrixXd dE_S = stream_backward(bundle.source, dout.dQ_S, dout.dZ_S);
  MatrixXd dE_T = stream_backward(bundle.target, dout.dQ_T, dout.dZ_T);
  const MatrixXd dEm_S = stream_backward(bundle.mixed_source, dout.dQm_S, dout.dZm_S);
  const MatrixXd dEm_T = stream_backward(bundle.mixed_target, dout.dQm_T, dout.dZm_T);

  mix_backward(dEm_S, alpha, n, L, dE_S);
  mix_backward(dEm_T, alpha, n, L, dE_T);

  embed_backward(X_S, dE_S, grads);
  embed_backward(X_T, dE_T, grads);
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char buf[4];
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

double read_f64(std::istream& in) {
  unsigned char buf[8];
  in.read(reinterpret_cast<char*>(buf), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

constexpr char kCheckpointMagic[8] = {'M', 'U', 'S', 'C', 'K', 'P', 'T', '1'};

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return nlohmann::json{{"vocab_size", cfg.vocab_size},
                        {"embed_dim", cfg.embed_dim},
                        {"seq_len", cfg.seq_len},
                        {"proj_dim", cfg.proj_dim},
                        {"proj_hidden", cfg.proj_hidden},
                        {"num_classes", cfg.num_classes},
                        {"encoder_layers", cfg.encoder_layers},
                        {"attention_heads", cfg.attention_heads},
                        {"ffn_dim", cfg.ffn_dim},
                        {"init_std", cfg.init_std},
                        {"normalize_projections", cfg.normalize_projections},
                        {"seed", cfg.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.seq_len = j.at("seq_len").get<int>();
  cfg.proj_dim = j.at("proj_dim").get<int>();
  cfg.proj_hidden = j.at("proj_hidden").get<int>();
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.encoder_layers = j.at("encoder_layers").get<int>();
  cfg.attention_heads = j.at("attention_heads").get<int>();
  cfg.ffn_dim = j.at("ffn_dim").get<int>();
  cfg.init_std = j.at("init_std").get<double>();
  cfg.normalize_projections = j.at("normalize_projections").get<bool>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

}  // namespace

void save_checkpoint(const std::string& path, const ModelConfig& cfg,
                     const ModelParams& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  const std::string config_text = model_config_to_json(cfg).dump();
  write_u32(out, static_cast<std::uint32_t>(config_text.size()));
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));

  std::uint32_t tensor_count = 0;
  params.visit([&tensor_count](const std::string&, const MatrixXd&) { ++tensor_count; });
  write_u32(out, tensor_count);
  params.visit([&out](const std::string& name, const MatrixXd& m) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(m.rows()));
    write_u32(out, static_cast<std::uint32_t>(m.cols()));
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) write_f64(out, m(r, c));
  });
  if (!out) throw IoError("checkpoint write failed: " + path);
}

void load_checkpoint(const std::string& path, ModelConfig& cfg, ModelParams& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw IoError("not a checkpoint file: " + path);
  const std::uint32_t config_len = read_u32(in);
  std::string config_text(config_len, '\0');
  in.read(config_text.data(), config_len);
  cfg = model_config_from_json(nlohmann::json::parse(config_text));
  params = ModelParams::zeros_like(cfg);

  const std::uint32_t tensor_count = read_u32(in);
  std::uint32_t seen = 0;
  params.visit([&](const std::string& name, MatrixXd& m) {
    const std::uint32_t name_len = read_u32(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    if (stored != name || rows != static_cast<std::uint32_t>(m.rows()) ||
        cols != static_cast<std::uint32_t>(m.cols()))
      throw IoError("checkpoint tensor mismatch at " + name);
    for (std::uint32_t r = 0; r < rows; ++r)
      for (std::uint32_t c = 0; c < cols; ++c)
        m(static_cast<int>(r), static_cast<int>(c)) = read_f64(in);
    ++seen;
  });
  if (seen != tensor_count || !in)
    throw IoError("checkpoint truncated or tensor count mismatch: " + path);
}

}  // namespace musclab
