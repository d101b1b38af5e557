#pragma once

// Decoder-only transformer with pre-layer-norm residual blocks, learned
// positional embeddings, a tied output head, and an exact analytic backward
// pass. Everything is templated on the scalar so the same code runs in
// float for training and double for gradient verification.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dialogen/bpe.hpp"
#include "dialogen/error.hpp"
#include "dialogen/rng.hpp"
#include "json.hpp"

namespace dialogen::model {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

struct ModelConfig {
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int context_len = 256;
  int vocab_size = 2048;
  int ffn_mult = 4;

  void validate() const {
    if (n_layers <= 0 || d_model <= 0 || n_heads <= 0 || context_len <= 0 ||
        vocab_size <= 0 || ffn_mult <= 0)
      throw UsageError("model config fields must be positive");
    if (d_model % n_heads != 0)
      throw UsageError("d_model must be divisible by n_heads");
  }

  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::ordered_json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},       {"d_model", c.d_model},
       {"n_heads", c.n_heads},         {"context_len", c.context_len},
       {"vocab_size", c.vocab_size},   {"ffn_mult", c.ffn_mult}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.ffn_mult = j.at("ffn_mult").get<int>();
  c.validate();
  return c;
}

template <typename Scalar>
struct LayerParams {
  Mat<Scalar> w_qkv;   // [d, 3d]
  Mat<Scalar> w_o;     // [d, d], residual-branch projection
  Mat<Scalar> w_fc1;   // [d, f*d]
  Mat<Scalar> w_fc2;   // [f*d, d], residual-branch projection
  Mat<Scalar> ln1_scale, ln1_shift;  // [1, d]
  Mat<Scalar> ln2_scale, ln2_shift;  // [1, d]
};

template <typename Scalar>
struct TransformerParams {
  ModelConfig config;
  Mat<Scalar> wte;  // [V, d]; also the tied output head
  Mat<Scalar> wpe;  // [ctx, d]
  std::vector<LayerParams<Scalar>> layers;
  Mat<Scalar> lnf_scale, lnf_shift;  // [1, d]
};

template <typename Scalar>
struct TensorRef {
  std::string name;
  Mat<Scalar>* tensor;
};

template <typename Scalar>
std::vector<TensorRef<Scalar>> tensor_refs(TransformerParams<Scalar>& p) {
  std::vector<TensorRef<Scalar>> refs;
  refs.push_back({"wte", &p.wte});
  refs.push_back({"wpe", &p.wpe});
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string pfx = "layers." + std::to_string(l) + ".";
    auto& layer = p.layers[l];
    refs.push_back({pfx + "w_qkv", &layer.w_qkv});
    refs.push_back({pfx + "w_o", &layer.w_o});
    refs.push_back({pfx + "w_fc1", &layer.w_fc1});
    refs.push_back({pfx + "w_fc2", &layer.w_fc2});
    refs.push_back({pfx + "ln1_scale", &layer.ln1_scale});
    refs.push_back({pfx + "ln1_shift", &layer.ln1_shift});
    refs.push_back({pfx + "ln2_scale", &layer.ln2_scale});
    refs.push_back({pfx + "ln2_shift", &layer.ln2_shift});
  }
  refs.push_back({"ln_f.scale", &p.lnf_scale});
  refs.push_back({"ln_f.shift", &p.lnf_shift});
  return refs;
}

template <typename Scalar>
TransformerParams<Scalar> zeros_like_params(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model;
  TransformerParams<Scalar> p;
  p.config = config;
  p.wte = Mat<Scalar>::Zero(config.vocab_size, d);
  p.wpe = Mat<Scalar>::Zero(config.context_len, d);
  p.layers.resize(config.n_layers);
  for (auto& layer : p.layers) {
    layer.w_qkv = Mat<Scalar>::Zero(d, 3 * d);
    layer.w_o = Mat<Scalar>::Zero(d, d);
    layer.w_fc1 = Mat<Scalar>::Zero(d, config.ffn_mult * d);
    layer.w_fc2 = Mat<Scalar>::Zero(config.ffn_mult * d, d);
    layer.ln1_scale = Mat<Scalar>::Zero(1, d);
    layer.ln1_shift = Mat<Scalar>::Zero(1, d);
    layer.ln2_scale = Mat<Scalar>::Zero(1, d);
    layer.ln2_shift = Mat<Scalar>::Zero(1, d);
  }
  p.lnf_scale = Mat<Scalar>::Zero(1, d);
  p.lnf_shift = Mat<Scalar>::Zero(1, d);
  return p;
}

// Gaussian init with std 0.02; residual-branch output projections (w_o and
// w_fc2) are scaled by 1/sqrt(2 * n_layers) so the residual stream variance
// stays depth-independent. Layer norms start at identity.
template <typename Scalar>
TransformerParams<Scalar> init_params(const ModelConfig& config,
                                      std::uint64_t seed) {
  auto p = zeros_like_params<Scalar>(config);
  Rng rng(seed);
  const double base_std = 0.02;
  const double residual_std = base_std / std::sqrt(2.0 * config.n_layers);
  for (auto& ref : tensor_refs(p)) {
    if (ref.name.find("ln") != std::string::npos) continue;
    const bool residual_proj = ref.name.ends_with("w_o") ||
                               ref.name.ends_with("w_fc2");
    const double std = residual_proj ? residual_std : base_std;
    auto& t = *ref.tensor;
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c)
        t(r, c) = static_cast<Scalar>(rng.normal(0.0, std));
  }
  for (auto& layer : p.layers) {
    layer.ln1_scale.setOnes();
    layer.ln2_scale.setOnes();
  }
  p.lnf_scale.setOnes();
  return p;
}

constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
struct LayerCache {
  Mat<Scalar> x_in;                 // [T, d] residual stream entering block
  Mat<Scalar> ln1_xhat, ln1_out;    // [T, d]
  Vec<Scalar> ln1_rstd;             // [T]
  Mat<Scalar> qkv;                  // [T, 3d]
  std::vector<Mat<Scalar>> att;     // per head [T, T]; row t holds cols 0..t
  Mat<Scalar> att_out;              // [T, d] heads concatenated
  Mat<Scalar> x_mid;                // [T, d] after attention residual
  Mat<Scalar> ln2_xhat, ln2_out;    // [T, d]
  Vec<Scalar> ln2_rstd;
  Mat<Scalar> ffn_pre, ffn_act;     // [T, f*d]
};

template <typename Scalar>
struct ForwardResult {
  std::vector<int> ids;
  Mat<Scalar> logits;  // [T, V]
  std::vector<LayerCache<Scalar>> caches;
  Mat<Scalar> lnf_xhat;  // [T, d]
  Vec<Scalar> lnf_rstd;  // [T]
  Mat<Scalar> h_final;   // [T, d] input to the tied head
};

namespace detail {

template <typename Scalar>
Scalar gelu(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(M_SQRT1_2)));
  const Scalar pdf =
      std::exp(Scalar(-0.5) * x * x) * Scalar(0.3989422804014326779);
  return cdf + x * pdf;
}

// y = (x - mean) * rstd .* scale + shift, applied per row.
template <typename Scalar>
void layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& scale,
                const Mat<Scalar>& shift, Mat<Scalar>& xhat, Vec<Scalar>& rstd,
                Mat<Scalar>& out) {
  const Eigen::Index rows = x.rows(), d = x.cols();
  xhat.resize(rows, d);
  rstd.resize(rows);
  out.resize(rows, d);
  for (Eigen::Index t = 0; t < rows; ++t) {
    const Scalar mean = x.row(t).mean();
    const auto centered = (x.row(t).array() - mean).eval();
    const Scalar var = centered.square().sum() / Scalar(d);
    const Scalar r = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    rstd(t) = r;
    xhat.row(t) = (centered * r).matrix();
    out.row(t) =
        xhat.row(t).cwiseProduct(scale.row(0)) + shift.row(0);
  }
}

// Backward of layer_norm; accumulates into dscale/dshift, returns dx.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& xhat,
                                const Vec<Scalar>& rstd,
                                const Mat<Scalar>& scale, Mat<Scalar>& dscale,
                                Mat<Scalar>& dshift) {
  const Eigen::Index rows = dy.rows(), d = dy.cols();
  Mat<Scalar> dx(rows, d);
  for (Eigen::Index t = 0; t < rows; ++t) {
    dscale.row(0) += dy.row(t).cwiseProduct(xhat.row(t));
    dshift.row(0) += dy.row(t);
    const auto dxhat = dy.row(t).cwiseProduct(scale.row(0)).eval();
    const Scalar m1 = dxhat.mean();
    const Scalar m2 = dxhat.cwiseProduct(xhat.row(t)).mean();
    dx.row(t) =
        ((dxhat.array() - m1 - xhat.row(t).array() * m2) * rstd(t)).matrix();
  }
  return dx;
}

inline void check_input(const ModelConfig& config, const std::vector<int>& ids) {
  if (ids.empty()) throw UsageError("forward on an empty sequence");
  if (static_cast<int>(ids.size()) > config.context_len)
    throw UsageError("input of length " + std::to_string(ids.size()) +
                     " exceeds context window " +
                     std::to_string(config.context_len));
  for (int id : ids)
    if (id < 0 || id >= config.vocab_size)
      throw UsageError("token id " + std::to_string(id) +
                       " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
}

}  // namespace detail

// Causal forward pass. Attention for position t is computed over rows
// 0..t only, so logits at t are bit-identical under any change to later
// ids. When `cache` is non-null every intermediate needed by the backward
// pass is stored there.
template <typename Scalar>
Mat<Scalar> forward_logits(const TransformerParams<Scalar>& params,
                           const std::vector<int>& ids,
                           ForwardResult<Scalar>* cache = nullptr) {
  detail::check_input(params.config, ids);
  const int T = static_cast<int>(ids.size());
  const int d = params.config.d_model;
  const int heads = params.config.n_heads;
  const int dh = params.config.head_dim();
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(Scalar(dh));

  Mat<Scalar> x(T, d);
  for (int t = 0; t < T; ++t)
    x.row(t) = params.wte.row(ids[t]) + params.wpe.row(t);

  if (cache) {
    cache->ids = ids;
    cache->caches.assign(params.layers.size(), {});
  }

  Mat<Scalar> ln_xhat, ln_out;
  Vec<Scalar> ln_rstd;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    LayerCache<Scalar>* lc = cache ? &cache->caches[l] : nullptr;
    if (lc) lc->x_in = x;

    detail::layer_norm(x, layer.ln1_scale, layer.ln1_shift, ln_xhat, ln_rstd,
                       ln_out);
    Mat<Scalar> qkv(T, 3 * d);
    qkv.noalias() = ln_out * layer.w_qkv;
    if (lc) {
      lc->ln1_xhat = ln_xhat;
      lc->ln1_rstd = ln_rstd;
      lc->ln1_out = ln_out;
      lc->qkv = qkv;
      lc->att.assign(heads, Mat<Scalar>::Zero(T, T));
    }

    Mat<Scalar> att_out(T, d);
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(0, h * dh, T, dh);
      const auto k = qkv.block(0, d + h * dh, T, dh);
      const auto v = qkv.block(0, 2 * d + h * dh, T, dh);
      for (int t = 0; t < T; ++t) {
        const int span = t + 1;
        Vec<Scalar> scores(span);
        scores.noalias() = k.topRows(span) * q.row(t).transpose();
        scores *= inv_sqrt_dh;
        const Scalar max_score = scores.maxCoeff();
        Vec<Scalar> probs = (scores.array() - max_score).exp().matrix();
        double z = 0.0;
        for (int j = 0; j < span; ++j) z += static_cast<double>(probs(j));
        probs /= static_cast<Scalar>(z);
        att_out.row(t).segment(h * dh, dh).noalias() =
            probs.transpose() * v.topRows(span);
        if (lc) lc->att[h].row(t).head(span) = probs.transpose();
      }
    }
    x.noalias() += att_out * layer.w_o;
    if (lc) {
      lc->att_out = att_out;
      lc->x_mid = x;
    }

    detail::layer_norm(x, layer.ln2_scale, layer.ln2_shift, ln_xhat, ln_rstd,
                       ln_out);
    Mat<Scalar> ffn_pre(T, params.config.ffn_mult * d);
    ffn_pre.noalias() = ln_out * layer.w_fc1;
    Mat<Scalar> ffn_act =
        ffn_pre.unaryExpr([](Scalar v) { return detail::gelu(v); });
    x.noalias() += ffn_act * layer.w_fc2;
    if (lc) {
      lc->ln2_xhat = ln_xhat;
      lc->ln2_rstd = ln_rstd;
      lc->ln2_out = ln_out;
      lc->ffn_pre = ffn_pre;
      lc->ffn_act = ffn_act;
    }
  }

  detail::layer_norm(x, params.lnf_scale, params.lnf_shift, ln_xhat, ln_rstd,
                     ln_out);
  Mat<Scalar> logits(T, params.config.vocab_size);
  logits.noalias() = ln_out * params.wte.transpose();
  if (cache) {
    cache->lnf_xhat = ln_xhat;
    cache->lnf_rstd = ln_rstd;
    cache->h_final = ln_out;
    cache->logits = logits;
  }
  return logits;
}

template <typename Scalar>
ForwardResult<Scalar> forward(const TransformerParams<Scalar>& params,
                              const std::vector<int>& ids) {
  ForwardResult<Scalar> result;
  forward_logits(params, ids, &result);
  return result;
}

// Log-softmax of one logits row, with the normalizer accumulated in double.
template <typename Derived>
Eigen::VectorXd row_log_softmax(const Eigen::MatrixBase<Derived>& row) {
  Eigen::VectorXd r = row.template cast<double>().reshaped();
  const double max_logit = r.maxCoeff();
  const double z = (r.array() - max_logit).exp().sum();
  return (r.array() - max_logit - std::log(z)).matrix();
}

enum class MaskMode { kFull, kTargetOnly };

inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "full") return MaskMode::kFull;
  if (s == "target_only") return MaskMode::kTargetOnly;
  throw UsageError("unknown mask mode: " + s);
}

// Index of the first token that is scored as a prediction target. Token 0
// has no context and is never scored; target_only starts at the boundary.
inline int first_scored_token(const bpe::TokenSequence& seq, MaskMode mode) {
  const int n = static_cast<int>(seq.ids.size());
  if (seq.boundary < 0 || seq.boundary > n)
    throw UsageError("token sequence boundary out of range");
  return mode == MaskMode::kTargetOnly ? std::max(seq.boundary, 1) : 1;
}

// Mean negative log-likelihood over scored tokens; gradients of it, scaled
// by `weight`, are accumulated into `grads`. Returns the loss.
template <typename Scalar>
double accumulate_loss_grads(const TransformerParams<Scalar>& params,
                             const bpe::TokenSequence& seq, MaskMode mode,
                             double weight, TransformerParams<Scalar>& grads) {
  const int n = static_cast<int>(seq.ids.size());
  if (n < 2) throw UsageError("loss requires a sequence of length >= 2");
  const int start = first_scored_token(seq, mode);
  if (start >= n) throw UsageError("all positions are masked");
  const int n_scored = n - start;

  ForwardResult<Scalar> fwd = forward(params, seq.ids);
  const int T = n;
  const int V = params.config.vocab_size;
  const int d = params.config.d_model;
  const int heads = params.config.n_heads;
  const int dh = params.config.head_dim();
  const Scalar inv_sqrt_dh = Scalar(1) / std::sqrt(Scalar(dh));

  // Cross-entropy over scored rows; dlogits = (softmax - onehot) / n_scored.
  double loss = 0.0;
  Mat<Scalar> dlogits = Mat<Scalar>::Zero(T, V);
  for (int tok = start; tok < n; ++tok) {
    const int row = tok - 1;
    const Eigen::VectorXd logp = row_log_softmax(fwd.logits.row(row));
    loss -= logp(seq.ids[tok]);
    const Eigen::VectorXd p = logp.array().exp().matrix();
    dlogits.row(row) =
        (p * (weight / n_scored)).cast<Scalar>().transpose();
    dlogits(row, seq.ids[tok]) -= static_cast<Scalar>(weight / n_scored);
  }
  loss /= n_scored;

  // Tied head: logits = h_final * wte^T.
  grads.wte.noalias() += dlogits.transpose() * fwd.h_final;
  Mat<Scalar> dx(T, d);
  dx.noalias() = dlogits * params.wte;

  dx = detail::layer_norm_backward(dx, fwd.lnf_xhat, fwd.lnf_rstd,
                                   params.lnf_scale, grads.lnf_scale,
                                   grads.lnf_shift);

  for (int l = static_cast<int>(params.layers.size()) - 1; l >= 0; --l) {
    const auto& layer = params.layers[l];
    auto& glayer = grads.layers[l];
    const auto& lc = fwd.caches[l];

    // FFN block: x = x_mid + gelu(ln2(x_mid) * w_fc1) * w_fc2
    Mat<Scalar> dffn_act(T, params.config.ffn_mult * d);
    dffn_act.noalias() = dx * layer.w_fc2.transpose();
    glayer.w_fc2.noalias() += lc.ffn_act.transpose() * dx;
    Mat<Scalar> dffn_pre = dffn_act.binaryExpr(
        lc.ffn_pre,
        [](Scalar g, Scalar x) { return g * detail::gelu_grad(x); });
    Mat<Scalar> dln2_out(T, d);
    dln2_out.noalias() = dffn_pre * layer.w_fc1.transpose();
    glayer.w_fc1.noalias() += lc.ln2_out.transpose() * dffn_pre;
    dx += detail::layer_norm_backward(dln2_out, lc.ln2_xhat, lc.ln2_rstd,
                                      layer.ln2_scale, glayer.ln2_scale,
                                      glayer.ln2_shift);

    // Attention block: x_mid = x_in + att_out * w_o
    Mat<Scalar> datt_out(T, d);
    datt_out.noalias() = dx * layer.w_o.transpose();
    glayer.w_o.noalias() += lc.att_out.transpose() * dx;

    Mat<Scalar> dqkv = Mat<Scalar>::Zero(T, 3 * d);
    for (int h = 0; h < heads; ++h) {
      const auto q = lc.qkv.block(0, h * dh, T, dh);
      const auto k = lc.qkv.block(0, d + h * dh, T, dh);
      const auto v = lc.qkv.block(0, 2 * d + h * dh, T, dh);
      auto dq = dqkv.block(0, h * dh, T, dh);
      auto dk = dqkv.block(0, d + h * dh, T, dh);
      auto dv = dqkv.block(0, 2 * d + h * dh, T, dh);
      const auto do_h = datt_out.block(0, h * dh, T, dh);
      for (int t = 0; t < T; ++t) {
        const int span = t + 1;
        const Vec<Scalar> probs = lc.att[h].row(t).head(span).transpose();
        Vec<Scalar> dprobs(span);
        dprobs.noalias() = v.topRows(span) * do_h.row(t).transpose();
        const Scalar dot = probs.dot(dprobs);
        Vec<Scalar> dscores =
            (probs.array() * (dprobs.array() - dot) * inv_sqrt_dh).matrix();
        dq.row(t).noalias() += dscores.transpose() * k.topRows(span);
        dk.topRows(span).noalias() += dscores * q.row(t);
        dv.topRows(span).noalias() += probs * do_h.row(t);
      }
    }
    glayer.w_qkv.noalias() += lc.ln1_out.transpose() * dqkv;
    Mat<Scalar> dln1_out(T, d);
    dln1_out.noalias() = dqkv * layer.w_qkv.transpose();
    dx += detail::layer_norm_backward(dln1_out, lc.ln1_xhat, lc.ln1_rstd,
                                      layer.ln1_scale, glayer.ln1_scale,
                                      glayer.ln1_shift);
  }

  for (int t = 0; t < T; ++t) {
    grads.wte.row(seq.ids[t]) += dx.row(t);
    grads.wpe.row(t) += dx.row(t);
  }
  return loss;
}

template <typename Scalar>
struct LossGrads {
  double loss;
  TransformerParams<Scalar> grads;
};

template <typename Scalar>
LossGrads<Scalar> loss_and_grads(const TransformerParams<Scalar>& params,
                                 const bpe::TokenSequence& seq,
                                 MaskMode mode) {
  LossGrads<Scalar> out{0.0, zeros_like_params<Scalar>(params.config)};
  out.loss = accumulate_loss_grads(params, seq, mode, 1.0, out.grads);
  return out;
}

// Sum of log p(x_n | x_<n) over scored tokens; no gradients.
template <typename Scalar>
double score_sequence(const TransformerParams<Scalar>& params,
                      const bpe::TokenSequence& seq, MaskMode mode) {
  const int n = static_cast<int>(seq.ids.size());
  if (n < 2) throw UsageError("scoring requires a sequence of length >= 2");
  const int start = first_scored_token(seq, mode);
  if (start >= n) throw UsageError("all positions are masked");
  const Mat<Scalar> logits = forward_logits(params, seq.ids);
  double total = 0.0;
  for (int tok = start; tok < n; ++tok)
    total += row_log_softmax(logits.row(tok - 1))(seq.ids[tok]);
  return total;
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "DGCK" | u32 version | u32 header length |
// header JSON {config, dtype, tensors: [{name, rows, cols, offset}]} |
// raw little-endian row-major tensor blobs.

constexpr std::uint32_t kCheckpointMagic = 0x4b434744;  // "DGCK"
constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  std::uint8_t buf[4] = {static_cast<std::uint8_t>(v),
                         static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16),
                         static_cast<std::uint8_t>(v >> 24)};
  out.write(reinterpret_cast<const char*>(buf), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::uint8_t buf[4];
  in.read(reinterpret_cast<char*>(buf), 4);
  if (in.gcount() != 4) throw FormatError("checkpoint truncated at " + what);
  return static_cast<std::uint32_t>(buf[0]) |
         (static_cast<std::uint32_t>(buf[1]) << 8) |
         (static_cast<std::uint32_t>(buf[2]) << 16) |
         (static_cast<std::uint32_t>(buf[3]) << 24);
}

template <typename Scalar>
const char* dtype_name() {
  if constexpr (std::is_same_v<Scalar, float>) return "f32";
  else return "f64";
}

}  // namespace detail

template <typename Scalar>
void save_checkpoint(const TransformerParams<Scalar>& params,
                     const std::string& path) {
  auto refs = tensor_refs(const_cast<TransformerParams<Scalar>&>(params));
  nlohmann::ordered_json header;
  to_json(header["config"], params.config);
  header["dtype"] = detail::dtype_name<Scalar>();
  header["tensors"] = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& ref : refs) {
    header["tensors"].push_back({{"name", ref.name},
                                 {"rows", ref.tensor->rows()},
                                 {"cols", ref.tensor->cols()},
                                 {"offset", offset}});
    offset += sizeof(Scalar) * ref.tensor->size();
  }
  const std::string header_str = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  detail::put_u32(out, kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(header_str.size()));
  out.write(header_str.data(), header_str.size());
  for (const auto& ref : refs)
    out.write(reinterpret_cast<const char*>(ref.tensor->data()),
              sizeof(Scalar) * ref.tensor->size());
  if (!out) throw IoError("write failed: " + path);
}

template <typename Scalar = float>
TransformerParams<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  if (detail::get_u32(in, "magic") != kCheckpointMagic)
    throw FormatError("bad checkpoint magic: " + path);
  if (detail::get_u32(in, "version") != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version: " + path);
  const std::uint32_t header_len = detail::get_u32(in, "header length");
  std::string header_str(header_len, '\0');
  in.read(header_str.data(), header_len);
  if (in.gcount() != static_cast<std::streamsize>(header_len))
    throw FormatError("checkpoint truncated in header: " + path);
  nlohmann::json header = nlohmann::json::parse(header_str, nullptr, false);
  if (header.is_discarded())
    throw FormatError("bad checkpoint header JSON: " + path);
  if (header.at("dtype").get<std::string>() != detail::dtype_name<Scalar>())
    throw FormatError("checkpoint dtype mismatch: " + path);

  auto params = zeros_like_params<Scalar>(config_from_json(header.at("config")));
  auto refs = tensor_refs(params);
  std::size_t i = 0;
  for (const auto& entry : header.at("tensors")) {
    if (i >= refs.size()) throw FormatError("too many tensors in " + path);
    auto& ref = refs[i++];
    if (entry.at("name").get<std::string>() != ref.name ||
        entry.at("rows").get<Eigen::Index>() != ref.tensor->rows() ||
        entry.at("cols").get<Eigen::Index>() != ref.tensor->cols())
      throw FormatError("tensor index mismatch at '" + ref.name + "' in " +
                        path);
    in.read(reinterpret_cast<char*>(ref.tensor->data()),
            sizeof(Scalar) * ref.tensor->size());
    if (in.gcount() !=
        static_cast<std::streamsize>(sizeof(Scalar) * ref.tensor->size()))
      throw FormatError("checkpoint truncated at tensor '" + ref.name + "'");
  }
  if (i != refs.size()) throw FormatError("missing tensors in " + path);
  return params;
}

}  // namespace dialogen::model
