// Forward, backward and decoding for the toy transformer. Sequences are
// packed into one (N, d) activation matrix; attention runs per sequence.
// Layout follows pre-LN GPT blocks without biases on the projections.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "fur/common.hpp"
#include "fur/model.hpp"
#include "fur/vocab.hpp"

namespace fur {

struct SequenceTooLong : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyTarget : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteGradient : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class GradScope { All, Ff2Only, Lora };

struct SeqSpan {
  int start = 0;
  int len = 0;
};

namespace detail {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028653728;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

template <typename S>
S gelu(S x) {
  const S u = static_cast<S>(kGeluC) * (x + static_cast<S>(kGeluK) * x * x * x);
  return static_cast<S>(0.5) * x * (static_cast<S>(1) + std::tanh(u));
}

template <typename S>
S gelu_grad(S x) {
  const S u = static_cast<S>(kGeluC) * (x + static_cast<S>(kGeluK) * x * x * x);
  const S t = std::tanh(u);
  const S du = static_cast<S>(kGeluC) * (static_cast<S>(1) + static_cast<S>(3 * kGeluK) * x * x);
  return static_cast<S>(0.5) * (static_cast<S>(1) + t) +
         static_cast<S>(0.5) * x * (static_cast<S>(1) - t * t) * du;
}

}  // namespace detail

template <typename S>
struct LayerActs {
  Mat<S> x_in;                 // (N, d) block input
  Mat<S> ln1_out;              // (N, d)
  Mat<S> ln1_mean, ln1_rstd;   // (N, 1)
  Mat<S> q, k, v;              // (N, d)
  std::vector<Mat<S>> att;     // per seq*head, (len, len) causal softmax rows
  Mat<S> att_cat;              // (N, d)
  Mat<S> x_mid;                // (N, d) after attention residual
  Mat<S> ln2_out;              // (N, d)
  Mat<S> ln2_mean, ln2_rstd;   // (N, 1)
  Mat<S> h_pre;                // (N, ff)
  Mat<S> h_act;                // (N, ff)
  Mat<S> lora_drop;            // (N, ff) dropout-masked adapter input
  Mat<S> lora_mask;            // (N, ff) inverted-dropout scale factors
  Mat<S> lora_ab;              // (N, rank)
};

template <typename S>
struct Activations {
  std::vector<SeqSpan> seqs;
  Ids ids;
  std::vector<int> pos;        // position of each packed row inside its sequence
  Mat<S> x0;                   // (N, d)
  std::vector<LayerActs<S>> layers;
  Mat<S> x_final;              // (N, d)
  Mat<S> lnf_out;              // (N, d)
  Mat<S> lnf_mean, lnf_rstd;   // (N, 1)
  Mat<S> logits;               // (N, V)
};

// Gradients are a Params-shaped container plus optional LoRA factor grads.
template <typename S>
struct LoraGrads {
  std::vector<LoraLayer<S>> layers;

  static LoraGrads zeros_like(const LoraState<S>& s) {
    LoraGrads g;
    g.layers.resize(s.layers.size());
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      g.layers[i].a = Mat<S>::Zero(s.layers[i].a.rows(), s.layers[i].a.cols());
      g.layers[i].b = Mat<S>::Zero(s.layers[i].b.rows(), s.layers[i].b.cols());
    }
    return g;
  }
};

namespace detail {

template <typename S>
void layer_norm_forward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& b,
                        Mat<S>& out, Mat<S>& mean, Mat<S>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  out.resize(n, d);
  mean.resize(n, 1);
  rstd.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mu = x.row(i).mean();
    S var = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const S c = x(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<S>(d);
    const S rs = static_cast<S>(1) / std::sqrt(var + static_cast<S>(kLnEps));
    mean(i, 0) = mu;
    rstd(i, 0) = rs;
    for (Eigen::Index j = 0; j < d; ++j) {
      out(i, j) = (x(i, j) - mu) * rs * g(0, j) + b(0, j);
    }
  }
}

template <typename S>
void layer_norm_backward(const Mat<S>& x, const Mat<S>& g, const Mat<S>& mean,
                         const Mat<S>& rstd, const Mat<S>& dout, Mat<S>& dx,
                         Mat<S>* dg, Mat<S>* db) {
  const Eigen::Index n = x.rows(), d = x.cols();
  dx.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mu = mean(i, 0), rs = rstd(i, 0);
    S sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const S xhat = (x(i, j) - mu) * rs;
      const S dxhat = dout(i, j) * g(0, j);
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xhat;
      if (dg) (*dg)(0, j) += dout(i, j) * xhat;
      if (db) (*db)(0, j) += dout(i, j);
    }
    const S inv_d = static_cast<S>(1) / static_cast<S>(d);
    for (Eigen::Index j = 0; j < d; ++j) {
      const S xhat = (x(i, j) - mu) * rs;
      const S dxhat = dout(i, j) * g(0, j);
      dx(i, j) = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
    }
  }
}

}  // namespace detail

// Forward over a packed batch. `acts` may be reused across calls; when
// `lora_dropout_rng` is non-null and the view has adapters, inverted dropout
// is applied to the adapter input (training-time behavior).
template <typename S>
void forward_batch(const ModelView<S>& view, const Ids& ids,
                   const std::vector<SeqSpan>& seqs, Activations<S>& acts,
                   Rng* lora_dropout_rng = nullptr) {
  const Params<S>& p = *view.params;
  const ModelConfig& c = p.config;
  const int N = static_cast<int>(ids.size());
  const int H = c.n_heads, hd = c.head_dim();
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

  acts.ids = ids;
  acts.seqs = seqs;
  acts.pos.assign(static_cast<std::size_t>(N), 0);
  for (const auto& sq : seqs) {
    if (sq.len > c.max_seq) {
      throw SequenceTooLong("sequence of length " + std::to_string(sq.len) +
                            " exceeds max_seq " + std::to_string(c.max_seq));
    }
    for (int t = 0; t < sq.len; ++t) acts.pos[static_cast<std::size_t>(sq.start + t)] = t;
  }

  acts.x0.resize(N, c.d_model);
  for (int n = 0; n < N; ++n) {
    const TokenId id = ids[static_cast<std::size_t>(n)];
    if (id < 0 || id >= c.vocab_size) throw std::out_of_range("token id out of vocab range");
    acts.x0.row(n) = p.tok_emb.row(id) + p.pos_emb.row(acts.pos[static_cast<std::size_t>(n)]);
  }

  acts.layers.resize(static_cast<std::size_t>(c.n_layers));
  Mat<S> x = acts.x0;
  for (int li = 0; li < c.n_layers; ++li) {
    auto& L = acts.layers[static_cast<std::size_t>(li)];
    const auto& W = p.layers[static_cast<std::size_t>(li)];
    L.x_in = x;
    detail::layer_norm_forward(L.x_in, W.ln1_g, W.ln1_b, L.ln1_out, L.ln1_mean, L.ln1_rstd);
    L.q.noalias() = L.ln1_out * W.wq;
    L.k.noalias() = L.ln1_out * W.wk;
    L.v.noalias() = L.ln1_out * W.wv;
    L.att.assign(seqs.size() * static_cast<std::size_t>(H), Mat<S>());
    L.att_cat.resize(N, c.d_model);
    for (std::size_t si = 0; si < seqs.size(); ++si) {
      const auto& sq = seqs[si];
      for (int h = 0; h < H; ++h) {
        auto qh = L.q.block(sq.start, h * hd, sq.len, hd);
        auto kh = L.k.block(sq.start, h * hd, sq.len, hd);
        auto vh = L.v.block(sq.start, h * hd, sq.len, hd);
        Mat<S>& probs = L.att[si * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        probs.noalias() = qh * kh.transpose();
        probs *= inv_sqrt_hd;
        for (int t = 0; t < sq.len; ++t) {
          S mx = probs(t, 0);
          for (int j = 1; j <= t; ++j) mx = std::max(mx, probs(t, j));
          S sum = 0;
          for (int j = 0; j <= t; ++j) {
            const S e = std::exp(probs(t, j) - mx);
            probs(t, j) = e;
            sum += e;
          }
          const S inv = static_cast<S>(1) / sum;
          for (int j = 0; j <= t; ++j) probs(t, j) *= inv;
          for (int j = t + 1; j < sq.len; ++j) probs(t, j) = 0;
        }
        L.att_cat.block(sq.start, h * hd, sq.len, hd).noalias() = probs * vh;
      }
    }
    L.x_mid.noalias() = L.x_in + L.att_cat * W.wo;
    detail::layer_norm_forward(L.x_mid, W.ln2_g, W.ln2_b, L.ln2_out, L.ln2_mean, L.ln2_rstd);
    L.h_pre.noalias() = L.ln2_out * W.w1;
    L.h_act = L.h_pre.unaryExpr([](S v) { return detail::gelu(v); });
    x.noalias() = L.x_mid + L.h_act * W.w2;
    if (view.lora) {
      const auto& A = view.lora->layers[static_cast<std::size_t>(li)];
      const S scale = view.lora->scale();
      if (lora_dropout_rng && view.lora->dropout > 0.0) {
        const double keep = 1.0 - view.lora->dropout;
        L.lora_mask.resize(N, c.d_ff);
        for (int n = 0; n < N; ++n)
          for (int j = 0; j < c.d_ff; ++j)
            L.lora_mask(n, j) =
                lora_dropout_rng->uniform() < keep ? static_cast<S>(1.0 / keep) : S(0);
        L.lora_drop = L.h_act.cwiseProduct(L.lora_mask);
      } else {
        L.lora_mask.resize(0, 0);
        L.lora_drop = L.h_act;
      }
      L.lora_ab.noalias() = L.lora_drop * A.a;
      x.noalias() += scale * (L.lora_ab * A.b);
    }
  }
  acts.x_final = x;
  detail::layer_norm_forward(acts.x_final, p.lnf_g, p.lnf_b, acts.lnf_out,
                             acts.lnf_mean, acts.lnf_rstd);
  acts.logits.noalias() = acts.lnf_out * p.head;
}

// Backward from per-position logit gradients. Gradients are accumulated into
// `grads` (and `lora_grads` for the LoRA scope); tensors outside the scope
// are left untouched, so zero-initialized containers stay exactly zero there.
template <typename S>
void backward_batch(const ModelView<S>& view, const Activations<S>& acts,
                    const Mat<S>& dlogits, GradScope scope, Params<S>* grads,
                    LoraGrads<S>* lora_grads = nullptr) {
  const Params<S>& p = *view.params;
  const ModelConfig& c = p.config;
  const int N = static_cast<int>(acts.ids.size());
  const int H = c.n_heads, hd = c.head_dim();
  const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
  const bool want_all = scope == GradScope::All;
  const bool want_ff2 = scope == GradScope::Ff2Only || want_all;
  const bool want_lora = scope == GradScope::Lora;
  if (want_lora && (!view.lora || !lora_grads)) {
    throw std::invalid_argument("LoRA scope requires adapters and a LoRA gradient container");
  }

  Mat<S> dx;  // gradient w.r.t. the block output, flowing backwards
  if (want_all) grads->head.noalias() += acts.lnf_out.transpose() * dlogits;
  Mat<S> dlnf = dlogits * p.head.transpose();
  detail::layer_norm_backward(acts.x_final, p.lnf_g, acts.lnf_mean, acts.lnf_rstd,
                              dlnf, dx, want_all ? &grads->lnf_g : nullptr,
                              want_all ? &grads->lnf_b : nullptr);

  for (int li = c.n_layers - 1; li >= 0; --li) {
    const auto& L = acts.layers[static_cast<std::size_t>(li)];
    const auto& W = p.layers[static_cast<std::size_t>(li)];
    Params<S>* g = grads;

    // MLP: x_out = x_mid + h_act * w2 (+ scale * drop(h_act) * a * b)
    Mat<S> dh_act = dx * W.w2.transpose();
    if (want_ff2 && g) {
      g->layers[static_cast<std::size_t>(li)].w2.noalias() += L.h_act.transpose() * dx;
    }
    if (view.lora) {
      const auto& A = view.lora->layers[static_cast<std::size_t>(li)];
      const S scale = view.lora->scale();
      Mat<S> d_ab = dx * A.b.transpose();            // (N, rank)
      if (want_lora) {
        auto& lg = lora_grads->layers[static_cast<std::size_t>(li)];
        lg.a.noalias() += scale * (L.lora_drop.transpose() * d_ab);
        lg.b.noalias() += scale * (L.lora_ab.transpose() * dx);
      }
      Mat<S> d_drop = scale * (d_ab * A.a.transpose());  // (N, ff)
      if (L.lora_mask.size() > 0) d_drop = d_drop.cwiseProduct(L.lora_mask);
      dh_act.noalias() += d_drop;
    }
    Mat<S> dh_pre(N, c.d_ff);
    for (int n = 0; n < N; ++n)
      for (int j = 0; j < c.d_ff; ++j)
        dh_pre(n, j) = dh_act(n, j) * detail::gelu_grad(L.h_pre(n, j));
    if (want_all && g) {
      g->layers[static_cast<std::size_t>(li)].w1.noalias() += L.ln2_out.transpose() * dh_pre;
    }
    Mat<S> dln2 = dh_pre * W.w1.transpose();
    Mat<S> dx_mid;
    detail::layer_norm_backward(
        L.x_mid, W.ln2_g, L.ln2_mean, L.ln2_rstd, dln2, dx_mid,
        want_all && g ? &g->layers[static_cast<std::size_t>(li)].ln2_g : nullptr,
        want_all && g ? &g->layers[static_cast<std::size_t>(li)].ln2_b : nullptr);
    dx_mid.noalias() += dx;  // residual

    // Attention: x_mid = x_in + att_cat * wo
    Mat<S> datt_cat = dx_mid * W.wo.transpose();
    if (want_all && g) {
      g->layers[static_cast<std::size_t>(li)].wo.noalias() += L.att_cat.transpose() * dx_mid;
    }
    Mat<S> dq = Mat<S>::Zero(N, c.d_model);
    Mat<S> dk = Mat<S>::Zero(N, c.d_model);
    Mat<S> dv = Mat<S>::Zero(N, c.d_model);
    for (std::size_t si = 0; si < acts.seqs.size(); ++si) {
      const auto& sq = acts.seqs[si];
      for (int h = 0; h < H; ++h) {
        const Mat<S>& probs = L.att[si * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
        auto qh = L.q.block(sq.start, h * hd, sq.len, hd);
        auto kh = L.k.block(sq.start, h * hd, sq.len, hd);
        auto vh = L.v.block(sq.start, h * hd, sq.len, hd);
        auto dctx = datt_cat.block(sq.start, h * hd, sq.len, hd);
        Mat<S> dprobs;
        dprobs.noalias() = dctx * vh.transpose();       // (len, len)
        dv.block(sq.start, h * hd, sq.len, hd).noalias() += probs.transpose() * dctx;
        // causal softmax backward, rowwise
        for (int t = 0; t < sq.len; ++t) {
          S dot = 0;
          for (int j = 0; j <= t; ++j) dot += dprobs(t, j) * probs(t, j);
          for (int j = 0; j <= t; ++j) dprobs(t, j) = probs(t, j) * (dprobs(t, j) - dot);
          for (int j = t + 1; j < sq.len; ++j) dprobs(t, j) = 0;
        }
        dq.block(sq.start, h * hd, sq.len, hd).noalias() += inv_sqrt_hd * (dprobs * kh);
        dk.block(sq.start, h * hd, sq.len, hd).noalias() +=
            inv_sqrt_hd * (dprobs.transpose() * qh);
      }
    }
    if (want_all && g) {
      g->layers[static_cast<std::size_t>(li)].wq.noalias() += L.ln1_out.transpose() * dq;
      g->layers[static_cast<std::size_t>(li)].wk.noalias() += L.ln1_out.transpose() * dk;
      g->layers[static_cast<std::size_t>(li)].wv.noalias() += L.ln1_out.transpose() * dv;
    }
    Mat<S> dln1 = dq * W.wq.transpose();
    dln1.noalias() += dk * W.wk.transpose();
    dln1.noalias() += dv * W.wv.transpose();
    Mat<S> dx_in;
    detail::layer_norm_backward(
        L.x_in, W.ln1_g, L.ln1_mean, L.ln1_rstd, dln1, dx_in,
        want_all && g ? &g->layers[static_cast<std::size_t>(li)].ln1_g : nullptr,
        want_all && g ? &g->layers[static_cast<std::size_t>(li)].ln1_b : nullptr);
    dx_in.noalias() += dx_mid;  // residual
    dx = std::move(dx_in);
  }

  if (want_all) {
    for (int n = 0; n < N; ++n) {
      grads->tok_emb.row(acts.ids[static_cast<std::size_t>(n)]) += dx.row(n);
      grads->pos_emb.row(acts.pos[static_cast<std::size_t>(n)]) += dx.row(n);
    }
  }
}

// --------------------------------------------------------------------------
// Convenience single-sequence entry points.

template <typename S>
void forward_seq(const ModelView<S>& view, const Ids& ids, Activations<S>& acts) {
  forward_batch(view, ids, {SeqSpan{0, static_cast<int>(ids.size())}}, acts);
}

// Next-token probability rows (double precision, each row sums to one).
template <typename S>
Eigen::MatrixXd forward_probs(const ModelView<S>& view, const Ids& ids) {
  Activations<S> acts;
  forward_seq(view, ids, acts);
  Eigen::MatrixXd out(acts.logits.rows(), acts.logits.cols());
  for (Eigen::Index i = 0; i < acts.logits.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < acts.logits.cols(); ++j)
      mx = std::max(mx, static_cast<double>(acts.logits(i, j)));
    double sum = 0;
    for (Eigen::Index j = 0; j < acts.logits.cols(); ++j) {
      const double e = std::exp(static_cast<double>(acts.logits(i, j)) - mx);
      out(i, j) = e;
      sum += e;
    }
    out.row(i) /= sum;
  }
  return out;
}

// Log-softmax of one logits row, computed in double.
template <typename S>
Eigen::VectorXd log_softmax_row(const Mat<S>& logits, Eigen::Index row) {
  Eigen::VectorXd out(logits.cols());
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    mx = std::max(mx, static_cast<double>(logits(row, j)));
  double sum = 0;
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    sum += std::exp(static_cast<double>(logits(row, j)) - mx);
  const double lse = mx + std::log(sum);
  for (Eigen::Index j = 0; j < logits.cols(); ++j)
    out(j) = static_cast<double>(logits(row, j)) - lse;
  return out;
}

// Length-normalized sequence probability: (1/T) * prod_j p(t_j | prefix, t_<j).
// The model sees <bos> ++ prefix ++ target. Also exposes the raw log-product,
// which downstream ratio metrics use to stay clear of underflow.
struct SeqProb {
  double log_product = 0.0;  // log prod_j p(t_j | ...)
  int length = 0;
  double value() const { return std::exp(log_product) / length; }
};

template <typename S>
SeqProb sequence_score(const ModelView<S>& view, const Vocab& vocab,
                       const Ids& prefix, const Ids& target) {
  if (target.empty()) throw EmptyTarget("sequence_score: empty target");
  Ids ids;
  ids.reserve(prefix.size() + target.size() + 1);
  ids.push_back(vocab.bos());
  ids.insert(ids.end(), prefix.begin(), prefix.end());
  ids.insert(ids.end(), target.begin(), target.end());
  Activations<S> acts;
  forward_seq(view, ids, acts);
  SeqProb r;
  r.length = static_cast<int>(target.size());
  const Eigen::Index first = static_cast<Eigen::Index>(prefix.size());  // row predicting target[0]
  for (std::size_t j = 0; j < target.size(); ++j) {
    const Eigen::VectorXd lp = log_softmax_row(acts.logits, first + static_cast<Eigen::Index>(j));
    r.log_product += lp(target[j]);
  }
  return r;
}

template <typename S>
double sequence_prob(const ModelView<S>& view, const Vocab& vocab,
                     const Ids& prefix, const Ids& target) {
  return sequence_score(view, vocab, prefix, target).value();
}

// --------------------------------------------------------------------------
// Incremental greedy decoding with per-layer key/value caches.

template <typename S>
class DecodeState {
 public:
  explicit DecodeState(const ModelView<S>& view) : view_(view) {
    const ModelConfig& c = view.config();
    layers_.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& l : layers_) {
      l.k.resize(c.max_seq, c.d_model);
      l.v.resize(c.max_seq, c.d_model);
    }
  }

  int length() const { return t_; }

  // Feeds one token, returns the logits row for the next position.
  Eigen::VectorXd step(TokenId id) {
    const Params<S>& p = *view_.params;
    const ModelConfig& c = p.config;
    if (t_ >= c.max_seq) throw SequenceTooLong("decode exceeds max_seq");
    const int H = c.n_heads, hd = c.head_dim();
    const S inv_sqrt_hd = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
    Mat<S> x = p.tok_emb.row(id) + p.pos_emb.row(t_);  // (1, d)
    Mat<S> mean, rstd, normed;
    for (int li = 0; li < c.n_layers; ++li) {
      const auto& W = p.layers[static_cast<std::size_t>(li)];
      auto& cache = layers_[static_cast<std::size_t>(li)];
      detail::layer_norm_forward(x, W.ln1_g, W.ln1_b, normed, mean, rstd);
      Mat<S> q = normed * W.wq;
      cache.k.row(t_) = normed * W.wk;
      cache.v.row(t_) = normed * W.wv;
      Mat<S> att_cat(1, c.d_model);
      for (int h = 0; h < H; ++h) {
        Eigen::Matrix<S, 1, Eigen::Dynamic> scores(t_ + 1);
        for (int j = 0; j <= t_; ++j) {
          S dot = 0;
          for (int e = 0; e < hd; ++e) dot += q(0, h * hd + e) * cache.k(j, h * hd + e);
          scores(j) = dot * inv_sqrt_hd;
        }
        const S mx = scores.maxCoeff();
        S sum = 0;
        for (int j = 0; j <= t_; ++j) {
          scores(j) = std::exp(scores(j) - mx);
          sum += scores(j);
        }
        scores /= sum;
        for (int e = 0; e < hd; ++e) {
          S acc = 0;
          for (int j = 0; j <= t_; ++j) acc += scores(j) * cache.v(j, h * hd + e);
          att_cat(0, h * hd + e) = acc;
        }
      }
      x.noalias() += att_cat * W.wo;
      detail::layer_norm_forward(x, W.ln2_g, W.ln2_b, normed, mean, rstd);
      Mat<S> h_pre = normed * W.w1;
      Mat<S> h_act = h_pre.unaryExpr([](S v) { return detail::gelu(v); });
      x.noalias() += h_act * W.w2;
      if (view_.lora) {
        const auto& A = view_.lora->layers[static_cast<std::size_t>(li)];
        x.noalias() += view_.lora->scale() * ((h_act * A.a) * A.b);
      }
    }
    detail::layer_norm_forward(x, p.lnf_g, p.lnf_b, normed, mean, rstd);
    Mat<S> logits = normed * p.head;
    ++t_;
    Eigen::VectorXd out(c.vocab_size);
    for (int j = 0; j < c.vocab_size; ++j) out(j) = static_cast<double>(logits(0, j));
    return out;
  }

 private:
  struct LayerCache {
    Mat<S> k, v;
  };
  ModelView<S> view_;
  std::vector<LayerCache> layers_;
  int t_ = 0;
};

// Token-by-token stop control for greedy decoding. The scanner sees the
// prompt and everything generated so far; it is also consulted once before
// generation (empty `generated`) so a prompt that already terminates the
// stream yields an empty result. `drop` trailing tokens are removed from the
// generated output when stopping.
struct StopDecision {
  bool stop = false;
  int drop = 0;
};
using StopScan = std::function<StopDecision(const Ids& prompt, const Ids& generated)>;

struct GreedyResult {
  Ids generated;
  bool hit_length_cap = false;
};

// Deterministic greedy decoding; <bos> is prepended to the prompt. Argmax
// ties resolve to the lowest token id. Stops on the scanner's say-so or when
// the context window fills up.
template <typename S>
GreedyResult greedy_decode(const ModelView<S>& view, const Vocab& vocab,
                           const Ids& prompt, const StopScan& stop,
                           int max_new_tokens) {
  const ModelConfig& c = view.config();
  if (static_cast<int>(prompt.size()) + 1 >= c.max_seq) {
    throw SequenceTooLong("prompt leaves no room for generation");
  }
  GreedyResult res;
  if (stop(prompt, res.generated).stop) return res;
  DecodeState<S> state(view);
  Eigen::VectorXd logits = state.step(vocab.bos());
  for (TokenId id : prompt) logits = state.step(id);
  for (int produced = 0; produced < max_new_tokens; ++produced) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    res.generated.push_back(static_cast<TokenId>(best));
    const StopDecision d = stop(prompt, res.generated);
    if (d.stop) {
      const auto drop = std::min<std::size_t>(static_cast<std::size_t>(d.drop),
                                              res.generated.size());
      res.generated.resize(res.generated.size() - drop);
      return res;
    }
    if (state.length() >= c.max_seq) {
      res.hit_length_cap = true;
      return res;
    }
    logits = state.step(static_cast<TokenId>(best));
  }
  res.hit_length_cap = true;
  return res;
}

}  // namespace fur
