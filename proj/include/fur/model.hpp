// Parameter tensors of the toy autoregressive transformer, plus the LoRA
// adapter state that can be attached to each layer's second MLP matrix.
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "fur/common.hpp"

namespace fur {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ModelConfig {
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int vocab_size = 0;
  int max_seq = 160;
  std::uint64_t init_seed = 0;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0 ||
        vocab_size <= 0 || max_seq <= 0) {
      throw std::invalid_argument("ModelConfig: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw std::invalid_argument("ModelConfig: n_heads must divide d_model");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

// Count is a pure function of the config.
inline std::int64_t param_count(const ModelConfig& c) {
  const std::int64_t d = c.d_model, ff = c.d_ff, v = c.vocab_size;
  std::int64_t n = v * d + static_cast<std::int64_t>(c.max_seq) * d;  // embeddings
  n += c.n_layers * (4 * d * d + 2 * d * ff + 4 * d);                 // blocks
  n += 2 * d;                                                         // final LN
  n += d * v;                                                         // head
  return n;
}

template <typename S>
struct LayerParams {
  Mat<S> ln1_g, ln1_b;  // (1, d)
  Mat<S> wq, wk, wv, wo;  // (d, d)
  Mat<S> ln2_g, ln2_b;  // (1, d)
  Mat<S> w1;  // (d, d_ff)
  Mat<S> w2;  // (d_ff, d); the FF2 matrix, scope of unlearning updates
};

template <typename S>
struct Params {
  ModelConfig config;
  Mat<S> tok_emb;  // (V, d)
  Mat<S> pos_emb;  // (max_seq, d)
  std::vector<LayerParams<S>> layers;
  Mat<S> lnf_g, lnf_b;  // (1, d)
  Mat<S> head;  // (d, V)

  static Params init(const ModelConfig& c) {
    c.validate();
    Params p;
    p.config = c;
    Rng rng(splitmix64(c.init_seed ^ 0x5eedULL));
    const double std0 = 0.02;
    const double resid_scale = 1.0 / std::sqrt(2.0 * c.n_layers);
    auto gauss = [&](Mat<S>& m, Eigen::Index r, Eigen::Index cc, double sd) {
      m.resize(r, cc);
      for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < cc; ++j)
          m(i, j) = static_cast<S>(rng.normal(0.0, sd));
    };
    gauss(p.tok_emb, c.vocab_size, c.d_model, std0);
    gauss(p.pos_emb, c.max_seq, c.d_model, std0);
    p.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& l : p.layers) {
      l.ln1_g = Mat<S>::Ones(1, c.d_model);
      l.ln1_b = Mat<S>::Zero(1, c.d_model);
      gauss(l.wq, c.d_model, c.d_model, std0);
      gauss(l.wk, c.d_model, c.d_model, std0);
      gauss(l.wv, c.d_model, c.d_model, std0);
      gauss(l.wo, c.d_model, c.d_model, std0 * resid_scale);
      l.ln2_g = Mat<S>::Ones(1, c.d_model);
      l.ln2_b = Mat<S>::Zero(1, c.d_model);
      gauss(l.w1, c.d_model, c.d_ff, std0);
      gauss(l.w2, c.d_ff, c.d_model, std0 * resid_scale);
    }
    p.lnf_g = Mat<S>::Ones(1, c.d_model);
    p.lnf_b = Mat<S>::Zero(1, c.d_model);
    gauss(p.head, c.d_model, c.vocab_size, std0);
    return p;
  }

  static Params zeros_like(const ModelConfig& c) {
    Params p = init(c);
    p.for_each_tensor([](const std::string&, Mat<S>& m) { m.setZero(); });
    return p;
  }

  // Visits every tensor in a fixed order; the checkpoint manifest, gradient
  // containers and bit-level comparisons all rely on this order.
  template <typename F>
  void for_each_tensor(F&& f) {
    f(std::string("tok_emb"), tok_emb);
    f(std::string("pos_emb"), pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string pre = "layers." + std::to_string(i) + ".";
      f(pre + "ln1_g", layers[i].ln1_g);
      f(pre + "ln1_b", layers[i].ln1_b);
      f(pre + "wq", layers[i].wq);
      f(pre + "wk", layers[i].wk);
      f(pre + "wv", layers[i].wv);
      f(pre + "wo", layers[i].wo);
      f(pre + "ln2_g", layers[i].ln2_g);
      f(pre + "ln2_b", layers[i].ln2_b);
      f(pre + "w1", layers[i].w1);
      f(pre + "w2", layers[i].w2);
    }
    f(std::string("lnf_g"), lnf_g);
    f(std::string("lnf_b"), lnf_b);
    f(std::string("head"), head);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    auto* self = const_cast<Params*>(this);
    self->for_each_tensor([&](const std::string& n, Mat<S>& m) {
      f(n, static_cast<const Mat<S>&>(m));
    });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const Mat<S>& m) {
      if (!m.allFinite()) ok = false;
    });
    return ok;
  }
};

inline bool is_ff2_tensor(const std::string& name) {
  return name.size() >= 3 && name.compare(name.size() - 3, 3, ".w2") == 0 &&
         name.rfind("layers.", 0) == 0;
}

template <typename S>
std::vector<std::string> ff2_tensor_names(const Params<S>& p) {
  std::vector<std::string> names;
  p.for_each_tensor([&](const std::string& n, const Mat<S>&) {
    if (is_ff2_tensor(n)) names.push_back(n);
  });
  return names;
}

template <typename S>
bool bit_equal(const Mat<S>& a, const Mat<S>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return std::memcmp(a.data(), b.data(), sizeof(S) * static_cast<std::size_t>(a.size())) == 0;
}

template <typename S>
bool bit_equal(const Params<S>& a, const Params<S>& b,
               std::vector<std::string>* differing = nullptr) {
  bool eq = true;
  if (!(a.config == b.config)) {
    if (differing) differing->push_back("config");
    return false;
  }
  std::vector<std::pair<std::string, const Mat<S>*>> lhs;
  a.for_each_tensor([&](const std::string& n, const Mat<S>& m) { lhs.emplace_back(n, &m); });
  std::size_t k = 0;
  b.for_each_tensor([&](const std::string& n, const Mat<S>& m) {
    if (k < lhs.size() && lhs[k].first == n && bit_equal(*lhs[k].second, m)) {
      ++k;
      return;
    }
    eq = false;
    if (differing) differing->push_back(n);
    ++k;
  });
  return eq && k == lhs.size();
}

// ---------------------------------------------------------------------------
// LoRA adapters on FF2. Effective weight is w2 + (alpha/rank) * a * b.

struct RankTooLarge : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename S>
struct LoraLayer {
  Mat<S> a;  // (d_ff, rank)
  Mat<S> b;  // (rank, d_model)
};

template <typename S>
struct LoraState {
  int rank = 8;
  double alpha = 32.0;
  double dropout = 0.1;
  std::vector<LoraLayer<S>> layers;

  S scale() const { return static_cast<S>(alpha / rank); }

  // b starts at zero, so the adapted model is bit-equivalent to the base.
  static LoraState init(const ModelConfig& c, int rank, double alpha,
                        double dropout, std::uint64_t seed) {
    if (rank > std::min(c.d_ff, c.d_model)) {
      throw RankTooLarge("LoRA rank " + std::to_string(rank) +
                         " exceeds FF2 dimensions");
    }
    LoraState s;
    s.rank = rank;
    s.alpha = alpha;
    s.dropout = dropout;
    Rng rng(splitmix64(seed ^ 0x10aaULL));
    s.layers.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& l : s.layers) {
      l.a.resize(c.d_ff, rank);
      for (Eigen::Index i = 0; i < l.a.rows(); ++i)
        for (Eigen::Index j = 0; j < l.a.cols(); ++j)
          l.a(i, j) = static_cast<S>(rng.normal(0.0, 0.02));
      l.b = Mat<S>::Zero(rank, c.d_model);
    }
    return s;
  }
};

// A model to evaluate: base parameters plus optional LoRA adapters.
template <typename S>
struct ModelView {
  const Params<S>* params = nullptr;
  const LoraState<S>* lora = nullptr;

  ModelView() = default;
  ModelView(const Params<S>& p) : params(&p) {}  // NOLINT implicit by design
  ModelView(const Params<S>& p, const LoraState<S>& l) : params(&p), lora(&l) {}

  const ModelConfig& config() const { return params->config; }
};

}  // namespace fur
