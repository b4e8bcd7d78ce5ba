// Next-token cross-entropy training with Adam and a fixed-seed shuffling
// schedule. Documents are packed whole into ragged batches; every sequence
// starts at position zero, matching how prompts are scored later.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fur/common.hpp"
#include "fur/model.hpp"
#include "fur/transformer.hpp"
#include "fur/vocab.hpp"

namespace fur {

struct DivergedLoss : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainSchedule {
  int steps = 0;
  int batch_tokens = 1024;       // documents are packed until this budget fills
  double lr = 1e-3;
  double lr_final_frac = 0.1;    // cosine decay floor as a fraction of lr
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 0;
  int heldout_stride = 0;        // if > 0, every stride-th eligible doc is held out
  int heldout_min_index = 0;     // docs below this index are never held out

  void validate() const {
    if (steps < 0) throw std::invalid_argument("TrainSchedule: negative steps");
    if (lr <= 0.0) throw std::invalid_argument("TrainSchedule: learning rate must be positive");
    if (batch_tokens <= 0) throw std::invalid_argument("TrainSchedule: batch_tokens must be positive");
  }
};

struct TrainStats {
  double heldout_ce_init = 0.0;
  double heldout_ce_final = 0.0;
  std::vector<double> loss_curve;  // mean train CE, sampled every ~1% of steps
  int heldout_docs = 0;
};

namespace detail {

inline Ids doc_ids(const Vocab& vocab, const std::string& text, int max_seq) {
  Ids ids;
  ids.push_back(vocab.bos());
  const Ids body = vocab.tokenize(text);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(vocab.eos());
  if (static_cast<int>(ids.size()) > max_seq) {
    throw SequenceTooLong("document of " + std::to_string(ids.size()) +
                          " tokens exceeds max_seq " + std::to_string(max_seq));
  }
  return ids;
}

// Cross-entropy over a packed batch; fills dlogits when training.
template <typename S>
double batch_ce(const ModelView<S>& view, const std::vector<Ids>& docs,
                Activations<S>* acts_out, Mat<S>* dlogits_out) {
  Ids flat;
  std::vector<SeqSpan> seqs;
  for (const auto& d : docs) {
    seqs.push_back({static_cast<int>(flat.size()), static_cast<int>(d.size())});
    flat.insert(flat.end(), d.begin(), d.end());
  }
  Activations<S> local;
  Activations<S>& acts = acts_out ? *acts_out : local;
  forward_batch(view, flat, seqs, acts);

  double total = 0.0;
  std::int64_t count = 0;
  if (dlogits_out) dlogits_out->setZero(acts.logits.rows(), acts.logits.cols());
  for (const auto& sq : seqs) {
    for (int t = 0; t + 1 < sq.len; ++t) {
      const Eigen::Index row = sq.start + t;
      const TokenId target = flat[static_cast<std::size_t>(sq.start + t + 1)];
      const Eigen::VectorXd lp = log_softmax_row(acts.logits, row);
      total += -lp(target);
      ++count;
      if (dlogits_out) {
        for (Eigen::Index j = 0; j < acts.logits.cols(); ++j)
          (*dlogits_out)(row, j) = static_cast<S>(std::exp(lp(j)));
        (*dlogits_out)(row, target) -= static_cast<S>(1);
      }
    }
  }
  if (count == 0) return 0.0;
  if (dlogits_out) *dlogits_out /= static_cast<S>(count);
  return total / static_cast<double>(count);
}

}  // namespace detail

// Mean next-token cross-entropy of whole documents, in nats per token.
template <typename S>
double corpus_ce(const ModelView<S>& view, const Vocab& vocab,
                 const std::vector<std::string>& docs) {
  if (docs.empty()) return 0.0;
  double total = 0.0;
  std::int64_t count = 0;
  for (const auto& text : docs) {
    const Ids ids = detail::doc_ids(vocab, text, view.config().max_seq);
    Activations<S> acts;
    forward_seq(view, ids, acts);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      total += -log_softmax_row(acts.logits, static_cast<Eigen::Index>(t))(ids[t + 1]);
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Fraction of document positions where the greedy next-token prediction
// matches the actual next token.
template <typename S>
double next_token_accuracy(const ModelView<S>& view, const Vocab& vocab,
                           const std::vector<std::string>& docs) {
  std::int64_t hits = 0, count = 0;
  for (const auto& text : docs) {
    const Ids ids = detail::doc_ids(vocab, text, view.config().max_seq);
    Activations<S> acts;
    forward_seq(view, ids, acts);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      Eigen::Index best = 0;
      acts.logits.row(static_cast<Eigen::Index>(t)).maxCoeff(&best);
      if (static_cast<TokenId>(best) == ids[t + 1]) ++hits;
      ++count;
    }
  }
  return count ? static_cast<double>(hits) / static_cast<double>(count) : 0.0;
}

// Trains from scratch; returns the parameters and a small stats record.
// Deterministic for a fixed config and schedule seed. Held-out documents
// (when configured) are excluded from every batch and used only for the
// before/after cross-entropy readings.
inline std::pair<Params<float>, TrainStats> train_lm(
    const std::vector<std::string>& corpus, const Vocab& vocab,
    const ModelConfig& config, const TrainSchedule& schedule) {
  if (corpus.empty()) throw std::invalid_argument("train_lm: empty corpus");
  schedule.validate();
  Params<float> params = Params<float>::init(config);
  TrainStats stats;

  std::vector<Ids> docs;
  docs.reserve(corpus.size());
  for (const auto& text : corpus) docs.push_back(detail::doc_ids(vocab, text, config.max_seq));

  std::vector<std::size_t> train_idx;
  std::vector<std::string> heldout;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const bool eligible = schedule.heldout_stride > 0 &&
                          static_cast<int>(i) >= schedule.heldout_min_index;
    if (eligible && ((i - schedule.heldout_min_index) % schedule.heldout_stride) ==
                        static_cast<std::size_t>(schedule.heldout_stride - 1)) {
      heldout.push_back(corpus[i]);
    } else {
      train_idx.push_back(i);
    }
  }
  if (train_idx.empty()) throw std::invalid_argument("train_lm: no training documents left");
  stats.heldout_docs = static_cast<int>(heldout.size());
  if (!heldout.empty()) stats.heldout_ce_init = corpus_ce<float>(params, vocab, heldout);
  if (schedule.steps == 0) {
    stats.heldout_ce_final = stats.heldout_ce_init;
    return {std::move(params), std::move(stats)};
  }

  Params<float> grads = Params<float>::zeros_like(config);
  Params<float> adam_m = Params<float>::zeros_like(config);
  Params<float> adam_v = Params<float>::zeros_like(config);
  Activations<float> acts;
  Mat<float> dlogits;

  const int sample_every = std::max(1, schedule.steps / 100);
  int step = 0;
  std::uint64_t epoch = 0;
  std::vector<std::size_t> order = train_idx;
  std::size_t cursor = order.size();  // forces a shuffle on first use
  while (step < schedule.steps) {
    if (cursor >= order.size()) {
      Rng rng(splitmix64(schedule.seed ^ (0xe90cULL + epoch)));
      rng.shuffle(order);
      cursor = 0;
      ++epoch;
    }
    std::vector<Ids> batch;
    int tokens = 0;
    while (cursor < order.size() && tokens < schedule.batch_tokens) {
      batch.push_back(docs[order[cursor]]);
      tokens += static_cast<int>(batch.back().size());
      ++cursor;
    }
    if (batch.empty()) continue;

    grads.for_each_tensor([](const std::string&, Mat<float>& m) { m.setZero(); });
    const double loss = detail::batch_ce<float>(params, batch, &acts, &dlogits);
    if (!is_finite(loss)) throw DivergedLoss("training loss became non-finite");
    backward_batch<float>(params, acts, dlogits, GradScope::All, &grads);

    if (schedule.clip_norm > 0.0) {
      double sq = 0.0;
      grads.for_each_tensor([&](const std::string&, const Mat<float>& m) {
        sq += static_cast<double>(m.template cast<double>().squaredNorm());
      });
      const double norm = std::sqrt(sq);
      if (norm > schedule.clip_norm) {
        const float scale = static_cast<float>(schedule.clip_norm / norm);
        grads.for_each_tensor([&](const std::string&, Mat<float>& m) { m *= scale; });
      }
    }

    const double progress = static_cast<double>(step) / schedule.steps;
    const double lr_floor = schedule.lr * schedule.lr_final_frac;
    const double lr_t =
        lr_floor + 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress)) *
                       (schedule.lr - lr_floor);
    const double bc1 = 1.0 - std::pow(schedule.beta1, step + 1);
    const double bc2 = 1.0 - std::pow(schedule.beta2, step + 1);

    auto* pm = &adam_m;
    auto* pv = &adam_v;
    auto* pg = &grads;
    std::vector<Mat<float>*> mms, vvs, ggs;
    pm->for_each_tensor([&](const std::string&, Mat<float>& m) { mms.push_back(&m); });
    pv->for_each_tensor([&](const std::string&, Mat<float>& m) { vvs.push_back(&m); });
    pg->for_each_tensor([&](const std::string&, Mat<float>& m) { ggs.push_back(&m); });
    std::size_t ti = 0;
    params.for_each_tensor([&](const std::string&, Mat<float>& w) {
      Mat<float>& m = *mms[ti];
      Mat<float>& v = *vvs[ti];
      Mat<float>& g = *ggs[ti];
      ++ti;
      const float b1 = static_cast<float>(schedule.beta1);
      const float b2 = static_cast<float>(schedule.beta2);
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
      for (Eigen::Index r = 0; r < w.rows(); ++r) {
        for (Eigen::Index cidx = 0; cidx < w.cols(); ++cidx) {
          const double mhat = m(r, cidx) / bc1;
          const double vhat = v(r, cidx) / bc2;
          w(r, cidx) -= static_cast<float>(lr_t * mhat /
                                           (std::sqrt(vhat) + schedule.adam_eps));
        }
      }
    });

    if (step % sample_every == 0) stats.loss_curve.push_back(loss);
    ++step;
  }
  if (!params.all_finite()) throw DivergedLoss("parameters became non-finite");
  if (!heldout.empty()) stats.heldout_ce_final = corpus_ce<float>(params, vocab, heldout);
  return {std::move(params), std::move(stats)};
}

}  // namespace fur
