// Forward invariants, gradient checks against central finite differences,
// decoding determinism and checkpoint round trips, all on micro models.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "fur/checkpoint.hpp"
#include "fur/model.hpp"
#include "fur/transformer.hpp"
#include "fur/vocab.hpp"

using namespace fur;

namespace {

ModelConfig micro_config(int vocab_size, std::uint64_t seed = 11) {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 16;
  c.vocab_size = vocab_size;
  c.max_seq = 24;
  c.init_seed = seed;
  return c;
}

Vocab tiny_vocab() {
  return Vocab::build({"a", "b", "c", "d", "e", "f", "g", "h"});
}

// Cross-entropy of fixed targets; used as a generic differentiable scalar.
template <typename S>
double ce_loss(const ModelView<S>& view, const Ids& ids, const Ids& targets,
               Mat<S>* dlogits, Activations<S>* acts_out) {
  Activations<S> local;
  Activations<S>& acts = acts_out ? *acts_out : local;
  forward_seq(view, ids, acts);
  double total = 0.0;
  if (dlogits) dlogits->setZero(acts.logits.rows(), acts.logits.cols());
  for (std::size_t t = 0; t < targets.size(); ++t) {
    const Eigen::VectorXd lp = log_softmax_row(acts.logits, static_cast<Eigen::Index>(t));
    total += -lp(targets[t]);
    if (dlogits) {
      for (Eigen::Index j = 0; j < acts.logits.cols(); ++j)
        (*dlogits)(static_cast<Eigen::Index>(t), j) += static_cast<S>(std::exp(lp(j)));
      (*dlogits)(static_cast<Eigen::Index>(t), targets[t]) -= static_cast<S>(1);
    }
  }
  return total;
}

}  // namespace

TEST_CASE("forward produces probability rows", "[model]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size());
  const auto params = Params<double>::init(cfg);

  const Ids ids = {v.id("a"), v.id("b"), v.id("c"), v.id("a"), v.id("d")};
  const Eigen::MatrixXd probs = forward_probs<double>(params, ids);
  REQUIRE(probs.rows() == 5);
  REQUIRE(probs.cols() == v.size());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    REQUIRE(probs.row(i).minCoeff() >= 0.0);
    REQUIRE(std::abs(probs.row(i).sum() - 1.0) < 1e-6);
  }

  SECTION("rows at init are uniform-ish") {
    // Measured once on the frozen init scheme; bound recorded with headroom.
    const double ratio = probs.maxCoeff() / probs.minCoeff();
    REQUIRE(ratio < 2.0);
  }

  SECTION("sequence too long is rejected") {
    Ids long_ids(static_cast<std::size_t>(cfg.max_seq) + 1, v.id("a"));
    Activations<double> acts;
    REQUIRE_THROWS_AS(forward_seq<double>(params, long_ids, acts), SequenceTooLong);
  }

  SECTION("batch order does not change per-sequence outputs") {
    const Ids other = {v.id("f"), v.id("g")};
    Activations<double> ab, ba;
    forward_batch<double>(params, [&] {
      Ids flat = ids;
      flat.insert(flat.end(), other.begin(), other.end());
      return flat;
    }(), {SeqSpan{0, 5}, SeqSpan{5, 2}}, ab);
    forward_batch<double>(params, [&] {
      Ids flat = other;
      flat.insert(flat.end(), ids.begin(), ids.end());
      return flat;
    }(), {SeqSpan{0, 2}, SeqSpan{2, 5}}, ba);
    REQUIRE(ab.logits.block(0, 0, 5, v.size()) == ba.logits.block(2, 0, 5, v.size()));
    REQUIRE(ab.logits.block(5, 0, 2, v.size()) == ba.logits.block(0, 0, 2, v.size()));
  }
}

TEST_CASE("analytic gradients match central finite differences", "[model][grad]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size(), 29);
  auto params = Params<double>::init(cfg);

  const Ids ids = {v.id("a"), v.id("c"), v.id("b"), v.id("e"), v.id("d"), v.id("a")};
  const Ids targets = {v.id("c"), v.id("b"), v.id("e"), v.id("d"), v.id("a"), v.id("h")};

  Mat<double> dlogits;
  Activations<double> acts;
  ce_loss<double>(params, ids, targets, &dlogits, &acts);
  Params<double> grads = Params<double>::zeros_like(cfg);
  backward_batch<double>(params, acts, dlogits, GradScope::All, &grads);

  const double h = 1e-5;
  Rng rng(101);
  double max_rel = 0.0;
  int checked = 0;
  params.for_each_tensor([&](const std::string& name, Mat<double>& w) {
    Mat<double>* g = nullptr;
    grads.for_each_tensor([&](const std::string& gn, Mat<double>& gm) {
      if (gn == name) g = &gm;
    });
    const int samples = 6;
    for (int s = 0; s < samples; ++s) {
      const Eigen::Index r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.rows())));
      const Eigen::Index c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(w.cols())));
      const double keep = w(r, c);
      w(r, c) = keep + h;
      const double up = ce_loss<double>(params, ids, targets, nullptr, nullptr);
      w(r, c) = keep - h;
      const double dn = ce_loss<double>(params, ids, targets, nullptr, nullptr);
      w(r, c) = keep;
      const double fd = (up - dn) / (2 * h);
      const double an = (*g)(r, c);
      // Mixed tolerance: tiny entries are dominated by cancellation noise in
      // the finite difference itself, so they are compared absolutely.
      const double err = std::abs(fd - an) - 1e-5 * std::max(std::abs(fd), std::abs(an));
      max_rel = std::max(max_rel, err);
      ++checked;
    }
  });
  INFO("entries checked: " << checked << ", worst excess error: " << max_rel);
  REQUIRE(checked >= 64);
  REQUIRE(max_rel < 1e-9);

  SECTION("ff2-only scope zeroes everything else and matches the full grads") {
    Params<double> scoped = Params<double>::zeros_like(cfg);
    backward_batch<double>(params, acts, dlogits, GradScope::Ff2Only, &scoped);
    scoped.for_each_tensor([&](const std::string& name, const Mat<double>& m) {
      if (is_ff2_tensor(name)) return;
      REQUIRE(m.isZero(0.0));
    });
    for (int li = 0; li < cfg.n_layers; ++li) {
      REQUIRE(scoped.layers[li].w2 == grads.layers[li].w2);
    }
  }

  SECTION("constant loss yields exactly zero gradients") {
    Mat<double> zero_dlogits = Mat<double>::Zero(acts.logits.rows(), acts.logits.cols());
    Params<double> g0 = Params<double>::zeros_like(cfg);
    backward_batch<double>(params, acts, zero_dlogits, GradScope::All, &g0);
    g0.for_each_tensor([&](const std::string&, const Mat<double>& m) {
      REQUIRE(m.isZero(0.0));
    });
  }
}

TEST_CASE("LoRA adapters: zero-init equivalence and factor gradients", "[model][lora]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size(), 31);
  const auto params = Params<double>::init(cfg);
  auto lora = LoraState<double>::init(cfg, 4, 32.0, 0.0, 77);

  const Ids ids = {v.id("a"), v.id("b"), v.id("c"), v.id("d")};
  const Ids targets = {v.id("b"), v.id("c"), v.id("d"), v.id("e")};

  SECTION("zero-initialized adapters do not change outputs") {
    Activations<double> base, adapted;
    forward_seq<double>(params, ids, base);
    forward_seq<double>(ModelView<double>(params, lora), ids, adapted);
    REQUIRE(base.logits == adapted.logits);
  }

  SECTION("rank larger than FF2 dims is rejected") {
    REQUIRE_THROWS_AS(LoraState<double>::init(cfg, cfg.d_ff + 1, 32.0, 0.1, 1),
                      RankTooLarge);
  }

  SECTION("factor gradients match finite differences") {
    // Give b nonzero values so both factors have nontrivial gradients.
    Rng noise(5);
    for (auto& l : lora.layers)
      for (Eigen::Index i = 0; i < l.b.rows(); ++i)
        for (Eigen::Index j = 0; j < l.b.cols(); ++j) l.b(i, j) = noise.normal(0.0, 0.05);

    const ModelView<double> view(params, lora);
    Mat<double> dlogits;
    Activations<double> acts;
    ce_loss<double>(view, ids, targets, &dlogits, &acts);
    Params<double> unused = Params<double>::zeros_like(cfg);
    LoraGrads<double> lg = LoraGrads<double>::zeros_like(lora);
    backward_batch<double>(view, acts, dlogits, GradScope::Lora, &unused, &lg);

    unused.for_each_tensor([&](const std::string&, const Mat<double>& m) {
      REQUIRE(m.isZero(0.0));  // base tensors out of scope
    });

    const double h = 1e-5;
    Rng rng(33);
    for (int li = 0; li < cfg.n_layers; ++li) {
      for (int s = 0; s < 4; ++s) {
        auto& A = lora.layers[li].a;
        const Eigen::Index r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(A.rows())));
        const Eigen::Index c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(A.cols())));
        const double keep = A(r, c);
        A(r, c) = keep + h;
        const double up = ce_loss<double>(ModelView<double>(params, lora), ids, targets, nullptr, nullptr);
        A(r, c) = keep - h;
        const double dn = ce_loss<double>(ModelView<double>(params, lora), ids, targets, nullptr, nullptr);
        A(r, c) = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = lg.layers[li].a(r, c);
        REQUIRE(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-6);
      }
      for (int s = 0; s < 4; ++s) {
        auto& B = lora.layers[li].b;
        const Eigen::Index r = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(B.rows())));
        const Eigen::Index c = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(B.cols())));
        const double keep = B(r, c);
        B(r, c) = keep + h;
        const double up = ce_loss<double>(ModelView<double>(params, lora), ids, targets, nullptr, nullptr);
        B(r, c) = keep - h;
        const double dn = ce_loss<double>(ModelView<double>(params, lora), ids, targets, nullptr, nullptr);
        B(r, c) = keep;
        const double fd = (up - dn) / (2 * h);
        const double an = lg.layers[li].b(r, c);
        REQUIRE(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}) < 1e-6);
      }
    }
  }
}

TEST_CASE("sequence scoring follows the chain rule product", "[model][score]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size(), 13);
  const auto params = Params<double>::init(cfg);

  SECTION("length-normalized combination is (1/T) * product") {
    SeqProb one{std::log(0.25), 1};
    REQUIRE(one.value() == Catch::Approx(0.25).epsilon(1e-12));
    SeqProb two{std::log(0.5 * 0.5), 2};
    REQUIRE(two.value() == Catch::Approx(0.125).epsilon(1e-12));
  }

  SECTION("matches an exhaustive product over forward rows") {
    const Ids prefix = {v.id("a"), v.id("b"), v.id("c")};
    const Ids target = {v.id("d"), v.id("e"), v.id("a"), v.id("b")};
    Ids full = {v.bos()};
    full.insert(full.end(), prefix.begin(), prefix.end());
    full.insert(full.end(), target.begin(), target.end());
    const Eigen::MatrixXd rows = forward_probs<double>(params, full);
    double product = 1.0;
    for (std::size_t j = 0; j < target.size(); ++j) {
      product *= rows(static_cast<Eigen::Index>(prefix.size() + j), target[j]);
    }
    const double expected = product / static_cast<double>(target.size());
    const double got = sequence_prob<double>(params, v, prefix, target);
    REQUIRE(got == Catch::Approx(expected).margin(1e-9));
    REQUIRE(got > 0.0);
    REQUIRE(got <= 1.0);
  }

  SECTION("empty target is an error") {
    REQUIRE_THROWS_AS(sequence_prob<double>(params, v, {v.id("a")}, {}), EmptyTarget);
  }
}

TEST_CASE("incremental decoding agrees with full forward", "[model][decode]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size(), 17);
  const auto params = Params<double>::init(cfg);

  const Ids ids = {v.bos(), v.id("a"), v.id("f"), v.id("c"), v.id("h")};
  Activations<double> acts;
  forward_seq<double>(params, ids, acts);

  DecodeState<double> state{ModelView<double>(params)};
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const Eigen::VectorXd row = state.step(ids[t]);
    for (int j = 0; j < v.size(); ++j) {
      REQUIRE(row(j) == Catch::Approx(acts.logits(static_cast<Eigen::Index>(t), j)).margin(1e-9));
    }
  }
}

TEST_CASE("greedy decoding is deterministic and honors stop conditions", "[model][decode]") {
  const Vocab v = tiny_vocab();
  const ModelConfig cfg = micro_config(v.size(), 19);
  const auto params = Params<double>::init(cfg);

  const Ids prompt = {v.id("a"), v.id("b")};
  const StopScan stop_on_eos = [&](const Ids&, const Ids& gen) {
    StopDecision d;
    if (!gen.empty() && gen.back() == v.eos()) {
      d.stop = true;
      d.drop = 1;
    }
    return d;
  };

  const GreedyResult r1 = greedy_decode<double>(params, v, prompt, stop_on_eos, 10);
  const GreedyResult r2 = greedy_decode<double>(params, v, prompt, stop_on_eos, 10);
  REQUIRE(r1.generated == r2.generated);

  SECTION("prompt that already terminates yields an empty generation") {
    const StopScan prompt_aware = [&](const Ids& p, const Ids& gen) {
      StopDecision d;
      const Ids& tail = gen.empty() ? p : gen;
      if (!tail.empty() && tail.back() == v.eos()) {
        d.stop = true;
        d.drop = gen.empty() ? 0 : 1;
      }
      return d;
    };
    Ids ended = prompt;
    ended.push_back(v.eos());
    const GreedyResult r = greedy_decode<double>(params, v, ended, prompt_aware, 10);
    REQUIRE(r.generated.empty());
  }

  SECTION("overlong prompt is rejected") {
    Ids prompt_full(static_cast<std::size_t>(cfg.max_seq), v.id("a"));
    REQUIRE_THROWS_AS(greedy_decode<double>(params, v, prompt_full, stop_on_eos, 4),
                      SequenceTooLong);
  }
}

TEST_CASE("checkpoint round trip is bit-identical", "[model][checkpoint]") {
  const Vocab v = tiny_vocab();
  ModelConfig cfg = micro_config(v.size(), 23);
  const auto params = Params<float>::init(cfg);

  const auto path = std::filesystem::temp_directory_path() / "fur_ckpt_test.bin";
  save_checkpoint(params, v, path.string());
  const LoadedModel loaded = load_checkpoint(path.string());

  REQUIRE(loaded.params.config == cfg);
  REQUIRE(bit_equal(loaded.params, params));
  REQUIRE(loaded.vocab.tokens() == v.tokens());

  SECTION("param count formula matches allocated tensors") {
    std::int64_t total = 0;
    params.for_each_tensor([&](const std::string&, const Mat<float>& m) { total += m.size(); });
    REQUIRE(total == param_count(cfg));
  }

  SECTION("ff2 mask is exactly one tensor per layer") {
    const auto names = ff2_tensor_names(params);
    REQUIRE(static_cast<int>(names.size()) == cfg.n_layers);
  }

  std::filesystem::remove(path);
}
