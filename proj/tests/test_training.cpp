#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "support.hpp"

using namespace vekit;
using vekit::test::random_tensor;
using vekit::test::toy_dims;

namespace {

real ce_value(const Tensor& logits, std::vector<std::int32_t> labels) {
  Graph g;
  return cross_entropy(g.param(logits), labels).value().item();
}

Metrics from_confusion(std::array<std::array<std::size_t, 3>, 3> c) {
  Metrics m;
  m.confusion = c;
  return m;
}

// Metrics with the given per-class recalls over 100 examples per class.
Metrics with_recalls(std::size_t c, std::size_t n, std::size_t e) {
  return from_confusion({{{c, 100 - c, 0}, {0, n, 100 - n}, {100 - e, 0, e}}});
}

// Synthetic corpus: labels follow the first token so a text model can learn it.
struct ToyCorpus {
  std::vector<VEInstance> train, val;
  Vocabulary vocab;
};

ToyCorpus toy_corpus(std::uint64_t seed, std::size_t n_train = 24, std::size_t n_val = 12) {
  ToyCorpus c;
  Rng rng(seed);
  const std::vector<std::string> cue{"no", "maybe", "yes"};
  const std::vector<std::string> filler{"a", "dog", "man", "runs", "sits", "red"};
  auto make = [&](std::size_t n, std::vector<VEInstance>& out) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto label = static_cast<Label>(i % 3);
      std::vector<std::string> tokens{cue[index_of(label)]};
      const auto len = 1 + rng.index(4);
      for (std::size_t t = 0; t < len; ++t) tokens.push_back(filler[rng.index(filler.size())]);
      out.push_back({"img" + std::to_string(i % 5), tokens, label, ""});
    }
  };
  make(n_train, c.train);
  make(n_val, c.val);
  for (const auto& w : cue) c.vocab.add(w);
  for (const auto& w : filler) c.vocab.add(w);
  return c;
}

}  // namespace

TEST(CrossEntropy, Examples) {
  EXPECT_NEAR(ce_value(Tensor::matrix({{0, 0, 0}}), {1}), std::log(3.0), 1e-12);
  EXPECT_NEAR(ce_value(Tensor::matrix({{2, 0, 0}}), {0}), 0.2395, 1e-4);
  EXPECT_NEAR(ce_value(Tensor::matrix({{2, 0, 0}}), {0}), -std::log(std::exp(2.0) / (std::exp(2.0) + 2)), 1e-12);
  EXPECT_NEAR(ce_value(Tensor::matrix({{1000, 0, 0}, {0, 0, 1000}}), {0, 2}), 0.0, 1e-12);
  // Large logits stay finite.
  EXPECT_NEAR(ce_value(Tensor::matrix({{0, 1000, 0}}), {0}), 1000.0, 1e-9);
}

TEST(CrossEntropy, MeanOverBatch) {
  const auto a = ce_value(Tensor::matrix({{2, 0, 0}}), {0});
  const auto b = ce_value(Tensor::matrix({{0, 0, 0}}), {2});
  EXPECT_NEAR(ce_value(Tensor::matrix({{2, 0, 0}, {0, 0, 0}}), {0, 2}), (a + b) / 2, 1e-12);
}

TEST(CrossEntropy, Errors) {
  Graph g;
  auto z = g.constant(Tensor::matrix({{1, 2, 3}}));
  EXPECT_THROW(cross_entropy(z, std::vector<std::int32_t>{3}), ContractError);
  EXPECT_THROW(cross_entropy(z, std::vector<std::int32_t>{-1}), ContractError);
  EXPECT_THROW(cross_entropy(z, std::vector<std::int32_t>{0, 1}), ContractError);
}

TEST(CrossEntropy, GradientIsSoftmaxMinusOneHot) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 1 + rng.index(5);
    Tensor z = random_tensor(rng, {b, 3}, -3, 3, true);
    std::vector<std::int32_t> labels(b);
    for (auto& y : labels) y = static_cast<std::int32_t>(rng.index(3));
    Graph g;
    g.backward(cross_entropy(g.param(z), labels));
    const auto grad = *g.grad_of(z);
    for (std::size_t i = 0; i < b; ++i) {
      double total = 0;
      for (std::size_t j = 0; j < 3; ++j) total += std::exp(z(i, j));
      for (std::size_t j = 0; j < 3; ++j) {
        const double expect = (std::exp(z(i, j)) / total - (static_cast<std::int32_t>(j) == labels[i])) / b;
        EXPECT_NEAR(grad[i * 3 + j], expect, 1e-12);
      }
    }
    Tensor* params[] = {&z};
    EXPECT_LE(finite_diff_check([&](Graph& h) { return cross_entropy(h.param(z), labels); }, params).max_rel_error, 1e-6);
  }
}

TEST(Adam, Examples) {
  Tensor p = Tensor::matrix({{0.3, -2}});
  AdamState s;
  adam_step(std::vector<Tensor*>{&p}, {{0, 0}}, s, {.lr = 1e-4, .weight_decay = 0});
  EXPECT_EQ(p.data, (std::vector<real>{0.3, -2}));

  Tensor q = Tensor::matrix({{1}});
  AdamState s2;
  adam_step(std::vector<Tensor*>{&q}, {{1}}, s2, {.lr = 1e-4, .weight_decay = 0});
  EXPECT_NEAR(q.data[0] - 1.0, -1e-4, 1e-4 * 1e-6);

  Tensor r = Tensor::matrix({{1}});
  AdamState s3;
  adam_step(std::vector<Tensor*>{&r}, {{0}}, s3, {.lr = 1e-4, .weight_decay = 1e-4});
  EXPECT_NEAR(r.data[0], 1 - 1e-8, 1e-15);
}

TEST(Adam, ZeroGradientIsIdentityProperty) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor p = random_tensor(rng, {1 + rng.index(4), 1 + rng.index(4)}, -5, 5);
    const auto before = p.data;
    AdamState s;
    const std::vector<std::vector<real>> zeros{std::vector<real>(p.numel(), 0)};
    for (int step = 0; step < 5; ++step) adam_step(std::vector<Tensor*>{&p}, zeros, s, {.lr = 1e-2, .weight_decay = 0});
    EXPECT_EQ(p.data, before);
  }
}

TEST(Adam, MatchesScalarOracleOverSteps) {
  Rng rng(3);
  Tensor p = random_tensor(rng, {2, 3});
  std::vector<double> ref(p.data.begin(), p.data.end()), m(6, 0), v(6, 0);
  AdamState s;
  const AdamConfig cfg{.lr = 1e-2, .beta1 = 0.8, .beta2 = 0.99, .eps = 1e-6, .weight_decay = 0.1};
  for (int t = 1; t <= 10; ++t) {
    std::vector<real> g(6);
    for (auto& x : g) x = static_cast<real>(rng.uniform(-1, 1));
    adam_step(std::vector<Tensor*>{&p}, {g}, s, cfg);
    for (std::size_t k = 0; k < 6; ++k) {
      ref[k] *= 1 - cfg.lr * cfg.weight_decay;
      m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g[k] * g[k];
      const double mh = m[k] / (1 - std::pow(cfg.beta1, t));
      const double vh = v[k] / (1 - std::pow(cfg.beta2, t));
      ref[k] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
  EXPECT_EQ(s.step, 10u);
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(p.data[k], ref[k], 1e-12);
}

TEST(Adam, ShapeMismatch) {
  Tensor p = Tensor::zeros({2, 2});
  AdamState s;
  EXPECT_THROW(adam_step(std::vector<Tensor*>{&p}, {{1, 2, 3}}, s, {}), ContractError);
  EXPECT_THROW(adam_step(std::vector<Tensor*>{&p}, {}, s, {}), ContractError);
  adam_step(std::vector<Tensor*>{&p}, {{1, 2, 3, 4}}, s, {});
  Tensor q = Tensor::zeros({1, 1});
  EXPECT_THROW(adam_step(std::vector<Tensor*>{&p, &q}, {{1, 2, 3, 4}, {1}}, s, {}), ContractError);
}

TEST(Plateau, Examples) {
  const std::vector<double> improving{0.4, 0.5, 0.6, 0.7, 0.8};
  EXPECT_EQ(plateau_schedule(improving, 1e-4), 1e-4);
  const std::vector<double> flat{0.5, 0.5, 0.5, 0.5};
  EXPECT_NEAR(plateau_schedule(flat, 1e-4), 5e-5, 1e-4 * 1e-9);
  EXPECT_EQ(plateau_schedule(std::span(flat).first(3), 1e-4), 1e-4);
  const std::vector<double> forever(200, 0.3);
  EXPECT_EQ(plateau_schedule(forever, 1e-4), 1e-6);
}

TEST(Plateau, CounterResetsAfterReduction) {
  PlateauScheduler s(1e-4);
  s.step(0.5);
  s.step(0.5);
  s.step(0.5);
  EXPECT_EQ(s.bad_epochs(), 2u);
  EXPECT_NEAR(s.step(0.4), 5e-5, 1e-15);
  EXPECT_EQ(s.bad_epochs(), 0u);
  s.step(0.5);
  s.step(0.5);
  EXPECT_NEAR(s.lr(), 5e-5, 1e-15);
  EXPECT_NEAR(s.step(0.5), 2.5e-5, 1e-15);
  s.step(0.6);  // strict improvement resets
  EXPECT_EQ(s.bad_epochs(), 0u);
  EXPECT_EQ(s.best(), 0.6);
}

TEST(Plateau, NeverBelowFloorProperty) {
  Rng rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> hist(1 + rng.index(100));
    for (auto& a : hist) a = rng.uniform01() * 0.2;
    const PlateauConfig cfg{1 + rng.index(4), rng.uniform(0.1, 0.9), 1e-6};
    const auto lr = plateau_schedule(hist, 1e-4, cfg);
    EXPECT_GE(lr, 1e-6);
    EXPECT_LE(lr, 1e-4);
  }
}

TEST(Plateau, BadConfig) {
  EXPECT_THROW(PlateauScheduler(1e-4, {0, 0.5, 1e-6}), ConfigError);
  EXPECT_THROW(PlateauScheduler(1e-4, {3, 1.0, 1e-6}), ConfigError);
  EXPECT_THROW(PlateauScheduler(1e-4, {3, 0.5, 0}), ConfigError);
}

TEST(SelectCheckpoint, Examples) {
  const CheckpointHistory h{{1, with_recalls(60, 70, 80), "a"}, {2, with_recalls(90, 66, 70), "b"},
                            {3, with_recalls(64, 99, 99), "c"}};
  EXPECT_EQ(select_checkpoint(h).path, "b");
  EXPECT_NEAR(select_checkpoint(h).val.min_class(), 0.66, 1e-4);

  const CheckpointHistory single{{7, with_recalls(10, 20, 30), "only"}};
  EXPECT_EQ(select_checkpoint(single).path, "only");

  // Tie on the minimum (0.60); overall 0.70 vs 0.71.
  const CheckpointHistory tie{{1, with_recalls(60, 70, 80), "x"}, {2, with_recalls(60, 71, 82), "y"}};
  EXPECT_NEAR(tie[0].val.overall(), 0.70, 1e-12);
  EXPECT_NEAR(tie[1].val.overall(), 0.71, 1e-12);
  EXPECT_EQ(select_checkpoint(tie).path, "y");

  const CheckpointHistory full_tie{{4, with_recalls(50, 60, 70), "early"}, {9, with_recalls(50, 70, 60), "late"}};
  EXPECT_EQ(select_checkpoint(full_tie).path, "late");
}

TEST(SelectCheckpoint, Errors) {
  EXPECT_THROW(select_checkpoint({}), ContractError);
  const CheckpointHistory dup{{1, with_recalls(1, 2, 3), "a"}, {1, with_recalls(4, 5, 6), "b"}};
  EXPECT_THROW(select_checkpoint(dup), ContractError);
}

TEST(SelectCheckpoint, PermutationInvariantProperty) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    CheckpointHistory h;
    const auto n = 1 + rng.index(8);
    for (std::size_t i = 0; i < n; ++i) {
      // Coarse recalls so ties on min and overall happen often.
      h.push_back({i + 1, with_recalls(10 * rng.index(3), 10 * rng.index(3), 10 * rng.index(3)), std::to_string(i)});
    }
    const auto chosen = select_checkpoint(h).path;
    rng.shuffle(std::span<CheckpointEntry>(h));
    EXPECT_EQ(select_checkpoint(h).path, chosen);
    // Oracle: lexicographic max of (min, overall, epoch).
    const auto best = std::max_element(h.begin(), h.end(), [](const auto& a, const auto& b) {
      return std::tuple(a.val.min_class(), a.val.overall(), a.epoch) < std::tuple(b.val.min_class(), b.val.overall(), b.epoch);
    });
    EXPECT_EQ(best->path, chosen);
  }
}

TEST(MetricsTest, PerfectAndConstantPredictors) {
  Metrics perfect;
  Metrics constant;
  for (int i = 0; i < 30; ++i) {
    const auto truth = static_cast<Label>(i % 3);
    perfect.add(truth, truth);
    constant.add(truth, Label::entailment);
  }
  EXPECT_EQ(perfect.overall(), 1.0);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(perfect.per_class(c), 1.0);
  EXPECT_NEAR(constant.overall(), 1.0 / 3, 1e-12);
  EXPECT_EQ(constant.per_class(0), 0.0);
  EXPECT_EQ(constant.per_class(1), 0.0);
  EXPECT_EQ(constant.per_class(2), 1.0);
}

TEST(MetricsTest, HandConfusion) {
  // Rows are true C, N, E.
  const auto m = from_confusion({{{5, 3, 2}, {1, 7, 2}, {0, 4, 16}}});
  EXPECT_EQ(m.total(), 40u);
  EXPECT_NEAR(m.overall(), 28.0 / 40, 1e-12);
  EXPECT_NEAR(m.per_class(0), 0.5, 1e-12);
  EXPECT_NEAR(m.per_class(1), 0.7, 1e-12);
  EXPECT_NEAR(m.per_class(2), 0.8, 1e-12);
  EXPECT_NEAR(m.min_class(), 0.5, 1e-12);
  const auto j = m.to_json();
  EXPECT_EQ(j["total"], 40);
  EXPECT_NEAR(j["N"].get<double>(), 0.7, 1e-12);
  Metrics empty;
  EXPECT_EQ(empty.overall(), 0.0);
  EXPECT_EQ(empty.per_class(1), 0.0);
}

TEST(Captions, Loading) {
  std::stringstream in(R"({"1.jpg": "A man, playing.", "2.jpg": ""})");
  const auto c = load_captions(in);
  EXPECT_EQ(c.at("1.jpg"), (std::vector<std::string>{"a", "man", "playing"}));
  EXPECT_TRUE(c.at("2.jpg").empty());
  std::stringstream bad(R"({"1.jpg": 3})");
  EXPECT_THROW(load_captions(bad), SchemaError);
  std::stringstream broken("{");
  EXPECT_THROW(load_captions(broken), ParseError);
}

TEST(Evaluate, InvariantToOrderBatchSizeAndThreads) {
  auto corpus = toy_corpus(6, 30, 40);
  auto p = init_params(Architecture::hypothesis_only, toy_dims(corpus.vocab.size()), 6);
  ModelData data{&corpus.vocab, nullptr, nullptr};
  const auto reference = evaluate(p, corpus.val, data, {.batch_size = 32});
  EXPECT_EQ(reference.total(), 40u);
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    auto shuffled = corpus.val;
    rng.shuffle(std::span<VEInstance>(shuffled));
    const auto m = evaluate(p, shuffled, data, {.batch_size = 1 + rng.index(40), .threads = 1 + rng.index(3)});
    EXPECT_EQ(m.confusion, reference.confusion);
  }
}

TEST(Evaluate, ImageModelsUseTheStore) {
  Rng rng(7);
  auto corpus = toy_corpus(7, 6, 6);
  FeatureStore store;
  for (int i = 0; i < 5; ++i) store.add(test::random_grid(rng, "img" + std::to_string(i), 6, 2));
  const auto p = init_params(Architecture::eve_image, toy_dims(corpus.vocab.size(), 6), 7);
  ModelData data{&corpus.vocab, &store, nullptr};
  EXPECT_EQ(evaluate(p, corpus.val, data).total(), 6u);

  FeatureStore partial;
  partial.add(test::random_grid(rng, "img0", 6, 2));
  ModelData missing{&corpus.vocab, &partial, nullptr};
  EXPECT_THROW(evaluate(p, corpus.val, missing), NotFoundError);
  ModelData none{&corpus.vocab, nullptr, nullptr};
  EXPECT_THROW(evaluate(p, corpus.val, none), ConfigError);
}

TEST(Evaluate, EmptyRoiSetsAreSkippedWithDiagnostics) {
  Rng rng(8);
  auto corpus = toy_corpus(8, 3, 5);
  FeatureStore store;
  for (int i = 0; i < 5; ++i) store.add(test::random_roi(rng, "img" + std::to_string(i), 6, i == 2 ? 0 : 3));
  const auto p = init_params(Architecture::eve_roi, toy_dims(corpus.vocab.size(), 6), 8);
  ModelData data{&corpus.vocab, &store, nullptr};
  std::vector<std::string> notes;
  const auto m = evaluate(p, corpus.val, data, {.diagnostics = &notes});
  EXPECT_EQ(m.skipped, 1u);
  EXPECT_EQ(m.total(), 4u);
  ASSERT_EQ(notes.size(), 1u);
  EXPECT_NE(notes[0].find("img2"), std::string::npos);
}

TEST(Evaluate, TeNeedsCaptions) {
  auto corpus = toy_corpus(9, 3, 6);
  CaptionTable captions;
  for (int i = 0; i < 4; ++i) captions["img" + std::to_string(i)] = {"a", "dog"};
  const auto p = init_params(Architecture::te, toy_dims(corpus.vocab.size()), 9);
  ModelData data{&corpus.vocab, nullptr, &captions};
  const auto m = evaluate(p, corpus.val, data);
  EXPECT_EQ(m.total() + m.skipped, 6u);
  EXPECT_EQ(m.skipped, 1u);  // img4 has no caption
  ModelData none{&corpus.vocab, nullptr, nullptr};
  EXPECT_THROW(evaluate(p, corpus.val, none), ConfigError);
}

TEST(Trainer, LossDecreasesMonotonicallyOnFixedBatch) {
  Rng rng(10);
  auto corpus = toy_corpus(10, 8, 3);
  FeatureStore store;
  for (int i = 0; i < 5; ++i) store.add(test::random_grid(rng, "img" + std::to_string(i), 6, 2));
  auto p = init_params(Architecture::eve_image, toy_dims(corpus.vocab.size(), 6), 10);
  ModelData data{&corpus.vocab, &store, nullptr};
  Trainer trainer(p, {.lr = 1e-3, .weight_decay = 0, .seed = 10});
  const auto batch = make_batches(corpus.train, corpus.vocab, 8, 0, false).front();
  ASSERT_EQ(batch.size(), 8u);
  double prev = trainer.train_step(batch, data);
  for (int step = 1; step < 50; ++step) {
    const double loss = trainer.train_step(batch, data);
    EXPECT_LT(loss, prev) << "step " << step;
    prev = loss;
  }
}

TEST(Trainer, PadEmbeddingRowStaysZero) {
  auto corpus = toy_corpus(11);
  auto p = init_params(Architecture::hypothesis_only, toy_dims(corpus.vocab.size()), 11);
  p.set_embedding_trainable(true);
  const auto before = p.at("embedding").data;
  ModelData data{&corpus.vocab, nullptr, nullptr};
  Trainer trainer(p, {.lr = 1e-2, .weight_decay = 1e-2, .batch_size = 8, .seed = 11});
  trainer.train_epoch(corpus.train, data, 1);
  const auto& e = p.at("embedding");
  for (std::size_t j = 0; j < e.cols(); ++j) EXPECT_EQ(e(0, j), 0.0);
  EXPECT_NE(e.data, before);
}

TEST(Trainer, FrozenEmbeddingUnchanged) {
  auto corpus = toy_corpus(12);
  auto p = init_params(Architecture::hypothesis_only, toy_dims(corpus.vocab.size()), 12);
  const auto before = p.at("embedding").data;
  ModelData data{&corpus.vocab, nullptr, nullptr};
  Trainer trainer(p, {.lr = 1e-2, .batch_size = 8, .seed = 12});
  trainer.train_epoch(corpus.train, data, 1);
  EXPECT_EQ(p.at("embedding").data, before);
}

TEST(Trainer, FitIsReproducibleAndLearns) {
  auto corpus = toy_corpus(13, 30, 15);
  ModelDims dims = toy_dims(corpus.vocab.size());
  dims.embed = 8;
  dims.hidden = 16;
  dims.classifier = 16;
  auto run = [&](std::ostringstream& log) {
    auto p = init_params(Architecture::hypothesis_only, dims, 13);
    p.set_embedding_trainable(true);
    ModelData data{&corpus.vocab, nullptr, nullptr};
    Trainer trainer(p, {.lr = 1e-2, .weight_decay = 0, .batch_size = 8, .max_epochs = 15, .seed = 99});
    auto result = trainer.fit(corpus.train, corpus.val, data, &log);
    return std::make_pair(result, p);
  };
  std::ostringstream log1, log2;
  const auto [r1, p1] = run(log1);
  const auto [r2, p2] = run(log2);
  EXPECT_EQ(log1.str(), log2.str());
  for (const auto& [name, t] : p1.tensors()) EXPECT_EQ(t.data, p2.at(name).data) << name;
  ASSERT_EQ(r1.epochs.size(), 15u);
  EXPECT_EQ(r1.selected.path, r2.selected.path);

  // The cue token determines the label, so validation accuracy reaches 1.
  EXPECT_EQ(r1.selected.val.overall(), 1.0);
  // Checkpoints only on strict overall improvement, and selection picks among them.
  double best = -1;
  for (const auto& e : r1.epochs) {
    EXPECT_EQ(!e.checkpoint_path.empty(), e.val.overall() > best);
    best = std::max(best, e.val.overall());
  }
  EXPECT_TRUE(r1.snapshots.contains(r1.selected.path));

  std::istringstream lines(log1.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    for (const char* key : {"epoch", "lr", "train_loss", "val_overall", "val_C", "val_N", "val_E", "checkpoint_path"})
      EXPECT_TRUE(j.contains(key)) << key;
    ++n;
  }
  EXPECT_EQ(n, 15u);
}

TEST(Trainer, WritesCheckpointsToDirectory) {
  test::TempDir dir;
  auto corpus = toy_corpus(14, 9, 6);
  auto p = init_params(Architecture::hypothesis_only, toy_dims(corpus.vocab.size()), 14);
  ModelData data{&corpus.vocab, nullptr, nullptr};
  Trainer trainer(p, {.lr = 1e-2, .batch_size = 4, .max_epochs = 3, .seed = 1, .checkpoint_dir = dir.path().string()});
  const auto result = trainer.fit(corpus.train, corpus.val, data);
  EXPECT_TRUE(result.snapshots.empty());
  ASSERT_FALSE(result.saved.empty());
  EXPECT_EQ(result.saved.front().path, dir / "epoch_001.vec");
  for (const auto& e : result.saved) EXPECT_NO_THROW(load_checkpoint(e.path));
}

TEST(Trainer, ConfigValidation) {
  auto p = init_params(Architecture::hypothesis_only, toy_dims(), 1);
  EXPECT_THROW(Trainer(p, {.lr = 0}), ConfigError);
  EXPECT_THROW(Trainer(p, {.batch_size = 0}), ConfigError);
  EXPECT_THROW(Trainer(p, {.max_epochs = 0}), ConfigError);
  EXPECT_THROW(Trainer(p, {.weight_decay = -1}), ConfigError);
}

TEST(Trainer, ClassPermutationPermutesLogits) {
  // Relabel C->N->E->C and rotate the output columns of the initial head the
  // same way: training must then produce rotated logits.
  auto corpus = toy_corpus(15, 12, 6);
  const std::size_t sigma[] = {1, 2, 0};
  auto permuted = corpus.train;
  for (auto& inst : permuted) inst.label = static_cast<Label>(sigma[index_of(inst.label)]);

  auto base = init_params(Architecture::hypothesis_only, toy_dims(corpus.vocab.size()), 15);
  Rng rng(15);
  for (auto& v : base.at("head.fc2_b").data) v = static_cast<real>(rng.uniform(-0.5, 0.5));
  auto rotated = base;
  for (const char* name : {"head.fc2_w", "head.fc2_b"}) {
    const auto& src = base.at(name);
    auto& dst = rotated.at(name);
    for (std::size_t r = 0; r < src.rows(); ++r)
      for (std::size_t c = 0; c < 3; ++c) dst(r, sigma[c]) = src(r, c);
  }

  ModelData data{&corpus.vocab, nullptr, nullptr};
  const TrainConfig cfg{.lr = 1e-2, .weight_decay = 1e-3, .batch_size = 4, .seed = 3};
  Trainer ta(base, cfg), tb(rotated, cfg);
  for (std::size_t epoch = 1; epoch <= 5; ++epoch) {
    ta.train_epoch(corpus.train, data, epoch);
    tb.train_epoch(permuted, data, epoch);
  }
  for (const auto& inst : corpus.val) {
    const auto ids = corpus.vocab.encode(inst.tokens);
    const auto za = predict_logits(base, {ids, {}, nullptr});
    const auto zb = predict_logits(rotated, {ids, {}, nullptr});
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(zb[sigma[c]], za[c], 1e-9);
  }
}
