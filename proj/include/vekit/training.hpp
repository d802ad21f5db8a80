#pragma once

// Loss, optimizer, learning-rate schedule, metrics, checkpoint selection and
// the training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "vekit/checkpoint.hpp"
#include "vekit/dataset.hpp"
#include "vekit/image_features.hpp"
#include "vekit/models.hpp"
#include "vekit/numcore.hpp"

namespace vekit {

// ---- loss --------------------------------------------------------------------

/// Mean over rows of -log softmax(logits)[label]. logits is B x C, labels
/// holds B class indices.
inline Var cross_entropy(Var logits, std::span<const std::int32_t> labels) {
  const auto& z = logits.value();
  if (z.rank() != 2) throw DimensionError("cross_entropy: logits must be a matrix, got " + shape_str(z.shape));
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b) {
    throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                        " rows");
  }
  for (auto y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(y) + " out of range [0, " + std::to_string(c) + ")");
    }
  }
  std::vector<real> probs(b * c);
  real total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    real mx = z(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z(i, j));
    real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z(i, j) - mx);
    const real lse = mx + std::log(s);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(z(i, j) - lse);
    total += lse - z(i, static_cast<std::size_t>(labels[i]));
  }
  std::vector<std::int32_t> ys(labels.begin(), labels.end());
  const auto il = logits.id();
  return logits.graph().record(
      OpKind::cross_entropy, {logits}, Tensor::scalar(total / static_cast<real>(b)),
      [il, b, c, probs = std::move(probs), ys = std::move(ys)](Graph& g, std::size_t self) {
        if (!g.needs_grad(il)) return;
        const real up = g.grad(self)[0] / static_cast<real>(b);
        auto dz = g.grad_buffer(il);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            const real target = static_cast<std::size_t>(ys[i]) == j ? real(1) : real(0);
            dz[i * c + j] += up * (probs[i * c + j] - target);
          }
      });
}

// ---- optimizer ---------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<real>> m;
  std::vector<std::vector<real>> v;
};

/// One bias-corrected Adam update. Weight decay is decoupled: p <- p - lr*wd*p
/// is applied before the Adam delta and never enters the moments.
inline void adam_step(std::span<Tensor* const> params, const std::vector<std::vector<real>>& grads, AdamState& state,
                      const AdamConfig& cfg) {
  if (grads.size() != params.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i]->numel()) {
      throw ContractError("adam_step: gradient " + std::to_string(i) + " has " + std::to_string(grads[i].size()) +
                          " values for a parameter of shape " + shape_str(params[i]->shape));
    }
  }
  if (state.m.empty()) {
    for (auto* p : params) {
      state.m.emplace_back(p->numel(), real(0));
      state.v.emplace_back(p->numel(), real(0));
    }
  } else if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks a different parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i]->data;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != p.size()) throw ContractError("adam_step: optimizer state shape mismatch");
    const auto& g = grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      double pk = p[k];
      pk -= cfg.lr * cfg.weight_decay * pk;
      const double gk = g[k];
      const double mk = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      const double vk = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      m[k] = static_cast<real>(mk);
      v[k] = static_cast<real>(vk);
      pk -= cfg.lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.eps);
      p[k] = static_cast<real>(pk);
    }
  }
}

// ---- schedule ----------------------------------------------------------------

struct PlateauConfig {
  std::size_t patience = 3;
  double factor = 0.5;
  double min_lr = 1e-6;
};

/// Reduce-on-plateau over validation accuracy. After `patience` consecutive
/// epochs without a strict improvement of the best accuracy, the rate is
/// multiplied by `factor` (never below min_lr) and the counter restarts.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, PlateauConfig cfg = {}) : lr_(lr), cfg_(cfg) {
    if (cfg.patience < 1) throw ConfigError("plateau patience must be at least 1");
    if (!(cfg.factor > 0 && cfg.factor < 1)) throw ConfigError("plateau factor must lie in (0, 1)");
    if (!(cfg.min_lr > 0)) throw ConfigError("plateau floor must be positive");
  }

  /// Records one epoch's validation accuracy; returns the rate for the next epoch.
  double step(double val_accuracy) {
    if (!best_ || val_accuracy > *best_) {
      best_ = val_accuracy;
      bad_epochs_ = 0;
    } else if (++bad_epochs_ >= cfg_.patience) {
      lr_ = std::max(lr_ * cfg_.factor, cfg_.min_lr);
      bad_epochs_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }
  std::size_t bad_epochs() const { return bad_epochs_; }
  std::optional<double> best() const { return best_; }

 private:
  double lr_;
  PlateauConfig cfg_;
  std::optional<double> best_;
  std::size_t bad_epochs_ = 0;
};

/// Replays a validation-accuracy history and returns the resulting rate.
inline double plateau_schedule(std::span<const double> history, double initial_lr, const PlateauConfig& cfg = {}) {
  PlateauScheduler s(initial_lr, cfg);
  for (double a : history) s.step(a);
  return s.lr();
}

// ---- metrics -----------------------------------------------------------------

/// Confusion counts indexed [true][predicted] in class order (C, N, E).
struct Metrics {
  std::array<std::array<std::size_t, num_classes>, num_classes> confusion{};
  std::size_t skipped = 0;

  void add(Label truth, Label predicted) { ++confusion[index_of(truth)][index_of(predicted)]; }

  void merge(const Metrics& o) {
    for (std::size_t i = 0; i < num_classes; ++i)
      for (std::size_t j = 0; j < num_classes; ++j) confusion[i][j] += o.confusion[i][j];
    skipped += o.skipped;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : confusion)
      for (auto c : row) n += c;
    return n;
  }

  std::size_t class_total(std::size_t c) const {
    std::size_t n = 0;
    for (auto v : confusion[c]) n += v;
    return n;
  }

  double overall() const {
    const auto n = total();
    if (n == 0) return 0.0;
    std::size_t hit = 0;
    for (std::size_t c = 0; c < num_classes; ++c) hit += confusion[c][c];
    return static_cast<double>(hit) / static_cast<double>(n);
  }

  /// Recall of class c; 0 when the class has no examples.
  double per_class(std::size_t c) const {
    const auto n = class_total(c);
    return n == 0 ? 0.0 : static_cast<double>(confusion[c][c]) / static_cast<double>(n);
  }

  double min_class() const {
    double m = per_class(0);
    for (std::size_t c = 1; c < num_classes; ++c) m = std::min(m, per_class(c));
    return m;
  }

  json to_json() const {
    json j;
    j["overall"] = overall();
    for (std::size_t c = 0; c < num_classes; ++c) j[std::string(label_short[c])] = per_class(c);
    j["total"] = total();
    j["skipped"] = skipped;
    j["confusion"] = confusion;
    return j;
  }
};

// ---- checkpoint selection ----------------------------------------------------

struct CheckpointEntry {
  std::size_t epoch = 0;
  Metrics val;
  std::string path;
};

using CheckpointHistory = std::vector<CheckpointEntry>;

/// Highest minimum per-class accuracy; ties go to higher overall accuracy,
/// then to the later epoch. Independent of entry order.
inline const CheckpointEntry& select_checkpoint(const CheckpointHistory& history) {
  if (history.empty()) throw ContractError("select_checkpoint: empty history");
  std::set<std::size_t> epochs;
  for (const auto& e : history) {
    if (!epochs.insert(e.epoch).second) {
      throw ContractError("select_checkpoint: epoch " + std::to_string(e.epoch) + " appears twice");
    }
  }
  const CheckpointEntry* best = &history.front();
  for (const auto& e : history) {
    const double a = e.val.min_class(), b = best->val.min_class();
    if (a != b) {
      if (a > b) best = &e;
      continue;
    }
    const double oa = e.val.overall(), ob = best->val.overall();
    if (oa != ob) {
      if (oa > ob) best = &e;
      continue;
    }
    if (e.epoch > best->epoch) best = &e;
  }
  return *best;
}

// ---- model inputs ------------------------------------------------------------

/// Caption token lists keyed by image id; the TE model's premise.
using CaptionTable = std::map<std::string, std::vector<std::string>>;

/// Reads a JSON object mapping image id to caption text.
inline CaptionTable load_captions(std::istream& in) {
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(1, std::string("captions: ") + e.what());
  }
  if (!j.is_object()) throw SchemaError("captions file must be a JSON object of image id -> caption");
  CaptionTable out;
  for (const auto& [id, caption] : j.items()) {
    if (!caption.is_string()) throw SchemaError("caption for image " + id + " is not a string");
    out.emplace(id, tokenize(caption.get<std::string>()));
  }
  return out;
}

inline CaptionTable load_captions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open captions file " + path);
  return load_captions(in);
}

/// Side inputs a model may need beyond the hypothesis tokens.
struct ModelData {
  const Vocabulary* vocab = nullptr;
  FeatureStore* features = nullptr;
  const CaptionTable* captions = nullptr;
};

namespace detail {

/// Assembles the forward input of one batch row. Returns false (and fills
/// `why`) when a TE caption is missing or an ROI file has no regions.
/// Feature lookups use the const store interface, so callers preload it.
inline bool row_input(const ModelParams& p, const Batch& batch, std::size_t row, const ModelData& data,
                      const FeatureStore* store, std::vector<std::int32_t>& premise, ModelInput& in,
                      std::string& why) {
  in.hypothesis = batch.row(row);
  in.premise = {};
  in.features = nullptr;
  const auto& image = batch.image_ids[row];
  if (p.arch() == Architecture::te) {
    if (!data.captions || !data.vocab) throw ConfigError("the te model needs a captions table and vocabulary");
    auto it = data.captions->find(image);
    if (it == data.captions->end()) {
      why = "no caption for image " + image;
      return false;
    }
    premise = data.vocab->encode(it->second);
    in.premise = premise;
  } else if (uses_images(p.arch())) {
    if (!store) throw ConfigError(std::string(to_string(p.arch())) + " needs a feature store");
    in.features = &store->get(image);
    if (in.features->count() == 0) {
      why = "image " + image + " has no regions";
      return false;
    }
  }
  return true;
}

inline void preload_features(const ModelParams& p, const std::vector<VEInstance>& part, ModelData& data) {
  if (!uses_images(p.arch())) return;
  if (!data.features) throw ConfigError(std::string(to_string(p.arch())) + " needs a feature store");
  for (const auto& inst : part) data.features->get(inst.image_id);
}

inline std::size_t argmax3(const Tensor& row_logits, std::size_t row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < num_classes; ++j) {
    if (row_logits(row, j) > row_logits(row, best)) best = j;
  }
  return best;
}

}  // namespace detail

/// Logits of a single input, with gradient tracking off.
inline std::array<real, num_classes> predict_logits(const ModelParams& p, const ModelInput& in) {
  Graph g;
  g.set_grad_enabled(false);
  const auto& z = forward(g, p, in).logits.value();
  return {z.data[0], z.data[1], z.data[2]};
}

// ---- evaluation --------------------------------------------------------------

struct EvalOptions {
  std::size_t batch_size = default_eval_batch_size;
  std::size_t threads = 1;
  std::vector<std::string>* diagnostics = nullptr;
};

/// Argmax predictions over a partition accumulated into a confusion matrix.
/// Batches are spread over `threads` workers with read-only parameters; the
/// counts are summed, so the result does not depend on scheduling. A missing
/// feature file aborts the evaluation (NotFoundError).
inline Metrics evaluate(const ModelParams& p, const std::vector<VEInstance>& part, ModelData& data,
                        const EvalOptions& opts = {}) {
  if (!data.vocab) throw ConfigError("evaluate needs a vocabulary");
  detail::preload_features(p, part, data);
  const FeatureStore* store = data.features;
  const auto batches = make_batches(part, *data.vocab, opts.batch_size, 0, false);
  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.threads, batches.size()));

  std::vector<Metrics> partial(workers);
  std::vector<std::vector<std::string>> notes(workers);
  std::vector<std::exception_ptr> errors(workers);
  auto run = [&](std::size_t w) {
    try {
      std::vector<std::int32_t> premise;
      for (std::size_t b = w; b < batches.size(); b += workers) {
        const auto& batch = batches[b];
        for (std::size_t i = 0; i < batch.size(); ++i) {
          ModelInput in;
          std::string why;
          if (!detail::row_input(p, batch, i, data, store, premise, in, why)) {
            ++partial[w].skipped;
            notes[w].push_back(why);
            continue;
          }
          const auto z = predict_logits(p, in);
          std::size_t pred = 0;
          for (std::size_t j = 1; j < num_classes; ++j) {
            if (z[j] > z[pred]) pred = j;
          }
          partial[w].add(batch.labels[i], static_cast<Label>(pred));
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Metrics out;
  for (std::size_t w = 0; w < workers; ++w) {
    out.merge(partial[w]);
    if (opts.diagnostics) opts.diagnostics->insert(opts.diagnostics->end(), notes[w].begin(), notes[w].end());
  }
  return out;
}

// ---- training loop -----------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t batch_size = default_train_batch_size;
  std::size_t eval_batch_size = default_eval_batch_size;
  std::size_t max_epochs = 100;
  PlateauConfig plateau;
  std::uint64_t seed = 0;
  std::size_t eval_threads = 1;
  std::string checkpoint_dir;  // empty: keep checkpoints in memory only

  void validate() const {
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
    if (batch_size == 0 || eval_batch_size == 0) throw ConfigError("batch sizes must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (plateau.patience == 0) throw ConfigError("patience must be positive");
    if (!(plateau.factor > 0 && plateau.factor < 1)) throw ConfigError("lr factor must lie in (0, 1)");
    if (!(plateau.min_lr > 0)) throw ConfigError("min_lr must be positive");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  Metrics val;
  std::string checkpoint_path;  // empty when the epoch did not improve

  json to_json() const {
    return {{"epoch", epoch},
            {"lr", lr},
            {"train_loss", train_loss},
            {"val_overall", val.overall()},
            {"val_C", val.per_class(0)},
            {"val_N", val.per_class(1)},
            {"val_E", val.per_class(2)},
            {"checkpoint_path", checkpoint_path.empty() ? json(nullptr) : json(checkpoint_path)}};
  }
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  CheckpointHistory saved;
  CheckpointEntry selected;
  std::map<std::string, ModelParams> snapshots;  // checkpoint path -> params, when not written to disk
};

/// Owns the optimizer state for one ModelParams. Gradients are computed
/// batch by batch and applied serially, so runs are seed-deterministic.
class Trainer {
 public:
  Trainer(ModelParams& params, TrainConfig cfg) : params_(params), cfg_(std::move(cfg)), sched_(cfg_.lr, cfg_.plateau) {
    cfg_.validate();
    adam_.lr = cfg_.lr;
    adam_.weight_decay = cfg_.weight_decay;
  }

  double lr() const { return adam_.lr; }
  const TrainConfig& config() const { return cfg_; }

  /// One optimizer step on a batch; returns the mean loss over rows that
  /// produced an input (NaN if none did).
  double train_step(const Batch& batch, ModelData& data) {
    Graph g;
    std::vector<Var> rows;
    std::vector<std::int32_t> labels;
    std::vector<std::int32_t> premise;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ModelInput in;
      std::string why;
      if (uses_images(params_.arch()) && data.features) data.features->get(batch.image_ids[i]);
      if (!detail::row_input(params_, batch, i, data, data.features, premise, in, why)) continue;
      rows.push_back(forward(g, params_, in).logits);
      labels.push_back(static_cast<std::int32_t>(index_of(batch.labels[i])));
    }
    if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
    Var loss = cross_entropy(concat_rows(rows), labels);
    g.backward(loss);

    auto trainable = params_.trainable();
    std::vector<std::vector<real>> grads;
    grads.reserve(trainable.size());
    for (auto* t : trainable) {
      auto gr = g.grad_of(*t);
      grads.push_back(gr ? std::move(*gr) : std::vector<real>(t->numel(), real(0)));
      if (t == &params_.at("embedding")) {
        const auto w = t->cols();
        std::fill_n(grads.back().begin(), w, real(0));
      }
    }
    adam_step(trainable, grads, adam_state_, adam_);
    return loss.value().item();
  }

  /// Shuffled pass over a partition; returns the mean batch loss.
  double train_epoch(const std::vector<VEInstance>& part, ModelData& data, std::size_t epoch) {
    const auto batches = make_batches(part, *data.vocab, cfg_.batch_size, epoch_seed(epoch), true);
    double total = 0;
    std::size_t n = 0;
    for (const auto& b : batches) {
      const double l = train_step(b, data);
      if (std::isnan(l)) continue;
      total += l;
      ++n;
    }
    return n == 0 ? 0.0 : total / static_cast<double>(n);
  }

  /// Full loop: train, validate, save on overall-accuracy improvement,
  /// step the scheduler, log one JSON line per epoch. The returned
  /// selection is the max-min per-class checkpoint among the saved ones.
  TrainResult fit(const std::vector<VEInstance>& train, const std::vector<VEInstance>& val, ModelData& data,
                  std::ostream* log = nullptr) {
    if (!data.vocab) throw ConfigError("training needs a vocabulary");
    if (train.empty()) throw ContractError("training partition is empty");
    TrainResult result;
    double best_overall = -1.0;
    for (std::size_t epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      EpochRecord rec;
      rec.epoch = epoch;
      rec.lr = adam_.lr;
      rec.train_loss = train_epoch(train, data, epoch);
      rec.val = evaluate(params_, val, data, {cfg_.eval_batch_size, cfg_.eval_threads, nullptr});
      if (rec.val.overall() > best_overall) {
        best_overall = rec.val.overall();
        rec.checkpoint_path = checkpoint_name(epoch);
        if (!cfg_.checkpoint_dir.empty()) {
          save_checkpoint(rec.checkpoint_path, params_);
        } else {
          result.snapshots.insert_or_assign(rec.checkpoint_path, params_);
        }
        result.saved.push_back({epoch, rec.val, rec.checkpoint_path});
      }
      adam_.lr = sched_.step(rec.val.overall());
      if (log) *log << rec.to_json().dump() << '\n' << std::flush;
      result.epochs.push_back(std::move(rec));
    }
    result.selected = select_checkpoint(result.saved);
    return result;
  }

 private:
  std::uint64_t epoch_seed(std::size_t epoch) const {
    return cfg_.seed + 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(epoch);
  }

  std::string checkpoint_name(std::size_t epoch) const {
    char name[32];
    std::snprintf(name, sizeof name, "epoch_%03zu.vec", epoch);
    if (cfg_.checkpoint_dir.empty()) return name;
    return (std::filesystem::path(cfg_.checkpoint_dir) / name).string();
  }

  ModelParams& params_;
  TrainConfig cfg_;
  PlateauScheduler sched_;
  AdamConfig adam_;
  AdamState adam_state_;
};

}  // namespace vekit
