#pragma once

// The ve-kit command line: build-dataset, audit, stats, train, eval and
// visualize. Exit codes: 0 success, 1 validation or data failure, 2 usage
// or configuration error.
//
// Every option may also come from a key = value config file (--config).
// Precedence: flags, then VEKIT_SEED for the seed, then the config file,
// then built-in defaults. The resolved settings are echoed to stderr.

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vekit/checkpoint.hpp"
#include "vekit/dataset.hpp"
#include "vekit/image_features.hpp"
#include "vekit/models.hpp"
#include "vekit/text_encoder.hpp"
#include "vekit/training.hpp"
#include "vekit/visualize.hpp"

namespace vekit::cli {

enum ExitCode : int { exit_ok = 0, exit_validation = 1, exit_usage = 2 };

struct OptionSpec {
  std::string name;
  std::string default_value;  // empty: no default
  std::string help;
  bool required = false;
};

/// Fully resolved string settings of one command with typed accessors.
class Settings {
 public:
  void set(const std::string& key, std::string value, std::string source) {
    values_[key] = {std::move(value), std::move(source)};
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("option --" + key + " is not set");
    return it->second.first;
  }

  std::string str_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? str(key) : fallback;
  }

  double number(const std::string& key) const {
    const auto& s = str(key);
    double v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError("--" + key + ": '" + s + "' is not a number");
    return v;
  }

  std::uint64_t count(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError("--" + key + ": '" + s + "' is not a non-negative integer");
    }
    return v;
  }

  void echo(std::ostream& err, const std::string& command) const {
    err << "ve-kit " << command << " resolved config:\n";
    for (const auto& [key, v] : values_) err << "  " << key << " = " << v.first << "  (" << v.second << ")\n";
  }

 private:
  std::map<std::string, std::pair<std::string, std::string>> values_;
};

/// Reads "key = value" lines; '#' starts a comment.
inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++n;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ":" + std::to_string(n) + ": expected key = value");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(path + ":" + std::to_string(n) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

struct Io {
  std::ostream& out;
  std::ostream& err;
};

using Runner = std::function<int(const Settings&, Io&)>;

struct Command {
  std::string name;
  std::string help;
  std::vector<OptionSpec> options;
  Runner run;
};

namespace detail {

inline void print_diagnostics(std::ostream& err, const std::string& source, const std::vector<Diagnostic>& ds) {
  for (const auto& d : ds) {
    err << source;
    if (d.line) err << ":" << d.line;
    err << ": " << d.message << '\n';
  }
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

inline void emit(Io& io, const Settings& s, const std::string& text) {
  if (s.has("out")) {
    write_text(s.str("out"), text);
  } else {
    io.out << text;
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline Vocabulary load_vocab_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("cannot open vocabulary " + path);
  return Vocabulary::load(in);
}

inline std::string default_vocab_for(const std::string& checkpoint) {
  return (std::filesystem::path(checkpoint).parent_path() / "vocab.txt").string();
}

}  // namespace detail

// ---- subcommands -------------------------------------------------------------

inline int run_build_dataset(const Settings& s, Io& io) {
  const auto policy = s.str("on-error");
  if (policy != "abort" && policy != "skip") throw ConfigError("--on-error must be abort or skip");
  const auto missing = s.str("missing-image");
  if (missing != "drop" && missing != "abort") throw ConfigError("--missing-image must be drop or abort");

  std::vector<SnliRecord> records;
  std::size_t malformed = 0;
  for (const auto& path : detail::split_list(s.str("snli"))) {
    auto parsed = parse_snli(path, policy == "skip" ? OnError::skip : OnError::abort);
    detail::print_diagnostics(io.err, path, parsed.diagnostics);
    malformed += parsed.diagnostics.size();
    records.insert(records.end(), std::make_move_iterator(parsed.records.begin()),
                   std::make_move_iterator(parsed.records.end()));
  }
  const auto split = ImageSplit::load(s.str("split"));
  BuildOptions opts;
  opts.on_missing_image = missing == "abort" ? MissingImagePolicy::abort : MissingImagePolicy::drop;
  auto built = build_snli_ve(records, split, opts);
  detail::print_diagnostics(io.err, "build", built.diagnostics);

  json report;
  report["records"] = records.size();
  report["malformed_lines"] = malformed;
  report["dropped_unlabeled"] = built.dropped_unlabeled;
  report["dropped_unassigned"] = built.dropped_unassigned;
  report["duplicates"] = built.duplicates;
  for (auto p : all_partitions) {
    report["partitions"][std::string(to_string(p))] = {{"instances", built.dataset[p].size()},
                                                       {"images", built.dataset.image_ids(p).size()}};
  }
  if (built.dataset.empty()) {
    io.err << "error: the build produced no instances\n";
    io.out << report.dump(2) << '\n';
    return exit_validation;
  }
  save_dataset(built.dataset, s.str("out"));
  detail::write_text((std::filesystem::path(s.str("out")) / "build_report.json").string(), report.dump(2) + "\n");
  io.out << report.dump(2) << '\n';
  return exit_ok;
}

inline int run_audit(const Settings& s, Io& io) {
  const auto d = load_dataset(s.str("dataset"));
  const auto report = validate_partitions(d, s.number("balance-threshold"));
  for (const auto& o : report.overlaps) {
    for (const auto& img : o.images) {
      io.err << "overlap: image " << img << " appears in " << to_string(o.a) << " and " << to_string(o.b) << '\n';
    }
  }
  if (!report.balanced()) io.err << "warning: class balance spread exceeds the threshold\n";
  detail::emit(io, s, report.to_json().dump(2) + "\n");
  return report.passed() ? exit_ok : exit_validation;
}

inline int run_stats(const Settings& s, Io& io) {
  const auto fmt = s.str("format");
  if (fmt != "json" && fmt != "csv") throw ConfigError("--format must be json or csv");
  const auto stats = compute_stats(load_dataset(s.str("dataset")));
  for (const auto& w : stats.warnings) io.err << "warning: " << w << '\n';
  if (s.has("histogram")) detail::write_text(s.str("histogram"), stats.histogram_csv());
  detail::emit(io, s, fmt == "json" ? stats.to_json().dump(2) + "\n" : stats.histogram_csv());
  return exit_ok;
}

namespace detail {

/// Model inputs shared by train and eval: features, captions, vocabulary.
struct Inputs {
  Vocabulary vocab;
  std::optional<FeatureStore> features;
  std::optional<CaptionTable> captions;

  ModelData data() {
    return {&vocab, features ? &*features : nullptr, captions ? &*captions : nullptr};
  }
};

inline void attach_side_inputs(Inputs& in, Architecture arch, const Settings& s) {
  if (arch == Architecture::te) {
    if (!s.has("captions")) throw ConfigError("the te architecture needs --captions");
    in.captions = load_captions(s.str("captions"));
  }
  if (uses_images(arch)) {
    if (!s.has("features")) throw ConfigError(std::string(to_string(arch)) + " needs --features");
    in.features.emplace(s.str("features"), FeatureReadOptions{static_cast<std::size_t>(s.count("max-rois"))});
  }
}

}  // namespace detail

inline int run_train(const Settings& s, Io& io) {
  const auto arch = parse_architecture(s.str("arch"));
  if (!arch) throw ConfigError("unknown --arch '" + s.str("arch") + "'");
  const auto dataset = load_dataset(s.str("dataset"));
  const auto& train = dataset[Partition::train];
  const auto& val = dataset[Partition::val];
  if (train.empty()) {
    io.err << "error: the training partition is empty\n";
    return exit_validation;
  }
  const std::filesystem::path out_dir = s.str("out");
  std::filesystem::create_directories(out_dir);

  detail::Inputs inputs;
  detail::attach_side_inputs(inputs, *arch, s);
  inputs.vocab = dataset_vocabulary(dataset);
  if (inputs.captions) {
    for (const auto& [id, tokens] : *inputs.captions)
      for (const auto& t : tokens) inputs.vocab.add(t);
  }

  ModelDims dims;
  dims.vocab = inputs.vocab.size();
  dims.embed = s.count("embed-dim");
  dims.hidden = s.count("hidden");
  dims.classifier = s.count("classifier");
  dims.rn_hidden = s.count("rn-hidden");
  dims.fusion = s.count("fusion");
  if (inputs.features) {
    const auto& first = inputs.features->get(train.front().image_id);
    dims.feature = first.feature_dim();
    if (dims.feature == 0) throw FormatError("features of image " + first.image_id + " are empty");
  }

  std::optional<Tensor> embedding;
  if (s.has("embeddings")) {
    auto loaded = load_embeddings(s.str("embeddings"), inputs.vocab, dims.embed, s.count("seed"));
    io.err << "embeddings: " << loaded.found << " found, " << loaded.missing << " initialized randomly (coverage "
           << loaded.coverage << ")\n";
    embedding = std::move(loaded.table.matrix);
  } else {
    io.err << "warning: no --embeddings given; word vectors are random\n";
  }
  ModelParams params = init_params(*arch, dims, s.count("seed"), embedding ? &*embedding : nullptr);
  const auto train_embeddings = s.str("train-embeddings");
  if (train_embeddings != "true" && train_embeddings != "false") {
    throw ConfigError("--train-embeddings must be true or false");
  }
  params.set_embedding_trainable(train_embeddings == "true");

  TrainConfig cfg;
  cfg.lr = s.number("lr");
  cfg.weight_decay = s.number("weight-decay");
  cfg.batch_size = s.count("batch-size");
  cfg.eval_batch_size = s.count("eval-batch-size");
  cfg.max_epochs = s.count("epochs");
  cfg.plateau.patience = s.count("patience");
  cfg.plateau.factor = s.number("lr-factor");
  cfg.plateau.min_lr = s.number("min-lr");
  cfg.seed = s.count("seed");
  cfg.eval_threads = s.count("threads");
  cfg.checkpoint_dir = out_dir.string();

  {
    std::ofstream vocab_out(out_dir / "vocab.txt", std::ios::trunc);
    inputs.vocab.save(vocab_out);
  }
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::trunc);
  Trainer trainer(params, cfg);
  auto data = inputs.data();
  const auto result = trainer.fit(train, val, data, &log);

  const auto best = (out_dir / "best.vec").string();
  std::filesystem::copy_file(result.selected.path, best, std::filesystem::copy_options::overwrite_existing);
  json summary;
  summary["architecture"] = std::string(to_string(*arch));
  summary["epochs"] = result.epochs.size();
  summary["selected_epoch"] = result.selected.epoch;
  summary["selected_checkpoint"] = result.selected.path;
  summary["best_checkpoint"] = best;
  summary["val"] = result.selected.val.to_json();
  detail::write_text((out_dir / "summary.json").string(), summary.dump(2) + "\n");
  io.out << summary.dump(2) << '\n';
  return exit_ok;
}

inline int run_eval(const Settings& s, Io& io) {
  const auto params = load_checkpoint(s.str("checkpoint"));
  const auto part = parse_partition(s.str("partition"));
  if (!part) throw ConfigError("--partition must be train, val or test");
  const auto dataset = load_dataset(s.str("dataset"));

  detail::Inputs inputs;
  inputs.vocab = detail::load_vocab_file(s.str_or("vocab", detail::default_vocab_for(s.str("checkpoint"))));
  if (inputs.vocab.size() != params.dims().vocab) {
    throw ConfigError("vocabulary has " + std::to_string(inputs.vocab.size()) + " tokens, checkpoint expects " +
                      std::to_string(params.dims().vocab));
  }
  detail::attach_side_inputs(inputs, params.arch(), s);
  std::vector<std::string> notes;
  auto data = inputs.data();
  const auto metrics =
      evaluate(params, dataset[*part], data, {s.count("batch-size"), s.count("threads"), &notes});
  for (const auto& n : notes) io.err << "skipped: " << n << '\n';
  json j = metrics.to_json();
  j["architecture"] = std::string(to_string(params.arch()));
  j["partition"] = std::string(to_string(*part));
  detail::emit(io, s, j.dump(2) + "\n");
  return exit_ok;
}

inline int run_visualize(const Settings& s, Io& io) {
  const auto params = load_checkpoint(s.str("checkpoint"));
  if (!is_eve(params.arch())) {
    throw ConfigError("visualize needs an eve-image or eve-roi checkpoint, got " +
                      std::string(to_string(params.arch())));
  }
  const auto vocab = detail::load_vocab_file(s.str_or("vocab", detail::default_vocab_for(s.str("checkpoint"))));
  const auto features = read_feature_file(s.str("features"), {static_cast<std::size_t>(s.count("max-rois"))});
  const auto e = export_attention(params, features, s.str("hypothesis"), vocab);
  for (const auto& path : write_attention(e, s.str("out"))) io.out << path << '\n';
  return exit_ok;
}

// ---- command table -----------------------------------------------------------

inline std::vector<Command> commands() {
  const OptionSpec config{"config", "", "key = value file supplying any option"};
  const OptionSpec threads{"threads", "1", "evaluation worker threads"};
  const OptionSpec max_rois{"max-rois", std::to_string(default_max_rois), "maximum ROIs accepted per feature file"};
  return {
      {"build-dataset",
       "Build partition JSONL files from SNLI records and an image split",
       {config,
        {"snli", "", "SNLI JSONL file(s), comma separated", true},
        {"split", "", "JSON image split {train, val, test}", true},
        {"out", "", "output directory", true},
        {"on-error", "abort", "malformed SNLI lines: abort or skip"},
        {"missing-image", "drop", "records whose image is not in the split: drop or abort"}},
       run_build_dataset},
      {"audit",
       "Check partition disjointness and class balance",
       {config,
        {"dataset", "", "dataset directory", true},
        {"balance-threshold", "0.05", "allowed max/min class count spread"},
        {"out", "", "write the report here instead of stdout"}},
       run_audit},
      {"stats",
       "Hypothesis length and vocabulary statistics",
       {config,
        {"dataset", "", "dataset directory", true},
        {"format", "json", "json or csv (length histogram)"},
        {"histogram", "", "also write the length histogram CSV here"},
        {"out", "", "write the result here instead of stdout"}},
       run_stats},
      {"train",
       "Train a model and keep the max-min per-class checkpoint",
       {config,
        {"dataset", "", "dataset directory", true},
        {"arch", "", "hypothesis-only, te, rn, top-down, bottom-up, eve-image or eve-roi", true},
        {"out", "", "output directory for checkpoints and logs", true},
        {"features", "", "directory of <image_id>.vef files"},
        {"captions", "", "JSON image id -> caption (te only)"},
        {"embeddings", "", "text embeddings, one '<token> <values...>' line per word"},
        {"train-embeddings", "false", "update the word embeddings (true/false)"},
        {"seed", "0", "random seed (VEKIT_SEED overrides the config file)"},
        {"lr", "1e-4", "initial learning rate"},
        {"weight-decay", "1e-4", "decoupled weight decay"},
        {"batch-size", std::to_string(default_train_batch_size), "training batch size"},
        {"eval-batch-size", std::to_string(default_eval_batch_size), "validation batch size"},
        {"epochs", "100", "maximum epochs"},
        {"patience", "3", "epochs without improvement before the rate drops"},
        {"lr-factor", "0.5", "rate multiplier on a plateau"},
        {"min-lr", "1e-6", "rate floor"},
        {"embed-dim", "300", "word embedding width"},
        {"hidden", "300", "text feature width"},
        {"classifier", "300", "classifier hidden width"},
        {"rn-hidden", "256", "relational network width"},
        {"fusion", "300", "top-down fusion width"},
        threads,
        max_rois},
       run_train},
      {"eval",
       "Evaluate a checkpoint on one partition",
       {config,
        {"checkpoint", "", "VEC1 checkpoint", true},
        {"dataset", "", "dataset directory", true},
        {"partition", "test", "train, val or test"},
        {"vocab", "", "vocabulary file (default: vocab.txt next to the checkpoint)"},
        {"features", "", "directory of <image_id>.vef files"},
        {"captions", "", "JSON image id -> caption (te only)"},
        {"batch-size", std::to_string(default_eval_batch_size), "evaluation batch size"},
        threads,
        max_rois,
        {"out", "", "write metrics here instead of stdout"}},
       run_eval},
      {"visualize",
       "Export the text-image attention of an EVE checkpoint",
       {config,
        {"checkpoint", "", "VEC1 checkpoint (eve-image or eve-roi)", true},
        {"features", "", "VEF1 file of the image", true},
        {"hypothesis", "", "hypothesis sentence", true},
        {"out", "", "output prefix; writes <out>.json and, for grids, <out>.pgm", true},
        {"vocab", "", "vocabulary file (default: vocab.txt next to the checkpoint)"},
        max_rois},
       run_visualize},
  };
}

/// Parses argv, resolves settings and runs one subcommand.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Visual entailment toolkit", "ve-kit"};
  app.require_subcommand(1);
  auto table = commands();
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, std::map<std::string, CLI::Option*>> flag_options;
  std::map<std::string, CLI::App*> subs;
  for (const auto& cmd : table) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    subs[cmd.name] = sub;
    auto& values = flag_values[cmd.name];
    for (const auto& opt : cmd.options) {
      std::string help = opt.help;
      if (opt.required) help += " (required)";
      if (!opt.default_value.empty()) help += " [default: " + opt.default_value + "]";
      flag_options[cmd.name][opt.name] = sub->add_option("--" + opt.name, values[opt.name], help);
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      app.exit(e, out, err);
      return exit_ok;
    }
    err << "error: " << e.what() << "\n\n" << app.help();
    return exit_usage;
  }

  const Command* cmd = nullptr;
  for (const auto& c : table) {
    if (subs[c.name]->parsed()) cmd = &c;
  }
  if (!cmd) {
    err << app.help();
    return exit_usage;
  }

  Io io{out, err};
  try {
    Settings settings;
    std::map<std::string, const OptionSpec*> known;
    for (const auto& o : cmd->options) {
      known[o.name] = &o;
      if (!o.default_value.empty()) settings.set(o.name, o.default_value, "default");
    }
    auto* config_opt = flag_options[cmd->name]["config"];
    if (config_opt->count() > 0) {
      const auto& path = flag_values[cmd->name]["config"];
      for (auto& [key, value] : read_config_file(path)) {
        if (!known.count(key) || key == "config") throw ConfigError(path + ": unknown key '" + key + "'");
        settings.set(key, value, "config");
      }
    }
    if (known.count("seed")) {
      if (const char* env = std::getenv("VEKIT_SEED"); env && *env) settings.set("seed", env, "env VEKIT_SEED");
    }
    for (const auto& o : cmd->options) {
      if (flag_options[cmd->name][o.name]->count() > 0) settings.set(o.name, flag_values[cmd->name][o.name], "flag");
    }
    for (const auto& o : cmd->options) {
      if (o.required && !settings.has(o.name)) throw ConfigError("missing required option --" + o.name);
    }
    settings.echo(err, cmd->name);
    return cmd->run(settings, io);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n\n" << subs[cmd->name]->help();
    return exit_usage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_validation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_validation;
  }
}

}  // namespace vekit::cli
