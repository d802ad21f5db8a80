#pragma once

// Hypothesis text pipeline: tokenization, vocabulary, pretrained embeddings,
// and the MLP -> self-attention -> GRU encoder producing one text feature.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vekit/attention.hpp"
#include "vekit/numcore.hpp"
#include "vekit/random.hpp"

namespace vekit {

inline bool is_stripped_punctuation(char c) {
  switch (c) {
    case '`':
    case '\'':
    case '"':
    case ',':
    case '.':
    case '-':
    case '?':
    case '!':
      return true;
    default:
      return false;
  }
}

/// Whitespace split, ASCII lowercase, then removal of quote marks and
/// , . - ? ! anywhere inside a word. Words left empty are dropped.
inline std::vector<std::string> tokenize(std::string_view sentence) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (char c : sentence) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
      continue;
    }
    if (is_stripped_punctuation(c)) continue;
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    word.push_back(c);
  }
  flush();
  return tokens;
}

inline std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

class Vocabulary {
 public:
  static constexpr std::int32_t pad = 0;
  static constexpr std::int32_t unk = 1;
  static constexpr std::string_view pad_token = "<pad>";
  static constexpr std::string_view unk_token = "<unk>";

  Vocabulary() {
    add(std::string(pad_token));
    add(std::string(unk_token));
  }

  /// Index of the token, inserting it at the end if new.
  std::int32_t add(const std::string& token) {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    const auto id = static_cast<std::int32_t>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
  }

  std::optional<std::int32_t> find(const std::string& token) const {
    if (auto it = index_.find(token); it != index_.end()) return it->second;
    return std::nullopt;
  }

  std::int32_t index(const std::string& token) const { return find(token).value_or(unk); }

  const std::string& token(std::int32_t id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw ContractError("vocabulary index " + std::to_string(id) + " out of range");
    }
    return tokens_[id];
  }

  std::size_t size() const { return tokens_.size(); }

  std::vector<std::int32_t> encode(const std::vector<std::string>& tokens) const {
    std::vector<std::int32_t> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(index(t));
    return ids;
  }

  void save(std::ostream& os) const {
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocabulary load(std::istream& is) {
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) lines.push_back(line);
    if (lines.size() < 2 || lines[0] != pad_token || lines[1] != unk_token) {
      throw ParseError(1, "vocabulary file must start with " + std::string(pad_token) + " and " +
                              std::string(unk_token));
    }
    Vocabulary v;
    for (std::size_t i = 2; i < lines.size(); ++i) {
      if (v.find(lines[i])) throw ParseError(i + 1, "duplicate vocabulary entry '" + lines[i] + "'");
      v.add(lines[i]);
    }
    return v;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// One entry per distinct token in first-occurrence order, after PAD and UNK.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpus) {
  Vocabulary v;
  for (const auto& sentence : corpus)
    for (const auto& t : sentence) v.add(t);
  return v;
}

struct EmbeddingTable {
  Tensor matrix;  // |V| x dim, row 0 (PAD) all zeros
  bool trainable = false;

  std::size_t dim() const { return matrix.cols(); }
};

struct EmbeddingLoad {
  EmbeddingTable table;
  std::size_t found = 0;
  std::size_t missing = 0;
  /// found / (found + missing) over non-special tokens; 1 for an empty vocabulary.
  double coverage = 1.0;
};

/// Reads "token v1 ... v_dim" lines. Rows of in-vocabulary tokens are copied;
/// tokens absent from the file get U(-0.05, 0.05) rows drawn in index order
/// from `seed`; the PAD row is zero.
inline EmbeddingLoad load_embeddings(std::istream& in, const Vocabulary& vocab, std::size_t dim = 300,
                                     std::uint64_t seed = 0) {
  if (dim == 0) throw ConfigError("embedding dimension must be positive");
  const std::size_t v = vocab.size();
  Tensor matrix = Tensor::zeros({v, dim});
  std::vector<bool> have(v, false);

  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string_view> fields;
  while (std::getline(in, line)) {
    ++lineno;
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ' || line.back() == '\t')) line.pop_back();
    if (line.empty()) continue;
    fields.clear();
    std::string_view rest(line);
    while (!rest.empty()) {
      const auto sp = rest.find(' ');
      fields.push_back(rest.substr(0, sp));
      if (sp == std::string_view::npos) break;
      rest.remove_prefix(sp + 1);
    }
    if (lineno == 1 && fields.size() >= 2 && fields.size() != dim + 1) {
      throw ConfigError("embedding file has dimension " + std::to_string(fields.size() - 1) + ", expected " +
                        std::to_string(dim));
    }
    if (fields.size() != dim + 1) {
      throw ParseError(lineno, "expected " + std::to_string(dim + 1) + " fields, found " +
                                   std::to_string(fields.size()));
    }
    const auto id = vocab.find(std::string(fields[0]));
    if (!id || *id == Vocabulary::pad || have[*id]) continue;
    for (std::size_t j = 0; j < dim; ++j) {
      double value = 0;
      const auto f = fields[j + 1];
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), value);
      if (ec != std::errc() || ptr != f.data() + f.size()) {
        throw ParseError(lineno, "malformed number '" + std::string(f) + "'");
      }
      matrix(*id, j) = static_cast<real>(value);
    }
    have[*id] = true;
  }

  EmbeddingLoad result;
  Rng rng(seed);
  for (std::size_t i = 0; i < v; ++i) {
    if (i == static_cast<std::size_t>(Vocabulary::pad)) continue;
    const bool special = i == static_cast<std::size_t>(Vocabulary::unk);
    if (have[i]) {
      if (!special) ++result.found;
      continue;
    }
    if (!special) ++result.missing;
    for (std::size_t j = 0; j < dim; ++j) matrix(i, j) = static_cast<real>(rng.uniform(-0.05, 0.05));
  }
  const auto counted = result.found + result.missing;
  result.coverage = counted ? static_cast<double>(result.found) / static_cast<double>(counted) : 1.0;
  result.table.matrix = std::move(matrix);
  return result;
}

inline EmbeddingLoad load_embeddings(const std::string& path, const Vocabulary& vocab, std::size_t dim = 300,
                                     std::uint64_t seed = 0) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open embedding file " + path);
  return load_embeddings(in, vocab, dim, seed);
}

/// GRU weights bound into a graph. Row-vector convention: x is 1 x input,
/// w_* are input x hidden, u_* are hidden x hidden, b_* are 1 x hidden.
struct GruParams {
  Var w_z, u_z, b_z;
  Var w_r, u_r, b_r;
  Var w_h, u_h, b_h;

  static std::vector<std::pair<std::string, Shape>> schema(std::size_t input, std::size_t hidden) {
    return {{"w_z", {input, hidden}}, {"u_z", {hidden, hidden}}, {"b_z", {1, hidden}},
            {"w_r", {input, hidden}}, {"u_r", {hidden, hidden}}, {"b_r", {1, hidden}},
            {"w_h", {input, hidden}}, {"u_h", {hidden, hidden}}, {"b_h", {1, hidden}}};
  }
};

/// z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
/// h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~.
inline Var gru_step(Var x, Var h_prev, const GruParams& p) {
  if (x.rows() != 1 || h_prev.rows() != 1 || x.cols() != p.w_z.rows() || h_prev.cols() != p.u_z.rows()) {
    throw DimensionError("gru_step: input " + shape_str(x.shape()) + " and state " + shape_str(h_prev.shape()) +
                         " do not match weights " + shape_str(p.w_z.shape()));
  }
  auto gate = [&](Var w, Var u, Var b, Var h) { return add_bias(add(matmul(x, w), matmul(h, u)), b); };
  Var z = sigmoid(gate(p.w_z, p.u_z, p.b_z, h_prev));
  Var r = sigmoid(gate(p.w_r, p.u_r, p.b_r, h_prev));
  Var candidate = tanh(gate(p.w_h, p.u_h, p.b_h, mul(r, h_prev)));
  return add(mul(one_minus(z), h_prev), mul(z, candidate));
}

/// Text branch weights bound into a graph.
struct TextEncoderParams {
  Var embedding;  // |V| x E, usually a frozen constant
  Var mlp_w;      // E x H
  Var mlp_b;      // 1 x H
  GruParams gru;  // H -> H

  static std::vector<std::pair<std::string, Shape>> schema(std::size_t embed, std::size_t hidden) {
    std::vector<std::pair<std::string, Shape>> out{{"mlp_w", {embed, hidden}}, {"mlp_b", {1, hidden}}};
    for (auto& [name, shape] : GruParams::schema(hidden, hidden)) out.emplace_back("gru." + name, shape);
    return out;
  }
};

/// embed -> MLP (ReLU) -> self-attention -> left-to-right GRU; returns the
/// final hidden state (1 x H). PAD ids are excluded from attention and
/// skipped by the GRU, so trailing padding never changes the result. An
/// empty or all-PAD sequence is encoded as a single UNK token.
inline Var encode_hypothesis(std::span<const std::int32_t> tokens, const TextEncoderParams& p) {
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  if (std::all_of(ids.begin(), ids.end(), [](std::int32_t t) { return t == Vocabulary::pad; })) {
    ids.assign(1, Vocabulary::unk);
  }
  std::vector<bool> mask(ids.size());
  for (std::size_t t = 0; t < ids.size(); ++t) mask[t] = ids[t] != Vocabulary::pad;

  Var embedded = gather_rows(p.embedding, ids);
  Var projected = relu(add_bias(matmul(embedded, p.mlp_w), p.mlp_b));
  Var attended = self_attend(projected, mask);

  Graph& g = attended.graph();
  Var h = g.constant(Tensor::zeros({1, p.mlp_w.cols()}));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    if (!mask[t]) continue;
    h = gru_step(slice_row(attended, t), h, p.gru);
  }
  return h;
}

}  // namespace vekit
