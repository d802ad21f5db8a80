#pragma once

// Precomputed image features: the VEF1 file format, grid-map to object
// conversion, the region projection layer, and a per-image feature store.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vekit/binary_io.hpp"
#include "vekit/numcore.hpp"

namespace vekit {

enum class FeatureKind : std::uint8_t { grid = 0, roi = 1 };

inline const char* to_string(FeatureKind k) { return k == FeatureKind::grid ? "grid" : "roi"; }

/// Pixel-space bounding box of one ROI.
struct Box {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  bool operator==(const Box&) const = default;
};

struct FeatureSet {
  std::string image_id;
  FeatureKind kind = FeatureKind::grid;
  Tensor objects;  // M x feature_dim; rank 0 (empty) when an ROI file has no regions
  std::size_t grid_k = 0;
  std::size_t grid_d = 0;
  std::vector<Box> boxes;  // one per object for roi, empty for grid

  std::size_t count() const { return objects.rank() == 2 ? objects.rows() : 0; }
  std::size_t feature_dim() const { return objects.rank() == 2 ? objects.cols() : 0; }
};

inline constexpr std::size_t default_max_rois = 10;

struct FeatureReadOptions {
  std::size_t max_rois = default_max_rois;
};

inline constexpr std::string_view vef_magic_prefix = "VEF";
inline constexpr char vef_version = '1';

/// Serializes to VEF1: magic, u8 kind, u16-prefixed image id, u32 M,
/// u32 feature dim, grid geometry (u32 k, u32 d) or M float32 boxes, then the
/// M x dim float32 payload in row-major order. All integers little-endian.
inline binary::Writer encode_feature_set(const FeatureSet& fs) {
  const std::size_t m = fs.count();
  const std::size_t dim = fs.feature_dim();
  if (fs.image_id.empty()) throw ContractError("feature set has an empty image id");
  if (fs.kind == FeatureKind::grid) {
    if (m == 0 || m != fs.grid_d * fs.grid_d || dim != fs.grid_k) {
      throw DimensionError("grid feature set " + fs.image_id + " has " + std::to_string(m) + " x " +
                           std::to_string(dim) + " objects for k=" + std::to_string(fs.grid_k) +
                           ", d=" + std::to_string(fs.grid_d));
    }
  } else if (fs.boxes.size() != m) {
    throw DimensionError("roi feature set " + fs.image_id + " has " + std::to_string(fs.boxes.size()) +
                         " boxes for " + std::to_string(m) + " objects");
  }

  binary::Writer w;
  w.bytes("VEF1");
  w.u8(static_cast<std::uint8_t>(fs.kind));
  w.str16(fs.image_id);
  w.u32(static_cast<std::uint32_t>(m));
  w.u32(static_cast<std::uint32_t>(dim));
  if (fs.kind == FeatureKind::grid) {
    w.u32(static_cast<std::uint32_t>(fs.grid_k));
    w.u32(static_cast<std::uint32_t>(fs.grid_d));
  } else {
    for (const auto& b : fs.boxes) {
      w.f32(b.x1);
      w.f32(b.y1);
      w.f32(b.x2);
      w.f32(b.y2);
    }
  }
  for (std::size_t i = 0; i < m * dim; ++i) w.f32(static_cast<float>(fs.objects.data[i]));
  return w;
}

inline void write_feature_file(const std::string& path, const FeatureSet& fs) { encode_feature_set(fs).save(path); }

inline FeatureSet decode_feature_set(binary::Reader r, const FeatureReadOptions& opts = {}) {
  const auto magic = r.bytes(4, "magic");
  if (magic.compare(0, 3, vef_magic_prefix) != 0) throw FormatError("not a VEF file (magic '" + magic + "')");
  if (magic[3] != vef_version) throw FormatError(std::string("unsupported VEF version '") + magic[3] + "'");

  FeatureSet fs;
  const auto kind = r.u8("kind");
  if (kind > 1) throw FormatError("unknown feature kind " + std::to_string(kind));
  fs.kind = static_cast<FeatureKind>(kind);
  fs.image_id = r.str16("image id");
  if (fs.image_id.empty()) throw FormatError("empty image id");
  const std::size_t m = r.u32("object count");
  const std::size_t dim = r.u32("feature dimension");
  if (dim == 0 && (kind == 0 || m > 0)) throw FormatError("feature dimension is zero");

  if (fs.kind == FeatureKind::grid) {
    fs.grid_k = r.u32("grid k");
    fs.grid_d = r.u32("grid d");
    if (fs.grid_d == 0 || m != fs.grid_d * fs.grid_d || dim != fs.grid_k) {
      throw FormatError("grid header inconsistent: M=" + std::to_string(m) + ", dim=" + std::to_string(dim) +
                        ", k=" + std::to_string(fs.grid_k) + ", d=" + std::to_string(fs.grid_d));
    }
  } else {
    if (m > opts.max_rois) {
      throw FormatError("ROI count " + std::to_string(m) + " exceeds the configured maximum " +
                        std::to_string(opts.max_rois));
    }
    fs.boxes.reserve(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto at = r.offset();
      Box b{r.f32("box"), r.f32("box"), r.f32("box"), r.f32("box")};
      const bool finite = std::isfinite(b.x1) && std::isfinite(b.y1) && std::isfinite(b.x2) && std::isfinite(b.y2);
      if (!finite || b.x1 < 0 || b.y1 < 0 || b.x2 < b.x1 || b.y2 < b.y1) {
        throw CorruptionError(at, "invalid box for ROI " + std::to_string(i));
      }
      fs.boxes.push_back(b);
    }
  }

  if (r.remaining() < m * dim * 4) {
    throw CorruptionError(r.offset(), "truncated payload: need " + std::to_string(m * dim * 4) + " bytes, have " +
                                          std::to_string(r.remaining()));
  }
  if (m > 0) {
    std::vector<real> values(m * dim);
    for (auto& v : values) {
      const auto at = r.offset();
      const float f = r.f32("payload");
      if (!std::isfinite(f)) throw CorruptionError(at, "non-finite feature value");
      v = static_cast<real>(f);
    }
    fs.objects = Tensor({m, dim}, std::move(values));
  }
  if (r.remaining() != 0) {
    throw CorruptionError(r.offset(), std::to_string(r.remaining()) + " trailing bytes after payload");
  }
  return fs;
}

inline FeatureSet read_feature_file(const std::string& path, const FeatureReadOptions& opts = {}) {
  return decode_feature_set(binary::Reader::from_file(path), opts);
}

/// k x d x d feature maps -> (d*d) x k objects; object i*d + j is the
/// vector maps[:, i, j].
inline Tensor grid_to_objects(const Tensor& maps) {
  if (maps.rank() != 3 || maps.shape[1] != maps.shape[2]) {
    throw DimensionError("grid_to_objects: expected k x d x d maps, got " + shape_str(maps.shape));
  }
  const std::size_t k = maps.shape[0], d = maps.shape[1];
  Tensor out = Tensor::zeros({d * d, k});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out(i * d + j, c) = maps.data[(c * d + i) * d + j];
  return out;
}

/// Inverse of grid_to_objects.
inline Tensor objects_to_grid(const Tensor& objects, std::size_t d) {
  if (objects.rank() != 2 || objects.rows() != d * d) {
    throw DimensionError("objects_to_grid: " + shape_str(objects.shape) + " is not a " + std::to_string(d) + "x" +
                         std::to_string(d) + " grid");
  }
  const std::size_t k = objects.cols();
  Tensor maps = Tensor::zeros({k, d, d});
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) maps.data[(c * d + i) * d + j] = objects(i * d + j, c);
  return maps;
}

struct RegionProjection {
  Var w;  // k x d_k
  Var b;  // 1 x d_k
};

/// relu(objects * w + b) applied per object row.
inline Var project_regions(Var objects, const RegionProjection& p) {
  if (objects.cols() != p.w.rows()) {
    throw DimensionError("project_regions: objects " + shape_str(objects.shape()) + " do not match weights " +
                         shape_str(p.w.shape()));
  }
  return relu(add_bias(matmul(objects, p.w), p.b));
}

/// Features keyed by image id: explicitly added sets, or files named
/// "<image_id>.vef" under a directory, loaded on first use. Lookups mutate
/// the cache, so call preload() before sharing a store across threads.
class FeatureStore {
 public:
  FeatureStore() = default;
  explicit FeatureStore(std::filesystem::path dir, FeatureReadOptions opts = {})
      : dir_(std::move(dir)), opts_(opts) {}

  static std::filesystem::path file_for(const std::filesystem::path& dir, const std::string& image_id) {
    return dir / (image_id + ".vef");
  }

  void add(FeatureSet fs) {
    auto id = fs.image_id;
    cache_.insert_or_assign(std::move(id), std::move(fs));
  }

  const FeatureSet& get(const std::string& image_id) {
    if (auto it = cache_.find(image_id); it != cache_.end()) return it->second;
    if (dir_.empty()) throw NotFoundError("no features for image " + image_id);
    const auto path = file_for(dir_, image_id);
    if (!std::filesystem::exists(path)) throw NotFoundError("missing feature file " + path.string());
    auto fs = read_feature_file(path.string(), opts_);
    if (fs.image_id != image_id) {
      throw FormatError("feature file " + path.string() + " holds image " + fs.image_id);
    }
    return cache_.emplace(image_id, std::move(fs)).first->second;
  }

  const FeatureSet& get(const std::string& image_id) const {
    auto it = cache_.find(image_id);
    if (it == cache_.end()) throw NotFoundError("features for image " + image_id + " are not loaded");
    return it->second;
  }

  template <typename Ids>
  void preload(const Ids& ids) {
    for (const auto& id : ids) get(id);
  }

  bool empty() const { return dir_.empty() && cache_.empty(); }

 private:
  std::filesystem::path dir_;
  FeatureReadOptions opts_;
  std::map<std::string, FeatureSet> cache_;
};

}  // namespace vekit
