#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>
#include <vector>

#include "sigma/rqvae.hpp"
#include "sigma/tensor.hpp"

namespace sigma {

enum class AnnMode { Exact, Approx };

// Per-prefix item buckets over fused embeddings. Exact queries scan
// pre-normalized rows; approximate queries route through per-bucket k-means
// cells and probe the closest ones.
class PrefixIndex {
 public:
  struct Bucket {
    std::vector<std::int64_t> ids;  // ascending
    Mat emb;       // raw fused embeddings, row-parallel to ids
    Mat unit;      // unit-normalized copies
    Mat centroids;  // cell centroids (empty when the bucket is scanned flat)
    std::vector<std::vector<std::int32_t>> cells;
  };

  struct Hit {
    std::int64_t id;
    double cosine;
  };
  struct QueryStatus {
    bool unknown_prefix = false;
    bool empty_bucket = false;
  };

  std::int64_t ell() const { return ell_; }
  const std::map<SemanticId, Bucket>& buckets() const { return buckets_; }
  const Bucket* find(const SemanticId& prefix) const;
  std::int64_t catalog_size() const { return catalog_size_; }

  static PrefixIndex build(const std::vector<SemanticId>& sids,
                           const Mat& fused, std::int64_t ell,
                           std::int64_t cell_size = 64,
                           std::uint64_t seed = 17);

  // Top-M by cosine, sorted descending, ties by ascending item id. Unknown
  // prefixes yield an empty result with a distinct status.
  std::vector<Hit> query(const SemanticId& prefix, const std::vector<double>& h,
                         std::int64_t m, AnnMode mode,
                         QueryStatus* status = nullptr) const;
  // Cosines against every bucket member, in bucket order (for fusion).
  std::vector<double> bucket_cosines(const Bucket& bucket,
                                     const std::vector<double>& h) const;

  void save(const std::filesystem::path& dir) const;
  static PrefixIndex load(const std::filesystem::path& dir);

 private:
  std::int64_t ell_ = 0;
  std::int64_t cell_size_ = 64;
  std::uint64_t seed_ = 17;
  std::int64_t catalog_size_ = 0;
  std::map<SemanticId, Bucket> buckets_;

  void build_cells(Bucket& b);
};

// User -> ranked items snapshot store. One writer, many readers; readers
// always observe a complete snapshot.
class U2iIndex {
 public:
  struct Entry {
    std::int64_t ts = 0;
    std::vector<std::pair<std::int64_t, double>> ranked;
  };

  // Last writer by timestamp wins.
  void put(std::int64_t user,
           std::vector<std::pair<std::int64_t, double>> ranked,
           std::int64_t ts);
  std::shared_ptr<const Entry> get(std::int64_t user) const;
  std::string export_tsv() const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mu_;
  std::map<std::int64_t, std::shared_ptr<const Entry>> map_;
};

}  // namespace sigma
