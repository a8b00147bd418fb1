#include "sigma/index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "sigma/cluster.hpp"
#include "sigma/config.hpp"
#include "sigma/kernels.hpp"

namespace sigma {

namespace {
std::string prefix_key(const SemanticId& prefix) {
  std::string s;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (i) s += '-';
    s += std::to_string(prefix[i]);
  }
  return s;
}
}  // namespace

const PrefixIndex::Bucket* PrefixIndex::find(const SemanticId& prefix) const {
  const auto it = buckets_.find(prefix);
  return it == buckets_.end() ? nullptr : &it->second;
}

void PrefixIndex::build_cells(Bucket& b) {
  const std::int64_t n = b.ids.size();
  const std::int64_t ncells = n / cell_size_;
  if (ncells < 2) return;  // flat scan is fine for small buckets
  Rng rng(seed_ ^ fnv1a(b.ids.data(), b.ids.size() * sizeof(std::int64_t)));
  b.centroids = kmeans(b.unit, ncells, 6, rng);
  std::vector<std::int32_t> assign(n);
  nearest_codeword(assign.data(), nullptr, b.unit.d.data(), n,
                   b.centroids.d.data(), ncells, b.unit.cols);
  b.cells.assign(ncells, {});
  for (std::int64_t i = 0; i < n; ++i) b.cells[assign[i]].push_back(i);
}

PrefixIndex PrefixIndex::build(const std::vector<SemanticId>& sids,
                               const Mat& fused, std::int64_t ell,
                               std::int64_t cell_size, std::uint64_t seed) {
  if (ell < 1) throw std::invalid_argument("PrefixIndex: ell must be >= 1");
  if (static_cast<std::int64_t>(sids.size()) != fused.rows)
    throw std::invalid_argument("PrefixIndex: sids / embeddings mismatch");
  PrefixIndex idx;
  idx.ell_ = ell;
  idx.cell_size_ = cell_size;
  idx.seed_ = seed;
  idx.catalog_size_ = fused.rows;

  std::map<SemanticId, std::vector<std::int64_t>> members;
  for (std::size_t i = 0; i < sids.size(); ++i) {
    if (static_cast<std::int64_t>(sids[i].size()) < ell)
      throw std::invalid_argument("PrefixIndex: SID shorter than ell");
    members[{sids[i].begin(), sids[i].begin() + ell}].push_back(
        static_cast<std::int64_t>(i));
  }
  const std::int64_t d = fused.cols;
  for (auto& [prefix, ids] : members) {
    Bucket b;
    std::sort(ids.begin(), ids.end());
    b.ids = ids;
    const auto n = static_cast<std::int64_t>(ids.size());
    b.emb = Mat(n, d);
    b.unit = Mat(n, d);
    for (std::int64_t i = 0; i < n; ++i) {
      const double* src = fused.row(ids[i]);
      std::copy_n(src, d, b.emb.row(i));
      const double nm = norm2(src, d);
      if (nm == 0.0)
        throw std::invalid_argument("PrefixIndex: zero fused embedding for item " +
                                    std::to_string(ids[i]));
      for (std::int64_t j = 0; j < d; ++j) b.unit.at(i, j) = src[j] / nm;
    }
    idx.build_cells(b);
    idx.buckets_.emplace(prefix, std::move(b));
  }
  return idx;
}

std::vector<double> PrefixIndex::bucket_cosines(
    const Bucket& bucket, const std::vector<double>& h) const {
  const std::int64_t d = bucket.unit.cols;
  if (static_cast<std::int64_t>(h.size()) != d)
    throw std::invalid_argument("bucket_cosines: dimension mismatch");
  const double hn = norm2(h.data(), d);
  if (hn == 0.0) throw std::invalid_argument("bucket_cosines: zero query");
  std::vector<double> cosv(bucket.ids.size());
  dot_scan(cosv.data(), h.data(), bucket.unit.d.data(),
           static_cast<std::int64_t>(bucket.ids.size()), d);
  for (auto& c : cosv) c /= hn;
  return cosv;
}

std::vector<PrefixIndex::Hit> PrefixIndex::query(const SemanticId& prefix,
                                                 const std::vector<double>& h,
                                                 std::int64_t m, AnnMode mode,
                                                 QueryStatus* status) const {
  if (m < 1) throw std::invalid_argument("query: m must be >= 1");
  if (status) *status = {};
  const Bucket* b = find(prefix);
  if (!b || b->ids.empty()) {
    if (status) {
      status->unknown_prefix = (b == nullptr);
      status->empty_bucket = true;
    }
    return {};
  }
  const std::int64_t d = b->unit.cols;
  const double hn = norm2(h.data(), d);
  if (hn == 0.0) throw std::invalid_argument("query: zero query vector");
  std::vector<double> q(h);
  for (auto& x : q) x /= hn;

  std::vector<std::int32_t> candidates;
  if (mode == AnnMode::Approx && !b->cells.empty()) {
    const auto ncells = static_cast<std::int64_t>(b->cells.size());
    std::vector<double> cd(ncells);
    dot_scan(cd.data(), q.data(), b->centroids.d.data(), ncells, d);
    std::vector<std::int32_t> order(ncells);
    std::iota(order.begin(), order.end(), 0);
    const std::int64_t probe =
        std::min<std::int64_t>(ncells, std::max<std::int64_t>(4, (ncells * 3 + 9) / 10));
    std::partial_sort(order.begin(), order.begin() + probe, order.end(),
                      [&](std::int32_t a, std::int32_t c) {
                        if (cd[a] != cd[c]) return cd[a] > cd[c];
                        return a < c;
                      });
    for (std::int64_t p = 0; p < probe; ++p)
      candidates.insert(candidates.end(), b->cells[order[p]].begin(),
                        b->cells[order[p]].end());
  } else {
    candidates.resize(b->ids.size());
    std::iota(candidates.begin(), candidates.end(), 0);
  }

  std::vector<double> cosv(candidates.size());
#pragma omp parallel for schedule(static) if (candidates.size() > 512)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(candidates.size());
       ++i)
    cosv[i] = dot(q.data(), b->unit.row(candidates[i]), d);

  const auto take = std::min<std::int64_t>(m, candidates.size());
  std::vector<std::int32_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + take, order.end(),
                    [&](std::int32_t a, std::int32_t c) {
                      if (cosv[a] != cosv[c]) return cosv[a] > cosv[c];
                      return b->ids[candidates[a]] < b->ids[candidates[c]];
                    });
  std::vector<Hit> out;
  out.reserve(take);
  for (std::int64_t i = 0; i < take; ++i)
    out.push_back({b->ids[candidates[order[i]]], cosv[order[i]]});
  return out;
}

void PrefixIndex::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ostringstream mf;
  mf << "ell = " << ell_ << "\n";
  mf << "cell_size = " << cell_size_ << "\n";
  mf << "seed = " << seed_ << "\n";
  mf << "catalog_size = " << catalog_size_ << "\n";
  mf << "buckets = " << buckets_.size() << "\n";
  write_text(dir / "index_manifest.txt", mf.str());
  std::ostringstream names;
  for (const auto& [prefix, b] : buckets_) {
    const std::string key = prefix_key(prefix);
    names << key << '\n';
    std::ostringstream ids;
    for (const auto id : b.ids) ids << id << '\n';
    write_text(dir / ("bucket_" + key + ".ids.txt"), ids.str());
    write_tensor(dir / ("bucket_" + key + ".emb.sgt"), b.emb);
  }
  write_text(dir / "buckets.txt", names.str());
}

PrefixIndex PrefixIndex::load(const std::filesystem::path& dir) {
  const Config mf = Config::from_file(dir / "index_manifest.txt");
  PrefixIndex idx;
  idx.ell_ = mf.get_int("ell", 1);
  idx.cell_size_ = mf.get_int("cell_size", 64);
  idx.seed_ = static_cast<std::uint64_t>(mf.get_int("seed", 17));
  idx.catalog_size_ = mf.get_int("catalog_size", 0);
  for (const auto& key : read_lines(dir / "buckets.txt")) {
    if (key.empty()) continue;
    SemanticId prefix;
    for (const auto& c : split(key, '-')) prefix.push_back(std::stoi(c));
    Bucket b;
    for (const auto& line : read_lines(dir / ("bucket_" + key + ".ids.txt")))
      if (!line.empty()) b.ids.push_back(std::stoll(line));
    b.emb = read_matrix(dir / ("bucket_" + key + ".emb.sgt"));
    const std::int64_t n = b.emb.rows, d = b.emb.cols;
    b.unit = Mat(n, d);
    for (std::int64_t i = 0; i < n; ++i) {
      const double nm = norm2(b.emb.row(i), d);
      for (std::int64_t j = 0; j < d; ++j)
        b.unit.at(i, j) = b.emb.at(i, j) / nm;
    }
    idx.build_cells(b);
    idx.buckets_.emplace(prefix, std::move(b));
  }
  return idx;
}

void U2iIndex::put(std::int64_t user,
                   std::vector<std::pair<std::int64_t, double>> ranked,
                   std::int64_t ts) {
  auto entry = std::make_shared<Entry>();
  entry->ts = ts;
  entry->ranked = std::move(ranked);
  std::unique_lock lock(mu_);
  auto& slot = map_[user];
  if (!slot || slot->ts <= ts) slot = std::move(entry);
}

std::shared_ptr<const U2iIndex::Entry> U2iIndex::get(std::int64_t user) const {
  std::shared_lock lock(mu_);
  const auto it = map_.find(user);
  return it == map_.end() ? nullptr : it->second;
}

std::size_t U2iIndex::size() const {
  std::shared_lock lock(mu_);
  return map_.size();
}

std::string U2iIndex::export_tsv() const {
  std::shared_lock lock(mu_);
  std::ostringstream os;
  for (const auto& [user, entry] : map_) {
    std::int64_t rank = 1;
    for (const auto& [item, prob] : entry->ranked)
      os << user << '\t' << item << '\t' << rank++ << '\t' << fmt_double(prob)
         << '\n';
  }
  return os.str();
}

}  // namespace sigma
