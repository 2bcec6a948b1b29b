#include "puma/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "puma/errors.hpp"
#include "puma/rng.hpp"

namespace puma {

void Dataset::validate() const {
  const std::size_t n = labels.size();
  if (ids.size() != n || features.size() != n * num_features) {
    throw InvalidArgument("dataset '" + name + "': inconsistent column sizes");
  }
  if (!clusters.empty() && clusters.size() != n) {
    throw InvalidArgument("dataset '" + name + "': cluster column has wrong length");
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
      throw InvalidArgument("dataset '" + name + "': label out of range at row " +
                            std::to_string(i));
    }
  }
  for (double v : features) {
    if (!std::isfinite(v)) throw InvalidArgument("dataset '" + name + "': non-finite feature");
  }
  std::vector<SampleId> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw InvalidArgument("dataset '" + name + "': duplicate sample ids");
  }
}

std::unordered_map<SampleId, std::size_t> Dataset::index() const {
  std::unordered_map<SampleId, std::size_t> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) out.emplace(ids[i], i);
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.name = name;
  out.num_features = num_features;
  out.num_classes = num_classes;
  out.features.reserve(rows.size() * num_features);
  out.labels.reserve(rows.size());
  out.ids.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto x = row(r);
    out.features.insert(out.features.end(), x.begin(), x.end());
    out.labels.push_back(labels[r]);
    out.ids.push_back(ids[r]);
    if (!clusters.empty()) out.clusters.push_back(clusters[r]);
  }
  return out;
}

Dataset Dataset::select_ids(std::span<const SampleId> keep) const {
  const auto idx = index();
  std::vector<std::size_t> rows;
  rows.reserve(keep.size());
  for (SampleId id : keep) {
    auto it = idx.find(id);
    if (it == idx.end()) throw InvalidArgument("unknown sample id " + std::to_string(id));
    rows.push_back(it->second);
  }
  std::sort(rows.begin(), rows.end());
  return subset(rows);
}

Dataset Dataset::without_ids(std::span<const SampleId> drop) const {
  const std::set<SampleId> dropped(drop.begin(), drop.end());
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i) {
    if (!dropped.contains(ids[i])) rows.push_back(i);
  }
  return subset(rows);
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (int y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Shape parse_shape(std::string_view name) {
  if (name == "radial") return Shape::radial;
  if (name == "rectangular") return Shape::rectangular;
  if (name == "two_moons") return Shape::two_moons;
  if (name == "spiral") return Shape::spiral;
  throw InvalidArgument("unknown dataset shape '" + std::string(name) + "'");
}

std::string_view to_string(Shape shape) {
  switch (shape) {
    case Shape::radial: return "radial";
    case Shape::rectangular: return "rectangular";
    case Shape::two_moons: return "two_moons";
    case Shape::spiral: return "spiral";
  }
  return "unknown";
}

namespace {

struct ClusterCentre {
  double x;
  double y;
  int label;
};

// Splits n as evenly as possible across `parts` clusters.
std::size_t share(std::size_t n, std::size_t parts, std::size_t k) {
  return n / parts + (k < n % parts ? 1 : 0);
}

Dataset gaussian_clusters(std::string name, const std::vector<ClusterCentre>& centres,
                          std::size_t num_classes, std::size_t n, double noise, CounterRng& rng) {
  Dataset d;
  d.name = std::move(name);
  d.num_features = 2;
  d.num_classes = num_classes;
  for (std::size_t k = 0; k < centres.size(); ++k) {
    const std::size_t count = share(n, centres.size(), k);
    for (std::size_t i = 0; i < count; ++i) {
      d.features.push_back(centres[k].x + noise * rng.normal());
      d.features.push_back(centres[k].y + noise * rng.normal());
      d.labels.push_back(centres[k].label);
      d.clusters.push_back(static_cast<int>(k));
    }
  }
  return d;
}

double linspace(std::size_t i, std::size_t count, double lo, double hi) {
  if (count <= 1) return lo;
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
}

}  // namespace

Dataset generate(Shape shape, std::size_t n, double noise, std::uint64_t seed) {
  if (noise < 0.0 || !std::isfinite(noise)) throw InvalidArgument("noise must be >= 0");
  CounterRng rng(seed, 0x6a6e);
  Dataset d;
  switch (shape) {
    case Shape::radial: {
      if (n < 2) throw InvalidArgument("radial needs n >= 2");
      std::vector<ClusterCentre> centres;
      for (int k = 0; k < 6; ++k) {
        const double a = 2.0 * std::numbers::pi * k / 6.0;
        centres.push_back({std::cos(a), std::sin(a), k % 2});
      }
      d = gaussian_clusters("radial", centres, 2, n, noise, rng);
      break;
    }
    case Shape::rectangular: {
      if (n < 3) throw InvalidArgument("rectangular needs n >= 3");
      std::vector<ClusterCentre> centres;
      for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) {
          centres.push_back({static_cast<double>(c), static_cast<double>(r), (r + c) % 3});
        }
      }
      d = gaussian_clusters("rectangular", centres, 3, n, noise, rng);
      break;
    }
    case Shape::two_moons: {
      if (n < 2) throw InvalidArgument("two_moons needs n >= 2");
      d.name = "two_moons";
      d.num_features = 2;
      d.num_classes = 2;
      const std::size_t outer = n / 2;
      const std::size_t inner = n - outer;
      for (std::size_t i = 0; i < outer; ++i) {
        const double t = linspace(i, outer, 0.0, std::numbers::pi);
        d.features.push_back(std::cos(t) + noise * rng.normal());
        d.features.push_back(std::sin(t) + noise * rng.normal());
        d.labels.push_back(0);
        d.clusters.push_back(0);
      }
      for (std::size_t i = 0; i < inner; ++i) {
        const double t = linspace(i, inner, 0.0, std::numbers::pi);
        d.features.push_back(1.0 - std::cos(t) + noise * rng.normal());
        d.features.push_back(0.5 - std::sin(t) + noise * rng.normal());
        d.labels.push_back(1);
        d.clusters.push_back(1);
      }
      break;
    }
    case Shape::spiral: {
      if (n < 2) throw InvalidArgument("spiral needs n >= 2");
      d.name = "spiral";
      d.num_features = 2;
      d.num_classes = 2;
      for (int c = 0; c < 2; ++c) {
        const std::size_t count = share(n, 2, static_cast<std::size_t>(c));
        for (std::size_t i = 0; i < count; ++i) {
          const double t = linspace(i, count, 0.25, 1.0);
          const double a = 3.0 * std::numbers::pi * t + std::numbers::pi * c;
          d.features.push_back(t * std::cos(a) + noise * rng.normal());
          d.features.push_back(t * std::sin(a) + noise * rng.normal());
          d.labels.push_back(c);
          d.clusters.push_back(c);
        }
      }
      break;
    }
  }
  d.ids.resize(d.labels.size());
  std::iota(d.ids.begin(), d.ids.end(), SampleId{0});
  return d;
}

// ---------------------------------------------------------------------------
// CSV

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string_view rest(line);
  while (true) {
    const auto pos = rest.find(',');
    cells.push_back(trim(rest.substr(0, pos)));
    if (pos == std::string_view::npos) break;
    rest.remove_prefix(pos + 1);
  }
  return cells;
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc{} && ptr == last && std::isfinite(out);
}

bool parse_int(const std::string& text, long long& out) {
  if (text.empty()) return false;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  return ec == std::errc{} && ptr == text.data() + text.size();
}

}  // namespace

CsvData load_csv(const std::filesystem::path& path, std::string_view label_column,
                 bool standardize) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  const auto header = split_line(line);
  const auto label_it = std::find(header.begin(), header.end(), label_column);
  if (label_it == header.end()) {
    throw ParseError(path.string() + ": no label column '" + std::string(label_column) + "'");
  }
  const std::size_t label_col = static_cast<std::size_t>(label_it - header.begin());
  const std::size_t d = header.size() - 1;

  std::vector<double> features;
  std::vector<std::string> raw_labels;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    if (cells.size() != header.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(row) + " has " +
                       std::to_string(cells.size()) + " cells, expected " +
                       std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c == label_col) continue;
      double v = 0.0;
      if (!parse_double(cells[c], v)) {
        throw ParseError(path.string() + ": non-numeric value '" + cells[c] + "' at row " +
                         std::to_string(row) + ", column '" + header[c] + "'");
      }
      features.push_back(v);
    }
    if (cells[label_col].empty()) {
      throw ParseError(path.string() + ": missing label at row " + std::to_string(row));
    }
    raw_labels.push_back(cells[label_col]);
  }
  if (raw_labels.empty()) throw ParseError(path.string() + ": no data rows");

  // Class numbering.
  std::set<std::string> distinct(raw_labels.begin(), raw_labels.end());
  std::vector<std::string> ordered(distinct.begin(), distinct.end());
  bool all_int = true;
  std::vector<long long> ints;
  for (const auto& s : ordered) {
    long long v = 0;
    if (!parse_int(s, v)) {
      all_int = false;
      break;
    }
    ints.push_back(v);
  }
  std::map<std::string, int> class_of;
  std::vector<std::string> label_values;
  if (all_int) {
    std::vector<std::size_t> order(ordered.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ints[a] < ints[b]; });
    for (std::size_t i = 0; i < order.size(); ++i) {
      class_of[ordered[order[i]]] = static_cast<int>(i);
      label_values.push_back(ordered[order[i]]);
    }
  } else {
    for (std::size_t i = 0; i < ordered.size(); ++i) {
      class_of[ordered[i]] = static_cast<int>(i);
      label_values.push_back(ordered[i]);
    }
  }
  if (label_values.size() < 2) throw ParseError(path.string() + ": fewer than two classes");

  CsvData out;
  Dataset& ds = out.dataset;
  ds.name = path.stem().string();
  ds.num_features = d;
  ds.num_classes = label_values.size();
  ds.features = std::move(features);
  for (const auto& s : raw_labels) ds.labels.push_back(class_of.at(s));
  ds.ids.resize(ds.labels.size());
  std::iota(ds.ids.begin(), ds.ids.end(), SampleId{0});
  out.label_values = std::move(label_values);

  const std::size_t n = ds.size();
  out.standardization.mean.assign(d, 0.0);
  out.standardization.stddev.assign(d, 1.0);
  if (standardize) {
    for (std::size_t c = 0; c < d; ++c) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += ds.features[i * d + c];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double z = ds.features[i * d + c] - mean;
        var += z * z;
      }
      double sd = std::sqrt(var / static_cast<double>(n));
      if (sd <= 0.0) sd = 1.0;
      for (std::size_t i = 0; i < n; ++i) {
        ds.features[i * d + c] = (ds.features[i * d + c] - mean) / sd;
      }
      out.standardization.mean[c] = mean;
      out.standardization.stddev[c] = sd;
    }
  }
  ds.validate();
  return out;
}

void save_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write CSV file '" + path.string() + "'");
  for (std::size_t c = 0; c < data.num_features; ++c) out << 'f' << c << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (double v : data.row(i)) {
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      out.write(buf, ptr - buf);
      out << ',';
    }
    out << data.labels[i] << '\n';
  }
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

// ---------------------------------------------------------------------------
// k-means and marking

KMeansResult kmeans(std::span<const double> points, std::size_t dim, int k, std::uint64_t seed,
                    int max_iter, double tol) {
  if (dim == 0 || points.size() % dim != 0) throw DimensionMismatch("kmeans: ragged input");
  const std::size_t n = points.size() / dim;
  if (n == 0) throw InvalidArgument("kmeans: no points");
  if (k < 1) throw InvalidArgument("kmeans: k must be positive");
  const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), n);

  auto dist2 = [&](std::size_t i, const double* c) {
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      const double z = points[i * dim + j] - c[j];
      s += z * z;
    }
    return s;
  };

  CounterRng rng(seed, 0x6b6d);
  KMeansResult res;
  res.centroids.reserve(kk * dim);
  const std::size_t first = rng.below(n);
  res.centroids.insert(res.centroids.end(), points.begin() + first * dim,
                       points.begin() + (first + 1) * dim);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < kk; ++c) {
    const double* last = res.centroids.data() + (c - 1) * dim;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], dist2(i, last));
      total += best[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        target -= best[i];
        if (target < 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    res.centroids.insert(res.centroids.end(), points.begin() + pick * dim,
                         points.begin() + (pick + 1) * dim);
  }

  res.assignment.assign(n, 0);
  std::vector<double> sums(kk * dim);
  std::vector<std::size_t> counts(kk);
  for (int it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      int bc = 0;
      for (std::size_t c = 0; c < kk; ++c) {
        const double dd = dist2(i, res.centroids.data() + c * dim);
        if (dd < bd) {
          bd = dd;
          bc = static_cast<int>(c);
        }
      }
      res.assignment[i] = bc;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(res.assignment[i]);
      ++counts[c];
      for (std::size_t j = 0; j < dim; ++j) sums[c * dim + j] += points[i * dim + j];
    }
    double shift = 0.0;
    for (std::size_t c = 0; c < kk; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centroid
      double s = 0.0;
      for (std::size_t j = 0; j < dim; ++j) {
        const double next = sums[c * dim + j] / static_cast<double>(counts[c]);
        const double z = next - res.centroids[c * dim + j];
        s += z * z;
        res.centroids[c * dim + j] = next;
      }
      shift = std::max(shift, std::sqrt(s));
    }
    res.iterations = it + 1;
    if (shift < tol) break;
  }
  return res;
}

Scenario parse_scenario(std::string_view name) {
  if (name == "ordered") return Scenario::ordered;
  if (name == "random") return Scenario::random;
  throw InvalidArgument("unknown scenario '" + std::string(name) + "'");
}

std::string_view to_string(Scenario scenario) {
  return scenario == Scenario::ordered ? "ordered" : "random";
}

MarkResult mark_for_removal(const Dataset& data, const MarkSpec& spec) {
  if (spec.kmeans_k < 2) throw InvalidArgument("mark_for_removal: kmeans_k must be >= 2");
  if (!(spec.fraction > 0.0 && spec.fraction < 1.0)) {
    throw InvalidArgument("mark_for_removal: fraction must lie in (0, 1)");
  }
  if (spec.fraction * static_cast<double>(data.size()) < 1.0) {
    throw InvalidArgument("mark_for_removal: fraction * n < 1");
  }
  const std::size_t d = data.num_features;
  MarkResult out;
  for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (static_cast<std::size_t>(data.labels[i]) == cls) rows.push_back(i);
    }
    const auto quota = static_cast<std::size_t>(
        std::llround(spec.fraction * static_cast<double>(rows.size())));
    if (quota == 0) continue;

    std::vector<double> pts;
    pts.reserve(rows.size() * d);
    for (std::size_t r : rows) {
      const auto x = data.row(r);
      pts.insert(pts.end(), x.begin(), x.end());
    }
    const auto km = kmeans(pts, d, spec.kmeans_k, derive_seed(spec.seed, cls));
    const std::size_t k = km.centroids.size() / d;

    std::vector<std::vector<std::size_t>> members(k);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      members[static_cast<std::size_t>(km.assignment[i])].push_back(i);
    }
    std::vector<double> norms(k, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < d; ++j) norms[c] += km.centroids[c * d + j] * km.centroids[c * d + j];
    }
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (members[a].size() != members[b].size()) return members[a].size() > members[b].size();
      if (norms[a] != norms[b]) return norms[a] < norms[b];
      return a < b;
    });

    std::size_t taken = 0;
    for (std::size_t c : order) {
      if (taken >= quota) break;
      auto& m = members[c];
      if (taken + m.size() <= quota) {
        for (std::size_t i : m) out.ids.push_back(data.ids[rows[i]]);
        taken += m.size();
        continue;
      }
      // Partial cluster: points nearest the centroid first.
      const double* centre = km.centroids.data() + c * d;
      auto dist = [&](std::size_t i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double z = pts[i * d + j] - centre[j];
          s += z * z;
        }
        return s;
      };
      std::sort(m.begin(), m.end(), [&](std::size_t a, std::size_t b) {
        const double da = dist(a), db = dist(b);
        if (da != db) return da < db;
        return data.ids[rows[a]] < data.ids[rows[b]];
      });
      for (std::size_t i = 0; taken < quota; ++i, ++taken) out.ids.push_back(data.ids[rows[m[i]]]);
      out.truncated = true;
    }
  }
  out.ids = make_id_set(std::move(out.ids));
  return out;
}

nlohmann::json marking_to_json(const MarkResult& result, const MarkSpec& spec) {
  return {{"ids", result.ids},
          {"truncated", result.truncated},
          {"mark_spec",
           {{"scenario", to_string(spec.scenario)},
            {"fraction", spec.fraction},
            {"kmeans_k", spec.kmeans_k},
            {"seed", spec.seed}}}};
}

FlipResult flip_labels(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw InvalidArgument("flip_labels: fraction must lie in (0, 1)");
  }
  if (data.num_classes < 2) throw InvalidArgument("flip_labels: need at least two classes");
  const auto count =
      static_cast<std::size_t>(std::floor(fraction * static_cast<double>(data.size())));
  CounterRng rng(seed, 0x666c);
  std::vector<std::size_t> rows(data.size());
  std::iota(rows.begin(), rows.end(), 0);
  shuffle(rows, rng);
  FlipResult out{data, {}};
  const int k = static_cast<int>(data.num_classes);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t r = rows[i];
    const int shift = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(k - 1)));
    out.dataset.labels[r] = (data.labels[r] + shift) % k;
    out.flipped.push_back(data.ids[r]);
  }
  out.flipped = make_id_set(std::move(out.flipped));
  return out;
}

SplitResult split(const Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidArgument("split: test_fraction must lie in (0, 1)");
  }
  CounterRng rng(seed, 0x7370);
  std::vector<bool> is_test(data.size(), false);
  for (std::size_t cls = 0; cls < data.num_classes; ++cls) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (static_cast<std::size_t>(data.labels[i]) == cls) rows.push_back(i);
    }
    if (rows.empty()) continue;
    if (rows.size() < 2) {
      throw InvalidArgument("split: class " + std::to_string(cls) + " has fewer than 2 samples");
    }
    shuffle(rows, rng);
    auto take = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(rows.size())));
    take = std::clamp<std::size_t>(take, 1, rows.size() - 1);
    for (std::size_t i = 0; i < take; ++i) is_test[rows[i]] = true;
  }
  std::vector<std::size_t> train_rows, test_rows;
  for (std::size_t i = 0; i < data.size(); ++i) (is_test[i] ? test_rows : train_rows).push_back(i);
  SplitResult out{data.subset(train_rows), data.subset(test_rows)};
  out.train.name = data.name + "/train";
  out.test.name = data.name + "/test";
  return out;
}

IdSet make_id_set(std::vector<SampleId> ids) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

bool contains(const IdSet& set, SampleId id) {
  return std::binary_search(set.begin(), set.end(), id);
}

}  // namespace puma
