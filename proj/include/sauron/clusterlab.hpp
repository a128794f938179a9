#pragma once

// Clusterability measures over pooled, normalized feature maps: Hartigan's dip
// of each channel's distances to the others, neighbor counts inside a radius
// anchored at the first channel, and the average first-channel distance.
// Per-epoch series are summarized as increase / decrease / similar.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sauron/binio.hpp"
#include "sauron/losses.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

/// Hartigan's dip of a sorted sample, computed with the greatest convex
/// minorant / least concave majorant iteration (after the diptest reference
/// implementation). The value lies in [1/(2n), 0.25].
inline double dip_statistic(std::span<const double> sorted) {
  const int n = static_cast<int>(sorted.size());
  if (n < 2) throw InvalidArgument("dip_statistic: need at least 2 samples, got " + std::to_string(n));
  for (int k = 1; k < n; ++k)
    if (!(sorted[k] >= sorted[k - 1])) throw InvalidArgument("dip_statistic: samples must be sorted and finite");

  // 1-based views as in the classic formulation.
  std::vector<double> xs(n + 1);
  for (int i = 0; i < n; ++i) xs[i + 1] = sorted[i];
  const double* x = xs.data();
  std::vector<int> mn(n + 2, 0), mj(n + 2, 0), gcm(n + 2, 0), lcm(n + 2, 0);

  double dip = 1.0;  // works in units of 2n * dip until the end
  int low = 1, high = n;
  if (x[n] == x[1]) return dip / (2.0 * n);

  mn[1] = 1;
  for (int j = 2; j <= n; ++j) {
    mn[j] = j - 1;
    for (;;) {
      const int mnj = mn[j], mnmnj = mn[mnj];
      if (mnj == 1 || (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj)) break;
      mn[j] = mnmnj;
    }
  }
  mj[n] = n;
  for (int k = n - 1; k >= 1; --k) {
    mj[k] = k + 1;
    for (;;) {
      const int mjk = mj[k], mjmjk = mj[mjk];
      if (mjk == n || (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk)) break;
      mj[k] = mjmjk;
    }
  }

  for (;;) {
    int ic = 1;
    gcm[1] = high;
    while (gcm[ic] > low) {
      const int g = gcm[ic];
      gcm[++ic] = mn[g];
    }
    const int l_gcm = ic;
    ic = 1;
    lcm[1] = low;
    while (lcm[ic] < high) {
      const int l = lcm[ic];
      lcm[++ic] = mj[l];
    }
    const int l_lcm = ic;

    long double d = 0.0L;
    // Hull ends: when both hulls are one segment the modal interval stays put.
    int ig = l_gcm, ih = l_lcm;
    if (l_gcm != 2 || l_lcm != 2) {
      int ix = l_gcm, iv = 2;
      do {
        const int gcmix = gcm[ix], lcmiv = lcm[iv];
        if (gcmix > lcmiv) {
          const int gcmi1 = gcm[ix + 1];
          const long double dx = (lcmiv - gcmi1 + 1) - (static_cast<long double>(x[lcmiv]) - x[gcmi1]) *
                                                           (gcmix - gcmi1) / (x[gcmix] - x[gcmi1]);
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int lcmiv1 = lcm[iv - 1];
          const long double dx = (static_cast<long double>(x[gcmix]) - x[lcmiv1]) * (lcmiv - lcmiv1) /
                                     (x[lcmiv] - x[lcmiv1]) -
                                 (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (gcm[ix] != lcm[iv]);
    } else {
      d = 1.0L;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = gcm[j + 1], je = gcm[j];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (x[jj] - x[jb]) * c);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int jb = lcm[j], je = lcm[j + 1];
      if (je - jb > 1 && x[je] != x[jb]) {
        const double c = (je - jb) / (x[je] - x[jb]);
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (x[jj] - x[jb]) * c - (jj - jb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));

    // Without this check the modal interval can stop shrinking and loop forever.
    if (low == gcm[ig] && high == lcm[ih]) break;
    low = gcm[ig];
    high = lcm[ih];
  }
  return dip / (2.0 * n);
}

/// Per-channel vectors of one layer: every channel's pooled, normalized maps
/// over all captured samples, concatenated sample by sample.
struct ChannelVectors {
  std::string layer;
  int epoch = 0;
  std::size_t samples = 1;
  std::size_t channels = 0;
  std::size_t length = 0;      // samples * per-sample pooled size
  std::vector<double> values;  // [channels][length]

  std::span<const double> row(std::size_t c) const { return {values.data() + c * length, length}; }
  std::size_t per_sample() const { return length / samples; }
};

template <std::floating_point T>
ChannelVectors channel_vectors(const FeatureMapRecord<T>& record, const LossConfig& cfg) {
  const Tensor<T> view = distance_view(record.output.detach(), cfg);
  ChannelVectors v;
  v.layer = record.layer;
  v.epoch = record.epoch;
  v.samples = view.dim(0);
  v.channels = view.dim(1);
  const std::size_t per = view.numel() / (v.samples * v.channels);
  v.length = v.samples * per;
  v.values.resize(v.channels * v.length);
  for (std::size_t b = 0; b < v.samples; ++b)
    for (std::size_t c = 0; c < v.channels; ++c)
      for (std::size_t i = 0; i < per; ++i)
        v.values[c * v.length + b * per + i] = static_cast<double>(view[(b * v.channels + c) * per + i]);
  return v;
}

namespace detail {

inline double l2(std::span<const double> a, std::span<const double> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

inline std::vector<double> pairwise_distances(const ChannelVectors& v) {
  const std::size_t C = v.channels;
  std::vector<double> d(C * C, 0.0);
  for (std::size_t a = 0; a < C; ++a)
    for (std::size_t b = a + 1; b < C; ++b) d[a * C + b] = d[b * C + a] = l2(v.row(a), v.row(b));
  return d;
}

}  // namespace detail

enum class DipAggregate { mean, max };

/// Dip of every channel's distances to all other channels, aggregated over
/// channels. Layers with fewer than 3 channels have no value.
inline std::optional<double> dip_dist(const ChannelVectors& v, DipAggregate agg = DipAggregate::mean) {
  const std::size_t C = v.channels;
  if (C < 3) return std::nullopt;
  const auto d = detail::pairwise_distances(v);
  double total = 0.0, best = 0.0;
  std::vector<double> row;
  for (std::size_t c = 0; c < C; ++c) {
    row.clear();
    for (std::size_t o = 0; o < C; ++o)
      if (o != c) row.push_back(d[c * C + o]);
    std::sort(row.begin(), row.end());
    const double dip = dip_statistic(row);
    total += dip;
    best = std::max(best, dip);
  }
  return agg == DipAggregate::mean ? total / static_cast<double>(C) : best;
}

/// Mean over channels of how many other channels lie within
/// r = fraction * (largest distance from the first channel); "within" is <= r.
inline double neighbor_count(const ChannelVectors& v, double fraction = 0.2) {
  const std::size_t C = v.channels;
  if (C < 2) throw InvalidArgument("neighbor_count: need at least 2 channels in '" + v.layer + "'");
  const auto d = detail::pairwise_distances(v);
  double far = 0.0;
  for (std::size_t r = 1; r < C; ++r) far = std::max(far, d[r]);
  const double radius = fraction * far;
  std::size_t total = 0;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t o = 0; o < C; ++o)
      if (o != c && d[c * C + o] <= radius) ++total;
  return static_cast<double>(total) / static_cast<double>(C);
}

/// Per-sample (1/C) * sum_{r>=1} ||v_0 - v_r||, averaged over samples: the
/// per-layer regularizer term.
inline double avg_first_distance(const ChannelVectors& v) {
  const std::size_t C = v.channels;
  if (C < 2) throw InvalidArgument("avg_first_distance: need at least 2 channels in '" + v.layer + "'");
  const std::size_t per = v.per_sample();
  double total = 0.0;
  for (std::size_t b = 0; b < v.samples; ++b) {
    const auto first = v.row(0).subspan(b * per, per);
    for (std::size_t r = 1; r < C; ++r) total += detail::l2(first, v.row(r).subspan(b * per, per));
  }
  return total / static_cast<double>(C * v.samples);
}

enum class Trend { increase, decrease, similar };
enum class TrendMetric { dip, neighbors, distance };

inline std::string to_string(Trend t) {
  switch (t) {
    case Trend::increase: return "increase";
    case Trend::decrease: return "decrease";
    case Trend::similar: return "similar";
  }
  return "?";
}
inline std::string to_string(TrendMetric m) {
  switch (m) {
    case TrendMetric::dip: return "dip";
    case TrendMetric::neighbors: return "neighbors";
    case TrendMetric::distance: return "distance";
  }
  return "?";
}

inline constexpr double kDipSimilarTolerance = 0.001;
inline constexpr double kRelativeSimilarTolerance = 0.05;

/// Compares the means of the first and last thirds of a per-epoch series.
inline Trend classify_trend(std::span<const double> series, TrendMetric metric) {
  if (series.size() < 6)
    throw InvalidArgument("classify_trend: need at least 6 epochs, got " + std::to_string(series.size()));
  const std::size_t third = series.size() / 3;
  double p1 = 0.0, p2 = 0.0;
  for (std::size_t i = 0; i < third; ++i) {
    p1 += series[i];
    p2 += series[series.size() - third + i];
  }
  p1 /= static_cast<double>(third);
  p2 /= static_cast<double>(third);
  const double tol = metric == TrendMetric::dip ? kDipSimilarTolerance : kRelativeSimilarTolerance * std::abs(p1);
  if (std::abs(p2 - p1) < tol) return Trend::similar;
  return p2 > p1 ? Trend::increase : Trend::decrease;
}

// ---- feature-map dumps ------------------------------------------------------

inline constexpr std::uint32_t kMapMagic = 0x50414D53;  // "SMAP"
inline constexpr std::uint32_t kMapVersion = 1;

inline void write_channel_vectors(const std::filesystem::path& path, const ChannelVectors& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write feature-map dump " + path.string());
  binio::put_u32(os, kMapMagic);
  binio::put_u32(os, kMapVersion);
  binio::put_string(os, v.layer);
  binio::put_i64(os, v.epoch);
  binio::put_u64(os, v.samples);
  binio::put_u64(os, v.channels);
  binio::put_u64(os, v.length);
  for (double x : v.values) binio::put_f64(os, x);
  if (!os) throw Error("failed writing feature-map dump " + path.string());
}

inline ChannelVectors read_channel_vectors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open feature-map dump " + path.string());
  binio::Reader<Error> r(is, path.string());
  if (r.u32() != kMapMagic) throw Error(path.string() + ": not a feature-map dump");
  if (const auto ver = r.u32(); ver != kMapVersion)
    throw Error(path.string() + ": unsupported dump version " + std::to_string(ver));
  ChannelVectors v;
  v.layer = r.string(4096);
  v.epoch = static_cast<int>(r.i64());
  v.samples = r.u64();
  v.channels = r.u64();
  v.length = r.u64();
  if (v.samples == 0 || v.length % v.samples != 0 || v.channels > (1u << 20) || v.length > (1u << 28))
    throw Error(path.string() + ": inconsistent dump header");
  v.values.resize(v.channels * v.length);
  for (auto& x : v.values) x = r.f64();
  return v;
}

// ---- report -----------------------------------------------------------------

struct ClusterabilityRow {
  std::string layer;
  int epoch = 0;
  std::optional<double> dip;
  double neighbors = 0.0;
  double distance = 0.0;
};

struct LayerTrends {
  std::string layer;
  std::optional<Trend> dip, neighbors, distance;  // empty when the series is too short
};

struct ClusterabilityReport {
  std::vector<ClusterabilityRow> rows;
  std::vector<LayerTrends> trends;  // in first-seen layer order

  /// Share of layers whose dip trend is "increase", among layers with a dip trend.
  double increase_fraction(TrendMetric metric = TrendMetric::dip) const {
    std::size_t n = 0, inc = 0;
    for (const auto& t : trends) {
      const auto& v = metric == TrendMetric::dip ? t.dip : metric == TrendMetric::neighbors ? t.neighbors : t.distance;
      if (!v) continue;
      ++n;
      inc += *v == Trend::increase;
    }
    return n ? static_cast<double>(inc) / static_cast<double>(n) : 0.0;
  }

  /// Mean over layers of avg_first_distance in the last third of epochs.
  double last_third_distance() const {
    std::map<std::string, std::vector<double>> series;
    for (const auto& r : rows) series[r.layer].push_back(r.distance);
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& [layer, s] : series) {
      const std::size_t third = std::max<std::size_t>(s.size() / 3, 1);
      for (std::size_t i = s.size() - third; i < s.size(); ++i) total += s[i];
      n += third;
    }
    return n ? total / static_cast<double>(n) : 0.0;
  }

  void write_csv(const std::filesystem::path& rows_path, const std::filesystem::path& trends_path) const {
    std::ofstream r(rows_path);
    if (!r) throw Error("cannot write " + rows_path.string());
    r.precision(17);
    r << "layer,epoch,dip,neighbors,distance\n";
    for (const auto& row : rows) {
      r << row.layer << ',' << row.epoch << ',';
      if (row.dip) r << *row.dip;
      r << ',' << row.neighbors << ',' << row.distance << '\n';
    }
    std::ofstream t(trends_path);
    if (!t) throw Error("cannot write " + trends_path.string());
    t << "layer,dip,neighbors,distance\n";
    auto s = [](const std::optional<Trend>& x) { return x ? to_string(*x) : std::string("n/a"); };
    for (const auto& tr : trends) t << tr.layer << ',' << s(tr.dip) << ',' << s(tr.neighbors) << ',' << s(tr.distance) << '\n';
  }
};

inline ClusterabilityRow measure(const ChannelVectors& v, DipAggregate agg = DipAggregate::mean) {
  ClusterabilityRow row{v.layer, v.epoch, dip_dist(v, agg), 0.0, 0.0};
  if (v.channels >= 2) {
    row.neighbors = neighbor_count(v);
    row.distance = avg_first_distance(v);
  }
  return row;
}

/// Builds the report from per-(layer, epoch) rows; series are ordered by epoch.
inline ClusterabilityReport build_report(std::vector<ClusterabilityRow> rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ClusterabilityRow*>> by_layer;
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.epoch < b.epoch; });
  ClusterabilityReport rep;
  rep.rows = std::move(rows);
  for (const auto& r : rep.rows) {
    if (!by_layer.count(r.layer)) order.push_back(r.layer);
    by_layer[r.layer].push_back(&r);
  }
  for (const auto& name : order) {
    const auto& rs = by_layer[name];
    LayerTrends t{name, {}, {}, {}};
    if (rs.size() >= 6) {
      std::vector<double> dip, nb, dist;
      bool has_dip = true;
      for (const auto* r : rs) {
        has_dip = has_dip && r->dip.has_value();
        dip.push_back(r->dip.value_or(0.0));
        nb.push_back(r->neighbors);
        dist.push_back(r->distance);
      }
      if (has_dip) t.dip = classify_trend(dip, TrendMetric::dip);
      t.neighbors = classify_trend(nb, TrendMetric::neighbors);
      t.distance = classify_trend(dist, TrendMetric::distance);
    }
    rep.trends.push_back(t);
  }
  return rep;
}

/// Analyzes every dump under `maps_dir` (files named *.bin).
inline ClusterabilityReport analyze_dumps(const std::filesystem::path& maps_dir,
                                          DipAggregate agg = DipAggregate::mean) {
  if (!std::filesystem::is_directory(maps_dir))
    throw Error("no feature-map dumps at " + maps_dir.string() + " (was the run trained with capture enabled?)");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(maps_dir))
    if (e.path().extension() == ".bin") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ClusterabilityRow> rows;
  for (const auto& f : files) rows.push_back(measure(read_channel_vectors(f), agg));
  return build_report(std::move(rows));
}

}  // namespace sauron
