#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "checkpoint.hpp"
#include "png.hpp"
#include "runner.hpp"

namespace hiercomp {

class AnalysisError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- aggregation ----

// Population statistics over the finite values that were present.
struct RunStats {
  std::size_t n = 0;
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
};

inline RunStats run_stats(std::span<const double> values) {
  RunStats s;
  double sum = 0.0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++s.n;
    }
  if (s.n == 0) return s;
  s.mean = sum / static_cast<double>(s.n);
  double ss = 0.0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(s.n));
  return s;
}

struct ConditionSummary {
  Task task = Task::ObjectRecognition;
  NetworkName network = NetworkName::ThreeConvNet;
  ScrambleSpec condition;
  RunStats iid;
  RunStats ood;
};

// Groups are ordered by (task, network, condition). Values are sorted before
// summing so the result does not depend on input order, bit for bit.
inline std::vector<ConditionSummary> aggregate(const std::vector<ResultRow>& rows,
                                               std::vector<std::string>* warnings = nullptr) {
  using Key = std::tuple<int, int, int>;
  struct Group {
    ConditionSummary head;
    std::vector<double> iid, ood;
  };
  std::map<Key, Group> groups;
  for (const auto& r : rows) {
    auto [it, fresh] = groups.try_emplace(Key{static_cast<int>(r.task), static_cast<int>(r.network),
                                              condition_index(r.condition)});
    if (fresh) it->second.head = {r.task, r.network, r.condition, {}, {}};
    it->second.iid.push_back(r.metric_iid);
    it->second.ood.push_back(r.metric_ood);
  }
  std::vector<ConditionSummary> out;
  for (auto& [key, g] : groups) {
    std::sort(g.iid.begin(), g.iid.end());
    std::sort(g.ood.begin(), g.ood.end());
    ConditionSummary s = g.head;
    s.iid = run_stats(g.iid);
    s.ood = run_stats(g.ood);
    if (s.iid.n == 0 && s.ood.n == 0) {
      const std::string msg = std::string("aggregate: no finite metrics for ") + std::string(task_name(s.task)) + " " +
                              std::string(network_name(s.network)) + " " + s.condition.tag() + ", omitted";
      if (warnings) warnings->push_back(msg);
      continue;
    }
    out.push_back(s);
  }
  return out;
}

inline std::vector<ConditionSummary> aggregate(const std::vector<RunRecord>& records,
                                               std::vector<std::string>* warnings = nullptr) {
  for (const auto& r : records)
    if (r.schema_version != records.front().schema_version)
      throw AnalysisError("aggregate: mixed schema versions " + std::to_string(records.front().schema_version) +
                          " and " + std::to_string(r.schema_version));
  return aggregate(result_rows(records), warnings);
}

inline constexpr const char* kSummaryHeader =
    "task,network,scheme,level,n_iid,metric_iid_mean,metric_iid_popstd,n_ood,metric_ood_mean,metric_ood_popstd";

inline void write_summaries_csv(const std::filesystem::path& path, const std::vector<ConditionSummary>& summaries) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << kSummaryHeader << '\n' << std::setprecision(17);
  auto num = [&](double v) {
    if (std::isfinite(v)) out << v;
  };
  for (const auto& s : summaries) {
    out << task_name(s.task) << ',' << network_name(s.network) << ',' << scheme_name(s.condition.scheme) << ','
        << s.condition.level << ',' << s.iid.n << ',';
    num(s.iid.mean);
    out << ',';
    num(s.iid.std);
    out << ',' << s.ood.n << ',';
    num(s.ood.mean);
    out << ',';
    num(s.ood.std);
    out << '\n';
  }
  if (!out) throw AnalysisError("cannot write " + path.string());
}

// ---- plots ----

// Axis position along the scrambling tree: S0, TD1..TD4, S5, BU4..BU1.
inline int plot_position(const ScrambleSpec& s) {
  switch (s.scheme) {
    case ScrambleScheme::Identity: return 0;
    case ScrambleScheme::TopDown: return s.level;
    case ScrambleScheme::Full: return 5;
    case ScrambleScheme::BottomUp: return 10 - s.level;
  }
  return 0;
}

inline std::string plot_label(int position) {
  if (position == 0) return "S0";
  if (position < 5) return "TD" + std::to_string(position);
  if (position == 5) return "S5";
  return "BU" + std::to_string(10 - position);
}

namespace detail {

inline const char* series_color(std::size_t i) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  return palette[i % std::size(palette)];
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(4) << v;
  return s.str();
}

}  // namespace detail

// Writes the SVG for one task. Every network gets a color; solid i.i.d., dashed o.o.d.
inline void write_task_svg(const std::filesystem::path& path, Task task, const std::vector<ConditionSummary>& rows) {
  constexpr double W = 640, H = 420, L = 70, R = 150, T = 40, B = 60;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : rows)
    for (const RunStats* st : {&s.iid, &s.ood})
      if (st->n > 0) {
        lo = std::min(lo, st->mean - st->std);
        hi = std::max(hi, st->mean + st->std);
      }
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  if (task_metric(task) == Metric::Accuracy) lo = std::min(lo, 0.0), hi = std::max(hi, 1.0);
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pad = 0.05 * (hi - lo);
  lo -= pad, hi += pad;
  auto X = [&](int pos) { return L + (W - L - R) * pos / 10.0; };
  auto Y = [&](double v) { return T + (H - T - B) * (hi - v) / (hi - lo); };

  std::ofstream out(path, std::ios::trunc);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  const bool lower_better = task_metric(task) == Metric::MSE;
  out << "<text x=\"" << L << "\" y=\"20\" font-size=\"15\">" << task_name(task) << " ("
      << metric_name(task_metric(task)) << (lower_better ? ", lower is better" : ", higher is better") << ")</text>\n";
  // axes
  out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int p = 0; p <= 10; ++p)
    out << "<text x=\"" << X(p) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\">" << plot_label(p) << "</text>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    out << "<text x=\"" << L - 6 << "\" y=\"" << Y(v) + 4 << "\" text-anchor=\"end\">" << detail::fmt(v) << "</text>\n";
  }
  out << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 20 << "\" text-anchor=\"middle\">scrambling condition</text>\n";
  out << "<text transform=\"translate(18," << (T + H - B) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << metric_name(task_metric(task)) << (lower_better ? " (lower is better)" : "") << "</text>\n";

  std::map<int, std::vector<const ConditionSummary*>> by_net;
  for (const auto& s : rows) by_net[static_cast<int>(s.network)].push_back(&s);
  std::size_t series = 0;
  for (auto& [net, pts] : by_net) {
    std::sort(pts.begin(), pts.end(),
              [](auto* a, auto* b) { return plot_position(a->condition) < plot_position(b->condition); });
    const char* color = detail::series_color(series);
    for (int which = 0; which < 2; ++which) {
      auto stat = [&](const ConditionSummary* s) -> const RunStats& { return which == 0 ? s->iid : s->ood; };
      std::ostringstream poly;
      std::size_t count = 0;
      for (auto* s : pts)
        if (stat(s).n > 0) {
          poly << X(plot_position(s->condition)) << ',' << Y(stat(s).mean) << ' ';
          ++count;
        }
      if (count > 1)
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\""
            << (which == 1 ? " stroke-dasharray=\"6,4\"" : "") << " points=\"" << poly.str() << "\"/>\n";
      for (auto* s : pts) {
        const RunStats& st = stat(s);
        if (st.n == 0) continue;
        const double x = X(plot_position(s->condition));
        out << "<line x1=\"" << x << "\" y1=\"" << Y(st.mean - st.std) << "\" x2=\"" << x << "\" y2=\""
            << Y(st.mean + st.std) << "\" stroke=\"" << color << "\"/>\n"
            << "<circle cx=\"" << x << "\" cy=\"" << Y(st.mean) << "\" r=\"3\" fill=\""
            << (which == 0 ? color : "white") << "\" stroke=\"" << color << "\"/>\n";
      }
    }
    const double ly = T + 18.0 * static_cast<double>(series);
    out << "<line x1=\"" << W - R + 10 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 35 << "\" y2=\"" << ly
        << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << W - R + 40 << "\" y=\"" << ly + 4 << "\">" << network_name(static_cast<NetworkName>(net))
        << "</text>\n";
    ++series;
  }
  const double ly = T + 18.0 * static_cast<double>(series) + 10;
  out << "<text x=\"" << W - R + 10 << "\" y=\"" << ly << "\">solid: i.i.d.</text>\n"
      << "<text x=\"" << W - R + 10 << "\" y=\"" << ly + 16 << "\">dashed: o.o.d.</text>\n"
      << "<text x=\"" << W - R + 10 << "\" y=\"" << ly + 32 << "\">bars: pop. std</text>\n"
      << "</svg>\n";
  if (!out) throw AnalysisError("cannot write " + path.string());
}

// One <task>.svg per task present plus summaries.csv. Returns written files.
inline std::vector<std::filesystem::path> emit_plots(const std::vector<ConditionSummary>& summaries,
                                                     const std::filesystem::path& out_dir) {
  if (summaries.empty()) throw AnalysisError("emit_plots: no summaries");
  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> files;
  std::map<int, std::vector<ConditionSummary>> by_task;
  for (const auto& s : summaries) by_task[static_cast<int>(s.task)].push_back(s);
  for (const auto& [task, rows] : by_task) {
    auto path = out_dir / (std::string(task_name(static_cast<Task>(task))) + ".svg");
    write_task_svg(path, static_cast<Task>(task), rows);
    files.push_back(path);
  }
  files.push_back(out_dir / "summaries.csv");
  write_summaries_csv(files.back(), summaries);
  return files;
}

// ---- filters ----

struct FilterGrid {
  std::size_t filters = 0, grid = 0, tile = 0, scale = 1;
  Tensor<float> image;  // [3 x side x side], 1 px black gutter between tiles
};

// Accepts "conv1", "conv1.weight", "fc1" and so on.
inline const NamedTensor<float>& find_weight(const std::vector<NamedTensor<float>>& tensors, const std::string& layer) {
  const std::string name = layer.ends_with(".weight") ? layer : layer + ".weight";
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw AnalysisError("filters: no tensor named " + name);
}

// Weights [out, c, k, k] with c in {1, 3}, or a dense [out, 3*32*32] matrix
// shown at image geometry. Each filter is min-max normalized on its own.
inline FilterGrid render_filters(const Tensor<float>& w, std::size_t scale = 8) {
  std::size_t n = 0, c = 0, k = 0;
  if (w.rank() == 4 && (w.dim(1) == 1 || w.dim(1) == 3) && w.dim(2) == w.dim(3)) {
    n = w.dim(0), c = w.dim(1), k = w.dim(2);
  } else if (w.rank() == 2 && w.dim(1) == kImageChannels * kImageSide * kImageSide) {
    n = w.dim(0), c = kImageChannels, k = kImageSide;
    scale = std::max<std::size_t>(1, scale / 4);
  } else {
    throw AnalysisError("filters: cannot visualize weights of shape " + to_string(w.shape()));
  }
  if (n == 0 || scale == 0) throw AnalysisError("filters: empty layer");
  FilterGrid g;
  g.filters = n;
  g.grid = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (g.grid * g.grid < n) ++g.grid;
  while (g.grid > 1 && (g.grid - 1) * (g.grid - 1) >= n) --g.grid;
  g.tile = k * scale;
  g.scale = scale;
  const std::size_t side = g.grid * (g.tile + 1) + 1;
  g.image = Tensor<float>({3, side, side});
  const std::size_t per = c * k * k, plane = side * side;
  for (std::size_t f = 0; f < n; ++f) {
    const float* src = w.data() + f * per;
    const auto [mn, mx] = std::minmax_element(src, src + per);
    const double lo = *mn, range = static_cast<double>(*mx) - lo;
    const std::size_t oy = (f / g.grid) * (g.tile + 1) + 1, ox = (f % g.grid) * (g.tile + 1) + 1;
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t y = 0; y < g.tile; ++y)
        for (std::size_t x = 0; x < g.tile; ++x) {
          const double v = src[(c == 1 ? 0 : ch) * k * k + (y / scale) * k + x / scale];
          g.image[ch * plane + (oy + y) * side + ox + x] =
              range > 0 ? static_cast<float>((v - lo) / range) : 0.5f;
        }
  }
  return g;
}

inline FilterGrid export_filters(const std::vector<NamedTensor<float>>& checkpoint, const std::string& layer,
                                 const std::filesystem::path& out_file, std::size_t scale = 8) {
  FilterGrid g = render_filters(find_weight(checkpoint, layer).value, scale);
  if (!out_file.parent_path().empty()) std::filesystem::create_directories(out_file.parent_path());
  write_png(out_file.string(), g.image);
  return g;
}

// ---- texture Gram ----

// G[i][j] = <phi_i, phi_j>, accumulated in double.
inline Eigen::MatrixXd gram_matrix(const std::vector<std::vector<double>>& maps) {
  const auto n = static_cast<Eigen::Index>(maps.size());
  if (n == 0) return {};
  const std::size_t len = maps.front().size();
  Eigen::MatrixXd phi(n, static_cast<Eigen::Index>(len));
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& m = maps[static_cast<std::size_t>(i)];
    if (m.size() != len)
      throw AnalysisError("gram: map " + std::to_string(i) + " has length " + std::to_string(m.size()) +
                          ", expected " + std::to_string(len));
    for (std::size_t j = 0; j < len; ++j) phi(i, static_cast<Eigen::Index>(j)) = m[j];
  }
  Eigen::MatrixXd g = phi * phi.transpose();
  return g.selfadjointView<Eigen::Upper>();
}

// Feature maps [n x ...]: the leading axis indexes maps.
template <class T>
Eigen::MatrixXd gram_matrix(const Tensor<T>& maps) {
  if (maps.rank() < 2) throw AnalysisError("gram: need [n x ...] maps, got " + to_string(maps.shape()));
  const std::size_t n = maps.dim(0), len = maps.size() / std::max<std::size_t>(n, 1);
  std::vector<std::vector<double>> rows(n, std::vector<double>(len));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < len; ++j) rows[i][j] = static_cast<double>(maps[i * len + j]);
  return gram_matrix(rows);
}

}  // namespace hiercomp
