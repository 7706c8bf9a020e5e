#include "pulseformer/interpretability.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "pulseformer/svg.hpp"

namespace pulseformer {

namespace {

std::ofstream open_csv(const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw DataError("cannot write " + file.string());
  out.precision(9);
  return out;
}

std::vector<double> as_doubles(std::span<const int> tokens) { return {tokens.begin(), tokens.end()}; }

std::vector<double> iota_x(std::size_t n) {
  std::vector<double> x(n);
  std::iota(x.begin(), x.end(), 0.0);
  return x;
}

template <typename Scalar>
void check_tokens(const ParamStore<Scalar>& params, std::span<const int> tokens) {
  if (tokens.empty()) throw DimensionError("analysis needs at least one token");
  if (static_cast<Index>(tokens.size()) > params.config().max_context) {
    throw ContextOverflowError("context of " + std::to_string(tokens.size()) + " tokens exceeds the model limit " +
                               std::to_string(params.config().max_context));
  }
}

}  // namespace

template <typename Scalar>
FinalRows final_rows(const AttentionRecord<Scalar>& record) {
  FinalRows out;
  for (const auto& layer : record.weights) {
    auto& heads = out.rows.emplace_back();
    for (const auto& w : layer) heads.push_back(w.row(w.rows() - 1).transpose().template cast<double>());
  }
  return out;
}

template <typename Scalar>
FinalRows capture_final_rows(const ParamStore<Scalar>& params, std::span<const int> tokens) {
  check_tokens(params, tokens);
  return final_rows(forward_with_attention(params, tokens).second);
}

template <typename Scalar>
std::vector<Vector<double>> final_block_rows(const ParamStore<Scalar>& params, std::span<const int> tokens) {
  check_tokens(params, tokens);
  NoGradGuard no_grad;
  const auto x = trunk(params, as_row(tokens), Mode::eval, nullptr);
  AttentionCapture<Scalar> capture;
  transformer_block(params, params.config().n_blocks - 1, x, Mode::eval, nullptr, true, &capture);
  std::vector<Vector<double>> out;
  for (const auto& w : capture) out.push_back(w.row(0).transpose().template cast<double>());
  return out;
}

Vector<double> aggregate_heads(const std::vector<Vector<double>>& heads) {
  if (heads.empty()) throw DimensionError("no attention heads to aggregate");
  Vector<double> sum = Vector<double>::Zero(heads.front().size());
  for (const auto& h : heads) {
    if (h.size() != sum.size()) throw DimensionError("attention rows differ in length");
    sum += h;
  }
  const double total = sum.sum();
  if (!(total > 0.0)) throw NumericError("aggregate attention has no mass");
  return sum / total;
}

template <typename Scalar>
Vector<double> aggregate_final_row(const AttentionRecord<Scalar>& record, int layer) {
  if (layer < 1 || layer > record.layers()) {
    throw DimensionError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(record.layers()) + "]");
  }
  const auto& w = record.weights[static_cast<std::size_t>(layer - 1)];
  std::vector<Vector<double>> rows;
  for (const auto& h : w) rows.push_back(h.row(h.rows() - 1).transpose().template cast<double>());
  return aggregate_heads(rows);
}

double lookback_center(const Vector<double>& row, double fs) {
  if (!(fs > 0.0)) throw ConfigError("sampling rate must be positive");
  const Index t = row.size();
  double c = 0.0;
  for (Index i = 0; i < t; ++i) c += row[i] * static_cast<double>(t - 1 - i);
  return c / fs;
}

std::vector<LookbackRow> lookback_distance(const std::vector<FinalRows>& windows, double fs) {
  if (windows.empty()) throw DataError("look-back needs at least one window");
  const int layers = windows.front().layers();
  std::vector<LookbackRow> table;
  for (int l = 0; l < layers; ++l) {
    std::vector<double> centers;
    for (const auto& w : windows) {
      if (w.layers() != layers) throw DimensionError("windows captured with different depths");
      for (const auto& h : w.rows[static_cast<std::size_t>(l)]) centers.push_back(lookback_center(h, fs));
    }
    const double n = static_cast<double>(centers.size());
    const double mean = std::accumulate(centers.begin(), centers.end(), 0.0) / n;
    double ss = 0.0;
    for (double c : centers) ss += (c - mean) * (c - mean);
    table.push_back({l + 1, mean, centers.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0, centers.size()});
  }
  return table;
}

std::string to_string(Slope s) { return s == Slope::rising ? "rising" : "falling"; }

std::optional<Slope> slope_at(std::span<const double> values, Index i) {
  const auto n = static_cast<Index>(values.size());
  if (i <= 0 || i >= n - 1) return std::nullopt;
  const auto u = static_cast<std::size_t>(i);
  const double left = values[u] - values[u - 1];
  const double right = values[u + 1] - values[u];
  const double centered = values[u + 1] - values[u - 1];
  if (centered == 0.0 || left * right < 0.0) return std::nullopt;
  return centered > 0.0 ? Slope::rising : Slope::falling;
}

std::vector<SlopeToken> select_slope_tokens(const TokenWindow& window, Index reference, int tolerance) {
  const auto n = static_cast<Index>(window.tokens.size());
  if (n < 3) throw DimensionError("slope selection needs at least three tokens");
  if (reference < 0 || reference >= n) throw DimensionError("reference position outside the window");
  if (tolerance < 0) throw ConfigError("token tolerance must be non-negative");
  const std::vector<double> values = as_doubles(window.tokens);
  const int ref = window.tokens[static_cast<std::size_t>(reference)];
  std::vector<SlopeToken> out;
  for (Index i = 1; i + 1 < n; ++i) {
    if (i == reference || std::abs(window.tokens[static_cast<std::size_t>(i)] - ref) > tolerance) continue;
    if (const auto s = slope_at(values, i)) out.push_back({i, *s});
  }
  return out;
}

Index rising_reference(const TokenWindow& window) {
  const std::vector<double> values = as_doubles(window.tokens);
  const auto n = static_cast<Index>(values.size());
  Index end = -1;
  for (Index i = n - 2; i >= 1; --i) {
    if (slope_at(values, i) == Slope::rising) {
      end = i;
      break;
    }
  }
  if (end < 0) throw DataError("window has no rising flank");
  Index begin = end;
  while (begin - 1 >= 1 && slope_at(values, begin - 1) == Slope::rising) --begin;
  int lo = kMaxToken, hi = 0;
  for (Index i = begin; i <= end; ++i) {
    lo = std::min(lo, window.tokens[static_cast<std::size_t>(i)]);
    hi = std::max(hi, window.tokens[static_cast<std::size_t>(i)]);
  }
  const double mid = 0.5 * (lo + hi);
  Index best = begin;
  for (Index i = begin; i <= end; ++i) {
    if (std::abs(window.tokens[static_cast<std::size_t>(i)] - mid) <
        std::abs(window.tokens[static_cast<std::size_t>(best)] - mid)) {
      best = i;
    }
  }
  return best;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine similarity of vectors of different length");
  const Eigen::Map<const Vector<double>> x(a.data(), static_cast<Index>(a.size()));
  const Eigen::Map<const Vector<double>> y(b.data(), static_cast<Index>(b.size()));
  const double nx = x.norm(), ny = y.norm();
  if (nx == 0.0 || ny == 0.0) throw NumericError("cosine similarity is undefined for a zero-norm vector");
  return std::clamp(x.dot(y) / (nx * ny), -1.0, 1.0);
}

double SimilarityTrace::class_mean(Slope slope, int stage) const {
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].slope != slope) continue;
    sum += similarity(static_cast<Index>(i), stage);
    ++count;
  }
  return count == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / count;
}

template <typename Scalar>
SimilarityTrace similarity_trace(const ParamStore<Scalar>& params, std::span<const int> tokens,
                                 const std::vector<SlopeToken>& selected, Index reference) {
  check_tokens(params, tokens);
  const auto n = static_cast<Index>(tokens.size());
  if (reference < 0 || reference >= n) throw DimensionError("reference position outside the context");
  for (const auto& s : selected)
    if (s.position < 0 || s.position >= n) throw DimensionError("selected position outside the context");
  ForwardTrace<Scalar> trace;
  {
    NoGradGuard no_grad;
    forward(params, as_row(tokens), Mode::eval, nullptr, &trace);
  }
  SimilarityTrace out;
  out.reference = reference;
  out.tokens = selected;
  const auto stages = static_cast<Index>(trace.residual.size());
  out.similarity.resize(static_cast<Index>(selected.size()), stages);
  for (Index st = 0; st < stages; ++st) {
    const RowMatrix<double> r = trace.residual[static_cast<std::size_t>(st)].template cast<double>();
    const Vector<double> ref = r.row(reference).transpose();
    for (std::size_t i = 0; i < selected.size(); ++i) {
      const Vector<double> v = r.row(selected[i].position).transpose();
      out.similarity(static_cast<Index>(i), st) = cosine_similarity({v.data(), static_cast<std::size_t>(v.size())},
                                                                {ref.data(), static_cast<std::size_t>(ref.size())});
    }
  }
  return out;
}

template <typename Scalar>
std::vector<HeadMap> shift_and_add(const ParamStore<Scalar>& params, const ShiftedWindow& window, Index n) {
  if (n < 1) throw ConfigError("shift-and-add window must be positive");
  std::vector<HeadMap> maps;
  for (Index s = 0; s < n; ++s) {
    const auto tokens = window(s);
    if (static_cast<Index>(tokens.size()) != n) throw DimensionError("shifted window has the wrong length");
    const auto rows = final_block_rows(params, tokens);
    if (maps.empty()) {
      maps.resize(rows.size());
      for (auto& m : maps) {
        m.weights.assign(static_cast<std::size_t>(n), 0.0);
        m.counts.assign(static_cast<std::size_t>(n), 0);
      }
    }
    for (std::size_t h = 0; h < rows.size(); ++h) {
      // Window index j is absolute position s + j; keep what overlaps the original window.
      for (Index j = 0; s + j < n; ++j) {
        maps[h].weights[static_cast<std::size_t>(s + j)] += rows[h][j];
        ++maps[h].counts[static_cast<std::size_t>(s + j)];
      }
    }
  }
  for (auto& m : maps) {
    for (std::size_t p = 0; p < m.weights.size(); ++p) m.weights[p] /= m.counts[p];
    m.peaks = find_attention_peaks(m.weights);
  }
  return maps;
}

template <typename Scalar>
std::vector<HeadMap> shift_and_add(const ParamStore<Scalar>& params, std::span<const int> tokens, Index n) {
  if (static_cast<Index>(tokens.size()) < 2 * n - 1) {
    throw DataError("shift-and-add needs at least " + std::to_string(2 * n - 1) + " tokens");
  }
  return shift_and_add(params, ShiftedWindow([&](Index s) {
                         return std::vector<int>(tokens.begin() + s, tokens.begin() + s + n);
                       }),
                       n);
}

template <typename Scalar>
std::vector<HeadMap> shift_and_add_samples(const ParamStore<Scalar>& params, std::span<const double> samples,
                                           Index n) {
  if (static_cast<Index>(samples.size()) < 2 * n - 1) {
    throw DataError("shift-and-add needs at least " + std::to_string(2 * n - 1) + " samples");
  }
  return shift_and_add(params, ShiftedWindow([&](Index s) {
                         return tokenize_window(samples.subspan(static_cast<std::size_t>(s),
                                                                static_cast<std::size_t>(n)))
                             .tokens;
                       }),
                       n);
}

std::vector<Index> find_attention_peaks(std::span<const double> map, Index min_distance, double rel_height) {
  if (map.empty()) throw DimensionError("peak search on an empty map");
  const auto n = static_cast<Index>(map.size());
  const double floor = rel_height * *std::max_element(map.begin(), map.end());
  std::vector<Index> candidates;
  for (Index i = 1; i + 1 < n; ++i) {
    const double v = map[static_cast<std::size_t>(i)];
    if (!(map[static_cast<std::size_t>(i - 1)] < v) || v < floor) continue;
    Index j = i + 1;
    while (j < n && map[static_cast<std::size_t>(j)] == v) ++j;
    if (j < n && map[static_cast<std::size_t>(j)] < v) candidates.push_back(i);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](Index a, Index b) { return map[static_cast<std::size_t>(a)] > map[static_cast<std::size_t>(b)]; });
  std::vector<Index> kept;
  for (Index c : candidates) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](Index k) { return std::abs(k - c) >= min_distance; });
    if (clear) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

AttentionDelta attention_delta(const Vector<double>& base_aggregate, const Vector<double>& tuned_aggregate) {
  if (base_aggregate.size() != tuned_aggregate.size()) throw DimensionError("attention maps differ in length");
  return {base_aggregate, tuned_aggregate, tuned_aggregate - base_aggregate};
}

template <typename Scalar>
AttentionDelta attention_delta(const ParamStore<Scalar>& base, const ParamStore<Scalar>& tuned,
                               std::span<const int> tokens) {
  const auto& a = base.config();
  const auto& b = tuned.config();
  if (a.d_model != b.d_model || a.n_blocks != b.n_blocks || a.n_heads != b.n_heads || a.vocab != b.vocab ||
      a.max_context != b.max_context) {
    throw ContractError("attention delta needs two models of the same architecture");
  }
  return attention_delta(aggregate_heads(final_block_rows(base, tokens)),
                         aggregate_heads(final_block_rows(tuned, tokens)));
}

std::vector<bool> irregular_interval_mask(std::span<const double> beats, Index length, double tolerance) {
  std::vector<bool> mask(static_cast<std::size_t>(std::max<Index>(length, 0)), false);
  if (beats.size() < 3) return mask;
  std::vector<double> rr;
  for (std::size_t k = 1; k < beats.size(); ++k) rr.push_back(beats[k] - beats[k - 1]);
  std::vector<double> sorted = rr;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2), sorted.end());
  double median = sorted[sorted.size() / 2];
  if (sorted.size() % 2 == 0) {
    median = 0.5 * (median + *std::max_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2)));
  }
  for (std::size_t k = 0; k < rr.size(); ++k) {
    if (std::abs(rr[k] - median) <= tolerance * median) continue;
    const auto lo = std::max<Index>(0, static_cast<Index>(std::ceil(beats[k])));
    const auto hi = std::min<Index>(length - 1, static_cast<Index>(std::floor(beats[k + 1])));
    for (Index i = lo; i <= hi; ++i) mask[static_cast<std::size_t>(i)] = true;
  }
  return mask;
}

std::pair<double, double> positive_delta_contrast(const Vector<double>& delta, const std::vector<bool>& mask) {
  if (static_cast<std::size_t>(delta.size()) != mask.size()) throw DimensionError("mask and delta differ in length");
  double in = 0, out = 0;
  int n_in = 0, n_out = 0;
  for (Index i = 0; i < delta.size(); ++i) {
    const double v = std::max(delta[i], 0.0);
    if (mask[static_cast<std::size_t>(i)]) {
      in += v;
      ++n_in;
    } else {
      out += v;
      ++n_out;
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {n_in ? in / n_in : nan, n_out ? out / n_out : nan};
}

void write_aggregate_csv(const std::filesystem::path& file, std::span<const int> tokens,
                         const std::vector<Vector<double>>& per_layer, const std::vector<int>& layers) {
  if (per_layer.size() != layers.size()) throw DimensionError("one layer label per aggregate is required");
  auto out = open_csv(file);
  out << "layer,position,token,weight\n";
  for (std::size_t l = 0; l < per_layer.size(); ++l) {
    if (static_cast<std::size_t>(per_layer[l].size()) != tokens.size()) {
      throw DimensionError("aggregate length differs from the context");
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      out << layers[l] << ',' << i << ',' << tokens[i] << ',' << per_layer[l][static_cast<Index>(i)] << '\n';
    }
  }
}

void write_lookback_csv(const std::filesystem::path& file, const std::vector<LookbackRow>& table) {
  auto out = open_csv(file);
  out << "layer,mean_s,sd_s,n\n";
  for (const auto& r : table) out << r.layer << ',' << r.mean << ',' << r.sd << ',' << r.n << '\n';
}

void write_similarity_csv(const std::filesystem::path& file, const SimilarityTrace& trace) {
  auto out = open_csv(file);
  out << "position,class,stage,similarity\n";
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    for (int s = 0; s < trace.stages(); ++s) {
      out << trace.tokens[i].position << ',' << to_string(trace.tokens[i].slope) << ',' << s << ','
          << trace.similarity(static_cast<Index>(i), s) << '\n';
    }
  }
}

void write_head_maps_csv(const std::filesystem::path& file, const std::vector<HeadMap>& maps) {
  auto out = open_csv(file);
  out << "head,position,weight,count,peak\n";
  for (std::size_t h = 0; h < maps.size(); ++h) {
    const auto& m = maps[h];
    for (std::size_t p = 0; p < m.weights.size(); ++p) {
      const bool peak = std::binary_search(m.peaks.begin(), m.peaks.end(), static_cast<Index>(p));
      out << h + 1 << ',' << p << ',' << m.weights[p] << ',' << m.counts[p] << ',' << (peak ? 1 : 0) << '\n';
    }
  }
}

void write_delta_csv(const std::filesystem::path& file, std::span<const int> tokens, const AttentionDelta& delta) {
  if (static_cast<std::size_t>(delta.delta.size()) != tokens.size()) {
    throw DimensionError("delta length differs from the context");
  }
  auto out = open_csv(file);
  out << "position,token,base,tuned,delta\n";
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto k = static_cast<Index>(i);
    out << i << ',' << tokens[i] << ',' << delta.base[k] << ',' << delta.tuned[k] << ',' << delta.delta[k] << '\n';
  }
}

void write_attention_svg(const std::filesystem::path& file, const std::string& title, std::span<const int> tokens,
                         const Vector<double>& weights) {
  if (static_cast<std::size_t>(weights.size()) != tokens.size()) {
    throw DimensionError("weights and context differ in length");
  }
  SvgPlot plot(title, "position", "token", 960, 320);
  plot.fix_y(0, kMaxToken);
  const auto x = iota_x(tokens.size());
  const std::vector<double> w(weights.data(), weights.data() + weights.size());
  plot.shading(x, w, "red", 1.0);
  plot.line(x, as_doubles(tokens), "black");
  const double peak = weights.maxCoeff();
  if (peak > 0) {
    std::vector<double> scaled(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) scaled[i] = w[i] / peak * kMaxToken;
    plot.line(x, scaled, "red", 1.0);
  }
  const std::vector<double> px = {static_cast<double>(tokens.size() - 1)}, py = {static_cast<double>(tokens.back())};
  plot.points(px, py, "blue", 4);
  plot.save(file);
}

void write_similarity_svg(const std::filesystem::path& file, const SimilarityTrace& trace) {
  SvgPlot plot("Cosine similarity to the rising reference", "stage (0 = embedded input)", "cosine similarity", 720,
               360);
  const auto x = iota_x(static_cast<std::size_t>(trace.stages()));
  for (std::size_t i = 0; i < trace.tokens.size(); ++i) {
    std::vector<double> y(x.size());
    for (std::size_t s = 0; s < x.size(); ++s) y[s] = trace.similarity(static_cast<Index>(i), static_cast<Index>(s));
    plot.line(x, y, trace.tokens[i].slope == Slope::rising ? "blue" : "red", 0.8);
  }
  plot.line(x, std::vector<double>(x.size(), 1.0), "black", 1.0);
  plot.save(file);
}

void write_head_maps_svg(const std::filesystem::path& file, std::span<const int> tokens,
                         const std::vector<HeadMap>& maps, const std::vector<int>& heads) {
  static const char* const kColors[] = {"red", "deeppink", "blue", "darkorange", "green", "purple", "teal", "brown"};
  SvgPlot plot("Final-block head attention (shift-and-add)", "position", "token", 960, 360);
  plot.fix_y(0, kMaxToken);
  const std::size_t n = maps.empty() ? tokens.size() : maps.front().weights.size();
  const auto x = iota_x(n);
  const std::vector<double> ctx(tokens.begin(), tokens.begin() + static_cast<long>(std::min(n, tokens.size())));
  plot.line(std::span<const double>(x.data(), ctx.size()), ctx, "black");
  for (std::size_t k = 0; k < heads.size(); ++k) {
    const auto h = static_cast<std::size_t>(heads[k] - 1);
    if (h >= maps.size()) throw DimensionError("head " + std::to_string(heads[k]) + " does not exist");
    const auto& m = maps[h];
    const char* color = kColors[k % std::size(kColors)];
    const double peak = *std::max_element(m.weights.begin(), m.weights.end());
    std::vector<double> scaled(m.weights.size());
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = peak > 0 ? m.weights[i] / peak * kMaxToken : 0.0;
    plot.line(x, scaled, color, 1.0);
    std::vector<double> px, py;
    for (Index p : m.peaks) {
      px.push_back(static_cast<double>(p));
      py.push_back(scaled[static_cast<std::size_t>(p)]);
    }
    plot.points(px, py, color, 4);
  }
  plot.save(file);
}

#define PULSEFORMER_INSTANTIATE_INTERP(S)                                                                        \
  template FinalRows final_rows<S>(const AttentionRecord<S>&);                                                   \
  template FinalRows capture_final_rows<S>(const ParamStore<S>&, std::span<const int>);                          \
  template std::vector<Vector<double>> final_block_rows<S>(const ParamStore<S>&, std::span<const int>);          \
  template Vector<double> aggregate_final_row<S>(const AttentionRecord<S>&, int);                                \
  template SimilarityTrace similarity_trace<S>(const ParamStore<S>&, std::span<const int>,                       \
                                               const std::vector<SlopeToken>&, Index);                           \
  template std::vector<HeadMap> shift_and_add<S>(const ParamStore<S>&, const ShiftedWindow&, Index);             \
  template std::vector<HeadMap> shift_and_add<S>(const ParamStore<S>&, std::span<const int>, Index);             \
  template std::vector<HeadMap> shift_and_add_samples<S>(const ParamStore<S>&, std::span<const double>, Index);  \
  template AttentionDelta attention_delta<S>(const ParamStore<S>&, const ParamStore<S>&, std::span<const int>);

PULSEFORMER_INSTANTIATE_INTERP(float)
PULSEFORMER_INSTANTIATE_INTERP(double)

}  // namespace pulseformer
