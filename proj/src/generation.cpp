#include "pulseformer/generation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

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

double token_value(const HorizonWindow& w, int t) {
  return w.scale_min + static_cast<double>(t) / kMaxToken * (w.scale_max - w.scale_min);
}

}  // namespace

LogitFn model_logits(const ParamStore<float>& params) {
  if (params.head() != HeadKind::lm) throw ContractError("generation needs the language-model head");
  return [&params](const TokenMatrix& tokens) {
    NoGradGuard no_grad;
    auto x = trunk(params, tokens, Mode::eval, nullptr);
    x = transformer_block(params, params.config().n_blocks - 1, x, Mode::eval, nullptr, true);
    const auto out = apply_head(params, x);  // [B x 1 x vocab]
    return RowMatrix<double>(out.value().matrix().template cast<double>());
  };
}

int sample_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw DimensionError("empty logit vector");
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
  for (double l : logits)
    if (!std::isfinite(l)) throw NumericError("non-finite logit during sampling");
  const auto top = std::max_element(logits.begin(), logits.end());
  if (temperature == 0.0) return static_cast<int>(top - logits.begin());
  const double peak = *top;
  std::vector<double> cdf(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += std::exp((logits[i] - peak) / temperature);
    cdf[i] = total;
  }
  const double u = rng.uniform() * total;
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
}

std::vector<std::vector<int>> generate_batch(const LogitFn& logits, const TokenMatrix& contexts, int n_new,
                                             int max_context, std::span<Rng> rngs, double temperature) {
  const auto batch = static_cast<std::size_t>(contexts.rows());
  if (rngs.size() != batch) throw DimensionError("one rng per generated sequence is required");
  if (contexts.cols() < 1) throw DimensionError("generation needs a non-empty context");
  if (max_context < 1) throw ConfigError("max_context must be positive");
  std::vector<std::vector<int>> out(batch);
  if (n_new <= 0) return out;
  const Index width = std::min<Index>(contexts.cols(), max_context);
  TokenMatrix window = contexts.rightCols(width);
  for (int step = 0; step < n_new; ++step) {
    const RowMatrix<double> l = logits(window);
    if (l.rows() != static_cast<Index>(batch)) throw DimensionError("logit function returned the wrong batch size");
    // Slide left by one when full, otherwise grow by one column.
    TokenMatrix next(static_cast<Index>(batch), std::min<Index>(window.cols() + 1, max_context));
    const Index keep = next.cols() - 1;
    next.leftCols(keep) = window.rightCols(keep);
    for (std::size_t b = 0; b < batch; ++b) {
      const int t = sample_token(std::span<const double>(l.row(static_cast<Index>(b)).data(), l.cols()),
                                 temperature, rngs[b]);
      out[b].push_back(t);
      next(static_cast<Index>(b), keep) = t;
    }
    window = std::move(next);
  }
  return out;
}

std::vector<int> generate(const ParamStore<float>& params, std::span<const int> context, int n_new, Rng& rng,
                          double temperature) {
  Rng local = rng;
  auto out = generate_batch(model_logits(params), as_row(context), n_new, params.config().max_context,
                            std::span<Rng>(&local, 1), temperature);
  rng = local;
  return std::move(out.front());
}

std::vector<HorizonWindow> horizon_windows(const std::vector<SignalRecord>& records, int context, int horizon,
                                           int shift) {
  if (context < 1 || horizon < 1 || shift < 1) throw ConfigError("horizon window sizes must be positive");
  const auto len = static_cast<std::size_t>(context + horizon);
  std::vector<HorizonWindow> out;
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& s = records[r].samples;
    for (std::size_t start = 0; start + len <= s.size(); start += static_cast<std::size_t>(shift)) {
      const std::span<const double> win(s.data() + start, len);
      const auto [lo, hi] = std::minmax_element(win.begin(), win.end());
      const auto tokens = quantize(win, *lo, *hi);
      HorizonWindow w;
      w.subject_id = records[r].subject_id;
      w.record = r;
      w.start = start;
      w.context.assign(tokens.begin(), tokens.begin() + context);
      w.truth.assign(tokens.begin() + context, tokens.end());
      w.scale_min = *lo;
      w.scale_max = *hi;
      out.push_back(std::move(w));
    }
  }
  return out;
}

double quantile(std::vector<double> values, double p) {
  if (values.empty()) return std::nan("");
  std::sort(values.begin(), values.end());
  const double pos = p * static_cast<double>(values.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(i);
  if (i + 1 >= values.size()) return values.back();
  return values[i] + frac * (values[i + 1] - values[i]);
}

HorizonStats horizon_stats(const std::vector<std::vector<int>>& predictions,
                           const std::vector<std::vector<int>>& truths) {
  if (predictions.size() != truths.size()) throw DimensionError("one truth per prediction is required");
  std::size_t steps = 0;
  for (const auto& t : truths) steps = std::max(steps, t.size());
  std::vector<std::vector<double>> errors(steps);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const std::size_t n = std::min(predictions[i].size(), truths[i].size());
    for (std::size_t h = 0; h < n; ++h) errors[h].push_back(std::abs(predictions[i][h] - truths[i][h]));
  }
  HorizonStats s;
  for (const auto& e : errors) {
    s.median.push_back(quantile(e, 0.5));
    s.q25.push_back(quantile(e, 0.25));
    s.q75.push_back(quantile(e, 0.75));
    s.n.push_back(e.size());
  }
  return s;
}

HorizonResult evaluate_horizon(const LogitFn& logits, int max_context, const std::vector<HorizonWindow>& windows,
                               const HorizonConfig& config, const std::function<void(std::size_t)>& progress) {
  if (config.rollouts < 1 || config.batch < 1) throw ConfigError("rollouts and batch must be positive");
  if (windows.empty()) throw DataError("no evaluation windows");
  const std::size_t ctx = windows.front().context.size();
  const std::size_t horizon = windows.front().truth.size();
  for (const auto& w : windows) {
    if (w.context.size() != ctx || w.truth.size() != horizon) throw DimensionError("evaluation windows differ in shape");
  }
  // Streams are split in (window, rollout) order before any batching.
  Rng master(config.seed);
  std::vector<Rng> streams;
  std::vector<std::size_t> owner;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    for (int r = 0; r < config.rollouts; ++r) {
      streams.push_back(master.split());
      owner.push_back(i);
    }
  }
  HorizonResult result;
  std::vector<std::vector<int>> truths;
  const auto batch = static_cast<std::size_t>(config.batch);
  for (std::size_t s = 0; s < streams.size(); s += batch) {
    const std::size_t e = std::min(streams.size(), s + batch);
    TokenMatrix contexts(static_cast<Index>(e - s), static_cast<Index>(ctx));
    for (std::size_t k = s; k < e; ++k) {
      const auto& c = windows[owner[k]].context;
      for (std::size_t j = 0; j < ctx; ++j) contexts(static_cast<Index>(k - s), static_cast<Index>(j)) = c[j];
    }
    auto preds = generate_batch(logits, contexts, static_cast<int>(horizon), max_context,
                                std::span<Rng>(streams.data() + s, e - s), config.temperature);
    for (std::size_t k = s; k < e; ++k) {
      result.predictions.push_back(std::move(preds[k - s]));
      truths.push_back(windows[owner[k]].truth);
    }
    if (progress) progress(e);
  }
  result.stats = horizon_stats(result.predictions, truths);
  return result;
}

HorizonResult evaluate_horizon(const ParamStore<float>& params, const std::vector<HorizonWindow>& windows,
                               const HorizonConfig& config, const std::function<void(std::size_t)>& progress) {
  return evaluate_horizon(model_logits(params), params.config().max_context, windows, config, progress);
}

void write_horizon_csv(const std::filesystem::path& file, const HorizonStats& stats) {
  auto out = open_csv(file);
  out << "step,median,q25,q75,n\n";
  for (std::size_t h = 0; h < stats.steps(); ++h) {
    out << h + 1 << ',' << stats.median[h] << ',' << stats.q25[h] << ',' << stats.q75[h] << ',' << stats.n[h] << '\n';
  }
}

void write_rollout_csv(const std::filesystem::path& file, const HorizonWindow& window,
                       const std::vector<int>& prediction) {
  auto out = open_csv(file);
  out << "index,part,token,value\n";
  std::size_t i = 0;
  for (int t : window.context) out << i++ << ",context," << t << ',' << token_value(window, t) << '\n';
  const std::size_t split = i;
  for (int t : window.truth) out << i++ << ",truth," << t << ',' << token_value(window, t) << '\n';
  i = split;
  for (int t : prediction) out << i++ << ",prediction," << t << ',' << token_value(window, t) << '\n';
}

void write_rollout_svg(const std::filesystem::path& file, const HorizonWindow& window,
                       const std::vector<int>& prediction) {
  SvgPlot plot("Generated continuation", "sample", "token", 960, 320);
  plot.fix_y(0, kMaxToken);
  auto series = [](const std::vector<int>& tokens, std::size_t offset, bool bridge, int anchor) {
    std::pair<std::vector<double>, std::vector<double>> xy;
    if (bridge) {
      xy.first.push_back(static_cast<double>(offset) - 1);
      xy.second.push_back(anchor);
    }
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      xy.first.push_back(static_cast<double>(offset + i));
      xy.second.push_back(tokens[i]);
    }
    return xy;
  };
  const int anchor = window.context.empty() ? 0 : window.context.back();
  const auto c = series(window.context, 0, false, 0);
  const auto t = series(window.truth, window.context.size(), !window.context.empty(), anchor);
  const auto p = series(prediction, window.context.size(), !window.context.empty(), anchor);
  plot.line(c.first, c.second, "black");
  plot.line(t.first, t.second, "blue");
  plot.line(p.first, p.second, "red");
  plot.save(file);
}

void write_horizon_svg(const std::filesystem::path& file, const HorizonStats& stats) {
  SvgPlot plot("Prediction error by horizon", "prediction step", "|prediction - truth| (tokens)", 720, 320);
  std::vector<double> x(stats.steps());
  for (std::size_t h = 0; h < x.size(); ++h) x[h] = static_cast<double>(h + 1);
  plot.band(x, stats.q25, stats.q75, "red", 0.2);
  plot.line(x, stats.median, "red", 2.0);
  plot.save(file);
}

}  // namespace pulseformer
