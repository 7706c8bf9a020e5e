#include "figures.hpp"

#include <algorithm>

#include "pulseformer/svg.hpp"

namespace pulseformer::cli {

void write_loss_svg(const std::filesystem::path& file, const std::vector<double>& iter_loss,
                    const std::vector<EvalRow>& evals) {
  SvgPlot plot("Training loss", "iteration", "loss", 720, 320);
  std::vector<double> x(iter_loss.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i + 1);
  if (!iter_loss.empty()) plot.line(x, iter_loss, "grey", 0.8);
  std::vector<double> ex, tr, va;
  for (const auto& e : evals) {
    ex.push_back(static_cast<double>(e.iter));
    tr.push_back(e.train_loss);
    va.push_back(e.val_loss);
  }
  if (!ex.empty()) {
    plot.line(ex, tr, "black", 1.5);
    plot.points(ex, tr, "black");
    plot.line(ex, va, "red", 1.5);
    plot.points(ex, va, "red");
  }
  plot.save(file);
}

void write_lookback_svg(const std::filesystem::path& file, const std::vector<LookbackRow>& table) {
  SvgPlot plot("Mean look-back distance per layer", "layer", "seconds", 640, 320);
  std::vector<double> x, mean, lo, hi;
  for (const auto& r : table) {
    x.push_back(r.layer);
    mean.push_back(r.mean);
    lo.push_back(std::max(0.0, r.mean - r.sd));
    hi.push_back(r.mean + r.sd);
  }
  plot.band(x, lo, hi, "blue", 0.2);
  plot.line(x, mean, "blue", 2.0);
  plot.points(x, mean, "blue", 4);
  plot.save(file);
}

void write_delta_svg(const std::filesystem::path& file, std::span<const int> tokens, const AttentionDelta& delta) {
  Vector<double> positive = delta.delta.cwiseMax(0.0);
  write_attention_svg(file, "Attention gained after fine-tuning", tokens, positive);
}

}  // namespace pulseformer::cli
