#include <fstream>
#include <map>
#include <sstream>

#include "commands.hpp"
#include "figures.hpp"
#include "pulseformer/generation.hpp"
#include "pulseformer/interpretability.hpp"
#include "pulseformer/svg.hpp"

namespace pulseformer::cli {

namespace fs = std::filesystem;

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw DataError("column '" + name + "' missing");
  }
  double num(std::size_t row, const std::string& name) const {
    const auto& cell = rows[row][column(name)];
    try {
      return std::stod(cell);
    } catch (const std::exception&) {
      if (cell == "nan" || cell == "-nan") return std::numeric_limits<double>::quiet_NaN();
      throw DataError("non-numeric cell '" + cell + "' in column " + name);
    }
  }
  const std::string& str(std::size_t row, const std::string& name) const { return rows[row][column(name)]; }
};

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Table read_table(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw UsageError("cannot read '" + file.string() + "'");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw DataError("'" + file.string() + "' is empty");
  t.header = split(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split(line);
    if (row.size() != t.header.size()) throw DataError("ragged row in '" + file.string() + "'");
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::string detect(const Table& t) {
  static const std::map<std::string, std::string> kinds = {
      {"step,median,q25,q75,n", "horizon"},
      {"index,part,token,value", "rollout"},
      {"layer,position,token,weight", "aggregate"},
      {"layer,mean_s,sd_s,n", "lookback"},
      {"position,class,stage,similarity", "similarity"},
      {"head,position,weight,count,peak", "heads"},
      {"position,token,base,tuned,delta", "delta"},
      {"iter,train_loss,val_loss", "eval-loss"},
      {"iter,loss", "loss"},
  };
  std::string key;
  for (std::size_t i = 0; i < t.header.size(); ++i) key += (i ? "," : "") + t.header[i];
  const auto it = kinds.find(key);
  if (it == kinds.end()) throw DataError("unrecognized CSV header '" + key + "'");
  return it->second;
}

Vector<double> column_vector(const Table& t, const std::string& name, std::size_t begin, std::size_t end) {
  Vector<double> v(static_cast<Index>(end - begin));
  for (std::size_t r = begin; r < end; ++r) v[static_cast<Index>(r - begin)] = t.num(r, name);
  return v;
}

std::vector<int> token_column(const Table& t, std::size_t begin, std::size_t end) {
  std::vector<int> out;
  for (std::size_t r = begin; r < end; ++r) out.push_back(static_cast<int>(t.num(r, "token")));
  return out;
}

}  // namespace

void run_export_figure(Run& run) {
  const auto& e = run.config().at("export");
  if (e.at("csv").is_null()) throw UsageError("a CSV is required (--csv)");
  const fs::path csv = e.at("csv").get<std::string>();
  if (!fs::exists(csv)) throw UsageError("CSV '" + csv.string() + "' does not exist");
  run.input(csv);
  const Table t = read_table(csv);
  std::string kind = e.at("kind").get<std::string>();
  if (kind == "auto") kind = detect(t);
  const std::string stem = csv.stem().string();
  fs::copy_file(csv, run.path(csv.filename().string()), fs::copy_options::overwrite_existing);
  const auto rows = t.rows.size();

  if (kind == "horizon") {
    HorizonStats s;
    for (std::size_t r = 0; r < rows; ++r) {
      s.median.push_back(t.num(r, "median"));
      s.q25.push_back(t.num(r, "q25"));
      s.q75.push_back(t.num(r, "q75"));
      s.n.push_back(static_cast<std::size_t>(t.num(r, "n")));
    }
    write_horizon_svg(run.path(stem + ".svg"), s);
  } else if (kind == "rollout") {
    HorizonWindow w;
    std::vector<int> prediction;
    for (std::size_t r = 0; r < rows; ++r) {
      const int token = static_cast<int>(t.num(r, "token"));
      const auto& part = t.str(r, "part");
      (part == "context" ? w.context : part == "truth" ? w.truth : prediction).push_back(token);
    }
    write_rollout_svg(run.path(stem + ".svg"), w, prediction);
  } else if (kind == "aggregate") {
    std::size_t begin = 0;
    while (begin < rows) {
      std::size_t end = begin;
      while (end < rows && t.str(end, "layer") == t.str(begin, "layer")) ++end;
      const std::string layer = t.str(begin, "layer");
      write_attention_svg(run.path(stem + "_layer" + layer + ".svg"), "Layer " + layer + " aggregate attention",
                          token_column(t, begin, end), column_vector(t, "weight", begin, end));
      begin = end;
    }
  } else if (kind == "lookback") {
    std::vector<LookbackRow> table;
    for (std::size_t r = 0; r < rows; ++r) {
      table.push_back({static_cast<int>(t.num(r, "layer")), t.num(r, "mean_s"), t.num(r, "sd_s"),
                       static_cast<std::size_t>(t.num(r, "n"))});
    }
    write_lookback_svg(run.path(stem + ".svg"), table);
  } else if (kind == "similarity") {
    SimilarityTrace trace;
    std::vector<std::vector<double>> values;
    int stages = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const int stage = static_cast<int>(t.num(r, "stage"));
      if (stage == 0) {
        trace.tokens.push_back({static_cast<Index>(t.num(r, "position")),
                                t.str(r, "class") == "rising" ? Slope::rising : Slope::falling});
        values.emplace_back();
      }
      if (values.empty()) throw DataError("similarity rows must start at stage 0");
      values.back().push_back(t.num(r, "similarity"));
      stages = std::max(stages, stage + 1);
    }
    trace.similarity = RowMatrix<double>::Zero(static_cast<Index>(values.size()), stages);
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (static_cast<int>(values[i].size()) != stages) throw DataError("ragged similarity trace");
      for (int s = 0; s < stages; ++s) trace.similarity(static_cast<Index>(i), s) = values[i][static_cast<std::size_t>(s)];
    }
    write_similarity_svg(run.path(stem + ".svg"), trace);
  } else if (kind == "heads") {
    std::vector<HeadMap> maps;
    std::vector<int> heads;
    for (std::size_t r = 0; r < rows; ++r) {
      const int head = static_cast<int>(t.num(r, "head"));
      if (heads.empty() || heads.back() != head) {
        heads.push_back(head);
        maps.emplace_back();
      }
      auto& m = maps.back();
      if (t.num(r, "peak") != 0) m.peaks.push_back(static_cast<Index>(m.weights.size()));
      m.weights.push_back(t.num(r, "weight"));
      m.counts.push_back(static_cast<int>(t.num(r, "count")));
    }
    for (std::size_t k = 0; k < heads.size(); ++k) heads[k] = static_cast<int>(k + 1);
    write_head_maps_svg(run.path(stem + ".svg"), std::vector<int>{}, maps, heads);
  } else if (kind == "delta") {
    AttentionDelta d{column_vector(t, "base", 0, rows), column_vector(t, "tuned", 0, rows),
                     column_vector(t, "delta", 0, rows)};
    write_delta_svg(run.path(stem + ".svg"), token_column(t, 0, rows), d);
  } else if (kind == "eval-loss") {
    std::vector<EvalRow> evals;
    for (std::size_t r = 0; r < rows; ++r) {
      evals.push_back({static_cast<std::int64_t>(t.num(r, "iter")), t.num(r, "train_loss"), t.num(r, "val_loss")});
    }
    write_loss_svg(run.path(stem + ".svg"), {}, evals);
  } else if (kind == "loss") {
    std::vector<double> loss;
    for (std::size_t r = 0; r < rows; ++r) loss.push_back(t.num(r, "loss"));
    write_loss_svg(run.path(stem + ".svg"), loss, {});
  } else {
    throw UsageError("unknown figure kind '" + kind + "'");
  }
  run.results()["kind"] = kind;
}

}  // namespace pulseformer::cli
