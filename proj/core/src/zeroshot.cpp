#include "mambaclip/zeroshot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <stdexcept>

#include "mambaclip/ops.hpp"

namespace mambaclip {

PromptTemplateSet::PromptTemplateSet(std::vector<std::string> templates) : templates_(std::move(templates)) {
  if (templates_.empty()) throw std::invalid_argument("prompt template set is empty");
  for (const auto& t : templates_) {
    const auto first = t.find("{}");
    if (first == std::string::npos) throw std::invalid_argument("template '" + t + "' has no {} placeholder");
    if (t.find("{}", first + 2) != std::string::npos) {
      throw std::invalid_argument("template '" + t + "' has more than one {} placeholder");
    }
  }
}

PromptTemplateSet PromptTemplateSet::defaults() {
  return PromptTemplateSet({"a photo of a {}.", "a blurry photo of a {}.", "a drawing of a {}."});
}

std::string PromptTemplateSet::fill(std::size_t index, std::string_view class_name) const {
  std::string t = templates_.at(index);
  return t.replace(t.find("{}"), 2, class_name);
}

ClipEmbedders clip_embedders(ParamSet<double> params, ClipConfig cfg) {
  auto shared_params = std::make_shared<const ParamSet<double>>(std::move(params));
  auto shared_cfg = std::make_shared<const ClipConfig>(std::move(cfg));
  TextEmbedder text = [shared_params, shared_cfg](std::span<const std::string> texts) {
    std::vector<TokenSequence> tokens;
    tokens.reserve(texts.size());
    for (const auto& t : texts) tokens.push_back(tokenize(t, shared_cfg->context_len));
    return encode_text(*shared_params, *shared_cfg, std::span<const TokenSequence>(tokens));
  };
  ImageEmbedder image = [shared_params, shared_cfg](const Tensor<double>& images) {
    return encode_image(*shared_params, *shared_cfg, images);
  };
  return {std::move(text), std::move(image), shared_cfg->image_size};
}

ClassEmbeddingMatrix build_class_embeddings(const TextEmbedder& embed, const std::vector<std::string>& class_names,
                                            const PromptTemplateSet& templates) {
  if (class_names.empty()) throw std::invalid_argument("build_class_embeddings: no class names");
  const std::size_t T = templates.templates().size();
  std::vector<std::string> prompts;
  for (const auto& name : class_names)
    for (std::size_t t = 0; t < T; ++t) prompts.push_back(templates.fill(t, name));
  const Tensor<double> e = embed(prompts);
  if (e.rank() != 2 || e.dim(0) != prompts.size()) {
    throw ShapeError("text embedder returned " + shape_str(e.shape()) + " for " + std::to_string(prompts.size()) +
                     " prompts");
  }
  const std::size_t K = class_names.size(), d = e.dim(1);
  std::vector<double> rows(K * d, 0.0);
  for (std::size_t k = 0; k < K; ++k) {
    double* row = rows.data() + k * d;
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) row[j] += e[(k * T + t) * d + j];
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
    norm = std::sqrt(norm);
    if (norm == 0.0) throw std::domain_error("class '" + class_names[k] + "' has a zero mean prompt embedding");
    for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
  }
  return {Tensor<double>({K, d}, std::move(rows)), class_names};
}

std::size_t classify(std::span<const double> image_emb, const ClassEmbeddingMatrix& classes) {
  const std::size_t d = classes.rows.dim(1);
  if (image_emb.size() != d) {
    throw ShapeError("classify: embedding has " + std::to_string(image_emb.size()) + " dims, classes have " +
                     std::to_string(d));
  }
  std::size_t best = 0;
  double best_score = -INFINITY;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += image_emb[j] * classes.rows[k * d + j];
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

std::vector<std::size_t> classify_rows(const Tensor<double>& image_embs, const ClassEmbeddingMatrix& classes) {
  if (image_embs.rank() != 2) throw ShapeError("classify_rows: expected [B, d], got " + shape_str(image_embs.shape()));
  const std::size_t d = image_embs.dim(1);
  std::vector<std::size_t> out(image_embs.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = classify(image_embs.data().subspan(i * d, d), classes);
  return out;
}

double EvalReport::class_top1(std::size_t k) const {
  return per_class_count.at(k) == 0 ? 0.0
                                    : static_cast<double>(per_class_correct[k]) / static_cast<double>(per_class_count[k]);
}

void EvalReport::record(std::size_t truth, std::size_t predicted) {
  ++count;
  ++per_class_count.at(truth);
  ++confusion.at(truth).at(predicted);
  if (truth == predicted) {
    ++correct;
    ++per_class_correct[truth];
  }
}

EvalReport EvalReport::empty(std::string dataset, std::string model, std::vector<std::string> class_names) {
  EvalReport r;
  const std::size_t K = class_names.size();
  r.dataset = std::move(dataset);
  r.model = std::move(model);
  r.class_names = std::move(class_names);
  r.per_class_count.assign(K, 0);
  r.per_class_correct.assign(K, 0);
  r.confusion.assign(K, std::vector<std::size_t>(K, 0));
  return r;
}

EvalReport evaluate_zeroshot(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                             const ClassEmbeddingMatrix& classes, const std::string& dataset,
                             const std::string& model, std::size_t batch) {
  if (manifest.kind != ManifestKind::labeled) throw ManifestError("zero-shot evaluation needs a labeled manifest");
  if (batch == 0) throw std::invalid_argument("evaluate_zeroshot: batch must be positive");
  for (const auto& r : manifest.records) {
    if (!r.label_index || static_cast<std::size_t>(*r.label_index) >= classes.size()) {
      throw ManifestError("line " + std::to_string(r.line) + ": label_index outside the " +
                          std::to_string(classes.size()) + "-class list");
    }
  }
  EvalReport report = EvalReport::empty(dataset, model, classes.names);
  const auto records = std::span<const ImageRecord>(manifest.records);
  for (std::size_t start = 0; start < records.size(); start += batch) {
    const auto chunk = records.subspan(start, std::min(batch, records.size() - start));
    const auto predicted = classify_rows(embed(load_image_batch(chunk, image_size)), classes);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      report.record(static_cast<std::size_t>(*chunk[i].label_index), predicted[i]);
    }
  }
  return report;
}

void write_eval_report(const std::filesystem::path& path, const EvalReport& report) {
  nlohmann::ordered_json j;
  j["dataset"] = report.dataset;
  j["model"] = report.model;
  j["count"] = report.count;
  j["correct"] = report.correct;
  j["top1"] = report.top1();
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (std::size_t k = 0; k < report.class_names.size(); ++k) {
    per.push_back({{"class", report.class_names[k]},
                   {"count", report.per_class_count[k]},
                   {"correct", report.per_class_correct[k]},
                   {"top1", report.class_top1(k)}});
  }
  j["per_class"] = per;
  j["confusion"] = report.confusion;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << j.dump(2) << '\n';
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

}  // namespace

void write_eval_csv(const std::filesystem::path& path, std::span<const EvalReport> reports) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "dataset,model,top1,count\n";
  for (const auto& r : reports) {
    std::ostringstream top1;
    top1.precision(17);
    top1 << r.top1();
    out << csv_field(r.dataset) << ',' << csv_field(r.model) << ',' << top1.str() << ',' << r.count << '\n';
  }
}

void AccuracyGrid::set(const std::string& dataset, const std::string& model, double top1) {
  auto d = std::find(datasets.begin(), datasets.end(), dataset);
  if (d == datasets.end()) {
    datasets.push_back(dataset);
    cells.emplace_back(models.size());
    d = datasets.end() - 1;
  }
  auto m = std::find(models.begin(), models.end(), model);
  if (m == models.end()) {
    models.push_back(model);
    for (auto& row : cells) row.emplace_back();
    m = models.end() - 1;
  }
  auto& cell = cells[static_cast<std::size_t>(d - datasets.begin())][static_cast<std::size_t>(m - models.begin())];
  if (cell) throw std::invalid_argument("duplicate accuracy for " + dataset + " / " + model);
  cell = top1;
}

AccuracyGrid AccuracyGrid::from_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::invalid_argument(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  if (header.size() < 3 || header[0] != "dataset" || header[1] != "model" || header[2] != "top1") {
    throw std::invalid_argument(path.string() + ": header must start with dataset,model,top1");
  }
  AccuracyGrid grid;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() < 3) throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": too few fields");
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(f[2], &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != f[2].size() || f[2].empty()) {
      throw std::invalid_argument(path.string() + ":" + std::to_string(n) + ": bad accuracy '" + f[2] + "'");
    }
    grid.set(f[0], f[1], v);
  }
  return grid;
}

std::vector<DatasetBest> summarize_table(const AccuracyGrid& grid) {
  std::vector<DatasetBest> out;
  for (std::size_t d = 0; d < grid.datasets.size(); ++d) {
    DatasetBest row{grid.datasets[d], -INFINITY, {}, 0.0};
    for (std::size_t m = 0; m < grid.models.size(); ++m) {
      if (!grid.cells[d][m]) {
        throw std::invalid_argument("missing accuracy for dataset '" + grid.datasets[d] + "', model '" +
                                    grid.models[m] + "'");
      }
      row.best = std::max(row.best, *grid.cells[d][m]);
    }
    double runner_up = -INFINITY;
    for (std::size_t m = 0; m < grid.models.size(); ++m) {
      if (*grid.cells[d][m] == row.best) {
        row.models.push_back(grid.models[m]);
      } else {
        runner_up = std::max(runner_up, *grid.cells[d][m]);
      }
    }
    if (row.models.size() > 1) {
      row.margin = 0.0;
    } else {
      row.margin = std::isfinite(runner_up) ? row.best - runner_up : 0.0;
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace mambaclip
