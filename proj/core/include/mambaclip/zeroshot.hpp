#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mambaclip/clip.hpp"
#include "mambaclip/data.hpp"

namespace mambaclip {

/// Prompt templates, each containing "{}" exactly once.
class PromptTemplateSet {
 public:
  explicit PromptTemplateSet(std::vector<std::string> templates);
  /// {"a photo of a {}.", "a blurry photo of a {}.", "a drawing of a {}."}
  static PromptTemplateSet defaults();

  const std::vector<std::string>& templates() const { return templates_; }
  std::string fill(std::size_t index, std::string_view class_name) const;

 private:
  std::vector<std::string> templates_;
};

/// Maps texts to unit-norm embeddings, one row per text.
using TextEmbedder = std::function<Tensor<double>(std::span<const std::string>)>;
/// Maps an [B, S, S, 3] image batch to unit-norm embeddings [B, d].
using ImageEmbedder = std::function<Tensor<double>(const Tensor<double>&)>;

/// A trained model viewed as the two embedders.
struct ClipEmbedders {
  TextEmbedder text;
  ImageEmbedder image;
  std::size_t image_size;
};
ClipEmbedders clip_embedders(ParamSet<double> params, ClipConfig cfg);

struct ClassEmbeddingMatrix {
  Tensor<double> rows;  // [K, d], unit rows
  std::vector<std::string> names;
  std::size_t size() const { return names.size(); }
};

/// Per class: embed every filled template, average the unit embeddings,
/// renormalize.
ClassEmbeddingMatrix build_class_embeddings(const TextEmbedder& embed, const std::vector<std::string>& class_names,
                                            const PromptTemplateSet& templates);

/// Argmax of dot products; ties go to the lowest index.
std::size_t classify(std::span<const double> image_emb, const ClassEmbeddingMatrix& classes);

/// classify() for every row of an embedding batch.
std::vector<std::size_t> classify_rows(const Tensor<double>& image_embs, const ClassEmbeddingMatrix& classes);

struct EvalReport {
  std::string dataset;
  std::string model;
  std::vector<std::string> class_names;
  std::size_t count = 0;
  std::size_t correct = 0;
  std::vector<std::size_t> per_class_count;
  std::vector<std::size_t> per_class_correct;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  double top1() const { return count == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(count); }
  double class_top1(std::size_t k) const;

  /// Adds one (true, predicted) pair.
  void record(std::size_t truth, std::size_t predicted);
  static EvalReport empty(std::string dataset, std::string model, std::vector<std::string> class_names);
};

/// Records are embedded in chunks of `batch` images.
EvalReport evaluate_zeroshot(const ImageEmbedder& embed, std::size_t image_size, const DatasetManifest& manifest,
                             const ClassEmbeddingMatrix& classes, const std::string& dataset,
                             const std::string& model, std::size_t batch = 32);

/// Structured report (JSON) with per-class accuracies and the confusion matrix.
void write_eval_report(const std::filesystem::path& path, const EvalReport& report);
/// CSV with header `dataset,model,top1,count` and one row per report.
void write_eval_csv(const std::filesystem::path& path, std::span<const EvalReport> reports);

/// Model × dataset accuracy grid; a missing cell is nullopt.
struct AccuracyGrid {
  std::vector<std::string> datasets;
  std::vector<std::string> models;
  std::vector<std::vector<std::optional<double>>> cells;  // [dataset][model]

  void set(const std::string& dataset, const std::string& model, double top1);
  /// Reads `dataset,model,top1,count` rows (count may be empty).
  static AccuracyGrid from_csv(const std::filesystem::path& path);
};

struct DatasetBest {
  std::string dataset;
  double best;
  std::vector<std::string> models;  // all models at the maximum
  /// best minus the best accuracy among the other models; 0 on a tie
  double margin;
};

/// Per dataset, the maximal accuracy and every model achieving it. Throws
/// std::invalid_argument naming the first missing cell.
std::vector<DatasetBest> summarize_table(const AccuracyGrid& grid);

}  // namespace mambaclip
