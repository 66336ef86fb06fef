#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sp/data.hpp"
#include "sp/embeddings.hpp"
#include "sp/encoder.hpp"
#include "sp/prompt.hpp"

namespace sp {

enum class ClassifierKind { nearest_prototype, logistic_regression };

std::string_view classifier_name(ClassifierKind k);  // "nn" | "lr"
ClassifierKind parse_classifier(std::string_view s);

// argmax_j cos(query_i, prototype_j); ties resolve to the lowest index.
std::vector<std::size_t> classify_cosine(const Tensor& queries, const Tensor& prototypes);

struct LogRegOptions {
  double l2 = 1.0;              // penalty strength on weights and bias
  double tolerance = 1e-6;      // stop when the gradient norm drops below this
  std::size_t max_iterations = 10000;
};

struct LogRegModel {
  Tensor weights;  // (classes, dim + 1), last column is the bias
  std::size_t iterations = 0;
  double gradient_norm = 0.0;

  // Logits for rows of `features` (already L2-normalised by the caller).
  Tensor logits(const Tensor& features) const;
};

// Multinomial logistic regression on L2-normalised features, minimising
// mean cross-entropy + l2/2 * ||W||^2 by gradient descent with step 1/L.
// Throws ConvergenceError if the tolerance is not met within the cap.
LogRegModel fit_logreg(const Tensor& features, const std::vector<std::size_t>& labels,
                       std::size_t num_classes, const LogRegOptions& opts = {});

std::vector<std::size_t> classify_logreg(const Tensor& support,
                                         const std::vector<std::size_t>& support_labels,
                                         std::size_t num_classes, const Tensor& queries,
                                         const LogRegOptions& opts = {});

Tensor l2_normalize_rows(const Tensor& x);

struct EvalConfig {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t queries = 15;
  std::size_t episodes = 2000;
  ClassifierKind classifier = ClassifierKind::nearest_prototype;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  LogRegOptions logreg;

  void validate() const;
};

struct EvalReport {
  std::size_t way = 0;
  std::size_t shot = 0;
  ClassifierKind classifier = ClassifierKind::nearest_prototype;
  Mechanism mechanism = Mechanism::none;
  std::vector<double> episode_accuracy;
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 * sample std / sqrt(n)

  static EvalReport from_accuracies(std::vector<double> accuracies, std::size_t way,
                                    std::size_t shot, ClassifierKind classifier,
                                    Mechanism mechanism = Mechanism::none);
  std::size_t episodes() const { return episode_accuracy.size(); }
  std::string summary() const;  // "0.6123 ± 0.0052"
};

// Few-shot evaluation on `split`. When `prompt` is non-null and its
// mechanism is not `none`, support images are prompted with their class
// embeddings from `table`; queries are always encoded without a prompt.
EvalReport evaluate(const Encoder& encoder, const PromptModule* prompt, const Split& split,
                    const ClassEmbeddingTable* table, const EvalConfig& cfg);

// Writes `<stem>.txt` with the summary line and `<stem>.csv` with one row
// per episode.
void write_report(const std::filesystem::path& stem, const EvalReport& report);

// Similarity between the pooled feature and every patch output token,
// laid out on the patch grid.
struct Heatmap {
  std::size_t grid = 0;
  Tensor values;  // (grid, grid)
};

Heatmap attention_heatmap(const Encoder& encoder, const PromptModule* prompt,
                          const Tensor& image, const Tensor* semantic);

// Writes `<stem>.csv` and `<stem>.pgm` (8-bit, min-max scaled).
void write_heatmap(const std::filesystem::path& stem, const Heatmap& map);

std::vector<std::uint8_t> heatmap_pixels(const Heatmap& map);

}  // namespace sp
