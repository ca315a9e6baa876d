#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ipat/checkpoint.hpp"
#include "ipat/manifest.hpp"

namespace ipat::viz {

/// Where an embedding row came from. `frame` indexes the subsampled
/// encoder output.
struct FrameRef {
  std::string language;
  std::string utterance;
  int frame = 0;
  friend bool operator==(const FrameRef&, const FrameRef&) = default;
};

struct EmbeddingSet {
  int dim = 0;
  std::vector<float> data;  // rows x dim
  std::vector<FrameRef> rows;
  std::uint64_t seed = 0;

  std::size_t size() const { return rows.size(); }
};

/// Language -> manifest, iterated in language order.
using LanguageManifests = std::map<std::string, frontend::Manifest>;

/// The frames extract_frame_embeddings reads: n_per_lang distinct
/// (utterance, frame) pairs per language drawn without replacement. The
/// choice depends only on the manifests, the subsampling and the seed, so
/// every model with the same front end sees the same frames.
/// Throws InsufficientFrames.
std::vector<FrameRef> select_frames(const LanguageManifests& manifests, int n_per_lang,
                                    std::uint64_t seed, const model::ArchConfig& arch);

/// Encoder outputs at the selected frames.
EmbeddingSet extract_frame_embeddings(const ckpt::Checkpoint& checkpoint,
                                      const LanguageManifests& manifests, int n_per_lang,
                                      std::uint64_t seed);

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iters = 250;
  /// Unset: max(n / early_exaggeration / 4, 50).
  std::optional<double> learning_rate;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  std::uint64_t seed = 1;
  int log_every = 50;

  std::string describe() const;
};

struct TsneResult {
  std::vector<double> points;  // n x 2
  /// (iteration, KL(P || Q)) against the unexaggerated affinities.
  std::vector<std::pair<int, double>> kl_trace;
  double kl_exaggeration_end = 0.0;
  double kl_final = 0.0;
};

/// Exact t-SNE with PCA initialization. `data` is n x dim row-major.
/// Throws TooFewPoints (n <= 3 * perplexity), BadPerplexity, NonFinite.
TsneResult tsne(std::span<const float> data, std::size_t n, int dim, const TsneConfig& config);

/// Fraction of each point's k nearest neighbours (self excluded) sharing
/// its label, averaged over points.
double knn_purity(std::span<const double> points, std::span<const std::string> labels, int k);

/// Fixed categorical palette, cycled when there are more labels.
std::string_view palette_color(std::size_t index);

/// CSV {x,y,lang,utt,frame} headed by a `# ` comment line.
std::string scatter_csv(std::span<const double> points, std::span<const FrameRef> rows,
                        const std::string& comment);
/// Self-contained SVG: one circle per point and a legend entry per
/// language (languages appearing in `rows` when `languages` is empty).
std::string scatter_svg(std::span<const double> points, std::span<const FrameRef> rows,
                        std::span<const std::string> languages = {});
void emit_scatter(std::span<const double> points, std::span<const FrameRef> rows,
                  std::span<const std::string> languages, const std::string& comment,
                  const std::filesystem::path& csv_path, const std::filesystem::path& svg_path);

/// Binary embedding file: dim, seed, rows with provenance, f32 data.
void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

}  // namespace ipat::viz
