#include "ipat/viz.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include <Eigen/Dense>

#include "ipat/error.hpp"
#include "ipat/io.hpp"
#include "ipat/rng.hpp"

namespace ipat::viz {

namespace {

using FeatureCache = std::map<std::string, std::shared_ptr<const frontend::FeatureMatrix>>;

std::shared_ptr<const frontend::FeatureMatrix> features(const frontend::Utterance& utt) {
  if (utt.features) return utt.features;
  return std::make_shared<const frontend::FeatureMatrix>(frontend::load_features(utt));
}

std::vector<FrameRef> select_from(const LanguageManifests& manifests, int n_per_lang,
                                  std::uint64_t seed, const model::ArchConfig& arch,
                                  FeatureCache* cache) {
  std::vector<FrameRef> out;
  if (n_per_lang < 0) fail(ErrorCode::BadConfig, "frames per language must be non-negative");
  for (const auto& [lang, manifest] : manifests) {
    if (n_per_lang == 0) continue;
    // Flattened (utterance, frame) index space in manifest order.
    std::vector<std::int64_t> offsets = {0};
    for (const auto& utt : manifest) {
      auto f = features(utt);
      offsets.push_back(offsets.back() + model::subsampled_length(static_cast<int>(f->num_frames), arch));
      if (cache) (*cache)[utt.id] = std::move(f);
    }
    const std::int64_t total = offsets.back();
    if (total < n_per_lang) {
      fail(ErrorCode::InsufficientFrames, "language " + lang + " has " + std::to_string(total) +
                                              " encoder frames, " + std::to_string(n_per_lang) +
                                              " requested");
    }
    // Partial Fisher-Yates over a sparse permutation.
    Rng rng(derive_seed(derive_seed(seed, "frames"), lang));
    std::map<std::int64_t, std::int64_t> swapped;
    std::vector<std::int64_t> picked;
    for (std::int64_t i = 0; i < n_per_lang; ++i) {
      const std::int64_t j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(total - i)));
      const std::int64_t vi = swapped.contains(i) ? swapped[i] : i;
      const std::int64_t vj = swapped.contains(j) ? swapped[j] : j;
      picked.push_back(vj);
      swapped[j] = vi;
    }
    std::sort(picked.begin(), picked.end());
    for (const std::int64_t g : picked) {
      const auto u = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), g) -
                                              offsets.begin() - 1);
      out.push_back({lang, manifest[u].id, static_cast<int>(g - offsets[u])});
    }
  }
  return out;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

std::vector<FrameRef> select_frames(const LanguageManifests& manifests, int n_per_lang,
                                    std::uint64_t seed, const model::ArchConfig& arch) {
  return select_from(manifests, n_per_lang, seed, arch, nullptr);
}

EmbeddingSet extract_frame_embeddings(const ckpt::Checkpoint& checkpoint,
                                      const LanguageManifests& manifests, int n_per_lang,
                                      std::uint64_t seed) {
  FeatureCache cache;
  EmbeddingSet set;
  set.seed = seed;
  set.dim = checkpoint.arch.d_model;
  set.rows = select_from(manifests, n_per_lang, seed, checkpoint.arch, &cache);
  set.data.resize(set.rows.size() * static_cast<std::size_t>(set.dim));
  const model::Model<float> net(checkpoint.arch, checkpoint.params);
  std::size_t r = 0;
  while (r < set.rows.size()) {
    // Rows are grouped by utterance; encode each utterance once.
    std::size_t end = r;
    while (end < set.rows.size() && set.rows[end].utterance == set.rows[r].utterance &&
           set.rows[end].language == set.rows[r].language) {
      ++end;
    }
    const auto& feats = cache.at(set.rows[r].utterance);
    ad::Tape<float> tp;
    tp.set_grad_enabled(false);
    const frontend::FeatureMatrix* fp = feats.get();
    std::vector<int> lengths;
    const auto x = model::feature_batch<float>(std::span<const frontend::FeatureMatrix* const>(&fp, 1),
                                               &lengths);
    const auto enc = net.encode(tp, x, lengths);
    for (; r < end; ++r) {
      const float* src = enc.out.data() + static_cast<std::size_t>(set.rows[r].frame) * set.dim;
      std::copy(src, src + set.dim, set.data.data() + r * set.dim);
    }
  }
  return set;
}

std::string TsneConfig::describe() const {
  std::string s = "tsne perplexity=" + fmt("%g", perplexity) + " iterations=" + std::to_string(iterations) +
                  " exaggeration=" + fmt("%g", early_exaggeration) + "x" +
                  std::to_string(exaggeration_iters) + " learning_rate=" +
                  (learning_rate ? fmt("%g", *learning_rate) : std::string("auto")) +
                  " seed=" + std::to_string(seed) + " init=pca";
  return s;
}

namespace {

// Row i of the conditional affinities with entropy log(perplexity).
void fit_row(const double* d2, std::size_t n, std::size_t i, double perplexity, double* p) {
  const double target = std::log(perplexity);
  double beta = 1.0;
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  double min_d = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    if (j != i) min_d = std::min(min_d, d2[j]);
  }
  for (int it = 0; it < 200; ++it) {
    double sum = 0.0;
    double wsum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      // Shifting by the nearest distance keeps exp() away from underflow.
      p[j] = j == i ? 0.0 : std::exp(-beta * (d2[j] - min_d));
      sum += p[j];
      wsum += p[j] * (d2[j] - min_d);
    }
    const double h = std::log(sum) + beta * wsum / sum;
    for (std::size_t j = 0; j < n; ++j) p[j] /= sum;
    const double diff = h - target;
    if (std::abs(diff) < 1e-6) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : (beta + hi) / 2.0;
    } else {
      hi = beta;
      beta = (beta + lo) / 2.0;
    }
  }
}

double kl_divergence(const std::vector<double>& P, const std::vector<double>& Y, std::size_t n) {
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double dx = Y[2 * i] - Y[2 * j];
      const double dy = Y[2 * i + 1] - Y[2 * j + 1];
      z += 1.0 / (1.0 + dx * dx + dy * dy);
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double p = P[i * n + j];
      if (i == j || p <= 0.0) continue;
      const double dx = Y[2 * i] - Y[2 * j];
      const double dy = Y[2 * i + 1] - Y[2 * j + 1];
      const double q = std::max(1.0 / (1.0 + dx * dx + dy * dy) / z, 1e-300);
      kl += p * std::log(p / q);
    }
  }
  return kl;
}

}  // namespace

TsneResult tsne(std::span<const float> data, std::size_t n, int dim, const TsneConfig& config) {
  if (!(config.perplexity > 0.0) || !std::isfinite(config.perplexity)) {
    fail(ErrorCode::BadPerplexity, "perplexity must be positive and finite");
  }
  if (static_cast<double>(n) <= 3.0 * config.perplexity) {
    fail(ErrorCode::TooFewPoints, std::to_string(n) + " points, need more than 3 x perplexity " +
                                      fmt("%g", config.perplexity));
  }
  if (dim < 1 || data.size() != n * static_cast<std::size_t>(dim)) {
    fail(ErrorCode::ShapeMismatch, "t-SNE input is not n x dim");
  }
  for (float v : data) {
    if (!std::isfinite(v)) fail(ErrorCode::NonFinite, "t-SNE input contains non-finite values");
  }
  if (config.iterations < 0 || config.exaggeration_iters < 0) {
    fail(ErrorCode::BadConfig, "t-SNE iteration counts must be non-negative");
  }

  Eigen::MatrixXd X(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (int k = 0; k < dim; ++k) X(i, k) = data[i * dim + k];
  }
  X.rowwise() -= X.colwise().mean();

  // Symmetric input affinities.
  std::vector<double> P(n * n);
  {
    const Eigen::VectorXd sq = X.rowwise().squaredNorm();
    const Eigen::MatrixXd G = X * X.transpose();
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) d2[j] = std::max(0.0, sq(i) + sq(j) - 2.0 * G(i, j));
      fit_row(d2.data(), n, i, config.perplexity, P.data() + i * n);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double s = std::max((P[i * n + j] + P[j * n + i]) / (2.0 * n), 1e-12);
        P[i * n + j] = s;
        P[j * n + i] = s;
      }
      P[i * n + i] = 0.0;
    }
  }

  // PCA initialization, scaled so the first coordinate has std 1e-4.
  std::vector<double> Y(n * 2);
  {
    const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(n);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd basis(dim, 2);
    for (int c = 0; c < 2; ++c) {
      const int col = dim - 1 - c;  // eigenvalues ascend
      Eigen::VectorXd v = col >= 0 ? Eigen::VectorXd(eig.eigenvectors().col(col))
                                   : Eigen::VectorXd::Zero(dim);
      Eigen::Index arg = 0;
      v.cwiseAbs().maxCoeff(&arg);
      if (v(arg) < 0) v = -v;  // sign convention for reproducible layouts
      basis.col(c) = v;
    }
    const Eigen::MatrixXd proj = X * basis;
    const double sd = std::sqrt(proj.col(0).squaredNorm() / static_cast<double>(n));
    const double scale = sd > 0 ? 1e-4 / sd : 1.0;
    Rng rng(derive_seed(config.seed, "tsne.jitter"));
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        // A tiny seeded jitter separates coincident rows.
        Y[2 * i + c] = proj(i, c) * scale + 1e-8 * rng.normal();
      }
    }
  }

  const double lr = config.learning_rate.value_or(
      std::max(static_cast<double>(n) / config.early_exaggeration / 4.0, 50.0));
  std::vector<double> update(n * 2, 0.0);
  std::vector<double> gains(n * 2, 1.0);
  std::vector<double> num(n * n);
  std::vector<double> grad(n * 2);
  TsneResult result;
  const int exag_end = std::min(config.exaggeration_iters, config.iterations);
  if (exag_end == 0) result.kl_exaggeration_end = kl_divergence(P, Y, n);

  for (int it = 1; it <= config.iterations; ++it) {
    const bool exaggerate = it <= config.exaggeration_iters;
    const double ex = exaggerate ? config.early_exaggeration : 1.0;
    const double momentum = exaggerate ? config.initial_momentum : config.final_momentum;
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      num[i * n + i] = 0.0;
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = Y[2 * i] - Y[2 * j];
        const double dy = Y[2 * i + 1] - Y[2 * j + 1];
        const double q = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = q;
        num[j * n + i] = q;
        z += 2.0 * q;
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      double gx = 0.0;
      double gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const double w = (ex * P[i * n + j] - num[i * n + j] / z) * num[i * n + j];
        gx += w * (Y[2 * i] - Y[2 * j]);
        gy += w * (Y[2 * i + 1] - Y[2 * j + 1]);
      }
      grad[2 * i] = 4.0 * gx;
      grad[2 * i + 1] = 4.0 * gy;
    }
    for (std::size_t k = 0; k < n * 2; ++k) {
      const bool same_sign = (grad[k] > 0) == (update[k] > 0);
      gains[k] = same_sign ? std::max(gains[k] * 0.8, 0.01) : gains[k] + 0.2;
      update[k] = momentum * update[k] - lr * gains[k] * grad[k];
      Y[k] += update[k];
    }
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += Y[2 * i];
      my += Y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      Y[2 * i] -= mx;
      Y[2 * i + 1] -= my;
    }
    const bool logged = config.log_every > 0 && it % config.log_every == 0;
    if (logged || it == exag_end || it == config.iterations) {
      const double kl = kl_divergence(P, Y, n);
      if (logged || it == config.iterations) result.kl_trace.emplace_back(it, kl);
      if (it == exag_end) result.kl_exaggeration_end = kl;
      if (it == config.iterations) result.kl_final = kl;
    }
  }
  if (config.iterations == 0) result.kl_final = result.kl_exaggeration_end;
  result.points = std::move(Y);
  return result;
}

double knn_purity(std::span<const double> points, std::span<const std::string> labels, int k) {
  const std::size_t n = labels.size();
  if (points.size() != 2 * n) fail(ErrorCode::ShapeMismatch, "points and labels disagree");
  if (k < 1 || static_cast<std::size_t>(k) >= n) fail(ErrorCode::BadConfig, "k must be in [1, n)");
  double total = 0.0;
  std::vector<std::pair<double, std::size_t>> d(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double dx = points[2 * i] - points[2 * j];
      const double dy = points[2 * i + 1] - points[2 * j + 1];
      d[j] = {j == i ? std::numeric_limits<double>::infinity() : dx * dx + dy * dy, j};
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    int same = 0;
    for (int m = 0; m < k; ++m) same += labels[d[m].second] == labels[i];
    total += static_cast<double>(same) / k;
  }
  return total / static_cast<double>(n);
}

std::string_view palette_color(std::size_t index) {
  static constexpr std::string_view kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
                                                  "#bcbd22", "#17becf"};
  return kPalette[index % std::size(kPalette)];
}

std::string scatter_csv(std::span<const double> points, std::span<const FrameRef> rows,
                        const std::string& comment) {
  if (points.size() != 2 * rows.size()) fail(ErrorCode::ShapeMismatch, "points and rows disagree");
  std::string out = "# " + comment + "\nx,y,lang,utt,frame\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += fmt("%.6f", points[2 * i]) + "," + fmt("%.6f", points[2 * i + 1]) + "," + rows[i].language +
           "," + rows[i].utterance + "," + std::to_string(rows[i].frame) + "\n";
  }
  return out;
}

std::string scatter_svg(std::span<const double> points, std::span<const FrameRef> rows,
                        std::span<const std::string> languages) {
  if (points.size() != 2 * rows.size()) fail(ErrorCode::ShapeMismatch, "points and rows disagree");
  std::vector<std::string> legend(languages.begin(), languages.end());
  if (legend.empty()) {
    std::set<std::string> seen;
    for (const auto& r : rows) seen.insert(r.language);
    legend.assign(seen.begin(), seen.end());
  }
  std::map<std::string, std::size_t> color_of;
  for (const auto& l : legend) color_of.emplace(l, color_of.size());

  constexpr double H = 480, M = 20, plot_w = 480;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (!rows.empty()) {
    x0 = x1 = points[0];
    y0 = y1 = points[1];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      x0 = std::min(x0, points[2 * i]);
      x1 = std::max(x1, points[2 * i]);
      y0 = std::min(y0, points[2 * i + 1]);
      y1 = std::max(y1, points[2 * i + 1]);
    }
  }
  const double sx = x1 > x0 ? (plot_w - 2 * M) / (x1 - x0) : 0.0;
  const double sy = y1 > y0 ? (H - 2 * M) / (y1 - y0) : 0.0;

  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
                    "viewBox=\"0 0 640 480\">\n";
  out += "<rect x=\"0\" y=\"0\" width=\"640\" height=\"480\" style=\"fill:#ffffff\"/>\n";
  out += "<g>\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto it = color_of.find(rows[i].language);
    if (it == color_of.end()) it = color_of.emplace(rows[i].language, color_of.size()).first;
    const double cx = sx > 0 ? M + (points[2 * i] - x0) * sx : plot_w / 2;
    const double cy = sy > 0 ? H - M - (points[2 * i + 1] - y0) * sy : H / 2;
    out += "<circle cx=\"" + fmt("%.2f", cx) + "\" cy=\"" + fmt("%.2f", cy) +
           "\" r=\"2\" style=\"fill:" + std::string(palette_color(it->second)) +
           ";fill-opacity:0.7\"/>\n";
  }
  out += "</g>\n<g style=\"font-family:sans-serif;font-size:12px\">\n";
  for (std::size_t i = 0; i < legend.size(); ++i) {
    const double y = M + 20.0 * static_cast<double>(i);
    out += "<rect x=\"" + fmt("%.0f", plot_w + M) + "\" y=\"" + fmt("%.0f", y) +
           "\" width=\"10\" height=\"10\" style=\"fill:" + std::string(palette_color(i)) + "\"/>\n";
    out += "<text x=\"" + fmt("%.0f", plot_w + M + 16) + "\" y=\"" + fmt("%.0f", y + 10) + "\">" +
           legend[i] + "</text>\n";
  }
  out += "</g>\n</svg>\n";
  return out;
}

void emit_scatter(std::span<const double> points, std::span<const FrameRef> rows,
                  std::span<const std::string> languages, const std::string& comment,
                  const std::filesystem::path& csv_path, const std::filesystem::path& svg_path) {
  const std::string csv = scatter_csv(points, rows, comment);
  const std::string svg = scatter_svg(points, rows, languages);
  io::write_file(csv_path, csv);
  io::write_file(svg_path, svg);
}

namespace {
constexpr std::string_view kEmbMagic = "IPAE";
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  io::BinaryWriter w;
  w.bytes(kEmbMagic);
  w.u32(static_cast<std::uint32_t>(set.dim));
  w.u64(set.seed);
  w.u32(static_cast<std::uint32_t>(set.rows.size()));
  for (const auto& r : set.rows) {
    w.string(r.language);
    w.string(r.utterance);
    w.u32(static_cast<std::uint32_t>(r.frame));
  }
  for (float v : set.data) w.f32(v);
  io::write_file(path, w.data());
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  io::BinaryReader r(bytes);
  if (r.remaining() < kEmbMagic.size() || r.bytes(kEmbMagic.size()) != kEmbMagic) {
    fail(ErrorCode::BadMagic, path.string() + " is not an embedding file");
  }
  EmbeddingSet set;
  set.dim = static_cast<int>(r.u32());
  set.seed = r.u64();
  const std::uint32_t n = r.u32();
  if (static_cast<std::uint64_t>(n) * 12 > r.remaining()) fail(ErrorCode::IoError, "embedding file is corrupt");
  for (std::uint32_t i = 0; i < n; ++i) {
    FrameRef f;
    f.language = r.string();
    f.utterance = r.string();
    f.frame = static_cast<int>(r.u32());
    set.rows.push_back(std::move(f));
  }
  const std::uint64_t count = static_cast<std::uint64_t>(n) * set.dim;
  if (count * 4 != r.remaining()) fail(ErrorCode::IoError, "embedding file size disagrees with its header");
  set.data.resize(count);
  for (auto& v : set.data) v = r.f32();
  return set;
}

}  // namespace ipat::viz
