#include "permalign/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "permalign/rng.hpp"

namespace permalign {

void Dataset::validate() const {
  if (size() < 1) throw ValidationError("dataset: empty");
  if (n_classes < 2) throw ValidationError("dataset: n_classes must be >= 2");
  if (static_cast<int>(labels.size()) != size()) {
    throw ValidationError("dataset: label count != example count");
  }
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw ValidationError("dataset: label out of range");
  }
  if (!features.allFinite()) throw ValidationError("dataset: non-finite features");
}

Dataset Dataset::head(int k) const {
  if (k >= size()) return *this;
  Dataset out;
  out.features = features.topRows(k);
  out.labels.assign(labels.begin(), labels.begin() + k);
  out.n_classes = n_classes;
  out.split = split;
  return out;
}

NormStats compute_norm_stats(const Dataset& train) {
  NormStats st;
  const double n = static_cast<double>(train.features.size());
  st.mean = train.features.sum() / n;
  st.stddev = std::sqrt((train.features.array() - st.mean).square().sum() / n);
  if (st.stddev <= 0) st.stddev = 1.0;
  return st;
}

Dataset standardize(const Dataset& d, const NormStats& stats) {
  Dataset out = d;
  out.features = ((d.features.array() - stats.mean) / stats.stddev).matrix();
  return out;
}

namespace {

std::uint32_t read_be_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("idx: truncated header");
  return (static_cast<std::uint32_t>(b[0]) << 24) |
         (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

void write_be_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>((v >> 24) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>(v & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream img(images_path, std::ios::binary);
  if (!img) throw IoError("cannot read " + images_path);
  if (read_be_u32(img) != kIdxImagesMagic) {
    throw IoError("idx: bad image magic in " + images_path);
  }
  const std::uint32_t n = read_be_u32(img);
  const std::uint32_t rows = read_be_u32(img);
  const std::uint32_t cols = read_be_u32(img);

  std::ifstream lab(labels_path, std::ios::binary);
  if (!lab) throw IoError("cannot read " + labels_path);
  if (read_be_u32(lab) != kIdxLabelsMagic) {
    throw IoError("idx: bad label magic in " + labels_path);
  }
  const std::uint32_t n_lab = read_be_u32(lab);
  if (n_lab != n) {
    throw IoError("idx: image count " + std::to_string(n) + " != label count " +
                  std::to_string(n_lab));
  }

  const std::size_t d = static_cast<std::size_t>(rows) * cols;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(n) * d);
  img.read(reinterpret_cast<char*>(pixels.data()),
           static_cast<std::streamsize>(pixels.size()));
  if (!img) throw IoError("idx: truncated image payload in " + images_path);
  std::vector<std::uint8_t> raw_labels(n);
  lab.read(reinterpret_cast<char*>(raw_labels.data()), n);
  if (!lab) throw IoError("idx: truncated label payload in " + labels_path);

  Dataset ds;
  ds.features.resize(n, static_cast<Eigen::Index>(d));
  for (std::uint32_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      ds.features(i, static_cast<Eigen::Index>(j)) = pixels[i * d + j] / 255.0;
    }
  }
  ds.labels.resize(n);
  int max_label = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    ds.labels[i] = raw_labels[i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.n_classes = std::max(max_label + 1, 2);
  return ds;
}

void write_idx(const std::string& images_path, const std::string& labels_path,
               const std::vector<std::uint8_t>& pixels,
               const std::vector<std::uint8_t>& labels, int rows, int cols) {
  const std::size_t d = static_cast<std::size_t>(rows) * cols;
  if (pixels.size() != labels.size() * d) {
    throw ValidationError("write_idx: pixel/label size mismatch");
  }
  std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
  if (!img) throw IoError("cannot write " + images_path);
  write_be_u32(img, kIdxImagesMagic);
  write_be_u32(img, static_cast<std::uint32_t>(labels.size()));
  write_be_u32(img, static_cast<std::uint32_t>(rows));
  write_be_u32(img, static_cast<std::uint32_t>(cols));
  img.write(reinterpret_cast<const char*>(pixels.data()),
            static_cast<std::streamsize>(pixels.size()));
  std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
  if (!lab) throw IoError("cannot write " + labels_path);
  write_be_u32(lab, kIdxLabelsMagic);
  write_be_u32(lab, static_cast<std::uint32_t>(labels.size()));
  lab.write(reinterpret_cast<const char*>(labels.data()),
            static_cast<std::streamsize>(labels.size()));
}

namespace {

// Center layout for synth_blobs: rejection-sampled from a cube whose volume
// scales with the class count, so configurations that cannot pack fail the
// retry budget instead of silently stretching the box.
Matrix sample_centers(int classes, int d, double separation, std::uint64_t seed) {
  const double half = separation * std::pow(classes, 1.0 / d) / 2.0;
  const int max_attempts = 1000;
  SplitMix64 g(mix_seed(seed, 0x63656e74));  // "cent"
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Matrix centers(classes, d);
    for (int c = 0; c < classes; ++c) {
      for (int j = 0; j < d; ++j) {
        centers(c, j) = (g.uniform() * 2.0 - 1.0) * half;
      }
    }
    bool ok = true;
    for (int a = 0; a < classes && ok; ++a) {
      for (int b = a + 1; b < classes; ++b) {
        if ((centers.row(a) - centers.row(b)).norm() < separation) {
          ok = false;
          break;
        }
      }
    }
    if (ok) return centers;
  }
  throw ValidationError("synth_blobs: could not satisfy separation after retries");
}

}  // namespace

Dataset synth_blobs(int n, int d, int classes, double separation,
                    std::uint64_t seed, int noise_stream) {
  if (classes < 2) throw ValidationError("synth_blobs: classes must be >= 2");
  if (n < 1 || d < 1) throw ValidationError("synth_blobs: n and d must be >= 1");
  if (!(separation > 0)) {
    throw ValidationError("synth_blobs: separation must be > 0");
  }
  const Matrix centers = sample_centers(classes, d, separation, seed);
  SplitMix64 g(mix_seed(seed, 0x6e6f6973 + static_cast<std::uint64_t>(noise_stream)));
  Dataset ds;
  ds.features.resize(n, d);
  ds.labels.resize(n);
  ds.n_classes = classes;
  ds.split = noise_stream == 0 ? "train" : "test";
  for (int i = 0; i < n; ++i) {
    const int c = i % classes;
    ds.labels[i] = c;
    for (int j = 0; j < d; ++j) {
      ds.features(i, j) = centers(c, j) + g.normal();
    }
  }
  return ds;
}

namespace {

std::string query_value(const std::string& query, const std::string& key) {
  std::size_t at = 0;
  while (at < query.size()) {
    std::size_t end = query.find('&', at);
    if (end == std::string::npos) end = query.size();
    const std::string kv = query.substr(at, end - at);
    const std::size_t eq = kv.find('=');
    if (eq != std::string::npos && kv.substr(0, eq) == key) {
      return kv.substr(eq + 1);
    }
    at = end + 1;
  }
  return {};
}

}  // namespace

DatasetPair load_data_uri(const std::string& uri) {
  const std::string synth_prefix = "synth://blobs?";
  if (uri.rfind(synth_prefix, 0) == 0) {
    const std::string query = uri.substr(synth_prefix.size());
    auto require = [&](const char* key) {
      const std::string v = query_value(query, key);
      if (v.empty()) {
        throw ValidationError(std::string("data uri: missing '") + key + "' in " + uri);
      }
      return v;
    };
    const int n = std::stoi(require("n"));
    const int d = std::stoi(require("d"));
    const int classes = std::stoi(require("classes"));
    const double sep = std::stod(require("sep"));
    const std::uint64_t seed = std::stoull(require("seed"));
    const std::string n_test_s = query_value(query, "n_test");
    const int n_test = n_test_s.empty() ? std::max(1, n / 5) : std::stoi(n_test_s);
    DatasetPair pair;
    pair.train = synth_blobs(n, d, classes, sep, seed, 0);
    pair.test = synth_blobs(n_test, d, classes, sep, seed, 1);
    return pair;
  }

  namespace fs = std::filesystem;
  fs::path dir(uri);
  if (dir.is_relative()) {
    if (const char* root = std::getenv("PERMALIGN_DATA_DIR")) {
      dir = fs::path(root) / dir;
    }
  }
  DatasetPair pair;
  pair.train = load_idx((dir / "train-images-idx3-ubyte").string(),
                        (dir / "train-labels-idx1-ubyte").string());
  pair.test = load_idx((dir / "t10k-images-idx3-ubyte").string(),
                       (dir / "t10k-labels-idx1-ubyte").string());
  const int classes = std::max(pair.train.n_classes, pair.test.n_classes);
  pair.train.n_classes = classes;
  pair.test.n_classes = classes;
  const NormStats stats = compute_norm_stats(pair.train);
  pair.train = standardize(pair.train, stats);
  pair.test = standardize(pair.test, stats);
  pair.train.split = "train";
  pair.test.split = "test";
  return pair;
}

std::vector<std::vector<int>> batches(int n, int batch_size, std::uint64_t seed,
                                      int epoch) {
  if (batch_size < 1) throw ValidationError("batches: batch_size must be >= 1");
  const std::vector<int> order =
      shuffled_indices(n, mix_seed(seed, static_cast<std::uint64_t>(epoch)));
  std::vector<std::vector<int>> out;
  for (int at = 0; at < n; at += batch_size) {
    const int len = std::min(batch_size, n - at);
    out.emplace_back(order.begin() + at, order.begin() + at + len);
  }
  return out;
}

}  // namespace permalign
