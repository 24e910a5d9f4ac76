#pragma once

// Dataset manifests (one JSON object per line) and the synthetic paired-data generator.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmr/modality.hpp"
#include "mmr/nn.hpp"
#include "mmr/tensor.hpp"

namespace mmr {

enum class Split { Train, Test };

std::string_view to_string(Split s);

struct ManifestRecord {
  std::string id;
  Split split = Split::Train;
  /// Paths relative to the manifest directory; motion is required.
  std::array<std::optional<std::string>, 4> paths;

  const std::optional<std::string>& path(Modality m) const { return paths[std::size_t(m)]; }
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestRecord> records;
};

/// One sample with its loaded feature tensors ([L, C_in] each; motion is [L', D_pose]).
struct PairedSample {
  std::string id;
  Split split = Split::Train;
  std::array<std::optional<Tensorf>, 4> features;

  bool has(Modality m) const { return features[std::size_t(m)].has_value(); }
  const Tensorf& get(Modality m) const;
};

std::string manifest_line(const ManifestRecord& r);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
/// Parses and validates: ids unique, motion present, every file exists. Errors name the line.
DatasetManifest read_manifest(const std::filesystem::path& path);
/// Reads every referenced tensor; fails on the first file that does not parse.
std::vector<PairedSample> load_samples(const DatasetManifest& m);

struct SyntheticConfig {
  std::size_t n = 64;
  std::size_t n_test = 0;
  std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
  std::size_t latent_dim = 16;
  std::size_t segments = 4;
  std::size_t motion_frames = 16;
  std::size_t pose_dim = 48;
  std::size_t parts = 8;
  std::size_t text_len = 8;
  std::size_t text_dim = 32;
  std::size_t video_len = 8;
  std::size_t video_dim = 32;
  std::size_t audio_min_len = 16;
  std::size_t audio_max_len = 48;
  std::size_t audio_dim = 24;
  double noise = 0.05;
  std::uint64_t seed = 7;
};

std::string synthetic_config_json(const SyntheticConfig& cfg);
SyntheticConfig synthetic_config_from_json(const std::string& json);

/// The fixed random linear maps that turn latent segments into tokens.
/// Token t of a length-L sequence carries segment floor(t * S / L); motion part k
/// at frame t carries segment (k + floor(t * S / L)) mod S.
class SyntheticRenderer {
 public:
  explicit SyntheticRenderer(const SyntheticConfig& cfg);

  Tensorf render(Modality m, const std::vector<double>& latent, std::size_t length, Rng& noise) const;
  /// Least-squares estimate of the latent from a rendered sequence.
  std::vector<double> recover_latent(Modality m, const Tensorf& seq) const;
  std::size_t feature_dim(Modality m) const;

 private:
  std::size_t segment_of(std::size_t t, std::size_t length) const;
  SyntheticConfig cfg_;
  std::size_t seg_dim_;
  // maps_[m][part] is [feature_dim, seg_dim] row-major; non-motion modalities have one part.
  std::array<std::vector<std::vector<double>>, 4> maps_;
};

/// Writes `<out>/manifest.jsonl`, `<out>/synthetic.json`, and `<out>/<modality>/<id>.mmrt`.
DatasetManifest generate_synthetic_dataset(const SyntheticConfig& cfg, const std::filesystem::path& out);

}  // namespace mmr
