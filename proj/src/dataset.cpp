#include "mmr/dataset.hpp"

#include <Eigen/Dense>
#include <fmt/format.h>

#include <fstream>
#include <nlohmann/json.hpp>
#include <set>

#include "mmr/tensor_file.hpp"

namespace mmr {

using json = nlohmann::ordered_json;

std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

const Tensorf& PairedSample::get(Modality m) const {
  const auto& f = features[std::size_t(m)];
  if (!f) throw DataError("sample " + id + " has no " + std::string(to_string(m)) + " features");
  return *f;
}

std::string manifest_line(const ManifestRecord& r) {
  json j;
  j["id"] = r.id;
  j["split"] = std::string(to_string(r.split));
  for (Modality m : kAllModalities)
    if (r.path(m)) j[std::string(to_string(m))] = *r.path(m);
  return j.dump();
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::string text;
  for (const auto& r : m.records) text += manifest_line(r) + '\n';
  write_file_atomic(path, text);
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = fmt::format("{}:{}", path.string(), lineno);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + ": malformed record: " + e.what());
    }
    ManifestRecord r;
    if (!j.contains("id") || !j["id"].is_string()) throw DataError(where + ": record has no string id");
    r.id = j["id"].get<std::string>();
    if (!seen.insert(r.id).second) throw DataError(where + ": duplicate id '" + r.id + "'");
    const std::string split = j.value("split", "train");
    if (split == "train") {
      r.split = Split::Train;
    } else if (split == "test") {
      r.split = Split::Test;
    } else {
      throw DataError(where + ": unknown split '" + split + "'");
    }
    for (Modality mod : kAllModalities) {
      const std::string key(to_string(mod));
      if (!j.contains(key)) continue;
      const auto rel = j[key].get<std::string>();
      if (!std::filesystem::exists(m.root / rel)) {
        throw DataError(where + ": sample '" + r.id + "' references missing file " + rel);
      }
      r.paths[std::size_t(mod)] = rel;
    }
    if (!r.path(Modality::Motion)) throw DataError(where + ": sample '" + r.id + "' has no motion path");
    m.records.push_back(std::move(r));
  }
  return m;
}

std::vector<PairedSample> load_samples(const DatasetManifest& m) {
  std::vector<PairedSample> out;
  out.reserve(m.records.size());
  for (const auto& r : m.records) {
    PairedSample s{r.id, r.split, {}};
    for (Modality mod : kAllModalities) {
      if (!r.path(mod)) continue;
      Tensorf t = read_tensor_file(m.root / *r.path(mod));
      if (t.rank() != 2 || t.dim(0) == 0) {
        throw DataError("sample '" + r.id + "': " + std::string(to_string(mod)) + " tensor must be [L>=1, C], got " +
                        shape_str(t.dims()));
      }
      s.features[std::size_t(mod)] = std::move(t);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::string synthetic_config_json(const SyntheticConfig& c) {
  json j;
  j["n"] = c.n;
  j["n_test"] = c.n_test;
  std::vector<std::string> mods;
  for (Modality m : c.modalities) mods.emplace_back(to_string(m));
  j["modalities"] = mods;
  j["latent_dim"] = c.latent_dim;
  j["segments"] = c.segments;
  j["motion_frames"] = c.motion_frames;
  j["pose_dim"] = c.pose_dim;
  j["parts"] = c.parts;
  j["text_len"] = c.text_len;
  j["text_dim"] = c.text_dim;
  j["video_len"] = c.video_len;
  j["video_dim"] = c.video_dim;
  j["audio_min_len"] = c.audio_min_len;
  j["audio_max_len"] = c.audio_max_len;
  j["audio_dim"] = c.audio_dim;
  j["noise"] = c.noise;
  j["seed"] = c.seed;
  return j.dump(2);
}

SyntheticConfig synthetic_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  SyntheticConfig c;
  c.n = j.value("n", c.n);
  c.n_test = j.value("n_test", c.n_test);
  if (j.contains("modalities")) {
    c.modalities.clear();
    for (const auto& s : j["modalities"]) c.modalities.push_back(parse_modality(s.get<std::string>()));
  }
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.segments = j.value("segments", c.segments);
  c.motion_frames = j.value("motion_frames", c.motion_frames);
  c.pose_dim = j.value("pose_dim", c.pose_dim);
  c.parts = j.value("parts", c.parts);
  c.text_len = j.value("text_len", c.text_len);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.video_len = j.value("video_len", c.video_len);
  c.video_dim = j.value("video_dim", c.video_dim);
  c.audio_min_len = j.value("audio_min_len", c.audio_min_len);
  c.audio_max_len = j.value("audio_max_len", c.audio_max_len);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.noise = j.value("noise", c.noise);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

void validate(const SyntheticConfig& c) {
  if (c.n < 2) throw ConfigError("synthetic dataset needs n >= 2");
  if (c.noise < 0) throw ConfigError("noise sigma must be >= 0");
  if (c.n_test >= c.n) throw ConfigError("n_test must be smaller than n");
  if (c.segments == 0 || c.latent_dim % c.segments != 0) throw ConfigError("segments must divide latent_dim");
  if (c.parts == 0 || c.pose_dim % c.parts != 0) throw ConfigError("parts must divide pose_dim");
  if (c.audio_min_len == 0 || c.audio_min_len > c.audio_max_len) throw ConfigError("bad audio length range");
  if (c.motion_frames == 0 || c.text_len == 0 || c.video_len == 0) throw ConfigError("lengths must be positive");
}

}  // namespace

SyntheticRenderer::SyntheticRenderer(const SyntheticConfig& cfg) : cfg_(cfg) {
  validate(cfg_);
  seg_dim_ = cfg_.latent_dim / cfg_.segments;
  Rng rng(cfg_.seed * 0x9E3779B97F4A7C15ULL + 0x5EED);
  for (Modality m : kAllModalities) {
    const std::size_t parts = m == Modality::Motion ? cfg_.parts : 1;
    const std::size_t rows = m == Modality::Motion ? cfg_.pose_dim / cfg_.parts : feature_dim(m);
    if (rows < seg_dim_) {
      throw ConfigError(fmt::format("{} feature width {} cannot carry a {}-dim latent segment", to_string(m), rows,
                                    seg_dim_));
    }
    auto& maps = maps_[std::size_t(m)];
    maps.assign(parts, std::vector<double>(rows * seg_dim_));
    const double sd = 1.0 / std::sqrt(double(seg_dim_));
    for (auto& map : maps)
      for (auto& v : map) v = rng.normal(0.0, sd);
  }
}

std::size_t SyntheticRenderer::feature_dim(Modality m) const {
  switch (m) {
    case Modality::Motion: return cfg_.pose_dim;
    case Modality::Text: return cfg_.text_dim;
    case Modality::Video: return cfg_.video_dim;
    case Modality::Audio: return cfg_.audio_dim;
  }
  return 0;
}

std::size_t SyntheticRenderer::segment_of(std::size_t t, std::size_t length) const {
  return t * cfg_.segments / length;
}

Tensorf SyntheticRenderer::render(Modality m, const std::vector<double>& latent, std::size_t length, Rng& noise) const {
  if (latent.size() != cfg_.latent_dim) throw ShapeError("latent has wrong size");
  const auto& maps = maps_[std::size_t(m)];
  const std::size_t d = feature_dim(m);
  const std::size_t rows = d / maps.size();
  Tensorf out({length, d});
  for (std::size_t t = 0; t < length; ++t)
    for (std::size_t k = 0; k < maps.size(); ++k) {
      const std::size_t seg = (k + segment_of(t, length)) % cfg_.segments;
      const double* z = latent.data() + seg * seg_dim_;
      for (std::size_t r = 0; r < rows; ++r) {
        double v = 0;
        for (std::size_t q = 0; q < seg_dim_; ++q) v += maps[k][r * seg_dim_ + q] * z[q];
        if (cfg_.noise > 0) v += noise.normal(0.0, cfg_.noise);
        out[t * d + k * rows + r] = float(v);
      }
    }
  return out;
}

std::vector<double> SyntheticRenderer::recover_latent(Modality m, const Tensorf& seq) const {
  const auto& maps = maps_[std::size_t(m)];
  const std::size_t d = feature_dim(m);
  if (seq.rank() != 2 || seq.dim(1) != d) throw ShapeError("recover_latent: unexpected dims " + shape_str(seq.dims()));
  const std::size_t rows = d / maps.size();
  const std::size_t length = seq.dim(0);
  std::vector<Eigen::MatrixXd> solvers;
  std::vector<double> sums(cfg_.latent_dim, 0.0);
  std::vector<std::size_t> counts(cfg_.segments, 0);
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> a(
        maps[k].data(), Eigen::Index(rows), Eigen::Index(seg_dim_));
    const Eigen::MatrixXd pinv = a.completeOrthogonalDecomposition().pseudoInverse();
    for (std::size_t t = 0; t < length; ++t) {
      Eigen::VectorXd y(rows);
      for (std::size_t r = 0; r < rows; ++r) y[Eigen::Index(r)] = seq[t * d + k * rows + r];
      const Eigen::VectorXd z = pinv * y;
      const std::size_t seg = (k + segment_of(t, length)) % cfg_.segments;
      for (std::size_t q = 0; q < seg_dim_; ++q) sums[seg * seg_dim_ + q] += z[Eigen::Index(q)];
      ++counts[seg];
    }
  }
  for (std::size_t s = 0; s < cfg_.segments; ++s)
    for (std::size_t q = 0; q < seg_dim_; ++q)
      if (counts[s]) sums[s * seg_dim_ + q] /= double(counts[s]);
  return sums;
}

DatasetManifest generate_synthetic_dataset(const SyntheticConfig& cfg, const std::filesystem::path& out) {
  const SyntheticRenderer renderer(cfg);
  if (std::find(cfg.modalities.begin(), cfg.modalities.end(), Modality::Motion) == cfg.modalities.end()) {
    throw ConfigError("synthetic dataset must include motion");
  }
  std::filesystem::create_directories(out);
  Rng rng(cfg.seed);
  DatasetManifest manifest;
  manifest.root = out;
  const std::size_t n_train = cfg.n - cfg.n_test;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    ManifestRecord rec;
    rec.id = fmt::format("s{:05d}", i);
    rec.split = i < n_train ? Split::Train : Split::Test;
    std::vector<double> z(cfg.latent_dim);
    for (auto& v : z) v = rng.normal();
    for (Modality m : kAllModalities) {
      if (std::find(cfg.modalities.begin(), cfg.modalities.end(), m) == cfg.modalities.end()) continue;
      std::size_t len = 0;
      switch (m) {
        case Modality::Motion: len = cfg.motion_frames; break;
        case Modality::Text: len = cfg.text_len; break;
        case Modality::Video: len = cfg.video_len; break;
        case Modality::Audio: len = cfg.audio_min_len + rng.index(cfg.audio_max_len - cfg.audio_min_len + 1); break;
      }
      const std::string rel = fmt::format("{}/{}.mmrt", to_string(m), rec.id);
      write_tensor_file(out / rel, renderer.render(m, z, len, rng));
      rec.paths[std::size_t(m)] = rel;
    }
    manifest.records.push_back(std::move(rec));
  }
  write_file_atomic(out / "synthetic.json", synthetic_config_json(cfg) + "\n");
  write_manifest(out / "manifest.jsonl", manifest);
  return manifest;
}

}  // namespace mmr
