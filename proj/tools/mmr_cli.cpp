#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>

#include "mmr/config.hpp"
#include "mmr/dataset.hpp"
#include "mmr/eval.hpp"
#include "mmr/gradcheck.hpp"
#include "mmr/parallel.hpp"
#include "mmr/retrieval.hpp"
#include "mmr/service.hpp"
#include "mmr/tensor_file.hpp"
#include "mmr/trainer.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace mmr;

namespace {

struct ConfigFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::size_t> epochs, batch, dim;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> modalities, profile;
  std::string batch_key = "train.batch";
  std::string default_profile = "full";

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON config file");
    cmd->add_option("--set", sets, "Override a config key, KEY=VALUE (dotted key)");
    cmd->add_option("--profile", profile, "full (default) or desk");
    cmd->add_option("--epochs", epochs);
    cmd->add_option("--batch", batch);
    cmd->add_option("--dim", dim, "Latent dimension C");
    cmd->add_option("--seed", seed);
    cmd->add_option("--modalities", modalities, "Comma-separated modality set");
  }

  Json resolve() const {
    ConfigLayers layers;
    layers.default_profile = default_profile;
    if (!config_file.empty()) layers.file = config_file;
    layers.env = mmr_environment(environ);
    if (profile) layers.flags.emplace_back("profile", *profile);
    if (epochs) layers.flags.emplace_back("train.epochs", std::to_string(*epochs));
    if (batch) layers.flags.emplace_back(batch_key, std::to_string(*batch));
    if (dim) layers.flags.emplace_back("train.model.dim", std::to_string(*dim));
    if (seed) layers.flags.emplace_back("train.seed", std::to_string(*seed));
    if (modalities) {
      Json list = Json::array();
      for (auto m : parse_modality_list(*modalities)) list.push_back(std::string(to_string(m)));
      layers.flags.emplace_back("train.model.modalities", list.dump());
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got " + s);
      layers.flags.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    return resolve_run_config(layers);
  }
};

/// Exclusive lock file held for the lifetime of the object.
class LockFile {
 public:
  explicit LockFile(fs::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    std::FILE* f = std::fopen(path_.c_str(), "wx");
    if (!f) throw Error("output is locked by another run (remove " + path_.string() + " if stale)");
    std::fclose(f);
  }
  ~LockFile() { fs::remove(path_); }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  fs::path path_;
};

std::vector<PairedSample> load_dataset(const fs::path& dir) {
  const fs::path manifest = fs::is_directory(dir) ? dir / "manifest.jsonl" : dir;
  return load_samples(read_manifest(manifest));
}

std::vector<const PairedSample*> select(const std::vector<PairedSample>& samples, const std::string& split) {
  std::vector<const PairedSample*> out;
  for (const auto& s : samples) {
    if (split == "all" || (split == "train" && s.split == Split::Train) || (split == "test" && s.split == Split::Test)) {
      out.push_back(&s);
    }
  }
  if (out.empty()) throw DataError("no samples in split '" + split + "'");
  return out;
}

struct Loaded {
  TrainConfig config;
  MultiModalModel model;
  ParamStore<float> params;
};

Loaded load_model(const fs::path& checkpoint) {
  auto ck = load_checkpoint(checkpoint);
  MultiModalModel model(ck.config.model);
  return {ck.config, std::move(model), std::move(ck.state.params)};
}

void print_epoch(const EpochStats& s) {
  fmt::print("epoch {:4d}  loss {:.6f}  align {:.6f}  recon {:.6f}  tau {:.4f}  lr {:.3g}\n", s.epoch, s.total,
             s.align, s.recon, s.tau, s.lr);
  std::fflush(stdout);
}

struct AblationVariant {
  std::string axis;
  std::string name;
  std::function<void(ModelConfig&)> apply;
  Modality query = Modality::Text;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal motion retrieval: training, indexing, evaluation, and serving"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "OpenMP threads (default: MMR_THREADS or all cores)");

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "Generate a synthetic paired dataset");
  SyntheticConfig sc;
  std::string synth_out;
  std::string synth_mods = "motion,text,video,audio";
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n", sc.n, "Number of samples");
  synth->add_option("--n-test", sc.n_test, "Samples assigned to the test split (the last ones)");
  synth->add_option("--seed", sc.seed);
  synth->add_option("--noise", sc.noise, "Gaussian noise sigma");
  synth->add_option("--modalities", synth_mods);
  synth->add_option("--latent-dim", sc.latent_dim);
  synth->add_option("--frames", sc.motion_frames, "Motion frames per sample");

  // train
  auto* train = app.add_subcommand("train", "Train a model and write checkpoints");
  ConfigFlags train_cfg;
  train_cfg.attach(train);
  std::string train_data, train_out;
  bool resume = false;
  train->add_option("--data", train_data, "Dataset directory or manifest")->required();
  train->add_option("--out", train_out, "Checkpoint directory")->required();
  train->add_flag("--resume", resume, "Continue from the checkpoint in --out");

  // encode
  auto* encode = app.add_subcommand("encode", "Encode one modality of a dataset to TensorFiles");
  std::string enc_ckpt, enc_data, enc_out, enc_mod = "motion", enc_split = "all";
  encode->add_option("--checkpoint", enc_ckpt)->required();
  encode->add_option("--data", enc_data)->required();
  encode->add_option("--modality", enc_mod);
  encode->add_option("--split", enc_split, "train, test, or all");
  encode->add_option("--out", enc_out)->required();

  // index build
  auto* index = app.add_subcommand("index", "Gallery index operations");
  index->require_subcommand(1);
  auto* index_build = index->add_subcommand("build", "Encode motions and write a gallery index");
  std::string idx_ckpt, idx_data, idx_out, idx_split = "test";
  index_build->add_option("--checkpoint", idx_ckpt)->required();
  index_build->add_option("--data", idx_data)->required();
  index_build->add_option("--split", idx_split, "train, test, or all");
  index_build->add_option("--out", idx_out)->required();

  // retrieve
  auto* retr = app.add_subcommand("retrieve", "Rank the gallery for one query");
  std::string r_ckpt, r_index, r_mod = "text", r_query;
  std::size_t r_k = 5;
  retr->add_option("--checkpoint", r_ckpt)->required();
  retr->add_option("--index", r_index)->required();
  retr->add_option("--modality", r_mod);
  retr->add_option("--query", r_query, "TensorFile with the query features")->required();
  retr->add_option("--k", r_k);

  // eval
  auto* ev = app.add_subcommand("eval", "Retrieval metrics under the evaluation protocols");
  ConfigFlags ev_cfg;
  ev_cfg.batch_key = "eval.batch";
  ev_cfg.attach(ev);
  std::string ev_ckpt, ev_data, ev_scores, ev_gallery_sim, ev_out, ev_split = "test";
  std::string ev_protocol, ev_query = "text", ev_gallery = "motion";
  std::optional<double> ev_threshold;
  ev->add_option("--checkpoint", ev_ckpt);
  ev->add_option("--data", ev_data);
  ev->add_option("--split", ev_split);
  ev->add_option("--scores", ev_scores, "TensorFile score matrix [Q, N] with identity ground truth");
  ev->add_option("--gallery-similarity", ev_gallery_sim, "TensorFile [N, N] for the threshold protocol");
  ev->add_option("--protocol", ev_protocol, "all, all-threshold, small-batches, or every");
  ev->add_option("--threshold", ev_threshold);
  ev->add_option("--query", ev_query);
  ev->add_option("--gallery", ev_gallery);
  ev->add_option("--out", ev_out, "Directory for report.json and report.txt");

  // serve
  auto* serve = app.add_subcommand("serve", "HTTP retrieval service");
  std::string s_ckpt, s_index, s_host = "127.0.0.1";
  int s_port = 8080;
  serve->add_option("--checkpoint", s_ckpt)->required();
  serve->add_option("--index", s_index)->required();
  serve->add_option("--host", s_host);
  serve->add_option("--port", s_port);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient verification suite");
  std::uint64_t gc_seed = 1;
  gc->add_option("--seed", gc_seed);

  // ablate
  auto* abl = app.add_subcommand("ablate", "Train and compare the ablation switches");
  ConfigFlags abl_cfg;
  abl_cfg.default_profile = "desk";
  abl_cfg.attach(abl);
  std::string abl_data, abl_out, abl_axes = "aggregation,alignment,partition,compression";
  abl->add_option("--data", abl_data)->required();
  abl->add_option("--out", abl_out)->required();
  abl->add_option("--axes", abl_axes, "Subset of aggregation,alignment,partition,compression");

  CLI11_PARSE(app, argc, argv);

  try {
    if (threads > 0) {
      par::set_threads(threads);
    } else if (const char* t = std::getenv("MMR_THREADS")) {
      par::set_threads(std::stoi(t));
    }

    if (synth->parsed()) {
      sc.modalities = parse_modality_list(synth_mods);
      const auto m = generate_synthetic_dataset(sc, synth_out);
      fmt::print("wrote {} samples to {}\n", m.records.size(), synth_out);
      return 0;
    }

    if (train->parsed()) {
      const fs::path out(train_out);
      Json echo = train_cfg.resolve();
      TrainConfig cfg = train_config_of(echo);
      LockFile lock(out.string() + ".lock");
      const auto samples = load_dataset(train_data);
      TrainState state;
      if (resume) {
        auto ck = load_checkpoint(out);
        cfg = ck.config;
        if (train_cfg.epochs) cfg.epochs = *train_cfg.epochs;
        state = std::move(ck.state);
        echo["train"] = Json::parse(train_config_json(cfg));
        echo["profile"] = "checkpoint";
        fmt::print("resuming at epoch {}\n", state.epoch);
      } else {
        fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
      }
      Trainer trainer(cfg, samples);
      if (!resume) state = trainer.initial_state();
      for (const auto& s : state.history) print_epoch(s);
      trainer.run(state, std::nullopt, [&](const TrainState& st) {
        print_epoch(st.history.back());
        save_checkpoint(out, cfg, st);
      });
      if (state.history.empty()) save_checkpoint(out, cfg, state);
      echo_config(out, echo);
      fmt::print("checkpoint: {} (config {})\n", out.string(), config_hash(cfg));
      return 0;
    }

    if (encode->parsed()) {
      auto loaded = load_model(enc_ckpt);
      const auto samples = load_dataset(enc_data);
      const auto chosen = select(samples, enc_split);
      const Modality m = parse_modality(enc_mod);
      std::vector<const Tensorf*> inputs;
      for (const auto* s : chosen) inputs.push_back(&s->get(m));
      const auto enc = encode_sequences(loaded.model, loaded.params, m, inputs);
      const fs::path out(enc_out);
      std::string listing;
      for (std::size_t i = 0; i < chosen.size(); ++i) {
        write_tensor_file(out / "tokens" / (chosen[i]->id + ".mmrt"), enc[i].tokens);
        write_tensor_file(out / "weights" / (chosen[i]->id + ".mmrt"),
                          Tensorf({enc[i].weights.size()}, enc[i].weights));
        listing += Json{{"id", chosen[i]->id}, {"modality", enc_mod}, {"length", enc[i].tokens.dim(0)}}.dump() + "\n";
      }
      write_file_atomic(out / "encoded.jsonl", listing);
      Json echo = default_run_config("full");
      echo["train"] = Json::parse(train_config_json(loaded.config));
      echo["profile"] = "checkpoint";
      echo_config(out, echo);
      fmt::print("encoded {} {} sequences to {}\n", chosen.size(), enc_mod, enc_out);
      return 0;
    }

    if (index_build->parsed()) {
      auto loaded = load_model(idx_ckpt);
      const auto samples = load_dataset(idx_data);
      const auto chosen = select(samples, idx_split);
      std::vector<const Tensorf*> inputs;
      for (const auto* s : chosen) inputs.push_back(&s->get(Modality::Motion));
      const auto enc = encode_sequences(loaded.model, loaded.params, Modality::Motion, inputs);
      GalleryIndex idx(loaded.model.config().dim, loaded.model.config().aggregation, config_hash(loaded.config));
      for (std::size_t i = 0; i < chosen.size(); ++i) idx.add(chosen[i]->id, enc[i]);
      idx.save(idx_out);
      fmt::print("index of {} motions written to {}\n", idx.size(), idx_out);
      return 0;
    }

    if (retr->parsed()) {
      auto loaded = load_model(r_ckpt);
      RetrievalService svc(std::move(loaded.model), std::move(loaded.params), config_hash(loaded.config),
                           GalleryIndex::load(r_index));
      fmt::print("{}\n", svc.answer(parse_modality(r_mod), read_tensor_file(r_query), r_k));
      return 0;
    }

    if (serve->parsed()) {
      auto loaded = load_model(s_ckpt);
      RetrievalService svc(std::move(loaded.model), std::move(loaded.params), config_hash(loaded.config),
                           GalleryIndex::load(s_index));
      fmt::print("serving {} entries on {}:{}\n", svc.index().size(), s_host, s_port);
      std::fflush(stdout);
      svc.serve(s_host, s_port);
      return 0;
    }

    if (ev->parsed()) {
      auto resolved = ev_cfg.resolve();
      if (ev_threshold) resolved["eval"]["threshold"] = *ev_threshold;
      std::vector<Protocol> protocols;
      if (ev_protocol.empty() || ev_protocol == "every") {
        protocols = {Protocol::All, Protocol::AllWithThreshold, Protocol::SmallBatches};
        if (!ev_scores.empty() && ev_gallery_sim.empty()) protocols = {Protocol::All, Protocol::SmallBatches};
      } else {
        protocols = {parse_protocol(ev_protocol)};
      }
      std::vector<EvalReport> reports;
      for (auto proto : protocols) {
        auto pc = protocol_config_of(resolved);
        pc.protocol = proto;
        if (!ev_scores.empty()) {
          const auto scores = read_tensor_file(ev_scores);
          if (scores.rank() != 2) throw EvalError("score matrix must be [Q, N]");
          std::vector<std::optional<std::size_t>> gt(scores.dim(0));
          for (std::size_t i = 0; i < gt.size(); ++i)
            if (i < scores.dim(1)) gt[i] = i;
          std::optional<Tensorf> gsim;
          if (!ev_gallery_sim.empty()) gsim = read_tensor_file(ev_gallery_sim);
          auto r = evaluate_scores(scores, gt, pc, gsim ? &*gsim : nullptr);
          r.direction = "query->gallery";
          reports.push_back(r);
        } else {
          if (ev_ckpt.empty() || ev_data.empty()) throw ConfigError("eval needs --scores or --checkpoint and --data");
          auto loaded = load_model(ev_ckpt);
          const auto samples = load_dataset(ev_data);
          auto rs = evaluate_model(loaded.model, loaded.params, select(samples, ev_split), parse_modality(ev_query),
                                   parse_modality(ev_gallery), pc);
          reports.insert(reports.end(), rs.begin(), rs.end());
        }
      }
      fmt::print("{}", report_table(reports));
      if (!ev_out.empty()) {
        write_file_atomic(fs::path(ev_out) / "report.json", report_json(reports) + "\n");
        write_file_atomic(fs::path(ev_out) / "report.txt", report_table(reports));
        echo_config(ev_out, resolved);
      }
      return 0;
    }

    if (gc->parsed()) {
      const auto results = run_gradient_suite(gc_seed);
      bool ok = true;
      for (const auto& r : results) {
        fmt::print("{:<32} rel_err {:.3e}  coords {:5d}  {}\n", r.name, r.rel_error, r.coordinates,
                   r.passed ? "ok" : "FAIL");
        ok = ok && r.passed;
      }
      fmt::print("{} of {} checks passed\n",
                 std::count_if(results.begin(), results.end(), [](const auto& r) { return r.passed; }), results.size());
      return ok ? 0 : 1;
    }

    if (abl->parsed()) {
      const auto resolved = abl_cfg.resolve();
      const TrainConfig base = train_config_of(resolved);
      const auto samples = load_dataset(abl_data);
      std::vector<const PairedSample*> test;
      for (const auto& s : samples)
        if (s.split == Split::Test) test.push_back(&s);
      if (test.empty()) throw DataError("ablation needs test-split samples");
      const std::vector<AblationVariant> variants{
          {"aggregation", "sequence (max)", [](ModelConfig&) {}},
          {"aggregation", "sequence (mean)", [](ModelConfig& m) { m.aggregation = Aggregation::Mean; }},
          {"alignment", "global only", [](ModelConfig& m) { m.mode = AlignmentMode::Global; }},
          {"alignment", "global + sequence (max)", [](ModelConfig& m) { m.mode = AlignmentMode::GlobalPlusSequence; }},
          {"partition", "with body partition", [](ModelConfig&) {}},
          {"partition", "without body partition",
           [](ModelConfig& m) { m.partition = BodyPartition::whole(m.pose_dim); }},
          {"compression", "memory retrieval", [](ModelConfig&) {}, Modality::Audio},
          {"compression", "avgpool-2", [](ModelConfig& m) { m.compression = CompressionMethod::AvgPool2; }, Modality::Audio},
          {"compression", "avgpool-4", [](ModelConfig& m) { m.compression = CompressionMethod::AvgPool4; }, Modality::Audio},
          {"compression", "conv1d", [](ModelConfig& m) { m.compression = CompressionMethod::Conv1d; }, Modality::Audio},
      };
      const fs::path out(abl_out);
      fs::create_directories(out);
      echo_config(out, resolved);
      ProtocolConfig pc = protocol_config_of(resolved);
      pc.protocol = Protocol::All;
      std::string table = fmt::format("{:<12} {:<26} {:<16} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "axis", "variant",
                                      "direction", "R@1", "R@3", "R@5", "R@10", "MedR");
      Json rows = Json::array();
      for (const auto& v : variants) {
        if (abl_axes.find(v.axis) == std::string::npos) continue;
        TrainConfig cfg = base;
        v.apply(cfg.model);
        if (v.query == Modality::Audio && !cfg.model.has(Modality::Audio)) continue;
        Trainer trainer(cfg, samples);
        auto state = trainer.initial_state();
        trainer.run(state);
        const auto reports = evaluate_model(trainer.model(), state.params, test, v.query, Modality::Motion, pc);
        const auto& r = reports.front();
        table += fmt::format("{:<12} {:<26} {:<16} {:>7.2f} {:>7.2f} {:>7.2f} {:>7.2f} {:>7.2f}\n", v.axis, v.name,
                             r.direction, r.recall[0], r.recall[1], r.recall[2], r.recall[3], r.medr);
        rows.push_back({{"axis", v.axis}, {"variant", v.name}, {"report", Json::parse(report_json({r}))[0]},
                        {"final_loss", state.history.back().total}});
        fmt::print("{}", table.substr(table.rfind('\n', table.size() - 2) + 1));
        std::fflush(stdout);
      }
      write_file_atomic(out / "ablation.json", rows.dump(2) + "\n");
      write_file_atomic(out / "ablation.txt", table);
      fmt::print("\n{}", table);
      return 0;
    }
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 0;
}
