#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "mmr/retrieval.hpp"

namespace mmr {

std::string base64_encode(std::string_view bytes);
/// Throws QueryError on malformed input.
std::string base64_decode(std::string_view text);

/// Answers retrieval queries against a frozen index with the model that built it.
class RetrievalService {
 public:
  /// Throws ConfigError if the index was built under a different config hash.
  RetrievalService(MultiModalModel model, ParamStore<float> params, std::string config_hash, GalleryIndex index);

  /// Encodes raw query features of modality `m` and ranks the gallery; returns the response JSON.
  std::string answer(Modality m, const Tensorf& features, std::size_t k) const;
  /// Request body: {"modality": "...", "k": n, "tensor_b64": "..."} or {..., "path": "..."}.
  std::string handle(const std::string& body) const;
  std::string health() const;

  /// Blocks serving POST /retrieve and GET /health.
  void serve(const std::string& host, int port) const;

  const GalleryIndex& index() const noexcept { return index_; }

 private:
  MultiModalModel model_;
  ParamStore<float> params_;
  GalleryIndex index_;
};

}  // namespace mmr
