#include "mmr/service.hpp"

#include <fmt/format.h>
#include <httplib.h>
#include <openssl/evp.h>

#include <nlohmann/json.hpp>

#include "mmr/tensor_file.hpp"

namespace mmr {

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), int(bytes.size()));
  out.resize(std::size_t(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  std::string clean;
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) clean += ch;
  if (clean.size() % 4 != 0) throw QueryError("base64 payload length is not a multiple of 4");
  std::string out(3 * clean.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(clean.data()), int(clean.size()));
  if (n < 0) throw QueryError("malformed base64 payload");
  std::size_t pad = 0;
  if (!clean.empty() && clean.back() == '=') ++pad;
  if (clean.size() > 1 && clean[clean.size() - 2] == '=') ++pad;
  out.resize(std::size_t(n) - pad);
  return out;
}

RetrievalService::RetrievalService(MultiModalModel model, ParamStore<float> params, std::string config_hash,
                                   GalleryIndex index)
    : model_(std::move(model)), params_(std::move(params)), index_(std::move(index)) {
  if (index_.config_hash() != config_hash) {
    throw ConfigError(fmt::format("index was built with config {}, checkpoint has {}", index_.config_hash(), config_hash));
  }
  if (index_.dim() != model_.config().dim) throw ConfigError("index dim differs from the model dim");
}

std::string RetrievalService::answer(Modality m, const Tensorf& features, std::size_t k) const {
  const auto query = encode_sequences(model_, params_, m, {&features}, 1);
  const auto r = retrieve(query.front(), index_, k);
  nlohmann::ordered_json j;
  j["modality"] = std::string(to_string(m));
  j["k"] = k;
  j["results"] = nlohmann::ordered_json::array();
  for (const auto& c : r.candidates) j["results"].push_back({{"id", c.id}, {"score", c.score}});
  return j.dump();
}

std::string RetrievalService::handle(const std::string& body) const {
  const auto req = nlohmann::json::parse(body, nullptr, false);
  if (req.is_discarded() || !req.is_object()) throw QueryError("request body is not a JSON object");
  if (!req.contains("modality") || !req.contains("k")) throw QueryError("request needs 'modality' and 'k'");
  const Modality m = parse_modality(req.at("modality").get<std::string>());
  const auto k = req.at("k").get<long long>();
  if (k < 1) throw QueryError("k must be at least 1");
  Tensorf features;
  if (req.contains("tensor_b64")) {
    features = decode_tensor(base64_decode(req.at("tensor_b64").get<std::string>()));
  } else if (req.contains("path")) {
    features = read_tensor_file(req.at("path").get<std::string>());
  } else {
    throw QueryError("request needs 'tensor_b64' or 'path'");
  }
  return answer(m, features, std::size_t(k));
}

std::string RetrievalService::health() const {
  return nlohmann::ordered_json{{"size", index_.size()}, {"config_hash", index_.config_hash()}}.dump();
}

void RetrievalService::serve(const std::string& host, int port) const {
  httplib::Server server;
  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    res.set_content(health(), "application/json");
  });
  server.Post("/retrieve", [this](const httplib::Request& req, httplib::Response& res) {
    try {
      res.set_content(handle(req.body), "application/json");
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(nlohmann::json{{"error", e.what()}}.dump(), "application/json");
    }
  });
  if (!server.listen(host, port)) throw Error(fmt::format("cannot listen on {}:{}", host, port));
}

}  // namespace mmr
