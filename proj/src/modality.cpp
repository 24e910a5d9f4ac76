#include "mmr/modality.hpp"

#include <algorithm>

namespace mmr {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Motion: return "motion";
    case Modality::Text: return "text";
    case Modality::Video: return "video";
    case Modality::Audio: return "audio";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  for (Modality m : kAllModalities)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown modality: " + std::string(s));
}

std::vector<Modality> parse_modality_list(std::string_view csv) {
  std::vector<Modality> out;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t end = std::min(csv.find(',', pos), csv.size());
    const auto tok = csv.substr(pos, end - pos);
    if (!tok.empty()) {
      const Modality m = parse_modality(tok);
      if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    }
    pos = end + 1;
  }
  std::sort(out.begin(), out.end());
  return out;
}

template <class Real>
Tensor<Real> pack_sequences(const std::vector<const Tensor<Real>*>& seqs, Lengths* lengths) {
  if (seqs.empty()) throw ShapeError("pack_sequences: empty batch");
  const std::size_t c = seqs[0]->dims().back();
  std::size_t lmax = 0;
  for (const auto* s : seqs) {
    if (s->rank() != 2 || s->dim(1) != c) throw ShapeError("pack_sequences: expected [L, " + std::to_string(c) +
                                                           "], got " + shape_str(s->dims()));
    lmax = std::max(lmax, s->dim(0));
  }
  Tensor<Real> out({seqs.size(), lmax, c});
  if (lengths) lengths->clear();
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::copy(seqs[i]->data().begin(), seqs[i]->data().end(), out.ptr() + i * lmax * c);
    if (lengths) lengths->push_back(seqs[i]->dim(0));
  }
  return out;
}

template Tensor<float> pack_sequences(const std::vector<const Tensor<float>*>&, Lengths*);
template Tensor<double> pack_sequences(const std::vector<const Tensor<double>*>&, Lengths*);

}  // namespace mmr
