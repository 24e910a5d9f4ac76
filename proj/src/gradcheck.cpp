#include "mmr/gradcheck.hpp"

#include <cmath>

#include "mmr/alignment.hpp"
#include "mmr/audio_compressor.hpp"
#include "mmr/model.hpp"
#include "mmr/motion_encoder.hpp"
#include "mmr/seq_encoders.hpp"

namespace mmr {

namespace {

double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - n[i]) * (a[i] - n[i]);
    na += a[i] * a[i];
    nn += n[i] * n[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-6});
}

Tensord random_tensor(Shape dims, Rng& rng, double scale = 1.0) {
  Tensord t(std::move(dims));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace

GradCheckResult check_gradient(const std::string& name, const ScalarFn& f, const std::vector<Tensord>& inputs,
                               double step, double tol) {
  std::vector<double> analytic, numeric;
  {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : inputs) vars.push_back(tape.variable(t));
    auto loss = f(tape, vars);
    tape.backward(loss);
    for (const auto& v : vars) {
      const auto* g = tape.grad_if(v);
      for (std::size_t i = 0; i < v.value().size(); ++i) analytic.push_back(g ? (*g)[i] : 0.0);
    }
  }
  auto eval = [&](const std::vector<Tensord>& in) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& t : in) vars.push_back(tape.constant(t));
    return f(tape, vars).value().item();
  };
  auto work = inputs;
  for (std::size_t t = 0; t < work.size(); ++t) {
    for (std::size_t i = 0; i < work[t].size(); ++i) {
      const double orig = work[t][i];
      work[t][i] = orig + step;
      const double up = eval(work);
      work[t][i] = orig - step;
      const double down = eval(work);
      work[t][i] = orig;
      numeric.push_back((up - down) / (2 * step));
    }
  }
  GradCheckResult r{name, rel_error(analytic, numeric), analytic.size(), false};
  r.passed = r.rel_error <= tol;
  return r;
}

GradCheckResult check_param_gradient(const std::string& name, const ParamStore<double>& params,
                                     const std::function<Var<double>(const Bound<double>&)>& loss,
                                     std::size_t per_tensor, std::uint64_t seed, double step, double tol) {
  std::map<std::string, Tensord> grads;
  {
    Tape<double> tape;
    Bound<double> p(tape, params, true);
    auto l = loss(p);
    tape.backward(l);
    grads = p.gradients();
  }
  auto work = params;
  auto eval = [&] {
    Tape<double> tape;
    Bound<double> p(tape, work, false);
    return loss(p).value().item();
  };
  Rng rng(seed);
  std::vector<double> analytic, numeric;
  for (const auto& pname : work.names()) {
    auto& t = work.get(pname);
    std::vector<std::size_t> coords;
    if (t.size() <= per_tensor) {
      for (std::size_t i = 0; i < t.size(); ++i) coords.push_back(i);
    } else {
      coords = rng.sample_without_replacement(t.size(), per_tensor);
    }
    for (auto i : coords) {
      const double orig = t[i];
      t[i] = orig + step;
      const double up = eval();
      t[i] = orig - step;
      const double down = eval();
      t[i] = orig;
      numeric.push_back((up - down) / (2 * step));
      analytic.push_back(grads.at(pname)[i]);
    }
  }
  GradCheckResult r{name, rel_error(analytic, numeric), analytic.size(), false};
  r.passed = r.rel_error <= tol;
  return r;
}

namespace {

// Contracts an op output against a fixed random tensor so every output coordinate matters.
Var<double> project(Var<double> out, std::uint64_t salt) {
  Rng rng(0xC0FFEE + salt);
  return ad::sum(ad::mul(out, out.tape->constant(random_tensor(out.dims(), rng))));
}

struct OpCase {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var<double>(const std::vector<Var<double>>&)> op;
  double scale = 1.0;
};

std::vector<OpCase> op_cases() {
  using V = std::vector<Var<double>>;
  const Lengths l3{4, 2, 3};
  std::vector<OpCase> cases{
      {"matmul", {{3, 4}, {4, 5}}, [](const V& v) { return ad::matmul(v[0], v[1]); }},
      {"linear", {{2, 3, 4}, {4, 5}, {5}}, [](const V& v) { return ad::linear(v[0], v[1], std::optional(v[2])); }},
      {"add", {{3, 4}, {3, 4}}, [](const V& v) { return ad::add(v[0], v[1]); }},
      {"sub", {{3, 4}, {3, 4}}, [](const V& v) { return ad::sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](const V& v) { return ad::mul(v[0], v[1]); }},
      {"add_trailing", {{2, 3, 4}, {3, 4}}, [](const V& v) { return ad::add_trailing(v[0], v[1]); }},
      {"scale", {{3, 4}}, [](const V& v) { return ad::scale(v[0], 0.7); }},
      {"div_scalar", {{3, 4}, {}},
       [](const V& v) {
         // keep the divisor away from zero: s = 1.5 + 0.1 * s0^2
         auto s = ad::add(v[1].tape->constant(Tensord::scalar(1.5)), ad::scale(ad::mul(v[1], v[1]), 0.1));
         return ad::div_scalar(v[0], s);
       }},
      {"gelu", {{3, 5}}, [](const V& v) { return ad::gelu(v[0]); }},
      {"layer_norm", {{2, 3, 6}, {6}, {6}}, [](const V& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-5); }},
      {"softmax_axis0", {{4, 3}}, [](const V& v) { return ad::softmax(v[0], 0); }},
      {"softmax_axis1", {{3, 5, 2}}, [](const V& v) { return ad::softmax(v[0], 1); }},
      {"masked_softmax", {{3, 5}}, [](const V& v) { return ad::masked_softmax(v[0], {5, 2, 3}); }},
      {"attention", {{2, 3, 4}, {2, 5, 4}, {2, 5, 6}},
       [](const V& v) { return ad::attention(v[0], v[1], v[2], 2, {5, 3}); }},
      {"attention_shared_keys", {{3, 2, 4}, {1, 5, 4}, {1, 5, 4}},
       [](const V& v) { return ad::attention(v[0], v[1], v[2], 1); }},
      {"swap_axes12", {{2, 3, 4, 2}}, [](const V& v) { return ad::swap_axes12(v[0]); }},
      {"transpose", {{3, 4}}, [](const V& v) { return ad::transpose(v[0]); }},
      {"reshape", {{2, 6}}, [](const V& v) { return ad::reshape(v[0], {3, 4}); }},
      {"avg_pool_time", {{2, 5, 3}}, [](const V& v) { return ad::avg_pool_time(v[0], 2); }},
      {"avg_pool_time_stride4", {{2, 7, 3}}, [](const V& v) { return ad::avg_pool_time(v[0], 4); }},
      {"adaptive_avg_pool", {{2, 7, 3}}, [](const V& v) { return ad::adaptive_avg_pool(v[0], 3); }},
      {"adaptive_avg_pool_upsample", {{1, 2, 3}}, [](const V& v) { return ad::adaptive_avg_pool(v[0], 4); }},
      {"conv1d", {{2, 7, 3}, {3, 3, 4}, {4}}, [](const V& v) { return ad::conv1d(v[0], v[1], v[2], 2); }},
      {"l2_normalize", {{3, 4}}, [](const V& v) { return ad::l2_normalize(v[0]); }},
      {"concat", {{2, 3, 4}, {2, 2, 4}}, [](const V& v) { return ad::concat(v, 1); }},
      {"slice", {{2, 5, 3}}, [](const V& v) { return ad::slice(v[0], 1, 1, 3); }},
      {"index_select0", {{4, 3}}, [](const V& v) { return ad::index_select0(v[0], {2, 0, 2}); }},
      {"resize_axis_pad", {{2, 3, 4}}, [](const V& v) { return ad::resize_axis(v[0], 1, 5); }},
      {"resize_axis_truncate", {{2, 3, 4}}, [](const V& v) { return ad::resize_axis(v[0], 1, 2); }},
      {"replace_rows", {{2, 3, 4}, {4}}, [](const V& v) { return ad::replace_rows(v[0], v[1], {0, 1, 0, 0, 0, 1}); }},
      {"masked_mean", {{2, 4, 3}}, [](const V& v) { return ad::masked_mean(v[0], {4, 2}); }},
      {"diagonal_nll", {{4, 4}}, [](const V& v) { return ad::diagonal_nll(v[0]); }},
      {"sum", {{3, 4}}, [](const V& v) { return ad::sum(v[0]); }},
      {"mean", {{3, 4}}, [](const V& v) { return ad::mean(v[0]); }},
      {"row_norm", {{3, 2, 4}}, [](const V& v) { return ad::row_norm(v[0]); }},
  };
  for (auto agg : {Aggregation::Max, Aggregation::Mean}) {
    cases.push_back({std::string("similarity_matrix_") + std::string(to_string(agg)),
                     {{3, 4, 5}, {3, 4}, {2, 3, 5}, {2, 3}},
                     [agg, l3](const V& v) {
                       auto x = ad::l2_normalize(v[0]);
                       auto y = ad::l2_normalize(v[2]);
                       auto wx = ad::masked_softmax(v[1], l3);
                       auto wy = ad::masked_softmax(v[3], {3, 1});
                       return ad::similarity_matrix(x, l3, wx, y, {3, 1}, wy, agg);
                     }});
  }
  cases.push_back({"contrastive_pair_loss", {{4, 4}, {}}, [](const V& v) {
                     auto tau = ad::add(v[1].tape->constant(Tensord::scalar(0.5)), ad::scale(ad::mul(v[1], v[1]), 0.1));
                     return contrastive_pair_loss(v[0], tau);
                   }});
  return cases;
}

ParamStore<double> as_double(const ParamStore<float>& ps) { return ps.cast<double>(); }

}  // namespace

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  Rng rng(seed);
  std::uint64_t salt = 0;
  for (const auto& c : op_cases()) {
    std::vector<Tensord> inputs;
    for (const auto& s : c.shapes) inputs.push_back(random_tensor(s, rng, c.scale));
    const std::uint64_t my_salt = ++salt;
    out.push_back(check_gradient(
        c.name, [&c, my_salt](Tape<double>&, const std::vector<Var<double>>& v) { return project(c.op(v), my_salt); },
        inputs));
  }

  // Layers and encoders, against their parameters (inputs are data).
  const std::size_t dim = 8, heads = 2;
  {
    ParamStore<float> ps;
    Rng init(seed + 1);
    TransformerLayer layer("layer", {dim, heads});
    layer.init(ps, init);
    const auto x = random_tensor({2, 4, dim}, rng);
    out.push_back(check_param_gradient("transformer_layer", as_double(ps), [&](const Bound<double>& p) {
      return project(layer.forward(p, p.tape().constant(x), {4, 2}), 101);
    }, 1000, seed));
  }
  {
    MotionEncoderConfig mc{12, dim, heads, 2, BodyPartition::contiguous(12, 2)};
    MotionEncoder enc(mc);
    ParamStore<float> ps;
    Rng init(seed + 2);
    enc.init(ps, init);
    const auto motion = random_tensor({2, 4, 12}, rng);
    const auto other = random_tensor({2, 3, dim}, rng);
    out.push_back(check_param_gradient("motion_encoder_alignment", as_double(ps), [&](const Bound<double>& p) {
      auto& tape = p.tape();
      auto x = enc.forward(p, motion);
      auto y = ad::l2_normalize(tape.constant(other));
      auto wx = tape.constant(Tensord({2, x.dim(1)}, 1.0 / double(x.dim(1))));
      auto wy = tape.constant(Tensord({2, 3}, 1.0 / 3.0));
      auto sim = ad::similarity_matrix(x, {}, wx, y, {}, wy, Aggregation::Max);
      return contrastive_pair_loss(sim, tape.constant(Tensord::scalar(0.5)));
    }, 12, seed));
  }
  {
    SequenceEncoder enc({Modality::Text, 5, dim, heads, 2, true, false});
    ParamStore<float> ps;
    Rng init(seed + 3);
    enc.init(ps, init);
    PrecomputedFeatures<double> feats{Modality::Text, random_tensor({2, 3, 5}, rng), {3, 2}};
    out.push_back(check_param_gradient("text_encoder", as_double(ps), [&](const Bound<double>& p) {
      Lengths l;
      return project(enc.forward(p, feats, &l), 102);
    }, 12, seed));
  }
  for (auto method : {CompressionMethod::Memory, CompressionMethod::Conv1d}) {
    AudioCompressor enc({4, dim, 3, 4, method});
    ParamStore<float> ps;
    Rng init(seed + 4);
    enc.init(ps, init);
    const auto a = random_tensor({5, 4}, rng), b = random_tensor({9, 4}, rng);
    out.push_back(check_param_gradient("audio_compressor_" + std::string(to_string(method)), as_double(ps),
                                       [&](const Bound<double>& p) {
                                         Lengths l;
                                         return project(enc.forward<double>(p, {&a, &b}, &l), 103);
                                       },
                                       12, seed));
  }

  // End-to-end total loss on a tiny four-modality model.
  {
    ModelConfig mc;
    mc.dim = dim;
    mc.heads = heads;
    mc.pose_dim = 12;
    mc.partition = BodyPartition::contiguous(12, 2);
    mc.text_in = 5;
    mc.text_layers = 1;
    mc.video_in = 6;
    mc.video_layers = 1;
    mc.audio_in = 4;
    mc.audio_len = 3;
    mc.memory_slots = 4;
    mc.mask_ratio = 0.5;
    mc.tau_init = 0.5;
    MultiModalModel model(mc);
    const auto ps = as_double(model.init(seed + 5));
    std::vector<Tensord> data{random_tensor({4, 12}, rng), random_tensor({4, 12}, rng), random_tensor({3, 5}, rng),
                              random_tensor({2, 5}, rng),  random_tensor({3, 6}, rng),  random_tensor({3, 6}, rng),
                              random_tensor({5, 4}, rng),  random_tensor({7, 4}, rng)};
    ModelInputs<double> in;
    for (std::size_t m = 0; m < 4; ++m) in.seqs[m] = {&data[2 * m], &data[2 * m + 1]};
    in.keys = {sample_key("a"), sample_key("b")};
    out.push_back(check_param_gradient("total_loss", ps, [&](const Bound<double>& p) {
      return model.loss(p, in, 17).total;
    }, 4, seed));
  }
  return out;
}

}  // namespace mmr
