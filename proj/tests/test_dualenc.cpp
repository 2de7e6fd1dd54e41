#include <doctest.h>

#include <cmath>
#include <functional>

#include "support.hpp"
#include "surgline/autograd.hpp"
#include "surgline/dualenc.hpp"
#include "surgline/image.hpp"
#include "surgline/safetensors.hpp"
#include "surgline/tokenizer.hpp"
#include "surgline/vocab.hpp"

using namespace surgline;

namespace {

// Max relative error between autograd and central differences for
// L = sum(f(x) * R) with fixed random R.
double op_gradient_error(const std::function<ag::Var(const ag::Var&)>& f, const Matrix& x0, std::uint64_t seed) {
  Rng rng(seed);
  ag::Var x(x0, true);
  const ag::Var y = f(x);
  const Matrix r = testing::random_matrix(rng, y.rows(), y.cols());
  ag::backward({{ag::dot_all(y, ag::constant(r)), Matrix::Ones(1, 1)}});
  const Matrix analytic = x.grad();
  double worst = 0;
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    Matrix p = x0, m = x0;
    p.data()[i] += h;
    m.data()[i] -= h;
    ag::NoGradGuard guard;
    const double lp = (f(ag::Var(p)).value().array() * r.array()).sum();
    const double lm = (f(ag::Var(m)).value().array() * r.array()).sum();
    const double num = (lp - lm) / (2 * h);
    worst = std::max(worst, std::abs(num - analytic.data()[i]) / std::max(std::abs(num) + std::abs(analytic.data()[i]), 1e-6));
  }
  return worst;
}

std::vector<Image> synth_images(int n_classes) {
  std::vector<Image> out;
  for (int k = 0; k < n_classes; ++k) out.push_back(render_synth({k, n_classes, 32, 0.0, 1}));
  return out;
}

}  // namespace

TEST_SUITE("dualenc") {
  TEST_CASE("autograd ops agree with finite differences") {
    Rng rng(21);
    const Matrix x = testing::random_matrix(rng, 4, 6);
    const ag::Var w(testing::random_matrix(rng, 5, 6)), b(testing::random_matrix(rng, 1, 5));
    const ag::Var g(testing::random_matrix(rng, 1, 6)), beta(testing::random_matrix(rng, 1, 6));
    const ag::Var other(testing::random_matrix(rng, 3, 6));
    CHECK(op_gradient_error([&](const ag::Var& v) { return ag::linear(v, w, &b); }, x, 1) < 1e-6);
    CHECK(op_gradient_error([&](const ag::Var& v) { return ag::layer_norm(v, g, beta); }, x, 2) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::quick_gelu(v); }, x, 3) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::softmax_rows(v); }, x, 4) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::softmax_rows(ag::matmul_nt(v, v), true); }, x, 5) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::l2_normalize_rows(v); }, x, 6) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::mean_rows(ag::exp(ag::scale(v, 0.3))); }, x, 7) < 1e-6);
    CHECK(op_gradient_error(
              [&](const ag::Var& v) {
                return ag::concat_cols({ag::slice_cols(v, 0, 2), ag::slice_rows(ag::concat_rows({v, other}), 2, 4)});
              },
              x, 8) < 1e-6);
    CHECK(op_gradient_error([](const ag::Var& v) { return ag::gather_rows(v, {3, 0, 3, 1}); }, x, 9) < 1e-6);
    CHECK(op_gradient_error([&](const ag::Var& v) { return ag::add_row(ag::matmul(v, ag::Var(Matrix(w.value().transpose()))), b); },
                            x, 10) < 1e-6);
  }

  TEST_CASE("no graph is recorded under NoGradGuard") {
    ag::Var x(Matrix::Ones(2, 2), true);
    ag::NoGradGuard guard;
    CHECK_FALSE(ag::grad_enabled());
    CHECK(ag::scale(x, 2.0).node()->parents.empty());
  }

  TEST_CASE("embedding contracts") {
    const auto enc = DualEncoder::surrogate(3);
    const auto imgs = synth_images(4);
    const auto e = enc.encode_images(imgs);
    CHECK(e.rows() == 4);
    CHECK(e.dim() == enc.config().embed_dim);
    for (Eigen::Index i = 0; i < e.rows(); ++i) CHECK(std::abs(e.values().row(i).norm() - 1.0) < 1e-5);
    CHECK(enc.encode_images(imgs).values() == e.values());
    const std::vector<Image> same{imgs[2], imgs[2]};
    const auto s = enc.encode_images(same);
    CHECK(s.values().row(0) == s.values().row(1));

    const auto vocab = bundled_vocabulary(Task::gesture);
    const auto g1 = prompts_for_class(vocab, "G1", PromptMode::all_texts);
    CHECK(enc.encode_texts(g1).rows() == 5);
    const std::vector<std::string> dup{g1[1], g1[1]};
    const auto d = enc.encode_texts(dup);
    CHECK(d.values().row(0) == d.values().row(1));
    std::vector<std::string> all;
    for (const auto& id : vocab.class_ids())
      for (const auto& t : prompts_for_class(vocab, id, PromptMode::all_texts)) all.push_back(t);
    CHECK(enc.encode_texts(all).rows() == 75);
  }

  TEST_CASE("surrogate is deterministic per seed") {
    const auto a = DualEncoder::surrogate(8), b = DualEncoder::surrogate(8), c = DualEncoder::surrogate(9);
    CHECK(a.snapshot() == b.snapshot());
    CHECK_FALSE(a.snapshot() == c.snapshot());
    const auto imgs = synth_images(3);
    CHECK(a.encode_images(imgs).values() == b.encode_images(imgs).values());
  }

  TEST_CASE("freeze policy on the backbone geometry") {
    const auto cfg = vit_b32_config();
    CHECK(cfg.vision.tower.layers == 12);
    CHECK(cfg.text.tower.layers == 12);
    const auto names = trainable_parameter_names(cfg, {3, false, false});
    for (const auto& n : names) {
      const bool late = n.find("layers.9.") != std::string::npos || n.find("layers.10.") != std::string::npos ||
                        n.find("layers.11.") != std::string::npos;
      CHECK_MESSAGE(late, n);
    }
    CHECK(trainable_parameter_names(cfg, {0, false, false}).empty());
    CHECK_THROWS_WITH_AS(trainable_parameter_names(cfg, {13, false, false}), doctest::Contains("exceeds encoder depth"),
                         ValidationError);
    Eigen::Index total = 0, trainable = 0;
    for (const auto& p : parameter_shapes(cfg)) {
      total += p.numel();
      if (names.count(p.name)) trainable += p.numel();
    }
    const double share = static_cast<double>(trainable) / static_cast<double>(total);
    CHECK(share > 0.15);
    CHECK(share < 0.3);
    const auto with_proj = trainable_parameter_names(cfg, {3, true, true});
    CHECK(with_proj.count("visual_projection.weight"));
    CHECK(with_proj.count("text_projection.weight"));
    CHECK(with_proj.count("logit_scale"));
  }

  TEST_CASE("applying a policy toggles requires_grad") {
    const auto enc = apply_freeze_policy(DualEncoder::surrogate(1), {1, false, false});
    for (const auto& [name, v] : enc.parameters()) CHECK(v.requires_grad() == (enc.trainable_set().count(name) == 1));
    CHECK_FALSE(enc.trainable_set().empty());
  }

  TEST_CASE("archive round trip") {
    const auto enc = apply_freeze_policy(DualEncoder::surrogate(4), {2, true, false});
    const auto bytes = serialize_safetensors(enc.to_archive());
    const auto back = DualEncoder::from_archive(parse_safetensors(bytes));
    CHECK(back.snapshot() == enc.snapshot());
    CHECK(back.freeze_policy() == enc.freeze_policy());
    CHECK(back.config_hash() == enc.config_hash());
    CHECK(serialize_safetensors(back.to_archive()) == bytes);
    const auto imgs = synth_images(2);
    CHECK(back.encode_images(imgs).values() == enc.encode_images(imgs).values());
  }

  TEST_CASE("copies are deep") {
    const auto a = DualEncoder::surrogate(2);
    DualEncoder b = a;
    b.mutable_parameters().begin()->second.mutable_value().array() += 1.0;
    CHECK_FALSE(a.snapshot() == b.snapshot());
  }

  TEST_CASE("hash tokenizer") {
    const HashTokenizer tok(1024);
    const auto ids = tok.encode("Reaching for the needle", 32);
    CHECK(ids.front() == 0);
    CHECK(ids.back() == 1);
    CHECK(ids.size() == 6);
    CHECK(tok.encode("REACHING, for the needle!", 32) == ids);
    const auto cut = tok.encode("a b c d e f g h", 5);
    CHECK(cut.size() == 5);
    CHECK(cut.back() == 1);
  }

  TEST_CASE("byte-level bpe merges by rank") {
    std::string vocab = R"({"<|startoftext|>":0,"<|endoftext|>":1,"l":2,"o":3,"w":4,"lo":5,"low</w>":6,"w</w>":7,"o</w>":8,"l</w>":9,"lo</w>":10})";
    const auto tok = BpeTokenizer::from_text(vocab, "#version: 0.2\nl o\nlo w</w>\n");
    CHECK(tok.bpe("low") == std::vector<std::string>{"low</w>"});
    CHECK(tok.bpe("lol") == std::vector<std::string>{"lo", "l</w>"});
    CHECK(tok.encode("low", 8) == std::vector<int>{0, 6, 1});
  }

  TEST_CASE("safetensors round trip and dtype handling") {
    TensorArchive a;
    a.tensors["x"] = {{2, 3}, {1, 2, 3, 4, 5, 6}};
    a.tensors["s"] = {{}, {0.5}};
    a.metadata["k"] = "v";
    const auto back = parse_safetensors(serialize_safetensors(a));
    CHECK(back.tensors.at("x").data == a.tensors.at("x").data);
    CHECK(back.tensors.at("x").shape == a.tensors.at("x").shape);
    CHECK(back.metadata.at("k") == "v");
    CHECK_THROWS_AS(parse_safetensors("short"), ParseError);
  }

  TEST_CASE("preprocess geometry") {
    const auto enc = DualEncoder::surrogate(1);
    const auto p = enc.preprocess(render_synth({0, 2, 64, 0.0, 1}));
    CHECK(p.rows() == enc.config().vision.num_patches());
    CHECK(p.cols() == 3 * 8 * 8);
  }
}
