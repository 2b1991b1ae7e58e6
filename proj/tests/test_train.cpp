#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "faan/train/trainer.hpp"
#include "json.hpp"
#include "test_util.hpp"

using namespace faan;
namespace fs = std::filesystem;

namespace {

TrainConfig small_train(std::size_t steps, std::uint64_t seed = 1) {
  TrainConfig c;
  c.k = 5;
  c.query_batch_size = 8;
  c.max_steps = steps;
  c.warmup_steps = steps / 10;
  c.eval_every = 0;
  c.log_every = 10;
  c.learning_rate = 5e-3;
  c.seed = seed;
  c.selection = ReferenceSelection::SeededShuffle;
  return c;
}

struct Setup {
  const Dataset& data;
  ModelConfig mc;
  NeighborIndex nb;
  EmbeddingTable emb;
  explicit Setup(std::uint64_t seed = 1, const std::string& variant = "faan")
      : data(test::synthetic(seed)), mc(test::tiny_config(variant)) {
    nb = test::neighbors_for(data, mc, seed);
    emb = test::random_embeddings(data.num_entities(), data.num_relations(), mc.dim, seed);
  }
  Model<double> model(std::uint64_t seed = 1) const { return Model<double>(mc, emb, nb, seed); }
};

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("hinge loss examples") {
  std::vector<double> pos{3.0, 10.0}, neg{1.0, 1.0};
  // relu(5 + 1 - 3) + relu(5 + 1 - 10)
  CHECK(hinge_loss(pos, neg, 5.0) == 3.0);
  CHECK(hinge_loss(std::vector<double>{0.0}, std::vector<double>{0.0}, 5.0) == 5.0);
  CHECK_THROWS_AS(hinge_loss(pos, std::vector<double>{1.0}, 5.0), Error);

  Tape<double> tape(false);
  Matrix<double> p(2, 1), n(4, 1);
  p << 3.0, 10.0;
  n << 1.0, 2.0, 1.0, 9.0;
  // Negatives 0-1 belong to query 0, 2-3 to query 1: 3 + 4 + 0 + 4.
  CHECK(hinge_loss(tape.constant(p), tape.constant(n), 5.0, 2).scalar() == 11.0);
  CHECK_THROWS_AS(hinge_loss(tape.constant(p), tape.constant(n), 5.0, 1), Error);
}

TEST_CASE("learning rate schedule") {
  CHECK(lr_schedule(0, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_schedule(50, 1e-3, 100, 1000) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(100, 1e-3, 100, 1000) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_schedule(550, 1e-3, 100, 1000) == doctest::Approx(5e-4).epsilon(1e-15));
  CHECK(lr_schedule(1000, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_schedule(2000, 1e-3, 100, 1000) == 0.0);
  CHECK(lr_schedule(1, 1e-3, 0, 10) == doctest::Approx(9e-4).epsilon(1e-15));
  // Monotone up then down.
  double prev = -1.0;
  for (std::size_t s = 0; s <= 100; ++s) {
    CHECK(lr_schedule(s, 1.0, 100, 1000) >= prev);
    prev = lr_schedule(s, 1.0, 100, 1000);
  }
  for (std::size_t s = 101; s <= 1000; ++s) {
    CHECK(lr_schedule(s, 1.0, 100, 1000) <= prev);
    prev = lr_schedule(s, 1.0, 100, 1000);
  }
}

TEST_CASE("adam update examples") {
  Matrix<double> w(1, 3), g(1, 3), m = Matrix<double>::Zero(1, 3), v = Matrix<double>::Zero(1, 3);
  w << 1.0, -2.0, 0.5;
  g << 0.1, -4.0, 0.0;
  AdamConfig cfg;
  adam_update(w, g, m, v, 1, 0.01, cfg);
  // After bias correction the first step is lr * g / (|g| + eps).
  CHECK(w(0, 0) == doctest::Approx(1.0 - 0.01 * 0.1 / (0.1 + 1e-8)).epsilon(1e-14));
  CHECK(w(0, 1) == doctest::Approx(-2.0 + 0.01 * 4.0 / (4.0 + 1e-8)).epsilon(1e-14));
  CHECK(w(0, 2) == 0.5);
  CHECK(m(0, 1) == doctest::Approx(-0.4).epsilon(1e-15));
  CHECK(v(0, 1) == doctest::Approx(0.001 * 16.0).epsilon(1e-15));

  // Second step by hand.
  Matrix<double> g2(1, 3);
  g2 << 0.2, 0.0, 0.0;
  const double m2 = 0.9 * 0.01 + 0.1 * 0.2;
  const double v2 = 0.999 * 0.001 * 0.01 + 0.001 * 0.04;
  const double expect = w(0, 0) - 0.01 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.999 * 0.999)) + 1e-8);
  adam_update(w, g2, m, v, 2, 0.01, cfg);
  CHECK(w(0, 0) == doctest::Approx(expect).epsilon(1e-14));

  // L2 enters as 2 * l2 * w on the gradient.
  Matrix<double> a(1, 1), b(1, 1), z(1, 1), ma = Matrix<double>::Zero(1, 1), va = ma, mb = ma, vb = ma;
  a << 3.0;
  b << 3.0;
  z << 0.0;
  Matrix<double> explicit_grad(1, 1);
  explicit_grad << 2.0 * 0.1 * 3.0;
  adam_update(a, z, ma, va, 1, 0.01, cfg, 0.1);
  adam_update(b, explicit_grad, mb, vb, 1, 0.01, cfg, 0.0);
  CHECK(a == b);
  CHECK_THROWS_AS(adam_update(a, z, ma, va, 0, 0.01, cfg), Error);
}

TEST_CASE("adam scalar examples") {
  Matrix<double> w(1, 1), g(1, 1), m = Matrix<double>::Zero(1, 1), v = m;
  w << 1.0;
  g << 1.0;
  adam_update(w, g, m, v, 1, 0.1, AdamConfig{});
  CHECK(w(0, 0) == doctest::Approx(0.9).epsilon(1e-7));

  Matrix<double> z = Matrix<double>::Zero(1, 1);
  Matrix<double> before = w;
  m.setZero();
  v.setZero();
  for (std::size_t t = 1; t <= 10; ++t) adam_update(w, z, m, v, t, 0.1, AdamConfig{});
  CHECK(w == before);

  // f = w^2 from w = 1.
  w << 1.0;
  m.setZero();
  v.setZero();
  for (std::size_t t = 1; t <= 500; ++t) {
    Matrix<double> grad = 2.0 * w;
    adam_update(w, grad, m, v, t, 0.01, AdamConfig{});
  }
  CHECK(std::abs(w(0, 0)) < 1e-3);
}

TEST_CASE("hinge loss is monotone in positive and negative scores") {
  Rng rng(11);
  const double h = 1e-6;
  for (int trial = 0; trial < 200; ++trial) {
    Matrix<double> p(3, 1), n(6, 1);
    for (Index i = 0; i < 3; ++i) p(i, 0) = rng.normal(0.0, 3.0);
    for (Index i = 0; i < 6; ++i) n(i, 0) = rng.normal(0.0, 3.0);
    Tape<double> tape(false);
    auto loss = [&](const Matrix<double>& a, const Matrix<double>& b) {
      return hinge_loss(tape.constant(a), tape.constant(b), 5.0, 2).scalar();
    };
    const double base = loss(p, n);
    Matrix<double> dir_p(3, 1), dir_n(6, 1);
    for (Index i = 0; i < 3; ++i) dir_p(i, 0) = std::abs(rng.normal());
    for (Index i = 0; i < 6; ++i) dir_n(i, 0) = std::abs(rng.normal());
    CHECK(loss(p + h * dir_p, n) <= base);
    CHECK(loss(p, n + h * dir_n) >= base);
  }
}

TEST_CASE("adam minimizes a quadratic bowl") {
  Rng rng(3);
  ParamStore<double> p;
  Matrix<double> target(2, 3);
  for (Index i = 0; i < target.size(); ++i) target.data()[i] = rng.normal();
  p.add("w", Tensor<double>({2, 3}, Matrix<double>::Zero(2, 3), true));
  auto state = AdamState<double>::zeros_like(p);
  for (int s = 0; s < 3000; ++s) {
    p.zero_grad();
    Tape<double> tape;
    auto w = tape.parameter(p.at("w"));
    tape.backward(squared_norm(sub(w, tape.constant(target))));
    adam_step(p, state, 1e-2, AdamConfig{}, 0.0);
  }
  CHECK((p.at("w").value() - target).norm() < 1e-3);
  CHECK(state.t == 3000);
}

TEST_CASE("adam skips frozen tensors and l2 follows its mask") {
  ParamStore<double> p;
  p.add("frozen", Tensor<double>({2}, Matrix<double>::Ones(1, 2), false));
  p.add("w", Tensor<double>({2}, Matrix<double>::Ones(1, 2), true));
  p.add("entity_embedding", Tensor<double>({2}, Matrix<double>::Ones(1, 2), true));
  auto state = AdamState<double>::zeros_like(p);
  auto mask = [](const std::string& n) { return n != "entity_embedding"; };
  adam_step(p, state, 0.1, AdamConfig{}, 0.5, mask);
  CHECK(p.at("frozen").value().isOnes(0.0));
  CHECK(p.at("w").value()(0, 0) < 1.0);
  CHECK(p.at("entity_embedding").value().isOnes(0.0));
  CHECK(l2_penalty(p, 0.5, mask) == doctest::Approx(0.5 * p.at("w").value().squaredNorm()).epsilon(1e-15));
  CHECK(parameter_norm(p) == doctest::Approx(std::sqrt(p.at("w").value().squaredNorm() + 2.0)).epsilon(1e-15));
}

TEST_CASE("loss at random init is margin dominated") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Setup s(seed);
    auto model = s.model(seed);
    TrainConfig c = small_train(10, seed);
    c.query_batch_size = 32;
    Trainer<double> t(model, s.data, c);
    const double gamma = c.margin;
    // Per-pair loss averaged over the first steps.
    double total = 0.0;
    std::size_t pairs = 0;
    for (int i = 0; i < 5; ++i) {
      total += t.step();
      Rng er = Rng::substream(seed, "episode", static_cast<std::uint64_t>(i));
      EpisodeOptions eo{c.k, c.query_batch_size, c.negatives, c.negatives_per_query};
      pairs += sample_episode(s.data, Partition::Train, std::nullopt, eo, er).negatives.size();
    }
    const double per_pair = total / static_cast<double>(pairs);
    CHECK(per_pair >= 0.5 * gamma);
    CHECK(per_pair <= 1.5 * gamma);
  }
}

TEST_CASE("training lowers the loss") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Setup s(seed);
    auto model = s.model(seed);
    TrainConfig c = small_train(1000, seed);
    c.query_batch_size = 16;
    c.warmup_steps = 100;
    Trainer<double> t(model, s.data, c);
    std::vector<double> loss;
    for (int i = 0; i < 1000; ++i) loss.push_back(t.step());
    const double early = std::accumulate(loss.begin(), loss.begin() + 100, 0.0);
    const double late = std::accumulate(loss.end() - 100, loss.end(), 0.0);
    CHECK(late < 0.5 * early);
  }
}

TEST_CASE("training is deterministic and resumes bit-exactly") {
  Setup s(1);
  TrainConfig c = small_train(1000, 1);
  auto m1 = s.model();
  Trainer<double> t1(m1, s.data, c);
  std::vector<double> uninterrupted;
  for (int i = 0; i < 1000; ++i) uninterrupted.push_back(t1.step());

  auto m2 = s.model();
  Trainer<double> t2(m2, s.data, c);
  std::vector<double> resumed;
  for (int i = 0; i < 500; ++i) resumed.push_back(t2.step());
  const auto dir = test::scratch("train_resume");
  t2.save_state(dir / "state.ckpt");

  auto m3 = s.model(777);  // different init, overwritten by the state
  Trainer<double> t3(m3, s.data, c);
  t3.load_state(dir / "state.ckpt");
  CHECK(t3.current_step() == 500);
  for (int i = 500; i < 1000; ++i) resumed.push_back(t3.step());
  CHECK(resumed == uninterrupted);
  for (std::size_t i = 0; i < m1.params().size(); ++i) CHECK(m3.params()[i].value() == m1.params()[i].value());

  TrainConfig other = c;
  other.learning_rate *= 2.0;
  auto m4 = s.model();
  Trainer<double> t4(m4, s.data, other);
  CHECK_THROWS_WITH_AS(t4.load_state(dir / "state.ckpt"), doctest::Contains("different configuration"), Error);
  CHECK(t4.config_hash() != t1.config_hash());
}

TEST_CASE("L2 regularization shrinks the parameter norm") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    Setup s(seed);
    // Frozen embeddings keep the norm over penalized tensors only.
    s.mc.variant.freeze_embeddings = true;
    auto run = [&](double l2) {
      auto m = s.model(seed);
      TrainConfig c = small_train(2000, seed);
      c.learning_rate = 1e-3;
      c.warmup_steps = 200;
      c.l2 = l2;
      Trainer<double> t(m, s.data, c);
      for (int i = 0; i < 2000; ++i) t.step();
      return parameter_norm(m.params());
    };
    CHECK(run(1e-4) <= run(0.0));
  }
}

TEST_CASE("run writes a log and keeps the best validation checkpoint") {
  Setup s(1);
  auto model = s.model();
  TrainConfig c = small_train(120, 1);
  c.eval_every = 30;
  c.log_every = 10;
  const auto dir = test::scratch("train_run");
  Trainer<double> t(model, s.data, c);
  std::vector<TrainLogRow> rows;
  auto summary = t.run(dir, [&](const TrainLogRow& r) { rows.push_back(r); });
  CHECK(summary.final_step == 120);
  CHECK(summary.validated);

  auto log = lines(dir / "train_log.tsv");
  REQUIRE(log.size() == 13);
  CHECK(log[0] == "step\tloss\tlr\tval_mrr\tval_hits1\tval_hits5\tval_hits10");
  double best = -1.0;
  std::size_t best_step = 0;
  for (const auto& r : rows) {
    if (r.validation && r.validation->mrr > best) {
      best = r.validation->mrr;
      best_step = r.step;
    }
  }
  CHECK(summary.best_val_mrr == best);
  CHECK(summary.best_step == best_step);

  std::ifstream side_in(sidecar_path(dir / "best.ckpt"));
  const auto side = nlohmann::json::parse(side_in);
  CHECK(side.at("val_mrr").get<double>() == best);
  CHECK(side.at("step").get<std::size_t>() == best_step);
  CHECK(side.at("config_hash").get<std::string>() == t.config_hash());

  Model<double> restored(s.mc, load_checkpoint<double>(dir / "best.ckpt"), s.nb);
  Trainer<double> check(restored, s.data, c);
  CHECK(check.validate().mrr == best);
  CHECK(check.validate(1).mrr == check.validate(3).mrr);
  CHECK(fs::exists(dir / "state.ckpt"));
}

TEST_CASE("train config validation and JSON") {
  TrainConfig c;
  c.k = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.negatives_per_query = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.negatives = NegativeStrategy::Candidates;
  c.selection = ReferenceSelection::SeededShuffle;
  nlohmann::json j = c;
  CHECK(j.at("negatives") == "candidates");
  CHECK(j.get<TrainConfig>() == c);
  nlohmann::json bad = {{"negatives", "nearest"}};
  CHECK_THROWS_AS(bad.get<TrainConfig>(), Error);
}

TEST_CASE("errors during a step name the step and the episode") {
  Setup s(1);
  auto model = s.model();
  model.params().at("pair.layer0.wq").value()(0, 0) = std::numeric_limits<double>::infinity();
  Trainer<double> t(model, s.data, small_train(5, 1));
  CHECK_THROWS_WITH_AS(t.step(), doctest::Contains("at step 0; offending episode"), Error);
}
