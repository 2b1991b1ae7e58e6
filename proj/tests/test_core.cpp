#include <bit>
#include <cmath>
#include <limits>
#include <sstream>

#include "doctest.h"
#include "faan/core/autodiff.hpp"
#include "faan/core/grad_check.hpp"
#include "faan/core/param_store.hpp"
#include "faan/core/rng.hpp"
#include "test_util.hpp"

using namespace faan;
using Mat = Matrix<double>;

namespace {

Mat random_matrix(Index r, Index c, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

// Values bounded away from zero so relu kinks stay out of reach of the
// finite differences.
Mat away_from_zero(Index r, Index c, Rng& rng) {
  Mat m(r, c);
  for (Index i = 0; i < m.size(); ++i) {
    const double v = rng.uniform(0.2, 1.0);
    m.data()[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return m;
}

using Op = std::function<Var<double>(Tape<double>&, ParamStore<double>&)>;

// Contracts the op output with a fixed random matrix so every output
// coordinate carries a distinct weight into the scalar loss.
double check_op(ParamStore<double>& params, const Op& op) {
  Mat weights;
  auto loss = [&](Tape<double>& tape, ParamStore<double>& p) {
    Var<double> out = op(tape, p);
    if (weights.size() == 0) {
      Rng rng(99);
      weights = random_matrix(out.rows(), out.cols(), rng);
    }
    return sum(mask_mul(out, weights));
  };
  return grad_check(loss, params, 1e-6).max_relative_error;
}

ParamStore<double> store(std::initializer_list<std::pair<std::string, Mat>> tensors) {
  ParamStore<double> s;
  for (const auto& [name, m] : tensors) s.add(name, Tensor<double>::from_matrix(m, true));
  return s;
}

}  // namespace

TEST_CASE("elementwise and linear ops pass finite-difference checks") {
  Rng rng(1);
  auto p = store({{"a", random_matrix(3, 4, rng)}, {"b", random_matrix(3, 4, rng)},
                  {"row", random_matrix(1, 4, rng)}, {"m", random_matrix(4, 2, rng)},
                  {"n", random_matrix(5, 4, rng)}});
  auto A = [](Tape<double>& t, ParamStore<double>& s) { return t.parameter(s.at("a")); };
  auto B = [](Tape<double>& t, ParamStore<double>& s) { return t.parameter(s.at("b")); };

  CHECK(check_op(p, [&](auto& t, auto& s) { return add(A(t, s), B(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return sub(A(t, s), B(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return cwise_mul(A(t, s), B(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return scale(A(t, s), 2.5); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return add_scalar(A(t, s), 0.3); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return add_row(A(t, s), t.parameter(s.at("row"))); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return matmul(A(t, s), t.parameter(s.at("m"))); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return matmul_nt(A(t, s), t.parameter(s.at("n"))); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return rowwise_dot(A(t, s), B(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return sigmoid(A(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return tanh(A(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return squared_norm(A(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return mean_rows(A(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return concat_cols(A(t, s), B(t, s)); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return concat_rows({A(t, s), B(t, s)}); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return slice_cols(A(t, s), 1, 2); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return gather_rows(A(t, s), {2, 0, 2, 2}); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) { return softmax_rows(A(t, s)); }) < 1e-7);
  Mat mask = random_matrix(3, 4, rng);
  CHECK(check_op(p, [&](auto& t, auto& s) { return mask_mul(A(t, s), mask); }) < 1e-7);
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(2);
  auto p = store({{"a", away_from_zero(4, 5, rng)}});
  CHECK(check_op(p, [](auto& t, auto& s) { return relu(t.parameter(s.at("a"))); }) < 1e-7);
}

TEST_CASE("segment ops, layer norm and grouped attention pass finite-difference checks") {
  Rng rng(3);
  // Segments of 2, 0 and 3 rows.
  const std::vector<Index> offsets{0, 2, 2, 5};
  auto p = store({{"s", random_matrix(5, 1, rng)}, {"v", random_matrix(5, 3, rng)},
                  {"x", random_matrix(4, 6, rng)}, {"g", random_matrix(1, 6, rng, 0.5, 1.5)},
                  {"b", random_matrix(1, 6, rng)}, {"q", random_matrix(6, 4, rng)},
                  {"k", random_matrix(6, 4, rng)}, {"w", random_matrix(6, 4, rng)}});
  CHECK(check_op(p, [&](auto& t, auto& s) { return segment_softmax(t.parameter(s.at("s")), offsets); }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) {
          return segment_weighted_sum(t.parameter(s.at("s")), t.parameter(s.at("v")), offsets);
        }) < 1e-7);
  CHECK(check_op(p, [&](auto& t, auto& s) {
          return layer_norm_rows(t.parameter(s.at("x")), t.parameter(s.at("g")), t.parameter(s.at("b")));
        }) < 1e-6);
  // Two blocks of three rows, two heads, with a dropout-style multiplier.
  Rng drop_rng(4);
  Mat drop = dropout_mask<double>(2 * 2 * 3, 3, 0.3, drop_rng);
  CHECK(check_op(p, [&](auto& t, auto& s) {
          return grouped_attention(t.parameter(s.at("q")), t.parameter(s.at("k")), t.parameter(s.at("w")), 3, 2);
        }) < 1e-6);
  CHECK(check_op(p, [&](auto& t, auto& s) {
          return grouped_attention(t.parameter(s.at("q")), t.parameter(s.at("k")), t.parameter(s.at("w")), 3, 2,
                                   drop);
        }) < 1e-6);
}

TEST_CASE("softmax examples") {
  Tape<double> tape(false);
  auto p = [&](Mat m) { return softmax(tape.constant(std::move(m))).value(); };
  Mat two(1, 2);
  two << 0.0, 0.0;
  CHECK(p(two)(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  two << std::log(2.0), 0.0;
  CHECK(p(two)(0, 0) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p(two)(0, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  two << 1000.0, 1000.0;
  CHECK(p(two)(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  two << -1000.0, 0.0;
  CHECK(p(two).allFinite());
  CHECK_THROWS_WITH_AS(p(Mat(1, 0)), "empty attention domain", Error);
  two << std::numeric_limits<double>::quiet_NaN(), 0.0;
  CHECK_THROWS_AS(p(two), Error);
}

TEST_CASE("softmax rows are distributions for random inputs") {
  Rng rng(5);
  Tape<double> tape(false);
  for (int trial = 0; trial < 200; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.index(20));
    Mat x = random_matrix(3, n, rng, -30.0, 30.0);
    Mat y = softmax_rows(tape.constant(x)).value();
    for (Index r = 0; r < 3; ++r) {
      CHECK(std::abs(y.row(r).sum() - 1.0) < 1e-12);
      CHECK(y.row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("dropout keeps the expectation and is the identity at eval") {
  Rng rng(6);
  const double rate = 0.1;
  Mat mask = dropout_mask<double>(1000, 1000, rate, rng);
  const double kept = static_cast<double>((mask.array() != 0.0).count()) / static_cast<double>(mask.size());
  // Binomial sd at n = 1e6 is 3e-4; 5 sd.
  CHECK(std::abs(kept - (1.0 - rate)) < 1.5e-3);
  CHECK(std::abs(mask.mean() - 1.0) < 2e-3);
  CHECK((mask.array() == 0.0 || mask.array() == 1.0 / (1.0 - rate)).all());

  Tape<double> tape(false);
  Mat x = random_matrix(4, 4, rng);
  auto v = tape.constant(x);
  CHECK(dropout(v, rate, false, rng).value() == x);
  CHECK(dropout(v, 0.0, true, rng).value() == x);
  CHECK_THROWS_AS(dropout(v, 1.0, true, rng), Error);
  CHECK_THROWS_AS(dropout(v, -0.1, true, rng), Error);
}

TEST_CASE("matmul matches a triple-loop oracle") {
  Rng rng(7);
  Tape<double> tape(false);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 1 + static_cast<Index>(rng.index(7));
    const Index k = 1 + static_cast<Index>(rng.index(7));
    const Index m = 1 + static_cast<Index>(rng.index(7));
    Mat a = random_matrix(n, k, rng);
    Mat b = random_matrix(k, m, rng);
    Mat got = matmul(tape.constant(a), tape.constant(b)).value();
    Mat got_nt = matmul_nt(tape.constant(a), tape.constant(Mat(b.transpose()))).value();
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < m; ++j) {
        double s = 0.0;
        for (Index l = 0; l < k; ++l) s += a(i, l) * b(l, j);
        CHECK(got(i, j) == doctest::Approx(s).epsilon(1e-14));
        CHECK(got_nt(i, j) == doctest::Approx(s).epsilon(1e-14));
      }
    }
  }
  CHECK_THROWS_AS(matmul(tape.constant(Mat(2, 3)), tape.constant(Mat(2, 3))), Error);
}

TEST_CASE("layer norm rows have zero mean and unit variance before the affine part") {
  Rng rng(8);
  Tape<double> tape(false);
  Mat x = random_matrix(5, 16, rng, -3.0, 7.0);
  auto y = layer_norm_rows(tape.constant(x), tape.constant(Mat::Ones(1, 16)), tape.constant(Mat::Zero(1, 16)))
               .value();
  for (Index r = 0; r < 5; ++r) {
    CHECK(std::abs(y.row(r).mean()) < 1e-12);
    const double var = (y.row(r).array() - y.row(r).mean()).square().mean();
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("tape gradients accumulate into tensors and a non-recording tape stays inert") {
  Tensor<double> w({2}, Mat::Constant(1, 2, 3.0), true);
  {
    Tape<double> tape;
    auto v = tape.parameter(w);
    tape.backward(sum(add(v, v)));
  }
  CHECK(w.grad()(0, 0) == 2.0);
  {
    Tape<double> tape;
    tape.backward(sum(tape.parameter(w)));
  }
  CHECK(w.grad()(0, 1) == 3.0);
  {
    Tape<double> tape(false);
    auto loss = sum(tape.parameter(w));
    CHECK(loss.scalar() == 6.0);
    CHECK_THROWS_AS(tape.backward(loss), Error);
  }
  Tape<double> tape;
  CHECK_THROWS_WITH_AS(tape.backward(tape.parameter(w)), "backward() needs a scalar root", Error);
}

TEST_CASE("finite checks reject NaN when enabled") {
  const bool before = finite_checks_enabled();
  set_finite_checks(true);
  Tape<double> tape;
  Mat bad = Mat::Constant(1, 1, std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(tape.constant(bad), Error);
  set_finite_checks(before);
}

TEST_CASE("checkpoint round trip is bit-exact in 64-bit") {
  Rng rng(9);
  ParamStore<double> s;
  s.add("scalar", Tensor<double>({}, Mat::Constant(1, 1, -0.0), false));
  Mat v = random_matrix(1, 7, rng);
  v(0, 1) = std::numeric_limits<double>::denorm_min();
  v(0, 2) = 1.0 / 3.0;
  s.add("vector", Tensor<double>({7}, v, true));
  s.add("matrix", Tensor<double>({3, 5}, random_matrix(3, 5, rng), true));

  std::stringstream buf;
  write_checkpoint(buf, s);
  const std::string bytes = buf.str();
  CHECK(bytes.substr(0, 8) == "FAANCKPT");
  auto back = read_checkpoint<double>(buf);
  REQUIRE(back.names() == s.names());
  for (std::size_t i = 0; i < s.size(); ++i) {
    CHECK(back[i].shape() == s[i].shape());
    CHECK(back[i].requires_grad() == s[i].requires_grad());
    for (Index j = 0; j < s[i].size(); ++j) {
      CHECK(std::bit_cast<std::uint64_t>(back[i].value().data()[j]) ==
            std::bit_cast<std::uint64_t>(s[i].value().data()[j]));
    }
  }
  std::stringstream again;
  write_checkpoint(again, back);
  CHECK(again.str() == bytes);

  // 32-bit storage rounds each value to the nearest float.
  std::stringstream f32;
  write_checkpoint(f32, s, 4);
  auto narrowed = read_checkpoint<double>(f32);
  CHECK(narrowed.at("vector").value()(0, 2) == static_cast<double>(static_cast<float>(1.0 / 3.0)));

  const auto dir = test::scratch("core_ckpt");
  save_checkpoint(dir / "p.ckpt", s);
  CHECK(checkpoint_precision(dir / "p.ckpt") == 8);
  CHECK(test::read_file(dir / "p.ckpt") == bytes);
}

TEST_CASE("corrupt checkpoints are rejected") {
  ParamStore<double> s;
  s.add("w", Tensor<double>({2, 2}, Mat::Ones(2, 2), true));
  std::stringstream buf;
  write_checkpoint(buf, s);
  std::string bytes = buf.str();

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  std::stringstream in1(bad_magic);
  CHECK_THROWS_AS(read_checkpoint<double>(in1), Error);

  std::stringstream in2(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_checkpoint<double>(in2), Error);

  CHECK_THROWS_AS(load_checkpoint<double>("/nonexistent/dir/x.ckpt"), Error);
}

TEST_CASE("param store names are unique and ordered") {
  ParamStore<double> s;
  s.add("b", Tensor<double>({1}));
  s.add("a", Tensor<double>({2, 3}));
  CHECK(s.names() == std::vector<std::string>{"b", "a"});
  CHECK(s.total_size() == 7);
  CHECK_THROWS_AS(s.add("a", Tensor<double>({1})), Error);
  CHECK_THROWS_AS(s.at("missing"), Error);
  CHECK_THROWS_AS(Tensor<double>({1, 2, 3}), Error);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.engine()() == b.engine()());
  CHECK(Rng::derive_seed(1, "episode", 3) == Rng::derive_seed(1, "episode", 3));
  CHECK(Rng::derive_seed(1, "episode", 3) != Rng::derive_seed(1, "episode", 4));
  CHECK(Rng::derive_seed(1, "episode", 3) != Rng::derive_seed(1, "dropout", 3));
  CHECK(Rng::derive_seed(1, "episode", 3) != Rng::derive_seed(2, "episode", 3));
  auto s1 = Rng::substream(7, "init");
  auto s2 = Rng::substream(7, "init");
  CHECK(s1.uniform() == s2.uniform());
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const auto k = r.index(5);
    CHECK(k < 5);
  }
}
