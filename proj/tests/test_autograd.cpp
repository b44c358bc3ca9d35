#include <doctest.h>

#include <cmath>
#include <vector>

#include "gare/autograd.hpp"
#include "gare/contrastive.hpp"
#include "gare/gradcheck.hpp"
#include "gare/increments.hpp"
#include "helpers.hpp"

using namespace gare;

namespace {

struct FaultGuard {
  explicit FaultGuard(ag::OpKind kind) { ag::testing::inject_backward_fault(kind); }
  ~FaultGuard() { ag::testing::inject_backward_fault(std::nullopt); }
};

}  // namespace

TEST_CASE("record examples") {
  ag::Tape tape;
  const Matrix x = test::random_matrix(1, 3, 2);
  ag::Var vx = tape.leaf(x);
  CHECK(ag::add(vx, tape.constant(Matrix(3, 2))).value() == x);

  ag::Var uniform = tape.leaf(Matrix(2, 5, 0.7));
  const Matrix p = ag::row_softmax(uniform).value();
  for (double v : p.values()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

  ag::Var zeros = tape.leaf(Matrix::from_rows({{0.0, 0.0}}));
  CHECK(ag::logsumexp(zeros).scalar() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("entries are recorded in topological order") {
  ag::Tape tape;
  ag::Var a = tape.leaf(test::random_matrix(2, 2, 2));
  ag::Var b = ag::matmul(a, a);
  ag::Var c = ag::add(b, a);
  CHECK(a.id < b.id);
  CHECK(b.id < c.id);
  CHECK(tape.size() == 3);
  CHECK(tape.kind(b.id) == ag::OpKind::matmul);
}

TEST_CASE("record rejects bad operands") {
  ag::Tape tape;
  ag::Var a = tape.leaf(Matrix(2, 3));
  ag::Var b = tape.leaf(Matrix(2, 2));
  CHECK_THROWS_AS(ag::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ag::add(a, b), ShapeError);
  CHECK_THROWS_AS(ag::reshape(a, 4, 2), ShapeError);
  std::vector<ag::Var> none;
  CHECK_THROWS_AS(tape.record(ag::OpKind::leaf, none), std::invalid_argument);
  std::vector<ag::Var> one{a};
  CHECK_THROWS_AS(tape.record(ag::OpKind::add, one), std::invalid_argument);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}

TEST_CASE("bilinear form gradient") {
  ag::Tape tape;
  const Matrix x = test::random_matrix(3, 1, 6);
  const Matrix y = test::random_matrix(4, 1, 6);
  ag::Var vx = tape.leaf(x);
  ag::Var vy = tape.leaf(y);
  ag::Var root = ag::matmul(vx, ag::transpose(vy));
  const ag::Gradients g = tape.backward(root);
  CHECK(g[vx] == y);
  CHECK(g[vy] == x);
}

TEST_CASE("softmax input gradients sum to zero per row") {
  ag::Tape tape;
  ag::Var x = tape.leaf(test::random_matrix(5, 4, 7, 3.0));
  ag::Var w = tape.constant(test::random_matrix(6, 4, 7));
  ag::Var root = ag::mean(ag::exp(ag::mul(ag::row_softmax(x), w)));
  const Matrix g = tape.backward(root)[x];
  for (std::size_t r = 0; r < g.rows(); ++r) {
    double sum = 0.0;
    for (double v : g.row_span(r)) sum += v;
    CHECK(std::abs(sum) < 1e-15);
  }
}

TEST_CASE("every op matches finite differences in isolation") {
  GradcheckOptions opts;
  opts.instances = 25;
  for (const CheckResult& r : run_gradcheck("ops", opts)) {
    CAPTURE(r.name);
    CHECK(r.worst_relative_error < 1e-6);
  }
}

TEST_CASE("L_info through psi matches finite differences") {
  const std::size_t b = 4, d = 8, l = 3;
  RngStream rng(31);
  const Matrix text = gaussian_sample(rng, b, d, 0.0, 1.0);
  const Matrix video = gaussian_sample(rng, b, d, 0.0, 1.0);
  const Matrix tokens = gaussian_sample(rng, b * l, d, 0.0, 1.0);
  PsiParams p = PsiParams::initialize(d, rng);
  p.w_o = gaussian_sample(rng, d, d, 0.0, 0.3);
  const IncrementConfig cfg;
  const GraphBuilder build = [&](ag::Tape& tape, const std::vector<ag::Var>& in) {
    const PsiVars psi{in[0], in[1], in[2], in[3]};
    ag::Var t = tape.constant(text), v = tape.constant(video), c = tape.constant(tokens);
    ag::Var delta = psi_forward(t, v, c, l, cfg, psi);
    return infonce_symmetric_on_tape(similarity_on_tape(t, v, delta, cfg.injection_side), 0.5);
  };
  const double err = finite_difference_error(build, {p.w_q, p.w_k, p.w_v, p.w_o},
                                             {true, true, true, true}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("backward is linear") {
  RngStream rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = gaussian_sample(rng, 3, 4, 0.0, 1.0);
    const double a = rng.gaussian(), b = rng.gaussian();
    auto grad = [&](double ca, double cb) {
      ag::Tape tape;
      ag::Var vx = tape.leaf(x);
      ag::Var f = ag::mean(ag::exp(ag::row_softmax(vx)));
      ag::Var g = ag::mean(ag::square(ag::l2_norm_rows(vx)));
      ag::Var root = ag::add(ag::scalar_mul(f, ca), ag::scalar_mul(g, cb));
      return tape.backward(root)[vx];
    };
    const Matrix combined = grad(a, b);
    const Matrix separate = add(scale(grad(1.0, 0.0), a), scale(grad(0.0, 1.0), b));
    CHECK(max_abs_diff(combined, separate) <= 1e-12);
  }
}

TEST_CASE("a leaf used k times accumulates k contributions") {
  const Matrix x = test::random_matrix(8, 2, 3);
  for (int k = 1; k <= 4; ++k) {
    ag::Tape shared;
    ag::Var vx = shared.leaf(x);
    ag::Var acc = ag::mean(ag::square(vx));
    for (int r = 1; r < k; ++r) acc = ag::add(acc, ag::mean(ag::square(vx)));
    const Matrix g_shared = shared.backward(acc)[vx];

    // Unrolled copy: k distinct leaves with the same value.
    ag::Tape unrolled;
    std::vector<ag::Var> leaves;
    for (int r = 0; r < k; ++r) leaves.push_back(unrolled.leaf(x));
    ag::Var acc2 = ag::mean(ag::square(leaves[0]));
    for (int r = 1; r < k; ++r) acc2 = ag::add(acc2, ag::mean(ag::square(leaves[r])));
    const ag::Gradients g2 = unrolled.backward(acc2);
    Matrix sum(x.rows(), x.cols());
    for (const ag::Var& leaf : leaves) sum = add(sum, g2[leaf]);
    CHECK(max_abs_diff(g_shared, sum) <= 1e-15);
  }
}

TEST_CASE("clamp_min passes gradient only strictly above the floor") {
  ag::Tape tape;
  ag::Var x = tape.leaf(Matrix::from_rows({{-1.0, 0.5, 2.0}}));
  ag::Var root = ag::mean(ag::clamp_min(x, 0.5));
  const Matrix g = tape.backward(root)[x];
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == 0.0);
  CHECK(g(0, 2) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("constants and unreachable leaves") {
  ag::Tape tape;
  ag::Var x = tape.leaf(Matrix(2, 2, 1.0));
  ag::Var unused = tape.leaf(Matrix(3, 1, 1.0));
  ag::Var c = tape.constant(Matrix(2, 2, 2.0));
  ag::Var root = ag::mean(ag::mul(x, c));
  const ag::Gradients g = tape.backward(root);
  CHECK(g.contains(unused));
  CHECK(g[unused] == Matrix(3, 1));
  CHECK(g[x] == Matrix(2, 2, 0.5));
  CHECK(g[x].same_shape(x.value()));
  CHECK_FALSE(c.requires_grad());
}

TEST_CASE("a perturbed backward rule is caught") {
  for (ag::OpKind kind : {ag::OpKind::cosine_rows, ag::OpKind::row_softmax, ag::OpKind::matmul}) {
    FaultGuard guard(kind);
    bool caught = false;
    for (const CheckResult& r : run_gradcheck("ops", {.instances = 5})) {
      if (r.name == "op:" + std::string(ag::op_name(kind))) caught = !r.passed();
    }
    CHECK(caught);
  }
}

TEST_CASE("op names round trip") {
  for (ag::OpKind kind : ag::all_ops()) CHECK(ag::op_from_name(ag::op_name(kind)) == kind);
  CHECK_FALSE(ag::op_from_name("conv2d").has_value());
}
