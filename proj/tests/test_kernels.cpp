#include "amoe/kernels.hpp"
#include "test_util.hpp"

#include <doctest.h>
#include <omp.h>

using namespace amoe;

TEST_CASE("blocked gemm variants agree with the serial reference") {
  std::mt19937_64 rng(7);
  for (std::size_t m : {1, 3, 4, 9, 300, 700})
    for (std::size_t k : {1, 5, 8, 33})
      for (std::size_t n : {1, 7, 8, 17, 96}) {
        const Tensor a = testutil::random_tensor(m, k, rng), b = testutil::random_tensor(k, n, rng);
        const Tensor bt = testutil::random_tensor(n, k, rng), c = testutil::random_tensor(m, n, rng);
        Tensor x, y;
        kernels::gemm_nn(a, b, x);
        kernels::ref::gemm_nn(a, b, y);
        CHECK(testutil::max_abs_diff(x, y) < 1e-11);
        kernels::gemm_nt(a, bt, x);
        kernels::ref::gemm_nt(a, bt, y);
        CHECK(testutil::max_abs_diff(x, y) < 1e-11);
        kernels::gemm_tn(a, c, x);
        kernels::ref::gemm_tn(a, c, y);
        CHECK(testutil::max_abs_diff(x, y) < 1e-10);
      }
}

TEST_CASE("gemm accumulate adds onto the target") {
  std::mt19937_64 rng(1);
  const Tensor a = testutil::random_tensor(5, 4, rng), b = testutil::random_tensor(4, 9, rng);
  Tensor c = testutil::random_tensor(5, 9, rng), base = c, prod;
  kernels::gemm_nn(a, b, c, true);
  kernels::ref::gemm_nn(a, b, prod);
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(c.data[i] == doctest::Approx(base.data[i] + prod.data[i]).epsilon(1e-12));
  Tensor bad(2, 2);
  CHECK_THROWS_AS(kernels::gemm_nn(a, b, bad, true), std::invalid_argument);
  CHECK_THROWS_AS(kernels::gemm_nn(b, a, bad), std::invalid_argument);
}

TEST_CASE("reductions are bitwise identical across thread counts") {
  std::mt19937_64 rng(3);
  const Tensor a = testutil::random_tensor(3000, 32, rng), b = testutil::random_tensor(3000, 48, rng);
  const Tensor q = testutil::random_tensor(16 * 196, 8, rng), v = testutil::random_tensor(16 * 196, 8, rng);
  Tensor q_pos = q;
  for (double& x : q_pos.data) x = std::abs(x);
  const int saved = omp_get_max_threads();
  Tensor r1, r2, o1, o2, kv, ks;
  omp_set_num_threads(1);
  kernels::gemm_tn(a, b, r1);
  kernels::linear_attention_fwd(q_pos, q_pos, v, 196, 1e-6, o1, kv, ks);
  omp_set_num_threads(4);
  kernels::gemm_tn(a, b, r2);
  kernels::linear_attention_fwd(q_pos, q_pos, v, 196, 1e-6, o2, kv, ks);
  omp_set_num_threads(saved);
  CHECK(r1.data == r2.data);
  CHECK(o1.data == o2.data);
}

TEST_CASE("factorized attention kernel matches the serial reference per segment") {
  std::mt19937_64 rng(5);
  Tensor q = testutil::random_tensor(3 * 20, 6, rng), k = testutil::random_tensor(3 * 20, 6, rng);
  const Tensor v = testutil::random_tensor(3 * 20, 5, rng);
  for (double& x : q.data) x = std::exp(x);
  for (double& x : k.data) x = std::exp(x);
  Tensor o1, o2, kv, ks;
  kernels::linear_attention_fwd(q, k, v, 20, 1e-6, o1, kv, ks);
  kernels::ref::linear_attention_fwd(q, k, v, 20, 1e-6, o2, kv, ks);
  CHECK(testutil::max_abs_diff(o1, o2) < 1e-12);
  CHECK_THROWS_AS(kernels::linear_attention_fwd(q, k, v, 7, 1e-6, o1, kv, ks), std::invalid_argument);
}
