#include "amoe/scoring.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>

using namespace amoe;

namespace {

double brute_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / pairs;
}

}  // namespace

TEST_CASE("auroc equals pair counting with ties") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 200)(rng);
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::uniform_int_distribution<int> level(0, 5);
    for (std::size_t i = 0; i < n; ++i) s[i] = level(rng), y[i] = static_cast<int>(rng() % 2);
    y[0] = 0;
    y[1] = 1;
    CHECK(auroc(s, y) == brute_auroc(s, y));
  }
}

TEST_CASE("auroc invariances") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> s(300), ex(300), aff(300), neg(300);
  std::vector<int> y(300);
  for (std::size_t i = 0; i < 300; ++i) {
    y[i] = i % 3 == 0;
    s[i] = g(rng) + (y[i] ? 0.7 : 0.0);
    ex[i] = std::exp(s[i]);
    aff[i] = 3.0 * s[i] - 11.0;
    neg[i] = -s[i];
  }
  const double a = auroc(s, y);
  CHECK(auroc(ex, y) == a);
  CHECK(auroc(aff, y) == a);
  CHECK(a + auroc(neg, y) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("shuffled labels give chance level") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<double> s(20000);
  std::vector<int> y(20000);
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = g(rng), y[i] = i % 2;
  std::shuffle(y.begin(), y.end(), rng);
  CHECK(std::abs(auroc(s, y) - 0.5) < 0.03);
}

TEST_CASE("auroc rejects malformed input") {
  const std::vector<double> s{1, 2, 3};
  CHECK_THROWS(auroc(s, std::vector<int>{1, 1, 1}));
  CHECK_THROWS(auroc(s, std::vector<int>{0, 1}));
  CHECK_THROWS(auroc(s, std::vector<int>{0, 2, 1}));
}

TEST_CASE("top mean") {
  const std::vector<double> v{5, 1, 9, 3, 7};
  CHECK(top_mean(v, 0.1) == 9.0);
  CHECK_THROWS(top_mean(v, 0.0));
  CHECK(top_mean(v, 0.4) == 8.0);
  CHECK(top_mean(v, 1.0) == 5.0);
}

TEST_CASE("aggregation") {
  auto make = [] {
    AnomalyResult r;
    r.maps[0] = Tensor(2, 2, 1.0);
    r.maps[2] = Tensor(2, 2, 4.0);
    (*r.maps[2])(1, 1) = 8.0;
    r.group_mass = {0.25, 0.0, 0.75};
    return r;
  };
  AggregateOptions opt;
  opt.normalize = false;
  opt.image_stat = ImageStat::Max;
  AnomalyResult r = make();
  aggregate(r, nullptr, opt);
  CHECK(r.aggregated(0, 0) == doctest::Approx(0.25 + 3.0));
  CHECK(r.image_score == doctest::Approx(0.25 + 6.0));

  // scaling all gate masses leaves the result unchanged
  AnomalyResult s = make();
  for (double& m : s.group_mass) m *= 7.0;
  aggregate(s, nullptr, opt);
  CHECK(s.aggregated.data == r.aggregated.data);

  opt.weighting = Weighting::Uniform;
  r = make();
  aggregate(r, nullptr, opt);
  CHECK(r.aggregated(1, 1) == doctest::Approx(4.5));
  opt.weighting = Weighting::Max;
  r = make();
  aggregate(r, nullptr, opt);
  CHECK(r.aggregated(1, 1) == 8.0);

  // standardization with per-group stats
  opt.weighting = Weighting::Uniform;
  opt.normalize = true;
  std::array<GroupStat, kNumGroups> st{};
  st[0] = {1.0, 1.0, true};
  st[2] = {4.0, 2.0, true};
  r = make();
  aggregate(r, &st, opt);
  CHECK(r.aggregated(0, 0) == doctest::Approx(0.0));
  CHECK(r.aggregated(1, 1) == doctest::Approx(1.0));

  CHECK(weighting_from_string(to_string(Weighting::Max)) == Weighting::Max);
  CHECK(image_stat_from_string("top_mean") == ImageStat::TopMean);
  CHECK_THROWS(weighting_from_string("bogus"));
}
