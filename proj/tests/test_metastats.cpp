#include <doctest.h>

#include "calib/metastats.hpp"
#include "calib/rng.hpp"
#include "support/oracles.hpp"

using namespace calib;

TEST_CASE("pearson basics") {
  CHECK(pearson({1.0, 2.0, 3.0}, {1.0, 2.0, 3.0}) == doctest::Approx(1.0));
  CHECK(pearson({0.0, 1.0, 2.0}, {0.0, 2.0, 1.0}) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(pearson({1.0, 2.0, 5.0}, {-1.0, -2.0, -5.0}) == doctest::Approx(-1.0));
  CHECK_THROWS_AS(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), ValidationError);
  CHECK_THROWS_AS(pearson({1.0}, {2.0}), ValidationError);
}

TEST_CASE("pearson matches the naive two-pass oracle") {
  Rng rng(404);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(0, 30));
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    CHECK(pearson(a, b) == doctest::Approx(oracles::naive_pearson(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("spearman: monotone transforms and ties") {
  const std::vector<double> a{0.3, 1.2, 2.0, 5.5};
  std::vector<double> cubed = a;
  for (auto& v : cubed) v = v * v * v + 2.0;
  CHECK(spearman(a, cubed) == doctest::Approx(1.0));
  CHECK(spearman(a, {5.0, 3.0, 2.0, -1.0}) == doctest::Approx(-1.0));

  const std::vector<double> ta{1, 2, 2, 3}, tb{1, 3, 2, 4};
  const auto ra = oracles::naive_average_ranks(ta);
  CHECK(ra == std::vector<double>{1.0, 2.5, 2.5, 4.0});
  CHECK(spearman(ta, tb) ==
        doctest::Approx(oracles::naive_pearson(ra, oracles::naive_average_ranks(tb)))
            .epsilon(1e-12));
}

TEST_CASE("kendall tau-b hand values") {
  CHECK(kendall_tau_b({1, 2, 3, 4}, {1, 2, 3, 4}) == doctest::Approx(1.0));
  CHECK(kendall_tau_b({1, 2, 3, 4}, {1, 3, 2, 4}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(kendall_tau_b({1, 1, 2}, {1, 2, 3}) ==
        doctest::Approx(oracles::naive_kendall_tau_b({1, 1, 2}, {1, 2, 3})).epsilon(1e-15));
  CHECK_THROWS_AS(kendall_tau_b({1, 1, 1}, {1, 2, 3}), ValidationError);
}

TEST_CASE("rank statistics agree exactly with pair-enumeration oracles under heavy ties") {
  Rng rng(2718);
  for (int rep = 0; rep < 500; ++rep) {
    const std::size_t n = 12;
    std::vector<double> a(n), b(n);
    bool a_const = true, b_const = true;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.uniform_int(0, 3));
      b[i] = static_cast<double>(rng.uniform_int(0, 3));
      if (a[i] != a[0]) a_const = false;
      if (b[i] != b[0]) b_const = false;
    }
    if (a_const || b_const) continue;
    CHECK(kendall_tau_b(a, b) == oracles::naive_kendall_tau_b(a, b));
    CHECK(spearman(a, b) ==
          doctest::Approx(oracles::naive_pearson(oracles::naive_average_ranks(a),
                                                 oracles::naive_average_ranks(b)))
              .epsilon(1e-12));
  }
}

TEST_CASE("antisymmetry: stat(a, -b) == -stat(a, b)") {
  Rng rng(99);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> a(10), b(10), nb(10);
    for (std::size_t i = 0; i < 10; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
      nb[i] = -b[i];
    }
    CHECK(pearson(a, nb) == doctest::Approx(-pearson(a, b)).epsilon(1e-12));
    CHECK(spearman(a, nb) == doctest::Approx(-spearman(a, b)).epsilon(1e-12));
    CHECK(kendall_tau_b(a, nb) == doctest::Approx(-kendall_tau_b(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("correlation report carries counts, ties and provenance") {
  const CorrelationReport r =
      correlation_report({1, 2, 2, 4}, {1, 3, 2, 4}, "model_z", "oracle_q");
  CHECK(r.n == 4);
  CHECK(r.ties_a == 1);
  CHECK(r.ties_b == 0);
  CHECK(r.column_a == "model_z");
  CHECK(r.pearson <= 1.0);
  const Json j = correlation_report_to_json(r);
  CHECK(j.at("tie_counts").at("a").get<int>() == 1);
  CHECK(j.at("columns").at("b").get<std::string>() == "oracle_q");
}
