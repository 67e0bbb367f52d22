#include "cat/synthgen.hpp"

#include <catch_amalgamated.hpp>

#include <set>
#include <sstream>

using namespace cat;
using Catch::Approx;

namespace {

Vector domain_class_mean(const DomainDataset& ds, int domain, int label) {
  Vector m = Vector::Zero(ds.feature_dim);
  int n = 0;
  for (const auto& ex : ds.domains[domain])
    if (ex.label == label) {
      m += ex.features;
      ++n;
    }
  return m / n;
}

}  // namespace

TEST_CASE("zero shift leaves every domain with the same centroids", "[synthgen]") {
  SynthConfig c;
  c.domain_shift = 0.0;
  for (int k = 0; k < c.num_domains; ++k) {
    const auto t = domain_transform(c, k);
    CHECK(t.rotation.isApprox(Matrix::Identity(c.feature_dim, c.feature_dim), 0.0));
    CHECK(t.translation.isZero(0.0));
  }
  c.noise_sigma = 0.0;
  const auto ds = generate(c);
  for (int k = 1; k < c.num_domains; ++k)
    for (int l = 0; l < c.num_classes; ++l)
      CHECK((domain_class_mean(ds, k, l) - domain_class_mean(ds, 0, l)).norm() == 0.0);
}

TEST_CASE("nonzero shift moves domain centroids apart", "[synthgen]") {
  SynthConfig c;
  c.noise_sigma = 0.0;
  const auto ds = generate(c);
  CHECK((domain_class_mean(ds, 1, 0) - domain_class_mean(ds, 0, 0)).norm() > 0.1);
}

TEST_CASE("counts follow classes x domains x samples", "[synthgen]") {
  SynthConfig c;
  c.num_classes = 3;
  c.num_domains = 4;
  c.samples_per_class_per_domain = 100;
  const auto ds = generate(c);
  CHECK(ds.size() == 1200);
  CHECK(ds.num_domains() == 4);
  std::set<std::int64_t> ids;
  for (const auto& d : ds.domains)
    for (const auto& ex : d) ids.insert(ex.example_id);
  CHECK(ids.size() == 1200);
  ds.validate();
}

TEST_CASE("label noise corrupts the requested fraction", "[synthgen]") {
  SynthConfig c;
  c.num_domains = 2;
  c.num_classes = 5;
  c.samples_per_class_per_domain = 1000;
  const auto clean = generate(c);
  c.label_noise_rate = 0.3;
  const auto noisy = generate(c);
  int changed = 0, total = 0;
  for (int k = 0; k < 2; ++k)
    for (std::size_t i = 0; i < clean.domains[k].size(); ++i) {
      ++total;
      changed += *clean.domains[k][i].label != *noisy.domains[k][i].label;
      CHECK(clean.domains[k][i].features == noisy.domains[k][i].features);
    }
  REQUIRE(total == 10000);
  CHECK(changed / 10000.0 == Approx(0.3).margin(0.03));
}

TEST_CASE("larger separation puts class centroids further apart", "[synthgen]") {
  SynthConfig a, b;
  a.class_separation = 1.0;
  b.class_separation = 4.0;
  const Matrix ca = class_centroids(a), cb = class_centroids(b);
  CHECK((cb.row(0) - cb.row(1)).norm() == Approx(4.0 * (ca.row(0) - ca.row(1)).norm()));
  for (Eigen::Index k = 0; k < cb.rows(); ++k) CHECK(cb.row(k).norm() == Approx(4.0));
}

TEST_CASE("minimal CSV parses", "[synthgen]") {
  std::istringstream in(
      "domain,label,f0,f1\n"
      "0,0,1.5,2\n"
      "0,1,-1,0.25\n"
      "1,-1,3e-2,4\n"
      "1,1,0,0\n");
  const auto ds = read_embeddings_csv(in);
  CHECK(ds.size() == 4);
  CHECK(ds.feature_dim == 2);
  CHECK(ds.num_classes == 2);
  CHECK(ds.num_domains() == 2);
  CHECK_FALSE(ds.domains[1][0].label.has_value());
  CHECK(ds.domains[1][0].features[0] == 0.03);
  CHECK(ds.domains[0][1].features[1] == 0.25);
}

TEST_CASE("label equal to the class count is rejected with its line", "[synthgen]") {
  std::istringstream in(
      "domain,label,f0,f1\n"
      "0,0,1,2\n"
      "0,3,1,2\n");
  try {
    read_embeddings_csv(in, 3);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("ragged and non-numeric rows are parse errors", "[synthgen]") {
  std::istringstream ragged("domain,label,f0,f1\n0,0,1\n");
  CHECK_THROWS_AS(read_embeddings_csv(ragged), ParseError);
  std::istringstream text("domain,label,f0,f1\n0,0,1,2\n0,0,x,2\n");
  try {
    read_embeddings_csv(text);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::istringstream header("dom,label,f0\n");
  CHECK_THROWS_AS(read_embeddings_csv(header), ParseError);
}

TEST_CASE("write then read round-trips features", "[synthgen]") {
  SynthConfig c;
  c.num_domains = 3;
  c.samples_per_class_per_domain = 7;
  const auto ds = generate(c);
  std::stringstream buf;
  write_embeddings_csv(buf, ds);
  const auto back = read_embeddings_csv(buf, c.num_classes);
  REQUIRE(back.size() == ds.size());
  for (int k = 0; k < 3; ++k)
    for (std::size_t i = 0; i < ds.domains[k].size(); ++i) {
      CHECK((back.domains[k][i].features - ds.domains[k][i].features).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK(back.domains[k][i].label == ds.domains[k][i].label);
    }
}

TEST_CASE("regeneration with the same seed is byte-identical", "[synthgen]") {
  SynthConfig c;
  c.samples_per_class_per_domain = 10;
  std::ostringstream a, b, other;
  write_embeddings_csv(a, generate(c));
  write_embeddings_csv(b, generate(c));
  c.seed = 1;
  write_embeddings_csv(other, generate(c));
  CHECK(a.str() == b.str());
  CHECK(a.str() != other.str());
  const std::string text = a.str();
  const auto lines = std::count(text.begin(), text.end(), '\n');
  CHECK(lines == 1 + 5 * 4 * 10);
}

TEST_CASE("invalid synth settings are configuration errors", "[synthgen]") {
  SynthConfig c;
  c.num_classes = 1;
  CHECK_THROWS_AS(generate(c), ConfigError);
  c = {};
  c.label_noise_rate = 1.0;
  CHECK_THROWS_AS(generate(c), ConfigError);
}
