#include <catch_amalgamated.hpp>

#include <chrono>
#include <numeric>
#include <set>

#include "cllmr/ablation.hpp"
#include "cllmr/inferencer.hpp"
#include "cllmr/synthetic.hpp"
#include "cllmr/trainer.hpp"
#include "support.hpp"

using namespace cllmr;
using namespace cllmr::inferencer;
using Catch::Matchers::WithinAbs;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index k = 0;
  for (double x : v) out(k++) = x;
  return out;
}

// Full sort by (score desc, index asc), then plain set arithmetic.
struct Oracle {
  std::vector<Index> order;
  double recall, ndcg;
};

Oracle brute(const Vector& scores, const std::set<Index>& excluded, const std::set<Index>& relevant, Index n) {
  std::vector<std::pair<double, Index>> all;
  for (Index i = 0; i < scores.size(); ++i)
    if (!excluded.count(i)) all.emplace_back(-scores(i), i);
  std::sort(all.begin(), all.end());
  Oracle o{{}, 0, 0};
  for (auto& p : all) o.order.push_back(p.second);
  double hits = 0, dcg = 0, idcg = 0;
  for (Index p = 0; p < n && p < static_cast<Index>(o.order.size()); ++p)
    if (relevant.count(o.order[static_cast<std::size_t>(p)])) {
      hits += 1;
      dcg += 1.0 / std::log2(p + 2.0);
    }
  for (Index p = 0; p < std::min<Index>(n, static_cast<Index>(relevant.size())); ++p) idcg += 1.0 / std::log2(p + 2.0);
  o.recall = hits / static_cast<double>(relevant.size());
  o.ndcg = dcg / idcg;
  return o;
}

}  // namespace

TEST_CASE("debias subtracts the scaled gate") {
  const Vector e = vec({1, 1}), g = vec({0.5, 0.5});
  CHECK(debias(e, g, 1.0) == vec({0.5, 0.5}));
  CHECK(debias(e, g, 0.0) == e);
  CHECK_THROWS_AS(debias(e, g, -0.1), ParameterError);
  CHECK_THROWS_AS(debias(e, vec({1}), 1.0), ShapeError);

  const Matrix gated = Matrix::Random(3, 2), gt = Matrix::Random(3, 2), collab = Matrix::Random(3, 2);
  CHECK(debias(gated, gt, collab, 0.4, DebiasMode::subtract_gate) == gated - 0.4 * gt);
  CHECK(debias(gated, gt, collab, 0.4, DebiasMode::subtract_gated) == gated - 0.4 * gt.cwiseProduct(collab));
}

TEST_CASE("large alpha flips a popular item below a niche one") {
  // User with no gate mass; item 0 is strongly gated (popular), item 1 barely.
  const Vector eu = vec({1, 0}), gu = vec({0, 0});
  Matrix e(2, 2), g(2, 2);
  e << 1.0, 0, 0.7, 0;
  g << 0.8, 0, 0.1, 0;
  // Scores 1 - 0.8a and 0.7 - 0.1a cross at a = 3/7.
  for (int k = 0; k <= 100; ++k) {
    const double a = k * 0.01;
    Matrix items(2, 2);
    for (Index i = 0; i < 2; ++i) items.row(i) = debias(Vector(e.row(i).transpose()), Vector(g.row(i).transpose()), a).transpose();
    const Vector u = debias(eu, gu, a);
    const Vector s = items * u;
    const auto got = rank_items(u, items, {});
    CHECK(got == brute(s, {}, {0}, 2).order);
    if (a < 3.0 / 7.0 - 1e-9) CHECK(got.front() == 0);
    if (a > 3.0 / 7.0 + 1e-9) CHECK(got.front() == 1);
  }
}

TEST_CASE("ranking order, ties and exclusions") {
  CHECK(top_n(vec({0.2, 0.9, 0.5}), {}, 3) == std::vector<Index>{1, 2, 0});
  CHECK(top_n(vec({0.5, 0.5, 0.5}), {}, 3) == std::vector<Index>{0, 1, 2});
  CHECK(top_n(vec({0.1, 0.7, 0.7, 0.3}), {1}, 2) == std::vector<Index>{2, 3});
  CHECK(top_n(vec({1, 2}), {0, 1}, 5).empty());
  CHECK(top_n(vec({1, 2, 3}), {}, 10).size() == 3);
  CHECK(rank_items(vec({1, 0}), Matrix::Identity(2, 2), {0}) == std::vector<Index>{1});
}

TEST_CASE("recall and NDCG closed values") {
  const std::vector<Index> ranked{0, 5, 3};
  CHECK(recall_at_n(ranked, {0, 9}, 2) == 0.5);
  CHECK(recall_at_n(ranked, {0, 3}, 3) == 1.0);
  CHECK(recall_at_n(ranked, {7}, 3) == 0.0);
  // One hit at rank 2 among one relevant item: 1 / log2(3).
  CHECK_THAT(ndcg_at_n(ranked, {5}, 10), WithinAbs(0.63093, 1e-5));
  CHECK(ndcg_at_n(ranked, {0}, 1) == 1.0);
  CHECK_THROWS_AS(recall_at_n(ranked, {}, 10), MetricError);
  CHECK_THROWS_AS(ndcg_at_n(ranked, {1}, 0), MetricError);
}

TEST_CASE("metrics agree with a brute-force oracle on random instances") {
  Rng rng(42);
  std::uniform_int_distribution<Index> size(1, 10);
  std::uniform_real_distribution<double> unif(0, 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int t = 0; t < 100; ++t) {
    const Index m = size(rng);
    Vector s(m);
    // Coarse scores so ties happen often.
    for (Index i = 0; i < m; ++i) s(i) = std::floor(unif(rng) * 4) / 4;
    std::set<Index> ex, rel;
    for (Index i = 0; i < m; ++i) {
      const double r = unif(rng);
      if (r < 0.2)
        ex.insert(i);
      else if (r < 0.6)
        rel.insert(i);
    }
    if (rel.empty()) rel.insert(m - 1), ex.erase(m - 1);
    const std::vector<Index> exv(ex.begin(), ex.end()), relv(rel.begin(), rel.end());
    const Index n = size(rng);
    const auto got = top_n(s, exv, n);
    const Oracle o = brute(s, ex, rel, n);
    const std::vector<Index> want(o.order.begin(), o.order.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(o.order.size())));
    CHECK(got == want);
    CHECK(recall_at_n(got, relv, n) == o.recall);
    CHECK(ndcg_at_n(got, relv, n) == o.ndcg);
  }
  CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
}

TEST_CASE("recall is monotone in N") {
  Rng rng(3);
  std::uniform_real_distribution<double> unif(0, 1);
  for (int t = 0; t < 50; ++t) {
    Vector s(30);
    for (Index i = 0; i < 30; ++i) s(i) = unif(rng);
    const auto ranked = top_n(s, {}, 30);
    const std::vector<Index> rel{1, 4, 9, 16, 25};
    double prev = 0;
    for (Index n = 1; n <= 30; ++n) {
      const double r = recall_at_n(ranked, rel, n);
      CHECK(r >= prev);
      prev = r;
    }
    CHECK(prev == 1.0);
  }
}

TEST_CASE("relative improvement") {
  CHECK_THAT(improvement(0.09813, 0.09665), WithinAbs(1.53, 0.01));
  CHECK(improvement(0.2, 0.2) == 0.0);
  CHECK_THAT(improvement(0.11, 0.1), WithinAbs(10.0, 1e-9));
  CHECK_THROWS_AS(improvement(0.1, 0.0), ParameterError);
  CHECK_THROWS_AS(improvement(0.1, -1.0), ParameterError);
}

TEST_CASE("evaluate averages over users with relevant items") {
  Matrix users(3, 2), items(3, 2);
  users << 1, 0, 0, 1, 1, 1;
  items << 1, 0, 0, 1, 0.5, 0.5;
  InferenceConfig cfg;
  cfg.n_list = {1, 2};
  const auto rep = evaluate(users, items, {{0}, {2}, {}}, {{}, {1}, {}}, cfg);
  CHECK(rep.users_evaluated == 2);
  CHECK(rep.users_skipped == 1);
  // User 0 ranks 0 first; user 1 (item 1 excluded) ranks 2 then 0.
  CHECK(rep.recall.at(1) == 1.0);
  CHECK(rep.recall.at(2) == 1.0);
  CHECK(rep.per_user.size() == 2);
  const auto j = to_json(rep);
  CHECK(j.at("recall").contains("recall@1"));
  CHECK_FALSE(j.contains("runtime_seconds"));
  cfg.n_list = {0};
  CHECK_THROWS_AS(evaluate(users, items, {{0}, {2}, {}}, {{}, {1}, {}}, cfg), ParameterError);
}

TEST_CASE("effective rank extremes") {
  Matrix same(5, 4);
  for (Index r = 0; r < 5; ++r) same.row(r) << 1, 2, 3, 4;
  CHECK_THAT(singular_spectrum(same).effective_rank, WithinAbs(1.0, 1e-9));
  CHECK(singular_spectrum(same, 0.5).collapsed);
  CHECK_THAT(singular_spectrum(Matrix::Identity(6, 6)).effective_rank, WithinAbs(6.0, 1e-9));
  CHECK_FALSE(singular_spectrum(Matrix::Identity(6, 6)).collapsed);
  CHECK(effective_rank(Vector::Zero(3)) == 1.0);
  CHECK_THROWS_AS(singular_spectrum(Matrix(0, 3)), ParameterError);
}

TEST_CASE("effective rank matches an SVD oracle") {
  std::srand(11);
  const Matrix t = Matrix::Random(100, 32);
  Eigen::JacobiSVD<Matrix> svd(t);
  const Vector s = svd.singularValues();
  const Vector p = s / s.sum();
  double h = 0;
  for (Index k = 0; k < p.size(); ++k) h -= p(k) * std::log(p(k));
  const auto d = singular_spectrum(t);
  CHECK_THAT(d.effective_rank, WithinAbs(std::exp(h), 1e-8));
  for (Index k = 1; k < d.singular_values.size(); ++k) CHECK(d.singular_values(k) <= d.singular_values(k - 1));
  const std::string csv = spectrum_csv(d);
  CHECK(csv.rfind("index,value\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 33);
}

namespace {

AblationInputs small_inputs(dataio::Splits& splits, dataio::NormalizedAdjacency& adj) {
  synthetic::Options o;
  o.n_users = 80;
  o.n_items = 50;
  o.min_degree = 3;
  o.max_degree = 6;
  o.seed = 3;
  const auto d = synthetic::generate(o);
  dataio::InteractionDataset full;
  full.n_users = o.n_users;
  full.n_items = o.n_items;
  for (const auto& r : d.records) full.interactions.push_back({r.user, r.item, 1.0, std::nullopt});
  splits = dataio::split_dataset(full, {3, 1, 1}, 3);
  adj = dataio::build_normalized_adjacency(splits.train);
  std::srand(5);
  AblationInputs in;
  in.splits = &splits;
  in.adjacency = &adj;
  in.user_text = Matrix::Random(o.n_users, 8);
  in.item_text = Matrix::Random(o.n_items, 8);
  in.factors = spectrum::truncated_svd(splits.train, 4, 3);
  return in;
}

AblationSettings small_settings() {
  AblationSettings s;
  s.model.dim = 8;
  s.model.hidden = 16;
  s.train.lr = 0.01;
  s.train.batch_size = 64;
  s.train.max_epochs = 3;
  s.train.seed = 2;
  return s;
}

}  // namespace

TEST_CASE("alpha zero reproduces the factual ranking for every user") {
  dataio::Splits splits;
  dataio::NormalizedAdjacency adj;
  const auto in = small_inputs(splits, adj);
  const auto r = run_ablation(Variant::full, in, small_settings());
  InferenceConfig cf, fact;
  cf.alpha = 0.0;
  fact.mode = InferenceMode::factual;
  const auto [cu, ci] = trainer::scoring_tables(r.state, cf);
  const auto [fu, fi] = trainer::scoring_tables(r.state, fact);
  const auto exclude = splits.train.items_by_user();
  for (Index u = 0; u < r.state.n_users; ++u)
    CHECK(rank_items(Vector(cu.row(u).transpose()), ci, exclude[static_cast<std::size_t>(u)]) ==
          rank_items(Vector(fu.row(u).transpose()), fi, exclude[static_cast<std::size_t>(u)]));

  // And a large alpha does change something.
  InferenceConfig big;
  big.alpha = 5.0;
  const auto [bu, bi] = trainer::scoring_tables(r.state, big);
  CHECK_FALSE(bu == fu);
}

TEST_CASE("ablation variants toggle the intended pieces") {
  dataio::Splits splits;
  dataio::NormalizedAdjacency adj;
  const auto in = small_inputs(splits, adj);
  auto s = small_settings();
  s.inference.alpha = 0.0;
  const auto full = run_ablation(Variant::full, in, s);
  const auto wo_conf = run_ablation(Variant::wo_conf, in, s);
  CHECK(nlohmann::json(to_json(full.report)).dump() == nlohmann::json(to_json(wo_conf.report)).dump());

  const auto base = run_ablation(Variant::base, in, small_settings());
  CHECK_FALSE(base.side_spectrum.has_value());
  const auto losses = active_losses(base.state);
  CHECK(losses.contains("loss_bpr"));
  CHECK_FALSE(losses.contains("loss_align"));
  CHECK_FALSE(losses.contains("loss_elbo"));
  CHECK(active_losses(full.state).contains("loss_align"));

  CHECK(variant_spec(Variant::wo_sse).encoder == trainer::EncoderKind::baseline);
  CHECK(variant_spec(Variant::wo_sign).noise_mode == spectrum::NoiseMode::symmetric);
  CHECK(variant_conditioners(Variant::wo_noise, s.conditioners).noise_scale == 0.0);
  for (auto v : all_variants()) CHECK(parse_variant(to_string(v)) == v);
  CHECK_THROWS_AS(parse_variant("nope"), ParameterError);
}

TEST_CASE("NDCG can fall as N grows even though recall cannot") {
  // Relevant {0, 9}: item 0 ranked first, item 9 never shown.
  const std::vector<Index> ranked{0, 1, 2};
  CHECK(ndcg_at_n(ranked, {0, 9}, 1) == 1.0);
  CHECK_THAT(ndcg_at_n(ranked, {0, 9}, 2), WithinAbs(1.0 / (1.0 + 1.0 / std::log2(3.0)), 1e-15));
  CHECK(recall_at_n(ranked, {0, 9}, 2) >= recall_at_n(ranked, {0, 9}, 1));
}

TEST_CASE("NDCG is one exactly when the relevant items lead the ranking") {
  Rng rng(8);
  for (int t = 0; t < 200; ++t) {
    std::vector<Index> ranked(8);
    std::iota(ranked.begin(), ranked.end(), 0);
    std::shuffle(ranked.begin(), ranked.end(), rng);
    const std::vector<Index> rel{0, 1, 2};
    const Index n = 1 + t % 8;
    const std::size_t need = std::min<std::size_t>(rel.size(), static_cast<std::size_t>(n));
    bool leads = true;
    for (std::size_t p = 0; p < need; ++p) leads = leads && ranked[p] <= 2;
    CHECK((ndcg_at_n(ranked, rel, n) == 1.0) == leads);
  }
}
