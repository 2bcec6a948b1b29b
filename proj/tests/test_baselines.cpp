#include <doctest.h>

#include <filesystem>
#include <numeric>

#include "puma/baselines.hpp"
#include "puma/errors.hpp"
#include "puma/metrics.hpp"

using namespace puma;

namespace {

const MlpSpec kSpec{{2, 16, 2}, Activation::relu, 3};

TrainConfig base_config(bool ledger = false) {
  TrainConfig tc;
  tc.epochs = 40;
  tc.batch_size = 32;
  tc.learning_rate = 0.1;
  tc.shuffle_seed = 5;
  tc.record_ledger = ledger;
  return tc;
}

}  // namespace

TEST_CASE("retrain excludes marked ids") {
  const auto data = generate(Shape::radial, 300, 0.15, 1);
  const auto full = train(init_mlp(kSpec), data, base_config());
  CHECK(retrain(data, {}, kSpec, base_config()).model.params == full.model.params);

  IdSet marked;
  for (SampleId id = 0; id < 300; id += 7) marked.push_back(id);
  const auto res = retrain(data, marked, kSpec, base_config(true));
  REQUIRE(res.ledger.has_value());
  for (const auto& e : res.ledger->entries) {
    for (auto id : e.members) CHECK_FALSE(contains(marked, id));
  }

  // Batch size clips to what is left.
  IdSet most(data.ids.begin(), data.ids.end() - 10);
  CHECK_NOTHROW(retrain(data, most, kSpec, base_config()));
}

TEST_CASE("SISA partition and selective retraining") {
  const auto data = generate(Shape::radial, 600, 0.15, 2);
  const auto ens = sisa_train(data, 5, kSpec, base_config(), 9);
  REQUIRE(ens.shards.size() == 5);
  std::vector<SampleId> all;
  for (const auto& sh : ens.shards) {
    CHECK(sh.data.size() == 120);
    all.insert(all.end(), sh.data.ids.begin(), sh.data.ids.end());
  }
  CHECK(all.size() == 600);
  CHECK(make_id_set(all) == make_id_set(data.ids));
  CHECK(sisa_members(ens) == make_id_set(data.ids));

  const IdSet inside(ens.shards[2].data.ids.begin(), ens.shards[2].data.ids.begin() + 10);
  const auto r = sisa_remove(ens, make_id_set(inside));
  CHECK(r.retrained == std::vector<std::size_t>{2});
  CHECK(r.dropped.empty());
  for (std::size_t s : {0u, 1u, 3u, 4u}) {
    CHECK(r.ensemble.shards[s].model.params == ens.shards[s].model.params);
  }
  CHECK_FALSE(r.ensemble.shards[2].model.params == ens.shards[2].model.params);
  CHECK(r.ensemble.shards[2].data.size() == 110);

  IdSet spread;
  for (const auto& sh : ens.shards) spread.push_back(sh.data.ids[0]);
  CHECK(sisa_remove(ens, make_id_set(spread)).retrained.size() == 5);

  const auto whole = sisa_remove(ens, make_id_set(ens.shards[1].data.ids));
  CHECK(whole.dropped == std::vector<std::size_t>{1});
  CHECK(whole.ensemble.shards.size() == 4);
  for (const auto& sh : whole.ensemble.shards) CHECK(sh.index != 1);

  // Grouped ids concentrate in the fewest shards.
  IdSet grouped(data.ids.begin(), data.ids.begin() + 100);
  const auto g = sisa_train(data, 5, kSpec, base_config(), 9, grouped);
  std::size_t touched = 0;
  for (const auto& sh : g.shards) {
    for (auto id : sh.data.ids) {
      if (contains(grouped, id)) {
        ++touched;
        break;
      }
    }
  }
  CHECK(touched == 1);
}

TEST_CASE("SISA prediction and persistence") {
  const auto data = generate(Shape::two_moons, 200, 0.2, 3);
  const auto one = sisa_train(data, 1, kSpec, base_config(), 4);
  const std::vector<double> x{0.3, 0.2};
  CHECK(sisa_predict(one, x) == forward(one.shards[0].model, x));

  auto same = sisa_train(data, 3, kSpec, base_config(), 4);
  for (auto& sh : same.shards) sh.model = same.shards[0].model;
  const auto p = sisa_predict(same, x);
  const auto q = forward(same.shards[0].model, x);
  for (std::size_t c = 0; c < 2; ++c) CHECK(p[c] == doctest::Approx(q[c]).epsilon(1e-14));

  const auto ens = sisa_train(data, 4, kSpec, base_config(), 4);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto pr = sisa_predict(ens, data.row(i));
    CHECK(std::abs(pr[0] + pr[1] - 1.0) <= 1e-12);
  }

  const auto dir = std::filesystem::temp_directory_path() / "puma_sisa_test";
  std::filesystem::remove_all(dir);
  save_ensemble(ens, dir);
  const auto back = load_ensemble(dir);
  REQUIRE(back.shards.size() == ens.shards.size());
  for (std::size_t s = 0; s < ens.shards.size(); ++s) {
    CHECK(back.shards[s].model.params == ens.shards[s].model.params);
    CHECK(back.shards[s].data.ids == ens.shards[s].data.ids);
  }
  CHECK(sisa_predict(back, x) == sisa_predict(ens, x));
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_ensemble(dir), IoError);
}

TEST_CASE("Amnesiac subtraction identities") {
  const auto data = generate(Shape::radial, 300, 0.15, 5);
  const auto trained = train(init_mlp(kSpec), data, base_config(true));
  const auto& ledger = *trained.ledger;

  const auto none = amnesiac_remove(trained.model, ledger, {});
  CHECK(none.model.params == trained.model.params);
  CHECK(none.removed_entries.empty());

  const auto all = amnesiac_remove(trained.model, ledger, make_id_set(data.ids));
  CHECK(all.model.params == ledger.initial);
  CHECK(all.removed_entries.size() == ledger.entries.size());

  const IdSet some{3, 100};
  const auto part = amnesiac_remove(trained.model, ledger, some);
  for (auto pos : part.removed_entries) {
    const auto& m = ledger.entries[pos].members;
    CHECK((std::find(m.begin(), m.end(), 3) != m.end() ||
           std::find(m.begin(), m.end(), 100) != m.end()));
  }

  MlpModel other = trained.model;
  other.params[0] += 1.0;
  CHECK_THROWS(amnesiac_remove(other, ledger, some));
}

TEST_CASE("Amnesiac: ordered marking survives, random marking collapses") {
  const auto data = generate(Shape::radial, 600, 0.15, 6);
  const auto s = split(data, 0.2, 7);
  const auto marked = mark_for_removal(s.train, {Scenario::random, 0.2, 5, 8}).ids;

  const MlpSpec spec{{2, 64, 32, 2}, Activation::relu, 3};
  auto tc = base_config(true);
  tc.epochs = 100;
  const auto random = train(init_mlp(spec), s.train, tc);
  tc.grouped_ids = marked;
  const auto ordered = train(init_mlp(spec), s.train, tc);

  const auto r = amnesiac_remove(random.model, *random.ledger, marked);
  const auto o = amnesiac_remove(ordered.model, *ordered.ledger, marked);
  const double acc_r = accuracy(r.model, s.test);
  const double acc_o = accuracy(o.model, s.test);
  MESSAGE("amnesiac accuracy ordered " << acc_o << ", random " << acc_r);
  CHECK(acc_o >= acc_r + 0.05);
  CHECK(std::abs(acc_r - 0.5) <= 0.1);
  CHECK(static_cast<double>(r.removed_entries.size()) >= 0.9 * random.ledger->entries.size());
}
