#include "genalign/formats.hpp"
#include "genalign/config.hpp"
#include "genalign/pretrain.hpp"
#include "loss_checks.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace genalign;
using nd::Graph;
using nd::Matrix;

namespace {

// Plain-loop softmax / CE used as the independent oracle.
std::vector<double> softmax_vec(const Matrix<double>& row, double shift_scale, const Matrix<double>* center, double tau) {
  std::vector<double> z(static_cast<std::size_t>(row.cols()));
  double mx = -1e300;
  for (int c = 0; c < row.cols(); ++c) {
    z[static_cast<std::size_t>(c)] = (row(0, c) - (center ? (*center)(0, c) : 0.0) * shift_scale) / tau;
    mx = std::max(mx, z[static_cast<std::size_t>(c)]);
  }
  double s = 0.0;
  for (auto& v : z) s += (v = std::exp(v - mx));
  for (auto& v : z) v /= s;
  return z;
}

double ce(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s -= p[i] * std::log(q[i]);
  return s;
}

PretrainConfig tiny_pretrain() {
  PretrainConfig c;
  c.aggregator = checks::tiny_aggregator();
  c.head = checks::tiny_head();
  c.epochs = 2;
  c.batch_size = 1;
  c.n_local = 2;
  return c;
}

std::vector<CellBag> random_bags(int n, int cells, int dim, Rng& rng) {
  std::vector<CellBag> bags;
  for (int i = 0; i < n; ++i) bags.push_back({"p" + std::to_string(i), test::randn(cells, dim, rng).cast<float>()});
  return bags;
}

}  // namespace

TEST_CASE("dino_loss: uniform and one-hot teachers give log K") {
  Graph<double> g;
  const Matrix<double> zero = test::zeros(1, 4);
  auto student = g.variable(test::zeros(3, 4));
  CHECK(dino_loss(test::zeros(2, 4), student, zero, 0.04, 0.1).item() == doctest::Approx(std::log(4.0)));
  // a very peaked teacher row is one-hot to double precision
  Matrix<double> peaked = test::zeros(1, 4);
  peaked(0, 2) = 100.0;
  CHECK(dino_loss(peaked, student, zero, 0.04, 0.1).item() == doctest::Approx(std::log(4.0)));
}

TEST_CASE("dino_loss: 2 globals + 2 locals equals the brute-force pair mean") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 5;
    const Matrix<double> t = test::randn(2, k, rng);
    const Matrix<double> s = test::randn(4, k, rng);
    const Matrix<double> center = test::randn(1, k, rng, 0.3);
    const double tau_t = 0.05, tau_s = 0.1;
    double brute = 0.0;
    int pairs = 0;
    for (int gi = 0; gi < 2; ++gi) {
      for (int k2 = 0; k2 < 4; ++k2) {
        if (gi == k2) continue;
        brute += ce(softmax_vec(t.row(gi), 1.0, &center, tau_t), softmax_vec(s.row(k2), 0.0, nullptr, tau_s));
        ++pairs;
      }
    }
    CHECK(pairs == 6);
    Graph<double> g;
    CHECK(dino_loss(t, g.variable(s), center, tau_t, tau_s).item() == doctest::Approx(brute / 6).epsilon(1e-12));
  }
}

TEST_CASE("dino_loss: argument errors") {
  Graph<double> g;
  const Matrix<double> c = test::zeros(1, 3);
  CHECK_THROWS_AS(dino_loss(test::zeros(0, 3), g.variable(test::zeros(2, 3)), c, 0.04, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(dino_loss(test::zeros(1, 3), g.variable(test::zeros(1, 3)), c, 0.04, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(dino_loss(test::zeros(1, 4), g.variable(test::zeros(2, 3)), c, 0.04, 0.1), nd::ShapeError);
  CHECK_THROWS_AS(dino_loss(test::zeros(1, 3), g.variable(test::zeros(2, 3)), test::zeros(1, 2), 0.04, 0.1),
                  nd::ShapeError);
}

TEST_CASE("ibot_loss: examples") {
  Graph<double> g;
  const Matrix<double> zero = test::zeros(1, 3);
  auto s = g.variable(Matrix<double>::Random(3, 3));
  const std::vector<int> none;
  CHECK(ibot_loss(Matrix<double>::Random(3, 3).eval(), s, std::span<const int>(none), zero, 0.05, 0.1).item() == 0.0);

  // teacher and student distributions coincide when logits_t / tau_t == logits_s / tau_s
  const Matrix<double> ls = (Matrix<double>(1, 3) << 0.3, -0.2, 0.9).finished();
  const Matrix<double> lt = ls * 0.5;  // tau_t = 0.05 = 0.5 * tau_s
  const std::vector<int> one{0};
  const auto p = softmax_vec(ls, 0.0, nullptr, 0.1);
  double entropy = 0.0;
  for (double v : p) entropy -= v * std::log(v);
  CHECK(ibot_loss(lt, g.variable(ls), std::span<const int>(one), zero, 0.05, 0.1).item() ==
        doctest::Approx(entropy).epsilon(1e-12));

  Rng rng(4);
  const Matrix<double> t = test::randn(4, 3, rng), st = test::randn(4, 3, rng), c = test::randn(1, 3, rng, 0.2);
  const std::vector<int> two{1, 3};
  const double hand = 0.5 * (ce(softmax_vec(t.row(1), 1.0, &c, 0.05), softmax_vec(st.row(1), 0.0, nullptr, 0.1)) +
                             ce(softmax_vec(t.row(3), 1.0, &c, 0.05), softmax_vec(st.row(3), 0.0, nullptr, 0.1)));
  CHECK(ibot_loss(t, g.variable(st), std::span<const int>(two), c, 0.05, 0.1).item() == doctest::Approx(hand).epsilon(1e-12));

  const std::vector<int> bad{4};
  CHECK_THROWS_AS(ibot_loss(t, g.variable(st), std::span<const int>(bad), c, 0.05, 0.1), std::out_of_range);
}

TEST_CASE("ema_update and center_update examples") {
  ParamSet<double> t, s;
  t.add("w", test::zeros(2, 2));
  s.add("w", test::ones(2, 2));
  auto t1 = t;
  ema_update(t1, s, 0.99);
  CHECK(t1.at("w")(1, 1) == doctest::Approx(0.01));
  auto t2 = t;
  ema_update(t2, s, 1.0);
  CHECK(t2.at("w") == t.at("w"));
  auto t3 = t;
  ema_update(t3, s, 0.0);
  CHECK(t3.at("w") == s.at("w"));
  ParamSet<double> other;
  other.add("w", test::zeros(3, 2));
  CHECK_THROWS_AS(ema_update(t3, other, 0.5), nd::ShapeError);

  Matrix<double> c = test::zeros(1, 2);
  center_update(c, test::ones(4, 2), 0.9);
  CHECK(c(0, 0) == doctest::Approx(0.1));
  Matrix<double> c0 = (Matrix<double>(1, 2) << 3, 4).finished();
  center_update(c0, test::ones(2, 2), 1.0);
  CHECK(c0(0, 1) == 4.0);
  Matrix<double> batch = (Matrix<double>(2, 2) << 1, 2, 3, 6).finished();
  center_update(c0, batch, 0.0);
  CHECK(c0 == (Matrix<double>(1, 2) << 2, 4).finished());
  CHECK_THROWS_AS(center_update(c0, test::zeros(0, 2), 0.9), std::invalid_argument);
}

TEST_CASE("teacher temperature warms up linearly over the first tenth of steps") {
  PretrainConfig c;
  CHECK(teacher_temperature(c, 0, 100) == doctest::Approx(0.04));
  CHECK(teacher_temperature(c, 5, 100) == doctest::Approx(0.055));
  CHECK(teacher_temperature(c, 10, 100) == doctest::Approx(0.07));
  CHECK(teacher_temperature(c, 99, 100) == doctest::Approx(0.07));
  CHECK(teacher_temperature(c, 0, 5) == doctest::Approx(0.07));
}

TEST_CASE("patient_img_loss: lambda 0 is exactly L_DINO and the teacher stays out of the graph") {
  const auto cfg = checks::tiny_aggregator();
  Rng rng(8);
  const auto agg = init_aggregator<double>(cfg, rng);
  const auto head = init_head<double>(cfg.embed_dim, checks::tiny_head(), rng);
  const auto t_agg = agg, t_head = head;
  const Matrix<double> cells = test::randn(9, cfg.input_dim, rng);
  const auto views = sample_views(9, 2, 3, 0.3, rng);
  ImgLossSettings<double> st{test::zeros(1, 6), test::zeros(1, 6), 0.04, 0.1, 0.0};

  Graph<double> g;
  BoundParams<double> pa(g, agg, true), ph(g, head, true);
  const auto before = g.size();
  auto out = patient_img_loss(pa, ph, t_agg, t_head, cfg, g.constant(cells), std::span<const BagView>(views), st);
  CHECK(out.total.item() == out.dino.item());
  CHECK(out.total.id() == out.dino.id());
  CHECK(out.ibot.item() > 0.0);
  CHECK(out.teacher_cls_logits.rows() == 2);
  // every variable in the student graph was created by the student binding
  int vars = 0;
  for (int id = 0; id < static_cast<int>(g.size()); ++id) vars += g.is_variable(id) ? 1 : 0;
  CHECK(vars == static_cast<int>(before));
  g.backward(out.total);
  const auto grads = pa.gradients();
  CHECK(grads.size() == agg.size());

  st.lambda = 0.5;
  Graph<double> g2;
  BoundParams<double> qa(g2, agg, true), qh(g2, head, true);
  auto mixed = patient_img_loss(qa, qh, t_agg, t_head, cfg, g2.constant(cells), std::span<const BagView>(views), st);
  CHECK(mixed.total.item() == doctest::Approx(mixed.dino.item() + 0.5 * mixed.ibot.item()).epsilon(1e-12));
}

TEST_CASE("grad_check: every loss, 20 random instances each") {
  for (const auto& s : checks::all_loss_checks(20, 1234)) {
    INFO(s.loss << ": " << s.passed << "/" << s.instances << " worst rel " << s.worst_rel);
    CHECK(s.instances == 20);
    CHECK(s.ok());
  }
}

TEST_CASE("grad_check: L_img summed over a 2-patient microbatch") {
  const auto cfg = checks::tiny_aggregator();
  const auto hcfg = checks::tiny_head();
  Rng rng(21);
  const auto agg = init_aggregator<double>(cfg, rng);
  const auto head = init_head<double>(cfg.embed_dim, hcfg, rng);
  const Matrix<double> c1 = test::randn(7, cfg.input_dim, rng), c2 = test::randn(5, cfg.input_dim, rng);
  const auto v1 = sample_views(7, 2, 2, 0.3, rng), v2 = sample_views(5, 2, 2, 0.3, rng);
  ImgLossSettings<double> st{test::randn(1, hcfg.prototypes, rng, 0.3), test::randn(1, hcfg.prototypes, rng, 0.3), 0.05,
                             0.1, 1.0};
  Matrix<double> flat(1, static_cast<nd::Index>(agg.element_count() + head.element_count()));
  flat << flatten(agg), flatten(head);
  const auto n_agg = static_cast<nd::Index>(agg.element_count());
  auto f = [&](Graph<double>& g, nd::Var<double> x) {
    auto pa = BoundParams<double>::from_flat(nd::slice_cols(x, 0, n_agg), agg);
    auto ph = BoundParams<double>::from_flat(nd::slice_cols(x, n_agg, x.cols() - n_agg), head);
    auto l1 = patient_img_loss(pa, ph, agg, head, cfg, g.constant(c1), std::span<const BagView>(v1), st).total;
    auto l2 = patient_img_loss(pa, ph, agg, head, cfg, g.constant(c2), std::span<const BagView>(v2), st).total;
    return nd::scalar_mul(nd::add(l1, l2), 0.5);
  };
  const auto rep = nd::grad_check(f, flat, 1e-4, 1e-4, 1e-6, 300, 5);
  INFO("rel " << rep.max_rel_error);
  CHECK(rep.passed);
}

TEST_CASE("train_pretrain: one patient with batch size 1 runs") {
  Rng rng(1);
  auto cfg = tiny_pretrain();
  const auto bags = random_bags(1, 6, cfg.aggregator.input_dim, rng);
  const auto r = train_pretrain(bags, cfg);
  REQUIRE(r.history.size() == 2);
  for (const auto& e : r.history) {
    CHECK(std::isfinite(e.total));
    CHECK(e.dino_loss > 0.0);
  }
  CHECK(r.state.epochs_done == 2);
  // prototype rows stay unit-norm after updates
  const auto& v = r.state.student_head.at("last.v");
  for (int i = 0; i < v.rows(); ++i) CHECK(v.row(i).norm() == doctest::Approx(1.0).epsilon(1e-5));
  // teacher moved towards the student but is not equal to it
  CHECK(!(r.state.teacher_agg.at(0) == r.state.student_agg.at(0)));
}

TEST_CASE("train_pretrain: lambda 0 logs total == dino") {
  Rng rng(2);
  auto cfg = tiny_pretrain();
  cfg.lambda = 0.0;
  cfg.epochs = 1;
  const auto r = train_pretrain(random_bags(3, 8, cfg.aggregator.input_dim, rng), cfg);
  CHECK(r.history[0].total == r.history[0].dino_loss);
}

TEST_CASE("train_pretrain: identical seeds give identical checkpoints across thread counts") {
  Rng rng(3);
  auto cfg = tiny_pretrain();
  cfg.batch_size = 2;
  const auto bags = random_bags(4, 8, cfg.aggregator.input_dim, rng);
  const auto dir = std::filesystem::temp_directory_path() / "genalign_pretrain_test";
  std::filesystem::create_directories(dir);
  const auto a = train_pretrain(bags, cfg);
  cfg.threads = 3;
  const auto b = train_pretrain(bags, cfg);
  cfg.threads = 1;
  io::write_checkpoint(dir / "a.gbck", pretrain_checkpoint(a, cfg));
  io::write_checkpoint(dir / "b.gbck", pretrain_checkpoint(b, cfg));
  CHECK(test::file_bytes(dir / "a.gbck") == test::file_bytes(dir / "b.gbck"));

  const auto loaded = load_pretrain_checkpoint(io::read_checkpoint(dir / "a.gbck"));
  CHECK(loaded.state.epochs_done == 2);
  CHECK(loaded.state.teacher_agg.at("cls_token") == a.state.teacher_agg.at("cls_token"));
  CHECK(loaded.config.to_json() == cfg.to_json());
  std::filesystem::remove_all(dir);
}

TEST_CASE("PretrainConfig: strict JSON") {
  PretrainConfig c;
  CHECK(PretrainConfig::from_json(c.to_json()).to_json() == c.to_json());
  auto j = c.to_json();
  j["lamda"] = 1.0;
  CHECK_THROWS_AS(PretrainConfig::from_json(j), ConfigError);
  auto k = c.to_json();
  k["ema_momentum"] = 1.0;
  CHECK_THROWS(PretrainConfig::from_json(k));
  auto t = c.to_json();
  t["student_temp"] = 0.0;
  CHECK_THROWS(PretrainConfig::from_json(t));
}
