// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any fails.
//
// Scratch output goes to $TMPDIR/pbfqe_acceptance (wiped at start). The
// trend criteria run the shipped configs; PBFQE_WORKERS sets the pool size.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "oracles.hpp"
#include "pbfqe/experiment.hpp"

using namespace pbfqe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

const fs::path& scratch_root() {
  static const fs::path root = fs::temp_directory_path() / "pbfqe_acceptance";
  return root;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig shipped(const std::string& name, const std::string& run) {
  ExperimentConfig c = load_experiment_config((fs::path(PBFQE_SOURCE_DIR) / "configs" / (name + ".json")).string());
  c.output_dir = (scratch_root() / run / name).string();
  return c;
}

unsigned workers() {
  try {
    return workers_from_env();
  } catch (const ConfigError&) {
    return 1;
  }
}

// Runs a shipped config once (cached by name) and returns its records.
const std::vector<ExperimentRecord>& shipped_records(const std::string& name) {
  static std::map<std::string, std::vector<ExperimentRecord>> cache;
  auto it = cache.find(name);
  if (it != cache.end()) return it->second;
  const ExperimentConfig c = shipped(name, "first");
  RunOptions opt;
  opt.workers = workers();
  const auto s = run_experiment(c, opt);
  if (s.failed > 0) throw Error(name + ": " + std::to_string(s.failed) + " cells failed");
  return cache[name] = load_records((fs::path(c.output_dir) / "records.csv").string());
}

template <typename Key>
std::map<Key, double> medians(const std::vector<ExperimentRecord>& recs, std::function<Key(const ExperimentRecord&)> key,
                              std::function<double(const ExperimentRecord&)> value) {
  std::map<Key, std::vector<double>> g;
  for (const auto& r : recs) g[key(r)].push_back(value(r));
  std::map<Key, double> m;
  for (auto& [k, v] : g) m[k] = stats::median(v);
  return m;
}

std::string describe_trend(const std::map<std::size_t, double>& med, const stats::DecayFit& fit, bool& decreasing) {
  std::string s;
  decreasing = true;
  double prev = INFINITY;
  for (const auto& [k, v] : med) {
    s += (s.empty() ? "" : ", ") + std::to_string(k) + ":" + fmt(v);
    decreasing = decreasing && v < prev;
    prev = v;
  }
  return "medians {" + s + "}, slope " + fmt(fit.slope, 3) + " band [" + fmt(fit.band_lo, 3) + ", " +
         fmt(fit.band_hi, 3) + "]";
}

// 1. Empirical choice frequencies against the softmax law.
Outcome preference_fidelity() {
  constexpr int kTriples = 10;
  constexpr std::size_t kDraws = 100000;
  Rng tr = make_rng(derive_seed(0xC1, {0}));
  std::vector<std::vector<double>> triples(kTriples);
  for (auto& t : triples)
    for (int i = 0; i < 3; ++i) t.push_back(uniform01(tr));
  int passing = 0;
  double worst_p = 1.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    double stat = 0.0;
    for (int t = 0; t < kTriples; ++t) {
      const auto& r = triples[static_cast<std::size_t>(t)];
      const auto probs = choice_probabilities({r[0], r[1], r[2]});
      Rng rng = make_rng(derive_seed(seed, {0xC1, static_cast<std::uint64_t>(t)}));
      std::vector<double> counts(3, 0.0);
      for (std::size_t k = 0; k < kDraws; ++k) counts[static_cast<std::size_t>(sample_choice(probs, rng))] += 1.0;
      stat += stats::pearson_statistic(counts, oracle::softmax(r));
    }
    const double p = oracle::chi2_sf_even(stat, 2 * kTriples);
    worst_p = std::min(worst_p, p);
    passing += p > 0.01;
  }
  return {passing >= 99, std::to_string(passing) + "/100 seeds with p > 0.01 (joint chi-square over " +
                             std::to_string(kTriples) + " triples, 20 df; min p " + fmt(worst_p, 3) + ")"};
}

// 2. Labels and pipeline output under r and r + c.
Outcome shift_invariance() {
  EnvConfig ec;
  ec.seed = 7;
  const auto env = make_embedded_mdp(ec);
  const auto& m = env.latent();
  const auto target = Policy::random_softmax(m.horizon(), m.num_states(), m.num_actions(), 1.0, 11);
  const auto behavior = Policy::uniform(m.horizon(), m.num_states(), m.num_actions());
  const auto eta = PairSampler::uniform(m);
  const auto transitions = generate_transition_dataset(env, behavior, 1000, 3);
  std::vector<int> anchors;
  for (int h = 1; h <= m.horizon(); ++h) anchors.push_back(env.anchor_pair(h));

  PipelineConfig pc;
  pc.reward_fit.net.width = 16;
  pc.reward_fit.opt.epochs = 300;
  pc.fqe.net.width = 16;
  pc.fqe.opt.epochs = 300;
  pc.reward_eval_samples = 5000;
  pc.seed = 5;

  const auto base_prefs = generate_preference_dataset(reward_tables(m), anchors, eta, 3000, 9);
  const auto base = run_pipeline(env, transitions, base_prefs, target, behavior, eta, pc);
  const std::string base_json = to_json_string(base.report.to_json());
  int identical = 0;
  const std::vector<double> shifts{0.5, -0.3, 7.0};
  for (double c : shifts) {
    auto shifted = reward_tables(m);
    for (auto& t : shifted) t.array() += c;
    const auto prefs = generate_preference_dataset(shifted, anchors, eta, 3000, 9);
    bool same = true;
    for (int h = 1; h <= m.horizon(); ++h)
      for (std::size_t k = 0; k < prefs.step(h).size(); ++k)
        same = same && prefs.step(h)[k].label == base_prefs.step(h)[k].label &&
               prefs.step(h)[k].pairs == base_prefs.step(h)[k].pairs;
    const auto out = run_pipeline(env, transitions, prefs, target, behavior, eta, pc);
    same = same && to_json_string(out.report.to_json()) == base_json;
    for (int h = 1; h <= m.horizon(); ++h) same = same && out.q.table(h) == base.q.table(h);
    for (std::size_t h = 0; h < out.reward_tables.size(); ++h) same = same && out.reward_tables[h] == base.reward_tables[h];
    identical += same;
  }
  return {identical == static_cast<int>(shifts.size()),
          std::to_string(identical) + "/" + std::to_string(shifts.size()) +
              " shifts give bitwise identical labels, reward tables, Q tables and report"};
}

// 3. Parameter gradients against central differences.
Outcome gradient_correctness() {
  constexpr double kStep = 1e-6, kFloor = 1e-5;
  double worst = 0.0;
  std::size_t checked = 0;
  for (std::uint64_t n = 0; n < 20; ++n) {
    Rng rng = make_rng(derive_seed(0xC3, {n}));
    NetConfig c;
    c.input_dim = 2 + static_cast<int>(n % 7);
    c.hidden_layers = 1 + static_cast<int>(n % 3);
    c.width = 4 + static_cast<int>(n % 5) * 3;
    c.output_lo = -50.0;
    c.output_hi = 50.0;
    c.output_init_scale = 1.0;
    ReluNetwork net(c, n);
    // Off the ReLU kinks: the zero biases of a fresh net put points exactly on one.
    Eigen::VectorXd theta = net.parameters();
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += 0.1 * standard_normal(rng);
    net.set_parameters(theta);

    Eigen::MatrixXd X(64, c.input_dim);
    for (Eigen::Index i = 0; i < X.size(); ++i) X(i) = uniform(rng, -1.0, 1.0);
    Eigen::VectorXd y(64);
    for (Eigen::Index i = 0; i < 64; ++i) y(i) = standard_normal(rng);
    const SquaredErrorObjective mse(X, y);
    std::vector<std::array<int, kCandidates>> cand;
    std::vector<int> labels;
    for (int k = 0; k < 64; ++k) {
      cand.push_back({static_cast<int>(uniform_index(rng, 63)), static_cast<int>(uniform_index(rng, 63)), 63});
      labels.push_back(static_cast<int>(uniform_index(rng, 3)));
    }
    const ChoiceObjective nll(X, cand, labels);

    for (int b = 0; b < 5; ++b) {
      std::vector<std::size_t> batch;
      const std::size_t size = 8 + uniform_index(rng, 25);
      for (std::size_t i = 0; i < size; ++i) batch.push_back(uniform_index(rng, 64));
      const auto check = [&](const auto& obj) {
        PointEvaluator ev(static_cast<std::size_t>(obj.points().rows()));
        const Eigen::VectorXd g = ev.evaluate(net, obj, batch, true).gradient;
        ReluNetwork probe = net;
        for (Eigen::Index i = 0; i < theta.size(); ++i) {
          Eigen::VectorXd t = net.parameters();
          t(i) += kStep;
          probe.set_parameters(t);
          const double up = ev.evaluate(probe, obj, batch, false).loss;
          t(i) -= 2 * kStep;
          probe.set_parameters(t);
          const double dn = ev.evaluate(probe, obj, batch, false).loss;
          const double fd = (up - dn) / (2 * kStep);
          worst = std::max(worst, std::abs(fd - g(i)) / std::max({std::abs(fd), std::abs(g(i)), kFloor}));
          ++checked;
        }
      };
      check(mse);
      check(nll);
    }
  }
  return {worst <= 1e-4, std::to_string(checked) + " partials over 20 nets x 5 batches x {squared error, NLL}; max rel err " +
                             fmt(worst, 3) + " (floor " + fmt(kFloor) + ")"};
}

// 4. Tabular mode against the empirical Bellman backup and the DP value.
Outcome tabular_oracle() {
  double worst = 0.0;
  const ExperimentConfig c = shipped("tabular_oracle", "first");
  const auto env = make_embedded_mdp(c.env);
  const auto& m = env.latent();
  const int H = m.horizon(), S = m.num_states(), A = m.num_actions();
  const auto target = c.target.build(H, S, A);
  const auto behavior = c.behavior.build(H, S, A);
  PipelineConfig pc;
  pc.reward = RewardSource::kOracle;
  pc.fqe.mode = QMode::kTabular;
  const auto eta = PairSampler::uniform(m);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto data = generate_transition_dataset(env, behavior, 2000, seed);
    PreferenceDataset none;
    const auto out = run_pipeline(env, data, none, target, behavior, eta, pc);
    // Backup by explicit per-pair averaging, last step first.
    std::vector<std::vector<double>> next;
    for (int h = H; h >= 1; --h) {
      std::vector<double> sum(static_cast<std::size_t>(S * A), 0.0), cnt(static_cast<std::size_t>(S * A), 0.0);
      for (const auto& t : data.step(h)) {
        double y = m.reward(h, t.pair / A, t.pair % A);
        if (h < H)
          for (int a2 = 0; a2 < A; ++a2)
            y += target.prob(h + 1, t.next_state, a2) * next[static_cast<std::size_t>(t.next_state)][static_cast<std::size_t>(a2)];
        sum[static_cast<std::size_t>(t.pair)] += y;
        cnt[static_cast<std::size_t>(t.pair)] += 1.0;
      }
      std::vector<std::vector<double>> q(static_cast<std::size_t>(S), std::vector<double>(static_cast<std::size_t>(A), 0.0));
      for (int p = 0; p < S * A; ++p) {
        const auto pp = static_cast<std::size_t>(p);
        if (cnt[pp] > 0) q[static_cast<std::size_t>(p / A)][static_cast<std::size_t>(p % A)] = sum[pp] / cnt[pp];
        worst = std::max(worst, std::abs(out.q.table(h)(p / A, p % A) - q[static_cast<std::size_t>(p / A)][static_cast<std::size_t>(p % A)]));
      }
      next = std::move(q);
    }
  }
  const auto& recs = shipped_records("tabular_oracle");
  const double v = oracle::value_by_loops(m, target);
  std::vector<double> errs;
  double v_gap = 0.0;
  for (const auto& r : recs) {
    v_gap = std::max(v_gap, std::abs(r.v_true - v));
    if (r.K == 100000) errs.push_back(std::abs(r.v_hat - v));
  }
  const double med = errs.empty() ? INFINITY : stats::median(errs);
  const double bound = 0.1 * H;
  return {worst <= 1e-10 && errs.size() == 20 && med <= bound && v_gap <= 1e-10,
          "max |Qhat - backup| " + fmt(worst, 3) + " over 20 seeds; median |vhat - v| at K=1e5 " + fmt(med, 3) +
              " (bound " + fmt(bound) + ", " + std::to_string(errs.size()) + " seeds)"};
}

// 5. Reward MSE decays in K_HF.
Outcome reward_trend() {
  const auto& recs = shipped_records("reward_trend");
  const auto med = medians<std::size_t>(
      recs, [](const ExperimentRecord& r) { return r.K_HF; }, [](const ExperimentRecord& r) { return r.reward_mse_mean; });
  const auto fit = fit_decay_slope(recs, SlopeAxis::kKHF, SlopeMetric::kRewardMse);
  bool decreasing = false;
  const std::string d = describe_trend(med, fit, decreasing);
  return {decreasing && med.size() == 3 && fit.slope < 0.0 && fit.band_hi < 0.0, d};
}

// 6. Value error decays in K at fixed K_HF.
Outcome value_trend() {
  const auto& recs = shipped_records("value_trend");
  const auto med = medians<std::size_t>(
      recs, [](const ExperimentRecord& r) { return r.K; },
      [](const ExperimentRecord& r) { return std::abs(r.v_hat - r.v_true); });
  const auto fit = fit_decay_slope(recs, SlopeAxis::kK, SlopeMetric::kAbsErr);
  bool decreasing = false;
  const std::string d = describe_trend(med, fit, decreasing);
  return {decreasing && med.size() == 3 && fit.slope < 0.0 && fit.band_hi < 0.0, d};
}

// 7. Shift bound on random trials; exhaustive probes reach Pearson.
Outcome shift_lemma() {
  Rng rng = make_rng(derive_seed(0xC7, {0}));
  const auto draw = [&](int n) {
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v(i) = uniform01(rng) + 1e-3;
    return FiniteDistribution(v / v.sum());
  };
  int held = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto q1 = draw(8), q2 = draw(8);
    ProbeClass pc;
    Eigen::VectorXd g(8);
    for (int i = 0; i < 8; ++i) g(i) = standard_normal(rng);
    pc.add(g, "g");
    for (int k = 0; k < 4; ++k) {
      Eigen::VectorXd f(8);
      for (int i = 0; i < 8; ++i) f(i) = standard_normal(rng);
      pc.add(f);
    }
    held += verify_shift_bound(g, q1, q2, pc).holds;
  }
  ProbeClass sweep;
  const int m = 10000;
  for (int i = 0; i < m; ++i) {
    const double th = std::numbers::pi * i / m;
    sweep.add(Eigen::Vector2d(std::cos(th), std::sin(th)));
  }
  double gap = 0.0;
  for (int t = 0; t < 100; ++t) {
    const auto q1 = draw(2), q2 = draw(2);
    gap = std::max(gap, std::abs(restricted_chi_square(q1, q2, sweep) - pearson_chi_square(q1, q2)));
  }
  return {held == 10000 && gap <= 1e-3, std::to_string(held) + "/10000 shift-bound trials hold; max |restricted - Pearson| " +
                                            fmt(gap, 3) + " on 100 two-point pairs"};
}

// 8. Anchored reward gap against 20 * ||delta rho||_1^2.
Outcome anchored_identity() {
  Rng rng = make_rng(derive_seed(0xC8, {0}));
  int held = 0;
  double worst_ratio = 0.0;
  for (int t = 0; t < 10000; ++t) {
    std::array<double, 3> truth{}, learned{};
    for (int i = 0; i < 3; ++i) {
      truth[static_cast<std::size_t>(i)] = uniform01(rng);
      learned[static_cast<std::size_t>(i)] = uniform01(rng);
    }
    const auto g = anchored_log_ratio_gap(truth, learned);
    held += g.holds();
    if (g.rhs > 0.0) worst_ratio = std::max(worst_ratio, g.lhs / (g.rhs / 20.0));
  }
  return {held == 10000, std::to_string(held) + "/10000 triples hold; worst lhs / ||delta rho||_1^2 = " +
                             fmt(worst_ratio, 4) + " against constant 20"};
}

// 9. Byte-identical CSVs when the runs above are repeated.
Outcome reproducibility() {
  std::vector<std::string> mismatched;
  std::size_t files = 0;
  for (const std::string name : {"tabular_oracle", "reward_trend", "value_trend"}) {
    shipped_records(name);
    const ExperimentConfig again = shipped(name, "second");
    RunOptions opt;
    opt.workers = workers() == 1 ? 2 : 1;  // a different pool size as well
    run_experiment(again, opt);
    const fs::path a = shipped(name, "first").output_dir, b = again.output_dir;
    for (const auto& e : fs::directory_iterator(a)) {
      if (e.path().extension() != ".csv" || e.path().filename() == "timings.csv") continue;
      ++files;
      if (slurp(e.path()) != slurp(b / e.path().filename())) mismatched.push_back(name + "/" + e.path().filename().string());
    }
  }
  std::string d = std::to_string(files - mismatched.size()) + "/" + std::to_string(files) + " result CSVs identical";
  for (const auto& m : mismatched) d += "; differs: " + m;
  return {mismatched.empty() && files > 0, d};
}

}  // namespace

int main() {
  fs::remove_all(scratch_root());
  fs::create_directories(scratch_root());
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    Outcome (*run)();
  };
  const Criterion criteria[] = {
      {1, "preference-model fidelity", 60, preference_fidelity},
      {2, "shift invariance", 0, shift_invariance},
      {3, "gradient correctness", 60, gradient_correctness},
      {4, "tabular oracle equivalence", 300, tabular_oracle},
      {5, "reward MSE trend in K_HF", 1200, reward_trend},
      {6, "value error trend in K", 1800, value_trend},
      {7, "distribution-shift bound", 60, shift_lemma},
      {8, "anchored reward gap bound", 60, anchored_identity},
      {9, "reproducibility", 0, reproducibility},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = fmt(secs, 3) + " s";
    if (c.budget_s > 0) {
      timing += " / " + fmt(c.budget_s, 4) + " s";
      if (secs > c.budget_s) {
        o.pass = false;
        o.detail += "; over time budget";
      }
    }
    failures += !o.pass;
    std::cout << "criterion " << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": " << o.detail
              << " [" << timing << "]" << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria pass" : std::to_string(failures) + " criteria fail") << std::endl;
  return failures == 0 ? 0 : 1;
}
