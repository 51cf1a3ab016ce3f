// Acceptance suite: one line per criterion, nonzero exit if any fails.
#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"
#include "xgram/analysis.hpp"
#include "xgram/config.hpp"
#include "xgram/error.hpp"
#include "xgram/injection.hpp"
#include "xgram/io.hpp"
#include "xgram/memory.hpp"
#include "xgram/model.hpp"
#include "xgram/pipeline.hpp"
#include "xgram/rng.hpp"
#include "xgram/routing.hpp"
#include "xgram/shortconv.hpp"

namespace fs = std::filesystem;
using namespace xgram;
using xgram::testing::central_difference;
using xgram::testing::rel_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path configs;
  fs::path work;
  bool verbose = false;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Mat normal_mat(SplitMix64& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

std::vector<stats::TokenId> random_tokens(SplitMix64& rng, std::size_t n, std::size_t vocab) {
  std::vector<stats::TokenId> t(n);
  for (auto& x : t) x = static_cast<stats::TokenId>(rng.next() % vocab);
  return t;
}

shortconv::Params random_conv(SplitMix64& rng, std::size_t d, std::size_t k) {
  shortconv::Params p;
  p.kernel_size = k;
  p.content = normal_mat(rng, d, k, 0.7);
  p.gate = normal_mat(rng, d, k, 0.7);
  p.bias = normal_mat(rng, d, 1, 0.5).col(0);
  return p;
}

const stats::FrequencyTable& zipf_table() {
  static const auto f = stats::count_tokens(stats::zipf_stream(42, 10000, 1.1, 1000000), 10000);
  return f;
}

// 1
Outcome gradient_correctness(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  SplitMix64 rng(101);

  double conv_err = 0;
  for (std::size_t k : {3, 5, 7, 9}) {
    auto p = random_conv(rng, 4, k);
    Mat E = normal_mat(rng, 6, 4);
    const Mat up = normal_mat(rng, 6, 4);
    const auto f = [&] { return shortconv::extract(E, p).cwiseProduct(up).sum(); };
    const auto g = shortconv::extract_backward(E, p, up);
    for (Eigen::Index i = 0; i < E.size(); ++i)
      conv_err = std::max(conv_err, rel_error(g.input.data()[i], central_difference(E.data()[i], f)));
    for (Eigen::Index i = 0; i < p.content.size(); ++i) {
      conv_err = std::max(conv_err, rel_error(g.params.content.data()[i], central_difference(p.content.data()[i], f)));
      conv_err = std::max(conv_err, rel_error(g.params.gate.data()[i], central_difference(p.gate.data()[i], f)));
    }
    for (Eigen::Index i = 0; i < p.bias.size(); ++i)
      conv_err = std::max(conv_err, rel_error(g.params.bias(i), central_difference(p.bias(i), f)));
  }

  double mem_err = 0;
  for (int trial = 0; trial < 8; ++trial) {
    auto t = memory::init_table(8, 4, rng.next());
    for (Eigen::Index r = 0; r < 8; ++r) t.gates()(r) = rng.normal();
    std::vector<routing::AccessEntry> acc;
    for (int j = 0; j < 3; ++j) acc.push_back({static_cast<routing::RowIndex>(rng.next() % 8), 0.1 + rng.uniform()});
    std::vector<double> up(4);
    for (auto& u : up) u = rng.normal();
    const auto f = [&] {
      std::vector<double> e(4);
      memory::retrieve_into(t, acc, e);
      return std::inner_product(e.begin(), e.end(), up.begin(), 0.0);
    };
    t.zero_grad();
    memory::retrieve_backward(t, acc, up);
    for (Eigen::Index r = 0; r < 8; ++r) {
      mem_err = std::max(mem_err, rel_error(t.grad_gates()(r), central_difference(t.gates()(r), f)));
      for (Eigen::Index c = 0; c < 4; ++c)
        mem_err = std::max(mem_err, rel_error(t.grad_values()(r, c), central_difference(t.values()(r, c), f)));
    }
  }

  const auto cfg = testing::tiny_backbone();
  model::Model m(cfg, testing::all_sites(cfg.layers), testing::tiny_plan(cfg.vocab_size), 11, 4);
  for (auto& layer : m.views())
    for (auto& v : layer) {
      for (Eigen::Index i = 0; i < v.table.gates().size(); ++i) v.table.gates()[i] = rng.normal();
      for (Eigen::Index i = 0; i < v.conv.gate.size(); ++i) v.conv.gate.data()[i] = 0.3 * rng.normal();
    }
  const auto tokens = random_tokens(rng, cfg.seq_len, cfg.vocab_size);
  const auto targets = random_tokens(rng, cfg.seq_len, cfg.vocab_size);
  m.zero_grad();
  m.loss_and_backward(tokens, targets, 1, 9);
  auto params = m.parameters();
  std::set<std::size_t> touched;
  for (const auto t : tokens)
    for (const auto& e : m.access_index().entries(t)) touched.insert(e.row);
  const std::vector<std::size_t> rows(touched.begin(), touched.end());
  const auto f = [&] { return m.loss(tokens, targets, 1, 9); };
  double model_err = 0;
  for (int s = 0; s < 32; ++s) {
    auto& p = params[rng.next() % params.size()];
    std::size_t j = rng.next() % p.value.size();
    if (p.row_width > 0) j = rows[rng.next() % rows.size()] * p.row_width + rng.next() % p.row_width;
    model_err = std::max(model_err, rel_error(p.grad[j], central_difference(p.value[j], f)));
  }

  const double secs = seconds_since(t0);
  return {conv_err < 1e-6 && mem_err < 1e-6 && model_err < 1e-4 && secs < 30,
          fmt("shortconv %.2e, memory %.2e (< 1e-6); model %.2e (< 1e-4); %.1f s (< 30 s)", conv_err,
              mem_err, model_err, secs)};
}

// 2
Outcome null_injection(const Context&) {
  auto cfg = testing::tiny_backbone();
  cfg.seq_len = 16;
  cfg.vocab_size = 128;
  const auto plan = testing::tiny_plan(cfg.vocab_size);
  model::Model vanilla(cfg, {}, nullptr, 5);
  model::Model zero_lambda(cfg, testing::all_sites(cfg.layers), plan, 5, 10);
  for (auto& l : zero_lambda.views())
    for (auto& v : l) v.lambda = 0.0;
  model::Model step_zero(cfg, testing::all_sites(cfg.layers), plan, 5, 10);
  SplitMix64 rng(202);
  int identical = 0;
  for (int b = 0; b < 100; ++b) {
    const auto tokens = random_tokens(rng, 2 * cfg.seq_len, cfg.vocab_size);
    const Mat ref = vanilla.forward(tokens, 2, 0);
    const bool a = (zero_lambda.forward(tokens, 2, 50).array() == ref.array()).all();
    const bool z = (step_zero.forward(tokens, 2, 0).array() == ref.array()).all();
    identical += a && z;
  }
  return {identical == 100, fmt("%d/100 batches bit-identical for lambda = 0 and for step 0", identical)};
}

// 3
Outcome causality(const Context&) {
  SplitMix64 rng(303);
  int ok = 0, total = 0;
  for (std::size_t k : {3, 5, 7, 9}) {
    for (int trial = 0; trial < 1000; ++trial) {
      const Eigen::Index T = 4 + static_cast<Eigen::Index>(rng.next() % 13);
      const auto p = random_conv(rng, 6, k);
      const Mat E = normal_mat(rng, T, 6);
      const Eigen::Index t = static_cast<Eigen::Index>(rng.next() % (T - 1));
      const Eigen::Index future = t + 1 + static_cast<Eigen::Index>(rng.next() % (T - t - 1));
      Mat E2 = E;
      E2.row(future) = normal_mat(rng, 1, 6, 3.0);
      const Mat a = shortconv::extract(E, p), b = shortconv::extract(E2, p);
      ok += a.topRows(t + 1) == b.topRows(t + 1);
      ++total;
    }
  }
  return {ok == total, fmt("%d/%d perturbations (k in {3,5,7,9}) left earlier outputs bit-identical", ok, total)};
}

// 4
Outcome fusion_variance(const Context&) {
  SplitMix64 rng(404);
  const Eigen::Index T = 1000, d = 100;  // 1e5 samples per view
  double ref = 0, worst = 0;
  std::string ratios;
  for (std::size_t M : {1, 2, 4, 8}) {
    std::vector<Mat> views;
    for (std::size_t m = 0; m < M; ++m) views.push_back(normal_mat(rng, T, d));
    const Mat delta = injection::fuse(views, std::vector<double>(M, 1.0));
    const double r = std::sqrt(delta.squaredNorm() / static_cast<double>(delta.size()));
    if (M == 1) ref = r;
    worst = std::max(worst, std::abs(r / ref - 1.0));
    ratios += fmt("%s%zu:%.4f", ratios.empty() ? "" : " ", M, r / ref);
  }
  return {worst <= 0.10, "RMS(M)/RMS(1) " + ratios + fmt(" (max deviation %.2f%%, limit 10%%)", 100 * worst)};
}

// 5
Outcome depth_gate(const Context&) {
  const injection::WarmupSchedule w{100};
  bool exact = w(0) == 0.0 && w(100) == 1.0;
  for (std::size_t l = 0; l < 16; ++l) {
    const double ratio = injection::gate_value(1.0, l, 100, w) / injection::gate_value(1.0, 0, 100, w);
    exact = exact && ratio == std::sqrt(static_cast<double>(l + 1));
  }
  return {exact, "g(l)/g(0) == sqrt(l+1) for l in [0,16); w(0) == 0, w(W) == 1"};
}

// 6
Outcome mass_balance(const Context&) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto stream = stats::zipf_stream(42, 10000, 1.1, 1000000);
  const auto freq = stats::count_tokens(stream, 10000);
  const auto ranked = routing::rank_tokens(freq);
  const auto mass = stats::smoothed_mass(freq, 0.5).mass;
  std::vector<double> ordered;
  for (std::size_t i = 200; i < ranked.size(); ++i) ordered.push_back(mass[ranked[i]]);
  const auto part = routing::partition_buckets(ordered, 32);
  const double mean = std::accumulate(part.bucket_mass.begin(), part.bucket_mass.end(), 0.0) / 32;
  const double ratio = *std::max_element(part.bucket_mass.begin(), part.bucket_mass.end()) / mean;
  const auto plan = routing::build_plan(freq, routing::RoutingConfig{});
  const double secs = seconds_since(t0);
  return {ratio <= 1.15 && secs < 10 && plan.num_buckets() == 32,
          fmt("max/mean bucket mass %.4f (<= 1.15); %.2f s (< 10 s)", ratio, secs)};
}

// 7
Outcome concentration(const Context&) {
  const auto stream = stats::zipf_stream(42, 10000, 1.1, 1000000);
  const auto& freq = zipf_table();
  auto top1 = [&](const routing::RoutingConfig& c) {
    const auto plan = routing::build_plan(freq, c);
    const routing::AccessIndex index(plan);
    memory::HitCounter hits(plan.physical_rows);
    for (const auto t : stream) hits.record(index.entries(t));
    return analysis::hit_concentration(hits.mass)[1];
  };
  routing::RoutingConfig hashed;
  routing::RoutingConfig full;
  full.rho = 1.0;
  full.hash_paths = 1;
  full.max_extra_paths = 0;
  const double h = top1(hashed), n = top1(full);
  return {n - h >= 0.05, fmt("top-1%% row share %.2f%% hashed vs %.2f%% no-hash (drop %.2f pp, need >= 5)",
                             100 * h, 100 * n, 100 * (n - h))};
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(io::read_text(p)); }

config::RunConfig toy(const Context& ctx) { return config::load_run_config(ctx.configs / "toy.toml"); }

pipeline::PipelineOptions logger(const Context& ctx) {
  pipeline::PipelineOptions o;
  if (ctx.verbose) o.log = [](const std::string& s) { std::fprintf(stderr, "    %s\n", s.c_str()); };
  return o;
}

// 8
Outcome trainability(const Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  auto hashed = pipeline::make_variant(toy(ctx), "xgram-1x");
  auto full = hashed;
  full.routing.rho = 1.0;
  const auto a = read_json(pipeline::run_pipeline(hashed, ctx.work / "runs", logger(ctx)).artifacts.report);
  const auto b = read_json(pipeline::run_pipeline(full, ctx.work / "runs", logger(ctx)).artifacts.report);
  const double cv_h = a["median"]["cv"], gap_h = a["median"]["gap"];
  const double cv_n = b["median"]["cv"], gap_n = b["median"]["gap"];
  const double secs = seconds_since(t0);
  return {cv_h < cv_n && gap_h < gap_n && secs < 900,
          fmt("%zu steps: CV %.4f hashed vs %.4f no-hash; p75/p25 gap %.4f vs %.4f; %.0f s (< 900 s)",
              hashed.train.steps, cv_h, cv_n, gap_h, gap_n, secs)};
}

// 9
Outcome mechanism_benefit(const Context& ctx) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto rows = pipeline::compare(toy(ctx), {"baseline", "ple", "xgram-1x"}, seeds, ctx.work / "runs", logger(ctx));
  auto loss = [&](const std::string& v, std::uint64_t s) {
    for (const auto& r : rows)
      if (r.variant == v && r.seed == s) return r.final_val_loss;
    return std::numeric_limits<double>::quiet_NaN();
  };
  bool ok = true;
  std::string detail;
  for (const auto s : seeds) {
    const double b = loss("baseline", s), p = loss("ple", s), x = loss("xgram-1x", s);
    const double gain = (b - x) / b;
    ok = ok && gain >= 0.03 && x < p;
    detail += fmt("seed %llu: base %.4f ple %.4f 1x %.4f (%.2f%%); ", static_cast<unsigned long long>(s), b, p, x,
                  100 * gain);
  }
  const double secs = seconds_since(t0);
  ok = ok && secs < 3600;
  return {ok, detail + fmt("need >= 3%% and below ple; %.0f s (< 3600 s)", secs)};
}

// 10
Outcome budget(const Context&) {
  const std::uint64_t V = 151936, d = 1536, h = 12, hkv = 6, K = 2, k = 3;
  const std::uint64_t dkv = hkv * (d / h);
  const std::uint64_t kap = K + 2 * k + 1;
  const auto rows = analysis::budget_table(V, d, dkv, 0.5, K, k);
  const std::uint64_t half = static_cast<std::uint64_t>(std::llround(0.5 * V));
  const std::vector<std::array<std::uint64_t, 3>> expect{
      {V * dkv, dkv, kap * dkv}, {V * dkv, dkv, kap * dkv}, {V * dkv, dkv, kap * dkv}, {V * d, d, kap * d},
      {V * d, d, kap * d},       {half * dkv, dkv, kap * dkv}, {half * d, d, kap * d}};
  bool ok = rows.size() == expect.size();
  for (std::size_t i = 0; ok && i < rows.size(); ++i)
    ok = rows[i].budget.params == expect[i][0] && rows[i].budget.dims == expect[i][1] &&
         rows[i].budget.flops == expect[i][2];
  const auto vh = analysis::site_budget(injection::Site::kV, V, d, dkv, 0.5, K, k);
  ok = ok && vh.params == 58343424u && analysis::kappa(1, 3) == 8;
  return {ok, fmt("7 reference rows match; V+hash params %llu (expect 58343424)",
                  static_cast<unsigned long long>(vh.params))};
}

// 11
Outcome offload(const Context&) {
  const double t = analysis::offload_time(std::vector<std::uint64_t>{1000}, 768, 2, 16e9);
  const double expect = 1000.0 * 768 * 2 / 16e9;
  train::AccessRecord r{0, 0, 768, 5000, 2, 400, 801};  // U_l > K * U
  bool rejected = false;
  try {
    analysis::offload_time(std::vector<train::AccessRecord>{r}, 2, 16e9);
  } catch (const ValidationError&) {
    rejected = true;
  }
  r.unique_rows = 800;
  const double ok_time = analysis::offload_time(std::vector<train::AccessRecord>{r}, 2, 16e9);
  return {t == expect && std::abs(t - 9.6e-5) <= 1e-20 && rejected && ok_time == 800.0 * 768 * 2 / 16e9,
          fmt("T_comm %.6g s (expect 9.6e-05); bound U_l <= min(S, K*U) %s", t, rejected ? "enforced" : "NOT enforced")};
}

// 12
Outcome determinism(const Context& ctx) {
  auto cfg = toy(ctx);
  cfg.train.steps = 30;
  cfg.train.eval_every = 10;
  cfg.train.eval_batches = 2;
  cfg.stats_tokens = 100000;
  const std::vector<std::string> variants{"baseline", "ple", "xgram-1x"};
  const auto a = pipeline::compare(cfg, variants, {0, 1}, ctx.work / "det-a", logger(ctx));
  const auto b = pipeline::compare(cfg, variants, {0, 1}, ctx.work / "det-b", logger(ctx));
  std::size_t same = 0, total = 0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i)
    for (auto member : {&pipeline::Artifacts::plan, &pipeline::Artifacts::checkpoint, &pipeline::Artifacts::trace}) {
      ++total;
      same += io::read_file(a[i].artifacts.*member) == io::read_file(b[i].artifacts.*member);
    }
  return {a.size() == b.size() && total == 3 * a.size() && same == total,
          fmt("%zu/%zu plan, checkpoint and trace files byte-identical across two compare runs", same, total)};
}

// 13
Outcome linear_stacking(const Context&) {
  SplitMix64 rng(1313);
  const double eps = std::numeric_limits<double>::epsilon();
  double worst = 0;  // in units of eps times the summation condition bound
  for (int K = 1; K <= 8; ++K) {
    const Eigen::Index d = 32;
    Mat sum = Mat::Zero(d, d);
    Vec z = normal_mat(rng, d, 1).col(0), stacked = Vec::Zero(d), bound = Vec::Zero(d);
    for (int k = 0; k < K; ++k) {
      const Mat W = normal_mat(rng, d, d);
      stacked += W * z;
      sum += W;
      bound += W.cwiseAbs() * z.cwiseAbs();
    }
    const Vec diff = (stacked - sum * z).cwiseAbs();
    for (Eigen::Index i = 0; i < d; ++i) worst = std::max(worst, diff(i) / (eps * bound(i)));
  }
  const double limit = 8 + 32;  // K + d roundings per component
  return {worst <= limit, fmt("max |sum_k W_k z - (sum_k W_k) z| = %.2f eps x sum|W||z| (<= %.0f, K <= 8, d = 32)",
                              worst, limit)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xgram acceptance suite"};
  Context ctx;
  std::string configs = XGRAM_CONFIG_DIR;
  std::string work = (fs::temp_directory_path() / "xgram-acceptance").string();
  std::vector<int> only;
  bool keep = false;
  app.add_option("--configs", configs, "directory holding toy.toml");
  app.add_option("--work-dir", work, "scratch directory for pipeline artifacts");
  app.add_option("--only", only, "run only these criteria")->delimiter(',');
  app.add_flag("--keep-cache", keep, "reuse artifacts already in the work directory");
  app.add_flag("-v,--verbose", ctx.verbose, "log pipeline stages to stderr");
  CLI11_PARSE(app, argc, argv);
  ctx.configs = configs;
  ctx.work = work;
  if (!keep) fs::remove_all(ctx.work);
  fs::create_directories(ctx.work);

  const std::vector<std::pair<const char*, std::function<Outcome(const Context&)>>> criteria{
      {"gradient correctness", gradient_correctness},
      {"null-injection equivalence", null_injection},
      {"shortconv causality", causality},
      {"fusion variance invariance", fusion_variance},
      {"depth gate", depth_gate},
      {"routing mass balance", mass_balance},
      {"hit concentration direction", concentration},
      {"trainability direction", trainability},
      {"mechanism benefit", mechanism_benefit},
      {"budget calculator", budget},
      {"offload model", offload},
      {"determinism", determinism},
      {"linear stacking", linear_stacking},
  };
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    ++ran;
    failed += !o.pass;
    std::printf("%s %2d %-28s %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", ran - failed, ran);
  return failed == 0 ? 0 : 1;
}
