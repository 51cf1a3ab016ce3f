#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "xgram/analysis.hpp"
#include "xgram/config.hpp"
#include "xgram/error.hpp"
#include "xgram/injection.hpp"
#include "xgram/io.hpp"
#include "xgram/memory.hpp"
#include "xgram/pipeline.hpp"
#include "xgram/routing.hpp"
#include "xgram/shortconv.hpp"

namespace py = pybind11;
using namespace xgram;

namespace {

using Ids = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

std::span<const stats::TokenId> ids_span(const Ids& a) {
  return {a.data(), static_cast<std::size_t>(a.size())};
}

template <class T>
py::array_t<T> to_numpy(const std::vector<T>& v) {
  return py::array_t<T>(static_cast<py::ssize_t>(v.size()), v.data());
}

py::bytes to_bytes(const io::Bytes& b) {
  return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
}

io::Bytes from_bytes(const py::bytes& b) {
  const std::string s = b;
  return io::Bytes(s.begin(), s.end());
}

std::shared_ptr<const routing::RoutingPlan> share(const routing::RoutingPlan& p) {
  return std::make_shared<const routing::RoutingPlan>(p);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "xgram core: routing, lookup memory, ShortConv, injection, training and diagnostics";
  m.attr("__version__") = "0.1.0";

  auto base = py::register_exception<Error>(m, "XgramError", PyExc_RuntimeError);
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<IoError>(m, "XgramIOError", base.ptr());

  // corpus statistics
  py::class_<stats::FrequencyTable>(m, "FrequencyTable")
      .def_readonly("vocab_size", &stats::FrequencyTable::vocab_size)
      .def_readonly("total", &stats::FrequencyTable::total)
      .def_property_readonly("counts", [](const stats::FrequencyTable& f) { return to_numpy(f.counts); })
      .def_property_readonly("probs", [](const stats::FrequencyTable& f) { return to_numpy(f.probs); })
      .def("to_json", &stats::frequency_to_json)
      .def_static("from_json", &stats::frequency_from_json)
      .def("__eq__", [](const stats::FrequencyTable& a, const stats::FrequencyTable& b) { return a == b; });
  m.def("count_tokens", [](const Ids& ids, std::size_t vocab) { return stats::count_tokens(ids_span(ids), vocab); },
        py::arg("ids"), py::arg("vocab_size"));
  m.def("smoothed_mass",
        [](const stats::FrequencyTable& f, double alpha) { return to_numpy(stats::smoothed_mass(f, alpha).mass); },
        py::arg("freq"), py::arg("alpha") = 0.5);
  m.def("zipf_stream",
        [](std::uint64_t seed, std::size_t vocab, double s, std::size_t n) {
          return to_numpy(stats::zipf_stream(seed, vocab, s, n));
        },
        py::arg("seed"), py::arg("vocab_size"), py::arg("exponent"), py::arg("length"));

  // routing
  py::class_<routing::RoutingConfig>(m, "RoutingConfig")
      .def(py::init<>())
      .def_readwrite("k_vip", &routing::RoutingConfig::k_vip)
      .def_readwrite("num_buckets", &routing::RoutingConfig::num_buckets)
      .def_readwrite("rho", &routing::RoutingConfig::rho)
      .def_readwrite("hash_paths", &routing::RoutingConfig::hash_paths)
      .def_readwrite("alpha", &routing::RoutingConfig::alpha)
      .def_readwrite("max_extra_paths", &routing::RoutingConfig::max_extra_paths)
      .def_readwrite("decay", &routing::RoutingConfig::decay)
      .def_readwrite("plan_seed", &routing::RoutingConfig::plan_seed)
      .def("validate", &routing::RoutingConfig::validate);
  py::class_<routing::RoutingPlan>(m, "RoutingPlan")
      .def_readonly("config", &routing::RoutingPlan::config)
      .def_readonly("vocab_size", &routing::RoutingPlan::vocab_size)
      .def_readonly("physical_rows", &routing::RoutingPlan::physical_rows)
      .def_property_readonly("vip_tokens", [](const routing::RoutingPlan& p) { return to_numpy(p.vip_tokens); })
      .def_property_readonly("bucket_of", [](const routing::RoutingPlan& p) { return to_numpy(p.bucket_of); })
      .def_property_readonly("bucket_begin", [](const routing::RoutingPlan& p) { return to_numpy(p.bucket_begin); })
      .def_property_readonly("bucket_dense", [](const routing::RoutingPlan& p) { return to_numpy(p.bucket_dense); })
      .def("access_list",
           [](const routing::RoutingPlan& p, stats::TokenId t) {
             const auto acc = routing::access_list(p, t);
             std::vector<std::pair<std::uint32_t, double>> out;
             for (const auto& e : acc.entries) out.emplace_back(e.row, e.coeff);
             return py::make_tuple(out, std::string(routing::origin_name(acc.origin)));
           },
           py::arg("token"), "([(row, coeff), ...], origin)")
      .def("reachable_rows", [](const routing::RoutingPlan& p) { return to_numpy(routing::reachable_rows(p)); })
      .def("serialize", [](const routing::RoutingPlan& p) { return to_bytes(routing::serialize_plan(p)); })
      .def_static("deserialize", [](const py::bytes& b) { return routing::deserialize_plan(from_bytes(b)); })
      .def("__eq__", [](const routing::RoutingPlan& a, const routing::RoutingPlan& b) { return a == b; });
  m.def("build_plan", &routing::build_plan, py::arg("freq"), py::arg("config") = routing::RoutingConfig{});
  m.def("partition_buckets",
        [](const std::vector<double>& mass, std::size_t b) {
          const auto p = routing::partition_buckets(mass, b);
          return py::make_tuple(p.boundaries, p.bucket_mass, p.max_over_mean);
        },
        py::arg("ordered_mass"), py::arg("num_buckets"), "(boundaries, bucket_mass, max_over_mean)");
  m.def("slot_weights", &routing::slot_weights, py::arg("extra_paths"), py::arg("decay"));

  // memory
  m.def("retrieve",
        [](const Mat& values, const Vec& gates, const std::vector<std::pair<std::uint32_t, double>>& acc) {
          memory::LookupTable t(values, gates);
          std::vector<routing::AccessEntry> e;
          for (const auto& [r, c] : acc) e.push_back({r, c});
          return memory::retrieve(t, e);
        },
        py::arg("values"), py::arg("gates"), py::arg("access"), "sum_j c_j sigmoid(a_j) B[j]");

  // ShortConv
  py::class_<shortconv::Params>(m, "ShortConvParams")
      .def_readwrite("kernel_size", &shortconv::Params::kernel_size)
      .def_readwrite("content", &shortconv::Params::content)
      .def_readwrite("gate", &shortconv::Params::gate)
      .def_readwrite("bias", &shortconv::Params::bias);
  m.def("shortconv_init", &shortconv::init_params, py::arg("width"), py::arg("kernel_size"), py::arg("seed"));
  m.def("shortconv_extract", &shortconv::extract, py::arg("input"), py::arg("params"));
  m.def("causal_depthwise_conv", &shortconv::causal_depthwise_conv, py::arg("x"), py::arg("kernels"));

  // injection
  m.def("gate_value",
        [](double lambda, std::size_t layer, std::size_t step, std::size_t warm) {
          return injection::gate_value(lambda, layer, step, injection::WarmupSchedule{warm});
        },
        py::arg("lam"), py::arg("layer"), py::arg("step"), py::arg("warmup_steps"));
  m.def("fuse", [](const std::vector<Mat>& views, const std::vector<double>& gates) {
    return injection::fuse(views, gates);
  }, py::arg("views"), py::arg("gates"));
  m.def("injection_presets", &injection::preset_names);

  // analysis
  m.def("hit_concentration",
        [](const std::vector<double>& hits, const std::vector<double>& fr) { return analysis::hit_concentration(hits, fr); },
        py::arg("hits"), py::arg("fractions") = analysis::kHitFractions);
  m.def("movement_stats",
        [](const Mat& values, const Mat& init, const std::vector<std::uint32_t>& rows) {
          const auto s = analysis::movement_stats(values, init, rows);
          py::dict d;
          d["movement"] = to_numpy(s.movement);
          d["mean"] = s.mean;
          d["std"] = s.stddev;
          d["cv"] = s.cv;
          d["p25"] = s.p25;
          d["p75"] = s.p75;
          d["gap"] = s.gap;
          return d;
        },
        py::arg("values"), py::arg("init"), py::arg("reachable_rows"));
  m.def("percentile", [](const std::vector<double>& v, double q) { return analysis::percentile(v, q); });
  m.def("slot_cosine", [](const std::vector<Mat>& views) { return analysis::slot_cosine(views); });
  m.def("layer_similarity", [](const Mat& h, const Mat& e) {
    const auto s = analysis::layer_similarity(h, e);
    return py::make_tuple(s.mean, s.used, s.skipped);
  });
  m.def("kappa", &analysis::kappa, py::arg("paths"), py::arg("kernel"));
  m.def("site_budget",
        [](const std::string& site, std::uint64_t vocab, std::uint64_t d, std::uint64_t dkv, double rho,
           std::uint64_t paths, std::uint64_t kernel) {
          const auto b = analysis::site_budget(injection::parse_site(site), vocab, d, dkv, rho, paths, kernel);
          return py::make_tuple(b.params, b.dims, b.flops);
        },
        py::arg("site"), py::arg("vocab_size"), py::arg("width"), py::arg("kv_width"), py::arg("rho"),
        py::arg("paths"), py::arg("kernel"), "(params, dims, flops)");
  m.def("offload_time",
        [](const std::vector<std::uint64_t>& rows, std::uint64_t width, double bytes, double bw) {
          return analysis::offload_time(rows, width, bytes, bw);
        },
        py::arg("unique_rows"), py::arg("width"), py::arg("bytes_per_value"), py::arg("bandwidth"));

  // configs and pipeline
  m.def("parse_run_config", [](const std::string& text) { return config::to_json(config::parse_run_config(text)); },
        "Validates a TOML run config and returns its canonical JSON.");
  m.def("budget", [](const std::string& text) { return pipeline::budget_json(config::parse_run_config(text)); },
        py::arg("run_config_toml"));
  m.def("run_pipeline",
        [](const std::string& text, const std::filesystem::path& out_dir, bool diagnose) {
          const auto r = pipeline::run_pipeline(config::parse_run_config(text), out_dir, {diagnose, {}});
          py::list stages;
          for (const auto& s : r.stages) {
            py::dict d;
            d["name"] = s.name;
            d["key"] = s.key;
            d["cached"] = s.cached;
            stages.append(d);
          }
          py::dict out;
          out["stages"] = stages;
          out["final_val_loss"] = r.final_val_loss;
          out["checkpoint"] = r.artifacts.checkpoint;
          out["plan"] = r.artifacts.plan;
          out["trace"] = r.artifacts.trace;
          out["report"] = r.artifacts.report;
          return out;
        },
        py::arg("run_config_toml"), py::arg("out_dir"), py::arg("diagnose") = true);

  // model
  py::class_<model::Model>(m, "Model")
      .def(py::init([](const std::string& text, const routing::RoutingPlan* plan) {
             const auto cfg = config::parse_run_config(text);
             return std::make_unique<model::Model>(cfg.backbone, cfg.injection, plan ? share(*plan) : nullptr,
                                                   cfg.train.seed);
           }),
           py::arg("run_config_toml"), py::arg("plan") = nullptr)
      .def("forward",
           [](model::Model& self, const Ids& tokens, std::size_t step) {
             if (tokens.ndim() != 2) throw ValidationError("tokens must be a (batch, T) array");
             return self.forward(ids_span(tokens), static_cast<std::size_t>(tokens.shape(0)), step);
           },
           py::arg("tokens"), py::arg("step") = 0, "logits of shape (batch * T, vocab)")
      .def("loss",
           [](model::Model& self, const Ids& tokens, const Ids& targets, std::size_t step) {
             if (tokens.ndim() != 2) throw ValidationError("tokens must be a (batch, T) array");
             return self.loss(ids_span(tokens), ids_span(targets), static_cast<std::size_t>(tokens.shape(0)), step);
           },
           py::arg("tokens"), py::arg("targets"), py::arg("step") = 0)
      .def("set_lambdas", [](model::Model& self, double value) {
        for (auto& l : self.views())
          for (auto& v : l) v.lambda = value;
      })
      .def_property_readonly("num_views", [](const model::Model& self) {
        std::size_t n = 0;
        for (const auto& l : self.views()) n += l.size();
        return n;
      });
}
