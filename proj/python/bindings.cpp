#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mvpcbm/cli.hpp"
#include "mvpcbm/error.hpp"
#include "mvpcbm/eval.hpp"
#include "mvpcbm/head.hpp"

namespace py = pybind11;
using namespace mvpcbm;
using nlohmann::json;

namespace {

// Dicts cross the boundary as JSON text; the Python package decodes them.
json parse(const std::string& text) { return text.empty() ? json::object() : json::parse(text); }

Checkpoint make_checkpoint(const FeatureBundle& b, const FitResult& r, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.params = r.params;
  ck.config = cfg;
  ck.fingerprint = bundle_fingerprint(b);
  ck.n_layers = b.n_layers;
  ck.n_attributes = b.schema.n_attributes();
  ck.n_concepts = b.schema.n_concepts();
  ck.n_classes = b.schema.n_classes();
  return ck;
}

}  // namespace

PYBIND11_MODULE(_mvpcbm, m) {
  m.doc() = "Multi-layer preference concept bottleneck head";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, e.what());
    }
  });

  py::class_<FeatureBundle>(m, "Bundle")
      .def_readonly("n_samples", &FeatureBundle::n_samples)
      .def_readonly("n_layers", &FeatureBundle::n_layers)
      .def_readonly("embed_dim", &FeatureBundle::embed_dim)
      .def_readonly("n_patches", &FeatureBundle::n_patches)
      .def_property_readonly("n_attributes", [](const FeatureBundle& b) { return b.schema.n_attributes(); })
      .def_property_readonly("n_concepts", [](const FeatureBundle& b) { return b.schema.n_concepts(); })
      .def_property_readonly("class_names", [](const FeatureBundle& b) { return b.schema.class_names; })
      .def_property_readonly("attribute_names", [](const FeatureBundle& b) { return b.schema.attribute_names; })
      .def_property_readonly("labels",
                             [](const FeatureBundle& b) { return std::vector<std::size_t>(b.labels.begin(), b.labels.end()); })
      .def("fingerprint", &bundle_fingerprint)
      .def("issues", &validate_bundle)
      .def("write", [](const FeatureBundle& b, const std::filesystem::path& p) { write_bundle(b, p); })
      .def("subset", [](const FeatureBundle& b, const std::vector<std::size_t>& idx) { return subset(b, idx); })
      .def("__eq__", [](const FeatureBundle& a, const FeatureBundle& b) { return a == b; });

  m.def("read_bundle", [](const std::filesystem::path& p) { return read_bundle(p); });
  m.def("_synthesize", [](const std::string& cfg) { return generate_synthetic(cli::synth_config_from_json(parse(cfg))); });
  m.def("_planted_layers",
        [](const std::string& cfg) { return resolved_planted_layers(cli::synth_config_from_json(parse(cfg))); });

  py::class_<Checkpoint>(m, "Model")
      .def_readonly("fingerprint", &Checkpoint::fingerprint)
      .def_property_readonly("tau1", [](const Checkpoint& c) { return c.params.tau1(); })
      .def_property_readonly("tau2", [](const Checkpoint& c) { return c.params.tau2.item(); })
      .def_property_readonly("K", [](const Checkpoint& c) { return c.params.K.item(); })
      .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { write_checkpoint(c, p); })
      .def("_json", [](const Checkpoint& c) { return checkpoint_json(c).dump(); })
      .def("_evaluate",
           [](const Checkpoint& c, const FeatureBundle& b) {
             require_compatible(c, b);
             py::gil_scoped_release nogil;
             return to_json(evaluate(b, c.params, c.config)).dump();
           })
      .def("_explain",
           [](const Checkpoint& c, const FeatureBundle& b, std::size_t sample, std::size_t topk) {
             require_compatible(c, b);
             return to_json(explain(b, sample, c.params, c.config, topk)).dump();
           })
      .def("_preference_profile", [](const Checkpoint& c, const FeatureBundle& b) {
        require_compatible(c, b);
        py::gil_scoped_release nogil;
        const auto p = export_preference_profile(b, c.params, c.config);
        return json{{"n_layers", p.n_layers}, {"n_attributes", p.n_attributes}, {"mean", p.mean}, {"std", p.stddev}}
            .dump();
      });

  m.def("load_model", [](const std::filesystem::path& p) { return read_checkpoint(p); });
  m.def("_train", [](const FeatureBundle& b, const std::string& cfg_text) {
    const auto cfg = train_config_from_json(parse(cfg_text));
    FitResult r;
    {
      py::gil_scoped_release nogil;
      r = fit(b, cfg);
    }
    std::vector<std::string> report;
    for (const auto& e : r.report.epochs) report.push_back(to_json(e, cfg.mode).dump());
    return py::make_tuple(make_checkpoint(b, r, cfg), report);
  });
  m.def("_gradcheck", [](std::uint64_t seed, bool inject_fault) {
    cli::GradcheckOptions o;
    o.seed = seed;
    o.inject_fault = inject_fault;
    return cli::to_json(cli::gradcheck(o)).dump();
  });
  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::run(args, out, err);
    return py::make_tuple(code, out.str(), err.str());
  });
}
