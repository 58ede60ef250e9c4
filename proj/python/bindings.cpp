#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "kronfisher/data.hpp"
#include "kronfisher/experiment.hpp"

namespace py = pybind11;
using namespace kronfisher;

namespace {

LayerStats make_stats(const Matrix& abar, const Matrix& g) {
  if (abar.rows() != g.rows()) throw DimensionError("abar and g need the same number of rows");
  return {abar, g};
}

SvdSettings settings_from(double eps, int k_max, int krylov_dim, int max_restarts) {
  return {eps, k_max, krylov_dim, max_restarts};
}

py::tuple pair_tuple(const KronPair& p) { return py::make_tuple(p.left, p.right); }

py::dict rank2_dict(const Rank2Result& r) {
  py::dict d;
  d["first"] = pair_tuple(r.first);
  d["second"] = pair_tuple(r.second);
  d["sigma1"] = r.triplet1.sigma;
  d["sigma2"] = r.triplet2.sigma;
  d["degenerate"] = r.degenerate;
  d["converged"] = r.converged;
  d["iterations"] = r.iterations;
  return d;
}

py::dict summary_dict(const ExperimentSummary& s) {
  py::dict d;
  d["diverged"] = s.diverged;
  d["failure"] = s.failure;
  d["iterations"] = s.iterations;
  d["initial_train_loss"] = s.initial_train_loss;
  d["final_train_loss"] = s.final_train_loss;
  d["final_val_loss"] = s.final_val_loss;
  d["epoch_train_loss"] = s.epoch_train_loss;
  d["epoch_val_loss"] = s.epoch_val_loss;
  d["seconds"] = s.seconds;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Kronecker-factored Fisher approximations for MLPs";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<NotPositiveDefinite>(m, "NotPositiveDefinite", PyExc_ArithmeticError);
  py::register_exception<IdxFormatError>(m, "IdxFormatError", PyExc_ValueError);

  m.def("kron", &kron);
  m.def("vec", &vec);
  m.def("mat", &mat, py::arg("v"), py::arg("rows"), py::arg("cols"));
  m.def("zigzag", &zigzag, py::arg("M"), py::arg("d"), py::arg("d_prime"));

  m.def("exact_fim_block", [](const Matrix& abar, const Matrix& g) { return exact_fim_block(make_stats(abar, g)); },
        py::arg("abar"), py::arg("g"));
  m.def("zf_matvec", [](const Matrix& abar, const Matrix& g, const Vector& v) { return zf_matvec(make_stats(abar, g), v); },
        py::arg("abar"), py::arg("g"), py::arg("v"));
  m.def("zf_rmatvec", [](const Matrix& abar, const Matrix& g, const Vector& u) { return zf_rmatvec(make_stats(abar, g), u); },
        py::arg("abar"), py::arg("g"), py::arg("u"));

  m.def("kfac_factors", [](const Matrix& abar, const Matrix& g) { return pair_tuple(kfac_factors(make_stats(abar, g))); },
        py::arg("abar"), py::arg("g"));
  m.def(
      "kpsvd_factors",
      [](const Matrix& abar, const Matrix& g, double eps, int k_max) {
        const Rank1Result r = kpsvd_factors(make_stats(abar, g), settings_from(eps, k_max, 6, 100));
        return py::make_tuple(r.pair.left, r.pair.right, r.triplet.sigma, r.triplet.converged);
      },
      py::arg("abar"), py::arg("g"), py::arg("eps") = 1e-6, py::arg("k_max") = 500);
  auto rank2 = [&m](const char* name, Rank2Result (*fn)(const LayerStats&, const SvdSettings&, const WarmStart&)) {
    m.def(
        name,
        [fn](const Matrix& abar, const Matrix& g, double eps, int k_max, int krylov_dim, int max_restarts) {
          return rank2_dict(fn(make_stats(abar, g), settings_from(eps, k_max, krylov_dim, max_restarts), {}));
        },
        py::arg("abar"), py::arg("g"), py::arg("eps") = 1e-6, py::arg("k_max") = 500, py::arg("krylov_dim") = 6,
        py::arg("max_restarts") = 100);
  };
  rank2("deflation_factors", &deflation_factors);
  rank2("lanczos_factors", &lanczos_factors);
  rank2("kfac_corrected_factors", &kfac_corrected_factors);

  m.def("psd_select", &psd_select);
  m.def("damping_pi", &damping_pi);
  m.def("ema_weight", &ema_weight, py::arg("k"), py::arg("alpha"));
  m.def("apply_rank1_inverse", &apply_rank1_inverse, py::arg("A"), py::arg("G"), py::arg("grad"));
  m.def(
      "kron_sum_solve",
      [](const Matrix& A, const Matrix& B, const Matrix& C, const Matrix& D, const Matrix& V) {
        const KronSumCache cache = kron_sum_prepare(A, B, C, D);
        return py::make_tuple(kron_sum_apply(cache, V), cache.safeguarded);
      },
      py::arg("A"), py::arg("B"), py::arg("C"), py::arg("D"), py::arg("V"));
  m.def(
      "kl_clip",
      [](const GradientSet& pre, const GradientSet& raw, double c) {
        ClipResult r = kl_clip(pre, raw, c);
        return py::make_tuple(r.nu, r.scaled);
      },
      py::arg("preconditioned"), py::arg("raw"), py::arg("c"));
  m.def("approximation_errors", &approximation_errors, py::arg("F"), py::arg("F_hat"));

  m.def("gen_synthetic_curves", &gen_synthetic_curves, py::arg("n"), py::arg("seed"), py::arg("side") = 28);
  m.def("gen_gaussian_blobs", &gen_gaussian_blobs, py::arg("n"), py::arg("seed"), py::arg("side") = 25);
  m.def("load_idx", &load_idx, py::arg("path"));
  m.def("save_idx_images", &save_idx_images, py::arg("path"), py::arg("images"), py::arg("rows"), py::arg("cols"));

  m.def("preset_architecture", [](const std::string& name) {
    const Architecture a = preset_architecture(name);
    std::vector<std::string> acts;
    for (Activation x : a.activations) acts.push_back(to_string(x));
    return py::make_tuple(a.layers, acts, to_string(a.loss));
  });
  m.def("normalize_config", [](const std::string& json) { return config_to_json(parse_config(json)); },
        py::arg("config_json"), "Parses a JSON config and echoes it with every default filled in.");
  m.def(
      "run_experiment",
      [](const std::string& json, bool write_outputs) {
        const ExperimentConfig c = parse_config(json);
        ExperimentResult r;
        {
          py::gil_scoped_release release;
          r = run_experiment(c, {write_outputs, {}});
        }
        return summary_dict(r.summary);
      },
      py::arg("config_json"), py::arg("write_outputs") = false);
}
