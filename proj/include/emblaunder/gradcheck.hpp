#pragma once

#include <string>
#include <vector>

#include "emblaunder/graph.hpp"
#include "emblaunder/tensor.hpp"

namespace emblaunder {

struct CheckReport {
  bool pass = false;
  double max_rel_err = 0.0;
  std::vector<double> per_input;  // max relative error per input tensor
  std::string detail;             // worst offender, for diagnostics
};

// |a - b| relative to max(|a|, |b|, 1).
inline double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1.0});
  return std::fabs(a - b) / denom;
}

// Compares an analytic gradient against a reference elementwise; used both by
// grad_check below and by tests that plant corrupted gradients.
inline double max_rel_err(const Tensor& analytic, const TensorD& reference) {
  double worst = 0.0;
  for (int64_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, rel_err(analytic.data[i], reference.data[i]));
  return worst;
}

// Checks the float32 reverse-mode gradient of a scalar-valued subgraph
// against central finite differences evaluated with a float64 forward pass.
// `build` must be callable as build(GraphT<S>&, const std::vector<int>&)
// returning the output node id, for S in {float, double}.
template <typename F>
CheckReport grad_check(F&& build, const std::vector<Tensor>& inputs,
                       double tol, double fd_step = 1e-3) {
  CheckReport report;

  Graph g;
  std::vector<int> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(g.input(t, true));
  const int out = build(g, ids);
  if (g.value(out).size() != 1) throw Error("NonScalar", "grad_check output must be scalar");
  g.backward(out);

  auto eval_double = [&](const std::vector<TensorD>& ins) -> double {
    GraphD gd;
    std::vector<int> did;
    did.reserve(ins.size());
    for (const TensorD& t : ins) did.push_back(gd.input(t, false));
    return gd.scalar_value(build(gd, did));
  };

  std::vector<TensorD> dinputs;
  dinputs.reserve(inputs.size());
  for (const Tensor& t : inputs) dinputs.push_back(t.template cast<double>());

  for (size_t i = 0; i < inputs.size(); ++i) {
    const Tensor& analytic = g.grad(ids[i]);
    double worst = 0.0;
    for (int64_t e = 0; e < inputs[i].size(); ++e) {
      const double orig = dinputs[i].data[static_cast<size_t>(e)];
      dinputs[i].data[static_cast<size_t>(e)] = orig + fd_step;
      const double fp = eval_double(dinputs);
      dinputs[i].data[static_cast<size_t>(e)] = orig - fd_step;
      const double fm = eval_double(dinputs);
      dinputs[i].data[static_cast<size_t>(e)] = orig;
      const double fd = (fp - fm) / (2.0 * fd_step);
      const double err = rel_err(analytic.data[static_cast<size_t>(e)], fd);
      if (err > worst) {
        worst = err;
        if (err > report.max_rel_err) {
          report.detail = "input " + std::to_string(i) + " elem " +
                          std::to_string(e) + ": analytic " +
                          std::to_string(analytic.data[static_cast<size_t>(e)]) +
                          " vs fd " + std::to_string(fd);
        }
      }
    }
    report.per_input.push_back(worst);
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }
  report.pass = report.max_rel_err <= tol;
  return report;
}

}  // namespace emblaunder
