#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffwin/tensor.hpp"

// Central-difference gradient checking. The numeric side recomputes the loss
// with perturbed parameters and never touches the recorded backward rules, so
// it is an independent oracle for them.

namespace diffwin {

// |analytic - numeric| / max(1, |analytic|, |numeric|)
double rel_err(double analytic, double numeric);

struct CoordRef {
  int param;
  std::size_t index;
};

// f must deterministically build a scalar loss on the given tape from the
// current parameter values. Returns the worst relative error over all
// coordinates of all params. step is the central-difference h.
double grad_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& params,
                  double step = 1e-5);

// Same, over an explicit coordinate subset (for sampled whole-model checks).
double grad_check_coords(const std::function<Tensor(Tape&)>& f,
                         const std::vector<Tensor>& params,
                         const std::vector<CoordRef>& coords, double step = 1e-5);

// Deterministic sample of a fraction of all coordinates.
std::vector<CoordRef> sample_coords(const std::vector<Tensor>& params, double fraction,
                                    std::uint64_t seed);

struct GradCheckUnit {
  std::string name;
  std::string scope;  // "ops" | "attention" | "model"
  double threshold;
  std::function<double()> run;  // returns worst relative error
};

// The units behind the `gradcheck` CLI command. include_negative_control adds
// a unit whose analytic gradient is deliberately corrupted; it must fail.
std::vector<GradCheckUnit> standard_gradcheck_units(bool include_negative_control = false);

}  // namespace diffwin
