#pragma once

// Nelder-Mead simplex minimization with box clamping. Plenty for the 2-4
// dimensional fusion coefficient searches; every function evaluation is
// appended to the trace so callers can enforce evaluation budgets.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

namespace securegate {

struct NmOptions {
  std::size_t max_evals = 200;
  double init_step = 0.25;
  double f_tol = 1e-12;  // stop when the simplex f-spread collapses
  double lo = -1.5;
  double hi = 1.5;
};

struct NmResult {
  std::vector<double> best_x;
  double best_f = 0.0;
  std::size_t evals = 0;
};

inline NmResult nelder_mead(const std::function<double(const std::vector<double>&)>& f,
                            std::vector<double> start, const NmOptions& opt,
                            std::vector<double>* trace = nullptr) {
  const std::size_t dim = start.size();
  if (dim == 0) throw std::invalid_argument("nelder_mead: empty start point");
  if (opt.max_evals == 0) return {start, 0.0, 0};

  auto clamp = [&](std::vector<double>& x) {
    for (double& v : x) v = std::clamp(v, opt.lo, opt.hi);
  };
  std::size_t evals = 0;
  NmResult best;
  best.best_f = HUGE_VAL;
  auto eval = [&](const std::vector<double>& x) {
    const double fx = f(x);
    ++evals;
    if (trace) trace->push_back(fx);
    if (fx < best.best_f) {
      best.best_f = fx;
      best.best_x = x;
    }
    return fx;
  };

  clamp(start);
  std::vector<std::vector<double>> xs(dim + 1, start);
  std::vector<double> fs(dim + 1);
  for (std::size_t i = 1; i <= dim; ++i) {
    xs[i][i - 1] += opt.init_step;
    clamp(xs[i]);
  }
  for (std::size_t i = 0; i <= dim && evals < opt.max_evals; ++i) fs[i] = eval(xs[i]);
  if (evals < dim + 1) {  // budget exhausted mid-initialization
    best.evals = evals;
    return best;
  }

  constexpr double kReflect = 1.0, kExpand = 2.0, kContract = 0.5, kShrink = 0.5;
  while (evals < opt.max_evals) {
    std::vector<std::size_t> idx(dim + 1);
    for (std::size_t i = 0; i <= dim; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return fs[a] < fs[b]; });
    std::vector<std::vector<double>> xs2(dim + 1);
    std::vector<double> fs2(dim + 1);
    for (std::size_t i = 0; i <= dim; ++i) {
      xs2[i] = xs[idx[i]];
      fs2[i] = fs[idx[i]];
    }
    xs.swap(xs2);
    fs.swap(fs2);
    if (fs[dim] - fs[0] <= opt.f_tol) break;

    std::vector<double> centroid(dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j) centroid[j] += xs[i][j] / double(dim);

    auto blend = [&](double t) {
      std::vector<double> x(dim);
      for (std::size_t j = 0; j < dim; ++j)
        x[j] = centroid[j] + t * (xs[dim][j] - centroid[j]);
      clamp(x);
      return x;
    };

    std::vector<double> xr = blend(-kReflect);
    const double fr = eval(xr);
    if (fr < fs[0]) {
      if (evals >= opt.max_evals) break;
      std::vector<double> xe = blend(-kExpand);
      const double fe = eval(xe);
      if (fe < fr) {
        xs[dim] = xe;
        fs[dim] = fe;
      } else {
        xs[dim] = xr;
        fs[dim] = fr;
      }
    } else if (fr < fs[dim - 1]) {
      xs[dim] = xr;
      fs[dim] = fr;
    } else {
      if (evals >= opt.max_evals) break;
      std::vector<double> xc = blend(fr < fs[dim] ? -kContract : kContract);
      const double fc = eval(xc);
      if (fc < std::min(fr, fs[dim])) {
        xs[dim] = xc;
        fs[dim] = fc;
      } else {
        for (std::size_t i = 1; i <= dim && evals < opt.max_evals; ++i) {
          for (std::size_t j = 0; j < dim; ++j)
            xs[i][j] = xs[0][j] + kShrink * (xs[i][j] - xs[0][j]);
          clamp(xs[i]);
          fs[i] = eval(xs[i]);
        }
      }
    }
  }
  best.evals = evals;
  return best;
}

}  // namespace securegate
