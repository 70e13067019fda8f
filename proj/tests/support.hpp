#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "siamattn/siamattn.hpp"

namespace siamattn::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
Var<T> random_var(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return Var<T>(random_tensor<T>(std::move(shape), rng, lo, hi));
}

// Overwrites every parameter with uniform noise (biases and scalars included).
template <typename T>
void randomize(ParameterStore<T>& store, Rng& rng, double scale = 0.5) {
  std::uniform_real_distribution<double> d(-scale, scale);
  for (const auto& p : store.all()) {
    Var<T> v = p.var;
    for (auto& x : v.mutable_value().values()) x = static_cast<T>(d(rng));
  }
}

// sum(out * R) for a fixed pseudo-random R, so every output entry matters.
template <typename T>
Var<T> probe_loss(const Var<T>& out, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<T> r = random_tensor<T>(out.shape(), rng);
  return sum(mul(out, Var<T>(std::move(r))));
}

template <typename S>
struct StoreScalar;
template <typename T>
struct StoreScalar<ParameterStore<T>> {
  using type = T;
};
template <typename S>
using scalar_of = typename StoreScalar<std::decay_t<S>>::type;

struct GradCheck {
  double max_error = 0;  // worst normwise relative error over checked tensors
  std::string worst;
  int tensors = 0;
  int coords = 0;
};

// Compares float autodiff gradients of `loss_f` over `sf` with central
// differences of `loss_d` over `sd` evaluated in double precision. The two
// stores must hold the same parameters in the same order; `sd` receives the
// values of `sf` first. Each checked tensor gets up to `per_tensor` random
// coordinates; the error is ||a - n|| / max(||a||, ||n||). Tensors whose
// sampled gradient is below 1e-6 of the largest one are skipped: some are
// exactly zero in theory (e.g. query bias under column softmax).
template <typename LossF, typename LossD>
GradCheck compare_gradients(ParameterStore<float>& sf, LossF&& loss_f, ParameterStore<double>& sd, LossD&& loss_d,
                            int per_tensor = 6, std::uint64_t seed = 5,
                            const std::function<bool(const std::string&)>& include = {}) {
  sd.copy_values_from(sf);
  sf.zero_grad();
  backward(loss_f());

  GradCheck res;
  Rng rng(seed);
  const double h = 1e-6;
  struct Row {
    std::string name;
    double diff, norm;
  };
  std::vector<Row> rows;
  for (std::size_t t = 0; t < sf.all().size(); ++t) {
    const auto& pf = sf.all()[t];
    if (include && !include(pf.name)) continue;
    Var<double> pd = sd.all()[t].var;
    const std::size_t n = pf.var.value().size();
    std::vector<std::size_t> idx;
    if (static_cast<int>(n) <= per_tensor) {
      for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (int i = 0; i < per_tensor; ++i) idx.push_back(pick(rng));
    }
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i : idx) {
      const double a = pf.var.has_grad() ? static_cast<double>(pf.var.grad()[i]) : 0.0;
      double& x = pd.mutable_value()[i];
      const double keep = x;
      x = keep + h;
      const double up = loss_d().item();
      x = keep - h;
      const double down = loss_d().item();
      x = keep;
      const double num = (up - down) / (2 * h);
      diff2 += (a - num) * (a - num);
      a2 += a * a;
      n2 += num * num;
      ++res.coords;
    }
    rows.push_back({pf.name, std::sqrt(diff2), std::sqrt(std::max(a2, n2))});
  }
  double largest = 0;
  for (const auto& r : rows) largest = std::max(largest, r.norm);
  for (const auto& r : rows) {
    if (r.norm <= 1e-6 * largest || r.norm < 1e-12) continue;
    ++res.tensors;
    const double err = r.diff / r.norm;
    if (err > res.max_error) {
      res.max_error = err;
      res.worst = r.name;
    }
  }
  return res;
}

// `build` receives a ParameterStore<T>, registers everything to differentiate
// (inputs included) and returns a closure producing a scalar loss.
template <typename Build>
GradCheck gradient_check(Build&& build, int per_tensor = 6, std::uint64_t seed = 5,
                         const std::function<bool(const std::string&)>& include = {}) {
  ParameterStore<float> sf;
  auto loss_f = build(sf);
  ParameterStore<double> sd;
  auto loss_d = build(sd);
  return compare_gradients(sf, loss_f, sd, loss_d, per_tensor, seed, include);
}

inline SequenceRecord make_sequence(const std::vector<Box>& boxes, int width = 64, int height = 64) {
  SequenceRecord rec;
  rec.id = "toy";
  for (const auto& b : boxes) {
    rec.frames.emplace_back(3, height, width, 100.f);
    rec.boxes.push_back(b);
    rec.visible.push_back(true);
  }
  return rec;
}

// A synthetic exemplar/search pair at tiny-preset crop sizes, with its mask.
inline CropPair tiny_pair(std::uint64_t seed = 3, int gap = 3) {
  const auto cfg = RunConfig::tiny();
  SyntheticSpec spec = cfg.synthetic.train.base;
  spec.seed = seed;
  const auto seq = generate_synthetic_sequence(spec, "pair");
  const auto a = static_cast<std::size_t>(0), b = static_cast<std::size_t>(gap);
  return crop_exemplar_search(seq.frames[a], seq.boxes[a], seq.frames[b], seq.boxes[b], cfg.crop_config(),
                              &seq.masks[b]);
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("siamattn_" + tag + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace siamattn::testing
