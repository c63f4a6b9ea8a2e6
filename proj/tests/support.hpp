#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "traceform/autograd.hpp"
#include "traceform/dataset.hpp"
#include "traceform/features.hpp"
#include "traceform/model.hpp"
#include "traceform/rng.hpp"
#include "traceform/synth.hpp"

namespace traceform::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag);
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

/// A small corpus, its dataset and feature store, built once per test process.
struct World {
  std::filesystem::path root;
  GeneratorConfig generator;
  Corpus corpus;
  Dataset dataset;
  ScreenStore store;
};

const World& small_world();

GeneratorConfig small_generator(int apps = 10, int traces = 6);

/// Hand-built screen with `leaves` random non-overlapping-ish components, no raster needed.
ScreenFeatures synthetic_screen(int leaves, std::uint64_t seed, int buckets = 4096);

/// Tiny config for double-precision gradient checks.
ModelConfig tiny_model(int text_dim = 8);

struct GradCheck {
  int coordinates = 0;
  int below_floor = 0;  // both analytic and numeric under kGradFloor
  double worst = 0;  // largest relative error seen
  std::string worst_at;
};

/// Central differences (step eps) on every trainable tensor against the analytic gradient of
/// `loss`, which records a scalar on the given tape. Picks `per_tensor` coordinates per tensor,
/// preferring those with a nonzero analytic gradient.
GradCheck check_gradients(Model<double>& model, const std::function<ag::Var(ag::Tape<double>&)>& loss,
                          std::uint64_t seed, int per_tensor = 20, double eps = 1e-5);

/// |a - n| / max(|a|, |n|), with both sides below kGradFloor treated as agreeing.
inline constexpr double kGradFloor = 1e-6;
double relative_error(double analytic, double numeric);

}  // namespace traceform::testing
