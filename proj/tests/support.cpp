#include "support.hpp"

#include <algorithm>
#include <atomic>
#include <unistd.h>

#include "traceform/errors.hpp"

namespace fs = std::filesystem;

namespace traceform::testing {

TempDir::TempDir(const std::string& tag) {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("traceform-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

GeneratorConfig small_generator(int apps, int traces) {
  GeneratorConfig g;
  g.apps = apps;
  g.traces_per_app = traces;
  return g;
}

const World& small_world() {
  static TempDir dir("world");
  static const World w = [] {
    World out;
    out.root = dir.path();
    out.generator = small_generator(10, 6);
    write_corpus(out.generator, 21, dir / "corpus");
    build_dataset(dir / "corpus", DatasetConfig{}, dir / "dataset");
    out.corpus = read_corpus(dir / "corpus");
    out.dataset = load_dataset(dir / "dataset");
    out.store = ScreenStore::from_corpus(out.corpus, ModelConfig{}.text_buckets);
    return out;
  }();
  return w;
}

ScreenFeatures synthetic_screen(int leaves, std::uint64_t seed, int buckets) {
  Rng r = Rng::stream(seed, "synthetic-screen");
  ScreenFeatures s;
  s.screen_id = "syn-" + std::to_string(seed);
  s.app_id = "syn";
  s.width = 360;
  s.height = 640;
  s.whole_vision.resize(kVisionInput);
  for (auto& v : s.whole_vision) v = static_cast<float>(r.uniform());
  for (int i = 0; i < leaves; ++i) {
    LeafNode l;
    l.class_name = "View";
    l.text = "w" + std::to_string(r.below(500));
    const int x0 = static_cast<int>(r.between(0, 300)), y0 = static_cast<int>(r.between(0, 600));
    l.bounds = {x0, y0, x0 + static_cast<int>(r.between(5, 60)), y0 + static_cast<int>(r.between(5, 40))};
    s.sentences.push_back(leaf_sentence(l));
    s.bags.push_back(text_buckets(s.sentences.back(), buckets));
    s.positions.push_back(positional_features(l.bounds, s.width, s.height));
    std::vector<float> v(kVisionInput);
    for (auto& x : v) x = static_cast<float>(r.uniform());
    s.leaf_vision.push_back(std::move(v));
    s.leaves.push_back(std::move(l));
  }
  s.buckets = buckets;
  return s;
}

ModelConfig tiny_model(int text_dim) {
  ModelConfig m;
  m.layers = 2;
  m.heads = 2;
  m.hidden = 8;
  m.ffn_mult = 2;
  m.max_len = 40;
  m.dropout = 0;
  m.text_buckets = 64;
  m.text_dim = text_dim;
  m.vision_dim = 6;
  return m;
}

double relative_error(double analytic, double numeric) {
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (scale < kGradFloor) return 0.0;
  return std::abs(analytic - numeric) / scale;
}

GradCheck check_gradients(Model<double>& model, const std::function<ag::Var(ag::Tape<double>&)>& loss,
                          std::uint64_t seed, int per_tensor, double eps) {
  ag::ParamSet<double> grads = model.params.zeros_like();
  {
    ag::Tape<double> t(&model.params, &grads);
    t.backward(loss(t));
  }
  auto value = [&] {
    ag::Tape<double> t(&model.params, nullptr);
    return t.value(loss(t))(0, 0);
  };
  GradCheck out;
  for (int i = 0; i < model.params.size(); ++i) {
    if (is_frozen(model.params.name(i))) continue;
    auto& w = model.params[i];
    const auto& g = grads[i];
    std::vector<Eigen::Index> nonzero, all;
    for (Eigen::Index k = 0; k < w.size(); ++k) {
      all.push_back(k);
      if (std::abs(g.data()[k]) > kGradFloor) nonzero.push_back(k);
    }
    Rng rng = Rng::stream(seed, "gradcheck", static_cast<std::uint64_t>(i));
    rng.shuffle(nonzero);
    rng.shuffle(all);
    std::vector<Eigen::Index> picks(nonzero.begin(), nonzero.begin() + std::min<std::size_t>(nonzero.size(), per_tensor));
    for (Eigen::Index k : all) {
      if (static_cast<int>(picks.size()) >= per_tensor) break;
      if (std::find(picks.begin(), picks.end(), k) == picks.end()) picks.push_back(k);
    }
    for (Eigen::Index k : picks) {
      const double saved = w.data()[k];
      w.data()[k] = saved + eps;
      const double up = value();
      w.data()[k] = saved - eps;
      const double down = value();
      w.data()[k] = saved;
      const double numeric = (up - down) / (2 * eps);
      const double err = relative_error(g.data()[k], numeric);
      ++out.coordinates;
      if (std::max(std::abs(g.data()[k]), std::abs(numeric)) < kGradFloor) ++out.below_floor;
      if (err > out.worst) {
        out.worst = err;
        out.worst_at = model.params.name(i) + "[" + std::to_string(k) + "] analytic " + std::to_string(g.data()[k]) +
                       " numeric " + std::to_string(numeric);
      }
    }
  }
  return out;
}

}  // namespace traceform::testing
