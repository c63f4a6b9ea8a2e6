#include "traceform/autograd.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>

namespace traceform::ag {

// ---- ParamSet --------------------------------------------------------------

template <typename T>
int ParamSet<T>::add(std::string name, Matrix<T> value) {
  if (contains(name)) throw std::invalid_argument("duplicate tensor name " + name);
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return static_cast<int>(values_.size()) - 1;
}

template <typename T>
int ParamSet<T>::index(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return static_cast<int>(i);
  }
  throw std::out_of_range("no tensor named " + std::string(name));
}

template <typename T>
bool ParamSet<T>::contains(std::string_view name) const {
  for (const auto& n : names_) {
    if (n == name) return true;
  }
  return false;
}

template <typename T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

template <typename T>
ParamSet<T> ParamSet<T>::zeros_like() const {
  ParamSet<T> out;
  for (std::size_t i = 0; i < values_.size(); ++i) {
    out.add(names_[i], Matrix<T>::Zero(values_[i].rows(), values_[i].cols()));
  }
  return out;
}

template <typename T>
void ParamSet<T>::set_zero() {
  for (auto& v : values_) v.setZero();
}

// ---- Tape ------------------------------------------------------------------

template <typename T>
Tape<T>::Tape(const ParamSet<T>* params, ParamSet<T>* grads) : params_(params), grads_(grads) {
  nodes_.reserve(256);
}

template <typename T>
Var Tape<T>::constant(Matrix<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::variable(Matrix<T> value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var Tape<T>::param(int index) {
  if (!params_) throw std::logic_error("tape has no parameter set");
  Node n;
  n.ext_value = &(*params_)[index];
  if (grads_) {
    n.ext_grad = &(*grads_)[index];
    n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
const Matrix<T>& Tape<T>::value(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  return n.ext_value ? *n.ext_value : n.value;
}

template <typename T>
Matrix<T>& Tape<T>::grad(Var v) {
  Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.ext_grad) return *n.ext_grad;
  if (n.grad.size() == 0) {
    const Matrix<T>& val = n.ext_value ? *n.ext_value : n.value;
    n.grad = Matrix<T>::Zero(val.rows(), val.cols());
  }
  return n.grad;
}

template <typename T>
Var Tape<T>::push(Matrix<T> value, bool needs_grad, std::function<void()> backward) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
void Tape<T>::backward(Var root) {
  Matrix<T>& g = grad(root);
  g.setOnes();
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.backward || n.grad.size() == 0) continue;
    n.backward();
  }
}

// ---- ops -------------------------------------------------------------------

namespace {

template <typename T>
bool any_grad(Tape<T>& t, std::initializer_list<Var> vars) {
  for (Var v : vars) {
    if (v.valid() && t.needs_grad(v)) return true;
  }
  return false;
}

}  // namespace

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.cols() != B.rows()) throw std::invalid_argument("matmul shape mismatch");
  Matrix<T> out = A * B;
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {a, b}), [&t, a, b, o] {
    const Matrix<T>& g = t.grad(o);
    if (t.needs_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var bias) {
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  if (X.cols() != W.rows()) throw std::invalid_argument("linear shape mismatch");
  Matrix<T> out = X * W;
  if (bias.valid()) out.rowwise() += t.value(bias).row(0);
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x, w, bias}), [&t, x, w, bias, o] {
    const Matrix<T>& g = t.grad(o);
    if (t.needs_grad(x)) t.grad(x).noalias() += g * t.value(w).transpose();
    if (t.needs_grad(w)) t.grad(w).noalias() += t.value(x).transpose() * g;
    if (bias.valid() && t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rows() != B.rows() || A.cols() != B.cols()) throw std::invalid_argument("add shape mismatch");
  Matrix<T> out = A + B;
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {a, b}), [&t, a, b, o] {
    const Matrix<T>& g = t.grad(o);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(b)) t.grad(b) += g;
  });
}

template <typename T>
Var add_row(Tape<T>& t, Var a, Var row) {
  Matrix<T> out = t.value(a);
  out.rowwise() += t.value(row).row(0);
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {a, row}), [&t, a, row, o] {
    const Matrix<T>& g = t.grad(o);
    if (t.needs_grad(a)) t.grad(a) += g;
    if (t.needs_grad(row)) t.grad(row).row(0) += g.colwise().sum();
  });
}

template <typename T>
Var scale(Tape<T>& t, Var a, T s) {
  Matrix<T> out = t.value(a) * s;
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {a}), [&t, a, s, o] { t.grad(a) += t.grad(o) * s; });
}

template <typename T>
Var gelu(Tape<T>& t, Var x) {
  const T c = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T k = static_cast<T>(0.044715);
  const auto& X = t.value(x);
  Matrix<T> out(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    const T v = X.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v)));
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, o, c, k] {
    const auto& X = t.value(x);
    const Matrix<T>& g = t.grad(o);
    Matrix<T>& gx = t.grad(x);
    for (Eigen::Index i = 0; i < X.size(); ++i) {
      const T v = X.data()[i];
      const T th = std::tanh(c * (v + k * v * v * v));
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * c * (T(1) + T(3) * k * v * v);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gain, Var offset, T eps) {
  const auto& X = t.value(x);
  const Eigen::Index n = X.cols();
  auto xhat = std::make_shared<Matrix<T>>(X.rows(), n);
  auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(X.rows()));
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const T mean = X.row(r).mean();
    const T var = (X.row(r).array() - mean).square().mean();
    const T rs = T(1) / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    xhat->row(r) = (X.row(r).array() - mean) * rs;
  }
  Matrix<T> out = xhat->array().rowwise() * t.value(gain).row(0).array();
  out.rowwise() += t.value(offset).row(0);
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x, gain, offset}), [&t, x, gain, offset, o, xhat, rstd] {
    const Matrix<T>& g = t.grad(o);
    if (t.needs_grad(gain)) t.grad(gain).row(0) += (g.array() * xhat->array()).colwise().sum().matrix();
    if (t.needs_grad(offset)) t.grad(offset).row(0) += g.colwise().sum();
    if (t.needs_grad(x)) {
      const auto& G = t.value(gain);
      Matrix<T>& gx = t.grad(x);
      const T n = static_cast<T>(g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        Eigen::Array<T, 1, Eigen::Dynamic> dxhat = g.row(r).array() * G.row(0).array();
        const T m1 = dxhat.sum() / n;
        const T m2 = (dxhat * xhat->row(r).array()).sum() / n;
        gx.row(r).array() += (*rstd)[static_cast<std::size_t>(r)] * (dxhat - m1 - xhat->row(r).array() * m2);
      }
    }
  });
}

template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, const std::vector<bool>& mask, int heads) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  const auto& V = t.value(v);
  const Eigen::Index L = Q.rows();
  const Eigen::Index D = Q.cols();
  if (K.rows() != L || V.rows() != L || K.cols() != D || V.cols() != D) {
    throw std::invalid_argument("attention shape mismatch");
  }
  if (static_cast<Eigen::Index>(mask.size()) != L) throw std::invalid_argument("attention mask length");
  if (heads <= 0 || D % heads != 0) throw std::invalid_argument("hidden not divisible by heads");
  const Eigen::Index dh = D / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<Matrix<T>>>(static_cast<std::size_t>(heads));
  Matrix<T> out = Matrix<T>::Zero(L, D);
  for (int h = 0; h < heads; ++h) {
    Matrix<T> s = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * inv;
    for (Eigen::Index j = 0; j < L; ++j) {
      if (!mask[static_cast<std::size_t>(j)]) s.col(j).array() += T(-1e9);
    }
    for (Eigen::Index i = 0; i < L; ++i) {
      const T mx = s.row(i).maxCoeff();
      s.row(i) = (s.row(i).array() - mx).exp();
      s.row(i) /= s.row(i).sum();
    }
    out.middleCols(h * dh, dh).noalias() = s * V.middleCols(h * dh, dh);
    (*probs)[static_cast<std::size_t>(h)] = std::move(s);
  }
  for (Eigen::Index i = 0; i < L; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) out.row(i).setZero();
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {q, k, v}), [&t, q, k, v, o, mask, heads, dh, inv, probs] {
    Matrix<T> g = t.grad(o);
    const Eigen::Index L = g.rows();
    for (Eigen::Index i = 0; i < L; ++i) {
      if (!mask[static_cast<std::size_t>(i)]) g.row(i).setZero();
    }
    const auto& Q = t.value(q);
    const auto& K = t.value(k);
    const auto& V = t.value(v);
    for (int h = 0; h < heads; ++h) {
      const Matrix<T>& P = (*probs)[static_cast<std::size_t>(h)];
      auto gh = g.middleCols(h * dh, dh);
      if (t.needs_grad(v)) t.grad(v).middleCols(h * dh, dh).noalias() += P.transpose() * gh;
      Matrix<T> dP = gh * V.middleCols(h * dh, dh).transpose();
      Matrix<T> dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
      dS *= inv;
      if (t.needs_grad(q)) t.grad(q).middleCols(h * dh, dh).noalias() += dS * K.middleCols(h * dh, dh);
      if (t.needs_grad(k)) t.grad(k).middleCols(h * dh, dh).noalias() += dS.transpose() * Q.middleCols(h * dh, dh);
    }
  });
}

template <typename T>
Var gather_rows(Tape<T>& t, Var x, std::vector<int> rows) {
  const auto& X = t.value(x);
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= 0) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, o, rows = std::move(rows)] {
    const Matrix<T>& g = t.grad(o);
    Matrix<T>& gx = t.grad(x);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= 0) gx.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

template <typename T>
Var mask_rows(Tape<T>& t, Var x, const std::vector<bool>& keep) {
  Matrix<T> out = t.value(x);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    if (!keep[static_cast<std::size_t>(i)]) out.row(i).setZero();
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, o, keep] {
    const Matrix<T>& g = t.grad(o);
    Matrix<T>& gx = t.grad(x);
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (keep[static_cast<std::size_t>(i)]) gx.row(i) += g.row(i);
    }
  });
}

template <typename T>
Var multiply_const(Tape<T>& t, Var x, Matrix<T> factor) {
  Matrix<T> out = t.value(x).cwiseProduct(factor);
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, o, factor = std::move(factor)] {
    t.grad(x) += t.grad(o).cwiseProduct(factor);
  });
}

template <typename T>
Var embed_rows(Tape<T>& t, const std::vector<Var>& tables, const std::vector<std::vector<EmbedTerm<T>>>& rows,
               int cols) {
  Matrix<T> out = Matrix<T>::Zero(static_cast<Eigen::Index>(rows.size()), cols);
  bool needs = false;
  for (Var tb : tables) {
    if (t.value(tb).cols() != cols) throw std::invalid_argument("embed_rows column mismatch");
    needs = needs || t.needs_grad(tb);
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (const auto& term : rows[r]) {
      out.row(static_cast<Eigen::Index>(r)) += term.coef * t.value(tables[static_cast<std::size_t>(term.table)]).row(term.row);
    }
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), needs, [&t, tables, rows, o] {
    const Matrix<T>& g = t.grad(o);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      for (const auto& term : rows[r]) {
        Var tb = tables[static_cast<std::size_t>(term.table)];
        if (t.needs_grad(tb)) t.grad(tb).row(term.row) += term.coef * g.row(static_cast<Eigen::Index>(r));
      }
    }
  });
}

template <typename T>
Var softmax_cross_entropy(Tape<T>& t, Var logits, int target) {
  const auto& z = t.value(logits);
  if (z.cols() != 1 || target < 0 || target >= z.rows()) throw std::invalid_argument("cross entropy target");
  const T mx = z.maxCoeff();
  const T lse = mx + std::log((z.array() - mx).exp().sum());
  Matrix<T> out(1, 1);
  out(0, 0) = lse - z(target, 0);
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {logits}), [&t, logits, target, lse, o] {
    const T g = t.grad(o)(0, 0);
    Matrix<T> p = (t.value(logits).array() - lse).exp().matrix();
    p(target, 0) -= T(1);
    t.grad(logits) += g * p;
  });
}

template <typename T>
Var transpose(Tape<T>& t, Var x) {
  Matrix<T> out = t.value(x).transpose();
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, o] { t.grad(x) += t.grad(o).transpose(); });
}

template <typename T>
Var softmax_cross_entropy_set(Tape<T>& t, Var logits, const std::vector<int>& targets) {
  const auto& z = t.value(logits);
  if (z.cols() != 1 || targets.empty()) throw std::invalid_argument("cross entropy target set");
  for (int k : targets) {
    if (k < 0 || k >= z.rows()) throw std::invalid_argument("cross entropy target set");
  }
  const T mx = z.maxCoeff();
  const T lse = mx + std::log((z.array() - mx).exp().sum());
  T tmx = z(targets[0], 0);
  for (int k : targets) tmx = std::max(tmx, z(k, 0));
  T tsum = 0;
  for (int k : targets) tsum += std::exp(z(k, 0) - tmx);
  const T tlse = tmx + std::log(tsum);
  Matrix<T> out(1, 1);
  out(0, 0) = lse - tlse;
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {logits}), [&t, logits, targets, lse, tlse, o] {
    const T g = t.grad(o)(0, 0);
    const auto& z = t.value(logits);
    Matrix<T> d = (z.array() - lse).exp().matrix();
    for (int k : targets) d(k, 0) -= std::exp(z(k, 0) - tlse);
    t.grad(logits) += g * d;
  });
}

template <typename T>
Var cross_entropy_rows(Tape<T>& t, Var logits, const std::vector<int>& labels) {
  const auto& z = t.value(logits);
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw std::invalid_argument("cross entropy rows");
  auto lse = std::make_shared<std::vector<T>>(labels.size());
  Matrix<T> out = Matrix<T>::Zero(1, 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw std::invalid_argument("cross entropy label out of range");
    const T mx = z.row(r).maxCoeff();
    const T l = mx + std::log((z.row(r).array() - mx).exp().sum());
    (*lse)[static_cast<std::size_t>(r)] = l;
    out(0, 0) += l - z(r, y);
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {logits}), [&t, logits, labels, lse, o] {
    const T g = t.grad(o)(0, 0);
    const auto& z = t.value(logits);
    Matrix<T>& gz = t.grad(logits);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const auto sr = static_cast<std::size_t>(r);
      gz.row(r).array() += g * (z.row(r).array() - (*lse)[sr]).exp();
      gz(r, labels[sr]) -= g;
    }
  });
}

template <typename T>
Var bce_with_logits(Tape<T>& t, Var logit, T label) {
  const T z = t.value(logit)(0, 0);
  Matrix<T> out(1, 1);
  out(0, 0) = std::max(z, T(0)) - z * label + std::log1p(std::exp(-std::fabs(z)));
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {logit}), [&t, logit, label, z, o] {
    const T sig = T(1) / (T(1) + std::exp(-z));
    t.grad(logit)(0, 0) += t.grad(o)(0, 0) * (sig - label);
  });
}

template <typename T>
Var squared_distance(Tape<T>& t, Var x, const Matrix<T>& target) {
  const auto& X = t.value(x);
  if (X.rows() != target.rows() || X.cols() != target.cols()) throw std::invalid_argument("squared_distance shape");
  Matrix<T> out(1, 1);
  out(0, 0) = (X - target).squaredNorm();
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), any_grad(t, {x}), [&t, x, target, o] {
    t.grad(x) += (t.grad(o)(0, 0) * T(2)) * (t.value(x) - target);
  });
}

template <typename T>
Var weighted_sum(Tape<T>& t, const std::vector<Var>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw std::invalid_argument("weighted_sum arity");
  Matrix<T> out = Matrix<T>::Zero(1, 1);
  bool needs = false;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    out(0, 0) += weights[i] * t.value(terms[i])(0, 0);
    needs = needs || t.needs_grad(terms[i]);
  }
  Var o{static_cast<int>(t.size())};
  return t.push(std::move(out), needs, [&t, terms, weights, o] {
    const T g = t.grad(o)(0, 0);
    for (std::size_t i = 0; i < terms.size(); ++i) {
      if (t.needs_grad(terms[i])) t.grad(terms[i])(0, 0) += g * weights[i];
    }
  });
}

#define TRACEFORM_INSTANTIATE(T)                                                                   \
  template class ParamSet<T>;                                                                      \
  template class Tape<T>;                                                                          \
  template Var matmul<T>(Tape<T>&, Var, Var);                                                      \
  template Var linear<T>(Tape<T>&, Var, Var, Var);                                                 \
  template Var add<T>(Tape<T>&, Var, Var);                                                         \
  template Var add_row<T>(Tape<T>&, Var, Var);                                                     \
  template Var scale<T>(Tape<T>&, Var, T);                                                         \
  template Var gelu<T>(Tape<T>&, Var);                                                             \
  template Var layer_norm<T>(Tape<T>&, Var, Var, Var, T);                                          \
  template Var attention<T>(Tape<T>&, Var, Var, Var, const std::vector<bool>&, int);               \
  template Var gather_rows<T>(Tape<T>&, Var, std::vector<int>);                                    \
  template Var mask_rows<T>(Tape<T>&, Var, const std::vector<bool>&);                              \
  template Var multiply_const<T>(Tape<T>&, Var, Matrix<T>);                                        \
  template Var transpose<T>(Tape<T>&, Var);                                                        \
  template Var softmax_cross_entropy_set<T>(Tape<T>&, Var, const std::vector<int>&);               \
  template Var cross_entropy_rows<T>(Tape<T>&, Var, const std::vector<int>&);                      \
  template Var embed_rows<T>(Tape<T>&, const std::vector<Var>&,                                    \
                             const std::vector<std::vector<EmbedTerm<T>>>&, int);                  \
  template Var softmax_cross_entropy<T>(Tape<T>&, Var, int);                                       \
  template Var bce_with_logits<T>(Tape<T>&, Var, T);                                               \
  template Var squared_distance<T>(Tape<T>&, Var, const Matrix<T>&);                               \
  template Var weighted_sum<T>(Tape<T>&, const std::vector<Var>&, const std::vector<T>&);

TRACEFORM_INSTANTIATE(float)
TRACEFORM_INSTANTIATE(double)

}  // namespace traceform::ag
