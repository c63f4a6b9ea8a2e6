#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace traceform::ag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Ordered collection of named tensors. Names are stable identifiers used by checkpoints.
template <typename T>
class ParamSet {
 public:
  int add(std::string name, Matrix<T> value);
  int index(std::string_view name) const;  // throws std::out_of_range
  bool contains(std::string_view name) const;

  Matrix<T>& operator[](int i) { return values_[static_cast<std::size_t>(i)]; }
  const Matrix<T>& operator[](int i) const { return values_[static_cast<std::size_t>(i)]; }
  const std::string& name(int i) const { return names_[static_cast<std::size_t>(i)]; }
  int size() const { return static_cast<int>(values_.size()); }
  std::size_t scalar_count() const;

  ParamSet zeros_like() const;
  void set_zero();
  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (int i = 0; i < size(); ++i) out.add(name(i), (*this)[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Matrix<T>> values_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Parameter nodes alias external storage; their gradients accumulate in `grads`.
template <typename T>
class Tape {
 public:
  Tape(const ParamSet<T>* params = nullptr, ParamSet<T>* grads = nullptr);

  Var constant(Matrix<T> value);
  /// Leaf whose gradient is tracked locally (used by gradient checks on inputs).
  Var variable(Matrix<T> value);
  Var param(int index);

  const Matrix<T>& value(Var v) const;
  Matrix<T>& grad(Var v);
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  Var push(Matrix<T> value, bool needs_grad, std::function<void()> backward);
  void backward(Var root);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    Matrix<T> grad;
    const Matrix<T>* ext_value = nullptr;
    Matrix<T>* ext_grad = nullptr;
    bool needs_grad = false;
    std::function<void()> backward;
  };
  const ParamSet<T>* params_;
  ParamSet<T>* grads_;
  std::vector<Node> nodes_;
};

/// One term of a sparse row: coef * table[row].
template <typename T>
struct EmbedTerm {
  int table = 0;
  int row = 0;
  T coef = T(1);
};

// Dense ops. Shapes follow Eigen row-major conventions: activations are rows.
template <typename T> Var matmul(Tape<T>& t, Var a, Var b);
template <typename T> Var linear(Tape<T>& t, Var x, Var w, Var bias);  // x W + bias(1 x out)
template <typename T> Var add(Tape<T>& t, Var a, Var b);
template <typename T> Var add_row(Tape<T>& t, Var a, Var row);  // broadcast 1 x n over rows
template <typename T> Var scale(Tape<T>& t, Var a, T s);
template <typename T> Var gelu(Tape<T>& t, Var x);
template <typename T> Var layer_norm(Tape<T>& t, Var x, Var gain, Var offset, T eps = T(1e-5));
/// Multi-head scaled dot-product attention. Masked keys get -1e9 logits; masked query rows are zeroed.
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, const std::vector<bool>& mask, int heads);
template <typename T> Var gather_rows(Tape<T>& t, Var x, std::vector<int> rows);  // -1 -> zero row
template <typename T> Var mask_rows(Tape<T>& t, Var x, const std::vector<bool>& keep);
template <typename T> Var transpose(Tape<T>& t, Var x);
template <typename T> Var multiply_const(Tape<T>& t, Var x, Matrix<T> factor);  // elementwise
/// Row r = sum of its terms over the given tables (all tables share a column count).
template <typename T>
Var embed_rows(Tape<T>& t, const std::vector<Var>& tables, const std::vector<std::vector<EmbedTerm<T>>>& rows,
               int cols);

// Scalar losses (1 x 1 outputs).
template <typename T> Var softmax_cross_entropy(Tape<T>& t, Var logits_column, int target);
/// -log of the total softmax mass on `targets` (any non-empty subset of rows).
template <typename T> Var softmax_cross_entropy_set(Tape<T>& t, Var logits_column, const std::vector<int>& targets);
/// Sum over rows of the softmax cross-entropy of row r against class labels[r].
template <typename T> Var cross_entropy_rows(Tape<T>& t, Var logits, const std::vector<int>& labels);
template <typename T> Var bce_with_logits(Tape<T>& t, Var logit, T label);
template <typename T> Var squared_distance(Tape<T>& t, Var x, const Matrix<T>& target);
template <typename T> Var weighted_sum(Tape<T>& t, const std::vector<Var>& terms, const std::vector<T>& weights);

}  // namespace traceform::ag
