#pragma once

// Minimal reverse-mode autodiff over dense row-major Eigen matrices.
//
// A Tape owns every intermediate value; Var is an index into it. Ops are free
// functions that push a node with its value and a closure that scatters the
// node's gradient into its inputs. A tape built with record_gradients=false
// keeps values only (inference).

#include <cmath>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

namespace deepvlf::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  explicit Tape(bool record_gradients = true) : record_(record_gradients) { nodes_.reserve(1024); }

  bool recording() const { return record_; }

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }

  // Leaf whose gradient is added into *sink during backward().
  Var parameter(const Mat& value, Mat* sink) {
    if (!record_) return constant(value);
    return push(value, true, [sink](Tape&, const Mat& g) {
      if (sink->size() == 0) *sink = Mat::Zero(g.rows(), g.cols());
      *sink += g;
    });
  }

  Var push(Mat value, bool needs_grad, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    if (n.needs_grad) n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var v) const { return nodes_.at(v.id).value; }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  template <typename Derived>
  void accumulate(Var v, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[v.id];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Seeds d(loss)/d(loss) = seed and runs every closure in reverse order.
  void backward(Var loss, Scalar seed = Scalar(1)) {
    if (!record_) throw std::logic_error("backward() on a non-recording tape");
    const Mat& lv = value(loss);
    if (lv.size() != 1) throw std::logic_error("backward() needs a scalar loss");
    if (!needs_grad(loss)) return;
    nodes_[loss.id].grad = Mat::Constant(1, 1, seed);
    for (int i = loss.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0 || !n.back) continue;
      n.back(*this, n.grad);
      n.grad.resize(0, 0);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward back;
  };
  std::vector<Node> nodes_;
  bool record_;
};

// ---- ops ------------------------------------------------------------------

template <typename S>
Var matmul(Tape<S>& t, Var a, Var b) {
  Matrix<S> v = t.value(a) * t.value(b);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(v), ng, [a, b](Tape<S>& t, const Matrix<S>& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// a + broadcast row vector bias (1 x cols).
template <typename S>
Var add_row(Tape<S>& t, Var a, Var bias) {
  Matrix<S> v = t.value(a);
  v.rowwise() += t.value(bias).row(0);
  const bool ng = t.needs_grad(a) || t.needs_grad(bias);
  return t.push(std::move(v), ng, [a, bias](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g);
    if (t.needs_grad(bias)) t.accumulate(bias, g.colwise().sum());
  });
}

template <typename S>
Var add(Tape<S>& t, Var a, Var b) {
  Matrix<S> v = t.value(a) + t.value(b);
  return t.push(std::move(v), t.needs_grad(a) || t.needs_grad(b), [a, b](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename S>
Var scale(Tape<S>& t, Var a, S s) {
  Matrix<S> v = t.value(a) * s;
  return t.push(std::move(v), t.needs_grad(a), [a, s](Tape<S>& t, const Matrix<S>& g) { t.accumulate(a, g * s); });
}

// a + c for a constant c of the same shape.
template <typename S>
Var add_const(Tape<S>& t, Var a, const Matrix<S>& c) {
  Matrix<S> v = t.value(a) + c;
  return t.push(std::move(v), t.needs_grad(a), [a](Tape<S>& t, const Matrix<S>& g) { t.accumulate(a, g); });
}

// Element-wise product with a constant column (N x 1) broadcast across columns.
template <typename S>
Var mul_rows(Tape<S>& t, Var a, const Matrix<S>& column) {
  Matrix<S> v = t.value(a).array().colwise() * column.col(0).array();
  return t.push(std::move(v), t.needs_grad(a), [a, column](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> ga = g.array().colwise() * column.col(0).array();
    t.accumulate(a, ga);
  });
}

// Row r of the result is a's row when keep(r) != 0, otherwise b's row.
template <typename S>
Var select_rows(Tape<S>& t, const Matrix<S>& keep, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  Matrix<S> v(va.rows(), va.cols());
  for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) = keep(r, 0) != S(0) ? va.row(r) : vb.row(r);
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.push(std::move(v), ng, [a, b, keep](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> ga = Matrix<S>::Zero(g.rows(), g.cols());
    Matrix<S> gb = Matrix<S>::Zero(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      if (keep(r, 0) != S(0)) {
        ga.row(r) = g.row(r);
      } else {
        gb.row(r) = g.row(r);
      }
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

template <typename S>
Var relu(Tape<S>& t, Var a) {
  Matrix<S> v = t.value(a).cwiseMax(S(0));
  return t.push(std::move(v), t.needs_grad(a), [a](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> ga = (t.value(a).array() > S(0)).select(g, S(0));
    t.accumulate(a, ga);
  });
}

// Exact GeLU: x * Phi(x).
template <typename S>
Var gelu(Tape<S>& t, Var a) {
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  Matrix<S> v = t.value(a).unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  return t.push(std::move(v), t.needs_grad(a), [a, inv_sqrt2](Tape<S>& t, const Matrix<S>& g) {
    const S inv_sqrt_2pi = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    Matrix<S> d = t.value(a).unaryExpr([&](S x) {
      return S(0.5) * (S(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(S(-0.5) * x * x);
    });
    Matrix<S> ga = g.cwiseProduct(d);
    t.accumulate(a, ga);
  });
}

template <typename S>
Matrix<S> softmax_rows_value(const Matrix<S>& x) {
  Matrix<S> v(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mx = x.row(r).maxCoeff();
    v.row(r) = (x.row(r).array() - mx).exp();
    v.row(r) /= v.row(r).sum();
  }
  return v;
}

template <typename S>
Var softmax_rows(Tape<S>& t, Var a) {
  Matrix<S> v = softmax_rows_value(t.value(a));
  const int self = static_cast<int>(t.size());
  return t.push(std::move(v), t.needs_grad(a), [a, self](Tape<S>& t, const Matrix<S>& g) {
    const auto& p = t.value(Var{self});
    Matrix<S> ga = p.cwiseProduct(g);
    const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = ga.rowwise().sum();
    ga -= (p.array().colwise() * dots.array()).matrix();
    t.accumulate(a, ga);
  });
}

template <typename S>
Var concat_cols(Tape<S>& t, std::span<const Var> parts) {
  Eigen::Index rows = t.value(parts[0]).rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    if (t.value(p).rows() != rows) throw std::logic_error("concat_cols: row mismatch");
    cols += t.value(p).cols();
    ng = ng || t.needs_grad(p);
  }
  Matrix<S> v(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    const auto& pv = t.value(p);
    v.middleCols(c, pv.cols()) = pv;
    c += pv.cols();
  }
  std::vector<Var> saved(parts.begin(), parts.end());
  return t.push(std::move(v), ng, [saved](Tape<S>& t, const Matrix<S>& g) {
    Eigen::Index c = 0;
    for (Var p : saved) {
      const auto w = t.value(p).cols();
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(c, w));
      c += w;
    }
  });
}

// Adds row (r mod groups) of emb (groups x d) to row r of h.
template <typename S>
Var add_group_embedding(Tape<S>& t, Var h, Var emb) {
  const auto& e = t.value(emb);
  const Eigen::Index groups = e.rows();
  Matrix<S> v = t.value(h);
  for (Eigen::Index r = 0; r < v.rows(); ++r) v.row(r) += e.row(r % groups);
  const bool ng = t.needs_grad(h) || t.needs_grad(emb);
  return t.push(std::move(v), ng, [h, emb, groups](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(h, g);
    if (t.needs_grad(emb)) {
      Matrix<S> ge = Matrix<S>::Zero(groups, g.cols());
      for (Eigen::Index r = 0; r < g.rows(); ++r) ge.row(r % groups) += g.row(r);
      t.accumulate(emb, ge);
    }
  });
}

// Single-head self-attention applied independently to consecutive blocks of
// `groups` rows. Receiver j of a block gets sum_i rho_ij v_i with
// rho_.j = softmax_i(q_j . k_i * scale). Weights are written to *weights
// (N x groups, row (b,j) holds rho over sources i) when non-null.
template <typename S>
Var block_attention(Tape<S>& t, Var q, Var k, Var v, int groups, S scale_factor,
                    Matrix<S>* weights = nullptr) {
  const auto& qv = t.value(q);
  const auto& kv = t.value(k);
  const auto& vv = t.value(v);
  const Eigen::Index n = qv.rows();
  if (n % groups != 0) throw std::logic_error("block_attention: rows not a multiple of groups");
  auto attn = std::make_shared<Matrix<S>>(n, groups);
  Matrix<S> out(n, vv.cols());
  for (Eigen::Index b = 0; b < n; b += groups) {
    Matrix<S> scores = qv.middleRows(b, groups) * kv.middleRows(b, groups).transpose() * scale_factor;
    attn->middleRows(b, groups) = softmax_rows_value(scores);
    out.middleRows(b, groups) = attn->middleRows(b, groups) * vv.middleRows(b, groups);
  }
  if (weights) *weights = *attn;
  const bool ng = t.needs_grad(q) || t.needs_grad(k) || t.needs_grad(v);
  return t.push(std::move(out), ng, [q, k, v, groups, scale_factor, attn](Tape<S>& t, const Matrix<S>& g) {
    const auto& qv = t.value(q);
    const auto& kv = t.value(k);
    const auto& vv = t.value(v);
    const Eigen::Index n = qv.rows();
    Matrix<S> gq = Matrix<S>::Zero(n, qv.cols());
    Matrix<S> gk = Matrix<S>::Zero(n, kv.cols());
    Matrix<S> gv = Matrix<S>::Zero(n, vv.cols());
    for (Eigen::Index b = 0; b < n; b += groups) {
      const auto a = attn->middleRows(b, groups);
      const auto gb = g.middleRows(b, groups);
      gv.middleRows(b, groups) = a.transpose() * gb;
      Matrix<S> ga = gb * vv.middleRows(b, groups).transpose();
      const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (ga.cwiseProduct(a)).rowwise().sum();
      Matrix<S> gs = a.cwiseProduct((ga.colwise() - dots).eval()) * scale_factor;
      gq.middleRows(b, groups) = gs * kv.middleRows(b, groups);
      gk.middleRows(b, groups) = gs.transpose() * qv.middleRows(b, groups);
    }
    t.accumulate(q, gq);
    t.accumulate(k, gk);
    t.accumulate(v, gv);
  });
}

struct ActiveStats {
  double mean = 0.0;
  double std = 1.0;
  int count = 0;
};

// Standardizes the rows of a column vector x (N x 1) with active(r) != 0 to
// zero mean / unit variance using their own statistics; inactive rows
// output 0 and receive no gradient. Variance is floored at var_floor.
template <typename S>
Var standardize_active(Tape<S>& t, Var x, const Matrix<S>& active, S var_floor, ActiveStats* stats = nullptr) {
  const auto& xv = t.value(x);
  const Eigen::Index n = xv.rows();
  int count = 0;
  S sum = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (active(r, 0) != S(0)) {
      sum += xv(r, 0);
      ++count;
    }
  }
  if (count == 0) {
    if (stats) *stats = ActiveStats{0.0, 1.0, 0};
    return t.push(Matrix<S>::Zero(n, 1), false, nullptr);
  }
  const S mean = sum / S(count);
  S var = 0;
  for (Eigen::Index r = 0; r < n; ++r) {
    if (active(r, 0) != S(0)) var += (xv(r, 0) - mean) * (xv(r, 0) - mean);
  }
  var /= S(count);
  const bool floored = var < var_floor;
  const S sd = std::sqrt(floored ? var_floor : var);
  Matrix<S> out = Matrix<S>::Zero(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    if (active(r, 0) != S(0)) out(r, 0) = (xv(r, 0) - mean) / sd;
  }
  if (stats) *stats = ActiveStats{static_cast<double>(mean), static_cast<double>(sd), count};
  const int self = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(x), [x, active, sd, count, floored, self](Tape<S>& t, const Matrix<S>& g) {
    const auto& xhat = t.value(Var{self});
    const Eigen::Index n = g.rows();
    S gmean = 0, gxmean = 0;
    for (Eigen::Index r = 0; r < n; ++r) {
      if (active(r, 0) != S(0)) {
        gmean += g(r, 0);
        gxmean += g(r, 0) * xhat(r, 0);
      }
    }
    gmean /= S(count);
    gxmean /= S(count);
    if (floored) gxmean = 0;
    Matrix<S> gx = Matrix<S>::Zero(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
      if (active(r, 0) != S(0)) gx(r, 0) = (g(r, 0) - gmean - xhat(r, 0) * gxmean) / sd;
    }
    t.accumulate(x, gx);
  });
}

// (x - mean) / sd on active rows with fixed statistics; inactive rows output 0.
template <typename S>
Var normalize_fixed(Tape<S>& t, Var x, const Matrix<S>& active, S mean, S sd) {
  Matrix<S> out = ((t.value(x).array() - mean) / sd).matrix();
  out = out.cwiseProduct(active);
  return t.push(std::move(out), t.needs_grad(x), [x, active, sd](Tape<S>& t, const Matrix<S>& g) {
    Matrix<S> gx = g.cwiseProduct(active) / sd;
    t.accumulate(x, gx);
  });
}

// -sum_r weight_r * log(max(p[r, target_r], floor)); rows with weight 0 skipped.
template <typename S>
Var weighted_nll(Tape<S>& t, Var probs, std::span<const int> targets, std::span<const S> weights, S floor) {
  const auto& p = t.value(probs);
  S loss = 0;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    if (weights[r] == S(0)) continue;
    loss -= weights[r] * std::log(std::max(p(r, targets[r]), floor));
  }
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<S> w(weights.begin(), weights.end());
  return t.push(Matrix<S>::Constant(1, 1, loss), t.needs_grad(probs),
                [probs, tg = std::move(tg), w = std::move(w), floor](Tape<S>& t, const Matrix<S>& g) {
                  const auto& p = t.value(probs);
                  Matrix<S> gp = Matrix<S>::Zero(p.rows(), p.cols());
                  for (Eigen::Index r = 0; r < p.rows(); ++r) {
                    if (w[r] == S(0)) continue;
                    const S pr = p(r, tg[r]);
                    if (pr > floor) gp(r, tg[r]) = -g(0, 0) * w[r] / pr;
                  }
                  t.accumulate(probs, gp);
                });
}

template <typename S>
Var sum_all(Tape<S>& t, Var a) {
  Matrix<S> v = Matrix<S>::Constant(1, 1, t.value(a).sum());
  const auto rows = t.value(a).rows();
  const auto cols = t.value(a).cols();
  return t.push(std::move(v), t.needs_grad(a), [a, rows, cols](Tape<S>& t, const Matrix<S>& g) {
    t.accumulate(a, Matrix<S>::Constant(rows, cols, g(0, 0)));
  });
}

}  // namespace deepvlf::ad
