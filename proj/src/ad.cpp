#include "nextloc/ad.hpp"

#include <algorithm>
#include <cmath>

namespace nextloc::ad {

bool Mat::all_finite() const {
  for (double v : a) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void matmul_acc(const Mat& A, const Mat& B, Mat& C) {
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    double* crow = C.row(i);
    for (int p = 0; p < A.cols; ++p) {
      const double av = arow[p];
      const double* brow = B.row(p);
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C) {
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    double* crow = C.row(i);
    for (int j = 0; j < B.rows; ++j) {
      const double* brow = B.row(j);
      double dot = 0.0;
      for (int p = 0; p < A.cols; ++p) dot += arow[p] * brow[p];
      crow[j] += dot;
    }
  }
}

void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C) {
  for (int i = 0; i < A.rows; ++i) {
    const double* arow = A.row(i);
    const double* brow = B.row(i);
    for (int p = 0; p < A.cols; ++p) {
      const double av = arow[p];
      double* crow = C.row(p);
      for (int j = 0; j < B.cols; ++j) crow[j] += av * brow[j];
    }
  }
}

void fill_gaussian(Mat& m, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : m.a) v = dist(rng);
}

void fill_orthogonal(Mat& m, double gain, std::mt19937_64& rng) {
  const bool wide = m.cols > m.rows;
  const int nvec = wide ? m.rows : m.cols;
  const int dim = wide ? m.cols : m.rows;
  std::vector<std::vector<double>> basis(static_cast<std::size_t>(nvec));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : basis) {
    v.resize(static_cast<std::size_t>(dim));
    for (double& x : v) x = dist(rng);
  }
  for (int i = 0; i < nvec; ++i) {
    auto& vi = basis[static_cast<std::size_t>(i)];
    for (int j = 0; j < i; ++j) {
      const auto& vj = basis[static_cast<std::size_t>(j)];
      double dot = 0.0;
      for (int k = 0; k < dim; ++k) dot += vi[k] * vj[k];
      for (int k = 0; k < dim; ++k) vi[k] -= dot * vj[k];
    }
    double norm = 0.0;
    for (int k = 0; k < dim; ++k) norm += vi[k] * vi[k];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // Degenerate draw; replace with a unit axis vector.
      std::fill(vi.begin(), vi.end(), 0.0);
      vi[static_cast<std::size_t>(i % dim)] = 1.0;
      norm = 1.0;
    }
    for (int k = 0; k < dim; ++k) vi[k] /= norm;
  }
  for (int r = 0; r < m.rows; ++r) {
    for (int c = 0; c < m.cols; ++c) {
      const double v = wide ? basis[static_cast<std::size_t>(r)]
                                   [static_cast<std::size_t>(c)]
                            : basis[static_cast<std::size_t>(c)]
                                   [static_cast<std::size_t>(r)];
      m.at(r, c) = gain * v;
    }
  }
}

int Tape::check(Id id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
    throw NumericError("tape: invalid node id");
  }
  return id;
}

const Mat& Tape::val(Id id) const {
  const Node& n = nodes_[static_cast<std::size_t>(check(id))];
  return n.param != nullptr ? n.param->value : n.val;
}

Mat& Tape::ensure_grad(Id id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty()) {
    const Mat& v = val(id);
    n.grad = Mat(v.rows, v.cols);
  }
  return n.grad;
}

Tape::Id Tape::push(Node n) {
  if (!grad_enabled_) n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::input(Mat v) {
  Node n;
  n.op = Op::kInput;
  n.val = std::move(v);
  return push(std::move(n));
}

Tape::Id Tape::param(Param& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return it->second;
  Node n;
  n.op = Op::kParam;
  n.param = &p;
  n.needs_grad = p.trainable;
  const Id id = push(std::move(n));
  param_nodes_.emplace(&p, id);
  return id;
}

Tape::Id Tape::matmul(Id a, Id b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  if (A.cols != B.rows) throw NumericError("matmul: shape mismatch");
  Node n;
  n.op = Op::kMatmul;
  n.a = a;
  n.b = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = Mat(A.rows, B.cols);
  matmul_acc(A, B, n.val);
  return push(std::move(n));
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  if (A.cols != B.cols) throw NumericError("matmul_nt: shape mismatch");
  Node n;
  n.op = Op::kMatmulNT;
  n.a = a;
  n.b = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = Mat(A.rows, B.rows);
  matmul_nt_acc(A, B, n.val);
  return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  if (A.rows != B.rows || A.cols != B.cols) {
    throw NumericError("add: shape mismatch");
  }
  Node n;
  n.op = Op::kAdd;
  n.a = a;
  n.b = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = A;
  for (std::size_t i = 0; i < n.val.size(); ++i) n.val.a[i] += B.a[i];
  return push(std::move(n));
}

Tape::Id Tape::add_row(Id a, Id row) {
  const Mat& A = val(a);
  const Mat& R = val(row);
  if (R.rows != 1 || R.cols != A.cols) {
    throw NumericError("add_row: shape mismatch");
  }
  Node n;
  n.op = Op::kAddRow;
  n.a = a;
  n.b = row;
  n.needs_grad = nodes_[a].needs_grad || nodes_[row].needs_grad;
  n.val = A;
  for (int r = 0; r < A.rows; ++r) {
    double* out = n.val.row(r);
    for (int c = 0; c < A.cols; ++c) out[c] += R.a[static_cast<std::size_t>(c)];
  }
  return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double s) {
  Node n;
  n.op = Op::kScale;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.daux = {s};
  n.val = val(a);
  for (double& v : n.val.a) v *= s;
  return push(std::move(n));
}

Tape::Id Tape::tanh_of(Id a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.val = val(a);
  for (double& v : n.val.a) v = std::tanh(v);
  return push(std::move(n));
}

Tape::Id Tape::concat_rows(const std::vector<Id>& parts) {
  if (parts.empty()) throw NumericError("concat_rows: no parts");
  int rows = 0;
  const int cols = val(parts[0]).cols;
  bool ng = false;
  for (Id id : parts) {
    const Mat& v = val(id);
    if (v.cols != cols) throw NumericError("concat_rows: column mismatch");
    rows += v.rows;
    ng = ng || nodes_[id].needs_grad;
  }
  Node n;
  n.op = Op::kConcatRows;
  n.ids = parts;
  n.needs_grad = ng;
  n.val = Mat(rows, cols);
  int r = 0;
  for (Id id : parts) {
    const Mat& v = val(id);
    std::copy(v.a.begin(), v.a.end(), n.val.row(r));
    r += v.rows;
  }
  return push(std::move(n));
}

Tape::Id Tape::concat_cols(Id a, Id b) {
  const Mat& A = val(a);
  const Mat& B = val(b);
  if (A.rows != B.rows) throw NumericError("concat_cols: row mismatch");
  Node n;
  n.op = Op::kConcatCols;
  n.a = a;
  n.b = b;
  n.needs_grad = nodes_[a].needs_grad || nodes_[b].needs_grad;
  n.val = Mat(A.rows, A.cols + B.cols);
  for (int r = 0; r < A.rows; ++r) {
    std::copy(A.row(r), A.row(r) + A.cols, n.val.row(r));
    std::copy(B.row(r), B.row(r) + B.cols, n.val.row(r) + A.cols);
  }
  return push(std::move(n));
}

Tape::Id Tape::slice_rows(Id a, int r0, int r1) {
  const Mat& A = val(a);
  if (r0 < 0 || r1 > A.rows || r0 >= r1) {
    throw NumericError("slice_rows: bad range");
  }
  Node n;
  n.op = Op::kSliceRows;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.iaux = {r0, r1};
  n.val = Mat(r1 - r0, A.cols);
  std::copy(A.row(r0), A.row(r0) + n.val.size(), n.val.a.begin());
  return push(std::move(n));
}

Tape::Id Tape::slice_cols(Id a, int c0, int c1) {
  const Mat& A = val(a);
  if (c0 < 0 || c1 > A.cols || c0 >= c1) {
    throw NumericError("slice_cols: bad range");
  }
  Node n;
  n.op = Op::kSliceCols;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.iaux = {c0, c1};
  n.val = Mat(A.rows, c1 - c0);
  for (int r = 0; r < A.rows; ++r) {
    std::copy(A.row(r) + c0, A.row(r) + c1, n.val.row(r));
  }
  return push(std::move(n));
}

Tape::Id Tape::gather_rows(Id table, std::vector<int> rows) {
  const Mat& T = val(table);
  for (int r : rows) {
    if (r < 0 || r >= T.rows) throw NumericError("gather_rows: index out of range");
  }
  Node n;
  n.op = Op::kGatherRows;
  n.a = table;
  n.needs_grad = nodes_[table].needs_grad;
  n.val = Mat(static_cast<int>(rows.size()), T.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(T.row(rows[i]), T.row(rows[i]) + T.cols,
              n.val.row(static_cast<int>(i)));
  }
  n.iaux = std::move(rows);
  return push(std::move(n));
}

Tape::Id Tape::row_mean(Id a) {
  const Mat& A = val(a);
  if (A.rows < 1) throw NumericError("row_mean: empty input");
  Node n;
  n.op = Op::kRowMean;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.val = Mat(1, A.cols);
  for (int r = 0; r < A.rows; ++r) {
    const double* src = A.row(r);
    for (int c = 0; c < A.cols; ++c) n.val.a[static_cast<std::size_t>(c)] += src[c];
  }
  for (double& v : n.val.a) v /= A.rows;
  return push(std::move(n));
}

Tape::Id Tape::layer_norm(Id x, Id gain, Id bias, double eps) {
  const Mat& X = val(x);
  const Mat& G = val(gain);
  const Mat& B = val(bias);
  if (G.rows != 1 || B.rows != 1 || G.cols != X.cols || B.cols != X.cols) {
    throw NumericError("layer_norm: shape mismatch");
  }
  Node n;
  n.op = Op::kLayerNorm;
  n.a = x;
  n.b = gain;
  n.c = bias;
  n.needs_grad = nodes_[x].needs_grad || nodes_[gain].needs_grad ||
                 nodes_[bias].needs_grad;
  n.daux = {eps};
  n.val = Mat(X.rows, X.cols);
  for (int r = 0; r < X.rows; ++r) {
    const double* src = X.row(r);
    double mu = 0.0;
    for (int c = 0; c < X.cols; ++c) mu += src[c];
    mu /= X.cols;
    double var = 0.0;
    for (int c = 0; c < X.cols; ++c) {
      const double d = src[c] - mu;
      var += d * d;
    }
    var /= X.cols;
    const double inv = 1.0 / std::sqrt(var + eps);
    double* out = n.val.row(r);
    for (int c = 0; c < X.cols; ++c) {
      out[c] = G.a[static_cast<std::size_t>(c)] * (src[c] - mu) * inv +
               B.a[static_cast<std::size_t>(c)];
    }
  }
  return push(std::move(n));
}

Tape::Id Tape::softmax_causal(Id scores) {
  const Mat& S = val(scores);
  if (S.rows != S.cols) throw NumericError("softmax_causal: scores not square");
  Node n;
  n.op = Op::kSoftmaxCausal;
  n.a = scores;
  n.needs_grad = nodes_[scores].needs_grad;
  n.val = Mat(S.rows, S.cols);
  for (int r = 0; r < S.rows; ++r) {
    const double* src = S.row(r);
    double mx = src[0];
    for (int c = 1; c <= r; ++c) mx = std::max(mx, src[c]);
    double sum = 0.0;
    double* out = n.val.row(r);
    for (int c = 0; c <= r; ++c) {
      out[c] = std::exp(src[c] - mx);
      sum += out[c];
    }
    for (int c = 0; c <= r; ++c) out[c] /= sum;
  }
  return push(std::move(n));
}

Tape::Id Tape::lincomb(const std::vector<Id>& parts,
                       const std::vector<double>& coeffs) {
  if (parts.empty() || parts.size() != coeffs.size()) {
    throw NumericError("lincomb: parts/coeffs mismatch");
  }
  const Mat& first = val(parts[0]);
  Node n;
  n.op = Op::kLinComb;
  n.ids = parts;
  n.daux = coeffs;
  n.val = Mat(first.rows, first.cols);
  bool ng = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Mat& v = val(parts[i]);
    if (v.rows != first.rows || v.cols != first.cols) {
      throw NumericError("lincomb: shape mismatch");
    }
    for (std::size_t j = 0; j < v.size(); ++j) n.val.a[j] += coeffs[i] * v.a[j];
    ng = ng || nodes_[parts[i]].needs_grad;
  }
  n.needs_grad = ng;
  return push(std::move(n));
}

Tape::Id Tape::affine_cols(Id a, std::vector<double> scale,
                           std::vector<double> shift) {
  const Mat& A = val(a);
  if (static_cast<int>(scale.size()) != A.cols ||
      static_cast<int>(shift.size()) != A.cols) {
    throw NumericError("affine_cols: coefficient size mismatch");
  }
  Node n;
  n.op = Op::kAffineCols;
  n.a = a;
  n.needs_grad = nodes_[a].needs_grad;
  n.val = Mat(A.rows, A.cols);
  for (int r = 0; r < A.rows; ++r) {
    const double* src = A.row(r);
    double* out = n.val.row(r);
    for (int c = 0; c < A.cols; ++c) {
      out[c] = src[c] * scale[static_cast<std::size_t>(c)] +
               shift[static_cast<std::size_t>(c)];
    }
  }
  n.daux = std::move(scale);
  for (double s : shift) n.daux.push_back(s);
  return push(std::move(n));
}

Tape::Id Tape::euclid(Id pred, std::vector<double> target) {
  const Mat& P = val(pred);
  if (P.rows != 1 || P.cols != static_cast<int>(target.size())) {
    throw NumericError("euclid: shape mismatch");
  }
  Node n;
  n.op = Op::kEuclid;
  n.a = pred;
  n.needs_grad = nodes_[pred].needs_grad;
  double sum = 0.0;
  for (int c = 0; c < P.cols; ++c) {
    const double d = P.a[static_cast<std::size_t>(c)] -
                     target[static_cast<std::size_t>(c)];
    sum += d * d;
  }
  n.val = Mat(1, 1);
  n.val.a[0] = std::sqrt(sum);
  n.daux = std::move(target);
  return push(std::move(n));
}

void Tape::backward(Id loss, double seed) {
  const Mat& L = val(loss);
  if (L.rows != 1 || L.cols != 1) {
    throw NumericError("backward: loss must be 1x1");
  }
  if (!grad_enabled_ || !nodes_[check(loss)].needs_grad) return;
  ensure_grad(loss).a[0] += seed;
  for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad || n.grad.empty()) continue;
    backward_node(id);
  }
  // Fold parameter-node gradients into their parameter accumulators.
  for (auto& [p, id] : param_nodes_) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.param->trainable || n.grad.empty()) continue;
    Param& prm = *n.param;
    if (prm.grad.empty()) prm.grad = Mat(prm.value.rows, prm.value.cols);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      prm.grad.a[i] += n.grad.a[i];
    }
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  const Mat& g = n.grad;
  auto wants = [&](int operand) {
    return operand >= 0 && nodes_[static_cast<std::size_t>(operand)].needs_grad;
  };

  switch (n.op) {
    case Op::kInput:
    case Op::kParam:
      break;
    case Op::kMatmul: {
      if (wants(n.a)) matmul_nt_acc(g, val(n.b), ensure_grad(n.a));
      if (wants(n.b)) matmul_tn_acc(val(n.a), g, ensure_grad(n.b));
      break;
    }
    case Op::kMatmulNT: {
      // out = A * B^T: dA += g * B; dB += g^T * A
      if (wants(n.a)) matmul_acc(g, val(n.b), ensure_grad(n.a));
      if (wants(n.b)) matmul_tn_acc(g, val(n.a), ensure_grad(n.b));
      break;
    }
    case Op::kAdd: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
      }
      if (wants(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb.a[i] += g.a[i];
      }
      break;
    }
    case Op::kAddRow: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += g.a[i];
      }
      if (wants(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r);
          for (int c = 0; c < g.cols; ++c) gb.a[static_cast<std::size_t>(c)] += src[c];
        }
      }
      break;
    }
    case Op::kScale: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const double s = n.daux[0];
        for (std::size_t i = 0; i < g.size(); ++i) ga.a[i] += s * g.a[i];
      }
      break;
    }
    case Op::kTanh: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga.a[i] += g.a[i] * (1.0 - n.val.a[i] * n.val.a[i]);
        }
      }
      break;
    }
    case Op::kConcatRows: {
      int r = 0;
      for (Id part : n.ids) {
        const Mat& pv = val(part);
        if (wants(part)) {
          Mat& gp = ensure_grad(part);
          for (std::size_t i = 0; i < gp.size(); ++i) {
            gp.a[i] += g.a[static_cast<std::size_t>(r) * g.cols + i];
          }
        }
        r += pv.rows;
      }
      break;
    }
    case Op::kConcatCols: {
      const Mat& A = val(n.a);
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r);
          double* dst = ga.row(r);
          for (int c = 0; c < A.cols; ++c) dst[c] += src[c];
        }
      }
      if (wants(n.b)) {
        Mat& gb = ensure_grad(n.b);
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r) + A.cols;
          double* dst = gb.row(r);
          for (int c = 0; c < gb.cols; ++c) dst[c] += src[c];
        }
      }
      break;
    }
    case Op::kSliceRows: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const int r0 = n.iaux[0];
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r);
          double* dst = ga.row(r0 + r);
          for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
        }
      }
      break;
    }
    case Op::kSliceCols: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const int c0 = n.iaux[0];
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r);
          double* dst = ga.row(r) + c0;
          for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
        }
      }
      break;
    }
    case Op::kGatherRows: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (std::size_t i = 0; i < n.iaux.size(); ++i) {
          const double* src = g.row(static_cast<int>(i));
          double* dst = ga.row(n.iaux[i]);
          for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
        }
      }
      break;
    }
    case Op::kRowMean: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const double inv = 1.0 / ga.rows;
        for (int r = 0; r < ga.rows; ++r) {
          double* dst = ga.row(r);
          for (int c = 0; c < ga.cols; ++c) {
            dst[c] += g.a[static_cast<std::size_t>(c)] * inv;
          }
        }
      }
      break;
    }
    case Op::kLayerNorm: {
      const Mat& X = val(n.a);
      const Mat& G = val(n.b);
      const double eps = n.daux[0];
      const bool wx = wants(n.a);
      const bool wg = wants(n.b);
      const bool wb = wants(n.c);
      Mat* gx = wx ? &ensure_grad(n.a) : nullptr;
      Mat* gg = wg ? &ensure_grad(n.b) : nullptr;
      Mat* gb = wb ? &ensure_grad(n.c) : nullptr;
      const int cols = X.cols;
      std::vector<double> xhat(static_cast<std::size_t>(cols));
      for (int r = 0; r < X.rows; ++r) {
        const double* src = X.row(r);
        const double* gout = g.row(r);
        double mu = 0.0;
        for (int c = 0; c < cols; ++c) mu += src[c];
        mu /= cols;
        double var = 0.0;
        for (int c = 0; c < cols; ++c) {
          const double d = src[c] - mu;
          var += d * d;
        }
        var /= cols;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int c = 0; c < cols; ++c) {
          xhat[static_cast<std::size_t>(c)] = (src[c] - mu) * inv;
        }
        if (wg || wb) {
          for (int c = 0; c < cols; ++c) {
            if (gg) gg->a[static_cast<std::size_t>(c)] += gout[c] * xhat[static_cast<std::size_t>(c)];
            if (gb) gb->a[static_cast<std::size_t>(c)] += gout[c];
          }
        }
        if (wx) {
          double mean_dxhat = 0.0;
          double mean_dxhat_xhat = 0.0;
          for (int c = 0; c < cols; ++c) {
            const double dxh = gout[c] * G.a[static_cast<std::size_t>(c)];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[static_cast<std::size_t>(c)];
          }
          mean_dxhat /= cols;
          mean_dxhat_xhat /= cols;
          double* dst = gx->row(r);
          for (int c = 0; c < cols; ++c) {
            const double dxh = gout[c] * G.a[static_cast<std::size_t>(c)];
            dst[c] += (dxh - mean_dxhat -
                       xhat[static_cast<std::size_t>(c)] * mean_dxhat_xhat) *
                      inv;
          }
        }
      }
      break;
    }
    case Op::kSoftmaxCausal: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < n.val.rows; ++r) {
          const double* p = n.val.row(r);
          const double* gout = g.row(r);
          double dot = 0.0;
          for (int c = 0; c <= r; ++c) dot += gout[c] * p[c];
          double* dst = ga.row(r);
          for (int c = 0; c <= r; ++c) dst[c] += p[c] * (gout[c] - dot);
        }
      }
      break;
    }
    case Op::kLinComb: {
      for (std::size_t i = 0; i < n.ids.size(); ++i) {
        if (wants(n.ids[i])) {
          Mat& gp = ensure_grad(n.ids[i]);
          const double c = n.daux[i];
          for (std::size_t j = 0; j < g.size(); ++j) gp.a[j] += c * g.a[j];
        }
      }
      break;
    }
    case Op::kAffineCols: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        for (int r = 0; r < g.rows; ++r) {
          const double* src = g.row(r);
          double* dst = ga.row(r);
          for (int c = 0; c < g.cols; ++c) {
            dst[c] += src[c] * n.daux[static_cast<std::size_t>(c)];
          }
        }
      }
      break;
    }
    case Op::kEuclid: {
      if (wants(n.a)) {
        Mat& ga = ensure_grad(n.a);
        const double dist = n.val.a[0];
        if (dist > 0.0) {
          const Mat& P = val(n.a);
          const double gs = g.a[0] / dist;
          for (int c = 0; c < P.cols; ++c) {
            ga.a[static_cast<std::size_t>(c)] +=
                gs * (P.a[static_cast<std::size_t>(c)] -
                      n.daux[static_cast<std::size_t>(c)]);
          }
        }
      }
      break;
    }
  }
}

}  // namespace nextloc::ad
