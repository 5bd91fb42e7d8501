// Dense row-major matrices, named model parameters, and a tape-based
// reverse-mode differentiation core. A Tape is built per forward pass;
// backward() walks it in reverse and accumulates gradients into the
// trainable parameters referenced by the graph. Frozen parameters never
// receive gradient buffers, so the freeze contract holds by construction.
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace nextloc::ad {

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(int r, int c) : rows(r), cols(c), a(static_cast<std::size_t>(r) * c) {}

  double* row(int r) { return a.data() + static_cast<std::size_t>(r) * cols; }
  const double* row(int r) const {
    return a.data() + static_cast<std::size_t>(r) * cols;
  }
  double& at(int r, int c) {
    return a[static_cast<std::size_t>(r) * cols + c];
  }
  double at(int r, int c) const {
    return a[static_cast<std::size_t>(r) * cols + c];
  }
  bool empty() const { return a.empty(); }
  std::size_t size() const { return a.size(); }
  bool all_finite() const;
};

// C += A * B and friends; shapes are asserted by the callers.
void matmul_acc(const Mat& A, const Mat& B, Mat& C);
void matmul_nt_acc(const Mat& A, const Mat& B, Mat& C);  // C += A * B^T
void matmul_tn_acc(const Mat& A, const Mat& B, Mat& C);  // C += A^T * B

void fill_gaussian(Mat& m, double stddev, std::mt19937_64& rng);
// Gram-Schmidt orthogonalization of a Gaussian draw, scaled by gain;
// rectangular shapes orthogonalize the shorter side.
void fill_orthogonal(Mat& m, double gain, std::mt19937_64& rng);

struct Param {
  std::string name;
  Mat value;
  Mat grad;  // allocated on first accumulation; empty for frozen params
  bool trainable = true;

  void zero_grad() {
    for (double& g : grad.a) g = 0.0;
  }
};

class Tape {
 public:
  using Id = int;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Id input(Mat v);
  Id param(Param& p);  // repeated calls with the same Param dedupe

  Id matmul(Id a, Id b);
  Id matmul_nt(Id a, Id b);  // a * b^T
  Id add(Id a, Id b);
  Id add_row(Id a, Id row);  // broadcast a 1 x c row over every row of a
  Id scale(Id a, double s);
  Id tanh_of(Id a);
  Id concat_rows(const std::vector<Id>& parts);
  Id concat_cols(Id a, Id b);
  Id slice_rows(Id a, int r0, int r1);
  Id slice_cols(Id a, int c0, int c1);
  Id gather_rows(Id table, std::vector<int> rows);
  Id row_mean(Id a);  // r x c -> 1 x c
  // Row-wise normalization with learned gain/bias (both 1 x c).
  Id layer_norm(Id x, Id gain, Id bias, double eps = 1e-5);
  // Row-wise softmax over columns <= row index; upper triangle is zero.
  Id softmax_causal(Id scores);
  // sum_i coeffs[i] * parts[i]; all parts share one shape.
  Id lincomb(const std::vector<Id>& parts, const std::vector<double>& coeffs);
  // x[i][j] * scale[j] + shift[j] per column.
  Id affine_cols(Id a, std::vector<double> scale, std::vector<double> shift);
  // sqrt(sum_j (pred[0][j] - target[j])^2) as a 1 x 1 node.
  Id euclid(Id pred, std::vector<double> target);

  // The reference is invalidated by the next op pushed onto the tape; copy
  // the Mat when ops will follow.
  const Mat& value(Id id) const { return val(id); }
  const Mat& grad_of(Id id) const { return nodes_[check(id)].grad; }
  bool needs_grad(Id id) const { return nodes_[check(id)].needs_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = seed at a 1 x 1 node, sweeps the tape in
  // reverse, then adds each trainable parameter node's gradient into its
  // Param::grad.
  void backward(Id loss, double seed = 1.0);

 private:
  enum class Op : std::uint8_t {
    kInput,
    kParam,
    kMatmul,
    kMatmulNT,
    kAdd,
    kAddRow,
    kScale,
    kTanh,
    kConcatRows,
    kConcatCols,
    kSliceRows,
    kSliceCols,
    kGatherRows,
    kRowMean,
    kLayerNorm,
    kSoftmaxCausal,
    kLinComb,
    kAffineCols,
    kEuclid,
  };

  struct Node {
    Mat val;
    Mat grad;
    Op op = Op::kInput;
    bool needs_grad = false;
    int a = -1;
    int b = -1;
    int c = -1;
    std::vector<int> ids;
    std::vector<int> iaux;
    std::vector<double> daux;
    Param* param = nullptr;  // kParam only
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, Id> param_nodes_;
  bool grad_enabled_ = true;

  int check(Id id) const;
  const Mat& val(Id id) const;
  Mat& ensure_grad(Id id);
  Id push(Node n);
  void backward_node(int id);
};

}  // namespace nextloc::ad
