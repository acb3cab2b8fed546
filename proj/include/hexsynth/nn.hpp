#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hexsynth/common.hpp"
#include "hexsynth/tensor.hpp"

namespace hexsynth::nn {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
};

// Named parameters in creation order. Addresses are stable.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t n_scalars() const;
  void zero_grad();
  double grad_norm() const;

  // Uniform(-1/sqrt(rows), 1/sqrt(rows)) for every parameter, in creation order.
  void init_uniform_fan_in(std::uint64_t seed);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> index_;
};

// Reverse-mode tape over matrices. Gradients are seeded on any set of nodes
// and flow back to the Parameters registered with param().
class Tape {
 public:
  using Id = std::size_t;
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  Id constant(Mat value);
  Id param(Parameter& p);
  // parents decide whether the node needs a gradient at all.
  Id record(Mat value, const std::vector<Id>& parents, Backward backward);

  const Mat& value(Id id) const { return nodes_[id].value; }
  bool needs_grad(Id id) const { return nodes_[id].needs_grad; }
  void accumulate(Id id, const Mat& grad);
  void backward(const std::vector<std::pair<Id, Mat>>& seeds);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

using Id = Tape::Id;

// ---- ops ----------------------------------------------------------------------

Id add(Tape& tape, Id a, Id b);
Id linear(Tape& tape, Id x, Id W, Id b);  // x W + b, b broadcast over rows
// Row r is W[idx[r]], or zero when idx[r] < 0.
Id embed(Tape& tape, Id W, std::vector<int> idx);
Id sigmoid(Tape& tape, Id x);
Id tanh(Tape& tape, Id x);
Id relu(Tape& tape, Id x);
// 2 sigmoid(x)^ln(10) + 1e-7
Id exp_sigmoid(Tape& tape, Id x);
Id softmax_rows(Tape& tape, Id x);
Id slice_cols(Tape& tape, Id x, Eigen::Index start, Eigen::Index count);
Id concat_cols(Tape& tape, const std::vector<Id>& parts);

double exp_sigmoid(double x);

// Unidirectional LSTM over n_seq sequences stored string-major (row s*T + t).
// Gate order i, f, g, o in the 4H columns of Wx (in, 4H), Wh (H, 4H), b (1, 4H).
Id lstm(Tape& tape, Id x, Id Wx, Id Wh, Id b, Eigen::Index n_seq, bool reverse);

// Multi-head self-attention across the n_seq sequences at every time step,
// no projections: softmax(q k^T / sqrt(d_head)) v per head.
Id cross_sequence_attention(Tape& tape, Id q, Id k, Id v, int n_heads, Eigen::Index n_seq);

// ---- layers -------------------------------------------------------------------

struct LinearLayer {
  std::string prefix;
  Eigen::Index in = 0, out = 0;

  void declare(ParameterStore& ps) const;
  Id operator()(Tape& tape, ParameterStore& ps, Id x) const;
};

struct BiLstmLayer {
  std::string prefix;
  Eigen::Index in = 0, hidden = 0;

  void declare(ParameterStore& ps) const;
  void init_forget_bias(ParameterStore& ps, double value) const;
  Id operator()(Tape& tape, ParameterStore& ps, Id x, Eigen::Index n_seq) const;  // -> 2 * hidden
};

// Projections plus cross-string attention, with a residual connection.
struct StringAttentionLayer {
  std::string prefix;
  Eigen::Index dim = 0;
  int heads = 1;

  void declare(ParameterStore& ps) const;
  Id operator()(Tape& tape, ParameterStore& ps, Id x, Eigen::Index n_seq) const;
};

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.99;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  // Applies one update using the current gradients of every parameter.
  void step(ParameterStore& ps, double lr);
  long long steps() const { return t_; }

  // Named moment estimates, for checkpoint-based resume.
  std::map<std::string, std::pair<Mat, Mat>>& moments() { return moments_; }
  void set_steps(long long t) { t_ = t; }

 private:
  AdamConfig cfg_;
  long long t_ = 0;
  std::map<std::string, std::pair<Mat, Mat>> moments_;
};

// Scales all gradients so their global norm is at most max_norm; returns the
// norm before scaling.
double clip_grad_norm(ParameterStore& ps, double max_norm);

}  // namespace hexsynth::nn
