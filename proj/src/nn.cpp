#include "hexsynth/nn.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "hexsynth/common.hpp"

namespace hexsynth::nn {

// ---- parameters ---------------------------------------------------------------

ParameterStore::ParameterStore(const ParameterStore& other) { *this = other; }

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this == &other) return *this;
  params_.clear();
  index_.clear();
  for (const auto& p : other.params_) {
    Parameter& q = add(p->name, p->value.rows(), p->value.cols());
    q.value = p->value;
    q.grad = p->grad;
  }
  return *this;
}

Parameter& ParameterStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.count(name)) throw ConfigError("parameter declared twice: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  Parameter* raw = p.get();
  params_.push_back(std::move(p));
  index_[name] = raw;
  return *raw;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *it->second;
}

std::vector<Parameter*> ParameterStore::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterStore::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterStore::n_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

void ParameterStore::init_uniform_fan_in(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : params_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<Eigen::Index>(1, p->value.rows())));
    for (Eigen::Index i = 0; i < p->value.size(); ++i)
      p->value.data()[i] = bound * (2.0 * ((rng() >> 11) * 0x1.0p-53) - 1.0);
  }
}

// ---- tape ---------------------------------------------------------------------

Tape::Id Tape::constant(Mat value) {
  nodes_.push_back(Node{std::move(value), Mat(), false, nullptr, nullptr});
  return nodes_.size() - 1;
}

Tape::Id Tape::param(Parameter& p) {
  nodes_.push_back(Node{p.value, Mat(), true, &p, nullptr});
  return nodes_.size() - 1;
}

Tape::Id Tape::record(Mat value, const std::vector<Id>& parents, Backward backward) {
  bool needs = false;
  for (Id p : parents) needs = needs || nodes_[p].needs_grad;
  nodes_.push_back(Node{std::move(value), Mat(), needs, nullptr, needs ? std::move(backward) : nullptr});
  return nodes_.size() - 1;
}

void Tape::accumulate(Id id, const Mat& grad) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (grad.rows() != n.value.rows() || grad.cols() != n.value.cols())
    throw ShapeError("tape: gradient shape does not match node value");
  if (n.grad.size() == 0)
    n.grad = grad;
  else
    n.grad += grad;
}

void Tape::backward(const std::vector<std::pair<Id, Mat>>& seeds) {
  for (const auto& [id, g] : seeds) accumulate(id, g);
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.size() == 0) continue;
    if (n.param)
      n.param->grad += n.grad;
    else if (n.backward)
      n.backward(*this, n.grad);
    n.grad = Mat();  // release memory early
  }
}

// ---- elementwise and dense ops --------------------------------------------------

Id add(Tape& tape, Id a, Id b) {
  if (tape.value(a).rows() != tape.value(b).rows() || tape.value(a).cols() != tape.value(b).cols())
    throw ShapeError("add: shape mismatch");
  return tape.record(tape.value(a) + tape.value(b), {a, b}, [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Id linear(Tape& tape, Id x, Id W, Id b) {
  const Mat& X = tape.value(x);
  const Mat& w = tape.value(W);
  const Mat& bias = tape.value(b);
  if (X.cols() != w.rows() || bias.rows() != 1 || bias.cols() != w.cols()) throw ShapeError("linear: shape mismatch");
  Mat y = X * w;
  y.rowwise() += bias.row(0);
  return tape.record(std::move(y), {x, W, b}, [x, W, b](Tape& t, const Mat& g) {
    if (t.needs_grad(x)) t.accumulate(x, g * t.value(W).transpose());
    if (t.needs_grad(W)) t.accumulate(W, t.value(x).transpose() * g);
    if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

Id embed(Tape& tape, Id W, std::vector<int> idx) {
  const Mat& w = tape.value(W);
  Mat y = Mat::Zero(static_cast<Eigen::Index>(idx.size()), w.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= w.rows()) throw ShapeError("embed: index out of range");
    if (idx[r] >= 0) y.row(static_cast<Eigen::Index>(r)) = w.row(idx[r]);
  }
  return tape.record(std::move(y), {W}, [W, idx = std::move(idx)](Tape& t, const Mat& g) {
    Mat dw = Mat::Zero(t.value(W).rows(), t.value(W).cols());
    for (std::size_t r = 0; r < idx.size(); ++r)
      if (idx[r] >= 0) dw.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(W, dw);
  });
}

Id sigmoid(Tape& tape, Id x) {
  Mat y = tape.value(x).unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
  const Id self = tape.size();  // the closure reads this node's own output
  return tape.record(std::move(y), {x}, [x, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    t.accumulate(x, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Id tanh(Tape& tape, Id x) {
  Mat y = tape.value(x).array().tanh().matrix();
  Mat dy = (1.0 - y.array().square()).matrix();
  return tape.record(std::move(y), {x}, [x, dy = std::move(dy)](Tape& t, const Mat& g) {
    t.accumulate(x, g.cwiseProduct(dy));
  });
}

Id relu(Tape& tape, Id x) {
  Mat y = tape.value(x).cwiseMax(0.0);
  return tape.record(std::move(y), {x}, [x](Tape& t, const Mat& g) {
    t.accumulate(x, (t.value(x).array() > 0.0).select(g, 0.0).matrix());
  });
}

double exp_sigmoid(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return 2.0 * std::pow(s, std::numbers::ln10) + 1e-7;
}

Id exp_sigmoid(Tape& tape, Id x) {
  const Mat& X = tape.value(x);
  Mat y(X.rows(), X.cols()), dy(X.rows(), X.cols());
  for (Eigen::Index i = 0; i < X.size(); ++i) {
    const double s = 1.0 / (1.0 + std::exp(-X.data()[i]));
    const double core = 2.0 * std::pow(s, std::numbers::ln10);
    y.data()[i] = core + 1e-7;
    // d/dx 2 s^k = 2 k s^(k-1) s (1 - s) = k core (1 - s)
    dy.data()[i] = std::numbers::ln10 * core * (1.0 - s);
  }
  return tape.record(std::move(y), {x}, [x, dy = std::move(dy)](Tape& t, const Mat& g) {
    t.accumulate(x, g.cwiseProduct(dy));
  });
}

Id softmax_rows(Tape& tape, Id x) {
  const Mat& X = tape.value(x);
  Mat y(X.rows(), X.cols());
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const double m = X.row(r).maxCoeff();
    y.row(r) = (X.row(r).array() - m).exp().matrix();
    y.row(r) /= y.row(r).sum();
  }
  const Id self = tape.size();
  return tape.record(std::move(y), {x}, [x, self](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    const Vec dots = (g.cwiseProduct(y)).rowwise().sum();
    Mat dx = y.cwiseProduct(g);
    dx -= (y.array().colwise() * dots.array()).matrix();
    t.accumulate(x, dx);
  });
}

Id slice_cols(Tape& tape, Id x, Eigen::Index start, Eigen::Index count) {
  const Mat& X = tape.value(x);
  if (start < 0 || count < 0 || start + count > X.cols()) throw ShapeError("slice_cols: out of range");
  return tape.record(X.middleCols(start, count), {x}, [x, start, count](Tape& t, const Mat& g) {
    Mat dx = Mat::Zero(t.value(x).rows(), t.value(x).cols());
    dx.middleCols(start, count) = g;
    t.accumulate(x, dx);
  });
}

Id concat_cols(Tape& tape, const std::vector<Id>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  const Eigen::Index rows = tape.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Id p : parts) {
    if (tape.value(p).rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += tape.value(p).cols();
  }
  Mat y(rows, cols);
  Eigen::Index at = 0;
  for (Id p : parts) {
    y.middleCols(at, tape.value(p).cols()) = tape.value(p);
    at += tape.value(p).cols();
  }
  return tape.record(std::move(y), parts, [parts](Tape& t, const Mat& g) {
    Eigen::Index at = 0;
    for (Id p : parts) {
      const Eigen::Index c = t.value(p).cols();
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(at, c));
      at += c;
    }
  });
}

// ---- LSTM ---------------------------------------------------------------------

namespace {

inline double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Per-step activations, time-major: rows t * n_seq + s.
struct LstmCache {
  Mat i, f, g, o, c, tc, h;
};

}  // namespace

Id lstm(Tape& tape, Id x, Id Wx, Id Wh, Id b, Eigen::Index n_seq, bool reverse) {
  const Mat& X = tape.value(x);
  const Mat& wx = tape.value(Wx);
  const Mat& wh = tape.value(Wh);
  const Eigen::Index H = wh.rows();
  if (X.rows() % n_seq != 0 || wx.rows() != X.cols() || wx.cols() != 4 * H || wh.cols() != 4 * H ||
      tape.value(b).cols() != 4 * H)
    throw ShapeError("lstm: shape mismatch");
  const Eigen::Index T = X.rows() / n_seq;

  Mat xg = X * wx;
  xg.rowwise() += tape.value(b).row(0);

  auto cache = std::make_shared<LstmCache>();
  for (Mat* m : {&cache->i, &cache->f, &cache->g, &cache->o, &cache->c, &cache->tc, &cache->h}) m->resize(T * n_seq, H);
  Mat y(T * n_seq, H);
  Mat h_prev = Mat::Zero(n_seq, H), c_prev = Mat::Zero(n_seq, H);
  Mat gates(n_seq, 4 * H);
  for (Eigen::Index step = 0; step < T; ++step) {
    const Eigen::Index t = reverse ? T - 1 - step : step;
    gates.noalias() = h_prev * wh;
    for (Eigen::Index s = 0; s < n_seq; ++s) gates.row(s) += xg.row(s * T + t);
    const Eigen::Index r0 = t * n_seq;
    for (Eigen::Index s = 0; s < n_seq; ++s)
      for (Eigen::Index j = 0; j < H; ++j) {
        const double iv = sigm(gates(s, j));
        const double fv = sigm(gates(s, H + j));
        const double gv = std::tanh(gates(s, 2 * H + j));
        const double ov = sigm(gates(s, 3 * H + j));
        const double cv = fv * c_prev(s, j) + iv * gv;
        const double tcv = std::tanh(cv);
        cache->i(r0 + s, j) = iv;
        cache->f(r0 + s, j) = fv;
        cache->g(r0 + s, j) = gv;
        cache->o(r0 + s, j) = ov;
        cache->c(r0 + s, j) = cv;
        cache->tc(r0 + s, j) = tcv;
        const double hv = ov * tcv;
        cache->h(r0 + s, j) = hv;
        y(s * T + t, j) = hv;
      }
    h_prev = cache->h.middleRows(r0, n_seq);
    c_prev = cache->c.middleRows(r0, n_seq);
  }

  return tape.record(std::move(y), {x, Wx, Wh, b}, [=](Tape& tp, const Mat& gy) {
    const Mat& X = tp.value(x);
    const Mat& wx = tp.value(Wx);
    const Mat& wh = tp.value(Wh);
    Mat dxg(T * n_seq, 4 * H);
    Mat dwh = Mat::Zero(H, 4 * H);
    Mat dh_next = Mat::Zero(n_seq, H), dc_next = Mat::Zero(n_seq, H);
    Mat dgates(n_seq, 4 * H);
    for (Eigen::Index step = T; step-- > 0;) {
      const Eigen::Index t = reverse ? T - 1 - step : step;
      const Eigen::Index r0 = t * n_seq;
      const bool first = step == 0;
      const Eigen::Index tp_prev = reverse ? t + 1 : t - 1;
      for (Eigen::Index s = 0; s < n_seq; ++s)
        for (Eigen::Index j = 0; j < H; ++j) {
          const double dh = gy(s * T + t, j) + dh_next(s, j);
          const double iv = cache->i(r0 + s, j), fv = cache->f(r0 + s, j), gv = cache->g(r0 + s, j);
          const double ov = cache->o(r0 + s, j), tcv = cache->tc(r0 + s, j);
          const double cp = first ? 0.0 : cache->c(tp_prev * n_seq + s, j);
          const double dc = dh * ov * (1.0 - tcv * tcv) + dc_next(s, j);
          dgates(s, j) = dc * gv * iv * (1.0 - iv);
          dgates(s, H + j) = dc * cp * fv * (1.0 - fv);
          dgates(s, 2 * H + j) = dc * iv * (1.0 - gv * gv);
          dgates(s, 3 * H + j) = dh * tcv * ov * (1.0 - ov);
          dc_next(s, j) = dc * fv;
        }
      if (!first) dwh.noalias() += cache->h.middleRows(tp_prev * n_seq, n_seq).transpose() * dgates;
      dh_next.noalias() = dgates * wh.transpose();
      for (Eigen::Index s = 0; s < n_seq; ++s) dxg.row(s * T + t) = dgates.row(s);
    }
    if (tp.needs_grad(Wh)) tp.accumulate(Wh, dwh);
    if (tp.needs_grad(Wx)) tp.accumulate(Wx, X.transpose() * dxg);
    if (tp.needs_grad(b)) tp.accumulate(b, dxg.colwise().sum());
    if (tp.needs_grad(x)) tp.accumulate(x, dxg * wx.transpose());
  });
}

// ---- attention ------------------------------------------------------------------

Id cross_sequence_attention(Tape& tape, Id q, Id k, Id v, int n_heads, Eigen::Index n_seq) {
  const Mat& Q = tape.value(q);
  const Mat& K = tape.value(k);
  const Mat& V = tape.value(v);
  const Eigen::Index d = Q.cols();
  if (K.rows() != Q.rows() || V.rows() != Q.rows() || K.cols() != d || V.cols() != d || n_heads <= 0 ||
      d % n_heads != 0 || Q.rows() % n_seq != 0)
    throw ShapeError("attention: shape mismatch");
  const Eigen::Index T = Q.rows() / n_seq;
  const Eigen::Index dh = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index S = n_seq;

  // weights[(t * heads + h) * S * S + i * S + j]
  auto weights = std::make_shared<std::vector<double>>(static_cast<std::size_t>(T * n_heads * S * S));
  Mat out = Mat::Zero(Q.rows(), d);
  std::vector<double> row(static_cast<std::size_t>(S));
  for (Eigen::Index t = 0; t < T; ++t)
    for (int h = 0; h < n_heads; ++h) {
      double* A = weights->data() + (t * n_heads + h) * S * S;
      const Eigen::Index c0 = h * dh;
      for (Eigen::Index i = 0; i < S; ++i) {
        double m = -INFINITY;
        for (Eigen::Index j = 0; j < S; ++j) {
          row[j] = scale * Q.row(i * T + t).segment(c0, dh).dot(K.row(j * T + t).segment(c0, dh));
          m = std::max(m, row[j]);
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < S; ++j) z += (row[j] = std::exp(row[j] - m));
        for (Eigen::Index j = 0; j < S; ++j) {
          A[i * S + j] = row[j] / z;
          out.row(i * T + t).segment(c0, dh) += A[i * S + j] * V.row(j * T + t).segment(c0, dh);
        }
      }
    }

  return tape.record(std::move(out), {q, k, v}, [=](Tape& tp, const Mat& g) {
    const Mat& Q = tp.value(q);
    const Mat& K = tp.value(k);
    const Mat& V = tp.value(v);
    Mat dQ = Mat::Zero(Q.rows(), d), dK = Mat::Zero(Q.rows(), d), dV = Mat::Zero(Q.rows(), d);
    std::vector<double> dA(static_cast<std::size_t>(S));
    for (Eigen::Index t = 0; t < T; ++t)
      for (int h = 0; h < n_heads; ++h) {
        const double* A = weights->data() + (t * n_heads + h) * S * S;
        const Eigen::Index c0 = h * dh;
        for (Eigen::Index i = 0; i < S; ++i) {
          const auto gi = g.row(i * T + t).segment(c0, dh);
          double dot = 0.0;
          for (Eigen::Index j = 0; j < S; ++j) {
            dA[j] = gi.dot(V.row(j * T + t).segment(c0, dh));
            dot += dA[j] * A[i * S + j];
            dV.row(j * T + t).segment(c0, dh) += A[i * S + j] * gi;
          }
          for (Eigen::Index j = 0; j < S; ++j) {
            const double ds = A[i * S + j] * (dA[j] - dot) * scale;
            dQ.row(i * T + t).segment(c0, dh) += ds * K.row(j * T + t).segment(c0, dh);
            dK.row(j * T + t).segment(c0, dh) += ds * Q.row(i * T + t).segment(c0, dh);
          }
        }
      }
    tp.accumulate(q, dQ);
    tp.accumulate(k, dK);
    tp.accumulate(v, dV);
  });
}

// ---- layers -------------------------------------------------------------------

void LinearLayer::declare(ParameterStore& ps) const {
  ps.add(prefix + ".W", in, out);
  ps.add(prefix + ".b", 1, out);
}

Id LinearLayer::operator()(Tape& tape, ParameterStore& ps, Id x) const {
  return linear(tape, x, tape.param(ps.at(prefix + ".W")), tape.param(ps.at(prefix + ".b")));
}

void BiLstmLayer::declare(ParameterStore& ps) const {
  for (const char* dir : {".fwd", ".bwd"}) {
    ps.add(prefix + dir + ".Wx", in, 4 * hidden);
    ps.add(prefix + dir + ".Wh", hidden, 4 * hidden);
    ps.add(prefix + dir + ".b", 1, 4 * hidden);
  }
}

void BiLstmLayer::init_forget_bias(ParameterStore& ps, double value) const {
  for (const char* dir : {".fwd", ".bwd"}) {
    Mat& b = ps.at(prefix + dir + ".b").value;
    b.setZero();
    b.middleCols(hidden, hidden).setConstant(value);
  }
}

Id BiLstmLayer::operator()(Tape& tape, ParameterStore& ps, Id x, Eigen::Index n_seq) const {
  auto run = [&](const char* dir, bool reverse) {
    return lstm(tape, x, tape.param(ps.at(prefix + dir + ".Wx")), tape.param(ps.at(prefix + dir + ".Wh")),
                tape.param(ps.at(prefix + dir + ".b")), n_seq, reverse);
  };
  const Id f = run(".fwd", false);
  const Id r = run(".bwd", true);
  return concat_cols(tape, {f, r});
}

void StringAttentionLayer::declare(ParameterStore& ps) const {
  for (const char* m : {".q", ".k", ".v", ".o"}) LinearLayer{prefix + m, dim, dim}.declare(ps);
}

Id StringAttentionLayer::operator()(Tape& tape, ParameterStore& ps, Id x, Eigen::Index n_seq) const {
  const Id q = LinearLayer{prefix + ".q", dim, dim}(tape, ps, x);
  const Id k = LinearLayer{prefix + ".k", dim, dim}(tape, ps, x);
  const Id v = LinearLayer{prefix + ".v", dim, dim}(tape, ps, x);
  const Id a = cross_sequence_attention(tape, q, k, v, heads, n_seq);
  return add(tape, x, LinearLayer{prefix + ".o", dim, dim}(tape, ps, a));
}

// ---- optimizer ----------------------------------------------------------------

void Adam::step(ParameterStore& ps, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* p : ps.all()) {
    auto it = moments_.find(p->name);
    if (it == moments_.end())
      it = moments_.emplace(p->name, std::make_pair(Mat::Zero(p->value.rows(), p->value.cols()),
                                                    Mat::Zero(p->value.rows(), p->value.cols()))).first;
    Mat& m = it->second.first;
    Mat& v = it->second.second;
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p->grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p->grad.cwiseProduct(p->grad);
    p->value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

double clip_grad_norm(ParameterStore& ps, double max_norm) {
  const double norm = ps.grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : ps.all()) p->grad *= s;
  }
  return norm;
}

}  // namespace hexsynth::nn
