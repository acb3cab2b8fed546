#include "hexsynth/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <memory>
#include <mutex>

#include "hexsynth/common.hpp"

namespace hexsynth {
namespace {

struct PlanPair {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;
};

class PlanCache {
 public:
  ~PlanCache() {
    for (auto& [n, p] : plans_) {
      fftw_destroy_plan(p.forward);
      fftw_destroy_plan(p.inverse);
    }
  }

  PlanPair get(int n) {
    std::lock_guard lock(mu_);
    auto it = plans_.find(n);
    if (it != plans_.end()) return it->second;
    // Plans are created on scratch buffers and executed with the new-array
    // interface, which requires matching alignment; fftw_malloc guarantees it
    // and the execute paths below copy into aligned scratch.
    double* r = fftw_alloc_real(n);
    fftw_complex* c = fftw_alloc_complex(n / 2 + 1);
    PlanPair p;
    p.forward = fftw_plan_dft_r2c_1d(n, r, c, FFTW_ESTIMATE);
    p.inverse = fftw_plan_dft_c2r_1d(n, c, r, FFTW_ESTIMATE);
    fftw_free(r);
    fftw_free(c);
    plans_.emplace(n, p);
    return p;
  }

 private:
  std::mutex mu_;
  std::map<int, PlanPair> plans_;
};

PlanCache& cache() {
  static PlanCache c;
  return c;
}

struct RealBuf {
  explicit RealBuf(std::size_t n) : p(fftw_alloc_real(n)) {}
  ~RealBuf() { fftw_free(p); }
  RealBuf(const RealBuf&) = delete;
  RealBuf& operator=(const RealBuf&) = delete;
  double* p;
};

struct ComplexBuf {
  explicit ComplexBuf(std::size_t n) : p(fftw_alloc_complex(n)) {}
  ~ComplexBuf() { fftw_free(p); }
  ComplexBuf(const ComplexBuf&) = delete;
  ComplexBuf& operator=(const ComplexBuf&) = delete;
  fftw_complex* p;
};

}  // namespace

void rfft(std::span<const double> in, std::span<Complex> out) {
  const std::size_t n = in.size();
  if (out.size() != n / 2 + 1) throw ShapeError("rfft: output must have n/2+1 bins");
  PlanPair plan = cache().get(static_cast<int>(n));
  RealBuf r(n);
  ComplexBuf c(n / 2 + 1);
  std::copy(in.begin(), in.end(), r.p);
  fftw_execute_dft_r2c(plan.forward, r.p, c.p);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = Complex(c.p[k][0], c.p[k][1]);
}

std::vector<Complex> rfft(std::span<const double> in) {
  std::vector<Complex> out(in.size() / 2 + 1);
  rfft(in, out);
  return out;
}

void irfft_unnormalized(std::span<const Complex> in, std::span<double> out) {
  const std::size_t n = out.size();
  if (in.size() != n / 2 + 1) throw ShapeError("irfft: input must have n/2+1 bins");
  PlanPair plan = cache().get(static_cast<int>(n));
  RealBuf r(n);
  ComplexBuf c(n / 2 + 1);
  for (std::size_t k = 0; k < in.size(); ++k) {
    c.p[k][0] = in[k].real();
    c.p[k][1] = in[k].imag();
  }
  fftw_execute_dft_c2r(plan.inverse, c.p, r.p);
  std::copy(r.p, r.p + n, out.begin());
}

std::size_t good_fft_size(std::size_t n) {
  if (n <= 1) return 1;
  for (std::size_t m = n;; ++m) {
    std::size_t k = m;
    for (std::size_t f : {2u, 3u, 5u})
      while (k % f == 0) k /= f;
    if (k == 1) return m;
  }
}

std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) return {};
  const std::size_t out_len = a.size() + b.size() - 1;
  const std::size_t n = good_fft_size(out_len);
  std::vector<double> pa(n, 0.0), pb(n, 0.0);
  std::copy(a.begin(), a.end(), pa.begin());
  std::copy(b.begin(), b.end(), pb.begin());
  auto fa = rfft(pa);
  auto fb = rfft(pb);
  for (std::size_t k = 0; k < fa.size(); ++k) fa[k] *= fb[k];
  std::vector<double> out(n);
  irfft_unnormalized(fa, out);
  out.resize(out_len);
  const double scale = 1.0 / static_cast<double>(n);
  for (double& v : out) v *= scale;
  return out;
}

}  // namespace hexsynth
