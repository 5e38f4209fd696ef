#include "mtk/tensor.h"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mtk {

// ---------------------------------------------------------------- Shape

void Shape::validate() const {
  if(dims_.empty() || dims_.size() > 4)
    throw DimensionError("shape rank must be 1..4, got rank " + std::to_string(dims_.size()));
  for(auto d : dims_)
    if(d < 1)
      throw DimensionError("shape extents must be >= 1, got " + str());
}

std::string Shape::str() const {
  std::ostringstream os;
  os << "[";
  for(size_t i = 0; i < dims_.size(); ++i)
    os << (i ? "x" : "") << dims_[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------- Arena

Real* Arena::alloc(int64_t elements) {
  if(elements <= 0)
    throw ContractError("arena alloc of non-positive size");
  size_t bytes = (size_t)elements * sizeof(Real);
  auto it = freeList_.find(elements);
  std::unique_ptr<Real[]> block;
  if(it != freeList_.end() && !it->second.empty()) {
    block = std::move(it->second.back());
    it->second.pop_back();
  } else {
    block = std::make_unique<Real[]>((size_t)elements);
  }
  if(outstanding_ + bytes > capacity_)
    throw NumericError("arena capacity exceeded: " + std::to_string(outstanding_ + bytes) +
                       " > " + std::to_string(capacity_) + " bytes");
  outstanding_ += bytes;
  highWater_ = std::max(highWater_, outstanding_);
  Real* p = block.get();
  live_.push_back(std::move(block));
  liveSizes_.push_back(elements);
  return p;
}

void Arena::reset() {
  for(size_t i = 0; i < live_.size(); ++i)
    freeList_[liveSizes_[i]].push_back(std::move(live_[i]));
  live_.clear();
  liveSizes_.clear();
  outstanding_ = 0;
}

// ---------------------------------------------------------------- Tensor

Tensor::Tensor(Shape shape, std::vector<Real> values) : shape_(std::move(shape)) {
  if((int64_t)values.size() != shape_.size())
    throw DimensionError("tensor data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_.str());
  owned_ = std::make_shared<std::vector<Real>>(std::move(values));
  data_ = owned_->data();
}

Tensor Tensor::copy() const {
  Tensor out(shape_);
  std::memcpy(out.data(), data_, (size_t)size() * sizeof(Real));
  return out;
}

void Tensor::setZero() {
  std::memset(data_, 0, (size_t)size() * sizeof(Real));
}

void Tensor::fill(Real v) {
  std::fill(data_, data_ + size(), v);
}

void Tensor::copyFrom(const Tensor& src) {
  if(src.size() != size())
    throw DimensionError("copyFrom size mismatch " + src.shape().str() + " vs " + shape_.str());
  std::memcpy(data_, src.data(), (size_t)size() * sizeof(Real));
}

std::vector<Real> Tensor::toVector() const {
  return std::vector<Real>(data_, data_ + size());
}

bool Tensor::allFinite() const {
  for(int64_t i = 0; i < size(); ++i)
    if(!std::isfinite(data_[i]))
      return false;
  return true;
}

// ------------------------------------------------------------ broadcast

static void padDims(const Shape& s, int64_t d[4]) {
  d[0] = d[1] = d[2] = d[3] = 1;
  int off = 4 - s.rank();
  for(int i = 0; i < s.rank(); ++i)
    d[off + i] = s[i];
}

Shape broadcastShape(const Shape& a, const Shape& b) {
  int64_t da[4], db[4];
  padDims(a, da);
  padDims(b, db);
  std::vector<int64_t> out;
  for(int i = 0; i < 4; ++i) {
    if(da[i] == db[i] || da[i] == 1 || db[i] == 1)
      out.push_back(std::max(da[i], db[i]));
    else
      throw DimensionError("shapes not broadcastable: " + a.str() + " vs " + b.str());
  }
  int rank = std::max(a.rank(), b.rank());
  return Shape(std::vector<int64_t>(out.end() - rank, out.end()));
}

static void padStrides(const Shape& s, const int64_t outDims[4], int64_t strides[4]) {
  int64_t d[4];
  padDims(s, d);
  int64_t run = 1;
  for(int i = 3; i >= 0; --i) {
    strides[i] = (d[i] == 1) ? 0 : run;
    run *= d[i];
    if(d[i] != 1 && d[i] != outDims[i])
      throw DimensionError("operand shape " + s.str() + " incompatible with broadcast result");
  }
}

static Real applyBinary(EwiseOp op, Real x, Real y) {
  switch(op) {
    case EwiseOp::Add: return x + y;
    case EwiseOp::Sub: return x - y;
    case EwiseOp::Mul: return x * y;
    case EwiseOp::Div: return x / y;
    default: throw ContractError("not a binary elementwise op");
  }
}

static Real applyUnary(EwiseOp op, Real x) {
  switch(op) {
    case EwiseOp::Tanh: return std::tanh(x);
    case EwiseOp::Sigmoid: return Real(1) / (Real(1) + std::exp(-x));
    case EwiseOp::Relu: return x > 0 ? x : Real(0);
    case EwiseOp::Exp: return std::exp(x);
    case EwiseOp::Log: return std::log(x);
    case EwiseOp::Neg: return -x;
    default: throw ContractError("not a unary elementwise op");
  }
}

void ewiseBinaryInto(Tensor& out, EwiseOp op, const Tensor& a, const Tensor& b) {
  if(op == EwiseOp::Div) {
    for(int64_t i = 0; i < b.size(); ++i)
      if(b.at(i) == Real(0))
        throw NumericError("division by zero in elementwise div");
  }
  int64_t od[4];
  padDims(out.shape(), od);
  int64_t sa[4], sb[4];
  padStrides(a.shape(), od, sa);
  padStrides(b.shape(), od, sb);
  Real* o = out.data();
  const Real* pa = a.data();
  const Real* pb = b.data();
  int64_t idx = 0;
  for(int64_t i0 = 0; i0 < od[0]; ++i0)
    for(int64_t i1 = 0; i1 < od[1]; ++i1)
      for(int64_t i2 = 0; i2 < od[2]; ++i2) {
        int64_t baseA = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
        int64_t baseB = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
        for(int64_t i3 = 0; i3 < od[3]; ++i3)
          o[idx++] = applyBinary(op, pa[baseA + i3 * sa[3]], pb[baseB + i3 * sb[3]]);
      }
}

void ewiseUnaryInto(Tensor& out, EwiseOp op, const Tensor& a) {
  const Real* pa = a.data();
  Real* o = out.data();
  for(int64_t i = 0; i < a.size(); ++i)
    o[i] = applyUnary(op, pa[i]);
}

Tensor ewise(EwiseOp op, const Tensor& a, const Tensor& b) {
  Tensor out(broadcastShape(a.shape(), b.shape()));
  ewiseBinaryInto(out, op, a, b);
  return out;
}

Tensor ewise(EwiseOp op, const Tensor& a) {
  Tensor out(a.shape());
  ewiseUnaryInto(out, op, a);
  return out;
}

void accumulateReduced(Tensor& out, const Tensor& src) {
  if(out.shape() == src.shape()) {
    axpy(out, src);
    return;
  }
  int64_t sd[4];
  padDims(src.shape(), sd);
  int64_t so[4];
  padStrides(out.shape(), sd, so);
  Real* o = out.data();
  const Real* s = src.data();
  int64_t idx = 0;
  for(int64_t i0 = 0; i0 < sd[0]; ++i0)
    for(int64_t i1 = 0; i1 < sd[1]; ++i1)
      for(int64_t i2 = 0; i2 < sd[2]; ++i2) {
        int64_t base = i0 * so[0] + i1 * so[1] + i2 * so[2];
        for(int64_t i3 = 0; i3 < sd[3]; ++i3)
          o[base + i3 * so[3]] += s[idx++];
      }
}

void axpy(Tensor& out, const Tensor& a, Real alpha) {
  if(out.size() != a.size())
    throw DimensionError("axpy size mismatch");
  Real* o = out.data();
  const Real* p = a.data();
  if(alpha == Real(1)) {
    for(int64_t i = 0; i < a.size(); ++i)
      o[i] += p[i];
  } else {
    for(int64_t i = 0; i < a.size(); ++i)
      o[i] += alpha * p[i];
  }
}

// -------------------------------------------------------------- matmul

struct MatView {
  int64_t batch, rows, cols, batchStride;
  const Real* data;
};

static MatView matView(const Tensor& t, bool trans) {
  if(t.shape().rank() == 2) {
    int64_t r = t.shape()[0], c = t.shape()[1];
    return {1, trans ? c : r, trans ? r : c, 0, t.data()};
  }
  if(t.shape().rank() == 3) {
    int64_t b = t.shape()[0], r = t.shape()[1], c = t.shape()[2];
    return {b, trans ? c : r, trans ? r : c, r * c, t.data()};
  }
  throw DimensionError("matmul operands must be rank 2 or 3, got " + t.shape().str());
}

void matmulInto(Tensor& c, const Tensor& a, const Tensor& b, bool transA, bool transB,
                Real alpha, Real beta) {
  MatView va = matView(a, transA);
  MatView vb = matView(b, transB);
  if(va.cols != vb.rows)
    throw DimensionError("matmul inner dims disagree: " + a.shape().str() + " x " +
                         b.shape().str());
  int64_t batch = std::max(va.batch, vb.batch);
  if(va.batch != vb.batch && va.batch != 1 && vb.batch != 1)
    throw DimensionError("matmul batch dims disagree: " + a.shape().str() + " x " +
                         b.shape().str());
  int64_t m = va.rows, k = va.cols, n = vb.cols;
  if(c.size() != batch * m * n)
    throw DimensionError("matmul output size mismatch");
  Real* pc = c.data();
  if(beta == Real(0))
    std::memset(pc, 0, (size_t)c.size() * sizeof(Real));
  else if(beta != Real(1))
    for(int64_t i = 0; i < c.size(); ++i)
      pc[i] *= beta;

  // Fixed i-k-j loop order: the inner loop is contiguous over C and
  // (untransposed) B, and the summation order is reproducible.
  for(int64_t bi = 0; bi < batch; ++bi) {
    const Real* pa = va.data + (va.batch == 1 ? 0 : bi * va.batchStride);
    const Real* pb = vb.data + (vb.batch == 1 ? 0 : bi * vb.batchStride);
    Real* pcb = pc + bi * m * n;
    int64_t lda0 = transA ? 1 : k;   // stride between rows of op(A)
    int64_t lda1 = transA ? m : 1;   // stride within a row of op(A)
    int64_t ldb0 = transB ? 1 : n;
    int64_t ldb1 = transB ? k : 1;
    for(int64_t i = 0; i < m; ++i) {
      Real* crow = pcb + i * n;
      for(int64_t kk = 0; kk < k; ++kk) {
        Real av = alpha * pa[i * lda0 + kk * lda1];
        if(av == Real(0))
          continue;
        const Real* brow = pb + kk * ldb0;
        if(ldb1 == 1) {
          for(int64_t j = 0; j < n; ++j)
            crow[j] += av * brow[j];
        } else {
          for(int64_t j = 0; j < n; ++j)
            crow[j] += av * brow[j * ldb1];
        }
      }
    }
  }
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transA, bool transB) {
  MatView va = matView(a, transA);
  MatView vb = matView(b, transB);
  int64_t batch = std::max(va.batch, vb.batch);
  Shape out = (a.shape().rank() == 3 || b.shape().rank() == 3)
                  ? Shape({batch, va.rows, vb.cols})
                  : Shape({va.rows, vb.cols});
  Tensor c(out);
  matmulInto(c, a, b, transA, transB);
  return c;
}

// ------------------------------------------------------------- reduce

void reduceInto(Tensor& out, ReduceOp op, const Tensor& t, int axis, bool keepAxis) {
  int rank = t.shape().rank();
  if(axis < 0 || axis >= rank)
    throw DimensionError("reduce axis " + std::to_string(axis) + " out of range for " +
                         t.shape().str());
  int64_t outer = 1, inner = 1, n = t.shape()[axis];
  for(int i = 0; i < axis; ++i)
    outer *= t.shape()[i];
  for(int i = axis + 1; i < rank; ++i)
    inner *= t.shape()[i];
  const Real* p = t.data();
  Real* o = out.data();
  (void)keepAxis;
  for(int64_t a = 0; a < outer; ++a)
    for(int64_t c = 0; c < inner; ++c) {
      const Real* base = p + a * n * inner + c;
      Real acc;
      int64_t argbest = 0;
      switch(op) {
        case ReduceOp::Sum:
        case ReduceOp::Mean:
          acc = 0;
          for(int64_t i = 0; i < n; ++i)
            acc += base[i * inner];
          if(op == ReduceOp::Mean)
            acc /= (Real)n;
          break;
        case ReduceOp::Max:
          acc = base[0];
          for(int64_t i = 1; i < n; ++i)
            acc = std::max(acc, base[i * inner]);
          break;
        case ReduceOp::Argmax: {
          Real best = base[0];
          for(int64_t i = 1; i < n; ++i)
            if(base[i * inner] > best) {  // strict: ties keep the lowest index
              best = base[i * inner];
              argbest = i;
            }
          acc = (Real)argbest;
          break;
        }
        default: throw ContractError("unknown reduce op");
      }
      o[a * inner + c] = acc;
    }
}

Tensor reduce(ReduceOp op, const Tensor& t, int axis, bool keepAxis) {
  int rank = t.shape().rank();
  if(axis < 0 || axis >= rank)
    throw DimensionError("reduce axis " + std::to_string(axis) + " out of range for " +
                         t.shape().str());
  std::vector<int64_t> dims;
  for(int i = 0; i < rank; ++i) {
    if(i == axis) {
      if(keepAxis)
        dims.push_back(1);
    } else {
      dims.push_back(t.shape()[i]);
    }
  }
  if(dims.empty())
    dims.push_back(1);
  Tensor out((Shape(dims)));
  reduceInto(out, op, t, axis, keepAxis);
  return out;
}

// ------------------------------------------------------------- softmax

void softmaxInto(Tensor& out, const Tensor& t, const Tensor* mask, bool logMode) {
  int64_t cols = t.shape().back();
  int64_t rows = t.size() / cols;
  int64_t md[4] = {1, 1, 1, 1};
  int64_t ms[4] = {0, 0, 0, 0};
  if(mask) {
    padDims(t.shape(), md);
    padStrides(mask->shape(), md, ms);
  }
  const Real* p = t.data();
  Real* o = out.data();
  for(int64_t r = 0; r < rows; ++r) {
    const Real* row = p + r * cols;
    Real* orow = o + r * cols;
    // broadcastable mask offset for this row
    auto maskAt = [&](int64_t j) -> Real {
      if(!mask)
        return Real(1);
      int64_t i2 = r % md[2];
      int64_t rest = r / md[2];
      int64_t i1 = rest % md[1];
      int64_t i0 = rest / md[1];
      return mask->data()[i0 * ms[0] + i1 * ms[1] + i2 * ms[2] + j * ms[3]];
    };
    Real mx = -std::numeric_limits<Real>::infinity();
    bool any = false;
    for(int64_t j = 0; j < cols; ++j)
      if(maskAt(j) != Real(0)) {
        any = true;
        mx = std::max(mx, row[j]);
      }
    if(!any)
      throw NumericError("softmax over a fully-masked row");
    Real sum = 0;
    for(int64_t j = 0; j < cols; ++j) {
      if(maskAt(j) != Real(0))
        sum += std::exp(row[j] - mx);
    }
    if(logMode) {
      Real lz = mx + std::log(sum);
      for(int64_t j = 0; j < cols; ++j)
        orow[j] = maskAt(j) != Real(0) ? row[j] - lz : -std::numeric_limits<Real>::infinity();
    } else {
      for(int64_t j = 0; j < cols; ++j)
        orow[j] = maskAt(j) != Real(0) ? std::exp(row[j] - mx) / sum : Real(0);
    }
  }
}

Tensor softmax(const Tensor& t, const Tensor* mask) {
  Tensor out(t.shape());
  softmaxInto(out, t, mask, false);
  return out;
}

Tensor logSoftmax(const Tensor& t, const Tensor* mask) {
  Tensor out(t.shape());
  softmaxInto(out, t, mask, true);
  return out;
}

// -------------------------------------------------- gather / scatter

void gatherRowsInto(Tensor& out, const Tensor& src, const std::vector<int64_t>& rows) {
  int64_t cols = src.size() / src.shape()[0];
  int64_t nrows = src.shape()[0];
  for(size_t i = 0; i < rows.size(); ++i) {
    if(rows[i] < 0 || rows[i] >= nrows)
      throw ContractError("row index " + std::to_string(rows[i]) + " out of range 0.." +
                          std::to_string(nrows - 1));
    std::memcpy(out.data() + (int64_t)i * cols, src.data() + rows[i] * cols,
                (size_t)cols * sizeof(Real));
  }
}

void scatterAddRows(Tensor& out, const Tensor& src, const std::vector<int64_t>& rows) {
  int64_t cols = out.size() / out.shape()[0];
  for(size_t i = 0; i < rows.size(); ++i) {
    Real* dst = out.data() + rows[i] * cols;
    const Real* s = src.data() + (int64_t)i * cols;
    for(int64_t j = 0; j < cols; ++j)
      dst[j] += s[j];
  }
}

// -------------------------------------------- transpose / concat / slice

void transposeInto(Tensor& out, const Tensor& src, const std::vector<int>& perm) {
  int rank = src.shape().rank();
  if((int)perm.size() != rank)
    throw DimensionError("transpose perm rank mismatch");
  int64_t sd[4], ss[4];
  padDims(src.shape(), sd);
  int64_t run = 1;
  for(int i = 3; i >= 0; --i) {
    ss[i] = run;
    run *= sd[i];
  }
  // destination dims in padded coordinates
  int off = 4 - rank;
  int64_t od[4] = {1, 1, 1, 1};
  int64_t srcStrideForOut[4] = {0, 0, 0, 0};
  for(int i = 0; i < rank; ++i) {
    od[off + i] = sd[off + perm[(size_t)i]];
    srcStrideForOut[off + i] = ss[off + perm[(size_t)i]];
  }
  Real* o = out.data();
  const Real* s = src.data();
  int64_t idx = 0;
  for(int64_t i0 = 0; i0 < od[0]; ++i0)
    for(int64_t i1 = 0; i1 < od[1]; ++i1)
      for(int64_t i2 = 0; i2 < od[2]; ++i2)
        for(int64_t i3 = 0; i3 < od[3]; ++i3)
          o[idx++] = s[i0 * srcStrideForOut[0] + i1 * srcStrideForOut[1] +
                       i2 * srcStrideForOut[2] + i3 * srcStrideForOut[3]];
}

void concatInto(Tensor& out, const std::vector<const Tensor*>& parts, int axis) {
  int rank = out.shape().rank();
  int64_t outer = 1, inner = 1;
  for(int i = 0; i < axis; ++i)
    outer *= out.shape()[i];
  for(int i = axis + 1; i < rank; ++i)
    inner *= out.shape()[i];
  int64_t outAxis = out.shape()[axis];
  int64_t offset = 0;
  for(const Tensor* p : parts) {
    int64_t pa = p->shape()[axis];
    for(int64_t a = 0; a < outer; ++a)
      std::memcpy(out.data() + (a * outAxis + offset) * inner,
                  p->data() + a * pa * inner, (size_t)(pa * inner) * sizeof(Real));
    offset += pa;
  }
}

void sliceInto(Tensor& out, const Tensor& src, int axis, int64_t start, int64_t len) {
  int rank = src.shape().rank();
  int64_t outer = 1, inner = 1;
  for(int i = 0; i < axis; ++i)
    outer *= src.shape()[i];
  for(int i = axis + 1; i < rank; ++i)
    inner *= src.shape()[i];
  int64_t n = src.shape()[axis];
  if(start < 0 || start + len > n)
    throw DimensionError("slice out of range");
  for(int64_t a = 0; a < outer; ++a)
    std::memcpy(out.data() + a * len * inner, src.data() + (a * n + start) * inner,
                (size_t)(len * inner) * sizeof(Real));
}

// ----------------------------------------------------------- layer norm

void layerNormInto(Tensor& out, const Tensor& x, const Tensor& gain, const Tensor& bias,
                   Real eps, Tensor& invStd, Tensor& xhat) {
  int64_t d = x.shape().back();
  int64_t rows = x.size() / d;
  const Real* px = x.data();
  const Real* pg = gain.data();
  const Real* pb = bias.data();
  for(int64_t r = 0; r < rows; ++r) {
    const Real* row = px + r * d;
    Real mu = 0;
    for(int64_t j = 0; j < d; ++j)
      mu += row[j];
    mu /= (Real)d;
    Real var = 0;
    for(int64_t j = 0; j < d; ++j) {
      Real c = row[j] - mu;
      var += c * c;
    }
    var /= (Real)d;
    Real rs = Real(1) / std::sqrt(var + eps);
    invStd.at(r) = rs;
    for(int64_t j = 0; j < d; ++j) {
      Real xh = (row[j] - mu) * rs;
      xhat.at(r * d + j) = xh;
      out.at(r * d + j) = pg[j] * xh + pb[j];
    }
  }
}

void layerNormBackward(const Tensor& dy, const Tensor& gain, const Tensor& invStd,
                       const Tensor& xhat, Tensor& dx, Tensor& dgain, Tensor& dbias) {
  int64_t d = dy.shape().back();
  int64_t rows = dy.size() / d;
  const Real* pdy = dy.data();
  const Real* pg = gain.data();
  for(int64_t r = 0; r < rows; ++r) {
    const Real* dyr = pdy + r * d;
    const Real* xhr = xhat.data() + r * d;
    Real rs = invStd.at(r);
    Real sumDxh = 0, sumDxhXh = 0;
    for(int64_t j = 0; j < d; ++j) {
      Real dxh = dyr[j] * pg[j];
      sumDxh += dxh;
      sumDxhXh += dxh * xhr[j];
      dgain.at(j) += dyr[j] * xhr[j];
      dbias.at(j) += dyr[j];
    }
    Real mDxh = sumDxh / (Real)d;
    Real mDxhXh = sumDxhXh / (Real)d;
    for(int64_t j = 0; j < d; ++j) {
      Real dxh = dyr[j] * pg[j];
      dx.at(r * d + j) += rs * (dxh - mDxh - xhr[j] * mDxhXh);
    }
  }
}

}  // namespace mtk
