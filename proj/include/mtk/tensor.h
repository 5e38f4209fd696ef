#pragma once

#include "mtk/common.h"

#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <vector>

namespace mtk {

// Dense row-major shape, rank 1..4, every extent >= 1.
class Shape {
public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<int64_t> dims) : dims_(std::move(dims)) { validate(); }

  int rank() const { return (int)dims_.size(); }
  int64_t operator[](int i) const { return dims_[(size_t)i]; }
  int64_t size() const {
    int64_t n = 1;
    for(auto d : dims_) n *= d;
    return n;
  }
  const std::vector<int64_t>& dims() const { return dims_; }
  int64_t back() const { return dims_.back(); }

  bool operator==(const Shape& o) const { return dims_ == o.dims_; }
  bool operator!=(const Shape& o) const { return dims_ != o.dims_; }

  std::string str() const;

private:
  void validate() const;
  std::vector<int64_t> dims_;
};

// Reusable block allocator. Blocks freed via reset() go to a size-keyed
// free list; replaying the same allocation sequence reuses the same
// blocks, so the high-water mark stabilizes after the first cycle.
class Arena {
public:
  explicit Arena(size_t capacityBytes = (size_t)1 << 33) : capacity_(capacityBytes) {}

  Real* alloc(int64_t elements);
  void reset();  // returns all outstanding blocks to the free list

  size_t capacity() const { return capacity_; }
  size_t outstandingBytes() const { return outstanding_; }
  size_t highWaterBytes() const { return highWater_; }

private:
  size_t capacity_;
  size_t outstanding_ = 0;
  size_t highWater_ = 0;
  std::vector<std::unique_ptr<Real[]>> live_;
  std::vector<int64_t> liveSizes_;
  std::map<int64_t, std::vector<std::unique_ptr<Real[]>>> freeList_;
};

// Dense row-major tensor. Either owns its storage (shared vector) or
// views memory managed elsewhere (an Arena block owned by a graph).
class Tensor {
public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        owned_(std::make_shared<std::vector<Real>>((size_t)shape_.size(), Real(0))),
        data_(owned_->data()) {}
  Tensor(Shape shape, std::vector<Real> values);
  Tensor(Shape shape, Real* external) : shape_(std::move(shape)), data_(external) {
    if(!external)
      throw ContractError("tensor view over null storage");
  }

  bool empty() const { return data_ == nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t size() const { return shape_.size(); }
  Real* data() { return data_; }
  const Real* data() const { return data_; }
  Real& at(int64_t i) { return data_[i]; }
  Real at(int64_t i) const { return data_[i]; }

  Tensor copy() const;          // deep copy into owned storage
  void setZero();
  void fill(Real v);
  void copyFrom(const Tensor& src);  // same element count required
  std::vector<Real> toVector() const;

  bool allFinite() const;

private:
  Shape shape_;
  std::shared_ptr<std::vector<Real>> owned_;
  Real* data_ = nullptr;
};

enum class EwiseOp { Add, Sub, Mul, Div, Tanh, Sigmoid, Relu, Exp, Log, Neg };
enum class ReduceOp { Sum, Max, Mean, Argmax };

// Broadcast shape of two operands under the trailing-dimension rule;
// throws DimensionError when the shapes are incompatible.
Shape broadcastShape(const Shape& a, const Shape& b);

// --- allocating front-end ops -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool transA = false, bool transB = false);
Tensor ewise(EwiseOp op, const Tensor& a, const Tensor& b);  // binary
Tensor ewise(EwiseOp op, const Tensor& a);                   // unary
Tensor reduce(ReduceOp op, const Tensor& t, int axis, bool keepAxis = false);
Tensor softmax(const Tensor& t, const Tensor* mask = nullptr);
Tensor logSoftmax(const Tensor& t, const Tensor* mask = nullptr);

// --- kernels writing into preallocated outputs --------------------------

// C = alpha * op(A) * op(B) + beta * C, with an optional broadcast batch dim.
void matmulInto(Tensor& c, const Tensor& a, const Tensor& b, bool transA, bool transB,
                Real alpha = 1, Real beta = 0);
void ewiseBinaryInto(Tensor& out, EwiseOp op, const Tensor& a, const Tensor& b);
void ewiseUnaryInto(Tensor& out, EwiseOp op, const Tensor& a);
void reduceInto(Tensor& out, ReduceOp op, const Tensor& t, int axis, bool keepAxis);
void softmaxInto(Tensor& out, const Tensor& t, const Tensor* mask, bool logMode);

// out += src summed down to out's shape (reverse of broadcasting).
void accumulateReduced(Tensor& out, const Tensor& src);
// elementwise out += a (same shape)
void axpy(Tensor& out, const Tensor& a, Real alpha = 1);

// Row gather/scatter along axis 0 of a matrix view [rows x cols].
void gatherRowsInto(Tensor& out, const Tensor& src, const std::vector<int64_t>& rows);
void scatterAddRows(Tensor& out, const Tensor& src, const std::vector<int64_t>& rows);

void transposeInto(Tensor& out, const Tensor& src, const std::vector<int>& perm);
void concatInto(Tensor& out, const std::vector<const Tensor*>& parts, int axis);
void sliceInto(Tensor& out, const Tensor& src, int axis, int64_t start, int64_t len);

// Per-row layer normalization over the last axis (gain/bias length = last extent).
// Caches inverse stddev and normalized values for the backward pass.
void layerNormInto(Tensor& out, const Tensor& x, const Tensor& gain, const Tensor& bias,
                   Real eps, Tensor& invStd, Tensor& xhat);
void layerNormBackward(const Tensor& dy, const Tensor& gain, const Tensor& invStd,
                       const Tensor& xhat, Tensor& dx, Tensor& dgain, Tensor& dbias);

}  // namespace mtk
