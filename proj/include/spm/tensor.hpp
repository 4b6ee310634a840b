#pragma once

// Dense 64-bit tensors with a reverse-mode gradient tape.
//
// Tensors are reference-counted handles: copying a Tensor shares the
// underlying storage. Use clone() for an independent copy. Every op that
// consumes a tensor with requires_grad() records a backward closure on the
// thread-local Tape; backward() replays it in reverse and then clears it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spm {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // non-empty iff requires_grad
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  // 1-D tensors act as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return node_->data; }
  std::span<double> mutable_data() { return node_->data; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  double item() const;
  double at(std::size_t i) const { return node_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad();

  // Deep copy, detached from any tape history.
  Tensor clone() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  friend Tensor make_tensor(std::shared_ptr<TensorNode> node);

  std::shared_ptr<TensorNode> node_;
};

Tensor make_tensor(std::shared_ptr<TensorNode> node);

class Tape {
 public:
  static Tape& active();

  bool recording() const { return paused_ == 0; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(const std::shared_ptr<TensorNode>& output, std::function<void()> backward);

 private:
  struct Entry {
    std::shared_ptr<TensorNode> output;
    std::function<void()> backward;
  };

  std::vector<Entry> entries_;
  int paused_ = 0;

  friend class NoGradGuard;
  friend void backward(const Tensor& root);
};

// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() { ++Tape::active().paused_; }
  ~NoGradGuard() { --Tape::active().paused_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Accumulates d(root)/d(x) into the grad of every requires_grad ancestor x,
// then clears the tape. root must be a single-element tensor on the tape.
void backward(const Tensor& root);

inline constexpr double kLogClamp = 1e-12;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a[m×n] + bias[n] on every row.
Tensor add_bias(const Tensor& a, const Tensor& bias);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
// log(max(x, kLogClamp)); gradient is zero where the clamp is active.
Tensor log(const Tensor& a);
// Row-wise softmax over the last dimension.
Tensor softmax(const Tensor& a);
// Concatenation along the last dimension.
Tensor concat(std::span<const Tensor> parts);
Tensor concat(std::initializer_list<Tensor> parts);
// Columns [begin, end) of every row.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
Tensor sum(const Tensor& a);
// Inverted dropout: survivors are scaled by 1/(1-p). Identity when !train or p == 0.
Tensor dropout(const Tensor& a, double p, bool train, std::mt19937_64& rng);

// Rows of table[V×D] selected by ids -> [B×D].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// a[b, ids[b]] for every row -> [B×1].
Tensor gather(const Tensor& a, std::span<const int> ids);
// Per-row dot product of a[B×n] and b[B×n] -> [B×1].
Tensor rowdot(const Tensor& a, const Tensor& b);
// a[B×n] with row b multiplied by s[b] (s is [B×1]).
Tensor scale_rows(const Tensor& a, const Tensor& s);

}  // namespace spm
