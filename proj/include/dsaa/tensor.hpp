#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsaa {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

/// Raised when a shape precondition of a tensor primitive is violated.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API contract is broken (bad backward call, bad ids, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class Tape;

/// Dense row-major tensor of doubles with an optional gradient buffer.
///
/// A Tensor is a cheap handle: copies share storage. Use clone() for a deep
/// copy. Extents may be zero (an empty prefix block is a 0xD matrix). A
/// default-constructed handle is undefined and reads as an empty vector.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// First extent of a rank-2 tensor, 1 for a vector.
  std::size_t rows() const;
  /// Last extent.
  std::size_t cols() const;

  std::span<const double> data() const;
  /// Direct write access; intended for leaves (parameters, optimizer updates).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);

  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy of values; the copy is a leaf with no gradient.
  Tensor clone() const;
  /// Same as clone() but keeps requires_grad.
  Tensor detach() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  bool defined() const { return impl_ != nullptr; }

 struct Impl;

 private:
  explicit Tensor(std::shared_ptr<Impl> impl);
  const Impl& view() const;
  Impl& own();
  std::shared_ptr<Impl> impl_;

  friend class Tape;
  friend std::span<double> grad_buffer(const Tensor& t);
};

/// Append-only record of primitive applications on the calling thread.
///
/// Constructing a Tape activates it for the current thread (tapes nest);
/// destroying it restores the previous one. Every primitive whose inputs
/// require gradients appends one node; nodes are stored in execution order so
/// the reverse of that order is a valid topological order for backward().
class Tape {
 public:
  using BackwardFn = std::function<void(const Tensor& out)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Currently active tape on this thread, or nullptr.
  static Tape* active();

  /// Populate gradients of every requires_grad tensor reachable from loss.
  /// Rejects non-scalar losses, losses not produced on this tape, and a
  /// second call on the same tape.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  /// Number of node backward functions run by the last backward().
  std::size_t visited() const { return visited_; }

  /// Records out as produced by a node with the given inputs. Internal to ops.
  void record(std::vector<Tensor> inputs, Tensor& out, BackwardFn fn);

 private:
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  Tape* previous_;
  std::uint64_t id_;
  bool consumed_ = false;
  std::size_t visited_ = 0;
};

/// RAII guard that suspends recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

/// True when a primitive applied to these inputs must be recorded.
bool should_record(std::initializer_list<const Tensor*> inputs);

/// Gradient accumulation helper used by op implementations.
std::span<double> grad_buffer(const Tensor& t);

}  // namespace dsaa
