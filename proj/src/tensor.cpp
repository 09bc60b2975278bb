#include "dsaa/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <numeric>
#include <sstream>

namespace dsaa {

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t producer = 0;  // id of the recording tape, 0 for leaves
};

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_next_tape_id{1};

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

namespace {
// Stand-in read by accessors of a default-constructed (undefined) handle.
const Tensor::Impl& empty_impl() {
  static const Tensor::Impl e = [] {
    Tensor::Impl i;
    i.shape = {0};
    return i;
  }();
  return e;
}
}  // namespace

const Tensor::Impl& Tensor::view() const { return impl_ ? *impl_ : empty_impl(); }

Tensor::Impl& Tensor::own() {
  if (!impl_) throw ContractError("write access to an undefined tensor");
  return *impl_;
}

Tensor::Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto impl = std::make_shared<Impl>();
  const std::size_t n = product(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one axis");
  if (product(shape) != values.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values, bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return view().shape; }
std::size_t Tensor::numel() const { return view().data.size(); }
std::size_t Tensor::rows() const { return rank() == 2 ? view().shape[0] : 1; }
std::size_t Tensor::cols() const { return view().shape.back(); }

std::span<const double> Tensor::data() const { return view().data; }
std::span<double> Tensor::mutable_data() { return own().data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return view().data[0];
}

bool Tensor::requires_grad() const { return view().requires_grad; }
void Tensor::set_requires_grad(bool flag) { own().requires_grad = flag; }

bool Tensor::has_grad() const { return !view().grad.empty() || (numel() == 0 && view().requires_grad); }
std::span<const double> Tensor::grad() const { return view().grad; }
std::span<double> Tensor::mutable_grad() { return grad_buffer(*this); }
void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<Impl>();
  impl->shape = view().shape;
  impl->data = view().data;
  return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
  Tensor t = clone();
  t.impl_->requires_grad = view().requires_grad;
  return t;
}

std::span<double> grad_buffer(const Tensor& t) {
  if (!t.impl_) throw ContractError("gradient buffer of an undefined tensor");
  auto& impl = *t.impl_;
  if (impl.grad.size() != impl.data.size()) impl.grad.assign(impl.data.size(), 0.0);
  return impl.grad;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tape::Tape() : previous_(g_active_tape), id_(g_next_tape_id.fetch_add(1)) { g_active_tape = this; }

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = previous_;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::vector<Tensor> inputs, Tensor& out, BackwardFn fn) {
  out.impl_->requires_grad = true;
  out.impl_->producer = id_;
  nodes_.push_back(Node{std::move(inputs), out, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ContractError("backward() already ran on this tape; start a new tape");
  if (loss.numel() != 1) throw ContractError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  if (!loss.requires_grad() || loss.impl_->producer != id_) {
    throw ContractError("backward() on a loss that was not recorded on this tape (detached graph)");
  }
  consumed_ = true;
  visited_ = 0;
  grad_buffer(loss)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output.impl_->grad.empty()) continue;
    it->backward(it->output);
    ++visited_;
  }
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

}  // namespace dsaa
