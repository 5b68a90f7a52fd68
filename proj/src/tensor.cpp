// SPDX-License-Identifier: Apache-2.0
#include "vexpert/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

#include "vexpert/error.hpp"

namespace vexpert {

namespace {
std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<detail::TensorNode> make_node(Shape shape, Buffer data, bool requires_grad) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  node->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}
}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Buffer data, bool requires_grad)
    : node_(make_node(std::move(shape), std::move(data), requires_grad)) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data, bool requires_grad)
    : node_(make_node(std::move(shape), Buffer(data.begin(), data.end()), requires_grad)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  auto n = vexpert::numel(shape);
  return Tensor(std::move(shape), Buffer(static_cast<std::size_t>(std::max<std::int64_t>(n, 0)), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw InvalidArgument("use of an undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(int i) const {
  const auto& s = shape();
  int r = static_cast<int>(s.size());
  int idx = i < 0 ? r + i : i;
  if (idx < 0 || idx >= r) throw ShapeError("dimension " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[static_cast<std::size_t>(idx)];
}

std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(node_ ? node_->data.size() : 0); }

std::span<const double> Tensor::data() const {
  if (!node_) throw InvalidArgument("use of an undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw InvalidArgument("use of an undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!node_) throw InvalidArgument("use of an undefined tensor");
  node_->requires_grad = value;
  if (!value) clear_grad();
}

bool Tensor::is_leaf() const { return !node_ || node_->leaf; }

bool Tensor::has_grad() const { return node_ && node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw InvalidArgument("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::grad_buffer() const {
  if (!requires_grad()) throw InvalidArgument("gradient requested for a tensor that does not require grad");
  if (!node_->has_grad) {
    node_->grad.assign(node_->data.size(), 0.0);
    node_->has_grad = true;
  }
  return node_->grad;
}

void Tensor::clear_grad() const {
  if (!node_) return;
  node_->grad.clear();
  node_->grad.shrink_to_fit();
  node_->has_grad = false;
}

Tensor Tensor::detach(bool requires_grad) const { return Tensor(shape(), node_->data, requires_grad); }

std::uint64_t Tensor::id() const { return node_ ? node_->id : 0; }

bool Tape::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void Tape::record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn) {
  for (const auto& in : inputs) {
    if (in.id() >= output.id()) {
      throw InvalidArgument("tape order violated: input of " + std::string(op) + " created after its output");
    }
  }
  output.node_->requires_grad = true;
  output.node_->leaf = false;
  records_.push_back(Record{std::string(op), std::move(inputs), output, std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward needs a scalar loss, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!loss.requires_grad()) return;
  Tensor seed = loss;
  seed.grad_buffer()[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (!it->output.has_grad()) continue;  // not on a path to the loss
    it->fn(it->output.grad());
  }
}

std::vector<Tape::Entry> Tape::entries() const {
  std::vector<Entry> out;
  out.reserve(records_.size());
  for (const auto& r : records_) {
    Entry e{r.op, {}, r.output.id()};
    for (const auto& in : r.inputs) e.input_ids.push_back(in.id());
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace vexpert
