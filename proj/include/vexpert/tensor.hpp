// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major 64-bit tensors and the reverse-mode tape that records
// operations on them.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace vexpert {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Allocator returning 64-byte aligned storage. Vectorised reductions start
/// at the first aligned element, so equal alignment of every buffer keeps
/// summation order, and therefore results, a function of shapes alone.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

namespace detail {
struct TensorNode {
  Shape shape;
  Buffer data;
  Buffer grad;  // empty until the first accumulation
  bool has_grad = false;
  bool requires_grad = false;
  bool leaf = true;
  std::uint64_t id = 0;
};
}  // namespace detail

/// Shared handle to a tensor value. Copies alias the same storage; data is
/// treated as immutable once an operation has consumed it, except by the
/// optimizer and by parameter initialisation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, Buffer data, bool requires_grad = false);
  Tensor(Shape shape, const std::vector<double>& data, bool requires_grad = false);
  Tensor(Shape shape, std::initializer_list<double> data, bool requires_grad = false)
      : Tensor(std::move(shape), Buffer(data), requires_grad) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension `i`; negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Gradient buffer, zero-allocated on first use. Only valid when
  /// requires_grad() is true.
  std::span<double> grad_buffer() const;
  void clear_grad() const;

  /// Deep copy of the values with no tape history.
  Tensor detach(bool requires_grad = false) const;

  std::uint64_t id() const;
  bool same_as(const Tensor& other) const noexcept { return node_ == other.node_; }

 private:
  friend class Tape;
  std::shared_ptr<detail::TensorNode> node_;
};

/// Ordered record of differentiable operations. Entries are appended in
/// execution order, so reverse iteration is a valid topological order.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> out_grad)>;

  struct Entry {
    std::string op;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When false, operations neither record nor mark outputs as requiring grad.
  bool recording() const noexcept { return recording_; }
  void set_recording(bool on) noexcept { recording_ = on; }

  /// True when `inputs` contain a tensor that requires grad and the tape is
  /// recording; ops use this to decide whether to call record().
  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;

  /// Appends an operation. `output` becomes a non-leaf that requires grad.
  void record(std::string_view op, std::vector<Tensor> inputs, Tensor& output, BackwardFn fn);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once,
  /// newest first. Gradients accumulate into existing grad buffers.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return records_.size(); }
  std::vector<Entry> entries() const;
  void clear() { records_.clear(); }

 private:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Record> records_;
  bool recording_ = true;
};

}  // namespace vexpert
