// Copyright 2026 The SBEV Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sbev/error.hpp"

namespace sbev {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first gradient arrives
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves

  double* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad.data();
  }
};

}  // namespace detail

// Dense row-major float64 array. Copies share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), std::vector<double>{}, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false) {
    if (values.size() != shape_numel(shape)) {
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " +
                                  shape_str(shape));
    }
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() {
    impl_->grad_buffer();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item: tensor of shape " +
                                  shape_str(shape()) + " is not a scalar");
    }
    return impl_->data[0];
  }

  // Deep copy detached from any graph.
  Tensor clone() const {
    return Tensor(impl_->shape, impl_->data, false);
  }

  detail::TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<detail::TensorImpl> shared() const { return impl_; }

 private:
  Tensor(Shape shape, std::vector<double> values, bool requires_grad)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    const std::size_t n = shape_numel(shape);
    for (auto e : shape) {
      if (e == 0) throw std::invalid_argument("tensor: zero extent in " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    if (values.empty()) values.assign(n, 0.0);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

// Append-only operation log. Constructing a Tape makes it the recording
// target for the current thread until it is destroyed; ops executed while no
// tape is active build no graph (inference mode).
class Tape {
 public:
  Tape() : id_(next_id()), previous_(current_slot()) { current_slot() = this; }
  ~Tape() { current_slot() = previous_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_slot(); }

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  void record(const char* op, std::function<void()> backward_fn) {
    if (consumed_) {
      throw std::logic_error(std::string("tape: recording '") + op +
                             "' after backward; start a new Tape");
    }
    nodes_.push_back({op, std::move(backward_fn)});
  }

  // Seeds d(loss)/d(loss) = 1 and replays the log in strict reverse order.
  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw std::invalid_argument("backward: root must be a scalar, got " +
                                  (loss.defined() ? shape_str(loss.shape())
                                                  : std::string("undefined")));
    }
    if (consumed_) {
      throw std::logic_error("backward: graph already consumed; run a new forward pass");
    }
    if (loss.impl()->tape_id != id_) {
      throw std::logic_error("backward: loss was not produced by this tape");
    }
    loss.impl()->grad_buffer()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
    consumed_ = true;
    nodes_.clear();
  }

 private:
  struct Node {
    const char* op;
    std::function<void()> backward;
  };

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter++;
  }
  static Tape*& current_slot() {
    thread_local Tape* slot = nullptr;
    return slot;
  }

  std::uint64_t id_;
  Tape* previous_;
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline void backward(const Tensor& loss) {
  Tape* tape = Tape::current();
  if (tape == nullptr) throw std::logic_error("backward: no active tape");
  tape->backward(loss);
}

namespace detail {

// Returns the tape that should record an op over `inputs`, or nullptr.
inline Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = Tape::current();
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return tape;
  }
  return nullptr;
}

inline Tensor make_output(Shape shape, Tape* tape) {
  Tensor out = Tensor::zeros(std::move(shape), tape != nullptr);
  if (tape) out.impl()->tape_id = tape->id();
  return out;
}

}  // namespace detail

}  // namespace sbev
