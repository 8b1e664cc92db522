#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "blockdiff/masks.hpp"
#include "blockdiff/rng.hpp"

namespace blockdiff {

class GradStore;

// One recorded node of the computation graph. Data is row-major f32 and
// immutable once an op has produced it (data_mut exists for leaf edits by
// the optimizer and grad_check, which happen between graph builds).
struct TensorNode {
    std::vector<int> shape;
    std::vector<float> data;
    bool requires_grad = false;
    bool backward_used = false;  // set on a loss root once consumed
    std::vector<std::shared_ptr<TensorNode>> parents;
    // accumulates d(out)/d(parents) into the store, given d(loss)/d(this)
    std::function<void(const std::vector<float>&, GradStore&)> backward_fn;

    size_t numel() const { return data.size(); }
};

// Value-semantics handle to a graph node.
class Tensor {
  public:
    Tensor() = default;

    static Tensor from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad = false);
    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor scalar(float value);
    // i.i.d. N(0, stddev^2)
    static Tensor randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    int dim(int i) const { return n_->shape[i]; }
    int rows() const { return n_->shape[0]; }
    int cols() const { return n_->shape[1]; }
    size_t numel() const { return n_->data.size(); }
    const std::vector<float>& data() const { return n_->data; }
    std::vector<float>& data_mut() { return n_->data; }
    float item() const;

    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool v) { n_->requires_grad = v; }

    TensorNode* node() const { return n_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return n_; }

  private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}
    std::shared_ptr<TensorNode> n_;
    friend Tensor wrap_node(std::shared_ptr<TensorNode>);
};

// Gradient buffers, keyed by node, kept outside the tensors themselves so
// concurrent backward passes over shared parameters never collide.
class GradStore {
  public:
    std::vector<float>& slot(const TensorNode* n, size_t size);
    const std::vector<float>* find(const Tensor& t) const;
    const std::vector<float>* find(const TensorNode* n) const;
    size_t size() const { return grads_.size(); }
    // deterministic iteration is never needed; callers walk their own
    // parameter lists and look grads up here
  private:
    std::unordered_map<const TensorNode*, std::vector<float>> grads_;
};

// While alive, ops do not record backward closures (inference mode).
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

bool grad_enabled();

// ---- differentiable ops -------------------------------------------------
// All ops validate shapes and check outputs for NaN/Inf (error state).

Tensor matmul(const Tensor& a, const Tensor& b);  // [m x k] * [k x n]
// same-shape elementwise, or b broadcast as a row vector [n] / [1 x n]
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same-shape elementwise
Tensor scale(const Tensor& a, float s);
Tensor gelu(const Tensor& a);  // exact erf form
// row-wise x / sqrt(mean(x^2) + eps) * gain, gain shape [n]
Tensor rmsnorm(const Tensor& x, const Tensor& gain);
// gather rows of table [V x d] at ids; backward scatter-adds
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor transpose(const Tensor& a);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// row softmax over mask-allowed keys; disallowed entries get exactly 0
// probability (additive -1e9 surrogate before normalization, then forced)
Tensor masked_softmax(const Tensor& scores, const AttnMask& mask);
// sum over active i of weights[i] * (-log softmax(logits[i])[targets[i]]),
// divided by max(1, |active|); inactive rows contribute exactly zero to
// value and gradient; empty active set returns 0 with zero gradient
Tensor weighted_masked_ce(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights, const std::vector<uint8_t>& active);
Tensor sum_all(const Tensor& a);
// scalar reduction of scalar tensors with a double accumulator, so the f32
// result is invariant to input order
Tensor combine_scalars(const std::vector<Tensor>& xs, bool mean);

// ---- backward / verification --------------------------------------------

// Reverse-mode gradients for every requires_grad tensor reachable from loss.
// loss must be a scalar produced by a recorded graph; a second backward on
// the same root without re-running the forward throws.
GradStore backward(const Tensor& loss);

struct GradCheckResult {
    float max_rel_err = 0.0f;
    int coords_checked = 0;
};

// Central-difference check of backward() against f. f must rebuild the full
// forward graph from the current parameter values on every call. eps must
// lie in [1e-4, 1e-2]. Samples up to coords_per_tensor coordinates of each
// parameter, taking the largest-magnitude analytic components first: an f32
// forward cannot resolve derivatives below its own rounding floor, and the
// bugs central differences can catch (sign flips, transposed factors,
// missing terms) corrupt exactly the large components. Throws on non-finite
// loss at any perturbation.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           float eps, int coords_per_tensor);

}  // namespace blockdiff
