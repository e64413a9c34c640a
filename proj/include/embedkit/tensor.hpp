#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace embedkit {

// Thrown for errors a CLI user can trigger with bad inputs (exit code 1).
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of doubles with a reverse-mode gradient tape.
// Interior nodes record their parents and a backward closure; leaves have
// neither. Values are immutable after construction except for grad buffers.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until touched by backward / ensure_grad

    std::vector<TensorPtr> parents;
    std::function<void(Tensor&)> backward_fn;  // pushes this->grad into parents
    const char* op = "leaf";

    static TensorPtr make(std::vector<std::int64_t> shape, std::vector<double> data,
                          bool requires_grad = false);
    static TensorPtr zeros(std::vector<std::int64_t> shape, bool requires_grad = false);
    static TensorPtr full(std::vector<std::int64_t> shape, double value,
                          bool requires_grad = false);
    static TensorPtr scalar(double value, bool requires_grad = false);

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
    std::int64_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool is_scalar() const { return data.size() == 1; }

    double& at(std::int64_t i, std::int64_t j) { return data[i * cols() + j]; }
    double at(std::int64_t i, std::int64_t j) const { return data[i * cols() + j]; }
    double item() const;

    void ensure_grad();
    void zero_grad();
};

// Ordered record of the nodes a backward pass visited, in execution order of
// the backward sweep (reverse topological order of the forward graph).
struct Tape {
    std::vector<Tensor*> order;
};

// Scopewise autodiff switch: while disabled, ops compute values only and
// record no graph. Used by finite-difference oracles and evaluation paths.
bool grad_enabled();
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Internal parallelism cap (EMBK_THREADS). Thread count never changes values:
// row-parallel ops keep per-row accumulation order fixed.
void set_num_threads(int n);
int num_threads();

// Test hook for the gradcheck harness: scales the named op's backward output
// so a deliberately broken gradient is detected. Empty name disables.
void set_backward_corruption(const std::string& op_name);

std::string shape_str(const std::vector<std::int64_t>& shape);

// ---- operations -----------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double c);
// broadcast add of a 1xN row vector onto every row of a MxN matrix
TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& v);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
// a (m x k) times b^T for b (n x k); the QK^T shape used all over attention
TensorPtr matmul_bt(const TensorPtr& a, const TensorPtr& b);
TensorPtr transpose(const TensorPtr& a);

TensorPtr slice_cols(const TensorPtr& a, std::int64_t start, std::int64_t len);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
// differentiable row gather; backward scatter-adds (embedding lookup, row select)
TensorPtr gather_rows(const TensorPtr& a, const std::vector<std::int64_t>& indices);

TensorPtr softmax_rows(const TensorPtr& a);
TensorPtr gelu(const TensorPtr& a);
TensorPtr layer_norm(const TensorPtr& a, const TensorPtr& gain, const TensorPtr& bias,
                     double eps);
TensorPtr sum_all(const TensorPtr& a);
TensorPtr l2_normalize_rows(const TensorPtr& a);

// mean over rows of (logsumexp(row) - row[target]); numerically stable.
// per_row, when given, receives the individual per-row loss values.
TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<std::int64_t>& targets,
                             std::vector<double>* per_row = nullptr);

// Reverse-mode sweep from a scalar loss. Populates grad on every
// requires_grad leaf reachable on the tape; grads accumulate additively.
Tape backward(const TensorPtr& loss);

}  // namespace embedkit
