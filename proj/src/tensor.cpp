#include "embedkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace embedkit {

namespace {

thread_local bool g_grad_enabled = true;

int g_num_threads = []() {
    if (const char* env = std::getenv("EMBK_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return 1;
}();

std::string g_corrupt_op;

double corrupt_factor(const char* op) {
    if (!g_corrupt_op.empty() && g_corrupt_op == op) return 1.01;
    return 1.0;
}

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
        n *= d;
    }
    return n;
}

void check_2d(const TensorPtr& a, const char* op) {
    if (a->shape.size() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got shape " + shape_str(a->shape));
    }
}

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
    if (a->shape != b->shape) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a->shape) + " vs " +
                                    shape_str(b->shape));
    }
}

// Splits [0, total) across the configured thread count. Chunk boundaries do
// not affect results: every op using this writes disjoint rows.
template <typename F>
void parallel_rows(std::int64_t total, F&& body) {
    int nt = g_num_threads;
    if (nt <= 1 || total < 2 * nt) {
        body(0, total);
        return;
    }
    if (nt > total) nt = static_cast<int>(total);
    std::int64_t chunk = (total + nt - 1) / nt;
    std::vector<std::thread> workers;
    workers.reserve(static_cast<std::size_t>(nt - 1));
    for (int t = 1; t < nt; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min(total, lo + chunk);
        if (lo >= hi) break;
        workers.emplace_back([&body, lo, hi]() { body(lo, hi); });
    }
    body(0, std::min(total, chunk));
    for (auto& w : workers) w.join();
}

// Shared boilerplate: allocate the output node and wire parents when grad
// recording is active and any parent needs it.
TensorPtr make_node(std::vector<std::int64_t> shape, std::vector<double> data, const char* op,
                    std::vector<TensorPtr> parents, std::function<void(Tensor&)> backward_fn) {
    auto out = Tensor::make(std::move(shape), std::move(data), false);
    bool track = grad_enabled();
    if (track) {
        bool any = false;
        for (const auto& p : parents) any = any || p->requires_grad;
        track = any;
    }
    if (track) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward_fn = std::move(backward_fn);
        out->op = op;
    }
    return out;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

}  // namespace

std::string shape_str(const std::vector<std::int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void set_num_threads(int n) { g_num_threads = n >= 1 ? n : 1; }
int num_threads() { return g_num_threads; }

void set_backward_corruption(const std::string& op_name) { g_corrupt_op = op_name; }

TensorPtr Tensor::make(std::vector<std::int64_t> shape, std::vector<double> data, bool requires_grad) {
    auto t = std::make_shared<Tensor>();
    std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(data.size())) {
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    std::int64_t n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0), requires_grad);
}

TensorPtr Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    std::int64_t n = shape_numel(shape);
    return make(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), value), requires_grad);
}

TensorPtr Tensor::scalar(double value, bool requires_grad) {
    return make({1, 1}, {value}, requires_grad);
}

double Tensor::item() const {
    if (data.size() != 1) {
        throw std::invalid_argument("item(): tensor is not scalar, shape " + shape_str(shape));
    }
    return data[0];
}

void Tensor::ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
}

// ---- elementwise ------------------------------------------------------------

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] + b->data[i];
    return make_node(a->shape, std::move(out), "add", {a, b}, [](Tensor& o) {
        const double f = corrupt_factor("add");
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += f * o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[1]->grad[i] += f * o.grad[i];
        }
    });
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] - b->data[i];
    return make_node(a->shape, std::move(out), "sub", {a, b}, [](Tensor& o) {
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[1]->grad[i] -= o.grad[i];
        }
    });
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->data[i] * b->data[i];
    return make_node(a->shape, std::move(out), "mul", {a, b}, [](Tensor& o) {
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pa->grad[i] += o.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) pb->grad[i] += o.grad[i] * pa->data[i];
        }
    });
}

TensorPtr scale(const TensorPtr& a, double c) {
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a->data[i];
    return make_node(a->shape, std::move(out), "scale", {a}, [c](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += c * o.grad[i];
    });
}

TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& v) {
    check_2d(a, "add_rowvec");
    if (v->size() != a->cols()) {
        throw std::invalid_argument("add_rowvec: vector length " + shape_str(v->shape) +
                                    " does not match matrix " + shape_str(a->shape));
    }
    const std::int64_t m = a->rows(), n = a->cols();
    std::vector<double> out(a->data.size());
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = a->data[i * n + j] + v->data[j];
    return make_node(a->shape, std::move(out), "add_rowvec", {a, v}, [m, n](Tensor& o) {
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < o.grad.size(); ++i) o.parents[0]->grad[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) o.parents[1]->grad[j] += o.grad[i * n + j];
        }
    });
}

// ---- matrix products --------------------------------------------------------

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    if (a->shape[1] != b->shape[0]) {
        throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a->shape) + " x " +
                                    shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[1];
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const double* ad = a->data.data();
    const double* bd = b->data.data();
    double* od = out.data();
    parallel_rows(m, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i)
            for (std::int64_t p = 0; p < k; ++p) {
                const double av = ad[i * k + p];
                if (av == 0.0) continue;
                const double* brow = bd + p * n;
                double* orow = od + i * n;
                for (std::int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
    });
    return make_node({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Tensor& o) {
        const double f = corrupt_factor("matmul");
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA = dO . B^T
            parallel_rows(m, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i)
                    for (std::int64_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::int64_t j = 0; j < n; ++j) acc += o.grad[i * n + j] * pb->data[p * n + j];
                        pa->grad[i * k + p] += f * acc;
                    }
            });
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB = A^T . dO
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t p = 0; p < k; ++p) {
                    const double av = pa->data[i * k + p];
                    if (av == 0.0) continue;
                    for (std::int64_t j = 0; j < n; ++j) pb->grad[p * n + j] += f * av * o.grad[i * n + j];
                }
        }
    });
}

TensorPtr matmul_bt(const TensorPtr& a, const TensorPtr& b) {
    check_2d(a, "matmul_bt");
    check_2d(b, "matmul_bt");
    if (a->shape[1] != b->shape[1]) {
        throw std::invalid_argument("matmul_bt: inner dimensions disagree, " + shape_str(a->shape) +
                                    " x transpose of " + shape_str(b->shape));
    }
    const std::int64_t m = a->shape[0], k = a->shape[1], n = b->shape[0];
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    const double* ad = a->data.data();
    const double* bd = b->data.data();
    double* od = out.data();
    parallel_rows(m, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i)
            for (std::int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                const double* arow = ad + i * k;
                const double* brow = bd + j * k;
                for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                od[i * n + j] = acc;
            }
    });
    return make_node({m, n}, std::move(out), "matmul_bt", {a, b}, [m, k, n](Tensor& o) {
        const double f = corrupt_factor("matmul_bt");
        const auto& pa = o.parents[0];
        const auto& pb = o.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            // dA = dO . B
            parallel_rows(m, [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i)
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double gv = o.grad[i * n + j];
                        if (gv == 0.0) continue;
                        for (std::int64_t p = 0; p < k; ++p) pa->grad[i * k + p] += f * gv * pb->data[j * k + p];
                    }
            });
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            // dB = dO^T . A
            for (std::int64_t i = 0; i < m; ++i)
                for (std::int64_t j = 0; j < n; ++j) {
                    const double gv = o.grad[i * n + j];
                    if (gv == 0.0) continue;
                    for (std::int64_t p = 0; p < k; ++p) pb->grad[j * k + p] += f * gv * pa->data[i * k + p];
                }
        }
    });
}

TensorPtr transpose(const TensorPtr& a) {
    check_2d(a, "transpose");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    std::vector<double> out(a->data.size());
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = a->data[i * n + j];
    return make_node({n, m}, std::move(out), "transpose", {a}, [m, n](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) o.parents[0]->grad[i * n + j] += o.grad[j * m + i];
    });
}

// ---- structural -------------------------------------------------------------

TensorPtr slice_cols(const TensorPtr& a, std::int64_t start, std::int64_t len) {
    check_2d(a, "slice_cols");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    if (start < 0 || len <= 0 || start + len > n) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " + shape_str(a->shape));
    }
    std::vector<double> out(static_cast<std::size_t>(m * len));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < len; ++j) out[i * len + j] = a->data[i * n + start + j];
    return make_node({m, len}, std::move(out), "slice_cols", {a}, [m, n, start, len](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < len; ++j) o.parents[0]->grad[i * n + start + j] += o.grad[i * len + j];
    });
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    const std::int64_t m = parts[0]->rows();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_cols");
        if (p->rows() != m) {
            throw std::invalid_argument("concat_cols: row mismatch " + shape_str(parts[0]->shape) + " vs " +
                                        shape_str(p->shape));
        }
        total += p->cols();
    }
    std::vector<double> out(static_cast<std::size_t>(m * total));
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t n = p->cols();
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j) out[i * total + off + j] = p->data[i * n + j];
        off += n;
    }
    return make_node({m, total}, std::move(out), "concat_cols", parts, [m, total](Tensor& o) {
        std::int64_t off2 = 0;
        for (auto& p : o.parents) {
            const std::int64_t n = p->cols();
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::int64_t i = 0; i < m; ++i)
                    for (std::int64_t j = 0; j < n; ++j) p->grad[i * n + j] += o.grad[i * total + off2 + j];
            }
            off2 += n;
        }
    });
}

TensorPtr concat_rows(const std::vector<TensorPtr>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    const std::int64_t n = parts[0]->cols();
    std::int64_t total = 0;
    for (const auto& p : parts) {
        check_2d(p, "concat_rows");
        if (p->cols() != n) {
            throw std::invalid_argument("concat_rows: column mismatch " + shape_str(parts[0]->shape) + " vs " +
                                        shape_str(p->shape));
        }
        total += p->rows();
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(total * n));
    for (const auto& p : parts) out.insert(out.end(), p->data.begin(), p->data.end());
    return make_node({total, n}, std::move(out), "concat_rows", parts, [n](Tensor& o) {
        std::size_t off = 0;
        for (auto& p : o.parents) {
            const std::size_t count = p->data.size();
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < count; ++i) p->grad[i] += o.grad[off + i];
            }
            off += count;
        }
    });
}

TensorPtr gather_rows(const TensorPtr& a, const std::vector<std::int64_t>& indices) {
    check_2d(a, "gather_rows");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    for (std::int64_t idx : indices) {
        if (idx < 0 || idx >= m) {
            throw std::invalid_argument("gather_rows: index " + std::to_string(idx) + " out of " +
                                        shape_str(a->shape));
        }
    }
    const std::int64_t r = static_cast<std::int64_t>(indices.size());
    if (r == 0) throw std::invalid_argument("gather_rows: empty index list");
    std::vector<double> out(static_cast<std::size_t>(r * n));
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = a->data[indices[i] * n + j];
    return make_node({r, n}, std::move(out), "gather_rows", {a}, [indices, n, r](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < n; ++j) o.parents[0]->grad[indices[i] * n + j] += o.grad[i * n + j];
    });
}

// ---- nonlinear --------------------------------------------------------------

TensorPtr softmax_rows(const TensorPtr& a) {
    check_2d(a, "softmax_rows");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    for (double v : a->data) {
        if (std::isnan(v)) throw std::runtime_error("softmax_rows: NaN input");
    }
    std::vector<double> out(a->data.size());
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = a->data.data() + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double e = std::exp(row[j] - mx);
            out[i * n + j] = e;
            sum += e;
        }
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] /= sum;
    }
    return make_node(a->shape, std::move(out), "softmax_rows", {a}, [m, n](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        const double f = corrupt_factor("softmax_rows");
        o.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) dot += o.grad[i * n + j] * o.data[i * n + j];
            for (std::int64_t j = 0; j < n; ++j) {
                o.parents[0]->grad[i * n + j] += f * o.data[i * n + j] * (o.grad[i * n + j] - dot);
            }
        }
    });
}

TensorPtr gelu(const TensorPtr& a) {
    // exact form x * Phi(x), Phi the standard normal CDF
    std::vector<double> out(a->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a->data[i];
        out[i] = x * 0.5 * std::erfc(-x * kInvSqrt2);
    }
    return make_node(a->shape, std::move(out), "gelu", {a}, [](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        const double f = corrupt_factor("gelu");
        o.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            const double x = o.parents[0]->data[i];
            const double cdf = 0.5 * std::erfc(-x * kInvSqrt2);
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            o.parents[0]->grad[i] += f * o.grad[i] * (cdf + x * pdf);
        }
    });
}

TensorPtr layer_norm(const TensorPtr& a, const TensorPtr& gain, const TensorPtr& bias, double eps) {
    check_2d(a, "layer_norm");
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    if (gain->size() != n || bias->size() != n) {
        throw std::invalid_argument("layer_norm: gain/bias length must match last axis " + shape_str(a->shape));
    }
    std::vector<double> out(a->data.size());
    std::vector<double> inv_std(static_cast<std::size_t>(m));
    std::vector<double> means(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = a->data.data() + i * n;
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += row[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        means[i] = mean;
        inv_std[i] = is;
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = (row[j] - mean) * is * gain->data[j] + bias->data[j];
    }
    return make_node(a->shape, std::move(out), "layer_norm", {a, gain, bias},
                     [m, n, means, inv_std](Tensor& o) {
                         const double fc = corrupt_factor("layer_norm");
                         const auto& px = o.parents[0];
                         const auto& pg = o.parents[1];
                         const auto& pb = o.parents[2];
                         if (px->requires_grad) px->ensure_grad();
                         if (pg->requires_grad) pg->ensure_grad();
                         if (pb->requires_grad) pb->ensure_grad();
                         const double dn = static_cast<double>(n);
                         for (std::int64_t i = 0; i < m; ++i) {
                             const double is = inv_std[i];
                             const double mean = means[i];
                             // xhat and the two reduction terms of the standard layer-norm backward
                             double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                             for (std::int64_t j = 0; j < n; ++j) {
                                 const double xhat = (px->data[i * n + j] - mean) * is;
                                 const double dxhat = o.grad[i * n + j] * pg->data[j];
                                 sum_dxhat += dxhat;
                                 sum_dxhat_xhat += dxhat * xhat;
                                 if (pg->requires_grad) pg->grad[j] += fc * o.grad[i * n + j] * xhat;
                                 if (pb->requires_grad) pb->grad[j] += fc * o.grad[i * n + j];
                             }
                             if (px->requires_grad) {
                                 for (std::int64_t j = 0; j < n; ++j) {
                                     const double xhat = (px->data[i * n + j] - mean) * is;
                                     const double dxhat = o.grad[i * n + j] * pg->data[j];
                                     px->grad[i * n + j] +=
                                         fc * is * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                                 }
                             }
                         }
                     });
}

TensorPtr sum_all(const TensorPtr& a) {
    double s = 0.0;
    for (double v : a->data) s += v;
    return make_node({1, 1}, {s}, "sum_all", {a}, [](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        const double g = o.grad[0];
        for (std::size_t i = 0; i < o.parents[0]->grad.size(); ++i) o.parents[0]->grad[i] += g;
    });
}

TensorPtr l2_normalize_rows(const TensorPtr& a) {
    check_2d(a, "l2_normalize_rows");
    const std::int64_t m = a->shape[0], n = a->shape[1];
    std::vector<double> out(a->data.size());
    std::vector<double> norms(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        double sq = 0.0;
        for (std::int64_t j = 0; j < n; ++j) sq += a->data[i * n + j] * a->data[i * n + j];
        const double nrm = std::sqrt(sq);
        if (nrm == 0.0) throw std::runtime_error("l2_normalize_rows: zero-norm row " + std::to_string(i));
        norms[i] = nrm;
        for (std::int64_t j = 0; j < n; ++j) out[i * n + j] = a->data[i * n + j] / nrm;
    }
    return make_node(a->shape, std::move(out), "l2_normalize_rows", {a}, [m, n, norms](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        o.parents[0]->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) dot += o.grad[i * n + j] * o.data[i * n + j];
            for (std::int64_t j = 0; j < n; ++j) {
                o.parents[0]->grad[i * n + j] += (o.grad[i * n + j] - o.data[i * n + j] * dot) / norms[i];
            }
        }
    });
}

TensorPtr cross_entropy_rows(const TensorPtr& logits, const std::vector<std::int64_t>& targets,
                             std::vector<double>* per_row) {
    check_2d(logits, "cross_entropy_rows");
    const std::int64_t m = logits->shape[0], n = logits->shape[1];
    if (static_cast<std::int64_t>(targets.size()) != m) {
        throw std::invalid_argument("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                                    shape_str(logits->shape));
    }
    for (std::int64_t t : targets) {
        if (t < 0 || t >= n) throw std::invalid_argument("cross_entropy_rows: target column out of range");
    }
    if (per_row) per_row->assign(static_cast<std::size_t>(m), 0.0);
    double total = 0.0;
    for (std::int64_t i = 0; i < m; ++i) {
        const double* row = logits->data.data() + i * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
        const double li = mx + std::log(sum) - row[targets[i]];
        if (per_row) (*per_row)[static_cast<std::size_t>(i)] = li;
        total += li;
    }
    total /= static_cast<double>(m);
    return make_node({1, 1}, {total}, "cross_entropy_rows", {logits}, [m, n, targets](Tensor& o) {
        if (!o.parents[0]->requires_grad) return;
        const double f = corrupt_factor("cross_entropy_rows");
        o.parents[0]->ensure_grad();
        const double g = o.grad[0] / static_cast<double>(m);
        for (std::int64_t i = 0; i < m; ++i) {
            const double* row = o.parents[0]->data.data() + i * n;
            double mx = row[0];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
            for (std::int64_t j = 0; j < n; ++j) {
                const double p = std::exp(row[j] - mx) / sum;
                o.parents[0]->grad[i * n + j] += f * g * (p - (j == targets[i] ? 1.0 : 0.0));
            }
        }
    });
}

// ---- backward ---------------------------------------------------------------

Tape backward(const TensorPtr& loss) {
    if (!loss->is_scalar()) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss->shape));
    }
    // iterative post-order DFS for the topological order
    std::vector<Tensor*> topo;
    std::unordered_set<Tensor*> visited;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next_child] = stack.back();
        if (next_child < node->parents.size()) {
            Tensor* child = node->parents[next_child].get();
            ++next_child;
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    Tape tape;
    tape.order.reserve(topo.size());
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Tensor* node = *it;
        tape.order.push_back(node);
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
    return tape;
}

}  // namespace embedkit
