#pragma once

// Reverse-mode autodiff over Eigen double matrices. The graph is built from
// shared_ptr nodes created in program order; backward() walks reachable nodes
// in descending creation order (parents always precede children, so every
// node sees its full output gradient before running its own rule) and returns
// the gradients as a map rather than mutating the graph, which keeps repeated
// backward passes and multi-loss setups deterministic.

#include "voxfactor/common.hpp"

#include <functional>
#include <memory>
#include <unordered_map>

namespace voxfactor {
namespace ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using GradMap = std::unordered_map<const Node*, Mat>;

inline uint64_t next_node_id() {
    static uint64_t counter = 0;
    return ++counter;
}

struct Node {
    Mat value;
    bool requires_grad = false;
    uint64_t id = 0;
    std::vector<NodePtr> parents;
    // receives dL/d(this->value), accumulates into parents' grad entries
    std::function<void(const Mat&, GradMap&)> backfn;
};

class Var {
public:
    Var() = default;
    explicit Var(NodePtr n) : node_(std::move(n)) {}

    bool defined() const { return (bool)node_; }
    const Mat& val() const { return node_->value; }
    long rows() const { return node_->value.rows(); }
    long cols() const { return node_->value.cols(); }
    Node* node() const { return node_.get(); }
    const NodePtr& ptr() const { return node_; }
    bool requires_grad() const { return node_->requires_grad; }

private:
    NodePtr node_;
};

// --- grad-mode switch ------------------------------------------------------

inline int& nograd_depth() {
    thread_local int depth = 0;
    return depth;
}

inline bool grad_enabled() { return nograd_depth() == 0; }

struct NoGradGuard {
    NoGradGuard() { ++nograd_depth(); }
    ~NoGradGuard() { --nograd_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// --- node constructors -----------------------------------------------------

inline Var constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->id = next_node_id();
    return Var(std::move(n));
}

inline Var constant_scalar(double v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

inline Var param(Mat v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->id = next_node_id();
    return Var(std::move(n));
}

inline bool any_requires_grad(const std::vector<Var>& vs) {
    for (const auto& v : vs)
        if (v.requires_grad()) return true;
    return false;
}

// generic op node: drops the graph when gradients are off or no parent needs
// them, so constant subexpressions never accumulate history
inline Var make_op(Mat value, std::vector<Var> parents,
                   std::function<void(const Mat&, GradMap&)> backfn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = next_node_id();
    if (grad_enabled() && any_requires_grad(parents)) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.ptr());
        n->backfn = std::move(backfn);
    }
    return Var(std::move(n));
}

inline void accum(GradMap& g, const Node* n, const Mat& m) {
    auto it = g.find(n);
    if (it == g.end()) g.emplace(n, m);
    else it->second += m;
}

// --- backward --------------------------------------------------------------

inline GradMap backward(const Var& loss, Mat seed = Mat()) {
    check(loss.defined(), "backward: undefined loss");
    if (seed.size() == 0) {
        check(loss.rows() == 1 && loss.cols() == 1,
              "backward: default seed requires a 1x1 loss");
        seed = Mat::Ones(1, 1);
    }
    check(seed.rows() == loss.rows() && seed.cols() == loss.cols(),
          "backward: seed shape mismatch");

    GradMap grads;
    if (!loss.requires_grad()) return grads;
    grads.emplace(loss.node(), seed);

    // collect reachable grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_map<const Node*, bool> seen;
    std::vector<Node*> stack{loss.node()};
    seen[loss.node()] = true;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p->requires_grad && !seen.count(p.get())) {
                seen[p.get()] = true;
                stack.push_back(p.get());
            }
        }
    }
    std::sort(order.begin(), order.end(),
              [](const Node* a, const Node* b) { return a->id > b->id; });

    for (Node* n : order) {
        if (!n->backfn) continue;
        auto it = grads.find(n);
        if (it == grads.end()) continue;
        n->backfn(it->second, grads);
    }
    return grads;
}

inline const Mat* grad_of(const GradMap& g, const Var& v) {
    auto it = g.find(v.node());
    return it == g.end() ? nullptr : &it->second;
}

// --- elementwise / linear ops ----------------------------------------------

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
    check(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()));
}

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Node *an = a.node(), *bn = b.node();
    return make_op(a.val() + b.val(), {a, b}, [an, bn](const Mat& g, GradMap& gm) {
        if (an->requires_grad) accum(gm, an, g);
        if (bn->requires_grad) accum(gm, bn, g);
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Node *an = a.node(), *bn = b.node();
    return make_op(a.val() - b.val(), {a, b}, [an, bn](const Mat& g, GradMap& gm) {
        if (an->requires_grad) accum(gm, an, g);
        if (bn->requires_grad) accum(gm, bn, Mat(-g));
    });
}

inline Var emul(const Var& a, const Var& b) {
    check_same_shape(a, b, "emul");
    Node *an = a.node(), *bn = b.node();
    Mat av = a.val(), bv = b.val();
    return make_op(av.cwiseProduct(bv), {a, b},
                   [an, bn, av, bv](const Mat& g, GradMap& gm) {
                       if (an->requires_grad) accum(gm, an, g.cwiseProduct(bv));
                       if (bn->requires_grad) accum(gm, bn, g.cwiseProduct(av));
                   });
}

inline Var scale(const Var& a, double s) {
    Node* an = a.node();
    return make_op(a.val() * s, {a}, [an, s](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(g * s));
    });
}

inline Var add_scalar(const Var& a, double s) {
    Node* an = a.node();
    return make_op(a.val().array() + s, {a}, [an](const Mat& g, GradMap& gm) {
        accum(gm, an, g);
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var matmul(const Var& a, const Var& b) {
    check(a.cols() == b.rows(), "matmul: inner dims differ");
    Node *an = a.node(), *bn = b.node();
    Mat av = a.val(), bv = b.val();
    return make_op(av * bv, {a, b}, [an, bn, av, bv](const Mat& g, GradMap& gm) {
        if (an->requires_grad) accum(gm, an, Mat(g * bv.transpose()));
        if (bn->requires_grad) accum(gm, bn, Mat(av.transpose() * g));
    });
}

inline Var transpose(const Var& a) {
    Node* an = a.node();
    return make_op(a.val().transpose(), {a}, [an](const Mat& g, GradMap& gm) {
        accum(gm, an, g.transpose());
    });
}

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return matmul(a, b); }

// --- broadcast ops (rows = positions, cols = channels) -----------------------

// a: T x D, r: 1 x D, add r to each row
inline Var add_rowvec(const Var& a, const Var& r) {
    check(r.rows() == 1 && r.cols() == a.cols(), "add_rowvec: need 1 x cols(a)");
    Node *an = a.node(), *rn = r.node();
    Mat y = a.val();
    y.rowwise() += Eigen::RowVectorXd(r.val().row(0));
    return make_op(std::move(y), {a, r}, [an, rn](const Mat& g, GradMap& gm) {
        if (an->requires_grad) accum(gm, an, g);
        if (rn->requires_grad) accum(gm, rn, Mat(g.colwise().sum()));
    });
}

// a: T x D, r: 1 x D, multiply each row elementwise by r
inline Var mul_rowvec(const Var& a, const Var& r) {
    check(r.rows() == 1 && r.cols() == a.cols(), "mul_rowvec: need 1 x cols(a)");
    Node *an = a.node(), *rn = r.node();
    Mat av = a.val(), rv = r.val();
    Mat y = av.array().rowwise() * rv.row(0).array();
    return make_op(std::move(y), {a, r}, [an, rn, av, rv](const Mat& g, GradMap& gm) {
        if (an->requires_grad)
            accum(gm, an, Mat(g.array().rowwise() * rv.row(0).array()));
        if (rn->requires_grad)
            accum(gm, rn, Mat(g.cwiseProduct(av).colwise().sum()));
    });
}

// a: T x D, c: T x 1, add c[t] to every entry of row t
inline Var add_colvec(const Var& a, const Var& c) {
    check(c.cols() == 1 && c.rows() == a.rows(), "add_colvec: need rows(a) x 1");
    Node *an = a.node(), *cn = c.node();
    Mat y = a.val();
    y.colwise() += Eigen::VectorXd(c.val().col(0));
    return make_op(std::move(y), {a, c}, [an, cn](const Mat& g, GradMap& gm) {
        if (an->requires_grad) accum(gm, an, g);
        if (cn->requires_grad) accum(gm, cn, Mat(g.rowwise().sum()));
    });
}

// a: T x D, c: T x 1, scale row t by c[t]
inline Var mul_colvec(const Var& a, const Var& c) {
    check(c.cols() == 1 && c.rows() == a.rows(), "mul_colvec: need rows(a) x 1");
    Node *an = a.node(), *cn = c.node();
    Mat av = a.val(), cv = c.val();
    Mat y = av.array().colwise() * cv.col(0).array();
    return make_op(std::move(y), {a, c}, [an, cn, av, cv](const Mat& g, GradMap& gm) {
        if (an->requires_grad)
            accum(gm, an, Mat(g.array().colwise() * cv.col(0).array()));
        if (cn->requires_grad)
            accum(gm, cn, Mat(g.cwiseProduct(av).rowwise().sum()));
    });
}

// broadcast a 1 x D row to T identical rows
inline Var repeat_rows(const Var& r, long t) {
    check(r.rows() == 1, "repeat_rows: input must be 1 x D");
    Node* rn = r.node();
    Mat y = r.val().replicate(t, 1);
    return make_op(std::move(y), {r}, [rn](const Mat& g, GradMap& gm) {
        accum(gm, rn, Mat(g.colwise().sum()));
    });
}

// --- gather / slice / concat -------------------------------------------------

// y[i, :] = a[idx[i], :]
inline Var rows_gather(const Var& a, std::vector<int> idx) {
    for (int i : idx)
        check(i >= 0 && i < a.rows(), "rows_gather: index out of range");
    Node* an = a.node();
    Mat y((long)idx.size(), a.cols());
    for (size_t i = 0; i < idx.size(); ++i) y.row((long)i) = a.val().row(idx[i]);
    long arows = a.rows(), acols = a.cols();
    return make_op(std::move(y), {a}, [an, idx, arows, acols](const Mat& g, GradMap& gm) {
        Mat da = Mat::Zero(arows, acols);
        for (size_t i = 0; i < idx.size(); ++i) da.row(idx[i]) += g.row((long)i);
        accum(gm, an, da);
    });
}

inline Var slice_rows(const Var& a, long r0, long n) {
    check(r0 >= 0 && n >= 0 && r0 + n <= a.rows(), "slice_rows: range out of bounds");
    Node* an = a.node();
    long arows = a.rows(), acols = a.cols();
    return make_op(a.val().middleRows(r0, n), {a},
                   [an, r0, n, arows, acols](const Mat& g, GradMap& gm) {
                       Mat da = Mat::Zero(arows, acols);
                       da.middleRows(r0, n) = g;
                       accum(gm, an, da);
                   });
}

inline Var slice_cols(const Var& a, long c0, long n) {
    check(c0 >= 0 && n >= 0 && c0 + n <= a.cols(), "slice_cols: range out of bounds");
    Node* an = a.node();
    long arows = a.rows(), acols = a.cols();
    return make_op(a.val().middleCols(c0, n), {a},
                   [an, c0, n, arows, acols](const Mat& g, GradMap& gm) {
                       Mat da = Mat::Zero(arows, acols);
                       da.middleCols(c0, n) = g;
                       accum(gm, an, da);
                   });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_rows: empty input");
    long cols = parts[0].cols(), rows = 0;
    for (const auto& p : parts) {
        check(p.cols() == cols, "concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat y(rows, cols);
    std::vector<long> offs;
    long at = 0;
    for (const auto& p : parts) {
        y.middleRows(at, p.rows()) = p.val();
        offs.push_back(at);
        at += p.rows();
    }
    std::vector<std::pair<Node*, std::pair<long, long>>> blocks;
    for (size_t i = 0; i < parts.size(); ++i)
        blocks.push_back({parts[i].node(), {offs[i], parts[i].rows()}});
    return make_op(std::move(y), parts, [blocks](const Mat& g, GradMap& gm) {
        for (const auto& [n, span] : blocks)
            if (n->requires_grad) accum(gm, n, Mat(g.middleRows(span.first, span.second)));
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    check(!parts.empty(), "concat_cols: empty input");
    long rows = parts[0].rows(), cols = 0;
    for (const auto& p : parts) {
        check(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat y(rows, cols);
    std::vector<long> offs;
    long at = 0;
    for (const auto& p : parts) {
        y.middleCols(at, p.cols()) = p.val();
        offs.push_back(at);
        at += p.cols();
    }
    std::vector<std::pair<Node*, std::pair<long, long>>> blocks;
    for (size_t i = 0; i < parts.size(); ++i)
        blocks.push_back({parts[i].node(), {offs[i], parts[i].cols()}});
    return make_op(std::move(y), parts, [blocks](const Mat& g, GradMap& gm) {
        for (const auto& [n, span] : blocks)
            if (n->requires_grad) accum(gm, n, Mat(g.middleCols(span.first, span.second)));
    });
}

// --- reductions --------------------------------------------------------------

inline Var sum_all(const Var& a) {
    Node* an = a.node();
    long r = a.rows(), c = a.cols();
    Mat y(1, 1);
    y(0, 0) = a.val().sum();
    return make_op(std::move(y), {a}, [an, r, c](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(Mat::Constant(r, c, g(0, 0))));
    });
}

inline Var mean_all(const Var& a) {
    Node* an = a.node();
    long r = a.rows(), c = a.cols();
    double inv = 1.0 / (double)(r * c);
    Mat y(1, 1);
    y(0, 0) = a.val().sum() * inv;
    return make_op(std::move(y), {a}, [an, r, c, inv](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(Mat::Constant(r, c, g(0, 0) * inv)));
    });
}

// T x D -> 1 x D
inline Var colwise_sum(const Var& a) {
    Node* an = a.node();
    long r = a.rows();
    return make_op(a.val().colwise().sum(), {a}, [an, r](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(Mat::Ones(r, 1) * g));
    });
}

// T x D -> 1 x D
inline Var colwise_mean(const Var& a) {
    Node* an = a.node();
    long r = a.rows();
    double inv = 1.0 / (double)r;
    return make_op(Mat(a.val().colwise().sum() * inv), {a},
                   [an, r, inv](const Mat& g, GradMap& gm) {
                       accum(gm, an, Mat(Mat::Ones(r, 1) * (g * inv)));
                   });
}

// T x D -> T x 1
inline Var rowwise_sum(const Var& a) {
    Node* an = a.node();
    long c = a.cols();
    return make_op(a.val().rowwise().sum(), {a}, [an, c](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(g * Mat::Ones(1, c)));
    });
}

// --- unaries -----------------------------------------------------------------

inline Var relu(const Var& a) {
    Node* an = a.node();
    Mat av = a.val();
    return make_op(av.cwiseMax(0.0), {a}, [an, av](const Mat& g, GradMap& gm) {
        Mat da = (av.array() > 0.0).cast<double>() * g.array();
        accum(gm, an, da);
    });
}

inline constexpr double kGeluC1 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC2 = 0.044715;

inline Var gelu(const Var& a) {
    // tanh approximation
    const double c1 = kGeluC1, c2 = kGeluC2;
    Node* an = a.node();
    Mat av = a.val();
    Mat u = c1 * (av.array() + c2 * av.array().cube());
    Mat t = u.array().tanh();
    Mat y = 0.5 * av.array() * (1.0 + t.array());
    return make_op(std::move(y), {a}, [an, av, t, c1, c2](const Mat& g, GradMap& gm) {
        Eigen::ArrayXXd x = av.array(), th = t.array();
        Eigen::ArrayXXd du = c1 * (1.0 + 3.0 * c2 * x.square());
        Eigen::ArrayXXd dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th.square()) * du;
        accum(gm, an, Mat(dy * g.array()));
    });
}

inline Var elu(const Var& a, double alpha = 1.0) {
    Node* an = a.node();
    Mat av = a.val();
    Mat y = av.unaryExpr([alpha](double x) { return x > 0.0 ? x : alpha * (std::exp(x) - 1.0); });
    return make_op(y, {a}, [an, av, y, alpha](const Mat& g, GradMap& gm) {
        Mat d = av.binaryExpr(y, [alpha](double x, double yy) { return x > 0.0 ? 1.0 : yy + alpha; });
        accum(gm, an, Mat(d.cwiseProduct(g)));
    });
}

inline Var tanh_op(const Var& a) {
    Node* an = a.node();
    Mat y = a.val().array().tanh();
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat((1.0 - y.array().square()) * g.array()));
    });
}

inline Var sigmoid(const Var& a) {
    Node* an = a.node();
    Mat y = a.val().unaryExpr([](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    });
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(y.array() * (1.0 - y.array()) * g.array()));
    });
}

inline Var exp_op(const Var& a) {
    Node* an = a.node();
    Mat y = a.val().array().exp();
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(y.cwiseProduct(g)));
    });
}

inline Var log_op(const Var& a) {
    Node* an = a.node();
    Mat av = a.val();
    return make_op(av.array().log(), {a}, [an, av](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(g.cwiseQuotient(av)));
    });
}

inline Var sqrt_op(const Var& a) {
    Node* an = a.node();
    Mat y = a.val().array().sqrt();
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(g.array() * 0.5 / y.array()));
    });
}

inline Var square(const Var& a) {
    Node* an = a.node();
    Mat av = a.val();
    return make_op(av.array().square(), {a}, [an, av](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(2.0 * av.array() * g.array()));
    });
}

inline Var abs_op(const Var& a) {
    Node* an = a.node();
    Mat av = a.val();
    return make_op(av.array().abs(), {a}, [an, av](const Mat& g, GradMap& gm) {
        Mat s = av.unaryExpr([](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
        accum(gm, an, Mat(s.cwiseProduct(g)));
    });
}

// --- softmax family ----------------------------------------------------------

inline Mat softmax_rows_value(const Mat& a) {
    Mat y = a;
    for (long r = 0; r < a.rows(); ++r) {
        double m = a.row(r).maxCoeff();
        Eigen::ArrayXd e = (a.row(r).array() - m).exp();
        y.row(r) = e / e.sum();
    }
    return y;
}

inline Var softmax_rows(const Var& a) {
    Node* an = a.node();
    Mat y = softmax_rows_value(a.val());
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        Mat da(y.rows(), y.cols());
        for (long r = 0; r < y.rows(); ++r) {
            double dot = g.row(r).dot(y.row(r));
            da.row(r) = (g.row(r).array() - dot) * y.row(r).array();
        }
        accum(gm, an, da);
    });
}

inline Var log_softmax_rows(const Var& a) {
    Node* an = a.node();
    const Mat& av = a.val();
    Mat y(av.rows(), av.cols());
    for (long r = 0; r < av.rows(); ++r) {
        double m = av.row(r).maxCoeff();
        double lse = m + std::log((av.row(r).array() - m).exp().sum());
        y.row(r) = av.row(r).array() - lse;
    }
    return make_op(y, {a}, [an, y](const Mat& g, GradMap& gm) {
        Mat da(y.rows(), y.cols());
        for (long r = 0; r < y.rows(); ++r) {
            Eigen::ArrayXd sm = y.row(r).array().exp();
            da.row(r) = g.row(r).array() - g.row(r).sum() * sm.transpose();
        }
        accum(gm, an, da);
    });
}

// y[t, 0] = a[t, idx[t]]
inline Var pick_cols(const Var& a, std::vector<int> idx) {
    check((long)idx.size() == a.rows(), "pick_cols: one index per row required");
    for (int i : idx) check(i >= 0 && i < a.cols(), "pick_cols: index out of range");
    Node* an = a.node();
    long rows = a.rows(), cols = a.cols();
    Mat y(rows, 1);
    for (long t = 0; t < rows; ++t) y(t, 0) = a.val()(t, idx[(size_t)t]);
    return make_op(std::move(y), {a}, [an, idx, rows, cols](const Mat& g, GradMap& gm) {
        Mat da = Mat::Zero(rows, cols);
        for (long t = 0; t < rows; ++t) da(t, idx[(size_t)t]) += g(t, 0);
        accum(gm, an, da);
    });
}

// --- normalization -----------------------------------------------------------

// per-row standardization: (x - mean) / sqrt(var + eps); affine handled by
// mul_rowvec / add_rowvec at the call site
inline Var layer_norm_rows(const Var& a, double eps = 1e-5) {
    Node* an = a.node();
    const Mat& av = a.val();
    long R = av.rows(), C = av.cols();
    Mat y(R, C);
    Vec inv_std(R);
    for (long r = 0; r < R; ++r) {
        double mu = av.row(r).mean();
        double var = (av.row(r).array() - mu).square().sum() / (double)C;
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(r) = is;
        y.row(r) = (av.row(r).array() - mu) * is;
    }
    return make_op(y, {a}, [an, y, inv_std, C](const Mat& g, GradMap& gm) {
        Mat da(y.rows(), C);
        for (long r = 0; r < y.rows(); ++r) {
            double gm_ = g.row(r).mean();
            double gy = g.row(r).cwiseProduct(y.row(r)).mean();
            da.row(r) = inv_std(r) * (g.row(r).array() - gm_ - y.row(r).array() * gy);
        }
        accum(gm, an, da);
    });
}

// --- convolutions ------------------------------------------------------------
// Sequences are T x C (rows = frames). Conv weights are C_out x (K*C_in) with
// tap k occupying columns [k*C_in, (k+1)*C_in). Strided conv uses ceil-mode
// padding with pad_left = (K - stride) / 2 so that T_out = ceil(T / stride) and
// stacked stages compose to ceil(T / prod(strides)).

struct ConvGeom {
    long t_out, pad_l, pad_r;
};

inline ConvGeom conv1d_geometry(long t_in, long k, long stride) {
    check(k >= stride, "conv1d: kernel must be >= stride");
    long t_out = (t_in + stride - 1) / stride;
    long total = (t_out - 1) * stride + k - t_in;
    long pad_l = (k - stride) / 2;
    check(total >= pad_l, "conv1d: padding accounting failed");
    return {t_out, pad_l, total - pad_l};
}

inline Var conv1d(const Var& x, const Var& w, const Var& b, long k, long stride) {
    long t_in = x.rows(), c_in = x.cols();
    check(w.cols() == k * c_in, "conv1d: weight cols != K*C_in");
    long c_out = w.rows();
    check(b.rows() == 1 && b.cols() == c_out, "conv1d: bias must be 1 x C_out");
    ConvGeom geo = conv1d_geometry(t_in, k, stride);

    Mat xpad = Mat::Zero(t_in + geo.pad_l + geo.pad_r, c_in);
    xpad.middleRows(geo.pad_l, t_in) = x.val();

    Mat y = Mat::Zero(geo.t_out, c_out);
    const Mat& wv = w.val();
    for (long tap = 0; tap < k; ++tap) {
        Mat wk = wv.middleCols(tap * c_in, c_in);  // C_out x C_in
        Mat xk = xpad(Eigen::seqN(tap, geo.t_out, stride), Eigen::all);
        y.noalias() += xk * wk.transpose();
    }
    y.rowwise() += Eigen::RowVectorXd(b.val().row(0));

    Node *xn = x.node(), *wn = w.node(), *bn = b.node();
    Mat wv_c = wv;
    return make_op(std::move(y), {x, w, b},
                   [xn, wn, bn, xpad, wv_c, k, stride, t_in, c_in, geo](const Mat& g, GradMap& gm) {
                       if (wn->requires_grad) {
                           Mat dw(wv_c.rows(), wv_c.cols());
                           for (long tap = 0; tap < k; ++tap) {
                               Mat xk = xpad(Eigen::seqN(tap, geo.t_out, stride), Eigen::all);
                               dw.middleCols(tap * c_in, c_in).noalias() = g.transpose() * xk;
                           }
                           accum(gm, wn, dw);
                       }
                       if (bn->requires_grad) accum(gm, bn, Mat(g.colwise().sum()));
                       if (xn->requires_grad) {
                           Mat dxpad = Mat::Zero(xpad.rows(), c_in);
                           for (long tap = 0; tap < k; ++tap) {
                               Mat wk = wv_c.middleCols(tap * c_in, c_in);
                               Mat contrib = g * wk;
                               dxpad(Eigen::seqN(tap, geo.t_out, stride), Eigen::all) += contrib;
                           }
                           accum(gm, xn, Mat(dxpad.middleRows(geo.pad_l, t_in)));
                       }
                   });
}

// transposed conv: T -> T*stride exactly, adjoint geometry of conv1d above
inline Var conv1d_transpose(const Var& x, const Var& w, const Var& b, long k, long stride) {
    long t_in = x.rows(), c_in = x.cols();
    check(k >= stride, "conv1d_transpose: kernel must be >= stride");
    check(w.cols() == k * c_in, "conv1d_transpose: weight cols != K*C_in");
    long c_out = w.rows();
    check(b.rows() == 1 && b.cols() == c_out, "conv1d_transpose: bias must be 1 x C_out");
    long pad_l = (k - stride) / 2;
    long t_full = (t_in - 1) * stride + k;
    long t_out = t_in * stride;
    check(pad_l + t_out <= t_full, "conv1d_transpose: trim accounting failed");

    const Mat& wv = w.val();
    Mat ypad = Mat::Zero(t_full, c_out);
    for (long tap = 0; tap < k; ++tap) {
        Mat wk = wv.middleCols(tap * c_in, c_in);  // C_out x C_in
        Mat contrib = x.val() * wk.transpose();
        ypad(Eigen::seqN(tap, t_in, stride), Eigen::all) += contrib;
    }
    Mat y = ypad.middleRows(pad_l, t_out);
    y.rowwise() += Eigen::RowVectorXd(b.val().row(0));

    Node *xn = x.node(), *wn = w.node(), *bn = b.node();
    Mat xv = x.val(), wv_c = wv;
    return make_op(std::move(y), {x, w, b},
                   [xn, wn, bn, xv, wv_c, k, stride, t_in, c_in, c_out, pad_l, t_full,
                    t_out](const Mat& g, GradMap& gm) {
                       Mat gpad = Mat::Zero(t_full, c_out);
                       gpad.middleRows(pad_l, t_out) = g;
                       if (bn->requires_grad) accum(gm, bn, Mat(g.colwise().sum()));
                       if (wn->requires_grad) {
                           Mat dw(c_out, k * c_in);
                           for (long tap = 0; tap < k; ++tap) {
                               Mat gk = gpad(Eigen::seqN(tap, t_in, stride), Eigen::all);
                               dw.middleCols(tap * c_in, c_in).noalias() = gk.transpose() * xv;
                           }
                           accum(gm, wn, dw);
                       }
                       if (xn->requires_grad) {
                           Mat dx = Mat::Zero(t_in, c_in);
                           for (long tap = 0; tap < k; ++tap) {
                               Mat wk = wv_c.middleCols(tap * c_in, c_in);
                               Mat gk = gpad(Eigen::seqN(tap, t_in, stride), Eigen::all);
                               dx.noalias() += gk * wk;
                           }
                           accum(gm, xn, dx);
                       }
                   });
}

// depthwise conv with reflect padding, stride 1, odd kernel; w is K x C
inline std::vector<long> reflect_index_map(long t, long pad) {
    std::vector<long> map((size_t)(t + 2 * pad));
    for (long i = 0; i < t + 2 * pad; ++i) {
        long src = i - pad;
        if (src < 0) src = -src;
        if (src >= t) src = 2 * t - 2 - src;
        if (src < 0) src = 0;          // degenerate tiny-T fallback
        if (src >= t) src = t - 1;
        map[(size_t)i] = src;
    }
    return map;
}

inline Var depthwise_reflect_conv(const Var& x, const Var& w) {
    long t = x.rows(), c = x.cols(), k = w.rows();
    check(k % 2 == 1, "depthwise_reflect_conv: kernel must be odd");
    check(w.cols() == c, "depthwise_reflect_conv: weight must be K x C");
    long pad = (k - 1) / 2;
    auto map = reflect_index_map(t, pad);

    Mat xpad(t + 2 * pad, c);
    for (long i = 0; i < xpad.rows(); ++i) xpad.row(i) = x.val().row(map[(size_t)i]);

    const Mat& wv = w.val();
    Mat y = Mat::Zero(t, c);
    for (long tap = 0; tap < k; ++tap)
        y.array() += xpad.middleRows(tap, t).array().rowwise() * wv.row(tap).array();

    Node *xn = x.node(), *wn = w.node();
    Mat wv_c = wv;
    return make_op(std::move(y), {x, w},
                   [xn, wn, xpad, wv_c, map, t, c, k](const Mat& g, GradMap& gm) {
                       if (wn->requires_grad) {
                           Mat dw(k, c);
                           for (long tap = 0; tap < k; ++tap)
                               dw.row(tap) = g.cwiseProduct(xpad.middleRows(tap, t)).colwise().sum();
                           accum(gm, wn, dw);
                       }
                       if (xn->requires_grad) {
                           Mat dxpad = Mat::Zero(xpad.rows(), c);
                           for (long tap = 0; tap < k; ++tap)
                               dxpad.middleRows(tap, t).array() +=
                                   g.array().rowwise() * wv_c.row(tap).array();
                           Mat dx = Mat::Zero(t, c);
                           for (long i = 0; i < dxpad.rows(); ++i)
                               dx.row(map[(size_t)i]) += dxpad.row(i);
                           accum(gm, xn, dx);
                       }
                   });
}

// --- special routing ops -------------------------------------------------------

// identity forward, gradient multiplied by -lambda on the way back
inline Var grad_reversal(const Var& a, double lambda) {
    Node* an = a.node();
    return make_op(a.val(), {a}, [an, lambda](const Mat& g, GradMap& gm) {
        accum(gm, an, Mat(g * (-lambda)));
    });
}

// forward value taken verbatim from `value_src`; gradient routed to `grad_src`.
// the two must agree in shape
inline Var straight_through(const Var& value_src, const Var& grad_src) {
    check_same_shape(value_src, grad_src, "straight_through");
    Node* gn = grad_src.node();
    return make_op(value_src.val(), {grad_src}, [gn](const Mat& g, GradMap& gm) {
        accum(gm, gn, g);
    });
}

inline Var detach(const Var& a) { return constant(a.val()); }

}  // namespace ad
}  // namespace voxfactor
