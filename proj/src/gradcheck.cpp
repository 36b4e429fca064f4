#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "iwm/graph.hpp"
#include "iwm/rng.hpp"

namespace iwm {

namespace {

struct CheckCase {
    const char* name;
    OpKind covers;
    // trainable inputs for one trial
    std::function<std::vector<Tensor>(Rng&)> make_inputs;
    // applies the op under test; the harness contracts the output with a
    // fixed random cotangent and sums to a scalar
    std::function<NodeId(Graph&, const std::vector<NodeId>&, Rng&)> build;
};

Shape rand_shape(Rng& rng, int max_rank = 3, int64_t max_dim = 8) {
    int rank = 1 + static_cast<int>(rng.uniform_int(max_rank));
    Shape s(static_cast<size_t>(rank));
    for (auto& d : s) d = 1 + rng.uniform_int(max_dim);
    return s;
}

Tensor rand_tensor(Rng& rng, const Shape& s, double lo = -2.0, double hi = 2.0) {
    Tensor t = Tensor::zeros(s, Dtype::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
    return t;
}

Tensor rand_positive(Rng& rng, const Shape& s, double lo = 0.2, double hi = 3.0) {
    return rand_tensor(rng, s, lo, hi);
}

// keeps inputs away from the relu kink so central differences are valid
Tensor rand_off_zero(Rng& rng, const Shape& s) {
    Tensor t = Tensor::zeros(s, Dtype::F64);
    for (int64_t i = 0; i < t.numel(); ++i) {
        double v = rng.uniform(0.05, 2.0);
        t.set(i, rng.bernoulli(0.5) ? v : -v);
    }
    return t;
}

double scalar_eval(const CheckCase& c, const std::vector<Tensor>& inputs, uint64_t wkey,
                   Graph* out_graph, std::vector<NodeId>* out_leaves) {
    Graph g;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(g.leaf(t, true));
    Rng wrng(wkey);
    NodeId op_out = c.build(g, ids, wrng);
    Rng cot(hash_key(wkey, 0xc07));
    Tensor w = rand_tensor(cot, g.value(op_out).shape(), -1.0, 1.0);
    NodeId wid = g.leaf(w, false);
    NodeId s = g.sum(g.mul(op_out, wid));
    double val = g.value(s).at(0);
    if (out_graph) {
        g.backward(s);
        *out_graph = std::move(g);
        *out_leaves = ids;
    }
    return val;
}

std::vector<CheckCase> make_cases() {
    std::vector<CheckCase> cs;
    auto id_build = [](auto fn) { return fn; };

    cs.push_back({"matmul_2d", OpKind::Matmul,
                  [](Rng& r) {
                      int64_t m = 1 + r.uniform_int(6), k = 1 + r.uniform_int(6), n = 1 + r.uniform_int(6);
                      return std::vector<Tensor>{rand_tensor(r, {m, k}), rand_tensor(r, {k, n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.matmul(in[0], in[1]); })});
    cs.push_back({"matmul_batched", OpKind::Matmul,
                  [](Rng& r) {
                      int64_t b = 1 + r.uniform_int(3), m = 1 + r.uniform_int(5), k = 1 + r.uniform_int(5),
                              n = 1 + r.uniform_int(5);
                      return std::vector<Tensor>{rand_tensor(r, {b, m, k}), rand_tensor(r, {b, k, n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.matmul(in[0], in[1]); })});
    cs.push_back({"matmul_shared_rhs", OpKind::Matmul,
                  [](Rng& r) {
                      int64_t b = 2 + r.uniform_int(3), m = 1 + r.uniform_int(5), k = 1 + r.uniform_int(5),
                              n = 1 + r.uniform_int(5);
                      return std::vector<Tensor>{rand_tensor(r, {b, m, k}), rand_tensor(r, {k, n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.matmul(in[0], in[1]); })});

    auto binary_case = [&](const char* name, OpKind k, auto op, bool positive_rhs) {
        cs.push_back({name, k,
                      [positive_rhs](Rng& r) {
                          Shape s = rand_shape(r);
                          Tensor b = positive_rhs ? rand_positive(r, s, 0.5, 2.5) : rand_tensor(r, s);
                          return std::vector<Tensor>{rand_tensor(r, s), std::move(b)};
                      },
                      id_build([op](Graph& g, const std::vector<NodeId>& in, Rng&) { return op(g, in[0], in[1]); })});
    };
    binary_case("add", OpKind::Add, [](Graph& g, NodeId a, NodeId b) { return g.add(a, b); }, false);
    binary_case("sub", OpKind::Sub, [](Graph& g, NodeId a, NodeId b) { return g.sub(a, b); }, false);
    binary_case("mul", OpKind::Mul, [](Graph& g, NodeId a, NodeId b) { return g.mul(a, b); }, false);
    binary_case("div", OpKind::Div, [](Graph& g, NodeId a, NodeId b) { return g.div(a, b); }, true);

    auto unary_case = [&](const char* name, OpKind k, auto op, auto make) {
        cs.push_back({name, k,
                      [make](Rng& r) { return std::vector<Tensor>{make(r, rand_shape(r))}; },
                      id_build([op](Graph& g, const std::vector<NodeId>& in, Rng&) { return op(g, in[0]); })});
    };
    unary_case("neg", OpKind::Neg, [](Graph& g, NodeId a) { return g.neg(a); },
               [](Rng& r, const Shape& s) { return rand_tensor(r, s); });
    unary_case("exp", OpKind::Exp, [](Graph& g, NodeId a) { return g.exp(a); },
               [](Rng& r, const Shape& s) { return rand_tensor(r, s, -2.0, 2.0); });
    unary_case("log", OpKind::Log, [](Graph& g, NodeId a) { return g.log(a); },
               [](Rng& r, const Shape& s) { return rand_positive(r, s); });
    unary_case("sqrt", OpKind::Sqrt, [](Graph& g, NodeId a) { return g.sqrt(a); },
               [](Rng& r, const Shape& s) { return rand_positive(r, s); });
    unary_case("power_1p7", OpKind::Power, [](Graph& g, NodeId a) { return g.power(a, 1.7); },
               [](Rng& r, const Shape& s) { return rand_positive(r, s); });
    unary_case("power_cube", OpKind::Power, [](Graph& g, NodeId a) { return g.power(a, 3.0); },
               [](Rng& r, const Shape& s) { return rand_tensor(r, s); });
    unary_case("gelu", OpKind::Gelu, [](Graph& g, NodeId a) { return g.gelu(a); },
               [](Rng& r, const Shape& s) { return rand_tensor(r, s); });
    unary_case("relu", OpKind::Relu, [](Graph& g, NodeId a) { return g.relu(a); },
               [](Rng& r, const Shape& s) { return rand_off_zero(r, s); });

    auto axis_pick = [](Rng& r, size_t ndim) { return static_cast<int64_t>(r.uniform_int(static_cast<int64_t>(ndim))); };

    cs.push_back({"sum_axis", OpKind::Sum,
                  [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, rand_shape(r, 3))}; },
                  id_build([axis_pick](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      return g.sum(in[0], {axis_pick(r, g.value(in[0]).ndim())});
                  })});
    cs.push_back({"sum_all", OpKind::Sum,
                  [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, rand_shape(r, 3))}; },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.sum(in[0]); })});
    cs.push_back({"mean_axis", OpKind::Mean,
                  [](Rng& r) { return std::vector<Tensor>{rand_tensor(r, rand_shape(r, 3))}; },
                  id_build([axis_pick](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      return g.mean(in[0], {axis_pick(r, g.value(in[0]).ndim())});
                  })});
    cs.push_back({"mean_multi_axis", OpKind::Mean,
                  [](Rng& r) {
                      Shape s = {2 + r.uniform_int(4), 2 + r.uniform_int(4), 2 + r.uniform_int(4)};
                      return std::vector<Tensor>{rand_tensor(r, s)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.mean(in[0], {0, 2}); })});
    cs.push_back({"broadcast_suffix", OpKind::BroadcastTo,
                  [](Rng& r) {
                      int64_t n = 1 + r.uniform_int(6);
                      return std::vector<Tensor>{rand_tensor(r, {n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      int64_t m = 2 + r.uniform_int(5);
                      return g.broadcast_to(in[0], {m, g.value(in[0]).shape()[0]});
                  })});
    cs.push_back({"broadcast_mid", OpKind::BroadcastTo,
                  [](Rng& r) {
                      int64_t m = 1 + r.uniform_int(4), k = 1 + r.uniform_int(4);
                      return std::vector<Tensor>{rand_tensor(r, {m, 1, k})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      const Shape& s = g.value(in[0]).shape();
                      int64_t j = 2 + r.uniform_int(4);
                      return g.broadcast_to(in[0], {s[0], j, s[2]});
                  })});
    cs.push_back({"reshape", OpKind::Reshape,
                  [](Rng& r) {
                      int64_t m = 1 + r.uniform_int(6), n = 1 + r.uniform_int(6);
                      return std::vector<Tensor>{rand_tensor(r, {m, n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) {
                      return g.reshape(in[0], {g.value(in[0]).numel()});
                  })});
    cs.push_back({"transpose", OpKind::Transpose,
                  [](Rng& r) {
                      Shape s = {1 + r.uniform_int(5), 1 + r.uniform_int(5), 1 + r.uniform_int(5)};
                      return std::vector<Tensor>{rand_tensor(r, s)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      std::vector<int64_t> perm = {0, 1, 2};
                      for (int i = 2; i > 0; --i) std::swap(perm[static_cast<size_t>(i)],
                                                            perm[static_cast<size_t>(r.uniform_int(i + 1))]);
                      return g.transpose(in[0], perm);
                  })});
    cs.push_back({"concat", OpKind::Concat,
                  [](Rng& r) {
                      int64_t n = 1 + r.uniform_int(4);
                      return std::vector<Tensor>{rand_tensor(r, {1 + r.uniform_int(4), n}),
                                                 rand_tensor(r, {1 + r.uniform_int(4), n}),
                                                 rand_tensor(r, {1 + r.uniform_int(4), n})};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) { return g.concat(in, 0); })});
    cs.push_back({"slice", OpKind::Slice,
                  [](Rng& r) {
                      Shape s = {3 + r.uniform_int(5), 1 + r.uniform_int(5)};
                      return std::vector<Tensor>{rand_tensor(r, s)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      int64_t len = g.value(in[0]).shape()[0];
                      int64_t a = r.uniform_int(len - 1);
                      int64_t b = a + 1 + r.uniform_int(len - a);
                      return g.slice(in[0], 0, a, b);
                  })});
    cs.push_back({"gather_rows", OpKind::GatherRows,
                  [](Rng& r) {
                      Shape s = {2 + r.uniform_int(6), 1 + r.uniform_int(5)};
                      return std::vector<Tensor>{rand_tensor(r, s)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      int64_t rows = g.value(in[0]).shape()[0];
                      std::vector<int64_t> idx;
                      int64_t k = 2 + r.uniform_int(6);
                      for (int64_t i = 0; i < k; ++i) idx.push_back(r.uniform_int(rows)); // repeats on purpose
                      return g.gather_rows(in[0], idx);
                  })});
    cs.push_back({"softmax", OpKind::Softmax,
                  [](Rng& r) {
                      Shape s = {1 + r.uniform_int(5), 2 + r.uniform_int(6)};
                      return std::vector<Tensor>{rand_tensor(r, s, -3.0, 3.0)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng& r) {
                      return g.softmax(in[0], r.bernoulli(0.5) ? 1 : 0);
                  })});
    cs.push_back({"layer_norm", OpKind::LayerNorm,
                  [](Rng& r) {
                      Shape s = {1 + r.uniform_int(5), 3 + r.uniform_int(5)};
                      return std::vector<Tensor>{rand_tensor(r, s)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) {
                      return g.layer_norm(in[0], 1, 1e-6);
                  })});
    cs.push_back({"mixed_graph", OpKind::Leaf, // extra end-to-end case
                  [](Rng& r) {
                      int64_t m = 2 + r.uniform_int(3), k = 2 + r.uniform_int(3);
                      return std::vector<Tensor>{rand_tensor(r, {m, k}), rand_tensor(r, {k, m}),
                                                 rand_positive(r, {m, m}, 0.5, 2.0)};
                  },
                  id_build([](Graph& g, const std::vector<NodeId>& in, Rng&) {
                      NodeId mm = g.matmul(in[0], in[1]);
                      NodeId ln = g.layer_norm(mm, 1, 1e-6);
                      NodeId sm = g.softmax(g.div(g.gelu(ln), in[2]), 1);
                      NodeId e = g.exp(g.mul(sm, g.neg(ln)));
                      int64_t m = g.value(sm).shape()[0];
                      NodeId rowsum = g.reshape(g.sum(sm, {1}), {m, 1});
                      NodeId bc = g.broadcast_to(rowsum, g.value(sm).shape());
                      return g.add(e, g.power(g.add(sm, bc), 2.0));
                  })});
    return cs;
}

} // namespace

double run_gradcheck_suite(int seeds, std::vector<std::string>* report) {
    auto cases = make_cases();

    // every non-leaf op kind must be covered by at least one case
    std::set<OpKind> covered;
    for (const auto& c : cases) covered.insert(c.covers);
    for (int k = 1; k < static_cast<int>(OpKind::kCount); ++k) {
        if (!covered.count(static_cast<OpKind>(k)))
            throw GraphError(std::string("gradcheck: op '") + op_name(static_cast<OpKind>(k)) +
                             "' has no finite-difference case");
    }

    const double h = 1e-5;
    double worst = 0.0;
    for (const auto& c : cases) {
        double case_worst = 0.0;
        for (int seed = 0; seed < seeds; ++seed) {
            uint64_t key = hash_key(0x9cadce11, fnv1a64(c.name, std::string(c.name).size()), static_cast<uint64_t>(seed));
            Rng rng(key);
            std::vector<Tensor> inputs = c.make_inputs(rng);
            Graph g;
            std::vector<NodeId> leaf_ids;
            scalar_eval(c, inputs, key, &g, &leaf_ids);
            Rng pick(hash_key(key, 0x5e1ec7));
            for (size_t li = 0; li < inputs.size(); ++li) {
                Tensor analytic = g.grad(leaf_ids[li]);
                int64_t n = inputs[li].numel();
                int64_t to_check = std::min<int64_t>(n, 48);
                for (int64_t e = 0; e < to_check; ++e) {
                    int64_t i = (to_check == n) ? e : pick.uniform_int(n);
                    std::vector<Tensor> plus = inputs, minus = inputs;
                    plus[li].set(i, inputs[li].at(i) + h);
                    minus[li].set(i, inputs[li].at(i) - h);
                    double fp = scalar_eval(c, plus, key, nullptr, nullptr);
                    double fm = scalar_eval(c, minus, key, nullptr, nullptr);
                    double numeric = (fp - fm) / (2.0 * h);
                    double a = analytic.at(i);
                    double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
                    case_worst = std::max(case_worst, err);
                }
            }
        }
        if (report) {
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%-18s max_rel_err %.3e", c.name, case_worst);
            report->push_back(buf);
        }
        worst = std::max(worst, case_worst);
    }
    return worst;
}

} // namespace iwm
