#include "hgnp/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <thread>

#include "hgnp/curvature.hpp"
#include "hgnp/util.hpp"

namespace hgnp {

namespace {

std::vector<std::size_t> maskable_layers(const MaskedNetwork& net) {
    std::vector<std::size_t> out;
    const int last = net.last_parameterized();
    for (std::size_t l = 0; l < net.layers.size(); ++l)
        if (net.layers[l].parameterized() && int(l) != last) out.push_back(l);
    return out;
}

void fill_groups(const MaskedNetwork& net, SensitivityTable& table) {
    for (std::size_t l : maskable_layers(net)) {
        const int g = net.layers[l].spec.group_id;
        if (g >= 0) table.group_of_layer[l] = g;
    }
}

}  // namespace

SensitivityTable taylor_scores(const MaskedNetwork& net, const BatchTrace& trace) {
    if (!trace.has_backward) throw Error("taylor_scores: backward trace required");

    SensitivityTable table;
    fill_groups(net, table);
    for (std::size_t l : maskable_layers(net)) {
        const Layer& layer = net.layers[l];
        const Matrix& s = trace.pre_activation(l);
        const Matrix& g = trace.grad_pre[l];
        if (g.data.empty()) throw Error("taylor_scores: missing gradient for layer " +
                                        std::to_string(l));
        const std::size_t per_unit = s.cols / layer.unit_count();
        for (std::size_t j = 0; j < layer.unit_count(); ++j) {
            if (!layer.mask[j]) continue;
            double acc = 0.0;
            for (std::size_t b = 0; b < s.rows; ++b) {
                const double* sr = s.row(b) + j * per_unit;
                const double* gr = g.row(b) + j * per_unit;
                for (std::size_t p = 0; p < per_unit; ++p) acc += gr[p] * sr[p];
            }
            table.entries.push_back({l, j, std::fabs(acc), 0.0});
        }
    }
    return table;
}

SensitivityTable exact_scores(const MaskedNetwork& net, const Matrix& batch,
                              const std::vector<int>& labels, LossKind kind, double mu,
                              double bound, double eig_tol, std::size_t eig_max_iter,
                              std::size_t threads) {
    auto eval = [&](const MaskedNetwork& n) {
        BatchTrace t = forward(n, batch);
        double c = loss(t.outputs.back(), labels, kind);
        if (mu == 0.0) return c;
        backward(n, t, labels, kind);
        std::vector<KfacBlock> blocks = accumulate_factors(n, t, /*skip_empty=*/true);
        if (blocks.empty()) return c;
        SpectralEstimate est = block_spectrum(blocks, eig_tol, eig_max_iter);
        return c + mu * hinge_penalty(est.rho, bound);
    };
    const double base = eval(net);

    SensitivityTable table;
    fill_groups(net, table);
    for (std::size_t l : maskable_layers(net)) {
        const Layer& layer = net.layers[l];
        for (std::size_t j = 0; j < layer.unit_count(); ++j)
            if (layer.mask[j]) table.entries.push_back({l, j, 0.0, 0.0});
    }

    const std::size_t nthreads = std::max<std::size_t>(1, std::min(threads, table.entries.size()));
    auto worker = [&](std::size_t begin, std::size_t end) {
        MaskedNetwork scratch = net;
        for (std::size_t i = begin; i < end; ++i) {
            auto& e = table.entries[i];
            scratch.layers[e.stack_index].mask[e.unit] = 0;
            e.raw = std::fabs(eval(scratch) - base);
            scratch.layers[e.stack_index].mask[e.unit] = 1;
        }
    };
    if (nthreads == 1) {
        worker(0, table.entries.size());
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (table.entries.size() + nthreads - 1) / nthreads;
        for (std::size_t t = 0; t < nthreads; ++t) {
            const std::size_t b = t * chunk;
            const std::size_t e = std::min(table.entries.size(), b + chunk);
            if (b < e) pool.emplace_back(worker, b, e);
        }
        for (auto& th : pool) th.join();
    }
    return table;
}

void normalize_per_layer(SensitivityTable& table) {
    std::map<std::size_t, double> sq;
    for (const auto& e : table.entries) sq[e.stack_index] += e.raw * e.raw;
    for (auto& e : table.entries) {
        const double nrm = std::sqrt(sq[e.stack_index]);
        e.normalized = nrm > 0.0 ? e.raw / nrm : 0.0;
    }
}

PruneDecision select_prune(const SensitivityTable& table, std::size_t n,
                           const MaskedNetwork& net) {
    if (n == 0) throw Error("select_prune: N must be >= 1");
    PruneDecision decision;
    decision.requested = n;

    // per-layer candidates sorted by score
    std::map<std::size_t, std::vector<const SensitivityTable::Entry*>> by_layer;
    std::vector<const SensitivityTable::Entry*> order;
    for (const auto& e : table.entries) {
        by_layer[e.stack_index].push_back(&e);
        order.push_back(&e);
    }
    auto cmp = [](const SensitivityTable::Entry* a, const SensitivityTable::Entry* b) {
        if (a->normalized != b->normalized) return a->normalized < b->normalized;
        if (a->stack_index != b->stack_index) return a->stack_index < b->stack_index;
        return a->unit < b->unit;
    };
    std::sort(order.begin(), order.end(), cmp);
    for (auto& [l, v] : by_layer) std::sort(v.begin(), v.end(), cmp);

    std::map<std::size_t, std::size_t> alive;
    for (const auto& [l, v] : by_layer) alive[l] = net.layers[l].alive_count();

    // unconstrained pass under the min-keep rule
    std::map<std::size_t, std::size_t> picked;
    std::vector<const SensitivityTable::Entry*> pass1;
    for (const auto* e : order) {
        if (pass1.size() == n) break;
        if (picked[e->stack_index] + 1 >= alive[e->stack_index]) continue;
        picked[e->stack_index]++;
        pass1.push_back(e);
    }

    // group layers by residual group id
    std::map<int, std::vector<std::size_t>> groups;
    for (const auto& [l, g] : table.group_of_layer) groups[g].push_back(l);

    std::set<const SensitivityTable::Entry*> chosen;
    std::map<std::size_t, std::size_t> take;  // per-layer final counts

    for (const auto& [gid, members] : groups) {
        std::size_t total = 0;
        for (std::size_t l : members) total += picked.count(l) ? picked[l] : 0;
        std::size_t target =
            std::size_t(std::floor(double(total) / double(members.size()) + 0.5));
        for (std::size_t l : members)
            target = std::min(target, alive[l] > 0 ? alive[l] - 1 : 0);
        decision.group_counts[gid] = target;
        for (std::size_t l : members) take[l] = target;
    }
    for (const auto* e : pass1)
        if (!table.group_of_layer.count(e->stack_index)) take[e->stack_index]++;

    for (const auto& [l, cnt] : take) {
        const auto& v = by_layer[l];
        for (std::size_t i = 0; i < cnt && i < v.size(); ++i) chosen.insert(v[i]);
    }

    // rebalance toward N using ungrouped layers only, keeping groups equal
    auto total_chosen = [&] { return chosen.size(); };
    if (total_chosen() < n) {
        for (const auto* e : order) {
            if (total_chosen() >= n) break;
            if (table.group_of_layer.count(e->stack_index)) continue;
            if (chosen.count(e)) continue;
            std::size_t in_layer = 0;
            for (const auto* c : chosen)
                if (c->stack_index == e->stack_index) ++in_layer;
            if (in_layer + 1 >= alive[e->stack_index]) continue;
            chosen.insert(e);
        }
    } else if (total_chosen() > n) {
        std::vector<const SensitivityTable::Entry*> removable(chosen.begin(), chosen.end());
        std::sort(removable.begin(), removable.end(), cmp);
        for (auto it = removable.rbegin(); it != removable.rend(); ++it) {
            if (total_chosen() <= n) break;
            if (table.group_of_layer.count((*it)->stack_index)) continue;
            chosen.erase(*it);
        }
    }
    decision.truncated = total_chosen() < n;

    std::vector<const SensitivityTable::Entry*> final_order(chosen.begin(), chosen.end());
    std::sort(final_order.begin(), final_order.end(),
              [](const SensitivityTable::Entry* a, const SensitivityTable::Entry* b) {
                  if (a->stack_index != b->stack_index) return a->stack_index < b->stack_index;
                  return a->unit < b->unit;
              });
    for (const auto* e : final_order) decision.to_mask.emplace_back(e->stack_index, e->unit);

    MaskedNetwork preview = net;
    apply_prune(preview, decision);
    decision.kappa_after = sparsity(preview);
    return decision;
}

void apply_prune(MaskedNetwork& net, const PruneDecision& decision) {
    for (const auto& [l, j] : decision.to_mask) {
        if (l >= net.layers.size() || j >= net.layers[l].mask.size())
            throw Error("apply_prune: index out of range");
        net.layers[l].mask[j] = 0;
    }
    for (const auto& layer : net.layers)
        if (layer.parameterized() && layer.alive_count() == 0)
            throw Error("apply_prune: decision empties a layer");
}

double sparsity(const MaskedNetwork& net) {
    if (net.original_param_count == 0) throw Error("sparsity: network has no parameters");
    std::size_t alive = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& layer = net.layers[l];
        if (!layer.parameterized()) continue;
        std::size_t cols;
        if (layer.spec.kind == LayerKind::Dense) {
            cols = alive_input_features(net, l).size();
        } else {
            const std::size_t plane = layer.in_shape.height * layer.in_shape.width;
            std::size_t chans = 0;
            for (std::size_t f : alive_input_features(net, l))
                if (f % plane == 0) ++chans;
            cols = chans * layer.spec.kernel_h * layer.spec.kernel_w;
        }
        alive += layer.alive_count() * (cols + 1);
    }
    return double(alive) / double(net.original_param_count);
}

}  // namespace hgnp
