#include "wemoe/params.hpp"

#include <algorithm>

namespace wemoe {

bool is_head_name(std::string_view name) { return name.rfind("heads.", 0) == 0; }

void NamedParamSet::add(std::string name, Tensor t) {
    if (index_.count(name))
        throw ConfigError("duplicate parameter name: " + name);
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    tensors_.push_back(std::move(t));
}

bool NamedParamSet::has(std::string_view name) const {
    return index_.find(std::string(name)) != index_.end();
}

size_t NamedParamSet::index_of(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
    return it->second;
}

const Tensor& NamedParamSet::at(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
    return tensors_[it->second];
}

Tensor& NamedParamSet::at(std::string_view name) {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw ConfigError("no parameter named '" + std::string(name) + "'");
    return tensors_[it->second];
}

std::vector<std::string> NamedParamSet::encoder_names() const {
    std::vector<std::string> out;
    for (const auto& n : names_)
        if (!is_head_name(n)) out.push_back(n);
    return out;
}

int64_t NamedParamSet::total_numel() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
}

void NamedParamSet::set_requires_grad(bool on) {
    for (auto& t : tensors_) t.requires_grad = on;
}

// Congruence compares encoder entries only: same names, same shapes, same
// order. Heads are per-task and never merged, so they are skipped.
std::string congruence_mismatch(const NamedParamSet& a, const NamedParamSet& b) {
    size_t ia = 0, ib = 0;
    const size_t na = a.size(), nb = b.size();
    while (true) {
        while (ia < na && is_head_name(a.name(ia))) ++ia;
        while (ib < nb && is_head_name(b.name(ib))) ++ib;
        if (ia == na && ib == nb) return {};
        if (ia == na) return "missing parameter '" + b.name(ib) + "' in first set";
        if (ib == nb) return "missing parameter '" + a.name(ia) + "' in second set";
        if (a.name(ia) != b.name(ib))
            return "name order mismatch: '" + a.name(ia) + "' vs '" + b.name(ib) + "'";
        if (a.tensor(ia).shape != b.tensor(ib).shape)
            return "shape mismatch at '" + a.name(ia) + "': " + shape_str(a.tensor(ia).shape) +
                   " vs " + shape_str(b.tensor(ib).shape);
        ++ia;
        ++ib;
    }
}

bool congruent(const NamedParamSet& a, const NamedParamSet& b) {
    return congruence_mismatch(a, b).empty();
}

void require_congruent(const NamedParamSet& a, const NamedParamSet& b, const char* op) {
    std::string m = congruence_mismatch(a, b);
    if (!m.empty()) throw CongruenceError(std::string(op) + ": " + m);
}

TaskVector task_vector(const NamedParamSet& theta_i, const NamedParamSet& theta_0) {
    require_congruent(theta_i, theta_0, "task_vector");
    TaskVector tau;
    for (size_t k = 0; k < theta_0.size(); ++k) {
        const std::string& name = theta_0.name(k);
        if (is_head_name(name)) continue;
        const Tensor& t0 = theta_0.tensor(k);
        const Tensor& ti = theta_i.at(name);
        Tensor d = Tensor::zeros(t0.shape);
        for (size_t i = 0; i < d.data.size(); ++i) d.data[i] = ti.data[i] - t0.data[i];
        tau.entries.add(name, std::move(d));
    }
    return tau;
}

NamedParamSet apply_vector(const NamedParamSet& theta_0, const TaskVector& tau, float scale) {
    NamedParamSet out;
    for (size_t k = 0; k < theta_0.size(); ++k) {
        const std::string& name = theta_0.name(k);
        Tensor t = theta_0.tensor(k);
        t.requires_grad = false;
        if (!is_head_name(name)) {
            if (!tau.entries.has(name))
                throw CongruenceError("apply_vector: missing parameter '" + name + "' in task vector");
            const Tensor& d = tau.entries.at(name);
            if (d.shape != t.shape)
                throw CongruenceError("apply_vector: shape mismatch at '" + name + "': " +
                                      shape_str(t.shape) + " vs " + shape_str(d.shape));
            for (size_t i = 0; i < t.data.size(); ++i) t.data[i] += scale * d.data[i];
        }
        out.add(name, std::move(t));
    }
    return out;
}

}  // namespace wemoe
