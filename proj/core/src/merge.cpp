#include "wemoe/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wemoe {

MergeMethod parse_merge_method(std::string_view name) {
    if (name == "average") return MergeMethod::average;
    if (name == "task_arithmetic") return MergeMethod::task_arithmetic;
    if (name == "ties") return MergeMethod::ties;
    if (name == "adamerging_task") return MergeMethod::adamerging_task;
    if (name == "adamerging_layer") return MergeMethod::adamerging_layer;
    throw ConfigError("unknown merge method '" + std::string(name) + "'");
}

std::string merge_method_name(MergeMethod m) {
    switch (m) {
        case MergeMethod::average: return "average";
        case MergeMethod::task_arithmetic: return "task_arithmetic";
        case MergeMethod::ties: return "ties";
        case MergeMethod::adamerging_task: return "adamerging_task";
        case MergeMethod::adamerging_layer: return "adamerging_layer";
    }
    return "?";
}

void MergeSpec::validate() const {
    if (!std::isfinite(lambda)) throw ConfigError("merge lambda must be finite");
    if (!(ties_keep_fraction > 0.0f && ties_keep_fraction <= 1.0f))
        throw ConfigError("ties keep fraction must lie in (0,1], got " +
                          std::to_string(ties_keep_fraction));
}

NamedParamSet weight_average(std::span<const NamedParamSet> models) {
    if (models.empty()) throw ConfigError("weight_average: empty model list");
    for (size_t i = 1; i < models.size(); ++i)
        require_congruent(models[0], models[i], "weight_average");
    const double inv = 1.0 / static_cast<double>(models.size());
    NamedParamSet out;
    for (size_t k = 0; k < models[0].size(); ++k) {
        const std::string& name = models[0].name(k);
        if (is_head_name(name)) continue;
        Tensor t = Tensor::zeros(models[0].tensor(k).shape);
        for (size_t j = 0; j < t.data.size(); ++j) {
            double acc = 0.0;
            for (const NamedParamSet& m : models) acc += m.at(name).data[j];
            t.data[j] = static_cast<float>(acc * inv);
        }
        out.add(name, std::move(t));
    }
    return out;
}

NamedParamSet task_arithmetic(const NamedParamSet& theta0, std::span<const TaskVector> taus,
                              float lambda) {
    if (taus.empty()) throw ConfigError("task_arithmetic: no task vectors");
    NamedParamSet out;
    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        if (is_head_name(name)) continue;
        const Tensor& base = theta0.tensor(k);
        Tensor t = base;
        t.requires_grad = false;
        // accumulation order matches dict_combine with w = lambda * 1
        for (const TaskVector& tau : taus) {
            if (!tau.entries.has(name))
                throw CongruenceError("task_arithmetic: missing parameter '" + name +
                                      "' in a task vector");
            const Tensor& d = tau.entries.at(name);
            if (!d.same_shape(base))
                throw CongruenceError("task_arithmetic: shape mismatch at '" + name + "': " +
                                      shape_str(base.shape) + " vs " + shape_str(d.shape));
            for (size_t j = 0; j < t.data.size(); ++j) t.data[j] += lambda * d.data[j];
        }
        out.add(name, std::move(t));
    }
    return out;
}

NamedParamSet ties_merge(const NamedParamSet& theta0, std::span<const TaskVector> taus,
                         float keep_fraction, float lambda) {
    if (taus.empty()) throw ConfigError("ties_merge: no task vectors");
    if (!(keep_fraction > 0.0f && keep_fraction <= 1.0f))
        throw ConfigError("ties_merge: keep fraction must lie in (0,1], got " +
                          std::to_string(keep_fraction));
    const size_t T = taus.size();

    // trim: per task vector, keep the top keep_fraction coordinates by
    // magnitude across the whole flattened vector
    std::vector<std::vector<std::vector<float>>> kept(T);  // [task][entry][coord]
    for (size_t t = 0; t < T; ++t) {
        const NamedParamSet& e = taus[t].entries;
        int64_t total = e.total_numel();
        std::vector<std::pair<size_t, size_t>> flat;  // (entry, coord)
        flat.reserve(static_cast<size_t>(total));
        for (size_t k = 0; k < e.size(); ++k)
            for (size_t j = 0; j < e.tensor(k).data.size(); ++j) flat.emplace_back(k, j);
        auto magnitude = [&](const std::pair<size_t, size_t>& p) {
            return std::fabs(e.tensor(p.first).data[p.second]);
        };
        const size_t keep = std::min<size_t>(
            flat.size(),
            std::max<size_t>(1, static_cast<size_t>(
                                    std::ceil(static_cast<double>(keep_fraction) *
                                              static_cast<double>(flat.size())))));
        // deterministic: magnitude descending, index ascending on ties
        std::stable_sort(flat.begin(), flat.end(),
                         [&](const auto& a, const auto& b) { return magnitude(a) > magnitude(b); });
        kept[t].resize(e.size());
        for (size_t k = 0; k < e.size(); ++k)
            kept[t][k].assign(e.tensor(k).data.size(), 0.0f);
        for (size_t i = 0; i < keep; ++i)
            kept[t][flat[i].first][flat[i].second] = e.tensor(flat[i].first).data[flat[i].second];
    }

    // elect + disjoint merge per coordinate, then theta0 + lambda * merged
    NamedParamSet out;
    const NamedParamSet& ref = taus[0].entries;
    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        if (is_head_name(name)) continue;
        if (!ref.has(name))
            throw CongruenceError("ties_merge: missing parameter '" + name + "' in task vectors");
        const size_t entry = ref.index_of(name);
        const Tensor& base = theta0.tensor(k);
        Tensor t = base;
        t.requires_grad = false;
        for (size_t j = 0; j < t.data.size(); ++j) {
            double signed_sum = 0.0;
            for (size_t tt = 0; tt < T; ++tt) signed_sum += kept[tt][entry][j];
            const int elected = signed_sum > 0.0 ? 1 : (signed_sum < 0.0 ? -1 : 0);
            double merged = 0.0;
            if (elected != 0) {
                double acc = 0.0;
                int count = 0;
                for (size_t tt = 0; tt < T; ++tt) {
                    float v = kept[tt][entry][j];
                    if ((elected > 0 && v > 0.0f) || (elected < 0 && v < 0.0f)) {
                        acc += v;
                        ++count;
                    }
                }
                if (count > 0) merged = acc / count;
            }
            t.data[j] += lambda * static_cast<float>(merged);
        }
        out.add(name, std::move(t));
    }
    return out;
}

NamedParamSet attach_heads(const NamedParamSet& encoder, std::span<const NamedParamSet> finetuned) {
    if (finetuned.empty()) throw ConfigError("attach_heads: no source models");
    NamedParamSet out;
    for (size_t k = 0; k < encoder.size(); ++k) {
        if (is_head_name(encoder.name(k))) continue;
        out.add(encoder.name(k), encoder.tensor(k));
    }
    for (size_t k = 0; k < finetuned[0].size(); ++k) {
        const std::string& name = finetuned[0].name(k);
        if (!is_head_name(name)) continue;
        // heads.{t}.* comes from the model fine-tuned on task t
        size_t dot = name.find('.', 6);
        size_t task = std::stoul(name.substr(6, dot - 6));
        const NamedParamSet& src = task < finetuned.size() ? finetuned[task] : finetuned[0];
        out.add(name, src.at(name));
    }
    return out;
}

// ---- AdaMerging ------------------------------------------------------------------

namespace {

std::string owning_block(const std::string& name) {
    if (name.rfind("layers.", 0) == 0) {
        size_t dot = name.find('.', 7);
        return name.substr(0, dot);
    }
    if (name.rfind("embed.", 0) == 0) return "embed";
    return "final";
}

AdaMergingModel build_adamerging(const NamedParamSet& theta0, std::vector<TaskVector> taus,
                                 const ModelConfig& cfg, AdaGranularity granularity,
                                 const std::function<std::string(const std::string&)>& group_of,
                                 const std::function<bool(const std::string&)>& trainable_of,
                                 float lambda0) {
    if (taus.empty()) throw ConfigError("adamerging: no task vectors");
    for (const TaskVector& tau : taus)
        if (!congruent(tau.entries, taus[0].entries))
            throw CongruenceError("adamerging: task vectors not congruent");

    AdaMergingModel m;
    m.cfg = cfg;
    m.theta0 = theta0;
    m.task_vectors = std::move(taus);
    m.granularity = granularity;
    m.name_group.assign(theta0.size(), -1);
    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        if (is_head_name(name)) continue;
        std::string g = group_of(name);
        auto it = std::find(m.group_names.begin(), m.group_names.end(), g);
        int idx;
        if (it == m.group_names.end()) {
            idx = static_cast<int>(m.group_names.size());
            m.group_names.push_back(g);
            m.group_trainable.push_back(trainable_of(g) ? 1 : 0);
        } else {
            idx = static_cast<int>(it - m.group_names.begin());
        }
        m.name_group[k] = idx;
    }
    m.coeffs = Tensor::full({m.n_groups(), m.n_tasks()}, lambda0);
    m.coeffs.requires_grad = true;
    return m;
}

}  // namespace

AdaMergingModel adamerging_init(const NamedParamSet& theta0, std::vector<TaskVector> taus,
                                AdaGranularity granularity, float lambda0, const ModelConfig& cfg) {
    auto group_of = [granularity](const std::string& name) {
        return granularity == AdaGranularity::task ? std::string("all") : owning_block(name);
    };
    auto trainable_of = [](const std::string&) { return true; };
    return build_adamerging(theta0, std::move(taus), cfg, granularity, group_of, trainable_of,
                            lambda0);
}

AdaMergingModel adamerging_custom(const NamedParamSet& theta0, std::vector<TaskVector> taus,
                                  const ModelConfig& cfg,
                                  const std::function<std::string(const std::string&)>& group_of,
                                  const std::function<bool(const std::string&)>& group_trainable,
                                  float lambda0) {
    return build_adamerging(theta0, std::move(taus), cfg, AdaGranularity::layer, group_of,
                            group_trainable, lambda0);
}

int64_t AdaMergingModel::trainable_count() const {
    int64_t n = 0;
    for (char t : group_trainable)
        if (t) n += n_tasks();
    return n;
}

NamedParamSet AdaMergingModel::materialize() const {
    NamedParamSet out;
    const int64_t T = n_tasks();
    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        Tensor t = theta0.tensor(k);
        t.requires_grad = false;
        const int g = name_group[k];
        if (g >= 0) {
            for (int64_t i = 0; i < T; ++i) {
                const float c = coeffs.at2(g, i);
                const Tensor& d = task_vectors[static_cast<size_t>(i)].entries.at(name);
                for (size_t j = 0; j < t.data.size(); ++j) t.data[j] += c * d.data[j];
            }
        }
        out.add(name, std::move(t));
    }
    return out;
}

GradTape::Var AdaMergingModel::forward_logits(GradTape& tape, const Batch& batch) const {
    const int64_t T = n_tasks();
    GradTape::Var coeff_var = tape.leaf(coeffs);
    // one [T] coefficient row per group; frozen groups enter as constants
    std::vector<GradTape::Var> group_rows(group_names.size());
    for (size_t g = 0; g < group_names.size(); ++g) {
        if (group_trainable[g]) {
            group_rows[g] = tape.row(coeff_var, static_cast<int64_t>(g));
        } else {
            Tensor frozen = Tensor::zeros({T});
            for (int64_t i = 0; i < T; ++i) frozen.data[static_cast<size_t>(i)] =
                coeffs.at2(static_cast<int64_t>(g), i);
            group_rows[g] = tape.constant(std::move(frozen));
        }
    }
    ParamVarMap vars;
    for (size_t k = 0; k < theta0.size(); ++k) {
        const std::string& name = theta0.name(k);
        const int g = name_group[k];
        if (g < 0) {
            vars.emplace(name, tape.constant(theta0.tensor(k)));
            continue;
        }
        std::vector<const Tensor*> deltas;
        deltas.reserve(static_cast<size_t>(T));
        for (const TaskVector& tau : task_vectors) deltas.push_back(&tau.entries.at(name));
        vars.emplace(name, tape.dict_combine(group_rows[static_cast<size_t>(g)],
                                             theta0.tensor(k), deltas));
    }
    return forward_on_tape(tape, vars, cfg, batch);
}

Tensor AdaMergingModel::forward(const Batch& batch) const {
    GradTape tape;
    return tape.value(forward_logits(tape, batch));
}

std::vector<Tensor*> AdaMergingModel::trainable_params() { return {&coeffs}; }

}  // namespace wemoe
