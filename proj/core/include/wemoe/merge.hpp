#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "wemoe/model.hpp"
#include "wemoe/params.hpp"

namespace wemoe {

enum class MergeMethod { average, task_arithmetic, ties, adamerging_task, adamerging_layer };

MergeMethod parse_merge_method(std::string_view name);
std::string merge_method_name(MergeMethod m);

struct MergeSpec {
    MergeMethod method = MergeMethod::task_arithmetic;
    float lambda = 0.3f;
    float ties_keep_fraction = 0.2f;
    void validate() const;
};

// All merge ops return encoder-only parameter sets; per-task heads are
// attached afterwards (each task keeps the head its own fine-tuning
// produced, so heads never average).
NamedParamSet weight_average(std::span<const NamedParamSet> models);
NamedParamSet task_arithmetic(const NamedParamSet& theta0, std::span<const TaskVector> taus,
                              float lambda);
NamedParamSet ties_merge(const NamedParamSet& theta0, std::span<const TaskVector> taus,
                         float keep_fraction, float lambda);

// heads.{t}.* is copied from finetuned[t]; heads not covered by the list
// fall back to the first model.
NamedParamSet attach_heads(const NamedParamSet& encoder, std::span<const NamedParamSet> finetuned);

// ---- AdaMerging -------------------------------------------------------------

enum class AdaGranularity { task, layer };

// Static merge with learnable coefficients: task-wise (one scalar per task)
// or per parameter group per task. Groups default to each tensor's owning
// block (embed, layers.{i}, final).
class AdaMergingModel {
public:
    ModelConfig cfg;
    NamedParamSet theta0;  // heads already assembled per task
    std::vector<TaskVector> task_vectors;
    AdaGranularity granularity = AdaGranularity::task;
    std::vector<std::string> group_names;
    std::vector<int> name_group;        // per theta0 entry; -1 for heads
    std::vector<char> group_trainable;  // non-trainable groups stay fixed
    Tensor coeffs;                      // [G, T], requires_grad

    int64_t n_tasks() const { return static_cast<int64_t>(task_vectors.size()); }
    int64_t n_groups() const { return static_cast<int64_t>(group_names.size()); }
    int64_t trainable_count() const;

    // theta0 + sum_i coeff[g,i] * tau_i per group, recomputed from coeffs.
    NamedParamSet materialize() const;

    GradTape::Var forward_logits(GradTape& tape, const Batch& batch) const;
    Tensor forward(const Batch& batch) const;

    std::vector<Tensor*> trainable_params();
};

AdaMergingModel adamerging_init(const NamedParamSet& theta0, std::vector<TaskVector> taus,
                                AdaGranularity granularity, float lambda0, const ModelConfig& cfg);

// Custom grouping (used e.g. to restrict training to MLP groups while other
// groups stay frozen at lambda0).
AdaMergingModel adamerging_custom(const NamedParamSet& theta0, std::vector<TaskVector> taus,
                                  const ModelConfig& cfg,
                                  const std::function<std::string(const std::string&)>& group_of,
                                  const std::function<bool(const std::string&)>& group_trainable,
                                  float lambda0);

}  // namespace wemoe
