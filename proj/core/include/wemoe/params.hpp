#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "wemoe/tensor.hpp"

namespace wemoe {

// Flat, ordered map of parameter names to tensors; the universal
// representation of pretrained, fine-tuned and merged models. Naming scheme:
//   embed.{weight|bias|pos}
//   layers.{i}.{ln1|ln2}.{gain|bias}
//   layers.{i}.attn.{q|k|v|o}.{weight|bias}
//   layers.{i}.mlp.{fc1|fc2}.{weight|bias}
//   final_ln.{gain|bias}
//   heads.{task}.{weight|bias}
class NamedParamSet {
public:
    void add(std::string name, Tensor t);
    bool has(std::string_view name) const;
    const Tensor& at(std::string_view name) const;
    Tensor& at(std::string_view name);

    size_t size() const { return names_.size(); }
    size_t index_of(std::string_view name) const;
    const std::string& name(size_t i) const { return names_[i]; }
    const Tensor& tensor(size_t i) const { return tensors_[i]; }
    Tensor& tensor(size_t i) { return tensors_[i]; }

    std::vector<std::string> encoder_names() const;  // insertion order, heads skipped
    int64_t total_numel() const;
    void set_requires_grad(bool on);

private:
    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

bool is_head_name(std::string_view name);

// Congruence: same encoder names, shapes and order. Heads are excluded
// everywhere (they are per-task and never merged).
bool congruent(const NamedParamSet& a, const NamedParamSet& b);
std::string congruence_mismatch(const NamedParamSet& a, const NamedParamSet& b);
void require_congruent(const NamedParamSet& a, const NamedParamSet& b, const char* op);

// Delta between a fine-tuned model and the pretrained model, heads dropped.
struct TaskVector {
    NamedParamSet entries;
};

TaskVector task_vector(const NamedParamSet& theta_i, const NamedParamSet& theta_0);
NamedParamSet apply_vector(const NamedParamSet& theta_0, const TaskVector& tau, float scale);

}  // namespace wemoe
