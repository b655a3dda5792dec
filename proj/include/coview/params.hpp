#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "coview/tensor.hpp"

namespace coview {

// Parameter groups drive per-group learning rates.
enum ParamGroup : int { kGroupPipeline = 0, kGroupMvmi = 1 };

// Named trainable tensors plus optimizer state. The checkpoint payload is
// name/group/shape/values; optimizer state is not persisted.
class ParamStore {
public:
    struct Entry {
        std::string name;
        int group = kGroupPipeline;
        Tensor value;
        std::vector<double> grad;
        std::vector<double> m;  // Adam first moment
        std::vector<double> v;  // Adam second moment
    };

    Entry& add(const std::string& name, Tensor init, int group);
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Entry& at(const std::string& name);
    const Entry& at(const std::string& name) const;
    int find(const std::string& name) const;

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    void zero_grads();

    // versioned binary checkpoint; round-trips values bitwise
    void save(const std::string& path) const;
    static ParamStore load(const std::string& path);

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Graph leaves for every store entry, in entry order.
struct GraphBinding {
    std::vector<Tensor> by_entry;
    Tensor get(const ParamStore& store, const std::string& name) const;
};

GraphBinding bind_params(Graph& g, const ParamStore& store, bool trainable);

// accumulate graph gradients back into the store
void pull_grads(Graph& g, ParamStore& store, const GraphBinding& binding);

} // namespace coview
