#include "coview/params.hpp"

#include <cstring>
#include <fstream>

namespace coview {

ParamStore::Entry& ParamStore::add(const std::string& name, Tensor init, int group) {
    require(!has(name), "ParamStore::add: duplicate parameter " + name);
    Entry e;
    e.name = name;
    e.group = group;
    e.value = std::move(init);
    size_t n = e.value.numel();
    e.grad.assign(n, 0.0);
    e.m.assign(n, 0.0);
    e.v.assign(n, 0.0);
    entries_.push_back(std::move(e));
    index_[name] = static_cast<int>(entries_.size()) - 1;
    return entries_.back();
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
    int i = find(name);
    require(i >= 0, "ParamStore: unknown parameter " + name);
    return entries_[i];
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
    int i = find(name);
    require(i >= 0, "ParamStore: unknown parameter " + name);
    return entries_[i];
}

int ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

void ParamStore::zero_grads() {
    for (Entry& e : entries_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
}

namespace {
constexpr char kMagic[4] = {'C', 'V', 'C', 'P'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}
uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (uint32_t(b[3]) << 24);
}
void put_f64(std::ostream& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}
double get_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= uint64_t(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}
} // namespace

void ParamStore::save(const std::string& path) const {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("ParamStore::save: cannot open " + tmp);
        out.write(kMagic, 4);
        put_u32(out, kVersion);
        put_u32(out, static_cast<uint32_t>(entries_.size()));
        for (const Entry& e : entries_) {
            put_u32(out, static_cast<uint32_t>(e.name.size()));
            out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
            put_u32(out, static_cast<uint32_t>(e.group));
            put_u32(out, static_cast<uint32_t>(e.value.shape.size()));
            for (int d : e.value.shape) put_u32(out, static_cast<uint32_t>(d));
            for (double v : e.value.data()) put_f64(out, v);
        }
    }
    std::rename(tmp.c_str(), path.c_str());
}

ParamStore ParamStore::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("ParamStore::load: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("ParamStore::load: bad magic in " + path);
    uint32_t version = get_u32(in);
    if (version != kVersion)
        throw std::runtime_error("ParamStore::load: unsupported version " + std::to_string(version));
    uint32_t count = get_u32(in);
    ParamStore store;
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t len = get_u32(in);
        std::string name(len, '\0');
        in.read(name.data(), len);
        int group = static_cast<int>(get_u32(in));
        uint32_t ndim = get_u32(in);
        Shape shape(ndim);
        for (uint32_t d = 0; d < ndim; ++d) shape[d] = static_cast<int>(get_u32(in));
        std::vector<double> vals(shape_numel(shape));
        for (double& v : vals) v = get_f64(in);
        if (!in) throw std::runtime_error("ParamStore::load: truncated payload in " + path);
        store.add(name, tensor_of(std::move(shape), std::move(vals)), group);
    }
    return store;
}

Tensor GraphBinding::get(const ParamStore& store, const std::string& name) const {
    int i = store.find(name);
    require(i >= 0, "GraphBinding: unknown parameter " + name);
    return by_entry[i];
}

GraphBinding bind_params(Graph& g, const ParamStore& store, bool trainable) {
    GraphBinding b;
    b.by_entry.reserve(store.size());
    for (const ParamStore::Entry& e : store.entries())
        b.by_entry.push_back(trainable ? g.param(e.value) : g.input(e.value));
    return b;
}

void pull_grads(Graph& g, ParamStore& store, const GraphBinding& binding) {
    for (size_t i = 0; i < store.size(); ++i) {
        std::vector<double> gv = g.grad(binding.by_entry[i]);
        std::vector<double>& dst = store.entries()[i].grad;
        for (size_t k = 0; k < gv.size(); ++k) dst[k] += gv[k];
    }
}

} // namespace coview
