#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dmsn/errors.hpp"
#include "dmsn/rng.hpp"
#include "dmsn/tensor.hpp"

namespace dmsn {

// Named map from parameter path (e.g. "mfe.expert.im.l0.w") to Parameter.
// Ordered by name so iteration, optimization, and finite-difference sweeps
// are deterministic. Parameters keep stable addresses once added.
class ParamStore {
public:
    Parameter& add(const std::string& name, std::vector<int> shape) {
        if (params_.count(name)) throw ContractError("duplicate parameter name: " + name);
        Parameter p;
        p.shape = std::move(shape);
        size_t n = 1;
        for (int e : p.shape) {
            if (e <= 0) throw DimensionError("parameter " + name + ": non-positive extent");
            n *= static_cast<size_t>(e);
        }
        p.value.assign(n, 0.0);
        p.grad.assign(n, 0.0);
        auto it = params_.emplace(name, std::move(p)).first;
        return it->second;
    }

    // Xavier-uniform init over fan_in/fan_out of a [in x out] matrix.
    Parameter& add_xavier(const std::string& name, int in, int out, Rng& rng) {
        Parameter& p = add(name, {in, out});
        const double limit = std::sqrt(6.0 / (in + out));
        for (auto& v : p.value) v = rng.uniform(-limit, limit);
        return p;
    }

    Parameter& add_zeros(const std::string& name, std::vector<int> shape) { return add(name, std::move(shape)); }

    Parameter& add_gaussian(const std::string& name, std::vector<int> shape, double stddev, Rng& rng) {
        Parameter& p = add(name, std::move(shape));
        for (auto& v : p.value) v = stddev * rng.gaussian();
        return p;
    }

    Parameter& add_scalar(const std::string& name, double value) {
        Parameter& p = add(name, {1});
        p.value[0] = value;
        return p;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Parameter& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }
    const Parameter& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw ContractError("unknown parameter: " + name);
        return it->second;
    }

    size_t count() const { return params_.size(); }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [name, p] : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    using Snapshot = std::vector<std::pair<std::string, std::vector<double>>>;

    Snapshot snapshot() const {
        Snapshot s;
        s.reserve(params_.size());
        for (const auto& [name, p] : params_) s.emplace_back(name, p.value);
        return s;
    }

    void restore(const Snapshot& s) {
        for (const auto& [name, v] : s) {
            Parameter& p = at(name);
            if (v.size() != p.value.size()) throw ContractError("snapshot size mismatch for " + name);
            p.value = v;
        }
    }

    // Checkpoint file: little-endian binary.
    //   magic "DMSN" | version u32 | count u32 |
    //   per entry: name_len u16 | name bytes | rank u8 | extents u32 each | f64 payload
    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw IngestionError("cannot open checkpoint for write: " + path);
        f.write("DMSN", 4);
        write_u32(f, 1);
        write_u32(f, static_cast<uint32_t>(params_.size()));
        for (const auto& [name, p] : params_) {
            if (name.size() > 0xFFFF) throw ContractError("parameter name too long: " + name);
            write_u16(f, static_cast<uint16_t>(name.size()));
            f.write(name.data(), static_cast<std::streamsize>(name.size()));
            f.put(static_cast<char>(p.shape.size()));
            for (int e : p.shape) write_u32(f, static_cast<uint32_t>(e));
            f.write(reinterpret_cast<const char*>(p.value.data()), static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        }
        if (!f) throw IngestionError("checkpoint write failed: " + path);
    }

    // Loads values into existing parameters (shapes must match) or creates
    // fresh entries when the store is empty.
    void load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw IngestionError("cannot open checkpoint: " + path);
        char magic[4];
        f.read(magic, 4);
        if (!f || std::memcmp(magic, "DMSN", 4) != 0) throw IngestionError("bad checkpoint magic in " + path);
        const uint32_t version = read_u32(f);
        if (version != 1) throw IngestionError("unsupported checkpoint version " + std::to_string(version));
        const uint32_t count = read_u32(f);
        const bool fresh = params_.empty();
        for (uint32_t i = 0; i < count; ++i) {
            const uint16_t name_len = read_u16(f);
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            const int rank = f.get();
            if (rank <= 0 || rank > 2) throw IngestionError("bad rank for " + name);
            std::vector<int> shape(rank);
            size_t n = 1;
            for (int r = 0; r < rank; ++r) {
                shape[r] = static_cast<int>(read_u32(f));
                n *= static_cast<size_t>(shape[r]);
            }
            std::vector<double> value(n);
            f.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(n * sizeof(double)));
            if (!f) throw IngestionError("truncated checkpoint at entry " + name);
            if (fresh) {
                Parameter& p = add(name, shape);
                p.value = std::move(value);
            } else {
                Parameter& p = at(name);
                if (p.shape != shape) throw IngestionError("shape mismatch loading " + name);
                p.value = std::move(value);
            }
        }
    }

private:
    static void write_u16(std::ofstream& f, uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); }
    static void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
    static uint16_t read_u16(std::ifstream& f) {
        uint16_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 2);
        return v;
    }
    static uint32_t read_u32(std::ifstream& f) {
        uint32_t v = 0;
        f.read(reinterpret_cast<char*>(&v), 4);
        return v;
    }

    std::map<std::string, Parameter> params_;
};

static_assert(sizeof(double) == 8, "checkpoint format assumes 64-bit doubles");

}  // namespace dmsn
