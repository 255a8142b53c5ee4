#pragma once

// Shared basics: error type, deterministic RNG, key=value config files,
// small string helpers. Everything downstream includes this first.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxfactor {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct vox_error : std::runtime_error {
    explicit vox_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw vox_error(msg);
}

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core so streams are reproducible across
// platforms; fork() derives an independent child stream from a label, which
// keeps per-component sampling order-independent.

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0,1)
    double uniform() {
        return (double)(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // standard normal via Box-Muller (no cached spare: keeps the stream
    // position a pure function of call count)
    double normal() {
        double u1 = uniform(), u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // standard Gumbel(0,1)
    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        return -std::log(-std::log(u));
    }

    int uniform_int(int n) {  // in [0, n)
        check(n > 0, "uniform_int: n must be positive");
        return (int)(next_u64() % (uint64_t)n);
    }

    // sample an index from unnormalized non-negative weights
    int categorical(const std::vector<double>& w) {
        double total = 0.0;
        for (double x : w) total += x;
        check(total > 0.0, "categorical: weights sum to zero");
        double r = uniform() * total, acc = 0.0;
        for (size_t i = 0; i < w.size(); ++i) {
            acc += w[i];
            if (r < acc) return (int)i;
        }
        return (int)w.size() - 1;
    }

    // derive an independent stream tagged by (label, index)
    Rng fork(uint64_t label, uint64_t index = 0) {
        uint64_t s = state_ ^ (label * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL * (index + 1));
        Rng child(s);
        child.next_u64();
        return child;
    }

    // raw stream position, for checkpointing
    uint64_t state() const { return state_; }
    void set_state(uint64_t s) { state_ = s; }

private:
    uint64_t state_;
};

// ---------------------------------------------------------------------------
// string helpers

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) { out.push_back(cur); cur.clear(); }
        else cur.push_back(c);
    }
    out.push_back(cur);
    return out;
}

// ---------------------------------------------------------------------------
// key=value config files: one pair per line, '#' starts a comment, blank
// lines ignored. Typed getters with defaults.

class Config {
public:
    Config() = default;

    static Config from_file(const std::string& path) {
        std::ifstream in(path);
        check(in.good(), "config: cannot open " + path);
        std::stringstream ss;
        ss << in.rdbuf();
        return from_string(ss.str());
    }

    static Config from_string(const std::string& text) {
        Config cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            check(eq != std::string::npos,
                  "config: line " + std::to_string(lineno) + " is not key=value: " + line);
            std::string key = trim(line.substr(0, eq));
            std::string val = trim(line.substr(eq + 1));
            check(!key.empty(), "config: empty key at line " + std::to_string(lineno));
            cfg.kv_[key] = val;
        }
        return cfg;
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_str(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }

    std::string require_str(const std::string& key) const {
        auto it = kv_.find(key);
        check(it != kv_.end(), "config: missing required key " + key);
        return it->second;
    }

    int get_int(const std::string& key, int dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try { return std::stoi(it->second); }
        catch (...) { throw vox_error("config: bad int for " + key + ": " + it->second); }
    }

    double get_double(const std::string& key, double dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        try { return std::stod(it->second); }
        catch (...) { throw vox_error("config: bad number for " + key + ": " + it->second); }
    }

    bool get_bool(const std::string& key, bool dflt) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return dflt;
        const std::string& v = it->second;
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw vox_error("config: bad bool for " + key + ": " + v);
    }

    void set(const std::string& key, const std::string& val) { kv_[key] = val; }

    const std::map<std::string, std::string>& items() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

}  // namespace voxfactor
