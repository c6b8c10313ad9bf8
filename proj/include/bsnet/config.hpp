#pragma once

// Flat key=value configuration files with dotted namespaces, e.g.
//   train.learning_rate = 1e-4
//   net.backbone = tiny
// '#' starts a comment; later assignments win; --set overrides come last.

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bsnet {

class Config {
 public:
  Config() = default;

  static Config load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    Config c;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (!c.apply_line(line))
        throw std::runtime_error("config: bad line " + std::to_string(lineno) + " in " + path +
                                 ": " + line);
    }
    return c;
  }

  // "key=value" strings, as given on the command line.
  void apply_overrides(const std::vector<std::string>& sets) {
    for (const auto& s : sets)
      if (!apply_line(s)) throw std::runtime_error("config: bad --set value: " + s);
  }

  bool has(const std::string& key) const { return kv_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = kv_.find(key);
    return it == kv_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    size_t pos = 0;
    double v = std::stod(it->second, &pos);
    if (pos != it->second.size()) throw std::runtime_error("config: bad number for " + key);
    return v;
  }
  int64_t get_int(const std::string& key, int64_t fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    size_t pos = 0;
    int64_t v = std::stoll(it->second, &pos);
    if (pos != it->second.size()) throw std::runtime_error("config: bad integer for " + key);
    return v;
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw std::runtime_error("config: bad boolean for " + key + ": " + v);
  }
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
    auto it = kv_.find(key);
    if (it == kv_.end()) return fallback;
    std::vector<double> out;
    std::stringstream ss(it->second);
    std::string tok;
    while (std::getline(ss, tok, ','))
      out.push_back(std::stod(tok));
    return out;
  }

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }

  // Echo of the fully resolved configuration, sorted by key.
  std::string dump() const {
    std::string out;
    for (const auto& [k, v] : kv_) out += k + " = " + v + "\n";
    return out;
  }

  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  static std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
  }

  bool apply_line(const std::string& raw) {
    std::string line = raw;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) return true;
    auto eq = line.find('=');
    if (eq == std::string::npos) return false;
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) return false;
    kv_[key] = value;
    return true;
  }

  std::map<std::string, std::string> kv_;
};

}  // namespace bsnet
