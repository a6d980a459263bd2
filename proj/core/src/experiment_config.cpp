#include "cimlab/lab/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace cimlab::lab {

u64 fnv1a(const std::string& bytes) {
  u64 h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {
std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}
} // namespace

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    require(eq != std::string::npos,
            "config: line " + std::to_string(lineno) + " is not 'key = value': '" + t + "'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    require(!key.empty(), "config: empty key at line " + std::to_string(lineno));
    cfg.kv[key] = value;
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str());
}

std::string ExperimentConfig::get(const std::string& key, const std::string& def) const {
  auto it = kv.find(key);
  return it == kv.end() ? def : it->second;
}

std::string ExperimentConfig::require_get(const std::string& key) const {
  auto it = kv.find(key);
  require(it != kv.end(), "config: missing required key '" + key + "'");
  return it->second;
}

double ExperimentConfig::get_num(const std::string& key, double def) const {
  auto it = kv.find(key);
  if (it == kv.end()) return def;
  try {
    return std::stod(it->second);
  } catch (...) {
    fail("config: key '" + key + "' is not numeric: '" + it->second + "'");
  }
}

int ExperimentConfig::get_int(const std::string& key, int def) const {
  return static_cast<int>(get_num(key, def));
}

bool ExperimentConfig::get_bool(const std::string& key, bool def) const {
  auto it = kv.find(key);
  if (it == kv.end()) return def;
  std::string v = it->second;
  std::transform(v.begin(), v.end(), v.begin(), ::tolower);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail("config: key '" + key + "' is not a boolean: '" + it->second + "'");
}

std::vector<double> ExperimentConfig::get_num_list(const std::string& key,
                                                   const std::vector<double>& def) const {
  auto it = kv.find(key);
  if (it == kv.end()) return def;
  std::vector<double> out;
  std::istringstream is(it->second);
  std::string item;
  while (std::getline(is, item, ',')) {
    std::string t = trim(item);
    if (t.empty()) continue;
    try {
      out.push_back(std::stod(t));
    } catch (...) {
      fail("config: key '" + key + "' has a non-numeric item '" + t + "'");
    }
  }
  require(!out.empty(), "config: key '" + key + "' is an empty list");
  return out;
}

std::vector<u64> ExperimentConfig::seeds() const {
  auto it = kv.find("seeds");
  if (it == kv.end()) return {1};
  std::vector<u64> out;
  std::istringstream is(it->second);
  std::string item;
  while (std::getline(is, item, ',')) {
    std::string t = trim(item);
    if (t.empty()) continue;
    out.push_back(std::stoull(t));
  }
  require(!out.empty(), "config: 'seeds' is an empty list");
  return out;
}

u64 ExperimentConfig::hash() const {
  std::string canon;
  for (const auto& [k, v] : kv) { // std::map: already sorted
    canon += k;
    canon += '=';
    canon += v;
    canon += '\n';
  }
  return fnv1a(canon);
}

} // namespace cimlab::lab
