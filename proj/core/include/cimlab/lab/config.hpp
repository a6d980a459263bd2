#pragma once

// Flat key-value experiment configs with dotted sections. Diff-able,
// hash-able, no nested includes: a run is a pure function of this file.

#include <map>
#include <string>
#include <vector>

#include "cimlab/common.hpp"

namespace cimlab::lab {

u64 fnv1a(const std::string& bytes);

struct ExperimentConfig {
  std::map<std::string, std::string> kv;

  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig parse_file(const std::string& path);

  bool has(const std::string& key) const { return kv.count(key) != 0; }
  std::string get(const std::string& key, const std::string& def = "") const;
  std::string require_get(const std::string& key) const;
  double get_num(const std::string& key, double def) const;
  int get_int(const std::string& key, int def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<double> get_num_list(const std::string& key, const std::vector<double>& def) const;
  std::vector<u64> seeds() const; // key "seeds", default {1}

  void set(const std::string& key, const std::string& value) { kv[key] = value; }

  /// Canonical content hash over sorted key=value pairs.
  u64 hash() const;
};

} // namespace cimlab::lab
