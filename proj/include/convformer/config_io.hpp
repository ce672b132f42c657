#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>

#include <json.hpp>
#include <openssl/evp.h>

#include "convformer/backbone.hpp"
#include "convformer/error.hpp"

namespace convformer {

// Config files are JSON documents mirroring ModelConfig field for field:
//
//   {
//     "name": "tiny", "num_classes": 10, "drop_path_rate": 0.0,
//     "downsample_kernel": 2, "stem_hidden": 0,
//     "stages": [ {"channels": 8, "blocks": 1, "mlp_ratio": 8}, ... 4 entries ],
//     "mca": { "expand": 4, "branches": [ {"kernel": 3, "dilation": 1}, ... ],
//              "single_branch": {"kernel": 7, "dilation": 3},
//              "gate_reduction": 1, "use_expand": true, "use_parallel": true,
//              "use_inner_residual": true, "use_gating": true, "use_out_proj": true }
//   }
//
// Every key is optional (defaults as in ModelConfig); unknown keys are errors.

namespace detail {

using nlohmann::json;

inline void reject_unknown(const json& obj, std::initializer_list<const char*> allowed,
                           const std::string& where) {
  if (!obj.is_object()) throw FormatError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) throw FormatError(where + ": unknown key '" + key + "'");
  }
}

template <class V>
void read_field(const json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw FormatError(where + "." + key + ": " + e.what());
  }
}

inline json branch_to_json(const BranchSpec& b) {
  return {{"kernel", b.kernel}, {"dilation", b.dilation}};
}

inline BranchSpec branch_from_json(const json& j, const std::string& where) {
  reject_unknown(j, {"kernel", "dilation"}, where);
  BranchSpec b;
  read_field(j, "kernel", b.kernel, where);
  read_field(j, "dilation", b.dilation, where);
  return b;
}

}  // namespace detail

inline nlohmann::json config_to_json(const ModelConfig& c) {
  using nlohmann::json;
  json stages = json::array();
  for (const auto& s : c.stages) {
    stages.push_back({{"channels", s.channels}, {"blocks", s.blocks}, {"mlp_ratio", s.mlp_ratio}});
  }
  json branches = json::array();
  for (const auto& b : c.mca.branches) branches.push_back(detail::branch_to_json(b));
  json mca = {{"expand", c.mca.expand},
              {"branches", branches},
              {"single_branch", detail::branch_to_json(c.mca.single_branch)},
              {"gate_reduction", c.mca.gate_reduction},
              {"use_expand", c.mca.use_expand},
              {"use_parallel", c.mca.use_parallel},
              {"use_inner_residual", c.mca.use_inner_residual},
              {"use_gating", c.mca.use_gating},
              {"use_out_proj", c.mca.use_out_proj}};
  return {{"name", c.name},
          {"num_classes", c.num_classes},
          {"drop_path_rate", c.drop_path_rate},
          {"downsample_kernel", c.downsample_kernel},
          {"stem_hidden", c.stem_hidden},
          {"stages", stages},
          {"mca", mca}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  using detail::read_field;
  detail::reject_unknown(j,
                         {"name", "num_classes", "drop_path_rate", "downsample_kernel",
                          "stem_hidden", "stages", "mca"},
                         "config");
  ModelConfig c;
  read_field(j, "name", c.name, "config");
  read_field(j, "num_classes", c.num_classes, "config");
  read_field(j, "drop_path_rate", c.drop_path_rate, "config");
  read_field(j, "downsample_kernel", c.downsample_kernel, "config");
  read_field(j, "stem_hidden", c.stem_hidden, "config");
  if (j.contains("stages")) {
    const auto& st = j.at("stages");
    if (!st.is_array() || st.size() != 4) throw FormatError("config.stages: expected 4 entries");
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string where = "config.stages[" + std::to_string(i) + "]";
      detail::reject_unknown(st[i], {"channels", "blocks", "mlp_ratio"}, where);
      read_field(st[i], "channels", c.stages[i].channels, where);
      read_field(st[i], "blocks", c.stages[i].blocks, where);
      read_field(st[i], "mlp_ratio", c.stages[i].mlp_ratio, where);
    }
  }
  if (j.contains("mca")) {
    const auto& m = j.at("mca");
    detail::reject_unknown(m,
                           {"expand", "branches", "single_branch", "gate_reduction", "use_expand",
                            "use_parallel", "use_inner_residual", "use_gating", "use_out_proj"},
                           "config.mca");
    read_field(m, "expand", c.mca.expand, "config.mca");
    if (m.contains("branches")) {
      if (!m.at("branches").is_array()) throw FormatError("config.mca.branches: expected array");
      c.mca.branches.clear();
      for (const auto& b : m.at("branches")) {
        c.mca.branches.push_back(detail::branch_from_json(b, "config.mca.branches"));
      }
    }
    if (m.contains("single_branch")) {
      c.mca.single_branch = detail::branch_from_json(m.at("single_branch"), "config.mca.single_branch");
    }
    read_field(m, "gate_reduction", c.mca.gate_reduction, "config.mca");
    read_field(m, "use_expand", c.mca.use_expand, "config.mca");
    read_field(m, "use_parallel", c.mca.use_parallel, "config.mca");
    read_field(m, "use_inner_residual", c.mca.use_inner_residual, "config.mca");
    read_field(m, "use_gating", c.mca.use_gating, "config.mca");
    read_field(m, "use_out_proj", c.mca.use_out_proj, "config.mca");
  }
  c.validate();
  return c;
}

inline ModelConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// Sorted keys, no whitespace.
inline std::string canonical_config_text(const ModelConfig& c) { return config_to_json(c).dump(); }

using Digest = std::array<unsigned char, 32>;

inline Digest sha256(const std::string& text) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(text.data(), text.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    throw Error("sha256 failed");
  }
  return out;
}

inline Digest config_digest(const ModelConfig& c) { return sha256(canonical_config_text(c)); }

inline std::string to_hex(const Digest& d) {
  std::ostringstream os;
  for (unsigned char b : d) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(b);
  return os.str();
}

}  // namespace convformer
