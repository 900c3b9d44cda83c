// SPDX-License-Identifier: Apache-2.0
#include "prefprobe/taxonomy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace prefprobe {

Taxonomy::Taxonomy(SpacePtr l2_space,
                   std::vector<std::pair<std::string, std::vector<std::size_t>>> branches)
    : l2_space_(std::move(l2_space)) {
  if (!l2_space_) throw Error(Errc::InvalidTaxonomy, "taxonomy without an L2 space");
  if (branches.empty()) throw Error(Errc::InvalidTaxonomy, "taxonomy has no L1 branches");
  const std::size_t k = l2_space_->size();
  constexpr std::size_t kUnassigned = static_cast<std::size_t>(-1);
  parent_.assign(k, kUnassigned);
  std::vector<std::string> l1_labels;
  for (std::size_t j = 0; j < branches.size(); ++j) {
    auto& [name, kids] = branches[j];
    if (kids.empty()) {
      throw Error(Errc::InvalidTaxonomy, "L1 branch '" + name + "' has no children", j);
    }
    for (std::size_t child : kids) {
      if (child >= k) throw Error(Errc::InvalidTaxonomy, "L2 index out of range", child);
      if (parent_[child] != kUnassigned) {
        throw Error(Errc::InvalidTaxonomy,
                    "L2 cluster '" + l2_space_->label(child) + "' is assigned to more than one branch",
                    child);
      }
      parent_[child] = j;
    }
    l1_labels.push_back(name);
    children_.push_back(std::move(kids));
  }
  for (std::size_t i = 0; i < k; ++i) {
    if (parent_[i] == kUnassigned) {
      throw Error(Errc::InvalidTaxonomy,
                  "L2 cluster '" + l2_space_->label(i) + "' is not assigned to any branch", i);
    }
  }
  try {
    l1_space_ = ClusterSpace::make(std::move(l1_labels));
  } catch (const Error& e) {
    throw Error(Errc::InvalidTaxonomy, std::string("bad L1 labels: ") + e.what());
  }
}

Taxonomy Taxonomy::from_json(const std::string& text, SpacePtr l2_space) {
  nlohmann::ordered_json doc;
  try {
    doc = nlohmann::ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::InvalidTaxonomy, std::string("taxonomy is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error(Errc::InvalidTaxonomy, "taxonomy must be a JSON object");
  std::vector<std::pair<std::string, std::vector<std::size_t>>> branches;
  for (const auto& [name, kids] : doc.items()) {
    if (!kids.is_array()) {
      throw Error(Errc::InvalidTaxonomy, "children of '" + name + "' must be a list");
    }
    std::vector<std::size_t> indices;
    for (const auto& child : kids) {
      if (!child.is_string()) throw Error(Errc::InvalidTaxonomy, "L2 names must be strings");
      const std::string label = child.get<std::string>();
      const std::size_t idx = l2_space->find(label);
      if (idx == l2_space->size()) {
        throw Error(Errc::InvalidTaxonomy, "unknown L2 cluster '" + label + "' under '" + name + "'");
      }
      indices.push_back(idx);
    }
    branches.emplace_back(name, std::move(indices));
  }
  return Taxonomy(std::move(l2_space), std::move(branches));
}

Taxonomy Taxonomy::load(const std::filesystem::path& path, SpacePtr l2_space) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::UnreadableFile, "cannot read taxonomy " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return from_json(buffer.str(), std::move(l2_space));
}

OracleUtilities derive_hierarchical_utilities(std::vector<double> flat, const Taxonomy& taxonomy) {
  if (flat.size() != taxonomy.l2_space().size()) {
    throw Error(Errc::InvalidArgument, "flat utilities do not match the L2 space");
  }
  OracleUtilities out;
  out.l1.reserve(taxonomy.l1_size());
  for (std::size_t j = 0; j < taxonomy.l1_size(); ++j) {
    double peak = -INFINITY;
    for (std::size_t c : taxonomy.children(j)) peak = std::max(peak, flat[c]);
    double sum = 0.0;
    for (std::size_t c : taxonomy.children(j)) sum += std::exp(flat[c] - peak);
    out.l1.push_back(peak + std::log(sum));
  }
  out.conditional = flat;
  out.flat = std::move(flat);
  return out;
}

}  // namespace prefprobe
