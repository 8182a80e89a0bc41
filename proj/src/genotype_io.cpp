#include <fstream>

#include <json.hpp>

#include "msnas/search_space.hpp"

namespace msnas {

using ordered_json = nlohmann::ordered_json;

OpKind op_from_name(const std::string& name) {
  for (int k = 0; k < kNumOps; ++k)
    if (name == op_name(static_cast<OpKind>(k))) return static_cast<OpKind>(k);
  throw std::invalid_argument("genotype: unknown op name '" + name + "'");
}

namespace {

ordered_json table_to_json(const std::vector<std::array<GenotypeChoice, 2>>& table) {
  ordered_json nodes = ordered_json::array();
  for (const auto& node : table) {
    ordered_json choices = ordered_json::array();
    for (const auto& ch : node)
      choices.push_back({{"src", ch.src}, {"op", op_name(ch.op)}});
    nodes.push_back(choices);
  }
  return nodes;
}

std::vector<std::array<GenotypeChoice, 2>> table_from_json(const ordered_json& nodes,
                                                           const char* which) {
  std::vector<std::array<GenotypeChoice, 2>> table;
  check_arg(nodes.is_array(), "genotype: '", which, "' must be an array");
  for (const auto& node : nodes) {
    check_arg(node.is_array() && node.size() == 2, "genotype: each '", which,
              "' node needs exactly 2 choices");
    std::array<GenotypeChoice, 2> parsed;
    for (int i = 0; i < 2; ++i) {
      const auto& ch = node[static_cast<size_t>(i)];
      check_arg(ch.contains("src") && ch.contains("op"),
                "genotype: choice needs 'src' and 'op' fields");
      parsed[static_cast<size_t>(i)] =
          GenotypeChoice{ch.at("src").get<int>(), op_from_name(ch.at("op").get<std::string>())};
    }
    table.push_back(parsed);
  }
  return table;
}

}  // namespace

std::string genotype_to_json(const Genotype& g) {
  g.validate();
  ordered_json doc;
  doc["schema_version"] = g.schema_version;
  doc["nodes"] = g.nodes();
  doc["normal"] = table_to_json(g.normal);
  doc["reduce"] = table_to_json(g.reduce);
  return doc.dump(2) + "\n";
}

Genotype genotype_from_json(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("genotype: malformed JSON: ") + e.what());
  }
  Genotype g;
  check_arg(doc.contains("schema_version"), "genotype: missing schema_version");
  g.schema_version = doc.at("schema_version").get<int>();
  check_arg(g.schema_version == Genotype::kSchemaVersion, "genotype: schema version ",
            g.schema_version, " not supported (expected ", Genotype::kSchemaVersion,
            "); migrate the file first");
  g.normal = table_from_json(doc.at("normal"), "normal");
  g.reduce = table_from_json(doc.at("reduce"), "reduce");
  g.validate();
  return g;
}

void save_genotype(const Genotype& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  check_arg(out.good(), "genotype: cannot open '", path, "' for writing");
  out << genotype_to_json(g);
}

Genotype load_genotype(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check_arg(in.good(), "genotype: cannot open '", path, "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return genotype_from_json(text);
}

}  // namespace msnas
