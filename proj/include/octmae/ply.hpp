#pragma once

#include "octmae/common.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

// ASCII PLY with a single "vertex" element of scalar properties.
namespace octmae::ply {

struct VertexTable {
  std::vector<std::string> names;
  MatD values;  // vertices x properties

  std::optional<Eigen::Index> column(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return Eigen::Index(i);
    return std::nullopt;
  }
  bool has(const std::string& name) const { return column(name).has_value(); }
  std::size_t size() const { return std::size_t(values.rows()); }
};

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write(const std::filesystem::path& path, const VertexTable& t, const std::vector<std::string>& comments = {}) {
  if (std::size_t(t.values.cols()) != t.names.size()) throw ConfigError("ply: column count does not match names");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\n";
  for (const auto& c : comments) out << "comment " << c << "\n";
  out << "element vertex " << t.values.rows() << "\n";
  for (const auto& n : t.names) out << "property double " << n << "\n";
  out << "end_header\n";
  for (Eigen::Index r = 0; r < t.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.values.cols(); ++c) out << (c ? " " : "") << format_number(t.values(r, c));
    out << "\n";
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline VertexTable read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  auto fail = [&](const std::string& why) { return IoError("ply " + path.string() + ": " + why); };
  std::string line;
  if (!std::getline(in, line) || line != "ply") throw fail("missing magic");
  VertexTable t;
  std::size_t count = 0;
  bool in_vertex = false, saw_format = false, saw_vertex = false;
  while (true) {
    if (!std::getline(in, line)) throw fail("unterminated header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "end_header") break;
    if (word == "comment" || word == "obj_info" || word.empty()) continue;
    if (word == "format") {
      std::string kind;
      ls >> kind;
      if (kind != "ascii") throw fail("only ASCII PLY is supported");
      saw_format = true;
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (saw_vertex) throw fail("only a single vertex element is supported");
      if (name != "vertex") throw fail("unsupported element " + name);
      in_vertex = saw_vertex = true;
    } else if (word == "property") {
      std::string type, name;
      ls >> type;
      if (type == "list") throw fail("list properties are not supported");
      ls >> name;
      if (!in_vertex || name.empty()) throw fail("malformed property line");
      t.names.push_back(name);
    } else {
      throw fail("unexpected header line: " + line);
    }
  }
  if (!saw_format || !saw_vertex) throw fail("incomplete header");
  t.values.resize(Eigen::Index(count), Eigen::Index(t.names.size()));
  for (std::size_t r = 0; r < count; ++r) {
    for (std::size_t c = 0; c < t.names.size(); ++c) {
      std::string tok;
      if (!(in >> tok)) throw fail("truncated vertex data");
      double v = 0.0;
      const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) throw fail("bad number '" + tok + "'");
      t.values(Eigen::Index(r), Eigen::Index(c)) = v;
    }
  }
  return t;
}

}  // namespace octmae::ply
