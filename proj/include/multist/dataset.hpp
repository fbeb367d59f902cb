#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "multist/binary_io.hpp"
#include "multist/csv.hpp"
#include "multist/image.hpp"
#include "multist/linalg.hpp"

namespace multist {

/// Spot-by-gene counts with row (barcode) and column (gene) names.
struct ExpressionMatrix {
  Matrix values;  // N x G
  std::vector<std::string> barcodes;
  std::vector<std::string> genes;

  Index spots() const { return values.rows(); }
  Index num_genes() const { return values.cols(); }
};

struct Dataset {
  ExpressionMatrix expression;
  Matrix coords;  // N x 2 pixel positions (x, y)
  double scale_factor = 1.0;
  std::optional<Labels> labels;
  std::vector<std::string> label_names;  // label id -> original string
  std::optional<RgbImage> image;
  std::optional<Matrix> patch_embeddings;

  Index spots() const { return expression.spots(); }

  /// Keeps only the listed spots, in the given order.
  void subset_spots(const std::vector<Index>& keep) {
    ExpressionMatrix e;
    e.values.resize(static_cast<Index>(keep.size()), expression.values.cols());
    e.genes = expression.genes;
    Matrix c(static_cast<Index>(keep.size()), 2);
    Labels l;
    std::optional<Matrix> emb;
    if (patch_embeddings) emb = Matrix(static_cast<Index>(keep.size()), patch_embeddings->cols());
    for (std::size_t r = 0; r < keep.size(); ++r) {
      const Index i = keep[r];
      e.values.row(static_cast<Index>(r)) = expression.values.row(i);
      e.barcodes.push_back(expression.barcodes[static_cast<std::size_t>(i)]);
      c.row(static_cast<Index>(r)) = coords.row(i);
      if (labels) l.push_back((*labels)[static_cast<std::size_t>(i)]);
      if (emb) emb->row(static_cast<Index>(r)) = patch_embeddings->row(i);
    }
    expression = std::move(e);
    coords = std::move(c);
    if (labels) labels = std::move(l);
    patch_embeddings = std::move(emb);
  }
};

/// Plain `key=value` lines; blank lines and `#` comments are ignored.
inline std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::MissingFile, "cannot open " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = csv::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::MalformedRow,
            path + " line " + std::to_string(lineno) + ": expected key=value");
    out[csv::trim(std::string_view(t).substr(0, eq))] = csv::trim(std::string_view(t).substr(eq + 1));
  }
  return out;
}

namespace detail {

inline std::unordered_map<std::string, std::size_t> index_barcodes(const csv::Table& t, const std::string& path) {
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const auto [it, fresh] = idx.emplace(t.rows[r][0], r);
    require(fresh, ErrorCode::MalformedRow,
            path + " line " + std::to_string(t.line_numbers[r]) + ": duplicate barcode " + t.rows[r][0]);
  }
  return idx;
}

}  // namespace detail

/// Reads expression.csv and coords.csv plus the optional labels.csv,
/// image.png, patch_embeddings.bin and meta.cfg. Rows follow expression.csv.
inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  const auto expr_path = (root / "expression.csv").string();
  const auto coord_path = (root / "coords.csv").string();
  require(fs::exists(expr_path), ErrorCode::MissingFile, "missing " + expr_path);
  require(fs::exists(coord_path), ErrorCode::MissingFile, "missing " + coord_path);

  Dataset ds;
  const auto expr = csv::read(expr_path);
  require(expr.header.size() >= 2, ErrorCode::MalformedRow, expr_path + ": no gene columns");
  const Index n = static_cast<Index>(expr.rows.size());
  const Index g = static_cast<Index>(expr.header.size()) - 1;
  ds.expression.genes.assign(expr.header.begin() + 1, expr.header.end());
  ds.expression.values.resize(n, g);
  for (Index i = 0; i < n; ++i) {
    const auto& row = expr.rows[static_cast<std::size_t>(i)];
    ds.expression.barcodes.push_back(row[0]);
    for (Index j = 0; j < g; ++j) {
      const double v = csv::parse_double(row[static_cast<std::size_t>(j + 1)], expr_path,
                                         expr.line_numbers[static_cast<std::size_t>(i)]);
      require(v >= 0.0, ErrorCode::MalformedRow,
              expr_path + " line " + std::to_string(expr.line_numbers[static_cast<std::size_t>(i)]) +
                  ": negative count");
      ds.expression.values(i, j) = v;
    }
  }

  const auto coords = csv::read(coord_path);
  require(coords.header.size() == 3, ErrorCode::MalformedRow, coord_path + ": expected barcode,x,y");
  const auto coord_idx = detail::index_barcodes(coords, coord_path);
  ds.coords.resize(n, 2);
  for (Index i = 0; i < n; ++i) {
    const auto& bc = ds.expression.barcodes[static_cast<std::size_t>(i)];
    const auto it = coord_idx.find(bc);
    require(it != coord_idx.end(), ErrorCode::BarcodeMismatch, "barcode " + bc + " missing from " + coord_path);
    const auto& row = coords.rows[it->second];
    ds.coords(i, 0) = csv::parse_double(row[1], coord_path, coords.line_numbers[it->second]);
    ds.coords(i, 1) = csv::parse_double(row[2], coord_path, coords.line_numbers[it->second]);
  }

  const auto label_path = (root / "labels.csv").string();
  if (fs::exists(label_path)) {
    const auto lt = csv::read(label_path);
    require(lt.header.size() == 2, ErrorCode::MalformedRow, label_path + ": expected barcode,label");
    const auto label_idx = detail::index_barcodes(lt, label_path);
    std::vector<std::string> raw;
    std::set<std::string> names;
    for (const auto& bc : ds.expression.barcodes) {
      const auto it = label_idx.find(bc);
      require(it != label_idx.end(), ErrorCode::BarcodeMismatch, "barcode " + bc + " missing from " + label_path);
      raw.push_back(lt.rows[it->second][1]);
      names.insert(raw.back());
    }
    ds.label_names.assign(names.begin(), names.end());
    Labels labels;
    for (const auto& s : raw)
      labels.push_back(static_cast<int>(std::lower_bound(ds.label_names.begin(), ds.label_names.end(), s) -
                                        ds.label_names.begin()));
    ds.labels = std::move(labels);
  }

  const auto meta_path = (root / "meta.cfg").string();
  if (fs::exists(meta_path)) {
    const auto kv = read_key_values(meta_path);
    if (const auto it = kv.find("scale_factor"); it != kv.end())
      ds.scale_factor = csv::parse_double(it->second, meta_path, 0);
  }
  require(ds.scale_factor > 0.0, ErrorCode::MalformedRow, "scale_factor must be positive");

  const auto image_path = (root / "image.png").string();
  if (fs::exists(image_path)) ds.image = read_png(image_path);

  const auto emb_path = (root / "patch_embeddings.bin").string();
  if (fs::exists(emb_path)) {
    Matrix emb = read_embeddings(emb_path);
    require(emb.rows() == n, ErrorCode::EmbeddingShapeMismatch,
            emb_path + ": " + std::to_string(emb.rows()) + " rows for " + std::to_string(n) + " spots");
    ds.patch_embeddings = std::move(emb);
  }
  return ds;
}

inline void write_labels_csv(const std::string& path, const std::vector<std::string>& barcodes,
                             const std::vector<std::string>& labels) {
  std::ofstream out(path);
  require(out.good(), ErrorCode::MissingFile, "cannot write " + path);
  out << "barcode,label\n";
  for (std::size_t i = 0; i < barcodes.size(); ++i) out << barcodes[i] << ',' << labels[i] << '\n';
}

/// Writes a dataset directory readable by `load_dataset`.
inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  {
    std::ofstream out(root / "expression.csv");
    require(out.good(), ErrorCode::MissingFile, "cannot write expression.csv in " + dir);
    out << "barcode";
    for (const auto& g : ds.expression.genes) out << ',' << g;
    out << '\n';
    for (Index i = 0; i < ds.spots(); ++i) {
      out << ds.expression.barcodes[static_cast<std::size_t>(i)];
      for (Index j = 0; j < ds.expression.num_genes(); ++j) out << ',' << csv::format_double(ds.expression.values(i, j));
      out << '\n';
    }
  }
  {
    std::ofstream out(root / "coords.csv");
    out << "barcode,x,y\n";
    for (Index i = 0; i < ds.spots(); ++i)
      out << ds.expression.barcodes[static_cast<std::size_t>(i)] << ',' << csv::format_double(ds.coords(i, 0)) << ','
          << csv::format_double(ds.coords(i, 1)) << '\n';
  }
  if (ds.labels) {
    std::vector<std::string> names;
    for (int l : *ds.labels)
      names.push_back(l < static_cast<int>(ds.label_names.size()) ? ds.label_names[static_cast<std::size_t>(l)]
                                                                  : std::to_string(l));
    write_labels_csv((root / "labels.csv").string(), ds.expression.barcodes, names);
  }
  {
    std::ofstream out(root / "meta.cfg");
    out << "scale_factor=" << csv::format_double(ds.scale_factor) << '\n';
  }
  if (ds.image) write_png((root / "image.png").string(), *ds.image);
  if (ds.patch_embeddings) write_embeddings((root / "patch_embeddings.bin").string(), *ds.patch_embeddings);
}

}  // namespace multist
