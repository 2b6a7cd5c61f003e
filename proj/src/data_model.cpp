#include "dar/data_model.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <json.hpp>

#include "dar/error.hpp"

namespace dar {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* to_string(LabelKind kind) {
  switch (kind) {
    case LabelKind::onehot:
      return "onehot";
    case LabelKind::candidate:
      return "candidate";
    case LabelKind::complement:
      return "complement";
  }
  return "unknown";
}

LabelVector::LabelVector(LabelKind kind, std::vector<double> values)
    : kind_(kind), values_(std::move(values)) {
  const int q = classes();
  if (q < 1) throw DataError("label vector must have at least one class");
  for (double v : values_) {
    if (v != 0.0 && v != 1.0) throw DataError("label vector entries must be 0 or 1");
  }
  const double sum = std::accumulate(values_.begin(), values_.end(), 0.0);
  const auto bad = [&](const char* rule) {
    throw DataError(std::string(to_string(kind_)) + " label violates " + rule + " (sum " +
                    std::to_string(sum) + ")");
  };
  switch (kind_) {
    case LabelKind::onehot:
      if (sum != 1.0) bad("sum == 1");
      break;
    case LabelKind::candidate:
      if (sum < 2.0 || sum > q) bad("sum in [2, Q]");
      break;
    case LabelKind::complement:
      if (sum > q - 2) bad("sum in [0, Q-2]");
      break;
  }
}

LabelVector LabelVector::onehot(int cls, int q) {
  if (cls < 1 || cls > q) throw DataError("class " + std::to_string(cls) + " outside 1.." + std::to_string(q));
  std::vector<double> v(static_cast<std::size_t>(q), 0.0);
  v[static_cast<std::size_t>(cls - 1)] = 1.0;
  return LabelVector(LabelKind::onehot, std::move(v));
}

LabelVector LabelVector::candidate(std::span<const int> scores, int q) {
  std::vector<double> v(static_cast<std::size_t>(q), 0.0);
  for (int s : scores) {
    if (s < 1 || s > q) throw DataError("score " + std::to_string(s) + " outside 1.." + std::to_string(q));
    v[static_cast<std::size_t>(s - 1)] = 1.0;
  }
  return LabelVector(LabelKind::candidate, std::move(v));
}

int LabelVector::hot_class() const {
  if (kind_ != LabelKind::onehot) throw DataError("hot_class() requires a onehot label");
  return static_cast<int>(std::find(values_.begin(), values_.end(), 1.0) - values_.begin()) + 1;
}

std::vector<AnnotationRecord> load_manifest(const fs::path& path, int q) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();

  std::vector<AnnotationRecord> records;
  std::unordered_set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(where + "parse error: " + e.what());
    }
    if (!j.is_object()) throw DataError(where + "record is not a JSON object");
    for (const char* key : {"id", "volume", "annotations", "center"}) {
      if (!j.contains(key)) throw DataError(where + "missing required key '" + key + "'");
    }
    AnnotationRecord rec;
    try {
      rec.id = j.at("id").get<std::string>();
      rec.volume_ref = (base / j.at("volume").get<std::string>()).lexically_normal().string();
      rec.scores = j.at("annotations").get<std::vector<int>>();
      const auto c = j.at("center").get<std::vector<int>>();
      if (c.size() != 3) throw DataError(where + "center must have three coordinates");
      rec.center = {c[0], c[1], c[2]};
    } catch (const json::exception& e) {
      throw DataError(where + "malformed record: " + e.what());
    }
    if (rec.scores.empty()) throw DataError(where + "record '" + rec.id + "' has no annotations");
    for (int s : rec.scores) {
      if (s < 1 || s > q) {
        throw DataError(where + "score " + std::to_string(s) + " out of range 1.." + std::to_string(q));
      }
    }
    if (!seen.insert(rec.id).second) throw DataError(where + "duplicate id '" + rec.id + "'");
    records.push_back(std::move(rec));
  }
  return records;
}

void write_manifest(const fs::path& path, std::span<const AnnotationRecord> records) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  for (const auto& r : records) {
    fs::path vol(r.volume_ref);
    std::error_code ec;
    const fs::path rel = fs::relative(vol, base, ec);
    json j;
    j["id"] = r.id;
    j["volume"] = (ec || rel.empty()) ? vol.generic_string() : rel.generic_string();
    j["annotations"] = r.scores;
    j["center"] = {r.center.x, r.center.y, r.center.z};
    out << j.dump() << '\n';
  }
}

PartitionedDataset partition_dataset(std::span<const AnnotationRecord> records, int q) {
  PartitionedDataset out;
  out.q = q;
  for (const auto& r : records) {
    if (r.scores.empty()) throw DataError("record '" + r.id + "' has no annotations");
    for (int s : r.scores) {
      if (s < 1 || s > q) throw DataError("record '" + r.id + "' has score out of range");
    }
    if (r.scores.size() == 1) {
      out.lr.push_back({r, LabelVector::onehot(r.scores.front(), q)});
    } else if (std::all_of(r.scores.begin(), r.scores.end(), [&](int s) { return s == r.scores.front(); })) {
      out.cr.push_back({r, LabelVector::onehot(r.scores.front(), q)});
    } else {
      out.ic.push_back({r, LabelVector::candidate(r.scores, q)});
    }
  }
  return out;
}

LabelVector encode_complement(const LabelVector& candidate) {
  if (candidate.kind() != LabelKind::candidate) {
    throw DataError(std::string("encode_complement expects a candidate label, got ") + to_string(candidate.kind()));
  }
  std::vector<double> v(candidate.values());
  for (double& x : v) x = 1.0 - x;
  return LabelVector(LabelKind::complement, std::move(v));
}

int mean_proxy_label(std::span<const int> scores, int q) {
  if (scores.empty()) throw DataError("mean_proxy_label needs at least one score");
  long long sum = 0;
  for (int s : scores) {
    if (s < 1 || s > q) throw DataError("score " + std::to_string(s) + " out of range");
    sum += s;
  }
  const long long n = static_cast<long long>(scores.size());
  // floor(sum/n + 1/2) in integers: no floating-point tie ambiguity.
  const long long rounded = (2 * sum + n) / (2 * n);
  return static_cast<int>(std::clamp<long long>(rounded, 1, q));
}

}  // namespace dar
