#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dar {

inline constexpr int kDefaultClasses = 5;

struct VoxelCoord {
  int x = 0;
  int y = 0;
  int z = 0;
  friend bool operator==(const VoxelCoord&, const VoxelCoord&) = default;
};

/// One annotated nodule: identity, where its volume lives, and the raw
/// per-annotator malignancy scores (1..Q, kept verbatim including repeats).
struct AnnotationRecord {
  std::string id;
  std::string volume_ref;
  std::vector<int> scores;
  VoxelCoord center;
};

enum class LabelKind { onehot, candidate, complement };

const char* to_string(LabelKind kind);

/// Q-dimensional binary label mask. The constructor enforces the per-kind
/// sum invariants, so a LabelVector that exists is always well formed.
class LabelVector {
 public:
  LabelVector(LabelKind kind, std::vector<double> values);

  /// Class indices are 1-based throughout the public API.
  static LabelVector onehot(int cls, int q);
  static LabelVector candidate(std::span<const int> scores, int q);

  LabelKind kind() const noexcept { return kind_; }
  int classes() const noexcept { return static_cast<int>(values_.size()); }
  const std::vector<double>& values() const noexcept { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

  /// 1-based index of the hot entry; only valid for onehot labels.
  int hot_class() const;

 private:
  LabelKind kind_;
  std::vector<double> values_;
};

struct LabeledRecord {
  AnnotationRecord record;
  LabelVector label;
};

struct PartitionedDataset {
  int q = kDefaultClasses;
  std::vector<LabeledRecord> cr;  // >= 2 scores, all equal; onehot
  std::vector<LabeledRecord> ic;  // >= 2 scores, not all equal; candidate
  std::vector<LabeledRecord> lr;  // exactly one score; onehot

  std::size_t n1() const noexcept { return cr.size(); }
  std::size_t n2() const noexcept { return ic.size(); }
  std::size_t n3() const noexcept { return lr.size(); }
};

/// Reads a JSON Lines manifest. Volume references are resolved against the
/// manifest's directory. Blank lines are skipped.
std::vector<AnnotationRecord> load_manifest(const std::filesystem::path& path,
                                            int q = kDefaultClasses);

/// Writes records back as JSON Lines, with volume paths made relative to the
/// manifest's directory when possible.
void write_manifest(const std::filesystem::path& path, std::span<const AnnotationRecord> records);

PartitionedDataset partition_dataset(std::span<const AnnotationRecord> records,
                                     int q = kDefaultClasses);

LabelVector encode_complement(const LabelVector& candidate);

/// Rounded mean of the scores, exact .5 ties going to the higher class.
int mean_proxy_label(std::span<const int> scores, int q = kDefaultClasses);

}  // namespace dar
