#include "dar/objectives.hpp"

namespace dar {

BatchMatrix<double> label_matrix(std::span<const LabelVector> labels, LabelKind kind) {
  if (labels.empty()) return BatchMatrix<double>(0, 0);
  const int q = labels.front().classes();
  BatchMatrix<double> m(static_cast<Eigen::Index>(labels.size()), q);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& l = labels[i];
    if (l.kind() != kind) {
      throw DataError(std::string("label kind mismatch: expected ") + to_string(kind) + ", got " + to_string(l.kind()));
    }
    if (l.classes() != q) throw DataError("label vectors disagree on Q");
    for (int c = 0; c < q; ++c) m(static_cast<Eigen::Index>(i), c) = l[static_cast<std::size_t>(c)];
  }
  return m;
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"mu", c.mu}, {"delta", c.delta}, {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c.mu = j.value("mu", c.mu);
  c.delta = j.value("delta", c.delta);
  c.eps = j.value("eps", c.eps);
}

}  // namespace dar
