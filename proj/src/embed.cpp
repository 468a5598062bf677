#include "kt/embed.hpp"

namespace kt {

EmbeddingVector embed_text(InferenceBackend& backend, const std::string& model_name,
                           const std::string& text, DimensionLatch& latch) {
  if (text.empty()) throw std::invalid_argument("cannot embed empty text");
  std::vector<float> raw;
  try {
    raw = backend.embed(model_name, text);
  } catch (const BackendError& e) {
    throw EmbeddingError(std::string("embedding backend failed: ") + e.what(), e.retriable());
  }
  if (raw.empty()) throw EmbeddingError("backend returned an empty embedding");
  const Eigen::Map<const EmbeddingVector> view(raw.data(), static_cast<Eigen::Index>(raw.size()));
  EmbeddingVector unit = normalized(view);
  latch.enforce(unit.size());
  return unit;
}

}  // namespace kt
