#pragma once

#include "mtk/models.h"

namespace mtk {

// Binary model/checkpoint container. Layout: magic "MTK1", u32 format
// version, u64-length-prefixed UTF-8 config text, then a tensor table of
// [u32 name length, name, u32 rank, u64 dims..., raw little-endian f32
// data] entries terminated by a zero name length. Tensor payloads are f32
// on disk regardless of the build's Real type.
struct ModelFile {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;  // in file order

  const Tensor* find(const std::string& name) const;
};

void writeModelFile(const std::string& path, const ModelConfig& config,
                    const std::vector<std::pair<std::string, Tensor>>& tensors);
ModelFile readModelFile(const std::string& path);

// Model save/load: every graph parameter under its own name.
void saveModel(const std::string& path, const ModelConfig& config, ExpressionGraph& g);
// Loads tensors into an existing graph's parameters (names and shapes
// must match exactly); call Model::registerParams first.
void loadParams(const ModelFile& file, ExpressionGraph& g);
// Convenience: read file, rebuild the model, materialize and fill params.
Model loadModel(const std::string& path, ExpressionGraph& g);

}  // namespace mtk
