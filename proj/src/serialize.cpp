#include "mtk/serialize.h"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace mtk {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'K', '1'};
constexpr uint32_t kVersion = 1;

template <typename T>
void writeRaw(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T readRaw(std::istream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if(!in)
    throw IoError("truncated model file: " + path);
  return v;
}

}  // namespace

const Tensor* ModelFile::find(const std::string& name) const {
  for(auto& [n, t] : tensors)
    if(n == name)
      return &t;
  return nullptr;
}

void writeModelFile(const std::string& path, const ModelConfig& config,
                    const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if(!out)
    throw IoError("cannot write model file: " + path);
  out.write(kMagic, 4);
  writeRaw<uint32_t>(out, kVersion);
  std::string cfg = config.serialize();
  writeRaw<uint64_t>(out, (uint64_t)cfg.size());
  out.write(cfg.data(), (std::streamsize)cfg.size());
  for(auto& [name, t] : tensors) {
    if(name.empty())
      throw ContractError("tensor names in a model file must be non-empty");
    writeRaw<uint32_t>(out, (uint32_t)name.size());
    out.write(name.data(), (std::streamsize)name.size());
    writeRaw<uint32_t>(out, (uint32_t)t.shape().rank());
    for(auto d : t.shape().dims())
      writeRaw<uint64_t>(out, (uint64_t)d);
    for(int64_t i = 0; i < t.size(); ++i)
      writeRaw<float>(out, (float)t.at(i));
  }
  writeRaw<uint32_t>(out, 0);  // end marker
  if(!out)
    throw IoError("write failed: " + path);
}

ModelFile readModelFile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if(!in)
    throw IoError("cannot open model file: " + path);
  char magic[4];
  in.read(magic, 4);
  if(!in || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("not a model file (bad magic): " + path);
  uint32_t version = readRaw<uint32_t>(in, path);
  if(version != kVersion)
    throw DataError("unsupported model file version " + std::to_string(version) + ": " + path);
  uint64_t cfgLen = readRaw<uint64_t>(in, path);
  std::string cfgText(cfgLen, '\0');
  in.read(cfgText.data(), (std::streamsize)cfgLen);
  if(!in)
    throw IoError("truncated model file: " + path);
  ModelFile file;
  file.config = ModelConfig::parse(cfgText);
  for(;;) {
    uint32_t nameLen = readRaw<uint32_t>(in, path);
    if(nameLen == 0)
      break;
    std::string name(nameLen, '\0');
    in.read(name.data(), nameLen);
    uint32_t rank = readRaw<uint32_t>(in, path);
    if(rank < 1 || rank > 4)
      throw DataError("tensor " + name + " has invalid rank in " + path);
    std::vector<int64_t> dims;
    for(uint32_t i = 0; i < rank; ++i)
      dims.push_back((int64_t)readRaw<uint64_t>(in, path));
    Tensor t((Shape(dims)));
    for(int64_t i = 0; i < t.size(); ++i)
      t.at(i) = (Real)readRaw<float>(in, path);
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  return file;
}

void saveModel(const std::string& path, const ModelConfig& config, ExpressionGraph& g) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for(auto& name : g.paramNames())
    tensors.emplace_back(name, g.paramValue(name));
  writeModelFile(path, config, tensors);
}

void loadParams(const ModelFile& file, ExpressionGraph& g) {
  size_t matched = 0;
  for(auto& [name, t] : file.tensors) {
    if(name.find('.') != std::string::npos && !g.hasParam(name))
      continue;  // auxiliary tensors (optimizer state etc.) may ride along
    if(!g.hasParam(name))
      throw DataError("model file tensor has no matching parameter: " + name);
    Tensor& dst = g.paramValue(name);
    if(dst.shape() != t.shape())
      throw DataError("parameter " + name + " shape mismatch: file " + t.shape().str() +
                      " vs model " + dst.shape().str());
    dst.copyFrom(t);
    ++matched;
  }
  if(matched != g.paramNames().size())
    throw DataError("model file is missing parameters (" + std::to_string(matched) + " of " +
                    std::to_string(g.paramNames().size()) + " found)");
}

Model loadModel(const std::string& path, ExpressionGraph& g) {
  ModelFile file = readModelFile(path);
  Model m = buildModel(file.config);
  m.registerParams(g);
  loadParams(file, g);
  return m;
}

}  // namespace mtk
