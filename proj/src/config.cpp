#include "mtk/config.h"

#include <fstream>
#include <stdexcept>

namespace mtk {

namespace {

std::string strip(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if(a == std::string::npos)
    return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigMap readConfigFile(const std::string& path) {
  std::ifstream in(path);
  if(!in)
    throw IoError("cannot open config file: " + path);
  ConfigMap out;
  std::string line;
  size_t lineNo = 0;
  while(std::getline(in, line)) {
    ++lineNo;
    size_t hash = line.find('#');
    if(hash != std::string::npos)
      line = line.substr(0, hash);
    line = strip(line);
    if(line.empty())
      continue;
    size_t colon = line.find(':');
    if(colon == std::string::npos)
      throw DataError("malformed config line " + std::to_string(lineNo) + " in " + path +
                      ": " + line);
    std::string key = strip(line.substr(0, colon));
    std::string value = strip(line.substr(colon + 1));
    if(key.empty())
      throw DataError("empty key on config line " + std::to_string(lineNo) + " in " + path);
    if(out.count(key))
      throw DataError("duplicate config key '" + key + "' in " + path);
    out[key] = value;
  }
  return out;
}

int64_t parseInt(const std::string& value, const std::string& key) {
  try {
    size_t used = 0;
    int64_t v = std::stoll(value, &used);
    if(used != value.size())
      throw std::invalid_argument(value);
    return v;
  } catch(const std::exception&) {
    throw DataError("option '" + key + "' expects an integer, got '" + value + "'");
  }
}

double parseNumber(const std::string& value, const std::string& key) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if(used != value.size())
      throw std::invalid_argument(value);
    return v;
  } catch(const std::exception&) {
    throw DataError("option '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parseFlag(const std::string& value, const std::string& key) {
  if(value == "true" || value == "1")
    return true;
  if(value == "false" || value == "0")
    return false;
  throw DataError("option '" + key + "' expects true/false, got '" + value + "'");
}

}  // namespace mtk
