#pragma once

#include "mtk/common.h"

#include <map>
#include <string>

namespace mtk {

// Flat "key: value" option file ('#' starts a comment, blank lines
// ignored). Values stay strings; the consumer decides types. Later layers
// (command-line flags) override these values.
using ConfigMap = std::map<std::string, std::string>;

ConfigMap readConfigFile(const std::string& path);

int64_t parseInt(const std::string& value, const std::string& key);
double parseNumber(const std::string& value, const std::string& key);
bool parseFlag(const std::string& value, const std::string& key);  // true/false/1/0

}  // namespace mtk
