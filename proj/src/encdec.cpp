#include "mtk/encdec.h"

namespace mtk {

void DecoderState::select(ExpressionGraph& g, const std::vector<int64_t>& rows) {
  (void)g;
  std::vector<int64_t> mapped;
  mapped.reserve(rows.size());
  for(auto r : rows) {
    if(r < 0 || r >= (int64_t)rowToSentence.size())
      throw ContractError("select: hypothesis index " + std::to_string(r) + " out of range");
    mapped.push_back(rowToSentence[(size_t)r]);
  }
  rowToSentence = std::move(mapped);
  logits = NodeRef();  // logits refer to pre-selection rows
}

NodeRef gatherStateRows(ExpressionGraph& g, NodeRef x, const std::vector<int64_t>& rows) {
  int64_t cols = x.shape.size() / x.shape[0];
  NodeRef flat = g.reshape(x, Shape({x.shape[0], cols}));
  NodeRef picked = g.gatherRows(flat, rows);
  std::vector<int64_t> dims = x.shape.dims();
  dims[0] = (int64_t)rows.size();
  return g.reshape(picked, Shape(dims));
}

IntMat shiftTargets(const IntMat& targets) {
  IntMat in(targets.rows, targets.cols);
  for(int64_t r = 0; r < targets.rows; ++r) {
    in.at(r, 0) = Vocabulary::kEos;
    for(int64_t c = 1; c < targets.cols; ++c)
      in.at(r, c) = targets.at(r, c - 1);
  }
  return in;
}

}  // namespace mtk
