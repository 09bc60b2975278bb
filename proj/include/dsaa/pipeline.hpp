#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "dsaa/adapter.hpp"
#include "dsaa/encoder.hpp"
#include "dsaa/text.hpp"

namespace dsaa {

/// One caption run through the text side.
struct CaptionEncoding {
  text::TokenSeq tokens;
  text::AttributeSpanSet spans;
  std::size_t prefix_rows = 0;
  EncodeResult result;
  /// Mean final hidden state over attribute token rows; undefined when the
  /// caption has no attribute spans.
  Tensor attr_mean;

  const Tensor& pooled() const { return result.pooled; }
};

/// Tokenizer, attribute extraction, optional DSAA stages and the frozen
/// encoder. With dsaa == nullptr this is the plain encoder.
struct TextPipeline {
  const text::Vocabulary* vocab = nullptr;
  const EncoderConfig* enc_cfg = nullptr;
  const EncoderWeights* encoder = nullptr;
  const DsaaParams* dsaa = nullptr;
  text::ExtractionConfig extraction;

  CaptionEncoding encode(std::string_view caption, bool record_kv = false) const;
  /// Same, with externally supplied attribute phrases.
  CaptionEncoding encode_with(std::string_view caption, const std::vector<std::string>& phrases,
                              bool record_kv = false) const;
};

}  // namespace dsaa
