#include "dsaa/pipeline.hpp"

#include <algorithm>

#include "dsaa/ops.hpp"

namespace dsaa {

CaptionEncoding TextPipeline::encode(std::string_view caption, bool record_kv) const {
  std::vector<std::string> phrases;
  if (dsaa) phrases = text::extract_attributes(extraction, caption).phrases;
  return encode_with(caption, phrases, record_kv);
}

CaptionEncoding TextPipeline::encode_with(std::string_view caption, const std::vector<std::string>& phrases,
                                          bool record_kv) const {
  CaptionEncoding out;
  out.tokens = text::tokenize(*vocab, caption, enc_cfg->max_len);
  if (dsaa && !phrases.empty()) out.spans = text::match_spans(*vocab, out.tokens, phrases).spans;

  const auto positions = out.spans.attribute_positions();
  const std::size_t k = (dsaa && dsaa->cfg.use_apa) ? positions.size() : 0;
  out.prefix_rows = k;

  Tensor caption_rows = embed(*encoder, out.tokens, k);
  Tensor input = caption_rows;
  if (k > 0) {
    Tensor prefixes = build_prefixes(dsaa->apa, caption_rows, out.spans);
    std::vector<std::size_t> slots(k);
    for (std::size_t i = 0; i < k; ++i) slots[i] = i;
    prefixes = ops::add(prefixes, ops::gather_rows(encoder->pos_emb, slots));
    input = ops::concat_rows({prefixes, caption_rows});
  }

  EncodeOptions opt;
  opt.prefix_rows = k;
  opt.record_kv = record_kv;
  ScalePair scales;
  if (dsaa && dsaa->cfg.use_modulator && !positions.empty()) {
    scales = modulation_scales(dsaa->mod, condition_vector(caption_rows, out.spans));
    for (std::size_t p : positions) opt.attr_rows.push_back(k + p - 1);
    if (dsaa->cfg.modulate_prefix) {
      for (std::size_t i = 0; i < k; ++i) opt.attr_rows.push_back(i);
      std::sort(opt.attr_rows.begin(), opt.attr_rows.end());
    }
    opt.scales = &scales;
  }
  out.result = dsaa::encode(*encoder, *enc_cfg, input, opt);

  if (!positions.empty()) {
    std::vector<std::size_t> rows;
    for (std::size_t p : positions) rows.push_back(k + p - 1);
    out.attr_mean = ops::mean_rows(ops::gather_rows(out.result.hidden, rows));
  }
  return out;
}

}  // namespace dsaa
