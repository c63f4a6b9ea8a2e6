#pragma once

#include <atomic>
#include <optional>
#include <string>
#include <vector>

#include "traceform/autograd.hpp"
#include "traceform/features.hpp"
#include "traceform/model.hpp"

namespace traceform {

enum class TokenKind { cls, sep, end, text, vision, pad };

enum class Segment : int { a_text = 0, b_text = 1, a_vision = 2, b_vision = 3, padding = 4 };

struct Token {
  TokenKind kind = TokenKind::pad;
  Segment segment = Segment::padding;
  int ui = -1;    // 0 = UI-A, 1 = UI-B; -1 for PAD
  int leaf = -1;  // origin leaf for TEXT/VISION tokens of a component
  BoundingBox box;
  std::string sentence;      // TEXT tokens
  bool img_slot = false;     // vision slot holds the [IMG] placeholder plus the screenshot
  bool whole_screen = true;  // vision input is the UI's whole screenshot rather than a crop
};

/// [CLS] A-text [SEP] B-text [SEP] A-vision [SEP] B-vision [END] PAD...
struct TokenSequence {
  std::vector<Token> tokens;
  std::vector<bool> attention_mask;
  std::vector<bool> mask_flags;
  std::optional<int> link_target;
  std::optional<bool> cui_label;
  const ScreenFeatures* screens[2] = {nullptr, nullptr};
  int query_token = -1;  // extra TEXT token of a referring expression
  int dropped_leaves = 0;
  bool link_dropped = false;

  std::size_t size() const { return tokens.size(); }
  bool two_ui() const { return screens[1] != nullptr; }
  /// Index of the token of `kind` originating from (ui, leaf), or -1.
  int token_of(TokenKind kind, int ui, int leaf) const;
  /// TEXT and VISION tokens that originate from a leaf.
  std::vector<int> leaf_tokens() const;
};

struct SequenceInput {
  const ScreenFeatures* a = nullptr;
  const ScreenFeatures* b = nullptr;  // null for single-UI tasks
  std::optional<int> link_component;  // leaf of UI-A
  std::optional<bool> cui_label;
  std::vector<bool> mask_a, mask_b;  // per leaf; empty means unmasked
  std::optional<std::string> query;
  int max_len = 128;
  bool pad_to_max = false;
};

/// Number of tokens that survive with zero leaves.
int mandatory_tokens(bool has_query);

/// Truncation drops UI-B's tail leaves, then UI-A's tail leaves other than the link component,
/// and only then the link component itself (clearing the link target).
TokenSequence compose_sequence(const SequenceInput& in);

/// Total number of sequences whose link component was lost to truncation.
std::atomic<std::size_t>& truncated_link_counter();

/// Sentence vector before the fusion map: bucket bag times the text table (1 x D_t).
template <typename T>
ag::Matrix<T> text_encode(const std::string& sentence, const Model<T>& model);

/// Resized crop times the vision map plus bias (1 x D_v).
template <typename T>
ag::Matrix<T> vision_encode(const Image& crop, const Model<T>& model);

/// Four-stream fusion, L x hidden, PAD rows zero.
template <typename T>
ag::Var fuse_inputs(ag::Tape<T>& t, const Model<T>& model, const TokenSequence& seq, const Dropout& drop);

}  // namespace traceform
