#include "traceform/encoders.hpp"

#include <algorithm>

#include "traceform/errors.hpp"

namespace traceform {

using ag::Matrix;
using ag::Var;

int TokenSequence::token_of(TokenKind kind, int ui, int leaf) const {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token& tk = tokens[i];
    if (tk.kind == kind && tk.ui == ui && tk.leaf == leaf) return static_cast<int>(i);
  }
  return -1;
}

std::vector<int> TokenSequence::leaf_tokens() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const Token& tk = tokens[i];
    if ((tk.kind == TokenKind::text || tk.kind == TokenKind::vision) && tk.leaf >= 0) out.push_back(static_cast<int>(i));
  }
  return out;
}

int mandatory_tokens(bool has_query) { return 5 + (has_query ? 1 : 0); }

std::atomic<std::size_t>& truncated_link_counter() {
  static std::atomic<std::size_t> counter{0};
  return counter;
}

namespace {

BoundingBox full_box(const ScreenFeatures& s) { return BoundingBox{0, 0, s.width, s.height}; }

Token special(TokenKind kind, Segment seg, int ui, const ScreenFeatures& s) {
  Token t;
  t.kind = kind;
  t.segment = seg;
  t.ui = ui;
  t.box = full_box(s);
  return t;
}

bool flag_at(const std::vector<bool>& flags, int i) {
  return static_cast<std::size_t>(i) < flags.size() && flags[static_cast<std::size_t>(i)];
}

}  // namespace

TokenSequence compose_sequence(const SequenceInput& in) {
  if (!in.a) throw ConfigError("sequence needs a UI-A screen");
  const int mandatory = mandatory_tokens(in.query.has_value());
  if (mandatory > in.max_len) {
    throw ConfigError("max_len " + std::to_string(in.max_len) + " cannot hold the " + std::to_string(mandatory) +
                      " mandatory tokens");
  }
  if (in.query && in.query->empty()) throw DataError("referring expression is empty");
  const ScreenFeatures& A = *in.a;
  const int n_a = static_cast<int>(A.leaf_count());
  int keep_b = in.b ? static_cast<int>(in.b->leaf_count()) : 0;
  const int budget = in.max_len - mandatory;
  if (in.link_component && (*in.link_component < 0 || *in.link_component >= n_a)) {
    throw DataError("link component " + std::to_string(*in.link_component) + " outside UI-A");
  }

  std::vector<int> kept_a(static_cast<std::size_t>(n_a));
  for (int i = 0; i < n_a; ++i) kept_a[static_cast<std::size_t>(i)] = i;
  TokenSequence seq;
  auto need = [&] { return 2 * (static_cast<int>(kept_a.size()) + keep_b); };
  while (need() > budget && keep_b > 0) {
    --keep_b;
    ++seq.dropped_leaves;
  }
  while (need() > budget) {
    auto victim = kept_a.end();
    for (auto it = kept_a.end(); it != kept_a.begin();) {
      --it;
      if (!in.link_component || *it != *in.link_component) {
        victim = it;
        break;
      }
    }
    if (victim == kept_a.end()) victim = kept_a.end() - 1;  // only the link component remains
    if (in.link_component && *victim == *in.link_component) seq.link_dropped = true;
    kept_a.erase(victim);
    ++seq.dropped_leaves;
  }

  const ScreenFeatures* B = in.b;
  const int b_ui = B ? 1 : 0;
  const ScreenFeatures& b_screen = B ? *B : A;
  seq.screens[0] = in.a;
  seq.screens[1] = in.b;

  auto text_token = [](const ScreenFeatures& s, int ui, int leaf, Segment seg) {
    Token t;
    t.kind = TokenKind::text;
    t.segment = seg;
    t.ui = ui;
    t.leaf = leaf;
    t.box = s.leaves[static_cast<std::size_t>(leaf)].bounds;
    t.sentence = s.sentences[static_cast<std::size_t>(leaf)];
    t.img_slot = true;
    t.whole_screen = true;
    return t;
  };
  auto vision_token = [](const ScreenFeatures& s, int ui, int leaf, Segment seg) {
    Token t;
    t.kind = TokenKind::vision;
    t.segment = seg;
    t.ui = ui;
    t.leaf = leaf;
    t.box = s.leaves[static_cast<std::size_t>(leaf)].bounds;
    t.whole_screen = false;
    return t;
  };

  std::vector<Token>& tk = seq.tokens;
  std::vector<bool>& mf = seq.mask_flags;
  auto push = [&](Token t, bool masked = false) {
    tk.push_back(std::move(t));
    mf.push_back(masked);
  };
  push(special(TokenKind::cls, Segment::a_text, 0, A));
  for (int i : kept_a) push(text_token(A, 0, i, Segment::a_text), flag_at(in.mask_a, i));
  if (in.query) {
    Token q = special(TokenKind::text, Segment::a_text, 0, A);
    q.sentence = *in.query;
    seq.query_token = static_cast<int>(tk.size());
    push(std::move(q));
  }
  push(special(TokenKind::sep, Segment::a_text, 0, A));
  for (int i = 0; i < keep_b; ++i) push(text_token(*B, 1, i, Segment::b_text), flag_at(in.mask_b, i));
  push(special(TokenKind::sep, Segment::b_text, b_ui, b_screen));
  for (int i : kept_a) push(vision_token(A, 0, i, Segment::a_vision));
  push(special(TokenKind::sep, Segment::a_vision, 0, A));
  for (int i = 0; i < keep_b; ++i) push(vision_token(*B, 1, i, Segment::b_vision));
  push(special(TokenKind::end, Segment::b_vision, b_ui, b_screen));
  if (in.pad_to_max) {
    while (static_cast<int>(tk.size()) < in.max_len) push(Token{});
  }
  seq.attention_mask.resize(tk.size());
  for (std::size_t i = 0; i < tk.size(); ++i) seq.attention_mask[i] = tk[i].kind != TokenKind::pad;

  seq.cui_label = in.cui_label;
  if (in.link_component) {
    if (seq.link_dropped) {
      truncated_link_counter().fetch_add(1);
    } else {
      seq.link_target = seq.token_of(TokenKind::vision, 0, *in.link_component);
    }
  }
  return seq;
}

template <typename T>
Matrix<T> text_encode(const std::string& sentence, const Model<T>& model) {
  const auto& table = model.params[model.layout.text_buckets];
  Matrix<T> out = Matrix<T>::Zero(1, table.cols());
  for (const auto& [b, w] : text_buckets(sentence, static_cast<int>(table.rows()))) {
    out.row(0) += static_cast<T>(w) * table.row(b);
  }
  return out;
}

template <typename T>
Matrix<T> vision_encode(const Image& crop, const Model<T>& model) {
  const std::vector<float> f = vision_features(crop);
  Matrix<T> x(1, kVisionInput);
  for (int i = 0; i < kVisionInput; ++i) x(0, i) = static_cast<T>(f[static_cast<std::size_t>(i)]);
  Matrix<T> out = x * model.params[model.layout.vision.weight];
  out.row(0) += model.params[model.layout.vision.bias].row(0);
  return out;
}

namespace {

template <typename T>
Var stream(ag::Tape<T>& t, Var x, const StreamFusion& s) {
  Var h = ag::linear(t, x, t.param(s.proj.weight), t.param(s.proj.bias));
  return ag::layer_norm(t, h, t.param(s.norm.gain), t.param(s.norm.offset));
}

}  // namespace

template <typename T>
Var fuse_inputs(ag::Tape<T>& t, const Model<T>& model, const TokenSequence& seq, const Dropout& drop) {
  const ModelLayout& ly = model.layout;
  const int L = static_cast<int>(seq.size());
  const int text_dim = model.config.text_dim;
  const int buckets = model.config.text_buckets;

  // Text stream: sparse rows over the bucket, special and mask tables.
  std::vector<std::vector<ag::EmbedTerm<T>>> text_rows(static_cast<std::size_t>(L));
  std::vector<int> vision_index(static_cast<std::size_t>(L), -1);
  std::vector<std::vector<ag::EmbedTerm<T>>> img_rows(static_cast<std::size_t>(L));
  std::vector<const std::vector<float>*> vision_inputs;
  int whole_index[2] = {-1, -1};
  auto whole = [&](int ui) {
    if (whole_index[ui] < 0) {
      whole_index[ui] = static_cast<int>(vision_inputs.size());
      vision_inputs.push_back(&seq.screens[ui]->whole_vision);
    }
    return whole_index[ui];
  };
  Matrix<T> pos = Matrix<T>::Zero(L, kPositionalDim);
  Matrix<T> seg = Matrix<T>::Zero(L, kSegmentCount);

  for (int i = 0; i < L; ++i) {
    const auto si = static_cast<std::size_t>(i);
    const Token& tk = seq.tokens[si];
    seg(i, static_cast<int>(tk.segment)) = T(1);
    if (tk.kind == TokenKind::pad) continue;
    const ScreenFeatures& s = *seq.screens[tk.ui];
    const auto p = positional_features(tk.box, s.width, s.height);
    for (int k = 0; k < kPositionalDim; ++k) pos(i, k) = static_cast<T>(p[static_cast<std::size_t>(k)]);
    switch (tk.kind) {
      case TokenKind::cls: text_rows[si].push_back({1, static_cast<int>(SpecialRow::cls), T(1)}); break;
      case TokenKind::sep: text_rows[si].push_back({1, static_cast<int>(SpecialRow::sep), T(1)}); break;
      case TokenKind::end: text_rows[si].push_back({1, static_cast<int>(SpecialRow::end), T(1)}); break;
      case TokenKind::vision: text_rows[si].push_back({1, static_cast<int>(SpecialRow::no_text), T(1)}); break;
      case TokenKind::text:
        if (seq.mask_flags[si]) {
          text_rows[si].push_back({2, 0, T(1)});
        } else if (tk.leaf >= 0 && s.buckets == buckets) {
          for (const auto& [b, w] : s.bags[static_cast<std::size_t>(tk.leaf)]) {
            text_rows[si].push_back({0, b, static_cast<T>(w)});
          }
        } else {
          for (const auto& [b, w] : text_buckets(tk.sentence, buckets)) text_rows[si].push_back({0, b, static_cast<T>(w)});
        }
        break;
      case TokenKind::pad: break;
    }
    if (tk.whole_screen) {
      vision_index[si] = whole(tk.ui);
    } else {
      vision_index[si] = static_cast<int>(vision_inputs.size());
      vision_inputs.push_back(&s.leaf_vision[static_cast<std::size_t>(tk.leaf)]);
    }
    if (tk.img_slot) img_rows[si].push_back({0, 0, T(1)});
  }

  Var text = ag::embed_rows(t, {t.param(ly.text_buckets), t.param(ly.text_special), t.param(ly.text_mask)}, text_rows,
                            text_dim);

  Matrix<T> vin(static_cast<Eigen::Index>(vision_inputs.size()), kVisionInput);
  for (std::size_t r = 0; r < vision_inputs.size(); ++r) {
    const auto& f = *vision_inputs[r];
    if (static_cast<int>(f.size()) != kVisionInput) throw ConfigError("vision feature length mismatch");
    for (int k = 0; k < kVisionInput; ++k) vin(static_cast<Eigen::Index>(r), k) = static_cast<T>(f[static_cast<std::size_t>(k)]);
  }
  Var venc = ag::linear(t, t.constant(std::move(vin)), t.param(ly.vision.weight), t.param(ly.vision.bias));
  Var vis = ag::gather_rows(t, venc, vision_index);
  vis = ag::add(t, vis, ag::embed_rows(t, {t.param(ly.vision_img)}, img_rows, model.config.vision_dim));

  Var sum = ag::add(t, stream(t, text, ly.text_stream), stream(t, vis, ly.vision_stream));
  sum = ag::add(t, sum, stream(t, t.constant(std::move(pos)), ly.position_stream));
  sum = ag::add(t, sum, stream(t, t.constant(std::move(seg)), ly.segment_stream));
  sum = ag::mask_rows(t, sum, seq.attention_mask);
  return dropout(t, sum, drop, 0);
}

template Matrix<float> text_encode<float>(const std::string&, const Model<float>&);
template Matrix<double> text_encode<double>(const std::string&, const Model<double>&);
template Matrix<float> vision_encode<float>(const Image&, const Model<float>&);
template Matrix<double> vision_encode<double>(const Image&, const Model<double>&);
template Var fuse_inputs<float>(ag::Tape<float>&, const Model<float>&, const TokenSequence&, const Dropout&);
template Var fuse_inputs<double>(ag::Tape<double>&, const Model<double>&, const TokenSequence&, const Dropout&);

}  // namespace traceform
