#include "helix/backbone.hpp"

#include <algorithm>
#include <optional>
#include <cctype>
#include <cmath>
#include <sstream>

#include "helix/errors.hpp"
#include "helix/ops.hpp"

namespace helix::backbone {

using ad::Tensor;
namespace at = helix::attention;

// ---------------------------------------------------------------------------
// Placement and configuration

BlockPlacement BlockPlacement::preset(const std::string& name, int depth) {
  std::set<int> all, alternate;
  const std::set<int> none;
  for (int i = 0; i < depth; ++i) {
    all.insert(i);
    if (i % 2 == 0) alternate.insert(i);
  }
  if (name == "default") return {all, alternate, all, alternate};
  if (name == "none") return {none, none, none, none};
  // Columns: DDA encoder, DDA decoder, SSM encoder, SSM decoder.
  if (name == "tab7-1") return {all, none, all, none};
  if (name == "tab7-2") return {alternate, none, alternate, none};
  if (name == "tab7-3") return {alternate, alternate, alternate, alternate};
  if (name == "tab7-4") return {all, all, alternate, alternate};
  throw ConfigError("unknown placement preset '" + name + "'");
}

const std::vector<std::string>& BlockPlacement::preset_names() {
  static const std::vector<std::string> names{"default", "none", "tab7-1", "tab7-2", "tab7-3", "tab7-4"};
  return names;
}

void BlockPlacement::validate(int depth) const {
  for (const auto* set : {&dda_encoder, &dda_decoder, &ssm_encoder, &ssm_decoder})
    for (int i : *set)
      if (i < 0 || i >= depth)
        throw ConfigError("placement index " + std::to_string(i) + " outside [0, " + std::to_string(depth) + ")");
}

std::string BlockPlacement::describe() const {
  auto list = [](const std::set<int>& s) {
    std::string out = "{";
    for (int i : s) out += (out.size() > 1 ? "," : "") + std::to_string(i);
    return out + "}";
  };
  return "dda_enc=" + list(dda_encoder) + " dda_dec=" + list(dda_decoder) + " ssm_enc=" + list(ssm_encoder) +
         " ssm_dec=" + list(ssm_decoder);
}

void BackboneConfig::validate() const {
  if (image_size < 1 || base_channels < 1 || depth < 1 || heads < 1 || d_text < 1 || vocab_size < 1)
    throw ConfigError("backbone sizes must be positive");
  if (static_cast<int>(channel_mult.size()) != depth)
    throw ConfigError("channel_mult needs one entry per level (" + std::to_string(depth) + ")");
  if (image_size % (1 << depth) != 0)
    throw ConfigError("image_size " + std::to_string(image_size) + " not divisible by 2^depth");
  if (gn_groups < 2 || gn_groups % 2 != 0) throw ConfigError("gn_groups must be even so groups respect domains");
  for (int l = 0; l < depth; ++l) {
    if (channel_mult[static_cast<std::size_t>(l)] < 1) throw ConfigError("channel multipliers must be positive");
    if (channels(l) % (gn_groups / 2) != 0 || channels(l) % heads != 0)
      throw ConfigError("level " + std::to_string(l) + " channels not divisible by norm groups or heads");
  }
}

BackboneConfig BackboneConfig::micro() {
  BackboneConfig c;
  c.image_size = 8;
  c.base_channels = 4;
  c.depth = 2;
  c.channel_mult = {1, 2};
  c.d_text = 4;
  return c;
}

// ---------------------------------------------------------------------------
// Prompt vocabulary

PromptVocabulary::PromptVocabulary() : tokens_{kOov} { index_[kOov] = 0; }

std::vector<std::string> PromptVocabulary::tokenize(const std::string& prompt) {
  std::string lower(prompt);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  std::istringstream in(lower);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

PromptVocabulary PromptVocabulary::from_tokens(std::vector<std::string> tokens) {
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  PromptVocabulary v;
  for (auto& t : tokens) {
    if (t == kOov) continue;
    v.index_[t] = static_cast<std::int64_t>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

PromptVocabulary PromptVocabulary::from_prompts(const std::vector<std::string>& prompts) {
  std::vector<std::string> all;
  for (const auto& p : prompts)
    for (auto& t : tokenize(p)) all.push_back(t);
  return from_tokens(std::move(all));
}

std::int64_t PromptVocabulary::index_of(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? 0 : it->second;
}

std::vector<std::int64_t> PromptVocabulary::encode(const std::string& prompt) const {
  auto toks = tokenize(prompt);
  if (toks.empty()) throw ValidationError("empty prompt");
  std::vector<std::int64_t> ids;
  for (const auto& t : toks) ids.push_back(index_of(t));
  return ids;
}

TextEmbedding embed_prompt(const std::string& prompt, const PromptVocabulary& vocab, const Tensor& table) {
  const auto ids = vocab.encode(prompt);
  if (table.ndim() != 2 || table.dim(0) != vocab.size())
    throw DimensionError("embedding table " + ad::to_string(table.shape()) + " does not match vocabulary of " +
                         std::to_string(vocab.size()));
  return {ad::gather_rows(table, ids), prompt};
}

Tensor timestep_embedding(std::span<const int> t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ConfigError("timestep embedding dimension must be even");
  const int half = dim / 2;
  std::vector<double> out;
  out.reserve(t.size() * static_cast<std::size_t>(dim));
  for (int ti : t) {
    for (int i = 0; i < half; ++i) out.push_back(std::sin(ti * std::exp(-std::log(10000.0) * i / half)));
    for (int i = 0; i < half; ++i) out.push_back(std::cos(ti * std::exp(-std::log(10000.0) * i / half)));
  }
  return Tensor::from({static_cast<std::int64_t>(t.size()), dim}, std::move(out));
}

// ---------------------------------------------------------------------------
// Model construction

namespace {

struct Builder {
  ParameterStore& store;
  Rng& rng;

  HelixUNet::Conv conv(const std::string& name, std::int64_t cout, std::int64_t cin, int k, int groups) {
    const std::int64_t area = k * k;
    HelixUNet::Conv c;
    c.w = store.create(name + ".w", {cout, cin / groups, k, k}, InitKind::uniform_scaled, rng,
                       cin / groups * area, cout / groups * area);
    c.b = store.create(name + ".b", {cout}, InitKind::zero, rng);
    c.groups = groups;
    c.pad = k / 2;
    return c;
  }
  HelixUNet::Norm norm(const std::string& name, std::int64_t channels) {
    return {store.create(name + ".gamma", {channels}, InitKind::zero, rng),
            store.create(name + ".beta", {channels}, InitKind::zero, rng)};
  }
  Tensor dense(const std::string& name, std::int64_t in, std::int64_t out) {
    return store.create(name, {in, out}, InitKind::uniform_scaled, rng, in, out);
  }
  Tensor zeros(const std::string& name, ad::Shape shape) { return store.create(name, std::move(shape), InitKind::zero, rng); }
};

}  // namespace

HelixUNet::HelixUNet(BackboneConfig cfg, BlockPlacement placement, PromptVocabulary vocab, std::uint64_t seed)
    : cfg_(std::move(cfg)), placement_(std::move(placement)), vocab_(std::move(vocab)) {
  cfg_.vocab_size = static_cast<int>(vocab_.size());
  cfg_.validate();
  placement_.validate(cfg_.depth);
  build(seed);
}

void HelixUNet::build(std::uint64_t seed) {
  Rng rng(seed);
  Builder b{store_, rng};
  const int td = cfg_.time_dim();
  const int cnn_groups = cfg_.ungrouped_debug ? 1 : 2;

  text_table_ = store_.create("text.table", {vocab_.size(), cfg_.d_text}, InitKind::normal_scaled, rng, 1, 1);
  time_w1_ = b.dense("time.fc1.w", td, td);
  time_b1_ = b.zeros("time.fc1.b", {td});
  time_w2_ = b.dense("time.fc2.w", td, td);
  time_b2_ = b.zeros("time.fc2.b", {td});

  const int c0 = cfg_.channels(0);
  in_img_ = b.conv("in.img", c0, 3, 3, 1);
  in_ann_ = b.conv("in.ann", c0, 2, 3, 1);  // noisy annotation + raw mask

  for (int l = 0; l < cfg_.depth; ++l)
    cond_convs_.push_back(b.conv("cond." + std::to_string(l), cfg_.channels(l), l == 0 ? 3 : cfg_.channels(l - 1), 3, 1));

  auto res = [&](const std::string& name, int cin, int cout) {
    Res r;
    r.n1 = b.norm(name + ".norm1", 2 * cin);
    r.c1 = b.conv(name + ".conv1", 2 * cout, 2 * cin, 3, cnn_groups);
    r.temb_w = b.dense(name + ".temb.w", td, 4 * cout);
    r.temb_b = b.zeros(name + ".temb.b", {4 * cout});
    r.n2 = b.norm(name + ".norm2", 2 * cout);
    r.c2 = b.conv(name + ".conv2", 2 * cout, 2 * cout, 3, cnn_groups);
    if (cin != cout) r.skip = b.conv(name + ".skip", 2 * cout, 2 * cin, 1, cnn_groups);
    return r;
  };
  auto dda = [&](const std::string& name, int c) {
    Dda d;
    for (auto [branch, proj] : {std::pair{"img", &d.img}, std::pair{"ann", &d.ann}}) {
      const std::string p = name + ".dda." + branch;
      proj->wq = b.dense(p + ".wq", c, c);
      proj->wk = b.dense(p + ".wk", c, c);
      proj->wv = b.dense(p + ".wv", c, c);
      proj->heads = cfg_.heads;
      if (std::string(branch) == "img") {
        d.zeta.weight = b.zeros(p + ".zeta.w", {c, c, 1, 1});
        d.zeta.bias = b.zeros(p + ".zeta.b", {c});
      }
    }
    return d;
  };
  auto ssm = [&](const std::string& name, int c) {
    Ssm s;
    const std::string p = name + ".ssm";
    s.proj.wq_image = b.dense(p + ".wq_img", c, c);
    s.proj.wq_annot = b.dense(p + ".wq_ann", c, c);
    s.proj.wk_text = b.dense(p + ".wk_text", cfg_.d_text, c);
    s.proj.wv_text = b.dense(p + ".wv_text", cfg_.d_text, c);
    s.eta.w2 = b.zeros(p + ".eta2.w", {2, 2, 1, 1});
    s.eta.b2 = b.zeros(p + ".eta2.b", {2});
    s.eta.w3 = b.zeros(p + ".eta3.w", {2, 3, 1, 1});
    s.eta.b3 = b.zeros(p + ".eta3.b", {2});
    return s;
  };

  int prev = c0;
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string name = "enc." + std::to_string(l);
    Stage st;
    st.channels = cfg_.channels(l);
    st.res = res(name + ".res", prev, st.channels);
    st.has_dda = placement_.dda_encoder.count(l) > 0;
    st.has_ssm = placement_.ssm_encoder.count(l) > 0;
    if (st.has_dda) st.dda = dda(name, st.channels);
    if (st.has_ssm) st.ssm = ssm(name, st.channels);
    encoder_.push_back(std::move(st));
    prev = cfg_.channels(l);
  }
  mid_ = res("mid.res", prev, prev);
  for (int j = 0; j < cfg_.depth; ++j) {
    const int level = cfg_.depth - 1 - j;
    const std::string name = "dec." + std::to_string(j);
    Stage st;
    st.channels = cfg_.channels(level);
    st.res = res(name + ".res", prev + st.channels, st.channels);
    st.has_dda = placement_.dda_decoder.count(j) > 0;
    st.has_ssm = placement_.ssm_decoder.count(j) > 0;
    if (st.has_dda) st.dda = dda(name, st.channels);
    if (st.has_ssm) st.ssm = ssm(name, st.channels);
    decoder_.push_back(std::move(st));
    prev = st.channels;
  }
  out_norm_ = b.norm("out.norm", 2 * c0);
  out_img_ = b.conv("out.img", 3, c0, 3, 1);
  out_ann_ = b.conv("out.ann", 1, c0, 3, 1);
}

// ---------------------------------------------------------------------------
// Forward pass

namespace {

Tensor conv(const Tensor& x, const HelixUNet::Conv& c) { return ad::conv2d(x, c.w, c.b, 1, c.pad, c.groups); }

std::pair<Tensor, Tensor> split_domains(const Tensor& h) {
  const std::int64_t half = h.dim(1) / 2;
  auto parts = ad::split(h, 1, {half, half});
  return {parts[0], parts[1]};
}

// Per-item 2^level max-pool of a [b, 1, H, W] mask, flattened to [b, hw].
Tensor pool_mask(const Tensor& mask, int level) {
  const std::int64_t b = mask.dim(0), h = mask.dim(2), w = mask.dim(3), f = std::int64_t{1} << level;
  const std::int64_t oh = h / f, ow = w / f;
  std::vector<double> out(static_cast<std::size_t>(b * oh * ow), 0.0);
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x) {
        auto& cell = out[static_cast<std::size_t>((n * oh + y / f) * ow + x / f)];
        cell = std::max(cell, mask.at((n * h + y) * w + x));
      }
  return Tensor::from({b, oh * ow}, std::move(out));
}

}  // namespace

Tensor HelixUNet::res_block(const Tensor& x, const Res& p, const Tensor& temb) const {
  auto gn = [&](const Tensor& t, const Norm& n) { return ad::group_norm(t, cfg_.gn_groups, ad::add_scalar(n.gamma, 1.0), n.beta); };
  Tensor h = conv(ad::silu(gn(x, p.n1)), p.c1);
  const std::int64_t c = h.dim(1), b = h.dim(0);
  auto mod = ad::split(ad::linear(temb, p.temb_w, p.temb_b), 1, {c, c});
  h = ad::add(ad::mul(h, ad::add_scalar(ad::reshape(mod[0], {b, c, 1, 1}), 1.0)), ad::reshape(mod[1], {b, c, 1, 1}));
  h = conv(ad::silu(gn(h, p.n2)), p.c2);
  return ad::add(p.skip.w.defined() ? conv(x, p.skip) : x, h);
}

std::vector<Tensor> HelixUNet::encode_condition(const Tensor& reference_t) const {
  if (reference_t.ndim() != 4 || reference_t.dim(1) != 3 || reference_t.dim(2) != cfg_.image_size ||
      reference_t.dim(3) != cfg_.image_size)
    throw DimensionError("reference " + ad::to_string(reference_t.shape()) + " does not match image size " +
                         std::to_string(cfg_.image_size));
  std::vector<Tensor> out;
  Tensor f = reference_t;
  for (int l = 0; l < cfg_.depth; ++l) {
    if (l > 0) f = ad::avg_pool2x(f);
    f = ad::silu(conv(f, cond_convs_[static_cast<std::size_t>(l)]));
    out.push_back(ad::reshape(f, {f.dim(0), f.dim(1), f.dim(2) * f.dim(3)}));
  }
  return out;
}

std::vector<Tensor> HelixUNet::encode_condition(const Tensor& reference, const Tensor& support, const Tensor& eps_image,
                                                std::span<const int> t, const diffusion::NoiseSchedule& s) const {
  if (eps_image.shape() != reference.shape())
    throw DimensionError("reference " + ad::to_string(reference.shape()) + " and image noise " +
                         ad::to_string(eps_image.shape()) + " differ");
  return encode_condition(diffusion::noise_reference(reference, support, eps_image, t, s));
}

TextEmbedding HelixUNet::embed(const std::string& prompt) const { return embed_prompt(prompt, vocab_, text_table_); }

Tensor HelixUNet::apply_stage_modules(const Tensor& h, const Stage& st, int level, const Tensor* ref,
                                      const diffusion::Conditioning& cond) const {
  if (!st.has_dda && !st.has_ssm) return h;
  const std::int64_t b = h.dim(0), c = st.channels, hh = h.dim(2), ww = h.dim(3), hw = hh * ww;
  auto [hi, ha] = split_domains(h);
  at::DomainFeatures df{ad::reshape(hi, {b, c, hw}), ad::reshape(ha, {b, c, hw}), ref ? *ref : Tensor()};
  if (st.has_dda) {
    Tensor fi = at::image_cross_attention(df, st.dda.img, st.dda.zeta);
    Tensor fa = at::annotation_self_attention(df, st.dda.ann);
    df.f_image = fi;
    df.f_annot = fa;
  }
  if (st.has_ssm) {
    const std::vector<std::int64_t> ones(static_cast<std::size_t>(b), 1);
    auto fis = b > 1 ? ad::split(df.f_image, 0, ones) : std::vector<Tensor>{df.f_image};
    auto fas = b > 1 ? ad::split(df.f_annot, 0, ones) : std::vector<Tensor>{df.f_annot};
    Tensor control = cond.control.defined() ? pool_mask(cond.control, level) : Tensor();
    std::vector<Tensor> out_i, out_a;
    for (std::int64_t n = 0; n < b; ++n) {
      const auto k = static_cast<std::size_t>(n);
      const TextEmbedding& text = cond.text[k];
      at::DomainFeatures item{fis[k], fas[k], Tensor()};
      auto maps = at::semantic_score_maps(item, text, st.ssm.proj);
      std::optional<at::ScoreMap> so;
      if (control.defined()) {
        std::vector<double> row(control.data().begin() + n * hw, control.data().begin() + (n + 1) * hw);
        // An empty control region carries no layout request and is treated as absent.
        if (std::any_of(row.begin(), row.end(), [](double v) { return v != 0.0; }))
          so = at::rasterize_control(Tensor::from({1, hw}, std::move(row)), text.n_tokens());
      }
      auto r = at::ssm_fuse(item, maps.first, maps.second, so ? &*so : nullptr, st.ssm.eta, text, st.ssm.proj);
      out_i.push_back(r.f_image);
      out_a.push_back(r.f_annot);
    }
    df.f_image = b > 1 ? ad::concat(out_i, 0) : out_i[0];
    df.f_annot = b > 1 ? ad::concat(out_a, 0) : out_a[0];
  }
  return ad::concat({ad::reshape(df.f_image, {b, c, hh, ww}), ad::reshape(df.f_annot, {b, c, hh, ww})}, 1);
}

diffusion::NoiseSample HelixUNet::predict(const diffusion::JointLatent& z, const diffusion::Conditioning& cond,
                                          const Tensor& reference_t) const {
  const std::int64_t b = z.image.dim(0), s = cfg_.image_size;
  const ad::Shape img{b, 3, s, s}, ann{b, 1, s, s};
  if (z.image.shape() != img || z.annot.shape() != ann)
    throw DimensionError("latent " + ad::to_string(z.image.shape()) + "/" + ad::to_string(z.annot.shape()) +
                         " does not match image size " + std::to_string(s));
  if (static_cast<std::int64_t>(z.t.size()) != b) throw DimensionError("latent needs one timestep per item");
  if (!cond.support.defined() || cond.support.shape() != ann)
    throw DimensionError("reference support must be [b, 1, size, size]");
  if (cond.control.defined() && cond.control.shape() != ann)
    throw DimensionError("control mask must be [b, 1, size, size]");
  if (static_cast<std::int64_t>(cond.text.size()) != b) throw UsageError("one prompt embedding per batch item required");

  Tensor temb = ad::linear(ad::silu(ad::linear(timestep_embedding(z.t, cfg_.time_dim()), time_w1_, time_b1_)), time_w2_, time_b2_);
  temb = ad::silu(temb);

  const bool any_dda = !placement_.dda_encoder.empty() || !placement_.dda_decoder.empty();
  const std::vector<Tensor> refs = any_dda ? encode_condition(reference_t) : std::vector<Tensor>{};
  auto ref_at = [&](int level) { return any_dda ? &refs[static_cast<std::size_t>(level)] : nullptr; };

  Tensor h = ad::concat({conv(z.image, in_img_), conv(ad::concat({z.annot, cond.support}, 1), in_ann_)}, 1);
  std::vector<Tensor> skips;
  for (int l = 0; l < cfg_.depth; ++l) {
    const Stage& st = encoder_[static_cast<std::size_t>(l)];
    h = res_block(h, st.res, temb);
    h = apply_stage_modules(h, st, l, ref_at(l), cond);
    skips.push_back(h);
    h = ad::avg_pool2x(h);
  }
  h = res_block(h, mid_, temb);
  for (int j = 0; j < cfg_.depth; ++j) {
    const int level = cfg_.depth - 1 - j;
    const Stage& st = decoder_[static_cast<std::size_t>(j)];
    auto [ui, ua] = split_domains(ad::upsample_nearest2x(h));
    auto [si, sa] = split_domains(skips[static_cast<std::size_t>(level)]);
    h = res_block(ad::concat({ui, si, ua, sa}, 1), st.res, temb);
    h = apply_stage_modules(h, st, level, ref_at(level), cond);
  }
  h = ad::silu(ad::group_norm(h, cfg_.gn_groups, ad::add_scalar(out_norm_.gamma, 1.0), out_norm_.beta));
  auto [hi, ha] = split_domains(h);
  return {conv(hi, out_img_), conv(ha, out_ann_)};
}

std::int64_t count_parameters(const BackboneConfig& cfg, const BlockPlacement& placement) {
  std::vector<std::string> tokens;
  for (int i = 1; i < cfg.vocab_size; ++i) tokens.push_back("t" + std::to_string(i));
  HelixUNet model(cfg, placement, PromptVocabulary::from_tokens(tokens), 0);
  return model.parameters().scalar_count();
}

}  // namespace helix::backbone
