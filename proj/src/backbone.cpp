#include "nextloc/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "nextloc/digest.hpp"

namespace nextloc::backbone {

namespace {

ad::Tape::Id mlp(ad::Tape& tape, ad::Tape::Id x, ad::Param& w1, ad::Param& b1,
                 ad::Param& w2, ad::Param& b2) {
  auto h = tape.tanh_of(
      tape.add_row(tape.matmul(x, tape.param(w1)), tape.param(b1)));
  return tape.add_row(tape.matmul(h, tape.param(w2)), tape.param(b2));
}

int out_hidden_width(int d_model) { return std::max(4, d_model / 2); }

}  // namespace

std::string hyper_digest_text(const ModelHyper& h) {
  std::ostringstream os;
  os << "layers=" << h.backbone.layers << "\nheads=" << h.backbone.heads
     << "\nd_model=" << h.backbone.d_model << "\nd_ff=" << h.backbone.d_ff
     << "\nmax_seq=" << h.backbone.max_seq
     << "\nfreeze_mode=" << static_cast<int>(h.backbone.freeze_mode)
     << "\ninit_mode=" << static_cast<int>(h.backbone.init_mode)
     << "\nd_t=" << h.features.d_t << "\nd_d=" << h.features.d_d
     << "\nd_dur=" << h.features.d_dur << "\nd_xy=" << h.features.d_xy
     << "\nd_poi=" << h.features.d_poi
     << "\nno_prompt=" << h.ablation.no_prompt
     << "\nno_poi=" << h.ablation.no_poi << "\nno_time=" << h.ablation.no_time
     << "\nno_duration=" << h.ablation.no_duration
     << "\nhistory_only=" << h.ablation.history_only
     << "\ncurrent_only=" << h.ablation.current_only
     << "\nvocab=" << h.vocab << "\ndesc_len=" << h.desc_len
     << "\npoi_categories=" << h.poi_categories << "\nm=" << h.m
     << "\nn=" << h.n << "\nmax_prompt_tokens=" << h.max_prompt_tokens
     << "\npoi_freq_normalize=" << h.poi_freq_normalize
     << "\nprompt=" << h.prompt_text << "\n";
  return os.str();
}

ModelHyper resolve_hyper(const ModelHyper& hyper) {
  ModelHyper h = hyper;
  h.ablation.validate();
  int prompt_len = 0;
  if (!h.ablation.no_prompt) {
    auto tokens = poi::tokenize(h.prompt_text, h.max_prompt_tokens, h.vocab);
    while (!tokens.empty() && tokens.back() == poi::kPadToken) {
      tokens.pop_back();
    }
    prompt_len = static_cast<int>(tokens.size());
  }
  h.backbone.max_seq = std::max(h.backbone.max_seq, prompt_len + h.m + h.n);
  return h;
}

std::uint64_t model_digest(const ModelHyper& hyper) {
  return fnv1a(hyper_digest_text(resolve_hyper(hyper)));
}

std::string default_prompt_text() {
  return "Task: predict the next location a user will visit. Each visit "
         "record gives normalized spatial coordinates of the location "
         "center, the hour of day, the day of week, and the stay duration. "
         "The history sequence reflects the user's long-term routine. The "
         "current sequence shows the most recent movements and short-term "
         "intent. Combine both sequences and output the normalized "
         "coordinates of the next location.";
}

// ---- ModelState ----

ad::Param& ModelState::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ad::NumericError("model: unknown parameter '" + name + "'");
  }
  return *it->second;
}

const ad::Param& ModelState::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ad::NumericError("model: unknown parameter '" + name + "'");
  }
  return *it->second;
}

bool ModelState::has_param(const std::string& name) const {
  return index_.contains(name);
}

void ModelState::add_param(const std::string& name, ad::Mat value,
                           bool trainable) {
  if (index_.contains(name)) {
    throw ad::NumericError("model: duplicate parameter '" + name + "'");
  }
  storage_.push_back(ad::Param{name, std::move(value), {}, trainable});
  order_.push_back(&storage_.back());
  index_.emplace(name, &storage_.back());
}

void ModelState::zero_grads() {
  for (ad::Param* p : order_) p->zero_grad();
}

void ModelState::set_all_trainable(bool trainable) {
  for (ad::Param* p : order_) p->trainable = trainable;
}

void ModelState::apply_freeze_partition() {
  const bool partial = hyper.backbone.freeze_mode == FreezeMode::kFrozenPartial;
  for (ad::Param* p : order_) {
    bool frozen = false;
    if (partial) {
      frozen = p->name == "token_table" ||
               p->name.find(".attn.") != std::string::npos ||
               p->name.find(".ffn.") != std::string::npos;
    }
    p->trainable = !frozen;
    if (frozen) p->grad = ad::Mat();  // frozen tensors carry no gradient
  }
}

std::size_t ModelState::trainable_count() const {
  std::size_t n = 0;
  for (const ad::Param* p : order_) n += p->trainable ? 1 : 0;
  return n;
}

std::size_t ModelState::frozen_count() const {
  return order_.size() - trainable_count();
}

std::uint64_t ModelState::frozen_digest() const {
  std::uint64_t h = kFnvOffset;
  for (const ad::Param* p : order_) {
    if (p->trainable) continue;
    h = fnv1a(p->name, h);
    h = fnv1a_bytes(p->value.a.data(), p->value.size() * sizeof(double), h);
  }
  return h;
}

std::vector<ad::Mat> ModelState::snapshot_trainable() const {
  std::vector<ad::Mat> snap;
  for (const ad::Param* p : order_) {
    if (p->trainable) snap.push_back(p->value);
  }
  return snap;
}

void ModelState::restore_trainable(const std::vector<ad::Mat>& snap) {
  std::size_t i = 0;
  for (ad::Param* p : order_) {
    if (p->trainable) p->value = snap.at(i++);
  }
}

// ---- model construction ----

namespace {

// Creates the full parameter registry (zero-valued) for the architecture.
ModelState make_state(const ModelHyper& unresolved) {
  const ModelHyper hyper = resolve_hyper(unresolved);
  const int d = hyper.backbone.d_model;
  if (d % hyper.backbone.heads != 0) {
    throw ad::NumericError("model: d_model must be divisible by heads");
  }
  if (hyper.features.d_model != d) {
    throw ad::NumericError("model: feature d_model must equal backbone width");
  }
  ModelState state;
  state.hyper = hyper;
  if (!hyper.ablation.no_prompt) {
    state.prompt_tokens =
        poi::tokenize(hyper.prompt_text, hyper.max_prompt_tokens, hyper.vocab);
    // Trailing padding carries no text; drop it so P matches the prompt.
    while (!state.prompt_tokens.empty() &&
           state.prompt_tokens.back() == poi::kPadToken) {
      state.prompt_tokens.pop_back();
    }
  }

  const FeatureConfig& f = hyper.features;
  const int concat = concat_width(f, hyper.ablation);
  const int hidden = 2 * d;

  state.add_param("token_table", ad::Mat(hyper.vocab, d), true);
  state.add_param("pos_enc", ad::Mat(state.hyper.backbone.max_seq, d), true);
  for (int l = 0; l < hyper.backbone.layers; ++l) {
    const std::string pfx = "layer" + std::to_string(l) + ".";
    state.add_param(pfx + "ln1.gain", ad::Mat(1, d), true);
    state.add_param(pfx + "ln1.bias", ad::Mat(1, d), true);
    state.add_param(pfx + "attn.wq", ad::Mat(d, d), true);
    state.add_param(pfx + "attn.wk", ad::Mat(d, d), true);
    state.add_param(pfx + "attn.wv", ad::Mat(d, d), true);
    state.add_param(pfx + "attn.wo", ad::Mat(d, d), true);
    state.add_param(pfx + "ln2.gain", ad::Mat(1, d), true);
    state.add_param(pfx + "ln2.bias", ad::Mat(1, d), true);
    state.add_param(pfx + "ffn.w1", ad::Mat(d, hyper.backbone.d_ff), true);
    state.add_param(pfx + "ffn.b1", ad::Mat(1, hyper.backbone.d_ff), true);
    state.add_param(pfx + "ffn.w2", ad::Mat(hyper.backbone.d_ff, d), true);
    state.add_param(pfx + "ffn.b2", ad::Mat(1, d), true);
  }
  state.add_param("final_ln.gain", ad::Mat(1, d), true);
  state.add_param("final_ln.bias", ad::Mat(1, d), true);

  state.add_param("feat.time_table", ad::Mat(24, f.d_t), true);
  state.add_param("feat.day_table", ad::Mat(8, f.d_d), true);
  state.add_param("feat.dur.w", ad::Mat(1, f.d_dur), true);
  state.add_param("feat.dur.b", ad::Mat(1, f.d_dur), true);
  state.add_param("feat.xy.w", ad::Mat(2, f.d_xy), true);
  state.add_param("feat.xy.b", ad::Mat(1, f.d_xy), true);
  for (const char* branch : {"h", "c"}) {
    const std::string pfx = std::string("feat.proj_") + branch + ".";
    state.add_param(pfx + "w1", ad::Mat(concat, hidden), true);
    state.add_param(pfx + "b1", ad::Mat(1, hidden), true);
    state.add_param(pfx + "w2", ad::Mat(hidden, d), true);
    state.add_param(pfx + "b2", ad::Mat(1, d), true);
  }
  if (hyper.ablation.no_poi) {
    state.add_param("feat.poi_linear.w", ad::Mat(hyper.poi_categories, f.d_poi),
                    true);
    state.add_param("feat.poi_linear.b", ad::Mat(1, f.d_poi), true);
  } else {
    state.add_param("poi.pool.w1", ad::Mat(d, hidden), true);
    state.add_param("poi.pool.b1", ad::Mat(1, hidden), true);
    state.add_param("poi.pool.w2", ad::Mat(hidden, d), true);
    state.add_param("poi.pool.b2", ad::Mat(1, d), true);
    for (const char* branch : {"h", "c"}) {
      const std::string pfx = std::string("poi.head_") + branch + ".";
      state.add_param(pfx + "w1", ad::Mat(d, hidden), true);
      state.add_param(pfx + "b1", ad::Mat(1, hidden), true);
      state.add_param(pfx + "w2", ad::Mat(hidden, d), true);
      state.add_param(pfx + "b2", ad::Mat(1, d), true);
    }
  }
  const int oh = out_hidden_width(d);
  state.add_param("out.w1", ad::Mat(d, oh), true);
  state.add_param("out.b1", ad::Mat(1, oh), true);
  state.add_param("out.w2", ad::Mat(oh, 2), true);
  state.add_param("out.b2", ad::Mat(1, 2), true);

  state.apply_freeze_partition();
  if (state.trainable_count() + state.frozen_count() !=
      state.all_params().size()) {
    throw ad::NumericError("model: parameter partition is not exhaustive");
  }
  return state;
}

void init_params(ModelState& state, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int d = state.hyper.backbone.d_model;
  for (ad::Param* p : state.all_params()) {
    const std::string& name = p->name;
    if (name == "token_table") {
      fill_gaussian(p->value, 0.1, rng);
    } else if (name == "pos_enc") {
      fill_gaussian(p->value, 0.02, rng);
    } else if (name.find("ln") != std::string::npos &&
               name.ends_with(".gain")) {
      for (double& v : p->value.a) v = 1.0;
    } else if (name.find("ln") != std::string::npos &&
               name.ends_with(".bias")) {
      // zeros
    } else if (name.find(".attn.") != std::string::npos) {
      fill_orthogonal(p->value, 1.0, rng);
    } else if (name.find(".ffn.w") != std::string::npos) {
      fill_orthogonal(p->value, 1.0, rng);
    } else if (name.find(".ffn.b") != std::string::npos) {
      // zeros
    } else if (name.ends_with(".w1") || name == "feat.xy.w" ||
               name == "feat.dur.w" || name == "feat.poi_linear.w") {
      const double fan_in = std::max(1, p->value.rows);
      fill_gaussian(p->value, std::sqrt(1.0 / fan_in), rng);
    } else if (name.ends_with(".w2")) {
      const double fan_in = std::max(1, p->value.rows);
      double g = std::sqrt(1.0 / fan_in);
      if (name == "out.w2") g *= 0.1;  // start near the mean predictor
      fill_gaussian(p->value, g, rng);
    } else if (name == "feat.time_table" || name == "feat.day_table") {
      fill_gaussian(p->value, 0.1, rng);
    } else {
      // biases stay zero
    }
  }
  (void)d;
}

void synthetic_pretrain(ModelState& state, std::uint64_t seed);

}  // namespace

ModelState build_model(const ModelHyper& hyper, std::uint64_t seed) {
  ModelState state = make_state(hyper);
  init_params(state, seed);
  if (hyper.backbone.init_mode == InitMode::kSyntheticPretrain) {
    synthetic_pretrain(state, seed ^ 0x9e3779b97f4a7c15ULL);
  }
  return state;
}

features::FeatureParams feature_params(ModelState& s) {
  features::FeatureParams fp;
  fp.time_table = &s.param("feat.time_table");
  fp.day_table = &s.param("feat.day_table");
  fp.dur_w = &s.param("feat.dur.w");
  fp.dur_b = &s.param("feat.dur.b");
  fp.xy_w = &s.param("feat.xy.w");
  fp.xy_b = &s.param("feat.xy.b");
  if (s.hyper.ablation.no_poi) {
    fp.poi_linear_w = &s.param("feat.poi_linear.w");
    fp.poi_linear_b = &s.param("feat.poi_linear.b");
  }
  fp.proj_h_w1 = &s.param("feat.proj_h.w1");
  fp.proj_h_b1 = &s.param("feat.proj_h.b1");
  fp.proj_h_w2 = &s.param("feat.proj_h.w2");
  fp.proj_h_b2 = &s.param("feat.proj_h.b2");
  fp.proj_c_w1 = &s.param("feat.proj_c.w1");
  fp.proj_c_b1 = &s.param("feat.proj_c.b1");
  fp.proj_c_w2 = &s.param("feat.proj_c.w2");
  fp.proj_c_b2 = &s.param("feat.proj_c.b2");
  return fp;
}

poi::EmbedderParams embedder_params(ModelState& s) {
  poi::EmbedderParams ep;
  ep.token_table = &s.param("token_table");
  ep.pool_w1 = &s.param("poi.pool.w1");
  ep.pool_b1 = &s.param("poi.pool.b1");
  ep.pool_w2 = &s.param("poi.pool.w2");
  ep.pool_b2 = &s.param("poi.pool.b2");
  ep.head_h_w1 = &s.param("poi.head_h.w1");
  ep.head_h_b1 = &s.param("poi.head_h.b1");
  ep.head_h_w2 = &s.param("poi.head_h.w2");
  ep.head_h_b2 = &s.param("poi.head_h.b2");
  ep.head_c_w1 = &s.param("poi.head_c.w1");
  ep.head_c_b1 = &s.param("poi.head_c.b1");
  ep.head_c_w2 = &s.param("poi.head_c.w2");
  ep.head_c_b2 = &s.param("poi.head_c.b2");
  return ep;
}

// ---- graph builders ----

namespace {

// Pre-norm causal stack; raises on non-finite activations naming the layer.
ad::Tape::Id transformer_tail(ad::Tape& tape, ModelState& state,
                              ad::Tape::Id seq) {
  const int seq_len = tape.value(seq).rows;
  const int d = state.hyper.backbone.d_model;
  const int heads = state.hyper.backbone.heads;
  const int dh = d / heads;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  auto pos = tape.slice_rows(tape.param(state.param("pos_enc")), 0, seq_len);
  auto x = tape.add(seq, pos);

  for (int l = 0; l < state.hyper.backbone.layers; ++l) {
    const std::string pfx = "layer" + std::to_string(l) + ".";
    auto normed = tape.layer_norm(x, tape.param(state.param(pfx + "ln1.gain")),
                                  tape.param(state.param(pfx + "ln1.bias")));
    auto q = tape.matmul(normed, tape.param(state.param(pfx + "attn.wq")));
    auto k = tape.matmul(normed, tape.param(state.param(pfx + "attn.wk")));
    auto v = tape.matmul(normed, tape.param(state.param(pfx + "attn.wv")));
    ad::Tape::Id merged = -1;
    for (int h = 0; h < heads; ++h) {
      auto qh = tape.slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = tape.slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = tape.slice_cols(v, h * dh, (h + 1) * dh);
      auto attn = tape.softmax_causal(
          tape.scale(tape.matmul_nt(qh, kh), inv_sqrt_dh));
      auto oh = tape.matmul(attn, vh);
      merged = h == 0 ? oh : tape.concat_cols(merged, oh);
    }
    x = tape.add(x,
                 tape.matmul(merged, tape.param(state.param(pfx + "attn.wo"))));
    auto normed2 = tape.layer_norm(x, tape.param(state.param(pfx + "ln2.gain")),
                                   tape.param(state.param(pfx + "ln2.bias")));
    auto hidden = tape.tanh_of(
        tape.add_row(tape.matmul(normed2, tape.param(state.param(pfx + "ffn.w1"))),
                     tape.param(state.param(pfx + "ffn.b1"))));
    auto ffn = tape.add_row(
        tape.matmul(hidden, tape.param(state.param(pfx + "ffn.w2"))),
        tape.param(state.param(pfx + "ffn.b2")));
    x = tape.add(x, ffn);
    if (!tape.value(x).all_finite()) {
      throw ad::NumericError("forward: non-finite activation at layer " +
                             std::to_string(l));
    }
  }
  auto last = tape.slice_rows(x, seq_len - 1, seq_len);
  return tape.layer_norm(last, tape.param(state.param("final_ln.gain")),
                         tape.param(state.param("final_ln.bias")));
}

features::BranchInputs const& check_branch(const features::BranchInputs& b,
                                           const char* which) {
  if (b.len() < 1) {
    throw ingest::DataError(std::string("sample: empty ") + which +
                            " branch");
  }
  return b;
}

}  // namespace

ad::Mat prompt_embedding(ModelState& state) {
  const int d = state.hyper.backbone.d_model;
  ad::Mat out(static_cast<int>(state.prompt_tokens.size()), d);
  const ad::Mat& table = state.param("token_table").value;
  for (std::size_t i = 0; i < state.prompt_tokens.size(); ++i) {
    const int tok = state.prompt_tokens[i];
    std::copy(table.row(tok), table.row(tok) + d,
              out.row(static_cast<int>(i)));
  }
  return out;
}

ad::Mat assemble_input(const ModelState& state, const ad::Mat& prefix,
                       const ad::Mat& his, const ad::Mat& cur) {
  const int d = state.hyper.backbone.d_model;
  for (const ad::Mat* part : {&prefix, &his, &cur}) {
    if (!part->empty() && part->cols != d) {
      throw ad::NumericError("assemble_input: width mismatch");
    }
  }
  const int rows = prefix.rows + his.rows + cur.rows;
  if (rows > state.hyper.backbone.max_seq) {
    throw ad::NumericError("assemble_input: sequence of " +
                           std::to_string(rows) + " rows exceeds max_seq " +
                           std::to_string(state.hyper.backbone.max_seq));
  }
  ad::Mat out(rows, d);
  int r = 0;
  for (const ad::Mat* part : {&prefix, &his, &cur}) {
    if (part->empty()) continue;
    std::copy(part->a.begin(), part->a.end(), out.row(r));
    r += part->rows;
  }
  return out;
}

ad::Mat forward(ModelState& state, const ad::Mat& seq) {
  if (seq.rows < 1 || seq.rows > state.hyper.backbone.max_seq) {
    throw ad::NumericError("forward: sequence length out of range");
  }
  ad::Tape tape(/*grad_enabled=*/false);
  auto v_o = transformer_tail(tape, state, tape.input(seq));
  return tape.value(v_o);
}

ad::Tape::Id build_output(ad::Tape& tape, ModelState& state,
                          const std::vector<std::vector<int>>& cat_tokens,
                          const SampleInputs& in) {
  const AblationFlags& ab = state.hyper.ablation;
  features::FeatureParams fp = feature_params(state);

  std::vector<ad::Tape::Id> parts;
  if (!ab.no_prompt && !state.prompt_tokens.empty()) {
    parts.push_back(tape.gather_rows(tape.param(state.param("token_table")),
                                     state.prompt_tokens));
  }

  auto build_branch = [&](const features::BranchInputs& branch, bool history) {
    auto vecs = features::embed_records(tape, fp, state.hyper.features, ab,
                                        branch);
    auto content = features::project_content(tape, fp, vecs, history);
    if (ab.no_poi) return content;
    poi::EmbedderParams ep = embedder_params(state);
    auto poi_branch = poi::trajectory_poi_embedding(
        tape, ep, cat_tokens, branch.profiles, state.hyper.poi_freq_normalize,
        history);
    return features::compose_final(tape, content, poi_branch);
  };

  if (!ab.current_only) {
    parts.push_back(build_branch(check_branch(in.history, "history"), true));
  }
  if (!ab.history_only) {
    parts.push_back(build_branch(check_branch(in.current, "current"), false));
  }
  auto seq = tape.concat_rows(parts);
  if (tape.value(seq).rows > state.hyper.backbone.max_seq) {
    throw ad::NumericError("sequence exceeds max_seq");
  }
  auto v_o = transformer_tail(tape, state, seq);
  return mlp(tape, v_o, state.param("out.w1"), state.param("out.b1"),
             state.param("out.w2"), state.param("out.b2"));
}

ad::Tape::Id build_loss(ad::Tape& tape, ModelState& state,
                        const std::vector<std::vector<int>>& cat_tokens,
                        const TrainSample& sample) {
  auto out = build_output(tape, state, cat_tokens, sample.in);
  const geo::NormStats& ns = state.norm_stats;
  auto merc = tape.affine_cols(out, {ns.std_x, ns.std_y},
                               {ns.mean_x, ns.mean_y});
  return tape.euclid(merc, {sample.target.x, sample.target.y});
}

geo::MercatorPoint predict_coords(
    ModelState& state, const std::vector<std::vector<int>>& cat_tokens,
    const SampleInputs& in) {
  ad::Tape tape(/*grad_enabled=*/false);
  auto out = build_output(tape, state, cat_tokens, in);
  const ad::Mat& norm = tape.value(out);
  return geo::denormalize({norm.a[0], norm.a[1]}, state.norm_stats);
}

double euclidean_loss(const geo::MercatorPoint& pred,
                      const geo::MercatorPoint& truth) {
  const double dx = pred.x - truth.x;
  const double dy = pred.y - truth.y;
  return std::sqrt(dx * dx + dy * dy);
}

// ---- training ----

namespace {

struct AdamSlot {
  ad::Param* param = nullptr;
  ad::Mat m;
  ad::Mat v;
};

class Adam {
 public:
  Adam(ModelState& state, const TrainSchedule& s) : sched_(s) {
    for (ad::Param* p : state.all_params()) {
      if (!p->trainable) continue;
      AdamSlot slot;
      slot.param = p;
      slot.m = ad::Mat(p->value.rows, p->value.cols);
      slot.v = ad::Mat(p->value.rows, p->value.cols);
      slots_.push_back(std::move(slot));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(sched_.beta1, t_);
    const double bc2 = 1.0 - std::pow(sched_.beta2, t_);
    for (AdamSlot& s : slots_) {
      if (s.param->grad.empty()) continue;
      for (std::size_t i = 0; i < s.param->value.size(); ++i) {
        const double g = s.param->grad.a[i];
        s.m.a[i] = sched_.beta1 * s.m.a[i] + (1.0 - sched_.beta1) * g;
        s.v.a[i] = sched_.beta2 * s.v.a[i] + (1.0 - sched_.beta2) * g * g;
        const double mhat = s.m.a[i] / bc1;
        const double vhat = s.v.a[i] / bc2;
        s.param->value.a[i] -=
            sched_.lr * mhat / (std::sqrt(vhat) + sched_.eps);
      }
    }
  }

 private:
  TrainSchedule sched_;
  std::vector<AdamSlot> slots_;
  long t_ = 0;
};

double mean_loss(ModelState& state,
                 const std::vector<std::vector<int>>& cat_tokens,
                 std::span<const TrainSample> samples) {
  if (samples.empty()) return 0.0;
  double sum = 0.0;
  for (const TrainSample& s : samples) {
    ad::Tape tape(/*grad_enabled=*/false);
    sum += tape.value(build_loss(tape, state, cat_tokens, s)).a[0];
  }
  return sum / static_cast<double>(samples.size());
}

}  // namespace

TrainResult train(ModelState& state,
                  const std::vector<std::vector<int>>& cat_tokens,
                  std::span<const TrainSample> train_set,
                  std::span<const TrainSample> val_set,
                  const TrainSchedule& schedule) {
  if (train_set.empty()) {
    throw ingest::DataError("train: empty training set");
  }
  Adam opt(state, schedule);
  std::mt19937_64 rng(schedule.seed);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<ad::Mat> best_snapshot;
  int stale_epochs = 0;

  for (int epoch = 0; epoch < schedule.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t base = 0; base < order.size();
         base += static_cast<std::size_t>(schedule.batch)) {
      const std::size_t end = std::min(
          order.size(), base + static_cast<std::size_t>(schedule.batch));
      const double inv_batch = 1.0 / static_cast<double>(end - base);
      state.zero_grads();
      for (std::size_t i = base; i < end; ++i) {
        ad::Tape tape;
        auto loss = build_loss(tape, state, cat_tokens, train_set[order[i]]);
        const double value = tape.value(loss).a[0];
        if (!std::isfinite(value)) {
          throw ad::NumericError("train: loss diverged at step " +
                                 std::to_string(result.steps));
        }
        epoch_loss += value;
        ++seen;
        tape.backward(loss, inv_batch);
      }
      opt.step();
      ++result.steps;
    }
    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = epoch_loss / static_cast<double>(seen);
    em.val_loss = mean_loss(state, cat_tokens, val_set);
    result.curve.push_back(em);

    if (!val_set.empty()) {
      if (em.val_loss < best_val) {
        best_val = em.val_loss;
        best_snapshot = state.snapshot_trainable();
        stale_epochs = 0;
      } else if (++stale_epochs >= schedule.patience) {
        break;
      }
    }
  }
  if (!best_snapshot.empty()) {
    state.restore_trainable(best_snapshot);
    result.best_val_loss = best_val;
  } else if (!result.curve.empty()) {
    result.best_val_loss = result.curve.back().val_loss;
  }
  return result;
}

// ---- synthetic pretraining ----

namespace {

// Coordinate copy task: random sequences, target = the first row's leading
// two dimensions. Trains every parameter (attention included) before the
// freeze partition is restored, giving the frozen blocks sequence-routing
// behavior instead of a raw random draw.
void synthetic_pretrain(ModelState& state, std::uint64_t seed) {
  state.set_all_trainable(true);
  TrainSchedule sched;
  sched.lr = 1e-3;
  sched.batch = 8;
  sched.seed = seed;
  Adam opt(state, sched);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  const int d = state.hyper.backbone.d_model;
  const int len = std::min(8, state.hyper.backbone.max_seq);
  const int steps = 300;
  for (int step = 0; step < steps; ++step) {
    state.zero_grads();
    for (int b = 0; b < sched.batch; ++b) {
      ad::Mat seq(len, d);
      for (double& v : seq.a) v = dist(rng);
      const double tx = seq.at(0, 0);
      const double ty = seq.at(0, 1);
      ad::Tape tape;
      auto v_o = transformer_tail(tape, state, tape.input(std::move(seq)));
      auto out = mlp(tape, v_o, state.param("out.w1"), state.param("out.b1"),
                     state.param("out.w2"), state.param("out.b2"));
      auto loss = tape.euclid(out, {tx, ty});
      tape.backward(loss, 1.0 / sched.batch);
    }
    opt.step();
  }
  state.apply_freeze_partition();
}

}  // namespace

// ---- gradient checking ----

GradCheckReport grad_check(ModelState& state,
                           const std::vector<std::vector<int>>& cat_tokens,
                           const TrainSample& sample, double epsilon,
                           double tolerance, int samples_per_check,
                           std::uint64_t seed) {
  GradCheckReport report;
  state.zero_grads();
  {
    ad::Tape tape;
    auto loss = build_loss(tape, state, cat_tokens, sample);
    tape.backward(loss, 1.0);
  }
  for (const ad::Param* p : state.all_params()) {
    if (p->trainable) continue;
    if (!p->grad.empty()) {
      for (double g : p->grad.a) {
        if (g != 0.0) {
          report.frozen_with_grad.push_back(p->name);
          break;
        }
      }
    }
  }

  auto loss_value = [&]() {
    ad::Tape tape(/*grad_enabled=*/false);
    return tape.value(build_loss(tape, state, cat_tokens, sample)).a[0];
  };

  struct Probe {
    ad::Param* param;
    int index;
  };
  std::vector<Probe> probes;
  std::vector<ad::Param*> trainable;
  std::size_t total = 0;
  for (ad::Param* p : const_cast<ModelState&>(state).all_params()) {
    if (!p->trainable) continue;
    trainable.push_back(p);
    total += p->value.size();
    // Most informative entry of each tensor: largest |gradient|.
    if (!p->grad.empty()) {
      int best = 0;
      double best_abs = -1.0;
      for (std::size_t i = 0; i < p->grad.size(); ++i) {
        if (std::fabs(p->grad.a[i]) > best_abs) {
          best_abs = std::fabs(p->grad.a[i]);
          best = static_cast<int>(i);
        }
      }
      probes.push_back({p, best});
    }
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (int s = 0; s < samples_per_check; ++s) {
    std::size_t flat = pick(rng);
    for (ad::Param* p : trainable) {
      if (flat < p->value.size()) {
        probes.push_back({p, static_cast<int>(flat)});
        break;
      }
      flat -= p->value.size();
    }
  }

  for (const Probe& probe : probes) {
    double& slot = probe.param->value.a[static_cast<std::size_t>(probe.index)];
    const double orig = slot;
    slot = orig + epsilon;
    const double up = loss_value();
    slot = orig - epsilon;
    const double down = loss_value();
    slot = orig;
    const double fd = (up - down) / (2.0 * epsilon);
    const double analytic =
        probe.param->grad.empty()
            ? 0.0
            : probe.param->grad.a[static_cast<std::size_t>(probe.index)];
    ++report.checked;
    const double denom = std::max(std::fabs(analytic), std::fabs(fd));
    if (denom < 1e-7) continue;  // both effectively zero
    const double rel = std::fabs(analytic - fd) / denom;
    report.max_rel_err = std::max(report.max_rel_err, rel);
    if (rel > tolerance) {
      report.failures.push_back(
          {probe.param->name, probe.index, analytic, fd, rel});
    }
  }
  return report;
}

// ---- checkpoint I/O ----

namespace {

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_i32(std::ostream& os, std::int32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_f64(std::ostream& os, double v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_u8(std::ostream& os, std::uint8_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw ingest::DataError("checkpoint: truncated file");
  return v;
}

std::string read_str(std::istream& is) {
  const auto len = read_pod<std::uint32_t>(is);
  std::string s(len, '\0');
  is.read(s.data(), static_cast<std::streamsize>(len));
  if (!is) throw ingest::DataError("checkpoint: truncated string");
  return s;
}

}  // namespace

void save_checkpoint(const ModelState& state,
                     const std::filesystem::path& path,
                     std::uint64_t dataset_digest) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ingest::DataError("cannot write " + path.string());
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_u32(os, 1);  // container version
  write_u64(os, model_digest(state.hyper));
  write_u64(os, dataset_digest);

  const ModelHyper& h = state.hyper;
  for (int v : {h.backbone.layers, h.backbone.heads, h.backbone.d_model,
                h.backbone.d_ff, h.backbone.max_seq,
                static_cast<int>(h.backbone.freeze_mode),
                static_cast<int>(h.backbone.init_mode), h.features.d_t,
                h.features.d_d, h.features.d_dur, h.features.d_xy,
                h.features.d_poi, h.features.d_model}) {
    write_i32(os, v);
  }
  for (bool b : {h.ablation.no_prompt, h.ablation.no_poi, h.ablation.no_time,
                 h.ablation.no_duration, h.ablation.history_only,
                 h.ablation.current_only}) {
    write_u8(os, b ? 1 : 0);
  }
  for (int v : {h.vocab, h.desc_len, h.poi_categories, h.m, h.n,
                h.max_prompt_tokens}) {
    write_i32(os, v);
  }
  write_u8(os, h.poi_freq_normalize ? 1 : 0);
  write_str(os, h.prompt_text);

  for (double v : {state.norm_stats.mean_x, state.norm_stats.mean_y,
                   state.norm_stats.std_x, state.norm_stats.std_y,
                   state.dur_bounds.min_min, state.dur_bounds.max_min}) {
    write_f64(os, v);
  }

  write_u32(os, static_cast<std::uint32_t>(state.all_params().size()));
  for (const ad::Param* p : state.all_params()) {
    write_str(os, p->name);
    write_i32(os, p->value.rows);
    write_i32(os, p->value.cols);
    write_u8(os, p->trainable ? 1 : 0);
    for (double v : p->value.a) {
      const float f = static_cast<float>(v);
      os.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
  }
  if (!os) throw ingest::DataError("checkpoint: write failed");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 std::optional<std::uint64_t> expected_digest,
                                 bool force) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ingest::DataError("cannot open " + path.string());
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw ingest::DataError(path.string() + ": not a checkpoint file");
  }
  const auto version = read_pod<std::uint32_t>(is);
  if (version != 1) {
    throw ingest::DataError(path.string() + ": unsupported container version");
  }
  const auto stored_digest = read_pod<std::uint64_t>(is);
  const auto dataset_digest = read_pod<std::uint64_t>(is);

  ModelHyper h;
  h.backbone.layers = read_pod<std::int32_t>(is);
  h.backbone.heads = read_pod<std::int32_t>(is);
  h.backbone.d_model = read_pod<std::int32_t>(is);
  h.backbone.d_ff = read_pod<std::int32_t>(is);
  h.backbone.max_seq = read_pod<std::int32_t>(is);
  h.backbone.freeze_mode = static_cast<FreezeMode>(read_pod<std::int32_t>(is));
  h.backbone.init_mode = static_cast<InitMode>(read_pod<std::int32_t>(is));
  h.features.d_t = read_pod<std::int32_t>(is);
  h.features.d_d = read_pod<std::int32_t>(is);
  h.features.d_dur = read_pod<std::int32_t>(is);
  h.features.d_xy = read_pod<std::int32_t>(is);
  h.features.d_poi = read_pod<std::int32_t>(is);
  h.features.d_model = read_pod<std::int32_t>(is);
  h.ablation.no_prompt = read_pod<std::uint8_t>(is) != 0;
  h.ablation.no_poi = read_pod<std::uint8_t>(is) != 0;
  h.ablation.no_time = read_pod<std::uint8_t>(is) != 0;
  h.ablation.no_duration = read_pod<std::uint8_t>(is) != 0;
  h.ablation.history_only = read_pod<std::uint8_t>(is) != 0;
  h.ablation.current_only = read_pod<std::uint8_t>(is) != 0;
  h.vocab = read_pod<std::int32_t>(is);
  h.desc_len = read_pod<std::int32_t>(is);
  h.poi_categories = read_pod<std::int32_t>(is);
  h.m = read_pod<std::int32_t>(is);
  h.n = read_pod<std::int32_t>(is);
  h.max_prompt_tokens = read_pod<std::int32_t>(is);
  h.poi_freq_normalize = read_pod<std::uint8_t>(is) != 0;
  h.prompt_text = read_str(is);

  if (model_digest(h) != stored_digest) {
    throw ingest::DataError(path.string() +
                            ": stored digest does not match its own config");
  }
  if (expected_digest && *expected_digest != stored_digest && !force) {
    throw ingest::DataError(
        path.string() +
        ": config digest mismatch (use force to override)");
  }

  LoadedCheckpoint loaded;
  loaded.state = make_state(h);
  loaded.dataset_digest = dataset_digest;
  ModelState& state = loaded.state;
  state.norm_stats.mean_x = read_pod<double>(is);
  state.norm_stats.mean_y = read_pod<double>(is);
  state.norm_stats.std_x = read_pod<double>(is);
  state.norm_stats.std_y = read_pod<double>(is);
  state.dur_bounds.min_min = read_pod<double>(is);
  state.dur_bounds.max_min = read_pod<double>(is);

  const auto n_tensors = read_pod<std::uint32_t>(is);
  if (n_tensors != state.all_params().size()) {
    throw ingest::DataError(path.string() + ": tensor count mismatch");
  }
  for (std::uint32_t t = 0; t < n_tensors; ++t) {
    const std::string name = read_str(is);
    const auto rows = read_pod<std::int32_t>(is);
    const auto cols = read_pod<std::int32_t>(is);
    const auto trainable = read_pod<std::uint8_t>(is);
    ad::Param& p = state.param(name);
    if (p.value.rows != rows || p.value.cols != cols) {
      throw ingest::DataError(path.string() + ": shape mismatch for '" +
                              name + "'");
    }
    if ((p.trainable ? 1 : 0) != trainable) {
      throw ingest::DataError(path.string() + ": partition mismatch for '" +
                              name + "'");
    }
    for (double& v : p.value.a) {
      v = static_cast<double>(read_pod<float>(is));
    }
    if (!p.value.all_finite()) {
      throw ingest::DataError(path.string() + ": non-finite tensor '" + name +
                              "'");
    }
  }
  return loaded;
}

}  // namespace nextloc::backbone
