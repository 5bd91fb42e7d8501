// The compact partially-frozen transformer: prompt-prefix embedding,
// sequence assembly, a pre-norm causal stack whose attention/feed-forward
// blocks stay fixed while positional encodings, normalization parameters,
// and the task heads train, plus the coordinate head, Euclidean-meters loss,
// Adam training loop, finite-difference gradient checking, and the versioned
// checkpoint container.
#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nextloc/ad.hpp"
#include "nextloc/features.hpp"
#include "nextloc/geo.hpp"
#include "nextloc/ingest.hpp"
#include "nextloc/model_config.hpp"
#include "nextloc/poi.hpp"

namespace nextloc::backbone {

// Everything that determines the architecture; hashed into the model digest
// so mismatched checkpoints are refused at load.
struct ModelHyper {
  BackboneConfig backbone;
  FeatureConfig features;
  AblationFlags ablation;
  int vocab = 4096;
  int desc_len = 32;          // tokens per POI category description
  int poi_categories = 5;     // r; sizes the linear-POI variant
  int m = 30;                 // history window
  int n = 6;                  // current window
  int max_prompt_tokens = 64;
  bool poi_freq_normalize = false;
  std::string prompt_text;
};

// Fills derived fields (prompt token count, max_seq) so digests computed
// from a config agree with digests of a built model.
ModelHyper resolve_hyper(const ModelHyper& hyper);

std::string hyper_digest_text(const ModelHyper& hyper);
std::uint64_t model_digest(const ModelHyper& hyper);  // resolves first

std::string default_prompt_text();

struct SampleInputs {
  features::BranchInputs history;
  features::BranchInputs current;
};

struct TrainSample {
  SampleInputs in;
  geo::MercatorPoint target;
};

class ModelState {
 public:
  ModelHyper hyper;
  std::vector<int> prompt_tokens;  // tokenized prompt, empty under no_prompt
  geo::NormStats norm_stats;
  ingest::DurationBounds dur_bounds{0.0, 1440.0};

  ad::Param& param(const std::string& name);
  const ad::Param& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  std::span<ad::Param* const> all_params() const { return order_; }

  void add_param(const std::string& name, ad::Mat value, bool trainable);
  void zero_grads();
  void set_all_trainable(bool trainable);
  void apply_freeze_partition();  // restores flags from hyper.freeze_mode

  // Counts for the partition-soundness assertion.
  std::size_t trainable_count() const;
  std::size_t frozen_count() const;

  // FNV over the raw bytes of every frozen tensor, registry order.
  std::uint64_t frozen_digest() const;

  std::vector<ad::Mat> snapshot_trainable() const;
  void restore_trainable(const std::vector<ad::Mat>& snap);

 private:
  std::deque<ad::Param> storage_;
  std::vector<ad::Param*> order_;
  std::unordered_map<std::string, ad::Param*> index_;
};

// Builds and initializes every parameter tensor from the seed; runs the
// synthetic pretraining pass when the init mode asks for it.
ModelState build_model(const ModelHyper& hyper, std::uint64_t seed);

features::FeatureParams feature_params(ModelState& state);
poi::EmbedderParams embedder_params(ModelState& state);

// ---- graph builders / operations ----

// Prompt token embeddings, P x d_model (P = 0 under no_prompt).
ad::Mat prompt_embedding(ModelState& state);

// prefix | history | current row concatenation; rejects sequences longer
// than max_seq. Inputs must already be d_model wide.
ad::Mat assemble_input(const ModelState& state, const ad::Mat& prefix,
                       const ad::Mat& his, const ad::Mat& cur);

// Transformer stack over an assembled sequence; returns the final-position
// representation after the closing layer norm (1 x d_model).
ad::Mat forward(ModelState& state, const ad::Mat& seq);

// Tape-level builder used by training: normalized 1 x 2 coordinate output.
ad::Tape::Id build_output(ad::Tape& tape, ModelState& state,
                          const std::vector<std::vector<int>>& cat_tokens,
                          const SampleInputs& in);

// Loss node in denormalized Mercator meters.
ad::Tape::Id build_loss(ad::Tape& tape, ModelState& state,
                        const std::vector<std::vector<int>>& cat_tokens,
                        const TrainSample& sample);

// End-to-end inference: denormalized coordinate prediction.
geo::MercatorPoint predict_coords(ModelState& state,
                                  const std::vector<std::vector<int>>& cat_tokens,
                                  const SampleInputs& in);

double euclidean_loss(const geo::MercatorPoint& pred,
                      const geo::MercatorPoint& truth);

// ---- training ----

struct TrainSchedule {
  double lr = 1e-3;
  int batch = 64;
  int max_epochs = 30;
  int patience = 5;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> curve;
  int steps = 0;
  double best_val_loss = 0.0;
};

// Adam on the trainable set only; early stopping on validation loss with
// best-weights restore. Deterministic given (state, samples, schedule).
TrainResult train(ModelState& state,
                  const std::vector<std::vector<int>>& cat_tokens,
                  std::span<const TrainSample> train_set,
                  std::span<const TrainSample> val_set,
                  const TrainSchedule& schedule);

// ---- gradient checking ----

struct GradCheckFailure {
  std::string param;
  int index = 0;
  double analytic = 0.0;
  double finite_diff = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  int checked = 0;
  double max_rel_err = 0.0;
  std::vector<GradCheckFailure> failures;
  std::vector<std::string> frozen_with_grad;  // must stay empty
  bool passed() const { return failures.empty() && frozen_with_grad.empty(); }
};

// Central finite differences on a random subsample of trainable entries,
// plus the largest-gradient entry of every trainable tensor; frozen
// parameters are asserted to receive exactly zero gradient.
GradCheckReport grad_check(ModelState& state,
                           const std::vector<std::vector<int>>& cat_tokens,
                           const TrainSample& sample, double epsilon,
                           double tolerance, int samples_per_check = 64,
                           std::uint64_t seed = 17);

// ---- checkpoint container ----

inline constexpr char kCheckpointMagic[5] = {'N', 'X', 'L', 'L', '1'};

void save_checkpoint(const ModelState& state, const std::filesystem::path& path,
                     std::uint64_t dataset_digest);

struct LoadedCheckpoint {
  ModelState state;
  std::uint64_t dataset_digest = 0;
};

// Refuses digest mismatches unless `force`; expected_digest comes from the
// caller's config (nullopt skips the comparison).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 std::optional<std::uint64_t> expected_digest,
                                 bool force = false);

}  // namespace nextloc::backbone
