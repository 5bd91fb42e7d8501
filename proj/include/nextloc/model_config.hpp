// Configuration shared by the feature, POI, and backbone stages.
#pragma once

#include <stdexcept>

namespace nextloc {

struct FeatureConfig {
  int d_t = 8;      // time-of-day embedding width
  int d_d = 8;      // day-of-week embedding width
  int d_dur = 4;    // stay-duration embedding width
  int d_xy = 16;    // spatial-coordinate embedding width
  int d_poi = 8;    // linear POI width, used only by the no_poi variant
  int d_model = 64; // backbone width
};

enum class FreezeMode { kFrozenPartial, kFullFinetune };
enum class InitMode { kRandomFrozen, kSyntheticPretrain };

struct BackboneConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int max_seq = 0;  // prompt length + M + N; filled in at model build
  FreezeMode freeze_mode = FreezeMode::kFrozenPartial;
  InitMode init_mode = InitMode::kRandomFrozen;
};

// Single-flag deltas from the base model. no_poi switches to the
// linear-POI variant where the raw frequency vector is linearly mapped and
// concatenated with the other feature segments.
struct AblationFlags {
  bool no_prompt = false;
  bool no_poi = false;
  bool no_time = false;
  bool no_duration = false;
  bool history_only = false;
  bool current_only = false;

  void validate() const {
    if (history_only && current_only) {
      throw std::invalid_argument(
          "ablation: history_only and current_only are mutually exclusive");
    }
  }
};

// Width of the per-record concatenation fed to the branch projections.
inline int concat_width(const FeatureConfig& f, const AblationFlags& ab) {
  int w = f.d_xy;
  if (!ab.no_time) w += f.d_t + f.d_d;
  if (!ab.no_duration) w += f.d_dur;
  if (ab.no_poi) w += f.d_poi;
  return w;
}

}  // namespace nextloc
