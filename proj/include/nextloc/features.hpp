// Multi-dimensional trajectory content embeddings: time-of-day and
// day-of-week table lookups, linear duration and coordinate maps, segment
// concatenation in the order xy | time | day | duration (| linear POI in the
// no_poi variant), and the per-branch projections to model width.
#pragma once

#include <span>
#include <vector>

#include "nextloc/ad.hpp"
#include "nextloc/ingest.hpp"
#include "nextloc/model_config.hpp"
#include "nextloc/poi.hpp"

namespace nextloc::features {

// Plain per-record inputs for one branch, already normalized: coordinates
// standardized with the city NormStats, durations min-max scaled into [0,1].
struct BranchInputs {
  std::vector<double> xy;       // 2 * len, row-major (x, y)
  std::vector<int> hour;        // len, 0..23
  std::vector<int> day;         // len, 0..7
  std::vector<double> dur01;    // len
  std::vector<const poi::Profile*> profiles;  // len; null only if no_poi

  int len() const { return static_cast<int>(hour.size()); }
};

struct FeatureParams {
  ad::Param* time_table = nullptr;  // 24 x d_t
  ad::Param* day_table = nullptr;   // 8 x d_d
  ad::Param* dur_w = nullptr;       // 1 x d_dur
  ad::Param* dur_b = nullptr;       // 1 x d_dur
  ad::Param* xy_w = nullptr;        // 2 x d_xy
  ad::Param* xy_b = nullptr;        // 1 x d_xy
  ad::Param* poi_linear_w = nullptr;  // r x d_poi (no_poi variant only)
  ad::Param* poi_linear_b = nullptr;  // 1 x d_poi
  ad::Param* proj_h_w1 = nullptr;   // concat x 2*d_model
  ad::Param* proj_h_b1 = nullptr;
  ad::Param* proj_h_w2 = nullptr;   // 2*d_model x d_model
  ad::Param* proj_h_b2 = nullptr;
  ad::Param* proj_c_w1 = nullptr;
  ad::Param* proj_c_b1 = nullptr;
  ad::Param* proj_c_w2 = nullptr;
  ad::Param* proj_c_b2 = nullptr;
};

// Clip-and-scale into [0, 1] against the training-split bounds.
double normalize_duration(double minutes, const ingest::DurationBounds& b);

// Per-record concatenated feature vectors: len x concat_width.
ad::Tape::Id embed_records(ad::Tape& tape, const FeatureParams& params,
                           const FeatureConfig& cfg, const AblationFlags& ab,
                           const BranchInputs& in);

// Branch projection to model width (Eq. 3 analogue); history and current use
// disjoint parameters.
ad::Tape::Id project_content(ad::Tape& tape, const FeatureParams& params,
                             ad::Tape::Id vecs, bool history);

// Elementwise sum of the content and POI branch embeddings.
ad::Tape::Id compose_final(ad::Tape& tape, ad::Tape::Id content,
                           ad::Tape::Id poi_branch);

}  // namespace nextloc::features
