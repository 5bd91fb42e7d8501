#include "nextloc/features.hpp"

#include <algorithm>

namespace nextloc::features {

double normalize_duration(double minutes, const ingest::DurationBounds& b) {
  if (!(b.min_min < b.max_min)) {
    throw ingest::DataError("duration bounds: min must be < max");
  }
  const double scaled = (minutes - b.min_min) / (b.max_min - b.min_min);
  return std::clamp(scaled, 0.0, 1.0);
}

ad::Tape::Id embed_records(ad::Tape& tape, const FeatureParams& params,
                           const FeatureConfig& cfg, const AblationFlags& ab,
                           const BranchInputs& in) {
  const int len = in.len();
  if (len < 1) throw ingest::DataError("embed_records: empty branch");
  if (static_cast<int>(in.xy.size()) != 2 * len ||
      static_cast<int>(in.day.size()) != len ||
      static_cast<int>(in.dur01.size()) != len) {
    throw ingest::DataError("embed_records: inconsistent input lengths");
  }
  for (int i = 0; i < len; ++i) {
    if (in.hour[static_cast<std::size_t>(i)] < 0 ||
        in.hour[static_cast<std::size_t>(i)] > 23 ||
        in.day[static_cast<std::size_t>(i)] < 0 ||
        in.day[static_cast<std::size_t>(i)] > 7) {
      throw ingest::DataError("embed_records: hour/day slot out of range");
    }
  }

  ad::Mat xy(len, 2);
  std::copy(in.xy.begin(), in.xy.end(), xy.a.begin());
  auto seg_xy = tape.add_row(
      tape.matmul(tape.input(std::move(xy)), tape.param(*params.xy_w)),
      tape.param(*params.xy_b));

  ad::Tape::Id out = seg_xy;
  if (!ab.no_time) {
    auto seg_t = tape.gather_rows(tape.param(*params.time_table), in.hour);
    auto seg_d = tape.gather_rows(tape.param(*params.day_table), in.day);
    out = tape.concat_cols(tape.concat_cols(out, seg_t), seg_d);
  }
  if (!ab.no_duration) {
    ad::Mat dur(len, 1);
    std::copy(in.dur01.begin(), in.dur01.end(), dur.a.begin());
    auto seg_dur = tape.add_row(
        tape.matmul(tape.input(std::move(dur)), tape.param(*params.dur_w)),
        tape.param(*params.dur_b));
    out = tape.concat_cols(out, seg_dur);
  }
  if (ab.no_poi) {
    // Linear POI variant: the raw frequency vector enters the concatenation
    // through a single linear map.
    const ad::Mat& w = params.poi_linear_w->value;
    ad::Mat freq(len, w.rows);
    for (int i = 0; i < len; ++i) {
      const poi::Profile* p = in.profiles[static_cast<std::size_t>(i)];
      if (p == nullptr ||
          static_cast<int>(p->freq.size()) != w.rows) {
        throw ingest::DataError(
            "embed_records: linear POI variant needs profiles matching the "
            "catalog size");
      }
      std::copy(p->freq.begin(), p->freq.end(), freq.row(i));
    }
    auto seg_poi = tape.add_row(
        tape.matmul(tape.input(std::move(freq)),
                    tape.param(*params.poi_linear_w)),
        tape.param(*params.poi_linear_b));
    out = tape.concat_cols(out, seg_poi);
  }
  (void)cfg;
  return out;
}

ad::Tape::Id project_content(ad::Tape& tape, const FeatureParams& params,
                             ad::Tape::Id vecs, bool history) {
  ad::Param* w1 = history ? params.proj_h_w1 : params.proj_c_w1;
  ad::Param* b1 = history ? params.proj_h_b1 : params.proj_c_b1;
  ad::Param* w2 = history ? params.proj_h_w2 : params.proj_c_w2;
  ad::Param* b2 = history ? params.proj_h_b2 : params.proj_c_b2;
  auto hidden = tape.tanh_of(
      tape.add_row(tape.matmul(vecs, tape.param(*w1)), tape.param(*b1)));
  return tape.add_row(tape.matmul(hidden, tape.param(*w2)), tape.param(*b2));
}

ad::Tape::Id compose_final(ad::Tape& tape, ad::Tape::Id content,
                           ad::Tape::Id poi_branch) {
  return tape.add(content, poi_branch);
}

}  // namespace nextloc::features
