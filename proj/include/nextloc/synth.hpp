// Synthetic-city benchmark generator: grid locations with virtual
// coordinates and archetype-drawn POI profiles, agents with home/work
// anchors, and a time-of-day / day-of-week dependent Markov schedule over
// {home, work, leisure, errand} states. Also the affine "clone city"
// transform used as the zero-shot test vehicle.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nextloc/dataset.hpp"

namespace nextloc::harness {

struct SynthCitySpec {
  int grid_rows = 10;
  int grid_cols = 10;
  double cell_m = 500.0;
  int n_agents = 200;
  int n_days = 28;
  double noise = 0.05;  // probability of a uniform-random state deviation
  std::uint64_t seed = 7;
  // Location archetype mix: residential, commercial, education, public,
  // entertainment.
  std::array<double, 5> archetype_mix{0.40, 0.25, 0.10, 0.10, 0.15};
};

enum class AgentState : int { kHome = 0, kWork = 1, kLeisure = 2, kErrand = 3 };
enum class TimeBucket : int {
  kNight = 0,    // [22, 6)
  kMorning = 1,  // [6, 10)
  kMidday = 2,   // [10, 16)
  kEvening = 3,  // [16, 22)
};

TimeBucket bucket_of_hour(int hour);

// kernel[weekend][bucket][state] -> distribution over the next state.
using Kernel =
    std::array<std::array<std::array<std::array<double, 4>, 4>, 4>, 2>;

// The base schedule kernel; weekday home->work and work(evening)->home are
// deterministic so a noise-free city cycles exactly.
const Kernel& base_kernel();

// (1 - noise) * base + noise * uniform.
Kernel effective_kernel(double noise);

// One drawn transition, recorded before any fallback re-mapping; used by the
// distribution tests.
struct Transition {
  bool weekend = false;
  TimeBucket bucket = TimeBucket::kNight;
  AgentState state = AgentState::kHome;
  AgentState drawn_next = AgentState::kHome;
};

// Deterministic for a given spec; visit records feed the standard pair
// builder and chronological split. Normalization is left unfitted
// (NormSource::kNone) for the experiment to designate.
ingest::CityDataset synth_generate(const SynthCitySpec& spec, int m, int n,
                                   int stride,
                                   std::vector<Transition>* trace = nullptr);

struct CloneTransform {
  double scale_x = 1.0;
  double scale_y = 1.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
};

// Same dynamics, affinely transformed coordinates, permuted ids;
// normalization refit on the clone with the source designation of the
// original (when it had one). id_permutation[i] is the new id of
// locations[i].
ingest::CityDataset clone_city(const ingest::CityDataset& city,
                               const CloneTransform& transform,
                               const std::vector<std::int64_t>& id_permutation);

// Convenience: write locations/visits/poi files into a directory.
void write_dataset(const ingest::CityDataset& city,
                   const std::filesystem::path& dir);

}  // namespace nextloc::harness
