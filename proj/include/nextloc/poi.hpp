// POI category catalog with natural-language descriptions, per-location
// frequency profiles, and the semantic POI embedding stages: frequency-
// weighted sums of token-embedded category descriptions, pooled and
// projected to model width, with separate history/current branch heads.
//
// File formats (version line `#nextloc-format v1` first):
//   catalog   category_id,name,description     (description may be quoted)
//   profiles  location_id,category_id,count
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nextloc/ad.hpp"
#include "nextloc/ingest.hpp"

namespace nextloc::poi {

struct Category {
  int id = 0;
  std::string name;
  std::string description;
};

struct Catalog {
  std::vector<Category> categories;  // dense ids 0..r-1
  int size() const { return static_cast<int>(categories.size()); }
};

struct Profile {
  std::vector<double> freq;  // length r, nonnegative
};

inline constexpr int kPadToken = 0;

// Deterministic lowercase word splitter hashed into a fixed vocabulary;
// token 0 is reserved for padding. Output has exactly `len` entries.
std::vector<int> tokenize(std::string_view text, int len, int vocab);

// Token sequences for every category description, each of length `len`.
std::vector<std::vector<int>> category_tokens(const Catalog& catalog, int len,
                                              int vocab);

// The five-category default catalog used by the synthetic benchmark.
Catalog default_catalog();

// ---- embedding graph builders ----
// Parameters involved: token_table (V x d_model), poi.pool.* (pooling MLP),
// poi.head_h.* / poi.head_c.* (branch heads). The MLPs are two-layer tanh
// perceptrons applied row-wise.

struct EmbedderParams {
  ad::Param* token_table = nullptr;
  ad::Param* pool_w1 = nullptr;
  ad::Param* pool_b1 = nullptr;
  ad::Param* pool_w2 = nullptr;
  ad::Param* pool_b2 = nullptr;
  ad::Param* head_h_w1 = nullptr;
  ad::Param* head_h_b1 = nullptr;
  ad::Param* head_h_w2 = nullptr;
  ad::Param* head_h_b2 = nullptr;
  ad::Param* head_c_w1 = nullptr;
  ad::Param* head_c_b1 = nullptr;
  ad::Param* head_c_w2 = nullptr;
  ad::Param* head_c_b2 = nullptr;
};

// Token-table rows for one category's description: len x d_model.
ad::Tape::Id category_semantic_embedding(ad::Tape& tape,
                                         const EmbedderParams& params,
                                         const std::vector<int>& tokens);

// Frequency-weighted sum of category embeddings (the pre-pooling tensor,
// len x d_model). Linear in freq.
ad::Tape::Id weighted_category_sum(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens, const Profile& profile,
    bool normalize_freq);

// Full location-level embedding: weighted sum, mean-pooled over the token
// axis, then the pooling perceptron; 1 x d_model.
ad::Tape::Id location_poi_embedding(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens, const Profile& profile,
    bool normalize_freq);

// Stacked per-record location embeddings passed through one branch head;
// len(profiles) x d_model. `history` selects the head.
ad::Tape::Id trajectory_poi_embedding(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens,
    std::span<const Profile* const> profiles, bool normalize_freq,
    bool history);

// ---- file I/O ----

Catalog read_catalog(const std::filesystem::path& path);
void write_catalog(const std::filesystem::path& path, const Catalog& catalog);

// Profiles aligned with the given location ids; absent entries stay zero.
std::vector<Profile> read_profiles(const std::filesystem::path& path,
                                   std::span<const ingest::Location> locations,
                                   int num_categories);
void write_profiles(const std::filesystem::path& path,
                    std::span<const ingest::Location> locations,
                    std::span<const Profile> profiles);

}  // namespace nextloc::poi
