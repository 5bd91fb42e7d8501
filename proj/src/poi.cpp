#include "nextloc/poi.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <unordered_map>

namespace nextloc::poi {

namespace {

constexpr std::string_view kFormatLine = "#nextloc-format v1";

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

// Two-layer tanh perceptron applied row-wise.
ad::Tape::Id mlp(ad::Tape& tape, ad::Tape::Id x, ad::Param& w1, ad::Param& b1,
                 ad::Param& w2, ad::Param& b2) {
  auto h = tape.tanh_of(tape.add_row(tape.matmul(x, tape.param(w1)),
                                     tape.param(b1)));
  return tape.add_row(tape.matmul(h, tape.param(w2)), tape.param(b2));
}

// CSV splitter with double-quote support for the description field.
std::vector<std::string> split_quoted_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::ifstream open_versioned(const std::filesystem::path& path,
                             std::string& header_out) {
  std::ifstream in(path);
  if (!in) throw ingest::DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) {
    throw ingest::DataError("empty file " + path.string());
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kFormatLine) {
    throw ingest::DataError(path.string() + ": missing '" +
                            std::string(kFormatLine) + "' header");
  }
  if (!std::getline(in, header_out)) {
    throw ingest::DataError(path.string() + ": missing column header");
  }
  if (!header_out.empty() && header_out.back() == '\r') header_out.pop_back();
  return in;
}

}  // namespace

std::vector<int> tokenize(std::string_view text, int len, int vocab) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(len));
  std::string word;
  auto flush = [&]() {
    if (!word.empty() && static_cast<int>(out.size()) < len) {
      // Reserve id 0 for padding; hash words into 1..vocab-1.
      out.push_back(1 + static_cast<int>(fnv1a(word) %
                                         static_cast<std::uint64_t>(vocab - 1)));
    }
    word.clear();
  };
  for (char c : text) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      word.push_back(static_cast<char>(
          std::tolower(static_cast<unsigned char>(c))));
    } else {
      flush();
    }
  }
  flush();
  out.resize(static_cast<std::size_t>(len), kPadToken);
  return out;
}

std::vector<std::vector<int>> category_tokens(const Catalog& catalog, int len,
                                              int vocab) {
  std::vector<std::vector<int>> out;
  out.reserve(catalog.categories.size());
  for (const auto& cat : catalog.categories) {
    out.push_back(tokenize(cat.description, len, vocab));
  }
  return out;
}

Catalog default_catalog() {
  Catalog c;
  c.categories = {
      {0, "Entertainment",
       "Entertainment: This category combines scenic spots with sports and "
       "recreation services for leisure activities."},
      {1, "Commercial",
       "Commercial: It includes businesses, financial services, automotive, "
       "shopping, and dining services."},
      {2, "Education",
       "Education: This category covers institutions which involved in "
       "science, education, and cultural services."},
      {3, "Public Service",
       "Public Service: including government, daily services, healthcare, "
       "transport, and public infrastructure."},
      {4, "Residential",
       "Residential: This category comprises accommodation services and "
       "mixed-use commercial and residential areas."},
  };
  return c;
}

ad::Tape::Id category_semantic_embedding(ad::Tape& tape,
                                         const EmbedderParams& params,
                                         const std::vector<int>& tokens) {
  return tape.gather_rows(tape.param(*params.token_table), tokens);
}

ad::Tape::Id weighted_category_sum(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens, const Profile& profile,
    bool normalize_freq) {
  if (profile.freq.size() != cat_tokens.size()) {
    throw ingest::DataError("poi: profile length does not match catalog");
  }
  std::vector<double> coeffs = profile.freq;
  if (normalize_freq) {
    double total = 0.0;
    for (double f : coeffs) total += f;
    if (total > 0.0) {
      for (double& f : coeffs) f /= total;
    }
  }
  std::vector<ad::Tape::Id> parts;
  parts.reserve(cat_tokens.size());
  for (const auto& tokens : cat_tokens) {
    parts.push_back(category_semantic_embedding(tape, params, tokens));
  }
  return tape.lincomb(parts, coeffs);
}

ad::Tape::Id location_poi_embedding(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens, const Profile& profile,
    bool normalize_freq) {
  auto init =
      weighted_category_sum(tape, params, cat_tokens, profile, normalize_freq);
  auto pooled = tape.row_mean(init);
  return mlp(tape, pooled, *params.pool_w1, *params.pool_b1, *params.pool_w2,
             *params.pool_b2);
}

ad::Tape::Id trajectory_poi_embedding(
    ad::Tape& tape, const EmbedderParams& params,
    const std::vector<std::vector<int>>& cat_tokens,
    std::span<const Profile* const> profiles, bool normalize_freq,
    bool history) {
  if (profiles.empty()) {
    throw ingest::DataError("poi: empty trajectory");
  }
  // The location-level embedding depends only on the profile, so repeated
  // visits reuse one subgraph.
  std::unordered_map<const Profile*, ad::Tape::Id> memo;
  std::vector<ad::Tape::Id> rows;
  rows.reserve(profiles.size());
  for (const Profile* p : profiles) {
    auto it = memo.find(p);
    if (it == memo.end()) {
      it = memo.emplace(p, location_poi_embedding(tape, params, cat_tokens,
                                                  *p, normalize_freq))
               .first;
    }
    rows.push_back(it->second);
  }
  auto stacked = tape.concat_rows(rows);
  if (history) {
    return mlp(tape, stacked, *params.head_h_w1, *params.head_h_b1,
               *params.head_h_w2, *params.head_h_b2);
  }
  return mlp(tape, stacked, *params.head_c_w1, *params.head_c_b1,
             *params.head_c_w2, *params.head_c_b2);
}

Catalog read_catalog(const std::filesystem::path& path) {
  std::string header;
  std::ifstream in = open_versioned(path, header);
  if (header != "category_id,name,description") {
    throw ingest::DataError(path.string() + ": unexpected catalog header");
  }
  Catalog catalog;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_quoted_csv(line);
    if (f.size() != 3) {
      throw ingest::DataError(path.string() + ": bad catalog row");
    }
    Category cat;
    cat.id = std::stoi(f[0]);
    cat.name = f[1];
    cat.description = f[2];
    if (cat.description.empty()) {
      throw ingest::DataError(path.string() + ": empty description for '" +
                              cat.name + "'");
    }
    catalog.categories.push_back(std::move(cat));
  }
  std::sort(catalog.categories.begin(), catalog.categories.end(),
            [](const Category& a, const Category& b) { return a.id < b.id; });
  for (int i = 0; i < catalog.size(); ++i) {
    if (catalog.categories[static_cast<std::size_t>(i)].id != i) {
      throw ingest::DataError(path.string() +
                              ": category ids must be dense from 0");
    }
  }
  return catalog;
}

void write_catalog(const std::filesystem::path& path, const Catalog& catalog) {
  std::ofstream out(path);
  if (!out) throw ingest::DataError("cannot write " + path.string());
  out << kFormatLine << "\n";
  out << "category_id,name,description\n";
  for (const auto& cat : catalog.categories) {
    std::string desc = cat.description;
    std::string quoted;
    quoted.reserve(desc.size() + 2);
    quoted.push_back('"');
    for (char c : desc) {
      if (c == '"') quoted.push_back('"');
      quoted.push_back(c);
    }
    quoted.push_back('"');
    out << cat.id << ',' << cat.name << ',' << quoted << "\n";
  }
}

std::vector<Profile> read_profiles(const std::filesystem::path& path,
                                   std::span<const ingest::Location> locations,
                                   int num_categories) {
  std::string header;
  std::ifstream in = open_versioned(path, header);
  if (header != "location_id,category_id,count") {
    throw ingest::DataError(path.string() + ": unexpected profile header");
  }
  std::unordered_map<std::int64_t, std::size_t> index;
  for (std::size_t i = 0; i < locations.size(); ++i) {
    index.emplace(locations[i].id, i);
  }
  std::vector<Profile> profiles(locations.size());
  for (auto& p : profiles) {
    p.freq.assign(static_cast<std::size_t>(num_categories), 0.0);
  }
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_quoted_csv(line);
    if (f.size() != 3) {
      throw ingest::DataError(path.string() + ": bad profile row");
    }
    const std::int64_t loc_id = std::stoll(f[0]);
    const int cat = std::stoi(f[1]);
    const double count = std::stod(f[2]);
    auto it = index.find(loc_id);
    if (it == index.end()) {
      throw ingest::DataError(path.string() + ": profile references unknown "
                              "location " + f[0]);
    }
    if (cat < 0 || cat >= num_categories || count < 0) {
      throw ingest::DataError(path.string() + ": bad profile entry: " + line);
    }
    profiles[it->second].freq[static_cast<std::size_t>(cat)] += count;
  }
  return profiles;
}

void write_profiles(const std::filesystem::path& path,
                    std::span<const ingest::Location> locations,
                    std::span<const Profile> profiles) {
  std::ofstream out(path);
  if (!out) throw ingest::DataError("cannot write " + path.string());
  out << kFormatLine << "\n";
  out << "location_id,category_id,count\n";
  out.precision(17);
  for (std::size_t i = 0; i < locations.size(); ++i) {
    const auto& freq = profiles[i].freq;
    for (std::size_t c = 0; c < freq.size(); ++c) {
      if (freq[c] != 0.0) {
        out << locations[i].id << ',' << c << ',' << freq[c] << "\n";
      }
    }
  }
}

}  // namespace nextloc::poi
