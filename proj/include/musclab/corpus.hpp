#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "musclab/errors.hpp"

namespace musclab {

enum class Language { source, target };
enum class TextKind { original, translated };

const char* to_string(Language lang);
const char* to_string(TextKind kind);
Language language_from_string(const std::string& s);
TextKind text_kind_from_string(const std::string& s);

// Token id layout: id 0 is the shared pad token, ids [1, V] are the source
// language, ids [V+1, 2V] the target language, where V = vocab_per_language.
// The last kArtifactTokensPerLanguage ids of each block are reserved artifact
// tokens that native text never produces.
inline constexpr int kPadToken = 0;
inline constexpr int kArtifactTokensPerLanguage = 4;

struct Example {
  std::vector<int> tokens;  // fixed length seq_len
  int label = 0;
  Language language = Language::source;
  TextKind text_kind = TextKind::original;
};

struct Dataset {
  std::string role;
  std::vector<Example> examples;

  int size() const { return static_cast<int>(examples.size()); }
};

// Interchangeable content tokens with a native and a translator preference.
// The two distributions have disjoint modes so translated text is
// statistically distinguishable from original text.
struct SynonymSet {
  std::vector<int> tokens;             // source-language ids
  std::vector<double> native_dist;     // preference when writing originals
  std::vector<double> translator_dist; // preference the translator imposes
};

struct WorldSpec {
  std::uint64_t seed = 0;
  int num_classes = 0;
  int vocab_per_language = 0;
  int seq_len = 0;

  // Per class, a categorical distribution over the full model vocabulary;
  // only source content ids carry mass.
  std::vector<std::vector<double>> class_token_dists;

  // Bijection between the language blocks (identity on pad): to_target maps
  // source ids into the target block, to_source is its inverse.
  std::vector<int> to_target;
  std::vector<int> to_source;

  std::vector<SynonymSet> synonym_sets;  // over source ids
  std::vector<int> group_of;             // model id -> synonym set index or -1

  std::vector<int> artifact_tokens_source;
  std::vector<int> artifact_tokens_target;

  int model_vocab_size() const { return 1 + 2 * vocab_per_language; }
  int content_tokens_per_language() const {
    return vocab_per_language - kArtifactTokensPerLanguage;
  }
  bool is_source_id(int id) const { return id >= 1 && id <= vocab_per_language; }
  bool is_target_id(int id) const {
    return id > vocab_per_language && id <= 2 * vocab_per_language;
  }
  bool is_artifact_id(int id) const;
};

struct ArtifactConfig {
  double p_art = 0.0;  // per-position artifact insertion probability
  double p_syn = 0.0;  // per-token translator-synonym replacement probability
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Direction { source_to_target, target_to_source };

// The six dataset roles. T_tst and S_tst_MT are index-aligned, as are S_trn,
// T_trn, T_trn_MT and T_trn_BT (all four share one label vector so any two of
// them can feed paired training batches).
struct RoleTable {
  Dataset s_trn;
  Dataset t_trn;
  Dataset t_trn_mt;
  Dataset t_trn_bt;
  Dataset t_tst;
  Dataset s_tst_mt;

  const Dataset& by_name(const std::string& role) const;
  static const std::vector<std::string>& role_names();
};

struct RoleSizes {
  int train = 0;
  int test = 0;
};

struct RoleSeeds {
  std::uint64_t s_trn, t_trn, t_tst;
  std::uint64_t trn_mt, bt_hop1, bt_hop2, tst_mt;

  static RoleSeeds from(std::uint64_t base);
};

WorldSpec generate_world(std::uint64_t seed, int num_classes, int vocab_per_language,
                         int seq_len);

Dataset sample_original(const WorldSpec& world, Language language, int n,
                        std::uint64_t seed);

// Like sample_original but with a caller-provided label vector, used to keep
// independently sampled roles index-aligned on labels.
Dataset sample_original_with_labels(const WorldSpec& world, Language language,
                                    const std::vector<int>& labels,
                                    std::uint64_t seed);

Dataset translate(const Dataset& dataset, const WorldSpec& world, Direction direction,
                  const ArtifactConfig& artifacts);

RoleTable build_roles(const WorldSpec& world, const RoleSizes& sizes,
                      const ArtifactConfig& artifacts, const RoleSeeds& seeds);

int count_artifact_tokens(const WorldSpec& world, const Dataset& dataset);

// Line format: role \t language \t text_kind \t label \t space-separated ids.
void write_dataset(std::ostream& out, const Dataset& dataset);
void write_dataset_file(const std::string& path, const Dataset& dataset);
Dataset read_dataset(std::istream& in);
Dataset read_dataset_file(const std::string& path);

}  // namespace musclab
