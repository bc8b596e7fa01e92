#include "musclab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "musclab/rng.hpp"

namespace musclab {

namespace {

// Preference sharpness inside a synonym set. Natives favour one token of the
// pair, the translator strongly favours the other.
constexpr double kNativeMajor = 0.8;

// Share of class-distribution mass on the class-unique signal group; the rest
// spreads uniformly over the shared background groups.
constexpr double kSignalMass = 0.5;

}  // namespace

const char* to_string(Language lang) {
  return lang == Language::source ? "source" : "target";
}

const char* to_string(TextKind kind) {
  return kind == TextKind::original ? "original" : "translated";
}

Language language_from_string(const std::string& s) {
  if (s == "source") return Language::source;
  if (s == "target") return Language::target;
  throw IoError("unknown language: " + s);
}

TextKind text_kind_from_string(const std::string& s) {
  if (s == "original") return TextKind::original;
  if (s == "translated") return TextKind::translated;
  throw IoError("unknown text kind: " + s);
}

bool WorldSpec::is_artifact_id(int id) const {
  const int content = content_tokens_per_language();
  if (is_source_id(id)) return id > content;
  if (is_target_id(id)) return id > vocab_per_language + content;
  return false;
}

void ArtifactConfig::validate() const {
  if (p_art < 0.0 || p_art > 1.0)
    throw ConfigError("artifact probability p_art must be in [0,1]");
  if (p_syn < 0.0 || p_syn > 1.0)
    throw ConfigError("synonym probability p_syn must be in [0,1]");
}

const Dataset& RoleTable::by_name(const std::string& role) const {
  if (role == "S_trn") return s_trn;
  if (role == "T_trn") return t_trn;
  if (role == "T_trn_MT") return t_trn_mt;
  if (role == "T_trn_BT") return t_trn_bt;
  if (role == "T_tst") return t_tst;
  if (role == "S_tst_MT") return s_tst_mt;
  throw UsageError("unknown dataset role: " + role);
}

const std::vector<std::string>& RoleTable::role_names() {
  static const std::vector<std::string> names = {
      "S_trn", "T_trn", "T_trn_MT", "T_trn_BT", "T_tst", "S_tst_MT"};
  return names;
}

RoleSeeds RoleSeeds::from(std::uint64_t base) {
  RoleSeeds s{};
  s.s_trn = Rng::derive(base, 1);
  s.t_trn = Rng::derive(base, 2);
  s.t_tst = Rng::derive(base, 3);
  s.trn_mt = Rng::derive(base, 4);
  s.bt_hop1 = Rng::derive(base, 5);
  s.bt_hop2 = Rng::derive(base, 6);
  s.tst_mt = Rng::derive(base, 7);
  return s;
}

WorldSpec generate_world(std::uint64_t seed, int num_classes, int vocab_per_language,
                         int seq_len) {
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  if (vocab_per_language < 4 * num_classes)
    throw ConfigError("vocab_per_language must be >= 4 * num_classes");
  if (seq_len < 4) throw ConfigError("seq_len must be >= 4");

  WorldSpec w;
  w.seed = seed;
  w.num_classes = num_classes;
  w.vocab_per_language = vocab_per_language;
  w.seq_len = seq_len;

  const int content = w.content_tokens_per_language();
  const int vocab_model = w.model_vocab_size();

  // Language bijection: a seeded permutation inside the content range and a
  // separate one inside the artifact range, so artifacts map to artifacts.
  Rng map_rng(Rng::derive(seed, 101));
  w.to_target.assign(static_cast<std::size_t>(vocab_model), 0);
  w.to_source.assign(static_cast<std::size_t>(vocab_model), 0);
  for (int id = 0; id < vocab_model; ++id) {
    w.to_target[static_cast<std::size_t>(id)] = id;
    w.to_source[static_cast<std::size_t>(id)] = id;
  }
  const auto content_perm = map_rng.permutation(content);
  const auto artifact_perm = map_rng.permutation(kArtifactTokensPerLanguage);
  for (int i = 0; i < content; ++i) {
    const int src = 1 + i;
    const int tgt = 1 + vocab_per_language + content_perm[static_cast<std::size_t>(i)];
    w.to_target[static_cast<std::size_t>(src)] = tgt;
    w.to_source[static_cast<std::size_t>(tgt)] = src;
  }
  for (int i = 0; i < kArtifactTokensPerLanguage; ++i) {
    const int src = 1 + content + i;
    const int tgt = 1 + vocab_per_language + content +
                    artifact_perm[static_cast<std::size_t>(i)];
    w.to_target[static_cast<std::size_t>(src)] = tgt;
    w.to_source[static_cast<std::size_t>(tgt)] = src;
    w.artifact_tokens_source.push_back(src);
    w.artifact_tokens_target.push_back(tgt);
  }

  // Synonym sets: consecutive source content pairs; a trailing odd token
  // forms a singleton set with identical preferences.
  Rng syn_rng(Rng::derive(seed, 102));
  w.group_of.assign(static_cast<std::size_t>(vocab_model), -1);
  for (int start = 0; start < content; start += 2) {
    SynonymSet set;
    if (start + 1 < content) {
      const int a = 1 + start;
      const int b = 1 + start + 1;
      const bool a_native = syn_rng.bernoulli(0.5);
      set.tokens = {a, b};
      set.native_dist = a_native ? std::vector<double>{kNativeMajor, 1.0 - kNativeMajor}
                                 : std::vector<double>{1.0 - kNativeMajor, kNativeMajor};
      // Translator mode sits on the other token of the pair.
      set.translator_dist = a_native ? std::vector<double>{0.0, 1.0}
                                     : std::vector<double>{1.0, 0.0};
    } else {
      set.tokens = {1 + start};
      set.native_dist = {1.0};
      set.translator_dist = {1.0};
    }
    const int index = static_cast<int>(w.synonym_sets.size());
    for (std::size_t k = 0; k < set.tokens.size(); ++k) {
      const int src = set.tokens[k];
      w.group_of[static_cast<std::size_t>(src)] = index;
      w.group_of[static_cast<std::size_t>(w.to_target[static_cast<std::size_t>(src)])] =
          index;
    }
    w.synonym_sets.push_back(std::move(set));
  }

  // Class distributions: one signal group per class plus uniform mass over
  // the remaining background groups; within a group the native preference
  // applies. Distinct signal groups give every class a distinct modal token.
  Rng cls_rng(Rng::derive(seed, 103));
  const int num_groups = static_cast<int>(w.synonym_sets.size());
  const auto group_perm = cls_rng.permutation(num_groups);
  w.class_token_dists.assign(static_cast<std::size_t>(num_classes),
                             std::vector<double>(static_cast<std::size_t>(vocab_model), 0.0));
  const int num_background = num_groups - num_classes;
  for (int c = 0; c < num_classes; ++c) {
    auto& dist = w.class_token_dists[static_cast<std::size_t>(c)];
    const double signal_mass = num_background > 0 ? kSignalMass : 1.0;
    const int signal_group = group_perm[static_cast<std::size_t>(c)];
    const auto add_group = [&](int g, double mass) {
      const auto& set = w.synonym_sets[static_cast<std::size_t>(g)];
      for (std::size_t k = 0; k < set.tokens.size(); ++k)
        dist[static_cast<std::size_t>(set.tokens[k])] += mass * set.native_dist[k];
    };
    add_group(signal_group, signal_mass);
    if (num_background > 0) {
      const double background_each = (1.0 - signal_mass) / num_background;
      for (int g = num_classes; g < num_groups; ++g)
        add_group(group_perm[static_cast<std::size_t>(g)], background_each);
    }
  }
  return w;
}

namespace {

Dataset sample_impl(const WorldSpec& world, Language language,
                    const std::vector<int>* labels, int n, std::uint64_t seed) {
  Dataset ds;
  const int count = labels ? static_cast<int>(labels->size()) : n;
  ds.examples.reserve(static_cast<std::size_t>(count));
  Rng rng(seed);
  for (int i = 0; i < count; ++i) {
    Example ex;
    ex.label = labels ? (*labels)[static_cast<std::size_t>(i)]
                      : rng.uniform_int(world.num_classes);
    if (ex.label < 0 || ex.label >= world.num_classes)
      throw UsageError("label out of range for this world");
    ex.language = language;
    ex.text_kind = TextKind::original;
    ex.tokens.resize(static_cast<std::size_t>(world.seq_len));
    const auto& dist = world.class_token_dists[static_cast<std::size_t>(ex.label)];
    for (int l = 0; l < world.seq_len; ++l) {
      int token = rng.categorical(dist);
      if (language == Language::target)
        token = world.to_target[static_cast<std::size_t>(token)];
      ex.tokens[static_cast<std::size_t>(l)] = token;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace

Dataset sample_original(const WorldSpec& world, Language language, int n,
                        std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample size must be >= 1");
  return sample_impl(world, language, nullptr, n, seed);
}

Dataset sample_original_with_labels(const WorldSpec& world, Language language,
                                    const std::vector<int>& labels,
                                    std::uint64_t seed) {
  if (labels.empty()) throw ConfigError("label vector must be nonempty");
  return sample_impl(world, language, &labels, 0, seed);
}

Dataset translate(const Dataset& dataset, const WorldSpec& world, Direction direction,
                  const ArtifactConfig& artifacts) {
  artifacts.validate();
  const Language origin = direction == Direction::source_to_target
                              ? Language::source
                              : Language::target;
  const Language destination = direction == Direction::source_to_target
                                   ? Language::target
                                   : Language::source;
  const auto& map = direction == Direction::source_to_target ? world.to_target
                                                             : world.to_source;
  const auto& dest_artifacts = destination == Language::target
                                   ? world.artifact_tokens_target
                                   : world.artifact_tokens_source;

  Dataset out;
  out.examples.reserve(dataset.examples.size());
  Rng rng(artifacts.seed);
  for (const Example& ex : dataset.examples) {
    if (ex.language != origin)
      throw UsageError("translate: dataset language does not match direction origin");

    // Map every token, then apply the translator's synonym preference on the
    // destination side.
    std::vector<int> content(ex.tokens.size());
    for (std::size_t l = 0; l < ex.tokens.size(); ++l) {
      int token = map[static_cast<std::size_t>(ex.tokens[l])];
      const int group = world.group_of[static_cast<std::size_t>(token)];
      const bool replace = rng.bernoulli(artifacts.p_syn);
      if (replace && group >= 0) {
        const auto& set = world.synonym_sets[static_cast<std::size_t>(group)];
        std::size_t mode = 0;
        for (std::size_t k = 1; k < set.translator_dist.size(); ++k)
          if (set.translator_dist[k] > set.translator_dist[mode]) mode = k;
        int preferred = set.tokens[mode];
        if (destination == Language::target)
          preferred = world.to_target[static_cast<std::size_t>(preferred)];
        token = preferred;
      }
      content[l] = token;
    }

    // Artifact insertion: each output slot is an artifact with probability
    // p_art, otherwise the next content token; the displaced tail is
    // truncated so the sequence length stays fixed.
    Example translated;
    translated.label = ex.label;
    translated.language = destination;
    translated.text_kind = TextKind::translated;
    translated.tokens.resize(static_cast<std::size_t>(world.seq_len), kPadToken);
    std::size_t next = 0;
    for (int l = 0; l < world.seq_len; ++l) {
      const bool insert = rng.bernoulli(artifacts.p_art);
      if (insert) {
        translated.tokens[static_cast<std::size_t>(l)] =
            dest_artifacts[static_cast<std::size_t>(
                rng.uniform_int(static_cast<int>(dest_artifacts.size())))];
      } else if (next < content.size()) {
        translated.tokens[static_cast<std::size_t>(l)] = content[next++];
      } else {
        translated.tokens[static_cast<std::size_t>(l)] = kPadToken;
      }
    }
    out.examples.push_back(std::move(translated));
  }
  return out;
}

RoleTable build_roles(const WorldSpec& world, const RoleSizes& sizes,
                      const ArtifactConfig& artifacts, const RoleSeeds& seeds) {
  if (sizes.train < 1 || sizes.test < 1)
    throw ConfigError("role sizes must be positive");
  artifacts.validate();

  RoleTable roles;
  roles.s_trn = sample_original(world, Language::source, sizes.train, seeds.s_trn);
  roles.s_trn.role = "S_trn";

  std::vector<int> train_labels(static_cast<std::size_t>(sizes.train));
  for (int i = 0; i < sizes.train; ++i)
    train_labels[static_cast<std::size_t>(i)] =
        roles.s_trn.examples[static_cast<std::size_t>(i)].label;

  roles.t_trn =
      sample_original_with_labels(world, Language::target, train_labels, seeds.t_trn);
  roles.t_trn.role = "T_trn";

  ArtifactConfig mt = artifacts;
  mt.seed = seeds.trn_mt;
  roles.t_trn_mt = translate(roles.s_trn, world, Direction::source_to_target, mt);
  roles.t_trn_mt.role = "T_trn_MT";

  ArtifactConfig hop1 = artifacts;
  hop1.seed = seeds.bt_hop1;
  ArtifactConfig hop2 = artifacts;
  hop2.seed = seeds.bt_hop2;
  roles.t_trn_bt = translate(translate(roles.t_trn, world, Direction::target_to_source, hop1),
                             world, Direction::source_to_target, hop2);
  roles.t_trn_bt.role = "T_trn_BT";

  roles.t_tst = sample_original(world, Language::target, sizes.test, seeds.t_tst);
  roles.t_tst.role = "T_tst";

  ArtifactConfig tst = artifacts;
  tst.seed = seeds.tst_mt;
  roles.s_tst_mt = translate(roles.t_tst, world, Direction::target_to_source, tst);
  roles.s_tst_mt.role = "S_tst_MT";
  return roles;
}

int count_artifact_tokens(const WorldSpec& world, const Dataset& dataset) {
  int count = 0;
  for (const Example& ex : dataset.examples)
    for (const int token : ex.tokens)
      if (world.is_artifact_id(token)) ++count;
  return count;
}

void write_dataset(std::ostream& out, const Dataset& dataset) {
  for (const Example& ex : dataset.examples) {
    out << dataset.role << '\t' << to_string(ex.language) << '\t'
        << to_string(ex.text_kind) << '\t' << ex.label << '\t';
    for (std::size_t l = 0; l < ex.tokens.size(); ++l) {
      if (l) out << ' ';
      out << ex.tokens[l];
    }
    out << '\n';
  }
}

void write_dataset_file(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  write_dataset(out, dataset);
  if (!out) throw IoError("write failed: " + path);
}

Dataset read_dataset(std::istream& in) {
  Dataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string role, language, kind, label_text, tokens_text;
    if (!std::getline(fields, role, '\t') || !std::getline(fields, language, '\t') ||
        !std::getline(fields, kind, '\t') || !std::getline(fields, label_text, '\t') ||
        !std::getline(fields, tokens_text))
      throw IoError("malformed dataset line: " + line);
    if (ds.examples.empty()) ds.role = role;
    Example ex;
    ex.language = language_from_string(language);
    ex.text_kind = text_kind_from_string(kind);
    ex.label = std::stoi(label_text);
    std::istringstream tokens(tokens_text);
    int token = 0;
    while (tokens >> token) ex.tokens.push_back(token);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Dataset read_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open for reading: " + path);
  return read_dataset(in);
}

}  // namespace musclab
