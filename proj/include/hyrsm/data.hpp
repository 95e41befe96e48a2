#pragma once

// Feature-sequence files, the dataset index and the synthetic corpus generator.
//
// Feature file (all little-endian):
//   offset 0  "FSEQ"
//   offset 4  u16 version (1)
//   offset 6  u32 T (frames)
//   offset 10 u32 C (channels)
//   offset 14 u16 dtype (0 = f32)
//   offset 16 T*C f32 values, row-major
//
// Index file: UTF-8, one JSON object per line:
//   {"id": "v00001", "label": "class_03" | null, "path": "features/v00001.fseq", "split": "meta-train"}
// Relative paths resolve against the index file's directory.

#include "hyrsm/core.hpp"
#include "hyrsm/io.hpp"

#include <json.hpp>

#include <filesystem>
#include <optional>

namespace hyrsm {

inline constexpr std::uint16_t kFeatureFileVersion = 1;
inline constexpr std::uint16_t kDtypeF32 = 0;
inline constexpr std::size_t kFeatureHeaderBytes = 16;

struct FeatureFileHeader {
  std::uint16_t version = kFeatureFileVersion;
  std::uint32_t frames = 0;
  std::uint32_t channels = 0;
  std::uint16_t dtype = kDtypeF32;
};

inline std::string encode_sequence(const FeatureSequence& f) {
  validate_sequence(f);
  std::string out = "FSEQ";
  detail::put_le(out, kFeatureFileVersion, 2);
  detail::put_le(out, static_cast<std::uint64_t>(f.frames.rows()), 4);
  detail::put_le(out, static_cast<std::uint64_t>(f.frames.cols()), 4);
  detail::put_le(out, kDtypeF32, 2);
  out.reserve(out.size() + static_cast<std::size_t>(f.frames.size()) * 4);
  for (Eigen::Index i = 0; i < f.frames.size(); ++i) detail::put_f32(out, static_cast<float>(f.frames.data()[i]));
  return out;
}

inline FeatureFileHeader decode_header(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "FSEQ") != 0) throw Error(ErrorCode::BadMagic, "missing FSEQ magic");
  if (bytes.size() < kFeatureHeaderBytes) throw Error(ErrorCode::TruncatedFile, "header shorter than 16 bytes");
  std::size_t pos = 4;
  FeatureFileHeader h;
  h.version = static_cast<std::uint16_t>(detail::get_le(bytes, pos, 2));
  h.frames = static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4));
  h.channels = static_cast<std::uint32_t>(detail::get_le(bytes, pos, 4));
  h.dtype = static_cast<std::uint16_t>(detail::get_le(bytes, pos, 2));
  if (h.version != kFeatureFileVersion)
    throw Error(ErrorCode::UnsupportedDtype, "feature file version " + std::to_string(h.version));
  if (h.dtype != kDtypeF32) throw Error(ErrorCode::UnsupportedDtype, "dtype code " + std::to_string(h.dtype));
  return h;
}

inline FeatureSequence decode_sequence(const std::string& bytes, std::string video_id = {}) {
  const FeatureFileHeader h = decode_header(bytes);
  const std::size_t payload = static_cast<std::size_t>(h.frames) * h.channels * 4;
  if (bytes.size() - kFeatureHeaderBytes < payload)
    throw Error(ErrorCode::TruncatedFile, "payload has " + std::to_string(bytes.size() - kFeatureHeaderBytes) +
                                              " bytes, expected " + std::to_string(payload));
  if (bytes.size() - kFeatureHeaderBytes > payload)
    throw Error(ErrorCode::IoError, "trailing bytes after payload");
  FeatureSequence f;
  f.video_id = std::move(video_id);
  f.frames.resize(h.frames, h.channels);
  std::size_t pos = kFeatureHeaderBytes;
  for (Eigen::Index i = 0; i < f.frames.size(); ++i) f.frames.data()[i] = detail::get_f32(bytes, pos);
  validate_sequence(f);
  return f;
}

inline void write_sequence(const std::string& path, const FeatureSequence& f) {
  detail::write_file(path, encode_sequence(f));
}

inline FeatureSequence read_sequence(const std::string& path, std::string video_id = {}) {
  if (video_id.empty()) video_id = std::filesystem::path(path).stem().string();
  return decode_sequence(detail::read_file(path), std::move(video_id));
}

// ---------------------------------------------------------------------------
// Dataset index
// ---------------------------------------------------------------------------

enum class Split { MetaTrain, MetaTest };

inline std::string_view split_name(Split s) { return s == Split::MetaTrain ? "meta-train" : "meta-test"; }

inline Split parse_split(std::string_view s) {
  if (s == "meta-train") return Split::MetaTrain;
  if (s == "meta-test") return Split::MetaTest;
  throw Error(ErrorCode::InvalidArgument, "unknown split '" + std::string(s) + "'");
}

struct IndexEntry {
  std::string id;
  std::optional<std::string> label;
  std::string path;
  Split split = Split::MetaTrain;
};

struct DatasetIndex {
  std::vector<IndexEntry> entries;
  std::filesystem::path base_dir;  // relative entry paths resolve against this

  std::string resolve(const IndexEntry& e) const {
    const std::filesystem::path p(e.path);
    return (p.is_absolute() ? p : base_dir / p).string();
  }

  DatasetIndex filter(Split split) const {
    DatasetIndex out;
    out.base_dir = base_dir;
    for (const auto& e : entries)
      if (e.split == split) out.entries.push_back(e);
    return out;
  }

  void validate() const {
    std::map<std::string, int> seen;
    for (const auto& e : entries)
      if (seen[e.id]++ > 0) throw Error(ErrorCode::InvalidArgument, "duplicate video id '" + e.id + "'");
  }

  LabelSpace label_space() const {
    std::vector<std::string> names;
    for (const auto& e : entries)
      if (e.label) names.push_back(*e.label);
    return LabelSpace(std::move(names));
  }
};

inline std::string index_to_string(const DatasetIndex& idx) {
  std::string out;
  for (const auto& e : idx.entries) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["label"] = e.label ? nlohmann::ordered_json(*e.label) : nlohmann::ordered_json(nullptr);
    j["path"] = e.path;
    j["split"] = split_name(e.split);
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline DatasetIndex parse_index(const std::string& text, std::filesystem::path base_dir = {}) {
  DatasetIndex idx;
  idx.base_dir = std::move(base_dir);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      IndexEntry e;
      e.id = j.at("id").get<std::string>();
      if (j.contains("label") && !j.at("label").is_null()) e.label = j.at("label").get<std::string>();
      e.path = j.at("path").get<std::string>();
      e.split = parse_split(j.at("split").get<std::string>());
      idx.entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw Error(ErrorCode::InvalidArgument, "index line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  idx.validate();
  return idx;
}

inline void write_index(const std::string& path, const DatasetIndex& idx) {
  detail::write_file(path, index_to_string(idx));
}

inline DatasetIndex read_index(const std::string& path) {
  return parse_index(detail::read_file(path), std::filesystem::path(path).parent_path());
}

/// Videos of one split held in memory, with labels mapped into `label_space`.
struct Dataset {
  std::vector<FeatureSequence> videos;
  std::vector<int> labels;  // kUnknownLabel for unlabeled entries
  LabelSpace label_space;

  std::size_t size() const noexcept { return videos.size(); }
};

inline Dataset load_dataset(const DatasetIndex& idx) {
  Dataset ds;
  ds.label_space = idx.label_space();
  for (const auto& e : idx.entries) {
    ds.videos.push_back(read_sequence(idx.resolve(e), e.id));
    ds.labels.push_back(e.label ? ds.label_space.index_of(*e.label) : kUnknownLabel);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Each class is an ordered list of `subactions` unit prototypes laid across the
/// frames in contiguous blocks. Misaligned videos permute the block order.
struct SynthSpec {
  int n_classes = 30;
  int test_classes = 6;  // the last `test_classes` classes form the meta-test split
  int videos_per_class = 30;
  int subactions = 4;
  int frames = 8;
  int channels = 64;
  Real misalignment_rate = 0.0;
  Real noise_sigma = 0.05;
  Real label_noise_rate = 0.0;
  // Per-video offset confined to the last `nuisance_dims` channels; class
  // prototypes then live only in the remaining channels. 0 disables it.
  Real nuisance_sigma = 0.0;
  int nuisance_dims = 0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 1 || videos_per_class < 1 || subactions < 1 || frames < 1 || channels < 1)
      throw Error(ErrorCode::InvalidArgument, "synthetic sizes must be positive");
    if (test_classes < 0 || test_classes > n_classes)
      throw Error(ErrorCode::InvalidArgument, "test_classes must lie in [0, n_classes]");
    if (subactions > frames) throw Error(ErrorCode::InvalidArgument, "more subactions than frames");
    auto rate = [](Real r) { return r >= 0.0 && r <= 1.0; };
    if (!rate(misalignment_rate) || !rate(label_noise_rate))
      throw Error(ErrorCode::InvalidArgument, "rates must lie in [0, 1]");
    if (!(noise_sigma >= 0.0) || !(nuisance_sigma >= 0.0))
      throw Error(ErrorCode::InvalidArgument, "noise scales must be nonnegative");
    if (nuisance_dims < 0 || nuisance_dims >= channels)
      throw Error(ErrorCode::InvalidArgument, "nuisance_dims must lie in [0, channels)");
  }
};

struct SyntheticCorpus {
  DatasetIndex index;
  std::vector<FeatureSequence> videos;  // parallel to index.entries, already f32-quantized
  std::vector<int> true_class;          // generating class per video
  std::vector<int> stored_class;        // class written to the index (after label noise)
  std::vector<bool> misaligned;
  std::vector<std::vector<Matrix>> prototypes;  // [class][subaction] 1 x C

  Dataset dataset(Split split) const {
    Dataset ds;
    const DatasetIndex sub = index.filter(split);
    ds.label_space = sub.label_space();
    for (std::size_t i = 0; i < videos.size(); ++i) {
      if (index.entries[i].split != split) continue;
      ds.videos.push_back(videos[i]);
      const auto& lbl = index.entries[i].label;
      ds.labels.push_back(lbl ? ds.label_space.index_of(*lbl) : kUnknownLabel);
    }
    return ds;
  }
};

inline std::string synth_class_name(int c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class_%03d", c);
  return buf;
}

inline std::string synth_video_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "v%06zu", i);
  return buf;
}

// Frame t belongs to block floor(t * L / T).
inline int subaction_of_frame(int t, int frames, int subactions) { return t * subactions / frames; }

inline SyntheticCorpus synthesize(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int signal = spec.channels - spec.nuisance_dims;
  SyntheticCorpus out;

  out.prototypes.resize(static_cast<std::size_t>(spec.n_classes));
  for (auto& cls : out.prototypes) {
    for (int s = 0; s < spec.subactions; ++s) {
      Matrix p = Matrix::Zero(1, spec.channels);
      for (int ch = 0; ch < signal; ++ch) p(0, ch) = rng.normal();
      p /= p.norm();
      cls.push_back(std::move(p));
    }
  }

  const int train_classes = spec.n_classes - spec.test_classes;
  for (int c = 0; c < spec.n_classes; ++c) {
    const bool is_train = c < train_classes;
    for (int v = 0; v < spec.videos_per_class; ++v) {
      std::vector<int> order(static_cast<std::size_t>(spec.subactions));
      for (int s = 0; s < spec.subactions; ++s) order[static_cast<std::size_t>(s)] = s;
      const bool mis = rng.uniform() < spec.misalignment_rate;
      if (mis) rng.shuffle(order);

      Matrix frames(spec.frames, spec.channels);
      for (int t = 0; t < spec.frames; ++t)
        frames.row(t) = out.prototypes[static_cast<std::size_t>(c)]
                                      [static_cast<std::size_t>(order[static_cast<std::size_t>(
                                          subaction_of_frame(t, spec.frames, spec.subactions))])];
      if (spec.noise_sigma > 0.0)
        for (Eigen::Index i = 0; i < frames.size(); ++i) frames.data()[i] += spec.noise_sigma * rng.normal();
      if (spec.nuisance_dims > 0 && spec.nuisance_sigma > 0.0) {
        RowVector offset(spec.channels);
        offset.setZero();
        for (int ch = signal; ch < spec.channels; ++ch) offset(ch) = spec.nuisance_sigma * rng.normal();
        frames.rowwise() += offset;
      }
      frames = frames.cast<float>().cast<Real>();

      int stored = c;
      if (rng.uniform() < spec.label_noise_rate) {
        const int lo = is_train ? 0 : train_classes;
        const int span = is_train ? train_classes : spec.test_classes;
        if (span > 1) {
          const int pick = lo + static_cast<int>(rng.index(static_cast<std::size_t>(span - 1)));
          stored = pick >= c ? pick + 1 : pick;
        }
      }

      const std::size_t idx = out.videos.size();
      IndexEntry e;
      e.id = synth_video_id(idx);
      e.label = synth_class_name(stored);
      e.path = "features/" + e.id + ".fseq";
      e.split = is_train ? Split::MetaTrain : Split::MetaTest;
      out.index.entries.push_back(e);
      out.videos.push_back({std::move(frames), e.id});
      out.true_class.push_back(c);
      out.stored_class.push_back(stored);
      out.misaligned.push_back(mis);
    }
  }
  return out;
}

/// Writes every video plus index.jsonl under `out_dir`; returns the index.
inline DatasetIndex generate_synthetic(const SynthSpec& spec, const std::string& out_dir) {
  SyntheticCorpus corpus = synthesize(spec);
  std::error_code ec;
  std::filesystem::create_directories(std::filesystem::path(out_dir) / "features", ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create '" + out_dir + "': " + ec.message());
  corpus.index.base_dir = out_dir;
  for (std::size_t i = 0; i < corpus.videos.size(); ++i)
    write_sequence(corpus.index.resolve(corpus.index.entries[i]), corpus.videos[i]);
  write_index((std::filesystem::path(out_dir) / "index.jsonl").string(), corpus.index);
  return corpus.index;
}

}  // namespace hyrsm
