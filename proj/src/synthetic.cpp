#include "avmoe/data/synthetic.hpp"

#include "avmoe/core/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace avmoe::data {

using nlohmann::json;

void GeneratorConfig::validate() const {
  if (vocab < 2) throw ConfigError("generator: vocab must be >= 2");
  if (frames_per_token < 1) throw ConfigError("generator: frames_per_token must be >= 1");
  if (audio_dim < 1 || video_dim < 1) throw ConfigError("generator: frame dims must be positive");
  if (audio_noise < 0 || video_noise < 0) throw ConfigError("generator: noise scales must be >= 0");
}

Codebooks make_codebooks(const GeneratorConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed(cfg.codebook_seed, "codebook"));
  Codebooks books;
  books.audio = random_orthonormal(cfg.vocab, cfg.audio_dim, rng);
  books.video = random_orthonormal(cfg.vocab, cfg.video_dim, rng);
  return books;
}

SyntheticPair generate_pair(const GeneratorConfig& cfg, const Codebooks& books, int length,
                            std::uint64_t seed) {
  if (length < 1) throw PreconditionError("generate_pair: length must be >= 1");
  cfg.validate();
  Rng rng(seed);
  SyntheticPair pair;
  pair.seed = seed;
  pair.frames_per_token = cfg.frames_per_token;
  pair.labels.resize(static_cast<std::size_t>(length));
  for (int& id : pair.labels) id = rng.uniform_int(0, cfg.vocab - 1);

  const Index frames = Index(length) * cfg.frames_per_token;
  pair.audio.resize(frames, cfg.audio_dim);
  pair.video.resize(frames, cfg.video_dim);
  for (Index t = 0; t < frames; ++t) {
    const int label = pair.labels[static_cast<std::size_t>(t / cfg.frames_per_token)];
    pair.audio.row(t) = books.audio.row(label);
    pair.video.row(t) = books.video.row(label);
  }
  // Noise is drawn after the labels in a fixed order so zero-noise frames are
  // exact codebook rows and the stream stays reproducible.
  for (Index i = 0; i < pair.audio.size(); ++i) pair.audio.data()[i] += cfg.audio_noise * rng.normal();
  for (Index i = 0; i < pair.video.size(); ++i) pair.video.data()[i] += cfg.video_noise * rng.normal();
  return pair;
}

SyntheticPair generate_pair(const GeneratorConfig& cfg, int length, std::uint64_t seed) {
  return generate_pair(cfg, make_codebooks(cfg), length, seed);
}

std::vector<SyntheticPair> generate_pairs(const GeneratorConfig& cfg, int length, int count,
                                          std::uint64_t base_seed) {
  const Codebooks books = make_codebooks(cfg);
  std::vector<SyntheticPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_pair(cfg, books, length, base_seed + std::uint64_t(i)));
  return out;
}

std::vector<int> nearest_centroid(const Matrix& frames, const Matrix& codebook) {
  if (frames.cols() != codebook.cols())
    throw DimensionError("nearest_centroid: frames " + shape_string(frames) + " vs codebook " +
                         shape_string(codebook));
  std::vector<int> ids(static_cast<std::size_t>(frames.rows()));
  for (Index t = 0; t < frames.rows(); ++t) {
    Index best = 0;
    double best_dist = (frames.row(t) - codebook.row(0)).squaredNorm();
    for (Index k = 1; k < codebook.rows(); ++k) {
      const double d = (frames.row(t) - codebook.row(k)).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = k;
      }
    }
    ids[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return ids;
}

Tokens decode_labels(const FrameSeq& frames, const Matrix& codebook, int frames_per_token) {
  if (frames_per_token < 1 || frames.rows() % frames_per_token != 0)
    throw PreconditionError("decode_labels: frame count is not a multiple of frames_per_token");
  const std::vector<int> per_frame = nearest_centroid(frames, codebook);
  Tokens labels;
  std::vector<int> votes(static_cast<std::size_t>(codebook.rows()));
  for (std::size_t start = 0; start < per_frame.size(); start += std::size_t(frames_per_token)) {
    std::fill(votes.begin(), votes.end(), 0);
    for (int j = 0; j < frames_per_token; ++j) ++votes[static_cast<std::size_t>(per_frame[start + std::size_t(j)])];
    labels.push_back(static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin()));
  }
  return labels;
}

std::size_t edit_distance(const Tokens& hyp, const Tokens& ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

double token_error_rate(const Tokens& hyp, const Tokens& ref) {
  if (ref.empty()) throw PreconditionError("token_error_rate: reference is empty");
  return double(edit_distance(hyp, ref)) / double(ref.size());
}

namespace {

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Matrix matrix_from_json(const json& j) {
  const Index rows = static_cast<Index>(j.size());
  const Index cols = rows == 0 ? 0 : static_cast<Index>(j.front().size());
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const json& row = j.at(static_cast<std::size_t>(r));
    if (static_cast<Index>(row.size()) != cols) throw ParseError("ragged frame matrix in dataset");
    for (Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

}  // namespace

void write_jsonl(const std::filesystem::path& path, const std::vector<SyntheticPair>& pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  for (const SyntheticPair& p : pairs) {
    json j;
    j["labels"] = p.labels;
    j["audio"] = matrix_to_json(p.audio);
    j["video"] = matrix_to_json(p.video);
    j["frames_per_token"] = p.frames_per_token;
    j["seed"] = p.seed;
    out << j.dump() << '\n';
  }
}

std::vector<SyntheticPair> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<SyntheticPair> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      SyntheticPair p;
      p.labels = j.at("labels").get<Tokens>();
      p.audio = matrix_from_json(j.at("audio"));
      p.video = matrix_from_json(j.at("video"));
      p.frames_per_token = j.value("frames_per_token", 1);
      p.seed = j.at("seed").get<std::uint64_t>();
      if (p.audio.rows() != Index(p.labels.size()) * p.frames_per_token || p.video.rows() != p.audio.rows())
        throw ParseError("frame count does not match labels");
      pairs.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace avmoe::data
