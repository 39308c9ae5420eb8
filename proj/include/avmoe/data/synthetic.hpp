#pragma once

#include "avmoe/core/types.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace avmoe::data {

/// T x D frame matrix, one row per frame.
using FrameSeq = Matrix;
using Tokens = std::vector<int>;

struct GeneratorConfig {
  int vocab = 16;
  int frames_per_token = 4;
  int audio_dim = 16;
  int video_dim = 16;
  double audio_noise = 0.1;
  double video_noise = 0.1;
  std::uint64_t codebook_seed = 7;

  void validate() const;
};

struct Codebooks {
  Matrix audio;  ///< vocab x audio_dim
  Matrix video;  ///< vocab x video_dim
};

/// Orthonormalized random codebooks, a pure function of the config.
Codebooks make_codebooks(const GeneratorConfig& cfg);

struct SyntheticPair {
  Tokens labels;
  FrameSeq audio;
  FrameSeq video;
  int frames_per_token = 1;
  std::uint64_t seed = 0;

  Index frames() const { return audio.rows(); }
};

/// Labels uniform over the vocabulary; every label spans frames_per_token
/// frames of its codebook row plus isotropic Gaussian noise per modality.
SyntheticPair generate_pair(const GeneratorConfig& cfg, const Codebooks& books, int length,
                            std::uint64_t seed);
SyntheticPair generate_pair(const GeneratorConfig& cfg, int length, std::uint64_t seed);

/// Pairs with seeds base_seed, base_seed + 1, ...
std::vector<SyntheticPair> generate_pairs(const GeneratorConfig& cfg, int length, int count,
                                          std::uint64_t base_seed);

/// Index of the nearest codebook row for every frame (lowest id on ties).
std::vector<int> nearest_centroid(const Matrix& frames, const Matrix& codebook);

/// Per-token majority vote over nearest-centroid frame decisions.
Tokens decode_labels(const FrameSeq& frames, const Matrix& codebook, int frames_per_token);

std::size_t edit_distance(const Tokens& hyp, const Tokens& ref);

/// (substitutions + deletions + insertions) / |ref|.
double token_error_rate(const Tokens& hyp, const Tokens& ref);

void write_jsonl(const std::filesystem::path& path, const std::vector<SyntheticPair>& pairs);
std::vector<SyntheticPair> read_jsonl(const std::filesystem::path& path);

}  // namespace avmoe::data
