#include "avmoe/data/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>

using namespace avmoe;
using namespace avmoe::data;

TEST(GeneratePair, ZeroNoiseFramesAreCodebookRows) {
  GeneratorConfig cfg;
  cfg.audio_noise = cfg.video_noise = 0.0;
  const Codebooks books = make_codebooks(cfg);
  const SyntheticPair p = generate_pair(cfg, books, 6, 3);
  ASSERT_EQ(p.frames(), 6 * cfg.frames_per_token);
  for (Index t = 0; t < p.frames(); ++t) {
    const int label = p.labels[static_cast<std::size_t>(t / cfg.frames_per_token)];
    EXPECT_EQ(RowVector(p.audio.row(t)), RowVector(books.audio.row(label)));
    EXPECT_EQ(RowVector(p.video.row(t)), RowVector(books.video.row(label)));
  }
}

TEST(GeneratePair, SameSeedIsBitIdentical) {
  GeneratorConfig cfg;
  const SyntheticPair a = generate_pair(cfg, 8, 42), b = generate_pair(cfg, 8, 42);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.audio, b.audio);
  EXPECT_EQ(a.video, b.video);
}

TEST(GeneratePair, RejectsEmpty) {
  EXPECT_THROW(generate_pair(GeneratorConfig{}, 0, 1), PreconditionError);
  GeneratorConfig bad;
  bad.vocab = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(GeneratePair, NearestCentroidRecoversLabels) {
  GeneratorConfig cfg;
  const Codebooks books = make_codebooks(cfg);
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const SyntheticPair p = generate_pair(cfg, books, 5, s);
    ASSERT_EQ(decode_labels(p.audio, books.audio, cfg.frames_per_token), p.labels) << s;
    ASSERT_EQ(decode_labels(p.video, books.video, cfg.frames_per_token), p.labels) << s;
  }
}

TEST(GeneratePair, DecodeErrorGrowsWithNoise) {
  double previous = -1.0;
  for (double sigma : {0.0, 0.5, 1.0, 2.0}) {
    GeneratorConfig cfg;
    cfg.audio_noise = sigma;
    cfg.frames_per_token = 1;
    const Codebooks books = make_codebooks(cfg);
    std::size_t wrong = 0, total = 0;
    for (std::uint64_t s = 0; s < 1000; ++s) {
      const SyntheticPair p = generate_pair(cfg, books, 4, 1000 + s);
      const std::vector<int> ids = nearest_centroid(p.audio, books.audio);
      for (std::size_t i = 0; i < ids.size(); ++i) wrong += ids[i] != p.labels[i];
      total += ids.size();
    }
    const double rate = double(wrong) / double(total);
    EXPECT_GE(rate, previous) << sigma;
    previous = rate;
  }
  EXPECT_GT(previous, 0.0);
}

TEST(TokenErrorRate, Closed) {
  EXPECT_EQ(token_error_rate({1, 2, 3}, {1, 2, 3}), 0.0);
  EXPECT_EQ(token_error_rate({}, {4, 5, 6, 7}), 1.0);
  EXPECT_DOUBLE_EQ(token_error_rate({0, 9, 2, 7}, {0, 1, 2}), 2.0 / 3.0);
  EXPECT_THROW(token_error_rate({1}, {}), PreconditionError);
  EXPECT_GT(token_error_rate({1, 1, 1, 1}, {2}), 1.0);
}

namespace {

/// Full-table Levenshtein distance written independently of the library.
std::size_t full_table_distance(const Tokens& a, const Tokens& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
  return d[a.size()][b.size()];
}

void all_sequences(int max_len, const std::function<void(const Tokens&)>& visit) {
  Tokens s;
  std::function<void()> rec = [&] {
    visit(s);
    if (static_cast<int>(s.size()) == max_len) return;
    for (int c = 0; c < 3; ++c) {
      s.push_back(c);
      rec();
      s.pop_back();
    }
  };
  rec();
}

}  // namespace

TEST(TokenErrorRate, ExhaustiveAgainstFullTable) {
  std::vector<Tokens> seqs;
  all_sequences(6, [&](const Tokens& s) { seqs.push_back(s); });
  ASSERT_EQ(seqs.size(), 1093u);
  for (const Tokens& ref : seqs) {
    if (ref.empty()) continue;
    for (const Tokens& hyp : seqs)
      ASSERT_DOUBLE_EQ(token_error_rate(hyp, ref) * double(ref.size()), double(full_table_distance(hyp, ref)));
  }
}

TEST(Jsonl, RoundTrip) {
  GeneratorConfig cfg;
  const std::vector<SyntheticPair> pairs = generate_pairs(cfg, 3, 4, 100);
  EXPECT_EQ(pairs[2].seed, 102u);
  const auto path = std::filesystem::temp_directory_path() / "avmoe_pairs.jsonl";
  write_jsonl(path, pairs);
  const std::vector<SyntheticPair> back = read_jsonl(path);
  ASSERT_EQ(back.size(), pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    EXPECT_EQ(back[i].labels, pairs[i].labels);
    EXPECT_EQ(back[i].audio, pairs[i].audio);
    EXPECT_EQ(back[i].video, pairs[i].video);
    EXPECT_EQ(back[i].seed, pairs[i].seed);
  }
  std::filesystem::remove(path);
}
