// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Evaluation measures: class-based retrieval mAP, ROC AUC, and the text
// metrics used for report retrieval (BLEU-n, ROUGE-L, simplified METEOR).

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xtra/data.hpp"
#include "xtra/errors.hpp"

namespace xtra {

// ---------------------------------------------------------------------------
// Retrieval mAP

struct RankedRetrieval {
  Labels query{};
  std::vector<Labels> results;
};

// Average precision of `class_index` over the queries positive for it. A
// retrieved item is relevant iff it carries the class. Queries with no
// relevant result contribute 0. nullopt when no query is positive.
inline std::optional<double> class_average_precision(const std::vector<RankedRetrieval>& rankings,
                                                     std::size_t class_index) {
  if (class_index >= kNumClasses) throw ParameterError("class index out of range");
  double sum = 0.0;
  std::size_t positives = 0;
  for (const auto& r : rankings) {
    if (!r.query[class_index]) continue;
    ++positives;
    std::size_t hits = 0;
    double ap = 0.0;
    for (std::size_t j = 0; j < r.results.size(); ++j) {
      if (!r.results[j][class_index]) continue;
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(j + 1);
    }
    if (hits) sum += ap / static_cast<double>(hits);
  }
  if (positives == 0) return std::nullopt;
  return sum / static_cast<double>(positives);
}

// Per-class scores with a weighted (by positive count) and an unweighted
// average over the classes that are defined.
struct ClassTable {
  std::string metric;
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> per_class;
  std::vector<std::size_t> positives;
  double weighted_average = 0.0;
  double average = 0.0;

  void finalize() {
    double wsum = 0.0, wtotal = 0.0, sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      if (!per_class[c]) continue;
      ++defined;
      sum += *per_class[c];
      wsum += *per_class[c] * static_cast<double>(positives[c]);
      wtotal += static_cast<double>(positives[c]);
    }
    if (defined == 0) throw ValidationError(metric + ": every class is undefined (no positive examples)");
    average = sum / static_cast<double>(defined);
    weighted_average = wtotal > 0 ? wsum / wtotal : average;
  }
};

inline ClassTable map_table(const std::vector<RankedRetrieval>& rankings, const std::vector<std::string>& class_names) {
  if (class_names.size() != kNumClasses) throw DimensionError("map_table: expected 14 class names");
  ClassTable t;
  t.metric = "mAP";
  t.class_names = class_names;
  t.per_class.resize(kNumClasses);
  t.positives.assign(kNumClasses, 0);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (const auto& r : rankings) t.positives[c] += r.query[c];
    t.per_class[c] = class_average_precision(rankings, c);
  }
  t.finalize();
  return t;
}

// ---------------------------------------------------------------------------
// ROC AUC

// Mann-Whitney form: P(score_pos > score_neg) + 0.5 P(equal), computed from
// mid-ranks. nullopt when only one class is present.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> targets) {
  if (scores.size() != targets.size()) throw DimensionError("roc_auc: scores and targets differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (targets[order[k]]) {
        pos_rank_sum += mid_rank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double u = pos_rank_sum - static_cast<double>(n_pos) * static_cast<double>(n_pos + 1) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct ScoredPredictions {
  std::vector<std::array<double, kNumClasses>> scores;
  std::vector<Labels> targets;
};

inline ClassTable auc_table(const ScoredPredictions& p, const std::vector<std::string>& class_names) {
  if (p.scores.size() != p.targets.size()) throw DimensionError("auc_table: scores and targets differ in length");
  if (class_names.size() != kNumClasses) throw DimensionError("auc_table: expected 14 class names");
  ClassTable t;
  t.metric = "AUC";
  t.class_names = class_names;
  t.per_class.resize(kNumClasses);
  t.positives.assign(kNumClasses, 0);
  std::vector<double> s(p.scores.size());
  std::vector<std::uint8_t> y(p.scores.size());
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      s[i] = p.scores[i][c];
      y[i] = p.targets[i][c];
      t.positives[c] += y[i];
    }
    t.per_class[c] = roc_auc(s, y);
  }
  t.finalize();
  return t;
}

// ---------------------------------------------------------------------------
// Text metrics

// Lowercase, split on ASCII non-alphanumerics. Bytes >= 0x80 stay inside
// tokens so UTF-8 words survive intact.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u >= 0x80 || std::isalnum(u)) {
      cur.push_back(static_cast<char>(u < 0x80 ? std::tolower(u) : u));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

using Tokens = std::vector<std::string>;

namespace detail {
inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Tokens& t, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}
}  // namespace detail

// Sentence BLEU against one reference: geometric mean of clipped 1..n-gram
// precisions times the brevity penalty. No smoothing: any zero precision
// gives 0.
inline double bleu_n(const Tokens& candidate, const Tokens& reference, std::size_t n) {
  if (n < 1 || n > 4) throw ParameterError("bleu_n: n must be in 1..4");
  if (candidate.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t k = 1; k <= n; ++k) {
    if (candidate.size() < k) return 0.0;
    const auto cand = detail::ngram_counts(candidate, k);
    const auto ref = detail::ngram_counts(reference, k);
    std::size_t clipped = 0;
    for (const auto& [gram, count] : cand) {
      auto it = ref.find(gram);
      if (it != ref.end()) clipped += std::min(count, it->second);
    }
    if (clipped == 0) return 0.0;
    log_sum += std::log(static_cast<double>(clipped) / static_cast<double>(candidate.size() - k + 1));
  }
  const double c = static_cast<double>(candidate.size());
  const double r = static_cast<double>(reference.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / static_cast<double>(n));
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// LCS-based F-measure; beta = 1 weighs precision and recall equally.
inline double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.0) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

// Fixed suffix-stripping stemmer used by the METEOR stem stage.
inline std::string simple_stem(const std::string& w) {
  static const std::array<std::string_view, 9> suffixes = {"ations", "ation", "ness", "ing", "ies", "ed", "es", "ly", "s"};
  for (auto suf : suffixes) {
    if (w.size() > suf.size() + 2 && w.compare(w.size() - suf.size(), suf.size(), suf) == 0) {
      return w.substr(0, w.size() - suf.size());
    }
  }
  return w;
}

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

// Two-stage greedy unigram alignment (exact, then stem) followed by chunk
// counting over candidate order.
inline MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  std::vector<long> cand_to_ref(candidate.size(), -1);
  std::vector<bool> ref_used(reference.size(), false);
  for (int stage = 0; stage < 2; ++stage) {
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (cand_to_ref[i] >= 0) continue;
      const std::string c = stage == 0 ? candidate[i] : simple_stem(candidate[i]);
      for (std::size_t j = 0; j < reference.size(); ++j) {
        if (ref_used[j]) continue;
        const std::string r = stage == 0 ? reference[j] : simple_stem(reference[j]);
        if (c == r) {
          cand_to_ref[i] = static_cast<long>(j);
          ref_used[j] = true;
          break;
        }
      }
    }
  }
  MeteorAlignment a;
  long prev = -2;
  bool in_chunk = false;
  for (std::size_t i = 0; i < candidate.size(); ++i) {
    if (cand_to_ref[i] < 0) {
      in_chunk = false;
      continue;
    }
    ++a.matches;
    if (!in_chunk || cand_to_ref[i] != prev + 1) ++a.chunks;
    in_chunk = true;
    prev = cand_to_ref[i];
  }
  return a;
}

// METEOR without the synonym stage: Fmean (alpha = 0.9) times the
// fragmentation penalty 1 - 0.5 (chunks / matches)^3.
inline double meteor_simplified(const Tokens& candidate, const Tokens& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const auto a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double alpha = 0.9;
  const double fmean = p * r / (alpha * p + (1.0 - alpha) * r);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
  return fmean * (1.0 - penalty);
}

// Corpus text scores as the mean of sentence scores.
struct TextScores {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double meteor = 0.0;
  std::size_t count = 0;
};

inline TextScores score_texts(const std::vector<std::string>& candidates, const std::vector<std::string>& references,
                              double rouge_beta = 1.0) {
  if (candidates.size() != references.size()) throw DimensionError("score_texts: candidate/reference count mismatch");
  TextScores s;
  s.count = candidates.size();
  if (s.count == 0) return s;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const auto c = tokenize(candidates[i]);
    const auto r = tokenize(references[i]);
    for (std::size_t n = 1; n <= 4; ++n) s.bleu[n - 1] += bleu_n(c, r, n);
    s.rouge_l += rouge_l(c, r, rouge_beta);
    s.meteor += meteor_simplified(c, r);
  }
  const double n = static_cast<double>(s.count);
  for (auto& b : s.bleu) b /= n;
  s.rouge_l /= n;
  s.meteor /= n;
  return s;
}

}  // namespace xtra
