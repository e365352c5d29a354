#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "camhfa/binary_io.hpp"
#include "camhfa/error.hpp"
#include "camhfa/pooling.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

struct Trial {
  std::string enroll_id;
  std::string test_id;
  bool is_target = false;

  friend bool operator==(const Trial&, const Trial&) = default;
};

struct ScoredTrial {
  Trial trial;
  double score = 0.0;

  friend bool operator==(const ScoredTrial&, const ScoredTrial&) = default;
};

using ScoreSet = std::vector<ScoredTrial>;
using EmbeddingTable = std::map<std::string, Embedding, std::less<>>;

inline double cosine_score(const Embedding& a, const Embedding& b) { return dot(a.values(), b.values()); }

inline const Embedding& lookup(const EmbeddingTable& table, const std::string& id) {
  const auto it = table.find(id);
  if (it == table.end()) throw ContractError("no embedding for utterance '" + id + "'");
  return it->second;
}

inline ScoreSet score_trials(const std::vector<Trial>& trials, const EmbeddingTable& embeddings) {
  ScoreSet out;
  out.reserve(trials.size());
  for (const Trial& t : trials) {
    out.push_back({t, cosine_score(lookup(embeddings, t.enroll_id), lookup(embeddings, t.test_id))});
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Adaptive symmetric score normalization

struct CohortStats {
  double mean = 0.0;
  double stddev = 0.0;  // population convention
  // mean == anchor + offset, with anchor the highest cohort score. Normalizing against
  // (raw - anchor) - offset keeps a common score offset out of the rounding.
  double anchor = 0.0;
  double offset = 0.0;
};

/// Mean and population standard deviation of the `top_k` highest cohort scores.
inline CohortStats top_k_stats(std::vector<double> cohort_scores, std::size_t top_k) {
  if (top_k < 2 || top_k > cohort_scores.size()) {
    throw ContractError("top_k must satisfy 2 <= top_k <= cohort size (top_k=" +
                        std::to_string(top_k) + ", cohort=" + std::to_string(cohort_scores.size()) +
                        ")");
  }
  std::partial_sort(cohort_scores.begin(), cohort_scores.begin() + static_cast<std::ptrdiff_t>(top_k),
                    cohort_scores.end(), std::greater<>{});
  const double k = static_cast<double>(top_k);
  const double anchor = cohort_scores[0];
  double offset = 0.0;
  for (std::size_t i = 0; i < top_k; ++i) offset += cohort_scores[i] - anchor;
  offset /= k;
  double var = 0.0;
  for (std::size_t i = 0; i < top_k; ++i) {
    const double d = (cohort_scores[i] - anchor) - offset;
    var += d * d;
  }
  return {anchor + offset, std::sqrt(var / k), anchor, offset};
}

/// ((s - mu_e) / sigma_e + (s - mu_t) / sigma_t) / 2
inline double snorm_score(double raw, const CohortStats& enroll, const CohortStats& test) {
  if (!(enroll.stddev > 0.0)) throw DegenerateError("s-norm: enroll-side cohort scores have zero spread");
  if (!(test.stddev > 0.0)) throw DegenerateError("s-norm: test-side cohort scores have zero spread");
  return 0.5 * (((raw - enroll.anchor) - enroll.offset) / enroll.stddev +
                ((raw - test.anchor) - test.offset) / test.stddev);
}

inline double adaptive_snorm_score(double raw, const std::vector<double>& enroll_cohort,
                                   const std::vector<double>& test_cohort, std::size_t top_k) {
  const CohortStats e = top_k_stats(enroll_cohort, top_k);
  const CohortStats t = top_k_stats(test_cohort, top_k);
  return snorm_score(raw, e, t);
}

/// Normalizes every trial with top-k statistics of its enroll and test utterances against the
/// cohort. Statistics are computed once per utterance id.
inline ScoreSet adaptive_snorm(const ScoreSet& raw, const EmbeddingTable& embeddings,
                               const std::vector<Embedding>& cohort, std::size_t top_k) {
  if (top_k < 2 || top_k > cohort.size()) {
    throw ContractError("top_k must satisfy 2 <= top_k <= cohort size (top_k=" +
                        std::to_string(top_k) + ", cohort=" + std::to_string(cohort.size()) + ")");
  }
  std::map<std::string, CohortStats, std::less<>> cache;
  auto stats_for = [&](const std::string& id) -> const CohortStats& {
    auto it = cache.find(id);
    if (it != cache.end()) return it->second;
    const Embedding& e = lookup(embeddings, id);
    std::vector<double> scores;
    scores.reserve(cohort.size());
    for (const Embedding& c : cohort) scores.push_back(cosine_score(e, c));
    return cache.emplace(id, top_k_stats(std::move(scores), top_k)).first->second;
  };
  ScoreSet out = raw;
  for (ScoredTrial& st : out) {
    const CohortStats& e = stats_for(st.trial.enroll_id);
    const CohortStats& t = stats_for(st.trial.test_id);
    if (!(e.stddev > 0.0)) {
      throw DegenerateError("s-norm: enroll-side cohort scores of '" + st.trial.enroll_id +
                            "' have zero spread");
    }
    if (!(t.stddev > 0.0)) {
      throw DegenerateError("s-norm: test-side cohort scores of '" + st.trial.test_id +
                            "' have zero spread");
    }
    st.score = snorm_score(st.score, e, t);
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Equal error rate

/// EER from a threshold sweep (accept when score >= threshold) over the sorted unique scores,
/// linearly interpolated between the two ROC points that bracket FAR == FRR.
inline double compute_eer(const std::vector<double>& targets, const std::vector<double>& nontargets) {
  if (targets.empty() || nontargets.empty()) {
    throw ContractError("EER needs at least one target and one nontarget score");
  }
  std::vector<std::pair<double, bool>> all;
  all.reserve(targets.size() + nontargets.size());
  for (double s : targets) all.emplace_back(s, true);
  for (double s : nontargets) all.emplace_back(s, false);
  std::sort(all.begin(), all.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });

  const double nt = static_cast<double>(targets.size());
  const double nn = static_cast<double>(nontargets.size());
  std::size_t targets_below = 0, nontargets_below = 0;
  // Lowest threshold accepts everything.
  double prev_far = 1.0, prev_frr = 0.0;
  std::size_t i = 0;
  while (true) {
    // Advance past every score equal to the current threshold.
    if (i < all.size()) {
      const double level = all[i].first;
      while (i < all.size() && all[i].first == level) {
        (all[i].second ? targets_below : nontargets_below) += 1;
        ++i;
      }
    }
    const double far = static_cast<double>(nontargets.size() - nontargets_below) / nn;
    const double frr = static_cast<double>(targets_below) / nt;
    const double prev_gap = prev_frr - prev_far;
    const double gap = frr - far;
    if (prev_gap <= 0.0 && gap >= 0.0) {
      if (gap == prev_gap) return prev_far;
      const double alpha = -prev_gap / (gap - prev_gap);
      return prev_far + alpha * (far - prev_far);
    }
    prev_far = far;
    prev_frr = frr;
  }
}

inline double compute_eer(const ScoreSet& scores) {
  std::vector<double> tar, non;
  for (const ScoredTrial& s : scores) {
    if (!std::isfinite(s.score)) throw ContractError("non-finite score in score set");
    (s.trial.is_target ? tar : non).push_back(s.score);
  }
  return compute_eer(tar, non);
}

// ---------------------------------------------------------------------------------------------
// Text formats

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline double parse_double(const std::string& tok, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(tok, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != tok.size() || tok.empty()) throw std::runtime_error(where + ": bad number '" + tok + "'");
  return v;
}

namespace detail {

template <class F>
void for_each_line(const std::string& text, F&& f) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string w; ls >> w;) tok.push_back(std::move(w));
    if (tok.empty()) continue;
    f(tok, lineno);
  }
}

inline std::string where(const std::filesystem::path& path, std::size_t line) {
  return path.string() + ":" + std::to_string(line);
}

}  // namespace detail

/// "label enroll_id test_id" per line, label in {0, 1}.
inline std::vector<Trial> parse_trials(const std::string& text, const std::filesystem::path& name = "trials") {
  std::vector<Trial> out;
  detail::for_each_line(text, [&](const std::vector<std::string>& tok, std::size_t line) {
    if (tok.size() != 3 || (tok[0] != "0" && tok[0] != "1")) {
      throw std::runtime_error(detail::where(name, line) + ": expected 'label enroll_id test_id'");
    }
    out.push_back({tok[1], tok[2], tok[0] == "1"});
  });
  return out;
}

inline std::string format_trials(const std::vector<Trial>& trials) {
  std::string s;
  for (const Trial& t : trials) s += (t.is_target ? "1 " : "0 ") + t.enroll_id + " " + t.test_id + "\n";
  return s;
}

inline std::vector<Trial> read_trials(const std::filesystem::path& path) {
  return parse_trials(io::read_file(path), path);
}

/// "enroll_id test_id score" per line.
inline std::string format_scores(const ScoreSet& scores) {
  std::string s;
  for (const ScoredTrial& st : scores) {
    s += st.trial.enroll_id + " " + st.trial.test_id + " " + format_double(st.score) + "\n";
  }
  return s;
}

inline std::map<std::pair<std::string, std::string>, double> parse_scores(
    const std::string& text, const std::filesystem::path& name = "scores") {
  std::map<std::pair<std::string, std::string>, double> out;
  detail::for_each_line(text, [&](const std::vector<std::string>& tok, std::size_t line) {
    if (tok.size() != 3) throw std::runtime_error(detail::where(name, line) + ": expected 'enroll test score'");
    out[{tok[0], tok[1]}] = parse_double(tok[2], detail::where(name, line));
  });
  return out;
}

/// Attaches scores to a trial list, in trial order.
inline ScoreSet join_scores(const std::vector<Trial>& trials,
                            const std::map<std::pair<std::string, std::string>, double>& scores) {
  ScoreSet out;
  out.reserve(trials.size());
  for (const Trial& t : trials) {
    const auto it = scores.find({t.enroll_id, t.test_id});
    if (it == scores.end()) {
      throw std::runtime_error("no score for trial " + t.enroll_id + " " + t.test_id);
    }
    out.push_back({t, it->second});
  }
  return out;
}

/// "utterance_id v_1 ... v_E" per line.
inline std::string format_embeddings(const std::vector<std::pair<std::string, Embedding>>& rows) {
  std::string s;
  for (const auto& [id, e] : rows) {
    s += id;
    for (double v : e.values()) s += " " + format_double(v);
    s += "\n";
  }
  return s;
}

inline std::vector<std::pair<std::string, Embedding>> parse_embeddings(
    const std::string& text, const std::filesystem::path& name = "embeddings") {
  std::vector<std::pair<std::string, Embedding>> out;
  std::size_t dim = 0;
  detail::for_each_line(text, [&](const std::vector<std::string>& tok, std::size_t line) {
    if (tok.size() < 2) throw std::runtime_error(detail::where(name, line) + ": expected 'id values...'");
    if (dim == 0) dim = tok.size() - 1;
    if (tok.size() - 1 != dim) {
      throw std::runtime_error(detail::where(name, line) + ": expected " + std::to_string(dim) + " values");
    }
    Tensor v({dim});
    for (std::size_t i = 0; i < dim; ++i) v[i] = parse_double(tok[i + 1], detail::where(name, line));
    out.emplace_back(tok[0], Embedding{std::move(v)});
  });
  return out;
}

inline EmbeddingTable to_table(const std::vector<std::pair<std::string, Embedding>>& rows) {
  EmbeddingTable t;
  for (const auto& [id, e] : rows) {
    if (!t.emplace(id, e).second) throw std::runtime_error("duplicate embedding id '" + id + "'");
  }
  return t;
}

/// Every unordered pair of distinct utterances; target when speakers match.
template <class Utt>
std::vector<Trial> all_pairs_trials(const std::vector<Utt>& utts) {
  std::vector<Trial> out;
  for (std::size_t i = 0; i < utts.size(); ++i)
    for (std::size_t j = i + 1; j < utts.size(); ++j) {
      out.push_back({utts[i].utterance_id, utts[j].utterance_id,
                     utts[i].speaker_id == utts[j].speaker_id});
    }
  return out;
}

}  // namespace camhfa
