#include "ospd/security.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace ospd {

double AuthenticityReport::max_log_ratio() const {
  double worst = 0.0;
  for (double r : log_ratios) worst = std::max(worst, std::abs(r));
  return worst;
}

AuthenticityReport authenticity_C(const ProbOracle& p, const VirtualPromptSet& prompts) {
  const double base = seq_logprob(p, prompts.authentic());
  if (!std::isfinite(base)) throw Error("authenticity_C: authentic prompt has zero probability");
  AuthenticityReport report;
  for (const auto& s : prompts.prompts) {
    const double lp = seq_logprob(p, s);
    if (!std::isfinite(lp)) throw Error("authenticity_C: virtual prompt has zero probability");
    report.log_ratios.push_back(lp - base);
  }
  report.C = std::exp(report.max_log_ratio());
  return report;
}

double estimate_delta(const ProbOracle& p, const ProbOracle& lm, std::span<const TokenSeq> prompts) {
  return max_log_gap(p, lm, prompts);
}

std::vector<TokenSeq> span_fillings(const TaggedPrompt& prompt, int vocab_size) {
  prompt.validate();
  std::vector<std::size_t> slots;
  for (const auto& s : prompt.spans) {
    for (std::size_t i = s.start; i < s.end(); ++i) slots.push_back(i);
  }
  const auto v = static_cast<std::size_t>(vocab_size);
  std::size_t total = 1;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (total > (std::size_t{1} << 24) / v) throw ConfigError("span_fillings: evaluation set too large");
    total *= v;
  }
  std::vector<TokenSeq> out;
  out.reserve(total);
  for (std::size_t code = 0; code < total; ++code) {
    TokenSeq s = prompt.tokens;
    std::size_t c = code;
    for (auto it = slots.rbegin(); it != slots.rend(); ++it) {
      s[*it] = static_cast<Token>(c % v);
      c /= v;
    }
    out.push_back(std::move(s));
  }
  return out;
}

SuccessBounds success_bounds(int eta, int lambda, double epsilon, double delta) {
  if (lambda < 0 || eta < 1 || eta > lambda + 1) throw ConfigError("success_bounds: need 1 <= eta <= lambda+1");
  const double inclusion = static_cast<double>(eta) / (lambda + 1);
  const double e = epsilon + 2.0 * delta;
  return {inclusion / (1.0 + (eta - 1) * std::exp(e)), inclusion / (1.0 + (eta - 1) * std::exp(-e))};
}

bool adversary_trial(std::span<const double> log_p, std::size_t authentic, int eta, Rng& rng) {
  const std::size_t n = log_p.size();
  if (eta < 1 || static_cast<std::size_t>(eta) > n) throw ConfigError("adversary_trial: need 1 <= eta <= lambda+1");
  // Partial Fisher-Yates: the first eta entries are a uniform subset.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < eta; ++i) std::swap(order[i], order[i + rng.index(n - i)]);

  double top = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < eta; ++i) top = std::max(top, log_p[order[i]]);
  double total = 0.0;
  for (int i = 0; i < eta; ++i) total += std::exp(log_p[order[i]] - top);
  double u = rng.uniform() * total;
  std::size_t guess = order[eta - 1];
  for (int i = 0; i < eta; ++i) {
    u -= std::exp(log_p[order[i]] - top);
    if (u < 0.0) {
      guess = order[i];
      break;
    }
  }
  return guess == authentic;
}

namespace {

std::vector<double> prompt_logps(const ProbOracle& p, const VirtualPromptSet& prompts) {
  std::vector<double> out;
  for (const auto& s : prompts.prompts) out.push_back(seq_logprob(p, s));
  return out;
}

}  // namespace

bool adversary_trial(const ProbOracle& p, const VirtualPromptSet& prompts, int eta, Rng& rng) {
  const auto lp = prompt_logps(p, prompts);
  return adversary_trial(lp, prompts.idx, eta, rng);
}

std::pair<double, double> wilson_interval(long k, long n, double z) {
  const double nn = static_cast<double>(n);
  const double phat = k / nn;
  const double z2 = z * z;
  const double centre = (phat + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z / (1 + z2 / nn) * std::sqrt(phat * (1 - phat) / nn + z2 / (4 * nn * nn));
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

bool AdversaryResult::within_bounds() const {
  const double n = static_cast<double>(trials);
  const double sigma_lo = std::sqrt(bounds.lower * (1 - bounds.lower) / n);
  const double sigma_hi = std::sqrt(bounds.upper * (1 - bounds.upper) / n);
  return rate >= bounds.lower - z * sigma_lo && rate <= bounds.upper + z * sigma_hi;
}

AdversaryResult monte_carlo_success(const ProbOracle& p, const VirtualPromptSet& prompts, int eta, long trials,
                                    std::uint64_t seed, double epsilon, double delta, double z) {
  if (trials < 1) throw ConfigError("monte_carlo_success: trials must be positive");
  const auto lp = prompt_logps(p, prompts);
  constexpr long kChunks = 8;
  std::vector<std::future<long>> parts;
  for (long c = 0; c < kChunks; ++c) {
    const long n = trials / kChunks + (c < trials % kChunks ? 1 : 0);
    parts.push_back(std::async(std::launch::async, [&, c, n] {
      Rng rng(SplitMix64(seed ^ (0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(c + 1))).next());
      long hits = 0;
      for (long t = 0; t < n; ++t) hits += adversary_trial(lp, prompts.idx, eta, rng) ? 1 : 0;
      return hits;
    }));
  }
  AdversaryResult r;
  r.eta = eta;
  r.lambda = static_cast<int>(prompts.prompts.size()) - 1;
  r.epsilon = epsilon;
  r.delta = delta;
  r.trials = trials;
  for (auto& f : parts) r.successes += f.get();
  r.rate = static_cast<double>(r.successes) / static_cast<double>(trials);
  r.z = z;
  std::tie(r.ci_lo, r.ci_hi) = wilson_interval(r.successes, trials, z);
  r.bounds = success_bounds(eta, r.lambda, epsilon, delta);
  return r;
}

std::string adversary_csv(std::span<const AdversaryResult> results) {
  std::ostringstream out;
  out << "eta,lambda,epsilon,delta,rate,ci_lo,ci_hi,bound_lo,bound_hi\n" << std::setprecision(10);
  for (const auto& r : results) {
    out << r.eta << ',' << r.lambda << ',' << r.epsilon << ',' << r.delta << ',' << r.rate << ',' << r.ci_lo << ','
        << r.ci_hi << ',' << r.bounds.lower << ',' << r.bounds.upper << '\n';
  }
  return out.str();
}

}  // namespace ospd
