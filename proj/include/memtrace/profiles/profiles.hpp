#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "memtrace/indicators/indicators.hpp"

namespace memtrace::profiles {

struct MemorizationProfile {
    int epoch = 0;
    std::vector<double> values;  // ascending
    double area = 0.0;           // mean of values
    indicators::CurveKind kind = indicators::CurveKind::averaged;
    std::string paradigm;
};

MemorizationProfile build_profile(const indicators::ProbabilityCurve& curve);

// Binomial MLE for the shared success probability: the mean of the curve.
double binomial_mle(const indicators::ProbabilityCurve& curve);

double binomial_pmf(int k, int n, double p);
double binomial_cdf(int k, int n, double p);
// smallest k with CDF(k) >= q
int inverse_binomial_cdf(double q, int n, double p);

enum class BaselineMode { sampled, quantile };

struct BinomialBaseline {
    int n_models = 0;
    double p_hat = 0.0;
    BaselineMode mode = BaselineMode::quantile;
    std::vector<double> curve;  // sorted, values on the 1/N grid
    uint64_t seed = 0;
};

// sampled: |X| draws k ~ Bin(N, p_hat) / N, sorted.
// quantile: rank r (1-based) takes InvCDF((r - 0.5)/|X|) / N — deterministic
// expected order statistics.
BinomialBaseline binomial_baseline(int n_models, double p_hat, size_t size,
                                   BaselineMode mode, uint64_t seed = 0);

struct DeviationReport {
    double mad = 0.0;  // mean absolute deviation over ranks
    double sup = 0.0;  // max absolute deviation
    int epoch = 0;
    std::string paradigm;
    indicators::CurveKind kind = indicators::CurveKind::averaged;
};

DeviationReport profile_deviation(const MemorizationProfile& profile,
                                  const BinomialBaseline& baseline);

struct AlignmentEntry {
    double threshold = 0.0;
    int epoch = 0;
    double area = 0.0;
};

struct AlignmentResult {
    std::vector<AlignmentEntry> entries;
};

// Per threshold: the epoch whose profile area minimizes |area - threshold|,
// earliest epoch on ties.
AlignmentResult align_epochs(const std::vector<MemorizationProfile>& profiles,
                             const std::vector<double>& thresholds = {0.25, 0.5, 0.75});

// CSV export: all floats with 9 significant digits; files are
// profile.csv, baseline.csv, deviation.csv, alignment.csv, scatter.csv.
class CsvExporter {
public:
    void add_profile(const MemorizationProfile& p);
    void add_baseline(const std::string& paradigm, indicators::CurveKind kind,
                      int epoch, const BinomialBaseline& b);
    void add_deviation(const DeviationReport& d);
    void add_alignment(const std::string& paradigm, indicators::CurveKind kind,
                       const AlignmentResult& a);
    void add_scatter(const std::string& paradigm, int epoch, int image_index, int slot,
                     double value);
    void write(const std::string& dir) const;

private:
    std::vector<std::string> profile_rows_, baseline_rows_, deviation_rows_,
        alignment_rows_, scatter_rows_;
};

std::string kind_name(indicators::CurveKind k);

// Parses profile.csv back into (paradigm, kind, epoch) -> sorted values.
std::vector<MemorizationProfile> load_profile_csv(const std::string& path);

}  // namespace memtrace::profiles
