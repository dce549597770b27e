#include "memtrace/profiles/profiles.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "memtrace/errors.hpp"
#include "memtrace/rng.hpp"

namespace memtrace::profiles {

MemorizationProfile build_profile(const indicators::ProbabilityCurve& curve) {
    if (curve.values.empty()) throw InputError("build_profile: empty curve");
    MemorizationProfile p;
    p.epoch = curve.epoch;
    p.kind = curve.kind;
    p.values = curve.values;
    std::sort(p.values.begin(), p.values.end());
    double sum = 0;
    for (double v : p.values) sum += v;
    p.area = sum / static_cast<double>(p.values.size());
    return p;
}

double binomial_mle(const indicators::ProbabilityCurve& curve) {
    if (curve.values.empty()) throw InputError("binomial_mle: empty curve");
    // same summation order as build_profile, so the MLE equals the profile
    // area bit-for-bit
    return build_profile(curve).area;
}

double binomial_pmf(int k, int n, double p) {
    if (k < 0 || k > n) return 0.0;
    if (p <= 0.0) return k == 0 ? 1.0 : 0.0;
    if (p >= 1.0) return k == n ? 1.0 : 0.0;
    const double logc = std::lgamma(n + 1.0) - std::lgamma(k + 1.0) -
                        std::lgamma(n - k + 1.0);
    return std::exp(logc + k * std::log(p) + (n - k) * std::log1p(-p));
}

double binomial_cdf(int k, int n, double p) {
    if (k < 0) return 0.0;
    if (k >= n) return 1.0;
    double c = 0;
    for (int i = 0; i <= k; ++i) c += binomial_pmf(i, n, p);
    return std::min(c, 1.0);
}

int inverse_binomial_cdf(double q, int n, double p) {
    if (q <= 0.0) return 0;
    if (q >= 1.0) return n;
    double c = 0;
    for (int k = 0; k < n; ++k) {
        c += binomial_pmf(k, n, p);
        if (c >= q) return k;
    }
    return n;
}

BinomialBaseline binomial_baseline(int n_models, double p_hat, size_t size,
                                   BaselineMode mode, uint64_t seed) {
    if (p_hat < 0.0 || p_hat > 1.0) throw RangeError("p_hat outside [0,1]");
    if (n_models < 1) throw ConfigError("binomial baseline needs N >= 1");
    if (size == 0) throw InputError("binomial baseline needs size >= 1");
    BinomialBaseline b;
    b.n_models = n_models;
    b.p_hat = p_hat;
    b.mode = mode;
    b.seed = seed;
    b.curve.resize(size);
    if (mode == BaselineMode::quantile) {
        for (size_t r = 0; r < size; ++r) {
            const double q = (static_cast<double>(r) + 0.5) / static_cast<double>(size);
            b.curve[r] =
                static_cast<double>(inverse_binomial_cdf(q, n_models, p_hat)) / n_models;
        }
    } else {
        Rng rng(seed);
        for (size_t r = 0; r < size; ++r) {
            int k = 0;
            for (int i = 0; i < n_models; ++i) k += rng.bernoulli(p_hat) ? 1 : 0;
            b.curve[r] = static_cast<double>(k) / n_models;
        }
        std::sort(b.curve.begin(), b.curve.end());
    }
    return b;
}

DeviationReport profile_deviation(const MemorizationProfile& profile,
                                  const BinomialBaseline& baseline) {
    if (profile.values.size() != baseline.curve.size())
        throw InputError("profile_deviation: length mismatch");
    DeviationReport d;
    d.epoch = profile.epoch;
    d.paradigm = profile.paradigm;
    d.kind = profile.kind;
    double sum = 0;
    for (size_t i = 0; i < profile.values.size(); ++i) {
        const double a = std::fabs(profile.values[i] - baseline.curve[i]);
        sum += a;
        d.sup = std::max(d.sup, a);
    }
    d.mad = sum / static_cast<double>(profile.values.size());
    return d;
}

AlignmentResult align_epochs(const std::vector<MemorizationProfile>& profiles,
                             const std::vector<double>& thresholds) {
    if (profiles.empty()) throw InputError("align_epochs: no profiles");
    AlignmentResult res;
    for (double th : thresholds) {
        AlignmentEntry best{th, profiles[0].epoch, profiles[0].area};
        double bd = std::fabs(profiles[0].area - th);
        for (const auto& p : profiles) {
            const double d = std::fabs(p.area - th);
            if (d < bd || (d == bd && p.epoch < best.epoch)) {
                bd = d;
                best.epoch = p.epoch;
                best.area = p.area;
            }
        }
        res.entries.push_back(best);
    }
    return res;
}

std::string kind_name(indicators::CurveKind k) {
    return k == indicators::CurveKind::averaged ? "averaged" : "fixed";
}

namespace {

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::string>& rows) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw RunError("cannot write " + path);
    os << header << "\n";
    for (const auto& r : rows) os << r << "\n";
    if (!os) throw RunError("write failed: " + path);
}

}  // namespace

void CsvExporter::add_profile(const MemorizationProfile& p) {
    for (size_t r = 0; r < p.values.size(); ++r)
        profile_rows_.push_back(p.paradigm + "," + kind_name(p.kind) + "," +
                                std::to_string(p.epoch) + "," + std::to_string(r) +
                                "," + fmt9(p.values[r]));
}

void CsvExporter::add_baseline(const std::string& paradigm, indicators::CurveKind kind,
                               int epoch, const BinomialBaseline& b) {
    const std::string mode = b.mode == BaselineMode::quantile ? "quantile" : "sampled";
    for (size_t r = 0; r < b.curve.size(); ++r)
        baseline_rows_.push_back(paradigm + "," + kind_name(kind) + "," +
                                 std::to_string(epoch) + "," + std::to_string(r) + "," +
                                 fmt9(b.curve[r]) + "," + mode);
}

void CsvExporter::add_deviation(const DeviationReport& d) {
    deviation_rows_.push_back(d.paradigm + "," + kind_name(d.kind) + "," +
                              std::to_string(d.epoch) + "," + fmt9(d.mad) + "," +
                              fmt9(d.sup));
}

void CsvExporter::add_alignment(const std::string& paradigm, indicators::CurveKind kind,
                                const AlignmentResult& a) {
    for (const auto& e : a.entries)
        alignment_rows_.push_back(paradigm + "," + kind_name(kind) + "," +
                                  fmt9(e.threshold) + "," + std::to_string(e.epoch) +
                                  "," + fmt9(e.area));
}

void CsvExporter::add_scatter(const std::string& paradigm, int epoch, int image_index,
                              int slot, double value) {
    scatter_rows_.push_back(paradigm + "," + std::to_string(epoch) + "," +
                            std::to_string(image_index) + "," + std::to_string(slot) +
                            "," + fmt9(value));
}

void CsvExporter::write(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    write_csv(dir + "/profile.csv", "paradigm,kind,epoch,rank,value", profile_rows_);
    write_csv(dir + "/baseline.csv", "paradigm,kind,epoch,rank,value,mode",
              baseline_rows_);
    write_csv(dir + "/deviation.csv", "paradigm,kind,epoch,mad,sup", deviation_rows_);
    write_csv(dir + "/alignment.csv", "paradigm,kind,threshold,epoch,area",
              alignment_rows_);
    write_csv(dir + "/scatter.csv", "paradigm,epoch,image_index,slot,value",
              scatter_rows_);
}

std::vector<MemorizationProfile> load_profile_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw RunError("cannot open " + path);
    std::string line;
    std::getline(is, line);  // header
    std::map<std::string, MemorizationProfile> acc;
    std::vector<std::string> order;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string paradigm, kind, epoch, rank, value;
        std::getline(ss, paradigm, ',');
        std::getline(ss, kind, ',');
        std::getline(ss, epoch, ',');
        std::getline(ss, rank, ',');
        std::getline(ss, value, ',');
        const std::string key = paradigm + "|" + kind + "|" + epoch;
        auto it = acc.find(key);
        if (it == acc.end()) {
            MemorizationProfile p;
            p.paradigm = paradigm;
            p.kind = kind == "averaged" ? indicators::CurveKind::averaged
                                        : indicators::CurveKind::fixed;
            p.epoch = std::stoi(epoch);
            it = acc.emplace(key, std::move(p)).first;
            order.push_back(key);
        }
        it->second.values.push_back(std::stod(value));
    }
    std::vector<MemorizationProfile> out;
    for (const auto& key : order) {
        auto& p = acc.at(key);
        double sum = 0;
        for (double v : p.values) sum += v;
        p.area = p.values.empty() ? 0.0 : sum / static_cast<double>(p.values.size());
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace memtrace::profiles
