#pragma once

#include <string>
#include <vector>

#include "attreval/grids.hpp"

namespace attreval {

struct ScoreSeries {
    std::string method;
    std::string tap;
    Setting setting = Setting::GridPG;
    // (sample key, score); keys must be unique within a series
    std::vector<std::pair<int64_t, double>> points;

    std::string label() const { return method + "@" + tap; }
};

// builds one series per (method, tap) for a setting; the sample key combines
// grid id and target cell
std::vector<ScoreSeries> series_from_records(const std::vector<LocalizationRecord>& records,
                                             Setting setting);

struct SpearmanResult {
    double rho = 0.0;
    bool degenerate = false; // zero rank variance in either series
};

// Spearman rank correlation with average ranks for ties (Pearson on ranks).
// Requires identical sample-key sets; throws otherwise.
SpearmanResult spearman(const ScoreSeries& a, const ScoreSeries& b);

struct Quartiles {
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

// linear-interpolation quantiles (the "type 7" convention): the p-quantile
// interpolates between the floor((n-1)p)-th and next order statistics
Quartiles quartiles(const std::vector<double>& values);

struct CorrelationMatrix {
    std::vector<std::string> labels;
    std::vector<std::vector<SpearmanResult>> rho; // symmetric, diagonal = 1
};

CorrelationMatrix correlation_matrix(const std::vector<ScoreSeries>& series);
void write_correlation_csv(const CorrelationMatrix& m, const std::string& path);

struct GroupSummary {
    std::string method, tap;
    Setting setting = Setting::GridPG;
    int count = 0;
    double mean = 0.0;
    Quartiles q;
    double frac_exact_one = 0.0; // fraction of scores equal to 1.0 exactly
};

// per-(method, tap, setting) summaries in deterministic order
std::vector<GroupSummary> summarize_records(const std::vector<LocalizationRecord>& records);
void write_summary_csv(const std::vector<GroupSummary>& summary, const std::string& path);
void write_summary_json(const std::vector<GroupSummary>& summary, const std::string& path);

} // namespace attreval
