#include "attreval/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include <json.hpp>

namespace attreval {

std::vector<ScoreSeries> series_from_records(const std::vector<LocalizationRecord>& records,
                                             Setting setting) {
    std::map<std::pair<std::string, std::string>, ScoreSeries> grouped;
    for (const auto& r : records) {
        if (r.setting != setting) continue;
        auto& s = grouped[{r.method, r.tap}];
        s.method = r.method;
        s.tap = r.tap;
        s.setting = setting;
        const int64_t key = static_cast<int64_t>(r.sample_id) * 64 + r.target_cell;
        s.points.emplace_back(key, r.score);
    }
    std::vector<ScoreSeries> out;
    out.reserve(grouped.size());
    for (auto& [k, s] : grouped) {
        std::sort(s.points.begin(), s.points.end());
        for (size_t i = 1; i < s.points.size(); ++i)
            if (s.points[i].first == s.points[i - 1].first)
                throw std::runtime_error("series " + s.label() + ": duplicate sample key");
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    const size_t n = v.size();
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = (static_cast<double>(i + j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

} // namespace

SpearmanResult spearman(const ScoreSeries& a, const ScoreSeries& b) {
    if (a.points.size() != b.points.size())
        throw std::runtime_error("spearman: series " + a.label() + " and " + b.label() +
                                 " have different lengths");
    std::vector<double> va, vb;
    va.reserve(a.points.size());
    vb.reserve(b.points.size());
    for (size_t i = 0; i < a.points.size(); ++i) {
        if (a.points[i].first != b.points[i].first)
            throw std::runtime_error("spearman: sample sets of " + a.label() + " and " + b.label() +
                                     " do not match");
        va.push_back(a.points[i].second);
        vb.push_back(b.points[i].second);
    }
    const auto ra = average_ranks(va);
    const auto rb = average_ranks(vb);
    const size_t n = ra.size();
    double ma = 0.0, mb = 0.0;
    for (size_t i = 0; i < n; ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, var_a = 0.0, var_b = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cov += (ra[i] - ma) * (rb[i] - mb);
        var_a += (ra[i] - ma) * (ra[i] - ma);
        var_b += (rb[i] - mb) * (rb[i] - mb);
    }
    SpearmanResult res;
    if (var_a == 0.0 || var_b == 0.0) {
        res.degenerate = true;
        return res;
    }
    res.rho = cov / std::sqrt(var_a * var_b);
    return res;
}

Quartiles quartiles(const std::vector<double>& values) {
    if (values.empty()) throw std::runtime_error("quartiles: empty series");
    std::vector<double> v = values;
    std::sort(v.begin(), v.end());
    auto quantile = [&](double p) {
        const double pos = p * static_cast<double>(v.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        const size_t hi = std::min(lo + 1, v.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return v[lo] * (1.0 - frac) + v[hi] * frac;
    };
    Quartiles q;
    q.min = v.front();
    q.q1 = quantile(0.25);
    q.median = quantile(0.5);
    q.q3 = quantile(0.75);
    q.max = v.back();
    return q;
}

CorrelationMatrix correlation_matrix(const std::vector<ScoreSeries>& series) {
    CorrelationMatrix m;
    const size_t n = series.size();
    m.labels.reserve(n);
    for (const auto& s : series) m.labels.push_back(s.label());
    m.rho.assign(n, std::vector<SpearmanResult>(n));
    for (size_t i = 0; i < n; ++i) {
        m.rho[i][i] = {1.0, false};
        for (size_t j = i + 1; j < n; ++j) {
            const SpearmanResult r = spearman(series[i], series[j]);
            m.rho[i][j] = r;
            m.rho[j][i] = r;
        }
    }
    return m;
}

void write_correlation_csv(const CorrelationMatrix& m, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    std::fputs("series", f);
    for (const auto& l : m.labels) std::fprintf(f, ",%s", l.c_str());
    std::fputs("\n", f);
    for (size_t i = 0; i < m.labels.size(); ++i) {
        std::fputs(m.labels[i].c_str(), f);
        for (size_t j = 0; j < m.labels.size(); ++j) {
            if (m.rho[i][j].degenerate)
                std::fputs(",degenerate", f);
            else
                std::fprintf(f, ",%.12g", m.rho[i][j].rho);
        }
        std::fputs("\n", f);
    }
    std::fclose(f);
}

std::vector<GroupSummary> summarize_records(const std::vector<LocalizationRecord>& records) {
    std::map<std::tuple<std::string, std::string, int>, std::vector<double>> grouped;
    for (const auto& r : records)
        grouped[{r.method, r.tap, static_cast<int>(r.setting)}].push_back(r.score);
    std::vector<GroupSummary> out;
    for (auto& [key, scores] : grouped) {
        GroupSummary g;
        g.method = std::get<0>(key);
        g.tap = std::get<1>(key);
        g.setting = static_cast<Setting>(std::get<2>(key));
        g.count = static_cast<int>(scores.size());
        double sum = 0.0;
        int exact = 0;
        for (double s : scores) {
            sum += s;
            if (s == 1.0) ++exact;
        }
        g.mean = sum / static_cast<double>(scores.size());
        g.q = quartiles(scores);
        g.frac_exact_one = static_cast<double>(exact) / static_cast<double>(scores.size());
        out.push_back(std::move(g));
    }
    return out;
}

void write_summary_csv(const std::vector<GroupSummary>& summary, const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    std::fputs("method,tap,setting,count,mean,min,q1,median,q3,max,frac_exact_one\n", f);
    for (const auto& g : summary)
        std::fprintf(f, "%s,%s,%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", g.method.c_str(),
                     g.tap.c_str(), setting_name(g.setting), g.count, g.mean, g.q.min, g.q.q1,
                     g.q.median, g.q.q3, g.q.max, g.frac_exact_one);
    std::fclose(f);
}

void write_summary_json(const std::vector<GroupSummary>& summary, const std::string& path) {
    nlohmann::json doc;
    doc["schema_version"] = 1;
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : summary) {
        nlohmann::json j;
        j["method"] = g.method;
        j["tap"] = g.tap;
        j["setting"] = setting_name(g.setting);
        j["count"] = g.count;
        j["mean"] = g.mean;
        j["min"] = g.q.min;
        j["q1"] = g.q.q1;
        j["median"] = g.q.median;
        j["q3"] = g.q.q3;
        j["max"] = g.q.max;
        j["frac_exact_one"] = g.frac_exact_one;
        groups.push_back(std::move(j));
    }
    doc["groups"] = std::move(groups);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << doc.dump(2) << "\n";
}

} // namespace attreval
