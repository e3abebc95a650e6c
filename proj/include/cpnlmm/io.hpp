#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "cpnlmm/common.hpp"
#include "cpnlmm/data.hpp"
#include "cpnlmm/diagnostics.hpp"
#include "cpnlmm/hierarchy.hpp"
#include "cpnlmm/ioutil.hpp"
#include "cpnlmm/sampler.hpp"
#include "cpnlmm/selection.hpp"
#include "cpnlmm/simlab.hpp"

namespace cpnlmm {

// ---------------------------------------------------------------------------
// Long-format dataset CSV: header `id,time,y`, one observation per row.

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline double parse_double_field(const std::string& s, const char* what, std::size_t line_no) {
    const char* begin = s.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin || end != begin + s.size())
        throw DataError(std::string("line ") + std::to_string(line_no) + ": cannot parse " +
                        what + " from '" + s + "'");
    return v;
}

inline std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
}

}  // namespace detail

inline LongitudinalDataset ingest_csv(const std::filesystem::path& path) {
    const std::string text = read_text_file(path);
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(in, line)) throw DataError("'" + path.string() + "' is empty");
    ++line_no;
    if (detail::strip_cr(line) != "id,time,y")
        throw DataError("'" + path.string() + "': expected header 'id,time,y'");

    std::vector<Subject> subjects;
    std::unordered_map<std::string, std::size_t> index;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::strip_cr(line);
        if (line.empty()) continue;
        const auto fields = detail::split_csv_line(line);
        if (fields.size() != 3)
            throw DataError("line " + std::to_string(line_no) + ": expected 3 fields, got " +
                            std::to_string(fields.size()));
        const std::string& id = fields[0];
        const double t = detail::parse_double_field(fields[1], "time", line_no);
        const double y = detail::parse_double_field(fields[2], "y", line_no);
        auto [it, inserted] = index.try_emplace(id, subjects.size());
        if (inserted) subjects.push_back(Subject{id, {}, {}});
        subjects[it->second].times.push_back(t);
        subjects[it->second].y.push_back(y);
        ++rows;
    }
    if (rows == 0) throw DataError("'" + path.string() + "' has no data rows");

    // keep each subject time-sorted (stable, so sorted input passes through)
    for (auto& s : subjects) {
        std::vector<std::size_t> order(s.times.size());
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return s.times[a] < s.times[b]; });
        std::vector<double> t2(order.size()), y2(order.size());
        for (std::size_t j = 0; j < order.size(); ++j) {
            t2[j] = s.times[order[j]];
            y2[j] = s.y[order[j]];
        }
        for (std::size_t j = 1; j < t2.size(); ++j)
            if (t2[j] == t2[j - 1])
                throw DataError("duplicate (id,time) row: id '" + s.id + "' at time " +
                                fmt_g17(t2[j]));
        s.times = std::move(t2);
        s.y = std::move(y2);
    }
    return LongitudinalDataset(std::move(subjects));
}

inline std::string dataset_csv(const LongitudinalDataset& data) {
    std::string out = "id,time,y\n";
    for (const auto& s : data.subjects())
        for (std::size_t j = 0; j < s.n_obs(); ++j)
            out += s.id + "," + fmt_g17(s.times[j]) + "," + fmt_g17(s.y[j]) + "\n";
    return out;
}

inline void write_dataset_csv(const std::filesystem::path& path,
                              const LongitudinalDataset& data) {
    atomic_write_text(path, dataset_csv(data));
}

// ---------------------------------------------------------------------------
// Diagnostics summary: CSV and a JSON mirror with identical values.

inline std::string summary_csv(const ChainDiagnostics& diag) {
    std::string out = "param,median,lo,hi,rhat,ess,mcse\n";
    for (const auto& r : diag.rows)
        out += r.name + "," + fmt_g17(r.median) + "," + fmt_g17(r.lo) + "," + fmt_g17(r.hi) +
               "," + fmt_g17(r.rhat) + "," + fmt_g17(r.ess) + "," + fmt_g17(r.mcse) + "\n";
    return out;
}

inline nlohmann::json summary_json(const ChainDiagnostics& diag) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : diag.rows)
        rows.push_back({{"param", r.name},
                        {"median", r.median},
                        {"lo", r.lo},
                        {"hi", r.hi},
                        {"rhat", r.rhat},
                        {"ess", r.ess},
                        {"mcse", r.mcse},
                        {"degenerate", r.degenerate}});
    return nlohmann::json{
        {"level", diag.level},
        {"interval", diag.kind == IntervalKind::quantile ? "quantile" : "hpd"},
        {"params", rows}};
}

// ---------------------------------------------------------------------------
// Model-comparison report

inline std::string selection_csv(const ModelComparison& cmp) {
    std::string out = "model,waic,waic_se,log_marginal,pmp\n";
    for (const auto& r : cmp.rows)
        out += r.model + "," + fmt_g17(r.waic) + "," + fmt_g17(r.waic_se) + "," +
               fmt_g17(r.log_marginal) + "," + fmt_g17(r.pmp) + "\n";
    return out;
}

inline nlohmann::json selection_json(const ModelComparison& cmp) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : cmp.rows)
        rows.push_back({{"model", r.model},
                        {"waic", r.waic},
                        {"waic_se", r.waic_se},
                        {"log_marginal", r.log_marginal},
                        {"prior_prob", r.prior_prob},
                        {"pmp", r.pmp},
                        {"bridge_iterations", r.bridge_iterations},
                        {"bridge_rel_mcse", r.bridge_rel_mcse}});
    return nlohmann::json{{"models", rows}};
}

inline ModelComparison load_selection_json(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "': invalid selection JSON: " + e.what());
    }
    ModelComparison cmp;
    try {
        for (const auto& row : j.at("models")) {
            ModelComparisonRow r;
            r.model = row.at("model").get<std::string>();
            r.waic = row.value("waic", std::numeric_limits<double>::quiet_NaN());
            r.waic_se = row.value("waic_se", std::numeric_limits<double>::quiet_NaN());
            r.log_marginal = row.at("log_marginal").get<double>();
            r.prior_prob = row.value("prior_prob", 0.0);
            r.pmp = row.value("pmp", 0.0);
            cmp.rows.push_back(r);
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError("'" + path.string() + "': selection JSON missing fields: " + e.what());
    }
    if (cmp.rows.empty()) throw DataError("'" + path.string() + "': no model rows");
    return cmp;
}

// ---------------------------------------------------------------------------
// Draw dumps: one CSV per chain, header = parameter names.

inline std::string chain_draws_csv(const PosteriorDraws& draws, std::size_t chain) {
    std::string out;
    for (std::size_t p = 0; p < draws.names.size(); ++p) {
        if (p) out += ",";
        out += draws.names[p];
    }
    out += "\n";
    for (std::size_t it = 0; it < draws.n_kept; ++it) {
        for (std::size_t p = 0; p < draws.n_params; ++p) {
            if (p) out += ",";
            out += fmt_g17(draws.draw(chain, it, p));
        }
        out += "\n";
    }
    return out;
}

inline void write_draw_dumps(const std::filesystem::path& dir, const std::string& stem,
                             const PosteriorDraws& draws) {
    for (std::size_t c = 0; c < draws.n_chains; ++c)
        atomic_write_text(dir / (stem + "_chain" + std::to_string(c + 1) + ".csv"),
                          chain_draws_csv(draws, c));
}

// Rebuild a (draws-only) PosteriorDraws from dumped chain CSVs; loglik and
// logpost are not dumped, so only summary-style consumers apply.
inline PosteriorDraws read_draw_dumps(const std::vector<std::filesystem::path>& chain_files) {
    if (chain_files.size() < 2) throw DataError("need at least 2 chain files");
    PosteriorDraws out;
    out.n_chains = chain_files.size();
    out.draws.resize(out.n_chains);
    for (std::size_t c = 0; c < chain_files.size(); ++c) {
        const std::string text = read_text_file(chain_files[c]);
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        if (!std::getline(in, line))
            throw DataError("'" + chain_files[c].string() + "' is empty");
        ++line_no;
        const auto header = detail::split_csv_line(detail::strip_cr(line));
        if (c == 0) {
            out.names = header;
            out.n_params = header.size();
        } else if (header != out.names) {
            throw DataError("'" + chain_files[c].string() + "': parameter header mismatch");
        }
        std::size_t rows = 0;
        while (std::getline(in, line)) {
            ++line_no;
            line = detail::strip_cr(line);
            if (line.empty()) continue;
            const auto fields = detail::split_csv_line(line);
            if (fields.size() != out.n_params)
                throw DataError("'" + chain_files[c].string() + "' line " +
                                std::to_string(line_no) + ": wrong field count");
            for (std::size_t p = 0; p < fields.size(); ++p)
                out.draws[c].push_back(detail::parse_double_field(fields[p], "draw", line_no));
            ++rows;
        }
        if (rows == 0) throw DataError("'" + chain_files[c].string() + "' has no draws");
        if (c == 0) {
            out.n_kept = rows;
        } else if (rows != out.n_kept) {
            throw DataError("'" + chain_files[c].string() + "': chain lengths differ");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Simulation experiment report: five metric blocks per model, plus a JSON
// mirror carrying the raw per-replication records.

inline std::string experiment_report_csv(const ExperimentReport& report) {
    std::string out = "scenario,model,metric,value,lo,hi\n";
    const std::string& sc = report.cfg.name;
    for (const auto& a : report.aggregates) {
        out += sc + "," + a.model + ",cp_estimate," + fmt_g17(a.est_median) + "," +
               fmt_g17(a.est_lo) + "," + fmt_g17(a.est_hi) + "\n";
        out += sc + "," + a.model + ",bias," + fmt_g17(a.bias_median) + "," +
               fmt_g17(a.bias_lo) + "," + fmt_g17(a.bias_hi) + "\n";
        out += sc + "," + a.model + ",coverage," + fmt_g17(a.coverage) + "," +
               fmt_g17(a.cov_lo) + "," + fmt_g17(a.cov_hi) + "\n";
        out += sc + "," + a.model + ",pmp_mean," + fmt_g17(a.mean_pmp) + ",,\n";
        out += sc + "," + a.model + ",waic_mean," + fmt_g17(a.mean_waic) + ",,\n";
        out += sc + "," + a.model + ",waic_se_mean," + fmt_g17(a.mean_waic_se) + ",,\n";
    }
    return out;
}

inline nlohmann::json experiment_report_json(const ExperimentReport& report) {
    nlohmann::json aggs = nlohmann::json::array();
    for (const auto& a : report.aggregates)
        aggs.push_back({{"model", a.model},
                        {"n_ok", a.n_ok},
                        {"degenerate", a.degenerate},
                        {"cp_estimate", {{"median", a.est_median}, {"lo", a.est_lo}, {"hi", a.est_hi}}},
                        {"bias", {{"median", a.bias_median}, {"lo", a.bias_lo}, {"hi", a.bias_hi}}},
                        {"coverage",
                         {{"value", a.coverage},
                          {"lo", a.cov_lo},
                          {"hi", a.cov_hi},
                          {"hits", a.cov_hits},
                          {"trials", a.cov_trials}}},
                        {"pmp_mean", a.mean_pmp},
                        {"waic_mean", a.mean_waic},
                        {"waic_se_mean", a.mean_waic_se}});
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : report.reps) reps.push_back(rep_record_to_json(r, 0));
    nlohmann::json cfg_json;
    to_json(cfg_json, report.cfg);
    return nlohmann::json{{"scenario", cfg_json},
                          {"aggregates", aggs},
                          {"n_failed_fits", report.n_failed_fits},
                          {"replications", reps}};
}

// ---------------------------------------------------------------------------
// Prior configuration from JSON (partial overrides on top of a base config)

inline PriorConfig parse_priors(const nlohmann::json& j, PriorConfig base) {
    try {
        if (j.contains("beta0"))
            base.beta0 = {j["beta0"].at("mean").get<double>(), j["beta0"].at("sd").get<double>()};
        if (j.contains("beta1")) {
            if (j["beta1"].contains("free")) base.beta1_free = j["beta1"]["free"].get<bool>();
            if (j["beta1"].contains("mean"))
                base.beta1 = {j["beta1"]["mean"].get<double>(), j["beta1"].at("sd").get<double>()};
        }
        if (j.contains("beta2"))
            base.beta2 = {j["beta2"].at("mean").get<double>(), j["beta2"].at("sd").get<double>()};
        if (j.contains("beta_cp"))
            base.beta_cp = {j["beta_cp"].at("lo").get<double>(),
                            j["beta_cp"].at("hi").get<double>()};
        if (j.contains("theta_t"))
            base.theta_t = {j["theta_t"].at("lo").get<double>(),
                            j["theta_t"].at("hi").get<double>()};
        if (j.contains("sigma_eps")) base.sigma_eps = {j["sigma_eps"].at("scale").get<double>()};
        if (j.contains("omega0")) base.omega0 = {j["omega0"].at("scale").get<double>()};
        if (j.contains("omega2")) base.omega2 = {j["omega2"].at("scale").get<double>()};
        if (j.contains("omega_cp")) base.omega_cp = {j["omega_cp"].at("scale").get<double>()};
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad prior config: ") + e.what());
    }
    base.validate();
    return base;
}

}  // namespace cpnlmm
