#pragma once

#include "concentration.hpp"
#include "constants.hpp"
#include "csv.hpp"
#include "geometry.hpp"
#include "model.hpp"
#include "penalties.hpp"
#include "solver.hpp"
#include "version.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace cpls {

/// Exit codes of a run: every outcome maps to exactly one.
enum class ExitCode : int { ok = 0, check_failed = 1, error = 2 };

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(const std::string& data)
{
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace config {

using nlohmann::json;

/// Field lookup that names the full path in its error message.
inline const json& need(const json& j, const std::string& path, const char* name)
{
    if (!j.is_object() || !j.contains(name))
        throw ValidationError("config: missing field '" + path + (path.empty() ? "" : ".") + name + "'");
    return j.at(name);
}

template <class T>
T get(const json& j, const std::string& path, const char* name)
{
    const json& v = need(j, path, name);
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ValidationError("config: field '" + path + (path.empty() ? "" : ".") + name + "' has the wrong type");
    }
}

template <class T>
T get_or(const json& j, const std::string& path, const char* name, T fallback)
{
    if (!j.is_object() || !j.contains(name)) return fallback;
    return get<T>(j, path, name);
}

inline const json* section(const json& j, const char* name)
{
    if (!j.contains(name)) return nullptr;
    const json& s = j.at(name);
    detail::require(s.is_object(), std::string("config: field '") + name + "' must be an object");
    return &s;
}

} // namespace config

/// Parsed experiment: generated or inline problem, penalty, and run settings.
struct Experiment {
    std::string command;
    nlohmann::json raw;
    std::uint64_t seed = 0;
    std::string output = "out";

    Problem problem;
    std::optional<Vector> y;     ///< inline observation, if any
    IndexSet planted;            ///< support of the planted beta*, coordinates
    bool orthonormal = false;
    std::optional<Penalty> penalty;
    SolverConfig solver;
    MonteCarloConfig mc;
};

namespace detail {

inline Problem problem_from_config(const nlohmann::json& j, std::uint64_t seed, IndexSet& planted, bool& orthonormal,
                                   std::optional<Vector>& y)
{
    using namespace config;
    const std::string path = "problem";
    const double sigma = get<double>(j, path, "sigma");
    require(std::isfinite(sigma) && sigma > 0.0, "config: field 'problem.sigma' must be > 0");
    if (j.contains("X")) {
        nlohmann::json inline_problem = j;
        Problem p = problem_from_json(inline_problem);
        if (j.contains("y")) {
            y = vector_from_json(j.at("y"), "problem.y");
            require(y->size() == p.design.n(), "config: field 'problem.y' must have length n");
        }
        return p;
    }
    const auto gen = get<std::string>(j, path, "generator");
    const auto n = get<Index>(j, path, "n");
    const auto p = get<Index>(j, path, "p");
    require(n >= 1 && p >= 1, "config: fields 'problem.n' and 'problem.p' must be >= 1");
    const auto design_seed = get_or<std::uint64_t>(j, path, "design_seed", seed);
    DesignMatrix x;
    if (gen == "gaussian")
        x = gaussian_normalized_design(n, p, design_seed);
    else if (gen == "orthonormal") {
        require(p <= n, "config: the orthonormal generator needs p <= n");
        x = orthonormal_design(n, p, design_seed);
        orthonormal = true;
    } else
        throw ValidationError("config: field 'problem.generator' must be 'gaussian' or 'orthonormal'");

    const auto s = get_or<Index>(j, path, "sparsity", 0);
    require(s >= 0 && s <= p, "config: field 'problem.sparsity' must lie in 0..p");
    const double magnitude = get_or<double>(j, path, "magnitude", 1.0);
    Vector beta = Vector::Zero(p);
    Engine eng = make_engine(design_seed, 0xbe7au);
    std::bernoulli_distribution coin(0.5);
    for (Index k = 0; k < s; ++k) {
        beta[k] = coin(eng) ? magnitude : -magnitude;
        planted.push_back(static_cast<std::size_t>(k));
    }
    return Problem{x, x.matrix() * beta, sigma};
}

inline Penalty penalty_from_config(const nlohmann::json& j, const Problem& problem)
{
    using namespace config;
    const std::string path = "penalty";
    const auto kind = get<std::string>(j, path, "kind");
    const Index p = problem.design.p();
    const Index n = problem.design.n();
    const char* mult_field = kind == "slope" ? "A" : "lambda";
    const json& mult = need(j, path, mult_field);
    const bool recommended = mult.is_string() && mult.get<std::string>() == "recommended";
    require(recommended || mult.is_number(),
            std::string("config: field 'penalty.") + mult_field + "' must be a number or \"recommended\"");
    const double value = recommended ? 1.0 : mult.get<double>();

    Penalty pen;
    if (kind == "l1")
        pen = L1Penalty{value};
    else if (kind == "group") {
        GroupPartition part = j.contains("partition")
                                  ? GroupPartition(get<std::vector<IndexSet>>(j, path, "partition"))
                                  : GroupPartition::contiguous(static_cast<std::size_t>(p), get<std::size_t>(j, path, "group_size"));
        pen = GroupPenalty{std::move(part), value};
    } else if (kind == "slope") {
        SlopeWeights mu = j.contains("mu") ? SlopeWeights(vector_from_json(j.at("mu"), "penalty.mu"))
                                           : slope_weights(p, n, problem.sigma);
        pen = SlopePenalty{value, std::move(mu)};
    } else if (kind == "cone") {
        if (j.contains("extremal_points")) {
            nlohmann::json copy = j;
            copy["lambda"] = value;
            pen = penalty_from_json(copy);
        } else
            pen = ConePenalty{block_cone(GroupPartition::contiguous(static_cast<std::size_t>(p), get<std::size_t>(j, path, "block_size"))),
                              value};
    } else
        throw ValidationError("config: field 'penalty.kind' must be one of l1, group, slope, cone");
    validate(pen, p);
    return recommended ? tuned(pen, problem.design, problem.sigma) : pen;
}

inline SolverConfig solver_from_config(const nlohmann::json* j)
{
    using namespace config;
    SolverConfig cfg;
    if (!j) return cfg;
    cfg.max_iters = get_or<int>(*j, "solver", "max_iters", cfg.max_iters);
    cfg.gap_tol = get_or<double>(*j, "solver", "gap_tol", cfg.gap_tol);
    cfg.relative_gap_tol = get_or<double>(*j, "solver", "relative_gap_tol", cfg.relative_gap_tol);
    cfg.check_every = get_or<int>(*j, "solver", "check_every", cfg.check_every);
    cfg.validate();
    return cfg;
}

inline MonteCarloConfig mc_from_config(const nlohmann::json* j, std::uint64_t seed)
{
    using namespace config;
    MonteCarloConfig mc;
    mc.base_seed = seed;
    if (j) {
        mc.replications = get_or<std::size_t>(*j, "mc", "replications", mc.replications);
        mc.t_grid = get_or<std::vector<double>>(*j, "mc", "t_grid", mc.t_grid);
        mc.delta_grid = get_or<std::vector<double>>(*j, "mc", "delta_grid", mc.delta_grid);
        mc.slack_sigmas = get_or<double>(*j, "mc", "slack_sigmas", mc.slack_sigmas);
        mc.threads = get_or<unsigned>(*j, "mc", "threads", mc.threads);
    }
    mc.validate();
    return mc;
}

} // namespace detail

/// Validates a config document. `seed` and `output` override the document.
inline Experiment parse_experiment(const nlohmann::json& doc, std::optional<std::uint64_t> seed = std::nullopt,
                                   std::optional<std::string> output = std::nullopt)
{
    using namespace config;
    detail::require(doc.is_object(), "config: top level must be a JSON object");
    Experiment e;
    e.raw = doc;
    e.command = get<std::string>(doc, "", "command");
    static const char* commands[] = {"solve", "verify-geometry", "constants", "simulate", "report"};
    detail::require(std::find(std::begin(commands), std::end(commands), e.command) != std::end(commands),
                    "config: field 'command' must be one of solve, verify-geometry, constants, simulate, report");
    e.seed = seed ? *seed : get_or<std::uint64_t>(doc, "", "seed", 0);
    e.raw["seed"] = e.seed;
    e.output = output ? *output : get_or<std::string>(doc, "", "output", "out");
    e.raw["output"] = e.output;
    e.problem = detail::problem_from_config(need(doc, "", "problem"), e.seed, e.planted, e.orthonormal, e.y);
    if (doc.contains("penalty")) e.penalty = detail::penalty_from_config(doc.at("penalty"), e.problem);
    e.solver = detail::solver_from_config(section(doc, "solver"));
    e.mc = detail::mc_from_config(section(doc, "mc"), e.seed);
    return e;
}

// ---------------------------------------------------------------------------
// Commands

struct RunOutcome {
    ExitCode code = ExitCode::ok;
    std::vector<std::string> files;
    nlohmann::json summary = nlohmann::json::object();
    std::string message;
};

namespace detail {

inline const Penalty& need_penalty(const Experiment& e)
{
    if (!e.penalty) throw ValidationError("config: missing field 'penalty'");
    return *e.penalty;
}

inline void write_text(const std::filesystem::path& path, const std::string& text, RunOutcome& out)
{
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    f << text;
    if (!f) throw std::runtime_error("write to " + path.string() + " failed");
    out.files.push_back(path.filename().string());
}

inline void write_csv(const std::filesystem::path& dir, const char* name, const CsvTable& t, RunOutcome& out)
{
    write_text(dir / name, t.str(), out);
}

inline void write_json(const std::filesystem::path& dir, const char* name, const nlohmann::json& j, RunOutcome& out)
{
    write_text(dir / name, j.dump(2) + "\n", out);
}

inline void fail_if(bool failed, RunOutcome& out)
{
    if (failed && out.code == ExitCode::ok) out.code = ExitCode::check_failed;
}

/// Support of the oracle comparison: coordinates, or the groups that meet
/// the planted coordinates for the group penalty.
inline IndexSet oracle_support(const Experiment& e, const Penalty& pen)
{
    IndexSet s = e.planted;
    if (const auto* o = config::section(e.raw, "oracle"); o && o->contains("support"))
        s = config::get<IndexSet>(*o, "oracle", "support");
    detail::require(!s.empty(), "config: the oracle comparison needs a nonempty support (planted sparsity or 'oracle.support')");
    if (const auto* g = std::get_if<GroupPenalty>(&pen)) {
        if (const auto* o = config::section(e.raw, "oracle"); o && o->contains("support")) return s;
        IndexSet groups;
        for (std::size_t k = 0; k < g->partition.group_count(); ++k)
            for (auto j : g->partition.group(k))
                if (std::find(s.begin(), s.end(), j) != s.end()) {
                    groups.push_back(k);
                    break;
                }
        return groups;
    }
    return s;
}

inline ConeSpec oracle_cone(const Experiment& e, const Penalty& pen, const IndexSet& support)
{
    return std::visit(
        [&](const auto& q) -> ConeSpec {
            using T = std::decay_t<decltype(q)>;
            if constexpr (std::is_same_v<T, L1Penalty>)
                return ReSpec{support, 3.0};
            else if constexpr (std::is_same_v<T, GroupPenalty>)
                return GroupReSpec{q.partition, support, 3.0};
            else if constexpr (std::is_same_v<T, SlopePenalty>)
                return WreSpec{static_cast<Index>(support.size()), 3.0, q.weights};
            else
                return ConeQSpec{q.cone, support, 3.0};
        },
        pen);
    (void)e;
}

/// Explicit 'oracle.constant', else an exact value where known, else a
/// multistart estimate (non-certifying).
inline OracleInputs oracle_inputs(const Experiment& e, const Penalty& pen)
{
    OracleInputs in;
    in.support = oracle_support(e, pen);
    const auto* o = config::section(e.raw, "oracle");
    if (o && o->contains("constant")) {
        in.constant = config::get<double>(*o, "oracle", "constant");
        detail::require(in.constant >= 0.0, "config: field 'oracle.constant' must be >= 0");
        in.exact = true;
        return in;
    }
    const ConeSpec spec = oracle_cone(e, pen, in.support);
    ReOptions opt;
    opt.seed = e.seed;
    if (o) opt.starts = config::get_or<int>(*o, "oracle", "budget", opt.starts);
    const ReEstimate est = re_type_constant(e.problem.design, spec, opt);
    in.constant = est.value;
    in.exact = est.exact;
    return in;
}

inline std::optional<Observation> observation_for(const Experiment& e)
{
    if (!e.y) return std::nullopt;
    Observation obs;
    obs.y = *e.y;
    obs.noise = obs.y - e.problem.mean;
    obs.seed = e.seed;
    return obs;
}

inline void run_solve(const Experiment& e, const std::filesystem::path& dir, RunOutcome& out)
{
    const Penalty& pen = need_penalty(e);
    const Observation obs = observation_for(e).value_or(sample_observation(e.problem, replication_seed(e.seed, 1)));
    const SolverResult res = solve(obs.y, e.problem.design, pen, e.solver);
    nlohmann::json j = to_json(res);
    j["prediction_error"] = scaled_norm(res.fitted - e.problem.mean);
    j["observation_seed"] = obs.seed;
    j["penalty"] = to_json(pen);
    write_json(dir, "solution.json", j, out);
    out.summary["converged"] = res.converged;
    out.summary["gap"] = res.gap;
    fail_if(!res.converged, out);
}

inline void run_verify_geometry(const Experiment& e, const std::filesystem::path& dir, RunOutcome& out)
{
    using namespace config;
    const Penalty& pen = need_penalty(e);
    const auto* g = section(e.raw, "geometry");
    GeometryOptions opt;
    opt.seed = e.seed;
    std::size_t instances = 10, pairs = 100;
    if (g) {
        instances = get_or<std::size_t>(*g, "geometry", "instances", instances);
        pairs = get_or<std::size_t>(*g, "geometry", "pairs", pairs);
        opt.tol = get_or<double>(*g, "geometry", "tol", opt.tol);
        opt.dykstra_tol = get_or<double>(*g, "geometry", "dykstra_tol", opt.dykstra_tol);
        opt.samples = get_or<std::size_t>(*g, "geometry", "samples", opt.samples);
    }
    opt.threads = e.mc.threads;
    const SolverConfig cfg = certification_solver_config();

    std::vector<GeometryReport> per(instances);
    parallel_for(
        instances,
        [&](std::size_t i) {
            const Observation obs = sample_observation(e.problem, replication_seed(e.seed, i + 1));
            GeometryOptions local = opt;
            local.seed = replication_seed(e.seed ^ 0x9e0ull, i + 1);
            local.threads = 1;
            per[i] = projection_identity_check(e.problem, obs, pen, cfg, local);
        },
        opt.threads);
    GeometryReport identity;
    identity.check = "projection_identity";
    identity.tol = opt.tol;
    for (const auto& r : per) identity = merge(identity, r);

    std::vector<std::pair<Vector, Vector>> yy;
    for (std::size_t i = 0; i < pairs; ++i)
        yy.emplace_back(sample_observation(e.problem, replication_seed(e.seed ^ 0xa1ull, i + 1)).y,
                        sample_observation(e.problem, replication_seed(e.seed ^ 0xa2ull, i + 1)).y);
    std::vector<GeometryReport> reports{identity};
    if (pairs > 0) {
        const ContractionReport c = contraction_check(e.problem.design, pen, yy, cfg, opt);
        reports.push_back(c.lipschitz);
        if (c.firm) reports.push_back(*c.firm);
    }

    CsvTable t({"check", "instances", "worst_slack", "tol", "pass"});
    nlohmann::json j = nlohmann::json::array();
    bool pass = true;
    for (const auto& r : reports) {
        t.add(CsvTable::Row() << r.check << r.instances << r.worst_slack << r.tol << r.pass);
        j.push_back(to_json(r));
        pass = pass && r.pass;
    }
    write_csv(dir, "geometry.csv", t, out);
    write_json(dir, "geometry.json", j, out);
    out.summary["pass"] = pass;
    fail_if(!pass, out);
}

inline ConeSpec cone_spec_from_config(const nlohmann::json& j, const Experiment& e, std::size_t idx)
{
    using namespace config;
    const std::string path = "constants.specs[" + std::to_string(idx) + "]";
    const auto kind = get<std::string>(j, path, "kind");
    const double c0 = get_or<double>(j, path, "c0", 3.0);
    const Index p = e.problem.design.p();
    if (kind == "RE") return ReSpec{get<IndexSet>(j, path, "support"), c0};
    if (kind == "GroupRE") {
        GroupPartition part;
        if (j.contains("group_size")) part = GroupPartition::contiguous(static_cast<std::size_t>(p), get<std::size_t>(j, path, "group_size"));
        else if (e.penalty && std::holds_alternative<GroupPenalty>(*e.penalty)) part = std::get<GroupPenalty>(*e.penalty).partition;
        else throw ValidationError("config: field '" + path + ".group_size' is required without a group penalty");
        return GroupReSpec{std::move(part), get<IndexSet>(j, path, "groups"), c0};
    }
    if (kind == "WRE") {
        SlopeWeights mu = e.penalty && std::holds_alternative<SlopePenalty>(*e.penalty)
                              ? std::get<SlopePenalty>(*e.penalty).weights
                              : slope_weights(p, e.problem.design.n(), e.problem.sigma);
        return WreSpec{get<Index>(j, path, "s"), c0, std::move(mu)};
    }
    if (kind == "ConeQ") {
        PolyhedralCone cone;
        if (j.contains("block_size")) cone = block_cone(GroupPartition::contiguous(static_cast<std::size_t>(p), get<std::size_t>(j, path, "block_size")));
        else if (e.penalty && std::holds_alternative<ConePenalty>(*e.penalty)) cone = std::get<ConePenalty>(*e.penalty).cone;
        else throw ValidationError("config: field '" + path + ".block_size' is required without a cone penalty");
        return ConeQSpec{std::move(cone), get<IndexSet>(j, path, "support"), c0};
    }
    throw ValidationError("config: field '" + path + ".kind' must be one of RE, GroupRE, WRE, ConeQ");
}

inline void run_constants(const Experiment& e, const std::filesystem::path& dir, RunOutcome& out)
{
    using namespace config;
    const json& c = need(e.raw, "", "constants");
    ReOptions opt;
    opt.seed = e.seed;
    opt.threads = e.mc.threads;
    opt.starts = get_or<int>(c, "constants", "budget", opt.starts);
    const json& specs = need(c, "constants", "specs");
    detail::require(specs.is_array(), "config: field 'constants.specs' must be an array");

    CsvTable t({"kind", "S", "c0", "value", "status", "starts"});
    nlohmann::json rows = nlohmann::json::array();
    bool pass = true;
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const ConeSpec spec = cone_spec_from_config(specs[i], e, i);
        const ReEstimate est = re_type_constant(e.problem.design, spec, opt);
        const double residual = cone_residual(spec, est.witness);
        const double ratio = est.witness.dot(e.problem.design.matrix().transpose() * (e.problem.design.matrix() * est.witness)) /
                             static_cast<double>(e.problem.design.n()) / cone_denominator(spec, est.witness);
        const bool ok = residual <= 1e-9 && std::abs(ratio - est.value * est.value) <= 1e-8;
        pass = pass && ok;
        t.add(CsvTable::Row() << spec_name(spec) << format_index_set(spec_support(spec)) << detail::spec_c0(spec) << est.value
                              << est.status() << est.starts);
        rows.push_back({{"kind", spec_name(spec)},
                        {"value", est.value},
                        {"status", est.status()},
                        {"witness", vector_to_json(est.witness)},
                        {"membership_residual", residual},
                        {"witness_ok", ok}});
    }
    nlohmann::json j;
    j["constants"] = rows;
    j["upper_bound_note"] = "multistart values are attained by their witnesses, so they bound the true minima from above";
    if (e.penalty) {
        j["penalty"] = to_json(*e.penalty);
        j["recommended_tuning"] = recommended_tuning(*e.penalty, e.problem.design, e.problem.sigma);
    }
    write_csv(dir, "constants.csv", t, out);
    write_json(dir, "constants.json", j, out);
    out.summary["pass"] = pass;
    fail_if(!pass, out);
}

inline nlohmann::json tails_json(const ConcentrationReport& r)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows)
        rows.push_back({{"side", side_name(row.side)}, {"t", row.t}, {"empirical", row.empirical}, {"bound", row.bound},
                        {"slack", row.slack}, {"pass", row.pass}});
    return {{"samples", r.samples}, {"median", r.median_hat}, {"mean", r.mean_hat}, {"rows", rows}, {"pass", r.pass}};
}

/// Tails, coverage (when a support is known) and events from a sample of
/// errors; shared by simulate and report.
inline void analyse(const Experiment& e, const std::vector<double>& errors, std::size_t nonconverged, std::size_t total,
                    const std::filesystem::path& dir, RunOutcome& out, bool with_events)
{
    const Penalty& pen = need_penalty(e);
    nlohmann::json report;
    const double frac = total ? static_cast<double>(nonconverged) / static_cast<double>(total) : 0.0;
    report["replications"] = total;
    report["nonconverged"] = nonconverged;
    const bool conv_ok = frac <= kMaxNonConverged;
    report["convergence_pass"] = conv_ok;
    fail_if(!conv_ok, out);
    detail::require(!errors.empty(), "report: no converged replications");

    const ConcentrationReport tails = concentration_check(errors, e.problem.sigma, e.problem.design.n(), e.mc);
    write_csv(dir, "tails.csv", tails_table(tails), out);
    write_csv(dir, "tails_mean.csv", mean_tails_table(tails), out);
    report["tails"] = tails_json(tails);
    fail_if(!tails.pass, out);

    const bool have_support = !e.planted.empty() || (config::section(e.raw, "oracle") && e.raw.at("oracle").contains("support"));
    if (have_support) {
        const OracleInputs in = oracle_inputs(e, pen);
        const CoverageReport cov = oracle_coverage_check(e.problem, pen, in, errors, e.mc);
        write_csv(dir, "coverage.csv", coverage_table(cov), out);
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : cov.rows)
            rows.push_back({{"delta", r.delta}, {"bound", r.bound}, {"violations", r.violations}, {"fraction", r.fraction},
                            {"slack", r.slack}, {"pass", r.pass}});
        report["coverage"] = {{"rows", rows},
                              {"constant", in.constant},
                              {"certifying", cov.certifying},
                              {"expectation",
                               {{"mean", cov.expectation.mean},
                                {"bound", cov.expectation.bound},
                                {"slack", cov.expectation.slack},
                                {"pass", cov.expectation.pass}}},
                              {"pass", cov.pass}};
        // estimate-based constants cannot certify a bound, so they do not gate the exit code
        if (cov.certifying) fail_if(!cov.pass, out);
    }

    if (with_events) {
        const EventReport ev = event_probability_check(e.problem, pen, e.mc);
        write_csv(dir, "events.csv", events_table(ev), out);
        nlohmann::json rows = nlohmann::json::array();
        for (const auto& r : ev.rows)
            rows.push_back({{"event", r.event}, {"frequency", r.frequency}, {"slack", r.slack}, {"asserted", r.asserted}, {"pass", r.pass}});
        report["events"] = rows;
        fail_if(!ev.pass, out);
    }
    write_json(dir, "report.json", report, out);
    out.summary = report;
}

inline void run_simulate(const Experiment& e, const std::filesystem::path& dir, RunOutcome& out)
{
    const Simulation sim = simulate_prediction_errors(e.problem, need_penalty(e), e.solver, e.mc);
    write_csv(dir, "errors.csv", errors_table(sim), out);
    analyse(e, sim.errors(), sim.nonconverged, sim.reps.size(), dir, out, true);
}

/// Reads errors.csv back (from 'report.input', default the output directory).
inline void run_report(const Experiment& e, const std::filesystem::path& dir, RunOutcome& out)
{
    std::filesystem::path input = dir;
    if (const auto* r = config::section(e.raw, "report")) input = config::get_or<std::string>(*r, "report", "input", dir.string());
    std::ifstream f(input / "errors.csv");
    if (!f) throw std::runtime_error("report: cannot read " + (input / "errors.csv").string());
    std::string line;
    std::getline(f, line);
    detail::require(line == "rep,seed,error,converged,gap", "report: errors.csv has an unexpected header");
    std::vector<double> errors;
    std::size_t total = 0, nonconverged = 0;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        detail::require(cells.size() == 5, "report: malformed errors.csv row");
        ++total;
        if (cells[3] == "true") {
            std::istringstream v(cells[2]);
            v.imbue(std::locale::classic());
            double x = 0.0;
            v >> x;
            errors.push_back(x);
        } else
            ++nonconverged;
    }
    analyse(e, errors, nonconverged, total, dir, out, false);
}

} // namespace detail

/// Runs a parsed experiment, writing artifacts and manifest.json to its output directory.
inline RunOutcome run_experiment(const Experiment& e)
{
    const auto start = std::chrono::steady_clock::now();
    const std::filesystem::path dir(e.output);
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec || !std::filesystem::is_directory(dir)) throw std::runtime_error("cannot create output directory " + dir.string());

    RunOutcome out;
    if (e.command == "solve") detail::run_solve(e, dir, out);
    else if (e.command == "verify-geometry") detail::run_verify_geometry(e, dir, out);
    else if (e.command == "constants") detail::run_constants(e, dir, out);
    else if (e.command == "simulate") detail::run_simulate(e, dir, out);
    else detail::run_report(e, dir, out);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    nlohmann::json m;
    m["command"] = e.command;
    m["config_hash"] = hex64(fnv1a(e.raw.dump()));
    m["version"] = kVersion;
    m["seeds"] = {{"base_seed", e.seed}};
    m["wall_time_seconds"] = wall;
    m["files"] = out.files;
    m["exit_code"] = static_cast<int>(out.code);
    detail::write_json(dir, "manifest.json", m, out);
    return out;
}

/// Whole pipeline from a config file; never throws, reports through the code.
inline int run(const std::string& config_path, std::optional<std::string> output = std::nullopt,
               std::optional<std::uint64_t> seed = std::nullopt, std::ostream& err = std::cerr)
{
    try {
        std::ifstream f(config_path);
        if (!f) throw ValidationError("config: cannot read " + config_path);
        nlohmann::json doc;
        try {
            doc = nlohmann::json::parse(f);
        } catch (const nlohmann::json::parse_error& ex) {
            throw ValidationError(std::string("config: malformed JSON: ") + ex.what());
        }
        const Experiment e = parse_experiment(doc, seed, output);
        const RunOutcome out = run_experiment(e);
        if (out.code == ExitCode::check_failed) err << "check failed; see " << e.output << "\n";
        return static_cast<int>(out.code);
    } catch (const std::exception& ex) {
        err << "error: " << ex.what() << "\n";
        return static_cast<int>(ExitCode::error);
    }
}

} // namespace cpls
