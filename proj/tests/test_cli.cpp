#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "twinforge/config.hpp"

using namespace twinforge;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
    auto dir = fs::temp_directory_path() / "twinforge_cli_tests";
    fs::create_directories(dir);
    return dir;
}

std::string cli_path() {
    const char* p = std::getenv("TWINFORGE_CLI");
    REQUIRE_MESSAGE(p != nullptr, "TWINFORGE_CLI must point at the built binary");
    return p;
}

int run_cli(const std::string& args, std::string* err_out = nullptr) {
    const auto err_file = work_dir() / "stderr.txt";
    const std::string cmd = cli_path() + " " + args + " >/dev/null 2>" + err_file.string();
    const int status = std::system(cmd.c_str());
    if (err_out) {
        std::ifstream in(err_file);
        std::stringstream ss;
        ss << in.rdbuf();
        *err_out = ss.str();
    }
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

fs::path write_config(const std::string& name, double cfl = 0.5, const std::string& control = "grid",
                      int m = 9, int n = 12) {
    const auto out_dir = work_dir() / (name + "_out");
    nlohmann::ordered_json doc;
    doc["schema"] = 1;
    doc["seed"] = 7;
    doc["output_dir"] = out_dir.string();
    doc["jobs"] = 2;
    doc["case"] = {{"flux", "buckley_leverett"},
                   {"ic", {{"kind", "sine"}, {"amplitude", 0.4}, {"offset", 0.5}}},
                   {"grid", {{"M", m}, {"N", n}, {"T", 1.0}, {"x_lo", 0.0}, {"x_hi", 1.0}}},
                   {"cfl", cfl}};
    doc["control"] = {{"kind", control}, {"value", 0.0}};
    doc["objective"] = {{"kind", "terminal_quadratic"}, {"target", 0.5}};
    doc["train"] = {{"k_folds", 2}, {"max_outer_iters", 6}};
    const auto path = work_dir() / (name + ".json");
    std::ofstream out(path);
    out << doc.dump(2);
    return path;
}

} // namespace

TEST_CASE("config errors name the offending field and exit with code 2") {
    const auto path = write_config("badcfl", /*cfl=*/0.9);
    std::string err;
    CHECK(run_cli("simulate " + path.string(), &err) == 2);
    CHECK(err.find("cfl") != std::string::npos);
    auto payload = nlohmann::json::parse(err);
    CHECK(payload["error"]["kind"] == "config");
}

TEST_CASE("gradcheck before simulate enumerates the missing inputs") {
    const auto path = write_config("missing");
    std::string err;
    CHECK(run_cli("gradcheck " + path.string(), &err) == 2);
    CHECK(err.find("gray_solution.field") != std::string::npos);
}

TEST_CASE("full pipeline: simulate, train, gradcheck, report") {
    const auto path = write_config("pipeline");
    const auto out = work_dir() / "pipeline_out";
    fs::remove_all(out);

    REQUIRE(run_cli("simulate " + path.string()) == 0);
    REQUIRE(fs::exists(out / "gray_solution.field"));
    // format contract: header row plus M*N data rows
    {
        std::ifstream in(out / "gray_solution.field");
        std::string first;
        std::getline(in, first);
        CHECK(first.find("\"k\":1") != std::string::npos);
        long rows = 0;
        std::string line;
        while (std::getline(in, line))
            if (!line.empty()) ++rows;
        CHECK(rows == 9 * 12);
    }
    const std::string gray_bytes = slurp(out / "gray_solution.field");

    REQUIRE(run_cli("train " + path.string()) == 0);
    REQUIRE(fs::exists(out / "dictionary.json"));
    {
        auto rep = nlohmann::json::parse(slurp(out / "train_report.json"));
        auto hist = rep["report"]["accepted_validation_errors"];
        REQUIRE(hist.size() >= 1);
        for (size_t k = 1; k < hist.size(); ++k)
            CHECK(hist[k].get<double>() < hist[k - 1].get<double>());
    }

    REQUIRE(run_cli("gradcheck " + path.string() + " --components 3 --fd-step 1e-5") == 0);
    {
        auto rep = nlohmann::json::parse(slurp(out / "gradient_report.json"));
        CHECK(rep["max_rel_err_adjoint_vs_fd"].get<double>() <= 1e-4);
        CHECK(rep["twin_solves_adjoint"].get<long>() == 1);
        CHECK(rep["gray_solves_fd"].get<long>() == 2L * 9 * 12);
        std::ifstream csv(out / "gradcheck.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "component,adjoint,fd,rel_err");
    }

    REQUIRE(run_cli("report " + path.string()) == 0);
    {
        std::ifstream csv(out / "flux_compare.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "u,F_true,F_twin,dF_true,dF_twin,in_range");
        CHECK(fs::exists(out / "summary.json"));
        CHECK(fs::exists(out / "mismatch_history.csv"));
        CHECK(fs::exists(out / "gradient_overlay.csv"));
    }

    // reruns with the same seed are byte-identical
    const std::string dict_bytes = slurp(out / "dictionary.json");
    const std::string summary_bytes = slurp(out / "summary.json");
    REQUIRE(run_cli("simulate " + path.string()) == 0);
    REQUIRE(run_cli("train " + path.string()) == 0);
    REQUIRE(run_cli("gradcheck " + path.string() + " --components 3 --fd-step 1e-5") == 0);
    REQUIRE(run_cli("report " + path.string()) == 0);
    CHECK(slurp(out / "gray_solution.field") == gray_bytes);
    CHECK(slurp(out / "dictionary.json") == dict_bytes);
    CHECK(slurp(out / "summary.json") == summary_bytes);
}

TEST_CASE("adhoc basis mode trains coefficients without editing the dictionary") {
    const auto path = write_config("adhoc");
    const auto out = work_dir() / "adhoc_out";
    fs::remove_all(out);
    REQUIRE(run_cli("simulate " + path.string()) == 0);

    // declare a fixed dictionary
    Dictionary fixed;
    for (int eta = -1; eta <= 2; ++eta) fixed.add(make_basis1(1, eta), 0.0);
    const auto dict_path = work_dir() / "adhoc_basis.json";
    save_dictionary(dict_path, fixed);

    REQUIRE(run_cli("train " + path.string() + " --basis adhoc:" + dict_path.string()) == 0);
    Dictionary trained = load_dictionary(out / "dictionary.json");
    REQUIRE(trained.size() == fixed.size());
    for (int b = 0; b < fixed.size(); ++b) CHECK(trained.id(b) == fixed.id(b));
    bool moved = false;
    for (int b = 0; b < trained.size(); ++b) moved |= trained.alpha(b) != 0.0;
    CHECK(moved);
}

TEST_CASE("pretrain+finetune mode reports zero pretraining solves") {
    const auto path = write_config("pretrain");
    const auto out = work_dir() / "pretrain_out";
    fs::remove_all(out);
    REQUIRE(run_cli("simulate " + path.string()) == 0);
    REQUIRE(run_cli("train " + path.string() + " --metric pretrain+finetune") == 0);
    auto rep = nlohmann::json::parse(slurp(out / "train_report.json"));
    CHECK(rep["pretrain_twin_solves"].get<long>() == 0);
    CHECK(rep["metric_mode"] == "pretrain+finetune");
}

TEST_CASE("experiment config round-trips through the loader") {
    const auto path = write_config("loader");
    ExperimentConfig cfg = load_experiment_config(path);
    CHECK(cfg.seed == 7);
    CHECK(cfg.gray_case.grid.time_nodes() == 9);
    CHECK(cfg.gray_case.flux_kind == FluxKind::buckley_leverett);
    CHECK(!cfg.make_control().is_scalar());
    CHECK(cfg.train.k_folds == 2);

    // unknown flux name is a config error naming the field
    auto doc = nlohmann::json::parse(slurp(path));
    doc["case"]["flux"] = "warp_drive";
    const auto bad = work_dir() / "loader_bad.json";
    std::ofstream(bad) << doc.dump();
    CHECK_THROWS_WITH_AS(load_experiment_config(bad), doctest::Contains("case.flux"), error);
}
