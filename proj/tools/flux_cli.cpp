// flux: run, compare or validate scenario files.

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <yaml-cpp/yaml.h>

#include "flux/scenario.hpp"

namespace {

int report_error(const std::exception& e, int code) {
    std::cerr << "flux: error: " << e.what() << '\n';
    return code;
}

template <class Fn>
int guarded(Fn&& fn) {
    try {
        fn();
        return 0;
    } catch (const flux::Error& e) {
        return report_error(e, flux::exit_code_for(e));
    } catch (const YAML::Exception& e) {
        return report_error(e, 1);
    } catch (const std::filesystem::filesystem_error& e) {
        return report_error(e, 3);
    } catch (const std::exception& e) {
        return report_error(e, 2);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"FLUX progressive Bayesian estimation (1-D)"};
    app.require_subcommand(1);
    long long seed = 0;
    app.add_option("--seed", seed, "Reserved; all methods are deterministic");

    std::string scenario_path;
    std::string out_dir = ".";

    auto* run = app.add_subcommand("run", "Run a scenario and write report.json, trace.csv and particles_final.csv");
    run->add_option("scenario", scenario_path, "Scenario file")->required();
    run->add_option("--out", out_dir, "Output directory");

    auto* compare = app.add_subcommand("compare", "Run a scenario and print the report to stdout");
    compare->add_option("scenario", scenario_path, "Scenario file")->required();

    auto* validate = app.add_subcommand("validate", "Parse and validate a scenario");
    validate->add_option("scenario", scenario_path, "Scenario file")->required();

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        return guarded([&] {
            const auto outcome = flux::run_scenario(flux::load_scenario(scenario_path));
            for (const auto& path : flux::write_outputs(outcome, out_dir)) std::cout << "wrote " << path.string() << '\n';
            std::cout << "wall_time_s " << outcome.report.wall_time_s << '\n';
        });
    }
    if (compare->parsed()) {
        return guarded([&] {
            const auto outcome = flux::run_scenario(flux::load_scenario(scenario_path));
            std::cout << flux::report_to_json(outcome.report, true).dump(2) << '\n';
        });
    }
    return guarded([&] {
        const auto s = flux::load_scenario(scenario_path);
        std::cout << "ok: " << flux::method_name(s.method) << '\n';
    });
}
