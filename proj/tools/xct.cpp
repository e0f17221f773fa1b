#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <iostream>

#include "xct/common.hpp"
#include "xct/pipeline.hpp"

namespace {

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const xct::MissingInputError*>(&e)) return 2;
    if (dynamic_cast<const xct::NumericalError*>(&e)) return 3;
    return 1;  // config/validation/provenance
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"xct - crosscoder tracing across LM pretraining checkpoints"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    bool force = false;

    struct SubState {
        CLI::App* sub = nullptr;
        std::string name;
    };
    std::vector<SubState> subs;
    for (const auto& name : xct::command_names()) {
        CLI::App* sub = app.add_subcommand(name);
        sub->add_option("-c,--config", config_path, "experiment config file");
        sub->add_option("--set", overrides, "override a config key: section.key=value")
            ->take_all();
        sub->add_flag("--force", force, "re-run even when artifacts are up to date");
        if (name == "extract" || name == "train-xc")
            sub->add_option_function<std::string>(
                "--sources",
                [&overrides](const std::string& v) { overrides.push_back("extract.sources=" + v); },
                "checkpoint list (id, step:N, or last)");
        if (name == "report")
            sub->add_option_function<std::string>(
                "--stage",
                [&overrides](const std::string& v) { overrides.push_back("report.stage=" + v); },
                "checkpoints, features, or all");
        if (name == "validate")
            sub->add_option_function<std::string>(
                "--pair",
                [&overrides](const std::string& v) { overrides.push_back("validate.pair=" + v); },
                "two checkpoint refs for the ablation study");
        subs.push_back({sub, name});
    }

    CLI11_PARSE(app, argc, argv);

    try {
        xct::Config cfg = xct::default_config();
        if (!config_path.empty()) cfg.apply(xct::Config::load(config_path));
        for (const auto& o : overrides) cfg.set_dotted(o);

        for (auto& s : subs) {
            if (!s.sub->parsed()) continue;
            xct::CommandResult res = xct::run_command(s.name, cfg, force);
            if (res.up_to_date) {
                std::printf("%s: up-to-date (%zu artifacts)\n", s.name.c_str(),
                            res.outputs.size());
            } else {
                std::printf("%s: wrote %zu artifacts\n", s.name.c_str(), res.outputs.size());
                for (const auto& o : res.outputs) std::printf("  %s\n", o.c_str());
            }
        }
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return exit_code_for(e);
    }
}
