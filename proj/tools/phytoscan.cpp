// phytoscan: run pipeline stages over a workspace, replay manifests, or serve the review API.

#include <CLI11.hpp>

#include <csignal>
#include <iostream>

#include "phyto/pipeline.hpp"
#include "phyto/service.hpp"

namespace {

using namespace phyto;

constexpr int kUsageError = 2;

struct StageCommand {
    CLI::App* app = nullptr;
    std::map<std::string, std::string> values;  // only flags the user passed
};

service::Service* g_service = nullptr;

void on_signal(int) {
    if (g_service) g_service->stop();
}

void print_manifest(const pipeline::RunManifest& m) {
    std::cout << m.stage << " " << m.run_id << "  (" << m.outputs.size() << " outputs)\n";
    for (const auto& n : m.notes) std::cerr << "note: " << n << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Phytolith scanning pipeline and review service"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string workspace = ".";
    std::string config_path;
    app.add_option("-w,--workspace", workspace, "workspace root")->capture_default_str();
    app.add_option("-c,--config", config_path, "INI file with one section per stage");

    std::map<std::string, StageCommand> stages;
    for (const auto& stage : pipeline::stage_names()) {
        auto& cmd = stages[stage];
        cmd.app = app.add_subcommand(stage, "run the " + stage + " stage");
        for (const auto& spec : pipeline::stage_schema(stage)) {
            std::string doc = spec.doc;
            if (!spec.default_value.empty()) doc += " [" + spec.default_value + "]";
            if (spec.required) doc += " (required)";
            cmd.app->add_option_function<std::string>(
                "--" + spec.key, [&cmd, key = spec.key](const std::string& v) { cmd.values[key] = v; }, doc);
        }
    }

    auto* serve = app.add_subcommand("serve", "serve the review API over the workspace");
    std::string host = "127.0.0.1", table = "gate/probabilities.csv";
    int port = 8080;
    serve->add_option("--host", host, "bind address")->capture_default_str();
    serve->add_option("--port", port, "port (0 picks a free one)")->capture_default_str();
    serve->add_option("--table", table, "probability table, workspace-relative")->capture_default_str();

    auto* rerun = app.add_subcommand("rerun", "re-execute a recorded run and compare output hashes");
    std::string manifest_path;
    rerun->add_option("--manifest", manifest_path, "run manifest JSON")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsageError;
    }

    try {
        const pipeline::Workspace ws{std::filesystem::absolute(workspace)};
        std::optional<IniFile> config;
        if (!config_path.empty()) config = IniFile::load(config_path);

        for (auto& [stage, cmd] : stages) {
            if (!cmd.app->parsed()) continue;
            const auto params = pipeline::resolve_params(stage, config ? &*config : nullptr, cmd.values);
            print_manifest(pipeline::run_stage(ws, stage, params));
            return 0;
        }

        if (rerun->parsed()) {
            const auto recorded = pipeline::load_manifest(manifest_path);
            const auto r = pipeline::rerun(ws, recorded);
            print_manifest(r.manifest);
            for (const auto& f : r.changed_inputs) std::cerr << "input changed: " << f << "\n";
            for (const auto& f : r.mismatched_outputs) std::cerr << "output differs: " << f << "\n";
            std::cout << (r.reproduced() ? "reproduced" : "NOT reproduced") << "\n";
            return r.reproduced() ? 0 : 1;
        }

        if (serve->parsed()) {
            service::ServiceOptions opt;
            opt.table = table;
            opt.config = config;
            service::Service svc(ws, opt);
            const int bound = svc.bind(host, port);
            g_service = &svc;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cout << "listening on http://" << host << ":" << bound << "\n" << std::flush;
            svc.listen_after_bind();
            g_service = nullptr;
            return 0;
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsageError;
}
