#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "duet/duet.hpp"

// Exit codes: 0 success, 2 invalid input or configuration, 3 numeric
// failure, 1 anything unexpected.

int main(int argc, char** argv) {
    CLI::App app{"desk-scale unified multimodal harness"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::string out_root = "out";
    std::uint64_t seed = 0;
    app.add_option("--config", config_path, "key=value config file");
    app.add_option("--seed", seed, "root seed for every derived stream")->capture_default_str();
    app.add_option("--out", out_root, "output root directory")->capture_default_str();

    CLI::App* cmd_gen = app.add_subcommand("gen-data", "synthesize the train and eval corpora");
    CLI::App* cmd_qc = app.add_subcommand("qc", "filter and score the training corpus");

    std::string stage_sel = "all";
    CLI::App* cmd_train = app.add_subcommand("train", "run the curriculum on the filtered corpus");
    cmd_train->add_option("--stage", stage_sel, "1, 2, 3 or all")->capture_default_str();

    std::string prompt;
    std::int64_t steps = 20;
    CLI::App* cmd_sample = app.add_subcommand("sample", "draw one image from a text prompt");
    cmd_sample->add_option("--prompt", prompt, "conditioning text")->required();
    cmd_sample->add_option("--steps", steps, "integrator steps")->capture_default_str();

    std::string split = "eval";
    std::string ckpt_path;
    CLI::App* cmd_eval = app.add_subcommand("eval", "score a split and write the report");
    cmd_eval->add_option("--split", split, "which split to evaluate")->capture_default_str();
    cmd_eval->add_option("--ckpt", ckpt_path, "checkpoint override");
    cmd_sample->add_option("--ckpt", ckpt_path, "checkpoint override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        const duet::PipelineConfig cfg = duet::PipelineConfig::load(config_path);
        if (cmd_gen->parsed()) {
            duet::pipeline::gen_data(cfg, seed, out_root);
            std::cout << "wrote " << duet::pipeline::paths::manifest(out_root, "train") << " and "
                      << duet::pipeline::paths::manifest(out_root, "eval") << "\n";
        } else if (cmd_qc->parsed()) {
            const duet::QcResult r = duet::pipeline::qc(cfg, out_root);
            std::cout << "kept " << r.kept.size() << " of " << r.n_input << " records ("
                      << r.n_coarse_rejected << " coarse-rejected, " << r.n_score_rejected
                      << " below the score cut)\n";
        } else if (cmd_train->parsed()) {
            duet::TrainHooks hooks;
            hooks.on_step = [](const duet::TraceRow& row, const duet::UnifiedModel&) {
                if (row.step % 50 == 0)
                    std::cout << "step " << row.step << " [" << duet::category_name(row.category)
                              << "] total " << row.total << "\n";
            };
            duet::pipeline::train(cfg, seed, out_root, stage_sel, hooks);
            std::cout << "trained stage " << stage_sel << "; artifacts under "
                      << duet::pipeline::paths::train_dir(out_root) << "\n";
        } else if (cmd_sample->parsed()) {
            duet::pipeline::sample(cfg, out_root, prompt, steps, seed, ckpt_path);
            std::cout << "wrote " << duet::pipeline::paths::sample_pgm(out_root) << "\n";
        } else if (cmd_eval->parsed()) {
            duet::pipeline::eval(cfg, seed, out_root, split, ckpt_path);
            std::cout << "wrote " << duet::pipeline::paths::report_json(out_root) << "\n";
        }
    } catch (const duet::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const duet::ValidationError& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const duet::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const duet::ScoringError& e) {
        std::cerr << "scoring error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
