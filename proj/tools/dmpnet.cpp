// Command-line entry point: generate synthetic RGB-D data, train the
// detector, run inference, evaluate saliency maps, and verify gradients.

#include <CLI11.hpp>
#include <cstdio>
#include <exception>
#include <string>

#include "dmpnet/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"RGB-D salient object detection with dynamic message propagation"};
    app.require_subcommand(1);

    dmpnet::CommandContext ctx;
    std::string train_dir, val_dir, checkpoint, data_dir, pred_dir, gt_dir;
    std::string scope = "all";

    auto add_common = [&](CLI::App* cmd, bool with_out) {
        cmd->add_option("--config", ctx.config_path, "key = value configuration file");
        cmd->add_option("--seed", ctx.seed, "rng seed recorded in the run header");
        if (with_out) cmd->add_option("--out", ctx.out, "output path");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic RGB-D dataset");
    add_common(gen, true);

    CLI::App* train = app.add_subcommand("train", "train a detector on a dataset directory");
    add_common(train, true);
    train->add_option("train_dir", train_dir, "dataset directory with rgb/depth/gt")
        ->required();
    train->add_option("val_dir", val_dir, "validation dataset (default: train_dir)");

    CLI::App* infer = app.add_subcommand("infer", "predict saliency maps for a dataset");
    add_common(infer, true);
    infer->add_option("checkpoint", checkpoint, "trained checkpoint file")->required();
    infer->add_option("data_dir", data_dir, "dataset directory with rgb and depth")
        ->required();

    CLI::App* eval = app.add_subcommand("eval", "score predictions against ground truth");
    add_common(eval, true);
    eval->add_option("pred_dir", pred_dir, "directory of predicted .pgm maps")->required();
    eval->add_option("gt_dir", gt_dir, "directory of ground-truth .pgm masks")->required();

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    add_common(grad, false);
    grad->add_option("scope", scope, "ops | dmp | end-to-end | all | <op name>");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            dmpnet::cmd_gen_data(ctx);
        } else if (train->parsed()) {
            dmpnet::cmd_train(ctx, train_dir, val_dir);
        } else if (infer->parsed()) {
            dmpnet::cmd_infer(ctx, checkpoint, data_dir);
        } else if (eval->parsed()) {
            dmpnet::cmd_eval(ctx, pred_dir, gt_dir);
        } else if (grad->parsed()) {
            return dmpnet::cmd_gradcheck(ctx, scope) == 0 ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
