// xnmoe: train, evaluate, gradient-check, summarize and validate data for the
// mixture-of-experts facial-expression model.
//
// Exit codes: 0 ok, 1 other failure, 2 config, 3 data, 4 numeric,
// 5 checkpoint/config mismatch, 6 gradient-check threshold violation.

#include <xnmoe.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace xnmoe;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4, kCheckpoint = 5, kGradCheck = 6 };

struct Globals {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out;
    std::optional<std::uint64_t> seed;
};

struct Session {
    RunConfig cfg;
    fs::path out;
};

Session open_session(const Globals& g)
{
    Session s;
    if (!g.config_path.empty()) s.cfg.load_file(g.config_path);
    for (const auto& o : g.overrides) s.cfg.apply_override(o);
    if (g.seed) s.cfg.set("seed", std::to_string(*g.seed));
    if (!g.out.empty()) s.out = g.out;
    else if (const char* env = std::getenv("XNMOE_OUT"); env && *env) s.out = env;
    else s.out = "xnmoe_out";
    fs::create_directories(s.out);
    std::ofstream(s.out / "config.resolved") << "# output directory: " << s.out.string() << '\n' << s.cfg.resolved();
    return s;
}

DatasetManifest load_data(const RunConfig& cfg)
{
    const auto& labels = cfg.str("data.labels");
    if (labels.empty()) throw ConfigError("data.labels is required");
    auto m = load_manifest(cfg.str("data.root"), labels, cfg.class_names());
    for (const auto& w : m.warnings) std::cerr << "warning: " << w << '\n';
    if (m.samples.empty()) throw DataError("manifest has no usable samples");
    const bool all_split = std::all_of(m.samples.begin(), m.samples.end(), [](const auto& s) { return s.split.has_value(); });
    if (!all_split) m = stratified_split(std::move(m), cfg.real("data.test_fraction"), cfg.integer("data.seed"));
    return m;
}

std::map<std::string, std::size_t> class_counts(const std::vector<LabeledSample>& s, const DatasetManifest& m)
{
    std::map<std::string, std::size_t> out;
    for (const auto& x : s) ++out[m.class_names[x.label]];
    return out;
}

int cmd_train(const Globals& g)
{
    auto s = open_session(g);
    const auto manifest = load_data(s.cfg);
    const std::size_t K = manifest.num_classes();
    const auto model_cfg = s.cfg.model_config(K);
    const auto train_cfg = s.cfg.train_config();

    auto train = manifest.subset(Split::train);
    std::vector<LabeledSample> val;
    const auto& mode = s.cfg.str("training.validation");
    if (mode == "carve") std::tie(train, val) = carve_validation(train, K, s.cfg.real("data.val_fraction"), s.cfg.integer("data.seed"));
    else if (mode == "test") val = manifest.subset(Split::test);
    else val = train;
    std::cout << "train " << train.size() << " samples, validation " << val.size() << " (" << mode << "), " << K
              << " classes\n";

    BatchGenerator<float> train_gen(train, K, s.cfg.generator_options(model_cfg.input_size, true));
    BatchGenerator<float> val_gen(val, K, s.cfg.generator_options(model_cfg.input_size, false));
    ExpressNetModel<float> model(model_cfg, train_cfg.seed);
    Trainer<float> trainer(model, train_cfg);
    trainer.on_epoch = [](const EpochRecord& r) {
        std::printf("epoch %zu  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f  lr %.3g  best %zu\n",
                    r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc, r.lr, r.best);
        std::fflush(stdout);
    };
    const auto res = trainer.fit(train_gen, val_gen, s.out, s.cfg.boolean("training.resume"));
    std::cout << "best epoch " << res.best_epoch << " val_acc " << res.best_val_acc << "\n"
              << "log: " << res.log_path.string() << "\ncheckpoint: " << res.best_checkpoint.string() << '\n';
    return kOk;
}

int cmd_eval(const Globals& g)
{
    auto s = open_session(g);
    const auto manifest = load_data(s.cfg);
    const auto model_cfg = s.cfg.model_config(manifest.num_classes());
    const std::size_t K = model_cfg.num_classes;
    const auto& which = s.cfg.str("eval.split");
    std::vector<LabeledSample> samples =
        which == "all" ? manifest.samples : manifest.subset(which == "train" ? Split::train : Split::test);

    ExpressNetModel<float> model(model_cfg, s.cfg.integer("seed"));
    fs::path ckpt = s.cfg.str("eval.checkpoint");
    if (ckpt.empty()) ckpt = s.out / kBestCheckpointName;
    load_checkpoint(model.parameters(), ckpt);

    auto train_cfg = s.cfg.train_config();
    Trainer<float> trainer(model, train_cfg);
    BatchGenerator<float> gen(samples, K, s.cfg.generator_options(model_cfg.input_size, false));
    const auto r = trainer.evaluate(gen);

    std::vector<std::string> names = manifest.class_names;
    for (std::size_t k = names.size(); k < K; ++k) names.push_back("class" + std::to_string(k));
    const auto rep = report(confusion(r.truth, r.predicted, K));
    const auto text = render_text(rep, names);
    std::ofstream(s.out / "report.txt") << text;
    std::ofstream(s.out / "report.json") << render_json(rep, names);
    std::ofstream pred(s.out / "predictions.csv");
    pred << "id,true,pred";
    for (std::size_t k = 0; k < K; ++k) pred << ",prob_" << k;
    pred << '\n';
    char buf[32];
    for (std::size_t i = 0; i < r.ids.size(); ++i) {
        pred << r.ids[i] << ',' << r.truth[i] << ',' << r.predicted[i];
        for (double p : r.probabilities[i]) {
            std::snprintf(buf, sizeof buf, "%.9g", p);
            pred << ',' << buf;
        }
        pred << '\n';
    }
    std::cout << "checkpoint " << ckpt.string() << ", split " << which << ", " << r.ids.size() << " samples\n"
              << "loss " << r.loss << "  accuracy " << r.accuracy << "\n\n"
              << text;
    return kOk;
}

int cmd_gradcheck(const Globals& g, const std::string& fault)
{
    auto s = open_session(g);
    if (!fault.empty()) {
        if (fault != "conv2d") throw ConfigError("unknown fault '" + fault + "' (supported: conv2d)");
        testing::corrupt_conv_backward = true;
    }
    GradCheckOptions opt;
    opt.seed = s.cfg.integer("seed") + 7;
    const auto rep = run_gradient_suite(opt);
    std::printf("%-20s %14s %10s %9s %11s %14s  %s\n", "component", "max rel err", "threshold", "checked", "kink skips",
                "routing skips", "status");
    for (const auto& c : rep.components)
        std::printf("%-20s %14.3e %10.0e %9zu %11zu %14zu  %s\n", c.name.c_str(), c.max_rel_error, c.threshold,
                    c.checked, c.kink_skips, c.routing_skips, c.passed() ? "ok" : "FAIL");
    std::printf("MoE selection-stability skips: %zu\n", rep.routing_skips());
    if (!rep.passed()) {
        std::string failing;
        for (const auto& c : rep.components)
            if (!c.passed()) failing += (failing.empty() ? "" : ", ") + c.name;
        const auto& w = rep.worst();
        std::printf("gradient check FAILED in: %s\n", failing.c_str());
        std::printf("worst component: %s (max rel err %.3e at %s)\n", w.name.c_str(), w.max_rel_error, w.worst.c_str());
        return kGradCheck;
    }
    std::printf("gradient check passed\n");
    return kOk;
}

int cmd_summary(const Globals& g)
{
    auto s = open_session(g);
    const auto model_cfg = s.cfg.model_config();
    ExpressNetModel<float> model(model_cfg, s.cfg.integer("seed"));
    std::printf("profile %s, %zu classes, input %zux%zux3\n\n", model_cfg.profile.c_str(), model_cfg.num_classes,
                model_cfg.input_size, model_cfg.input_size);
    std::printf("%-34s %-34s %-18s %12s\n", "layer", "description", "output", "params");
    std::size_t total = 0;
    for (const auto& row : model.summary()) {
        std::printf("%-34s %-34s %-18s %12zu\n", row.name.c_str(), row.description.c_str(), row.output.str().c_str(),
                    row.params);
        total += row.params;
    }
    const auto counts = model.count_parameters();
    std::printf("\n");
    for (const auto& [name, n] : counts.components) std::printf("%-34s %12zu\n", name.c_str(), n);
    std::printf("%-34s %12zu\n", "total", counts.total);
    if (total != counts.total) throw Error("summary rows do not add up to the parameter count");
    return kOk;
}

int cmd_validate_data(const Globals& g)
{
    auto s = open_session(g);
    const auto manifest = load_data(s.cfg);
    const auto train = manifest.subset(Split::train), test = manifest.subset(Split::test);
    std::cout << manifest.samples.size() << " samples, " << manifest.num_classes() << " classes, "
              << manifest.warnings.size() << " missing files\n";
    const auto tc = class_counts(train, manifest), ec = class_counts(test, manifest);
    std::printf("%-16s %8s %8s\n", "class", "train", "test");
    for (const auto& name : manifest.class_names)
        std::printf("%-16s %8zu %8zu\n", name.c_str(), tc.count(name) ? tc.at(name) : 0, ec.count(name) ? ec.at(name) : 0);
    const std::size_t size = s.cfg.model_config(manifest.num_classes()).input_size;
    std::vector<float> buf(size * size * 3);
    std::size_t failures = 0;
    for (const auto& x : manifest.samples) {
        try {
            BatchGenerator<float>::load_from_disk(x, size, buf.data());
        } catch (const Error& e) {
            ++failures;
            std::cerr << "error: sample '" << x.id << "': " << e.what() << '\n';
        }
    }
    if (failures) throw DataError(std::to_string(failures) + " samples failed to load");
    std::cout << "all images decode\n";
    return kOk;
}

int cmd_make_fixture(const Globals& g, const FixtureOptions& fo)
{
    auto s = open_session(g);
    FixtureOptions opt = fo;
    opt.seed = s.cfg.integer("seed");
    const auto labels = make_fixture(s.out, opt);
    std::cout << "wrote " << opt.num_classes * opt.per_class << " images and " << labels.string() << '\n';
    return kOk;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Facial-expression recognition with mixture-of-experts branches"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config_path, "config file (key = value lines)");
    app.add_option("--set", g.overrides, "override a config key (key=value); repeatable")->allow_extra_args(false);
    app.add_option("--out", g.out, "output directory (default $XNMOE_OUT or ./xnmoe_out)");
    app.add_option("--seed", g.seed, "seed for initialisation and training");

    auto* train = app.add_subcommand("train", "train a model");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string fault;
    grad->add_option("--inject-fault", fault)->group("");
    auto* summary = app.add_subcommand("summary", "layer table and parameter counts");
    auto* validate = app.add_subcommand("validate-data", "check a dataset manifest");
    auto* fixture = app.add_subcommand("make-fixture", "write a synthetic texture dataset");
    FixtureOptions fo;
    fixture->add_option("--classes", fo.num_classes, "number of classes");
    fixture->add_option("--per-class", fo.per_class, "images per class");
    fixture->add_option("--size", fo.size, "image side in pixels");
    fixture->add_flag("--gray", fo.grayscale, "single-channel images");
    for (auto* sub : {train, eval, grad, summary, validate, fixture}) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(g);
        if (*eval) return cmd_eval(g);
        if (*grad) return cmd_gradcheck(g, fault);
        if (*summary) return cmd_summary(g);
        if (*validate) return cmd_validate_data(g);
        if (*fixture) return cmd_make_fixture(g, fo);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfig;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return kData;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kNumeric;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return kCheckpoint;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kOther;
    }
    return kOther;
}
