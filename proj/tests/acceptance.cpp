// Acceptance checks: one PASS/FAIL line per criterion. Exit status is the number of
// failed criteria (0 when everything passes).

#include <xnmoe.hpp>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace xnmoe;
using TensorD = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

/// Collects failed conditions for one criterion.
struct Check {
    std::vector<std::string> failures;
    std::string detail;

    void expect(bool ok, const std::string& what)
    {
        if (!ok) failures.push_back(what);
    }
};

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

TensorD random_d(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    TensorD t(std::move(s));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

double rel_err(double a, double b)
{
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

std::string read_file(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& log)
{
    const std::string cmd = "'" XNMOE_CLI "' " + args + " > '" + log.string() + "' 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// ---------------------------------------------------------------------------------------

Check gradient_suite()
{
    Check c;
    const auto t0 = Clock::now();
    const auto rep = run_gradient_suite();
    const double secs = seconds_since(t0);
    const std::set<std::string> required{"conv2d", "dense", "batchnorm_train", "maxpool2d", "global_average_pool",
                                         "relu", "softmax", "concat", "flatten", "moe", "end_to_end"};
    std::set<std::string> seen;
    double worst_layer = 0, e2e = 0;
    std::size_t routing_skips = 0;
    for (const auto& comp : rep.components) {
        seen.insert(comp.name);
        routing_skips += comp.routing_skips;
        const double limit = comp.name == "end_to_end" ? 1e-3 : 1e-4;
        c.expect(comp.checked > 0, comp.name + " checked no entries");
        c.expect(comp.max_rel_error < limit, comp.name + " rel err " + fmt("%.3e", comp.max_rel_error));
        if (comp.name == "end_to_end") e2e = comp.max_rel_error;
        else worst_layer = std::max(worst_layer, comp.max_rel_error);
    }
    for (const auto& r : required) c.expect(seen.count(r) == 1, "missing component " + r);
    c.expect(secs < 300.0, "runtime " + fmt("%.1f s", secs));
    c.detail = std::to_string(rep.components.size()) + " components, worst layer " + fmt("%.2e", worst_layer)
               + ", end-to-end " + fmt("%.2e", e2e) + ", " + std::to_string(routing_skips) + " routing skips, "
               + fmt("%.1f s", secs);
    return c;
}

// ---------------------------------------------------------------------------------------

MoEConfig moe_config(std::size_t dim, std::size_t experts, std::size_t k)
{
    MoEConfig m;
    m.input_dim = dim;
    m.num_experts = experts;
    m.top_k = k;
    return m;
}

void perturb(MoELayer<double>& moe, Rng& rng)
{
    for (auto& v : moe.gate().bias().data()) v = rng.uniform(-0.5, 0.5);
    for (std::size_t e = 0; e < moe.config().num_experts; ++e)
        for (auto& v : moe.expert(e).bias().data()) v = rng.uniform(-0.2, 0.2);
}

std::vector<TensorD*> moe_params(MoELayer<double>& moe)
{
    std::vector<TensorD*> out{&moe.input_dense().weight(), &moe.input_dense().bias(), &moe.gate().weight(),
                              &moe.gate().bias()};
    for (std::size_t e = 0; e < moe.config().num_experts; ++e) {
        out.push_back(&moe.expert(e).weight());
        out.push_back(&moe.expert(e).bias());
    }
    return out;
}

Check moe_invariants()
{
    Check c;
    Rng rng(101);
    Context<double> plain;

    // Sparsity: zeroing every non-selected expert output leaves the result bit-identical.
    {
        MoELayer<double> moe("moe", moe_config(6, 4, 2), rng);
        perturb(moe, rng);
        for (std::size_t k = 1; k <= 4; ++k) {
            auto t = moe.forward_trace(random_d(Shape{16, 6}, rng), plain, k);
            auto zeroed = t.expert_outputs;
            for (auto& e : zeroed) e = e.clone();
            for (std::size_t n = 0; n < 16; ++n) {
                c.expect(t.selection[n].size() <= k, "more than k experts selected");
                for (std::size_t e = 0; e < 4; ++e)
                    if (std::find(t.selection[n].begin(), t.selection[n].end(), e) == t.selection[n].end())
                        for (std::size_t d = 0; d < 6; ++d) zeroed[e][n * 6 + d] = 0.0;
            }
            const auto again = top_k_combine(t.probabilities, zeroed, t.selection, false);
            for (std::size_t i = 0; i < again.numel(); ++i)
                c.expect(again[i] == t.output[i], "non-selected expert contributed");
        }
    }

    // k = N against a softmax-weighted dense mixture built from plain ops.
    double soft_out = 0, soft_grad = 0;
    {
        MoELayer<double> moe("moe", moe_config(5, 4, 4), rng);
        perturb(moe, rng);
        auto x = random_d(Shape{3, 5}, rng).set_requires_grad();
        const auto w = random_d(Shape{3, 5}, rng);
        auto params = moe_params(moe);
        params.push_back(&x);

        Tape<double> t1;
        Context<double> c1{Mode::infer, nullptr, &t1, false};
        const auto y1 = moe.forward(x, c1);
        backward(sum(mul(y1, w, &t1), &t1), t1);
        std::vector<std::vector<double>> g1;
        for (auto* p : params) {
            g1.emplace_back(p->grad().begin(), p->grad().end());
            p->zero_grad();
        }

        Tape<double> t2;
        Context<double> c2{Mode::infer, nullptr, &t2, false};
        const auto h = moe.input_dense().forward(x, c2);
        const auto p = softmax(moe.gate().forward(h, c2), &t2);
        TensorD y2;
        for (std::size_t e = 0; e < 4; ++e) {
            auto term = scale_rows(moe.expert(e).forward(h, c2), select_column(p, e, &t2), &t2);
            y2 = y2.defined() ? add(y2, term, &t2) : term;
        }
        backward(sum(mul(y2, w, &t2), &t2), t2);
        for (std::size_t i = 0; i < y1.numel(); ++i) soft_out = std::max(soft_out, rel_err(y1[i], y2[i]));
        for (std::size_t j = 0; j < params.size(); ++j)
            for (std::size_t i = 0; i < g1[j].size(); ++i)
                soft_grad = std::max(soft_grad, rel_err(params[j]->grad()[i], g1[j][i]));
        c.expect(soft_out < 1e-6, "k=N output differs by " + fmt("%.2e", soft_out));
        c.expect(soft_grad < 1e-6, "k=N gradient differs by " + fmt("%.2e", soft_grad));
    }

    // Expert permutation.
    double perm_err = 0;
    {
        MoELayer<double> a("moe", moe_config(5, 4, 2), rng);
        perturb(a, rng);
        MoELayer<double> b("moe", moe_config(5, 4, 2), rng);
        const std::vector<std::size_t> perm{2, 0, 3, 1};
        b.input_dense().weight().assign(a.input_dense().weight().data());
        b.input_dense().bias().assign(a.input_dense().bias().data());
        for (std::size_t e = 0; e < 4; ++e) {
            b.expert(e).weight().assign(a.expert(perm[e]).weight().data());
            b.expert(e).bias().assign(a.expert(perm[e]).bias().data());
            for (std::size_t i = 0; i < 5; ++i) b.gate().weight()[i * 4 + e] = a.gate().weight()[i * 4 + perm[e]];
            b.gate().bias()[e] = a.gate().bias()[perm[e]];
        }
        const auto x = random_d(Shape{32, 5}, rng);
        const auto ya = a.forward(x, plain), yb = b.forward(x, plain);
        for (std::size_t i = 0; i < ya.numel(); ++i) perm_err = std::max(perm_err, std::abs(ya[i] - yb[i]));
        c.expect(perm_err < 1e-6, "permutation changes output by " + fmt("%.2e", perm_err));
    }

    // Ties go to the lower index, repeatably.
    c.expect(top_k_indices<double>(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 2) == std::vector<std::size_t>{0, 1},
             "uniform tie");
    for (int i = 0; i < 5; ++i)
        c.expect(top_k_indices<double>(std::vector<double>{0.1, 0.4, 0.4, 0.1}, 3) == std::vector<std::size_t>{1, 2, 0},
                 "pairwise tie");

    // Non-selected experts receive exactly zero gradient.
    {
        MoELayer<double> moe("moe", moe_config(5, 4, 2), rng);
        perturb(moe, rng);
        for (int trial = 0; trial < 8; ++trial) {
            for (auto* p : moe_params(moe)) p->zero_grad();
            Tape<double> tape;
            Context<double> ctx{Mode::infer, nullptr, &tape, false};
            auto t = moe.forward_trace(random_d(Shape{1, 5}, rng), ctx, 2);
            backward(sum(mul(t.output, random_d(t.output.shape(), rng), &tape), &tape), tape);
            for (std::size_t e = 0; e < 4; ++e) {
                if (std::find(t.selection[0].begin(), t.selection[0].end(), e) != t.selection[0].end()) continue;
                for (double g : moe.expert(e).weight().grad()) c.expect(g == 0.0, "non-selected weight gradient");
                for (double g : moe.expert(e).bias().grad()) c.expect(g == 0.0, "non-selected bias gradient");
            }
        }
    }
    c.detail = "k=N output " + fmt("%.1e", soft_out) + ", gradient " + fmt("%.1e", soft_grad) + "; permutation "
               + fmt("%.1e", perm_err);
    return c;
}

// ---------------------------------------------------------------------------------------

Check architecture()
{
    Check c;
    Rng rng(7);
    const Shape in{1, 224, 224, 3};
    auto fe1 = build_cnnfe1<float>(ExtractorSpec::cnnfe1_paper(), rng);
    const auto shapes = fe1.trace(in);
    std::vector<std::size_t> pooled;
    for (std::size_t i = 0; i < fe1.size(); ++i)
        if (dynamic_cast<const MaxPoolLayer<float>*>(&fe1.at(i))) pooled.push_back(shapes[i][1]);
    c.expect(pooled == std::vector<std::size_t>{112, 56, 28, 14, 7}, "cnnfe1 spatial trace");
    c.expect(fe1.output_shape(in) == Shape{1, 512}, "cnnfe1 width");
    auto fe2 = build_cnnfe2<float>(ExtractorSpec::cnnfe2_paper(), rng);
    c.expect(fe2.output_shape(in) == Shape{1, 256}, "cnnfe2 width");
    const auto bb_spec = ResidualBackboneSpec::paper();
    auto bb = build_backbone<float>(bb_spec, rng);
    c.expect(bb.output_shape(in) == Shape{1, bb_spec.output_width()}, "backbone width");

    double worst_row = 0;
    for (std::size_t K : {3u, 7u, 8u}) {
        ExpressNetModel<float> model(ModelConfig::desk(K), K);
        c.expect(model.head().out_width() == K, "head width for K=" + std::to_string(K));
        Tensor<float> x(Shape{2, 224, 224, 3});
        for (auto& v : x.data()) v = static_cast<float>(rng.uniform(0, 1));
        for (Mode mode : {Mode::train, Mode::infer}) {
            Rng dropout(K);
            Context<float> ctx{mode, &dropout, nullptr, mode == Mode::train};
            const auto y = model.forward(x, ctx);
            c.expect(y.shape() == Shape{2, K}, "output shape for K=" + std::to_string(K));
            for (std::size_t n = 0; n < 2; ++n) {
                double s = 0;
                for (std::size_t k = 0; k < K; ++k) s += y[n * K + k];
                worst_row = std::max(worst_row, std::abs(s - 1.0));
            }
        }
    }
    c.expect(worst_row < 1e-6, "row sum off by " + fmt("%.2e", worst_row));
    c.detail = "pooled 112/56/28/14/7, widths 512/256/" + std::to_string(bb_spec.output_width())
               + ", K in {3,7,8}, max |row sum - 1| " + fmt("%.1e", worst_row);
    return c;
}

// ---------------------------------------------------------------------------------------

Check loss()
{
    Check c;
    double worst = 0;
    for (std::size_t K : {2u, 3u, 7u, 8u})
        for (double eps : {0.0, 0.1}) {
            TensorD pred(Shape{3, K}, 1.0 / static_cast<double>(K));
            const double l = smoothed_cross_entropy(pred, one_hot<double>({0, K - 1, 1}, K), eps).item();
            worst = std::max(worst, std::abs(l - std::log(static_cast<double>(K))));
        }
    c.expect(worst < 1e-7, "uniform loss off by " + fmt("%.2e", worst));
    const double eps = 0.1, K = 7;
    const double y_true = (1 - eps) + eps / K, y_other = eps / K;
    const double expected = -(y_true * std::log(0.94) + 6 * y_other * std::log(0.01));
    const double got =
        smoothed_cross_entropy(TensorD(Shape{1, 7}, {0.94, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01}), one_hot<double>({0}, 7),
                               eps)
            .item();
    c.expect(std::abs(got - expected) < 1e-7, "hand fixture " + fmt("%.10f", got) + " vs " + fmt("%.10f", expected));
    c.detail = "max |loss - log K| " + fmt("%.1e", worst) + "; fixture " + fmt("%.8f", got);
    return c;
}

// ---------------------------------------------------------------------------------------

const std::string kOverfitFlags = "--set data.test_fraction=0 --set training.validation=train --set data.batch_size=4 "
                                  "--set model.bn_momentum=0.1 --set training.stop_at_val_acc=1 "
                                  "--set training.epochs=200 --set training.early_stop_patience=200";

std::string data_flags(const fs::path& dir)
{
    return "--set data.root=" + dir.string() + " --set data.labels=" + (dir / "labels.csv").string();
}

RunConfig config_from(const std::string& flags)
{
    RunConfig cfg;
    std::istringstream in(flags);
    for (std::string tok; in >> tok;)
        if (tok != "--set") cfg.apply_override(tok);
    return cfg;
}

Check overfit(const fs::path& work, const fs::path& data)
{
    Check c;
    const auto out = work / "overfit";
    const auto t0 = Clock::now();
    const int code = run_cli("--out " + out.string() + " " + kOverfitFlags + " " + data_flags(data) + " train",
                             work / "overfit.log");
    const double secs = seconds_since(t0);
    c.expect(code == 0, "train exit " + std::to_string(code));
    if (code != 0) return c;

    const auto log = read_train_log(out / kTrainLogName);
    const auto& last = log.back();
    const auto& best = log.at(last.best - 1);
    c.expect(best.val_acc == 1.0, "best full-train-set accuracy " + fmt("%.4f", best.val_acc));
    c.expect(log.size() <= 200, "more than 200 epochs");
    c.expect(secs < 900.0, "runtime " + fmt("%.1f s", secs));

    // Reload best.ckpt in-process and evaluate the same stream the run used.
    const auto cfg = config_from(kOverfitFlags + " " + data_flags(data));
    auto manifest = stratified_split(load_manifest(data, data / "labels.csv"), 0.0, 0);
    const auto model_cfg = cfg.model_config(manifest.num_classes());
    ExpressNetModel<float> model(model_cfg, 12345);
    load_checkpoint(model.parameters(), out / kBestCheckpointName);
    Trainer<float> trainer(model, cfg.train_config());
    BatchGenerator<float> gen(manifest.subset(Split::train), manifest.num_classes(),
                              cfg.generator_options(model_cfg.input_size, false));
    const auto e = trainer.evaluate(gen);
    c.expect(e.accuracy == best.val_acc, "reloaded accuracy " + fmt("%.17g", e.accuracy));
    c.expect(e.loss == best.val_loss, "reloaded loss " + fmt("%.17g", e.loss) + " vs " + fmt("%.17g", best.val_loss));

    const int ecode = run_cli("--out " + out.string() + " " + kOverfitFlags + " " + data_flags(data)
                                  + " --set eval.split=train eval",
                              work / "overfit_eval.log");
    c.expect(ecode == 0, "eval exit " + std::to_string(ecode));
    if (ecode == 0) {
        const auto [rep, names] = parse_report_json(read_file(out / "report.json"));
        c.expect(rep.accuracy == 1.0, "eval report accuracy " + fmt("%.4f", rep.accuracy));
    }
    c.detail = "100% at epoch " + std::to_string(last.best) + " (train-mode acc " + fmt("%.4f", best.train_acc) + "), "
               + fmt("%.0f s", secs) + ", reloaded acc " + fmt("%.4f", e.accuracy) + " loss " + fmt("%.6f", e.loss);
    return c;
}

// ---------------------------------------------------------------------------------------

Check determinism(const fs::path& work, const fs::path& data)
{
    Check c;
    const std::string flags = "--seed 3 --set data.batch_size=8 --set training.epochs=2 " + data_flags(data);
    const auto a = work / "det_a", b = work / "det_b", r = work / "det_resume";
    c.expect(run_cli("--out " + a.string() + " " + flags + " train", work / "det_a.log") == 0, "run A failed");
    c.expect(run_cli("--out " + b.string() + " " + flags + " train", work / "det_b.log") == 0, "run B failed");
    const auto log_a = read_file(a / kTrainLogName);
    c.expect(!log_a.empty() && log_a == read_file(b / kTrainLogName), "train logs differ");

    // Interrupt after one epoch, resume for the second.
    c.expect(run_cli("--out " + r.string() + " " + flags + " --set training.epochs=1 train", work / "det_r1.log") == 0,
             "first half failed");
    c.expect(run_cli("--out " + r.string() + " " + flags + " --set training.resume=true train", work / "det_r2.log") == 0,
             "resume failed");
    c.expect(log_a == read_file(r / kTrainLogName), "resumed log differs from uninterrupted log");

    // One step after save/load equals the uninterrupted next step, desk profile.
    auto manifest = load_manifest(data, data / "labels.csv");
    GeneratorOptions go;
    go.batch_size = 4;
    go.shuffle = true;
    go.seed = 5;
    BatchGenerator<float> gen(manifest.samples, manifest.num_classes(), go);
    Batch<float> b1, b2;
    auto stream = gen.epoch(0);
    stream.next(b1);
    stream.next(b2);
    TrainConfig tc;
    tc.seed = 9;
    const auto mc = ModelConfig::desk(manifest.num_classes());

    ExpressNetModel<float> straight(mc, 4);
    Trainer<float> ts(straight, tc);
    ts.train_step(b1, 1e-4);
    ts.train_step(b2, 1e-4);

    ExpressNetModel<float> first(mc, 4);
    Trainer<float> tf(first, tc);
    tf.train_step(b1, 1e-4);
    save_checkpoint(tf.parameters(), work / "step.ckpt", &tf.optimizer_state());
    ExpressNetModel<float> resumed(mc, 99);
    Trainer<float> tr(resumed, tc);
    load_checkpoint(tr.parameters(), work / "step.ckpt", &tr.optimizer_state());
    tr.train_step(b2, 1e-4);

    std::size_t mismatched = 0, total = 0;
    const auto& pa = ts.parameters().entries();
    const auto& pb = tr.parameters().entries();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto da = pa[i].tensor.data(), db = pb[i].tensor.data();
        for (std::size_t j = 0; j < da.size(); ++j) mismatched += da[j] != db[j];
        total += da.size();
    }
    c.expect(mismatched == 0, std::to_string(mismatched) + " parameters differ after resumed step");
    c.detail = "2 runs identical (" + std::to_string(read_train_log(a / kTrainLogName).size())
               + " epochs), resumed run identical, " + std::to_string(total) + " values equal after resumed step";
    return c;
}

// ---------------------------------------------------------------------------------------

Check pipeline()
{
    Check c;
    Rng rng(77);

    // Stratified split on random class sizes.
    std::size_t split_worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t K = 2 + rng.below(6);
        std::vector<std::size_t> labels;
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0, n = 2 + rng.below(60); i < n; ++i) labels.push_back(k);
        rng.shuffle(std::span<std::size_t>(labels));
        const double f = rng.uniform(0.05, 0.5);
        const auto held = stratified_holdout(labels, K, f, trial);
        for (std::size_t k = 0; k < K; ++k) {
            double n = 0, t = 0;
            for (std::size_t i = 0; i < labels.size(); ++i) {
                n += labels[i] == k;
                t += labels[i] == k && held[i];
            }
            const double dev = std::abs(t - f * n);
            c.expect(dev <= 1.0, "split deviation " + fmt("%.2f", dev));
            split_worst = std::max(split_worst, static_cast<std::size_t>(std::ceil(dev)));
        }
    }

    // Generator coverage.
    std::vector<LabeledSample> samples;
    for (std::size_t i = 0; i < 23; ++i) samples.push_back(LabeledSample{"s" + std::to_string(i), {}, i % 3, {}, {}});
    GeneratorOptions go;
    go.batch_size = 5;
    go.shuffle = true;
    go.seed = 4;
    go.image_size = 2;
    BatchGenerator<float> gen(samples, 3, go, [](const LabeledSample&, std::size_t s, float* out) {
        std::fill(out, out + s * s * 3, 0.5f);
    });
    for (std::uint64_t e = 0; e < 4; ++e) {
        std::multiset<std::string> seen;
        auto st = gen.epoch(e);
        Batch<float> b;
        while (st.next(b)) seen.insert(b.ids.begin(), b.ids.end());
        std::multiset<std::string> want;
        for (const auto& s : samples) want.insert(s.id);
        c.expect(seen == want, "epoch coverage");
    }

    // Preprocessing.
    Image gray{48, 48, 1, {}};
    for (int i = 0; i < 48 * 48; ++i) gray.pixels.push_back(static_cast<std::uint8_t>(rng.below(256)));
    const auto t = preprocess<float>(gray, std::nullopt, 224);
    c.expect(t.shape() == Shape{224, 224, 3}, "preprocess shape");
    for (std::size_t p = 0; p < 224 * 224; ++p)
        c.expect(t[p * 3] == t[p * 3 + 1] && t[p * 3] == t[p * 3 + 2], "gray channels differ");
    for (float v : t.data()) c.expect(v >= 0.0f && v <= 1.0f, "value out of [0, 1]");

    // Metrics against brute-force counting.
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng mr(seed + 500);
        const std::size_t K = 7, N = 500;
        std::vector<std::size_t> truth, pred;
        for (std::size_t i = 0; i < N; ++i) {
            truth.push_back(mr.below(K));
            pred.push_back(mr.uniform(0, 1) < 0.5 ? truth.back() : mr.below(K));
        }
        const auto cm = confusion(truth, pred, K);
        const auto rep = report(cm);
        std::uint64_t correct = 0;
        for (std::size_t i = 0; i < N; ++i) correct += truth[i] == pred[i];
        c.expect(rep.accuracy == static_cast<double>(correct) / N, "accuracy");
        double mp = 0, mrc = 0, mf = 0;
        for (std::size_t k = 0; k < K; ++k) {
            std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
            for (std::size_t i = 0; i < N; ++i) {
                tp += truth[i] == k && pred[i] == k;
                fp += truth[i] != k && pred[i] == k;
                fn += truth[i] == k && pred[i] != k;
                tn += truth[i] != k && pred[i] != k;
            }
            for (std::size_t p = 0; p < K; ++p) {
                std::uint64_t n = 0;
                for (std::size_t i = 0; i < N; ++i) n += truth[i] == k && pred[i] == p;
                c.expect(cm.at(k, p) == n, "confusion cell");
            }
            const double P = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
            const double R = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
            const double F = P + R > 0 ? 2.0 * P * R / (P + R) : 0.0;
            const auto& s = rep.classes[k];
            c.expect(s.precision == P && s.recall == R && s.f1 == F, "class rates");
            c.expect(s.support == tp + fn, "support");
            c.expect(s.p_acc == static_cast<double>(tp + tn) / N, "p-acc");
            mp += P, mrc += R, mf += F;
        }
        c.expect(rep.macro_precision == mp / K && rep.macro_recall == mrc / K && rep.macro_f1 == mf / K, "macro");
    }
    c.detail = "20 random splits max deviation <= " + std::to_string(split_worst)
               + ", coverage exact, preprocess in range, 5x500-sample metric oracles exact";
    return c;
}

// ---------------------------------------------------------------------------------------

Check batchnorm()
{
    Check c;
    Rng rng(31);
    double worst_mean = 0, worst_var = 0;
    for (int trial = 0; trial < 5; ++trial) {
        const std::size_t C = 8;
        const auto x = random_d(Shape{16, 7, 7, C}, rng, -5.0, 5.0);
        const auto y = batchnorm_train<double>(x, TensorD::ones(Shape{C}), TensorD::zeros(Shape{C}), 1e-3);
        const std::size_t m = y.numel() / C;
        for (std::size_t ch = 0; ch < C; ++ch) {
            double mean = 0, var = 0;
            for (std::size_t p = 0; p < m; ++p) mean += y[p * C + ch];
            mean /= static_cast<double>(m);
            for (std::size_t p = 0; p < m; ++p) var += (y[p * C + ch] - mean) * (y[p * C + ch] - mean);
            var /= static_cast<double>(m);
            worst_mean = std::max(worst_mean, std::abs(mean));
            worst_var = std::max(worst_var, std::abs(var - 1.0));
        }
    }
    c.expect(worst_mean < 1e-5, "mean " + fmt("%.2e", worst_mean));
    c.expect(worst_var < 1e-3, "variance off by " + fmt("%.2e", worst_var));
    c.detail = "input U(-5,5), max |mean| " + fmt("%.1e", worst_mean) + ", max |var - 1| " + fmt("%.1e", worst_var);
    return c;
}

} // namespace

int main()
{
    const fs::path work = fs::temp_directory_path() / "xnmoe_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);
    const fs::path data = work / "fixture";
    const int fx = run_cli("--out " + data.string() + " --seed 1 make-fixture", work / "fixture.log");

    const std::vector<std::pair<std::string, std::function<Check()>>> criteria{
        {"gradient-suite", gradient_suite},
        {"moe-invariants", moe_invariants},
        {"architecture-shape", architecture},
        {"loss-correctness", loss},
        {"overfit-convergence", [&] { return overfit(work, data); }},
        {"determinism", [&] { return determinism(work, data); }},
        {"pipeline-invariants", pipeline},
        {"batchnorm-moments", batchnorm},
    };
    int failed = 0;
    for (const auto& [name, run] : criteria) {
        Check c;
        try {
            if (fx != 0) throw Error("make-fixture failed");
            c = run();
        } catch (const std::exception& e) {
            c.failures.push_back(std::string("exception: ") + e.what());
        }
        const bool ok = c.failures.empty();
        failed += !ok;
        std::string msg = c.detail;
        if (!ok) {
            msg = c.failures.front();
            if (c.failures.size() > 1) msg += " (+" + std::to_string(c.failures.size() - 1) + " more)";
        }
        std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), msg.c_str());
        std::fflush(stdout);
    }
    return failed;
}
