#pragma once

// Training loop: Adam steps, per-epoch validation, best-checkpoint saving,
// learning-rate reduction on plateau, early stopping and resumption.

#include "xnmoe/adam.hpp"
#include "xnmoe/checkpoint.hpp"
#include "xnmoe/data.hpp"
#include "xnmoe/model.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace xnmoe {

struct TrainConfig {
    std::size_t epochs = 15;
    std::size_t batch_size = 32;
    AdamConfig adam;
    double lr_reduce_factor = 0.5;
    std::size_t lr_reduce_patience = 2;
    double lr_floor = 1e-7;
    std::size_t early_stop_patience = 3;
    std::uint64_t seed = 0;
    /// Ends training once validation accuracy reaches this value.
    std::optional<double> stop_at_val_acc;
    /// Ends training once the epoch's training accuracy reaches this value.
    std::optional<double> stop_at_train_acc;
    /// Scan every op output and gradient for NaN/Inf.
    bool checked = true;

    void validate() const
    {
        adam.validate();
        if (epochs == 0) throw ConfigError("training.epochs must be positive");
        if (batch_size == 0) throw ConfigError("data.batch_size must be positive");
        if (!(lr_reduce_factor > 0.0 && lr_reduce_factor < 1.0))
            throw ConfigError("training.lr_reduce_factor must lie in (0, 1)");
        if (lr_reduce_patience < 1 || early_stop_patience < 1)
            throw ConfigError("training patience values must be at least 1");
        if (!(lr_floor > 0.0)) throw ConfigError("training.lr_floor must be positive");
    }
};

struct EpochDecision {
    bool improved = false;
    bool stop = false;
};

/// Plateau bookkeeping. Improvement means strictly greater validation accuracy;
/// every lr_reduce_patience epochs without improvement multiply the rate by the
/// factor (not below the floor); early_stop_patience such epochs end the run.
class TrainingMonitor {
public:
    explicit TrainingMonitor(const TrainConfig& cfg) : cfg_(cfg), lr_(cfg.adam.lr) {}

    double lr() const noexcept { return lr_; }
    double best_val_acc() const noexcept { return best_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    std::size_t epochs_since_improvement() const noexcept { return since_; }

    EpochDecision end_epoch(std::size_t epoch, double val_acc)
    {
        EpochDecision d;
        if (best_epoch_ == 0 || val_acc > best_) {
            best_ = val_acc;
            best_epoch_ = epoch;
            since_ = 0;
            d.improved = true;
        } else {
            ++since_;
            if (since_ % cfg_.lr_reduce_patience == 0) lr_ = std::max(lr_ * cfg_.lr_reduce_factor, cfg_.lr_floor);
            d.stop = since_ >= cfg_.early_stop_patience;
        }
        if (cfg_.stop_at_val_acc && val_acc >= *cfg_.stop_at_val_acc) d.stop = true;
        return d;
    }

    TrainingProgress progress(std::size_t epoch) const
    {
        return TrainingProgress{epoch, lr_, best_, best_epoch_, since_};
    }

    void restore(const TrainingProgress& p)
    {
        lr_ = p.lr;
        best_ = p.best_val_acc;
        best_epoch_ = static_cast<std::size_t>(p.best_epoch);
        since_ = static_cast<std::size_t>(p.epochs_since_improvement);
    }

private:
    TrainConfig cfg_;
    double lr_;
    double best_ = 0.0;
    std::size_t best_epoch_ = 0;
    std::size_t since_ = 0;
};

/// One line of the training log.
struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
    double lr = 0.0;
    /// Epoch holding the highest validation accuracy so far.
    std::size_t best = 0;

    bool operator==(const EpochRecord&) const = default;
};

/// JSON-lines record with keys in the order epoch, train_loss, train_acc, val_loss,
/// val_acc, lr, best. Reals are printed with round-trip precision.
inline std::string to_json_line(const EpochRecord& r)
{
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["train_acc"] = r.train_acc;
    j["val_loss"] = r.val_loss;
    j["val_acc"] = r.val_acc;
    j["lr"] = r.lr;
    j["best"] = r.best;
    return j.dump();
}

inline EpochRecord parse_json_line(const std::string& line)
{
    try {
        const auto j = nlohmann::json::parse(line);
        return EpochRecord{j.at("epoch").get<std::size_t>(), j.at("train_loss").get<double>(),
                           j.at("train_acc").get<double>(),  j.at("val_loss").get<double>(),
                           j.at("val_acc").get<double>(),    j.at("lr").get<double>(),
                           j.at("best").get<std::size_t>()};
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("invalid training log line: ") + e.what());
    }
}

inline std::vector<EpochRecord> read_train_log(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw Error("cannot open training log: " + path.string());
    std::vector<EpochRecord> out;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) out.push_back(parse_json_line(line));
    return out;
}

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<std::string> ids;
    std::vector<std::size_t> truth;
    std::vector<std::size_t> predicted;
    /// Class probabilities per sample.
    std::vector<std::vector<double>> probabilities;
};

struct StepResult {
    double loss = 0.0;
    std::size_t correct = 0;
    std::size_t count = 0;
};

struct FitResult {
    std::vector<EpochRecord> log;
    std::filesystem::path best_checkpoint;
    std::filesystem::path last_checkpoint;
    std::filesystem::path log_path;
    std::size_t best_epoch = 0;
    double best_val_acc = 0.0;
};

inline constexpr const char* kTrainLogName = "train_log.jsonl";
inline constexpr const char* kBestCheckpointName = "best.ckpt";
inline constexpr const char* kLastCheckpointName = "last.ckpt";
inline constexpr std::uint64_t kDropoutStream = 0x44524F50ULL;

template <class T>
class Trainer {
public:
    Trainer(ExpressNetModel<T>& model, TrainConfig cfg)
        : model_(model), cfg_(std::move(cfg)), params_(model.parameters())
    {
        cfg_.validate();
    }

    AdamState<T>& optimizer_state() noexcept { return opt_; }
    const ParameterStore<T>& parameters() const noexcept { return params_; }
    const TrainConfig& config() const noexcept { return cfg_; }

    std::function<void(const EpochRecord&)> on_epoch;
    std::function<void(const std::string&)> on_warning = [](const std::string& w) {
        std::cerr << "warning: " << w << '\n';
    };

    /// Forward, loss, backward and one Adam update at learning rate `lr`. Dropout masks
    /// come from a stream keyed by (seed, optimizer step), so a resumed run repeats them.
    StepResult train_step(const Batch<T>& batch, double lr)
    {
        CheckedScope checked(cfg_.checked);
        Tape<T> tape;
        Rng rng = Rng::derive(cfg_.seed, kDropoutStream, opt_.step);
        Context<T> ctx{Mode::train, &rng, &tape, true};
        const auto pred = model_.forward(batch.images, ctx);
        const auto loss = smoothed_cross_entropy(pred, batch.labels, model_.config().label_smoothing, &tape);
        const double value = static_cast<double>(loss.item());
        if (!std::isfinite(value))
            throw NumericError("non-finite training loss at optimizer step " + std::to_string(opt_.step + 1));
        params_.zero_grad();
        backward(loss, tape);
        adam_step(params_, opt_, cfg_.adam, lr);

        StepResult r;
        r.loss = value;
        r.count = batch.size();
        const auto am = argmax_rows(pred);
        for (std::size_t i = 0; i < am.size(); ++i) r.correct += am[i] == batch.label_index[i];
        return r;
    }

    /// Inference-mode pass over one epoch of `gen` (its logical order).
    EvalResult evaluate(const BatchGenerator<T>& gen)
    {
        CheckedScope checked(cfg_.checked);
        EvalResult r;
        double loss_sum = 0.0;
        std::size_t correct = 0;
        auto stream = gen.epoch(0);
        Batch<T> batch;
        while (stream.next(batch)) {
            report_skips(batch);
            Context<T> ctx{Mode::infer, nullptr, nullptr, false};
            const auto pred = model_.forward(batch.images, ctx);
            const auto loss = smoothed_cross_entropy<T>(pred, batch.labels, model_.config().label_smoothing, nullptr);
            loss_sum += static_cast<double>(loss.item()) * static_cast<double>(batch.size());
            const auto am = argmax_rows(pred);
            const std::size_t K = pred.dim(1);
            for (std::size_t i = 0; i < batch.size(); ++i) {
                r.ids.push_back(batch.ids[i]);
                r.truth.push_back(batch.label_index[i]);
                r.predicted.push_back(am[i]);
                std::vector<double> p(K);
                for (std::size_t k = 0; k < K; ++k) p[k] = static_cast<double>(pred[i * K + k]);
                r.probabilities.push_back(std::move(p));
                correct += am[i] == batch.label_index[i];
            }
        }
        if (r.ids.empty()) throw DataError("evaluate: stream produced no samples");
        r.loss = loss_sum / static_cast<double>(r.ids.size());
        r.accuracy = static_cast<double>(correct) / static_cast<double>(r.ids.size());
        return r;
    }

    /// Runs up to cfg.epochs epochs. Writes the log, best.ckpt (parameters at the best
    /// validation accuracy) and last.ckpt (full state for resumption) into `out_dir`.
    /// With `resume`, continues from a last.ckpt written by an earlier run.
    FitResult fit(const BatchGenerator<T>& train, const BatchGenerator<T>& val, const std::filesystem::path& out_dir,
                  bool resume = false)
    {
        std::filesystem::create_directories(out_dir);
        FitResult res;
        res.log_path = out_dir / kTrainLogName;
        res.best_checkpoint = out_dir / kBestCheckpointName;
        res.last_checkpoint = out_dir / kLastCheckpointName;

        TrainingMonitor monitor(cfg_);
        std::size_t start = 1;
        if (resume) {
            const auto progress = load_checkpoint(params_, res.last_checkpoint, &opt_);
            if (!progress) throw CheckpointError("resume checkpoint carries no training progress");
            monitor.restore(*progress);
            start = static_cast<std::size_t>(progress->epoch) + 1;
            auto previous = read_train_log(res.log_path);
            if (previous.size() < progress->epoch) throw CheckpointError("training log is shorter than the checkpoint");
            previous.resize(static_cast<std::size_t>(progress->epoch));
            res.log = std::move(previous);
        }
        {
            std::ofstream log(res.log_path, std::ios::trunc);
            if (!log) throw Error("cannot write training log: " + res.log_path.string());
            for (const auto& r : res.log) log << to_json_line(r) << '\n';
        }

        bool stop = resume && !res.log.empty() && already_stopped(monitor, res.log.back());
        for (std::size_t epoch = start; epoch <= cfg_.epochs && !stop; ++epoch) {
            EpochRecord rec;
            rec.epoch = epoch;
            rec.lr = monitor.lr();

            double loss_sum = 0.0;
            std::size_t correct = 0, seen = 0, step = 0;
            auto stream = train.epoch(epoch - 1);
            Batch<T> batch;
            while (stream.next(batch)) {
                report_skips(batch);
                ++step;
                StepResult s;
                try {
                    s = train_step(batch, rec.lr);
                } catch (const NumericError& e) {
                    throw NumericError("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": "
                                       + e.what());
                }
                loss_sum += s.loss * static_cast<double>(s.count);
                correct += s.correct;
                seen += s.count;
            }
            if (seen == 0) throw DataError("epoch " + std::to_string(epoch) + ": training stream produced no samples");
            rec.train_loss = loss_sum / static_cast<double>(seen);
            rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);

            const auto v = evaluate(val);
            rec.val_loss = v.loss;
            rec.val_acc = v.accuracy;

            const auto d = monitor.end_epoch(epoch, rec.val_acc);
            rec.best = monitor.best_epoch();
            if (d.improved) save_checkpoint(params_, res.best_checkpoint);
            const auto progress = monitor.progress(epoch);
            save_checkpoint(params_, res.last_checkpoint, &opt_, &progress);

            std::ofstream log(res.log_path, std::ios::app);
            log << to_json_line(rec) << '\n';
            res.log.push_back(rec);
            if (on_epoch) on_epoch(rec);
            stop = d.stop || (cfg_.stop_at_train_acc && rec.train_acc >= *cfg_.stop_at_train_acc);
        }
        res.best_epoch = monitor.best_epoch();
        res.best_val_acc = monitor.best_val_acc();
        return res;
    }

private:
    bool already_stopped(const TrainingMonitor& m, const EpochRecord& last) const
    {
        if (m.epochs_since_improvement() >= cfg_.early_stop_patience) return true;
        if (cfg_.stop_at_train_acc && last.train_acc >= *cfg_.stop_at_train_acc) return true;
        return cfg_.stop_at_val_acc && last.val_acc >= *cfg_.stop_at_val_acc;
    }

    void report_skips(const Batch<T>& batch) const
    {
        if (on_warning)
            for (const auto& s : batch.skipped) on_warning("skipped sample " + s);
    }

    ExpressNetModel<T>& model_;
    TrainConfig cfg_;
    ParameterStore<T> params_;
    AdamState<T> opt_;
};

} // namespace xnmoe
