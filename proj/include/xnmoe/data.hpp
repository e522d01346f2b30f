#pragma once

// Dataset manifests, stratified splitting, batch generation and synthetic fixtures.

#include "xnmoe/image.hpp"
#include "xnmoe/loss.hpp"
#include "xnmoe/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <memory>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace xnmoe {

enum class Split { train, test };

struct LabeledSample {
    std::string id;
    std::filesystem::path image_path;
    std::size_t label = 0;
    std::optional<BBox> bbox;
    std::optional<Split> split;
};

struct DatasetManifest {
    std::vector<LabeledSample> samples;
    std::vector<std::string> class_names;
    /// One entry per row dropped because its image file does not exist.
    std::vector<std::string> warnings;

    std::size_t num_classes() const noexcept { return class_names.size(); }

    std::vector<LabeledSample> subset(Split s) const
    {
        std::vector<LabeledSample> out;
        for (const auto& x : samples)
            if (x.split == s) out.push_back(x);
        return out;
    }
};

namespace detail {

/// Splits one CSV line; fields may be double-quoted with "" as an escaped quote.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no)
{
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw DataError("line " + std::to_string(line_no) + ": unterminated quote");
    out.push_back(std::move(cur));
    return out;
}

inline double parse_unit(const std::string& s, const char* what, std::size_t line_no)
{
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size() || !std::isfinite(v)) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("line " + std::to_string(line_no) + ": invalid " + what + " '" + s + "'");
    }
}

} // namespace detail

/// Reads `labels_file` (CSV, header `id,relative_path,label[,split][,bbox_x,bbox_y,bbox_w,bbox_h]`).
/// Image paths resolve against `root`. With an empty `class_names` the class list is the
/// sorted set of label strings; otherwise every label must appear in it.
inline DatasetManifest load_manifest(const std::filesystem::path& root, const std::filesystem::path& labels_file,
                                     std::vector<std::string> class_names = {})
{
    std::ifstream in(labels_file);
    if (!in) throw DataError("cannot open labels file: " + labels_file.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError("labels file is empty: " + labels_file.string());
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = detail::split_csv_line(line, 1);

    const std::vector<std::string> base{"id", "relative_path", "label"};
    const std::vector<std::string> box{"bbox_x", "bbox_y", "bbox_w", "bbox_h"};
    if (header.size() < 3 || !std::equal(base.begin(), base.end(), header.begin()))
        throw DataError("line 1: header must start with id,relative_path,label");
    std::size_t col = 3;
    const bool has_split = header.size() > col && header[col] == "split";
    if (has_split) ++col;
    const bool has_box = header.size() > col;
    if (has_box && (header.size() != col + 4 || !std::equal(box.begin(), box.end(), header.begin() + static_cast<std::ptrdiff_t>(col))))
        throw DataError("line 1: unexpected columns after label (allowed: split, bbox_x,bbox_y,bbox_w,bbox_h)");

    struct Row {
        LabeledSample sample;
        std::string label;
        std::size_t line_no;
    };
    std::vector<Row> rows;
    std::set<std::string> ids;
    DatasetManifest m;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = detail::split_csv_line(line, line_no);
        if (f.size() != header.size())
            throw DataError("line " + std::to_string(line_no) + ": expected " + std::to_string(header.size())
                            + " fields, got " + std::to_string(f.size()));
        if (f[0].empty()) throw DataError("line " + std::to_string(line_no) + ": empty id");
        if (!ids.insert(f[0]).second)
            throw DataError("line " + std::to_string(line_no) + ": duplicate id '" + f[0] + "'");
        Row r;
        r.line_no = line_no;
        r.label = f[2];
        r.sample.id = f[0];
        r.sample.image_path = root / f[1];
        std::size_t c = 3;
        if (has_split) {
            const auto& s = f[c++];
            if (s == "train") r.sample.split = Split::train;
            else if (s == "test") r.sample.split = Split::test;
            else if (!s.empty())
                throw DataError("line " + std::to_string(line_no) + ": split must be train or test, got '" + s + "'");
        }
        if (has_box) {
            std::array<double, 4> v{};
            bool any = false, all = true;
            for (std::size_t k = 0; k < 4; ++k) {
                const auto& s = f[c + k];
                any = any || !s.empty();
                all = all && !s.empty();
                if (!s.empty()) v[k] = detail::parse_unit(s, box[k].c_str(), line_no);
            }
            if (any && !all) throw DataError("line " + std::to_string(line_no) + ": bbox must have all four values or none");
            if (all) {
                if (!(v[2] > 0.0) || !(v[3] > 0.0))
                    throw DataError("line " + std::to_string(line_no) + ": bbox width and height must be positive");
                r.sample.bbox = BBox{v[0], v[1], v[2], v[3]};
            }
        }
        if (!std::filesystem::exists(r.sample.image_path)) {
            m.warnings.push_back("line " + std::to_string(line_no) + ": missing image for id '" + r.sample.id
                                 + "': " + r.sample.image_path.string());
            continue;
        }
        rows.push_back(std::move(r));
    }

    if (class_names.empty()) {
        std::set<std::string> uniq;
        for (const auto& r : rows) uniq.insert(r.label);
        class_names.assign(uniq.begin(), uniq.end());
    } else {
        std::set<std::string> seen;
        for (const auto& c : class_names)
            if (!seen.insert(c).second) throw ConfigError("duplicate class name '" + c + "'");
    }
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < class_names.size(); ++i) index[class_names[i]] = i;
    for (auto& r : rows) {
        auto it = index.find(r.label);
        if (it == index.end())
            throw DataError("line " + std::to_string(r.line_no) + " (id '" + r.sample.id + "'): unknown label '"
                            + r.label + "'");
        r.sample.label = it->second;
        m.samples.push_back(std::move(r.sample));
    }
    m.class_names = std::move(class_names);
    return m;
}

/// Picks round(count·fraction) members of every class (clamped to [1, count−1]) to hold
/// out. Within a class, membership follows a seeded shuffle of the manifest order.
/// Returns one flag per entry of `labels`.
inline std::vector<bool> stratified_holdout(const std::vector<std::size_t>& labels, std::size_t num_classes,
                                            double fraction, std::uint64_t seed, std::uint64_t stream = 0)
{
    if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
    std::vector<std::vector<std::size_t>> members(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) members.at(labels[i]).push_back(i);
    std::vector<bool> held(labels.size(), false);
    for (std::size_t c = 0; c < num_classes; ++c) {
        auto& idx = members[c];
        if (idx.empty()) continue;
        if (idx.size() < 2)
            throw DataError("class " + std::to_string(c) + " has fewer than 2 samples; cannot stratify");
        const auto want = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * fraction));
        const std::size_t n = std::clamp<std::size_t>(want, 1, idx.size() - 1);
        Rng rng = Rng::derive(seed, 0x53504C4954ULL + stream, c);
        rng.shuffle(std::span<std::size_t>(idx));
        for (std::size_t k = 0; k < n; ++k) held[idx[k]] = true;
    }
    return held;
}

/// Assigns a train/test split to every sample, stratified by class. A fraction of 0
/// puts every sample in train.
inline DatasetManifest stratified_split(DatasetManifest m, double test_fraction, std::uint64_t seed)
{
    if (test_fraction == 0.0) {
        for (auto& s : m.samples) s.split = Split::train;
        return m;
    }
    std::vector<std::size_t> labels;
    for (const auto& s : m.samples) labels.push_back(s.label);
    const auto held = stratified_holdout(labels, m.num_classes(), test_fraction, seed);
    for (std::size_t i = 0; i < m.samples.size(); ++i) m.samples[i].split = held[i] ? Split::test : Split::train;
    return m;
}

/// Stratified validation carve-out from a training subset: returns {train, val}.
inline std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>>
carve_validation(const std::vector<LabeledSample>& train, std::size_t num_classes, double fraction, std::uint64_t seed)
{
    std::vector<std::size_t> labels;
    for (const auto& s : train) labels.push_back(s.label);
    const auto held = stratified_holdout(labels, num_classes, fraction, seed, 1);
    std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> out;
    for (std::size_t i = 0; i < train.size(); ++i) (held[i] ? out.second : out.first).push_back(train[i]);
    return out;
}

enum class OnError { skip, abort };

template <class T>
struct Batch {
    Tensor<T> images;  // B×S×S×3 in [0, 1]
    Tensor<T> labels;  // B×K one-hot
    std::vector<std::string> ids;
    std::vector<std::size_t> label_index;
    /// "id: reason" for samples dropped under OnError::skip.
    std::vector<std::string> skipped;

    std::size_t size() const noexcept { return ids.size(); }
};

struct GeneratorOptions {
    std::size_t batch_size = 32;
    bool shuffle = false;
    std::uint64_t seed = 0;
    OnError on_error = OnError::abort;
    /// Batches decoded ahead of the consumer on a worker thread; 0 loads synchronously.
    std::size_t prefetch = 0;
    std::size_t image_size = 224;
};

/// Streams batches over a fixed sample list. Order per epoch is a seeded shuffle
/// keyed by (seed, epoch) or the list order; images load lazily per batch.
template <class T>
class BatchGenerator {
public:
    /// Writes a preprocessed S×S×3 image for the sample into the given buffer.
    using Loader = std::function<void(const LabeledSample&, std::size_t size, T* out)>;

    static void load_from_disk(const LabeledSample& s, std::size_t size, T* out)
    {
        preprocess_into(decode_image(s.image_path), s.bbox, size, out);
    }

    BatchGenerator(std::vector<LabeledSample> samples, std::size_t num_classes, GeneratorOptions opts,
                   Loader loader = &BatchGenerator::load_from_disk)
        : samples_(std::move(samples)), num_classes_(num_classes), opts_(opts), loader_(std::move(loader))
    {
        if (samples_.empty()) throw DataError("batch generator: split is empty");
        if (opts_.batch_size == 0) throw ConfigError("batch size must be positive");
        for (const auto& s : samples_)
            if (s.label >= num_classes_) throw DataError("sample '" + s.id + "' has label outside the class list");
    }

    std::size_t size() const noexcept { return samples_.size(); }
    std::size_t num_batches() const noexcept { return (samples_.size() + opts_.batch_size - 1) / opts_.batch_size; }
    std::size_t num_classes() const noexcept { return num_classes_; }
    const GeneratorOptions& options() const noexcept { return opts_; }
    const std::vector<LabeledSample>& samples() const noexcept { return samples_; }

    std::vector<std::size_t> order(std::uint64_t epoch) const
    {
        std::vector<std::size_t> idx(samples_.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        if (opts_.shuffle) {
            Rng rng = Rng::derive(opts_.seed, 0x5348554646ULL, epoch);
            rng.shuffle(std::span<std::size_t>(idx));
        }
        return idx;
    }

    /// Batch b of the given epoch. Pure function of (epoch, b).
    Batch<T> batch(std::uint64_t epoch, std::size_t b) const { return make_batch(order(epoch), b); }

    class Stream {
    public:
        bool next(Batch<T>& out)
        {
            while (true) {
                if (pending_.empty() && next_ >= gen_->num_batches()) return false;
                fill();
                auto fut = std::move(pending_.front());
                pending_.pop_front();
                out = fut.get();
                fill();
                if (out.size() > 0) return true;
            }
        }

    private:
        friend class BatchGenerator;
        Stream(const BatchGenerator* gen, std::vector<std::size_t> order)
            : gen_(gen), order_(std::make_shared<const std::vector<std::size_t>>(std::move(order)))
        {}

        void fill()
        {
            const std::size_t depth = std::max<std::size_t>(1, gen_->opts_.prefetch);
            while (pending_.size() < depth && next_ < gen_->num_batches()) {
                const std::size_t b = next_++;
                const auto policy = gen_->opts_.prefetch == 0 ? std::launch::deferred : std::launch::async;
                pending_.push_back(std::async(policy, [gen = gen_, order = order_, b] { return gen->make_batch(*order, b); }));
            }
        }

        const BatchGenerator* gen_;
        std::shared_ptr<const std::vector<std::size_t>> order_;
        std::size_t next_ = 0;
        std::deque<std::future<Batch<T>>> pending_;
    };

    /// Batches of one epoch in logical order, independent of the prefetch depth.
    /// Batches left empty by skipped samples are not delivered.
    Stream epoch(std::uint64_t e) const { return Stream(this, order(e)); }

private:
    Batch<T> make_batch(const std::vector<std::size_t>& order, std::size_t b) const
    {
        const std::size_t S = opts_.image_size;
        const std::size_t begin = b * opts_.batch_size;
        const std::size_t end = std::min(order.size(), begin + opts_.batch_size);
        std::vector<T> pixels;
        pixels.reserve((end - begin) * S * S * 3);
        Batch<T> out;
        std::vector<T> buf(S * S * 3);
        for (std::size_t i = begin; i < end; ++i) {
            const auto& s = samples_[order[i]];
            try {
                loader_(s, S, buf.data());
            } catch (const Error& e) {
                if (opts_.on_error == OnError::abort) throw DataError("sample '" + s.id + "': " + e.what());
                out.skipped.push_back(s.id + ": " + e.what());
                continue;
            }
            pixels.insert(pixels.end(), buf.begin(), buf.end());
            out.ids.push_back(s.id);
            out.label_index.push_back(s.label);
        }
        if (!out.ids.empty()) {
            out.images = Tensor<T>(Shape{out.ids.size(), S, S, 3}, std::move(pixels));
            out.labels = one_hot<T>(out.label_index, num_classes_);
        }
        return out;
    }

    std::vector<LabeledSample> samples_;
    std::size_t num_classes_;
    GeneratorOptions opts_;
    Loader loader_;
};

/// Synthetic dataset with one procedural texture family per class.
struct FixtureOptions {
    std::size_t num_classes = 4;
    std::size_t per_class = 8;
    std::size_t size = 224;
    bool grayscale = false;
    std::uint64_t seed = 0;
};

inline const std::vector<std::string>& default_class_names()
{
    static const std::vector<std::string> names{"neutral", "happy", "sad", "surprise",
                                                "fear", "disgust", "anger", "contempt"};
    return names;
}

inline std::string fixture_class_name(std::size_t c)
{
    return c < default_class_names().size() ? default_class_names()[c] : "class" + std::to_string(c);
}

/// Texture intensity in [0, 1] for class c at pixel (x, y) of an image of the given size.
/// Classes differ in pattern orientation/geometry; phase and period jitter per image.
inline double fixture_texture(std::size_t c, double x, double y, double size, double phase, double period)
{
    using std::numbers::pi;
    const double w = 2.0 * pi / period;
    const double cx = x - size / 2.0, cy = y - size / 2.0;
    const std::size_t family = c % 8;
    const double f = 1.0 + static_cast<double>(c / 8);
    double v = 0.0;
    switch (family) {
    case 0: v = std::sin(w * f * y + phase); break;
    case 1: v = std::sin(w * f * x + phase); break;
    case 2: v = std::sin(w * f * x + phase) * std::sin(w * f * y + phase); break;
    case 3: v = std::sin(w * f * (x + y) / std::numbers::sqrt2 + phase); break;
    case 4: v = std::sin(w * f * (x - y) / std::numbers::sqrt2 + phase); break;
    case 5: v = std::sin(w * f * std::hypot(cx, cy) + phase); break;
    case 6: v = std::sin(f * std::atan2(cy, cx) * 6.0 + phase); break;
    default: v = (std::sin(w * f * x + phase) > 0.0) == (std::sin(w * f * y) > 0.0) ? 1.0 : -1.0; break;
    }
    return 0.5 + 0.5 * v;
}

/// Writes images/<id>.png and labels.csv under `root`. Returns the labels file path.
inline std::filesystem::path make_fixture(const std::filesystem::path& root, const FixtureOptions& opt)
{
    if (opt.num_classes < 2 || opt.per_class < 2 || opt.size < 4)
        throw ConfigError("fixture needs at least 2 classes, 2 images per class and size 4");
    std::filesystem::create_directories(root / "images");
    const auto labels = root / "labels.csv";
    std::ofstream csv(labels);
    if (!csv) throw DataError("cannot write " + labels.string());
    csv << "id,relative_path,label\n";
    const double S = static_cast<double>(opt.size);
    for (std::size_t i = 0; i < opt.per_class; ++i)
        for (std::size_t c = 0; c < opt.num_classes; ++c) {
            Rng rng = Rng::derive(opt.seed, c, i);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double period = S / rng.uniform(10.0, 14.0);
            const double lo = rng.uniform(0.05, 0.3), hi = rng.uniform(0.7, 0.95);
            double tint[3];
            for (double& t : tint) t = rng.uniform(0.6, 1.0);
            Image img;
            img.height = img.width = opt.size;
            img.channels = opt.grayscale ? 1 : 3;
            img.pixels.resize(opt.size * opt.size * img.channels);
            for (std::size_t y = 0; y < opt.size; ++y)
                for (std::size_t x = 0; x < opt.size; ++x) {
                    const double t = fixture_texture(c, static_cast<double>(x), static_cast<double>(y), S, phase, period);
                    const double noise = rng.uniform(-0.05, 0.05);
                    for (std::size_t k = 0; k < img.channels; ++k) {
                        const double v = (lo + (hi - lo) * t) * (opt.grayscale ? 1.0 : tint[k]) + noise;
                        img.pixels[(y * opt.size + x) * img.channels + k] =
                            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
                    }
                }
            char id[64];
            std::snprintf(id, sizeof id, "s%03zu", i * opt.num_classes + c);
            encode_image(root / "images" / (std::string(id) + ".png"), img);
            csv << id << ",images/" << id << ".png," << fixture_class_name(c) << '\n';
        }
    return labels;
}

} // namespace xnmoe
