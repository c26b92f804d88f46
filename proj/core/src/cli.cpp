#include "polyseg/cli.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "polyseg/checkpoint.hpp"
#include "polyseg/datapipe.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/evaluator.hpp"
#include "polyseg/image_io.hpp"
#include "polyseg/models.hpp"
#include "polyseg/rng.hpp"
#include "polyseg/trainer.hpp"

namespace polyseg {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<RunPreset>& run_presets() {
    static const std::vector<RunPreset> presets = {
        {"run1", "unet", 1, true, {"rotation", "zoom"}},
        {"run2", "leaky-unet", 1, true, {"rotation", "zoom"}},
        {"run3", "resunet", 4, true, {"rotation", "zoom"}},
        {"run4", "inception-unet", 4, true, {"rotation", "zoom"}},
        {"run5", "pranet-lite", 4, true, {"rotation", "zoom"}},
    };
    return presets;
}

namespace {

const RunPreset& find_preset(const std::string& name) {
    for (const RunPreset& p : run_presets())
        if (p.name == name) return p;
    std::string valid;
    for (const RunPreset& p : run_presets()) valid += (valid.empty() ? "" : ", ") + p.name;
    throw ConfigError("unknown preset '" + name + "'; valid: " + valid);
}

std::string read_file(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot read '" + path.string() + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw LoadError("cannot write '" + path.string() + "'");
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!os) throw LoadError("failed writing '" + path.string() + "'");
}

/// Overlay a JSON object onto the serialized form of a config and re-parse, so
/// section keys stay optional while unknown keys are still rejected.
std::string merge_json_onto(const std::string& base, const json& overlay, const char* what) {
    json merged = json::parse(base);
    if (!overlay.is_object()) throw ConfigError(std::string(what) + ": expected a JSON object");
    for (auto it = overlay.begin(); it != overlay.end(); ++it) merged[it.key()] = it.value();
    return merged.dump();
}

std::vector<std::string> parse_augment_list(const std::string& text) {
    std::vector<std::string> ops;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        if (item != "rotation" && item != "zoom")
            throw ConfigError("unknown augmentation '" + item + "'; valid: rotation, zoom");
        ops.push_back(item);
    }
    return ops;
}

// --- prepare -----------------------------------------------------------------

struct PrepareOpts {
    std::string input, output, augment, preset;
    double margin = 0.1;
    std::uint64_t seed = 0;
    bool crop = false;
    bool crop_given = false, augment_given = false;
};

int cmd_prepare(const PrepareOpts& o, std::ostream& out) {
    bool crop = o.crop;
    std::vector<std::string> augment_ops =
        o.augment_given ? parse_augment_list(o.augment) : std::vector<std::string>{};
    if (!o.preset.empty()) {
        const RunPreset& p = find_preset(o.preset);
        if (!o.crop_given) crop = p.crop;
        if (!o.augment_given) augment_ops = p.augment;
    }

    const auto pairs = list_dataset_pairs(o.input);
    if (pairs.empty()) throw LoadError("no image/mask pairs in '" + o.input + "'");

    const fs::path img_out = fs::path(o.output) / "images";
    const fs::path mask_out = fs::path(o.output) / "masks";
    fs::create_directories(img_out);
    fs::create_directories(mask_out);

    const bool rotate = std::find(augment_ops.begin(), augment_ops.end(), "rotation") !=
                        augment_ops.end();
    const bool zoom = std::find(augment_ops.begin(), augment_ops.end(), "zoom") != augment_ops.end();

    Rng rng(o.seed);
    std::size_t written = 0;
    auto emit = [&](const ImageSample& s) {
        save_image_png(img_out / (s.id + ".png"), s.image);
        save_mask_png(mask_out / (s.id + ".png"), s.mask);
        ++written;
    };

    for (const auto& [img_path, mask_path] : pairs) {
        const ImageSample s = load_sample(img_path, mask_path);
        std::vector<ImageSample> batch = {s};
        if (crop && has_foreground(s.mask)) {
            batch.push_back(crop_to_bbox(s, mask_bbox(s.mask, o.margin)));
        }
        if (rotate || zoom) {
            // one augmented copy per sample; each op fires with probability 1/2
            const std::size_t base_count = batch.size();
            for (std::size_t i = 0; i < base_count; ++i) {
                ImageSample a = batch[i];
                a.id += ".aug";
                if (rotate && rng.uniform() < 0.5)
                    a = augment(a, RotationOp{rng.uniform(-30.0, 30.0)});
                if (zoom && rng.uniform() < 0.5) a = augment(a, ZoomOp{rng.uniform(0.8, 1.25)});
                batch.push_back(std::move(a));
            }
        }
        for (const ImageSample& b : batch) emit(b);
    }

    out << written << " samples written to " << o.output << "\n";
    return 0;
}

// --- train ---------------------------------------------------------------------

struct TrainOpts {
    std::string config_path, arch, preset, data, out_ckpt, history, loss;
    int epochs = 0, batch_size = 0, size = 256;
    double lr = 0.0, val_fraction = 0.2;
    std::int64_t seed = 0;
    bool arch_given = false, epochs_given = false, batch_given = false, lr_given = false,
         seed_given = false, loss_given = false;
};

std::vector<ImageSample> load_resized(const std::string& dir, int size) {
    const auto pairs = list_dataset_pairs(dir);
    if (pairs.empty()) throw LoadError("no image/mask pairs in '" + dir + "'");
    std::vector<ImageSample> out;
    out.reserve(pairs.size());
    for (const auto& [img, mask] : pairs) out.push_back(resize(load_sample(img, mask), size, size));
    return out;
}

int cmd_train(const TrainOpts& o, std::ostream& out) {
    ModelConfig mc;
    TrainConfig tc;

    if (!o.preset.empty()) {
        const RunPreset& p = find_preset(o.preset);
        mc.arch = arch_from_name(p.arch);
        mc.depth = p.depth;
    }
    if (!o.config_path.empty()) {
        json cfg;
        try {
            cfg = json::parse(read_file(o.config_path));
        } catch (const json::exception& e) {
            throw ConfigError("config '" + o.config_path + "': invalid JSON: " + e.what());
        }
        if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
        for (auto it = cfg.begin(); it != cfg.end(); ++it)
            if (it.key() != "model" && it.key() != "train")
                throw ConfigError("config: unknown section '" + it.key() + "'");
        if (cfg.contains("model"))
            mc = model_config_from_json(merge_json_onto(to_json(mc), cfg["model"], "model config"));
        if (cfg.contains("train"))
            tc = train_config_from_json(merge_json_onto(to_json(tc), cfg["train"], "train config"));
    }
    if (o.arch_given) mc.arch = arch_from_name(o.arch);
    if (o.epochs_given) tc.epochs = o.epochs;
    if (o.batch_given) tc.batch_size = o.batch_size;
    if (o.lr_given) tc.learning_rate = o.lr;
    if (o.loss_given) tc.loss = loss_from_name(o.loss);
    if (o.seed_given) {
        mc.seed = o.seed;
        tc.seed = o.seed;
    }
    tc.checkpoint_path = o.out_ckpt;
    mc.validate();
    tc.validate();

    if (!(o.val_fraction > 0.0 && o.val_fraction < 1.0))
        throw ConfigError("--val-fraction must be in (0, 1)");
    const int div = 1 << mc.depth;
    if (o.size < 8 || o.size % div != 0)
        throw ConfigError("--size must be >= 8 and divisible by 2^depth = " + std::to_string(div));

    std::vector<ImageSample> samples = load_resized(o.data, o.size);
    auto [train_set, val_set] = split(samples, 1.0 - o.val_fraction,
                                      static_cast<std::uint64_t>(tc.seed));
    samples.clear();
    samples.shrink_to_fit();

    Model model = build_model(mc);
    auto [trained, history] = train(std::move(model), train_set, val_set, tc);

    const fs::path history_path =
        o.history.empty() ? fs::path(o.out_ckpt + ".history.jsonl") : fs::path(o.history);
    write_file(history_path, history_to_jsonl(history));

    double best = 0.0;
    for (const EpochRecord& r : history.epochs) best = std::max(best, r.val_dice);
    out << "trained " << history.epochs.size() << " epoch(s), best val dice "
        << format_metric(best) << ", checkpoint " << o.out_ckpt << "\n";
    return 0;
}

// --- evaluate --------------------------------------------------------------------

struct EvalOpts {
    std::string checkpoint, data, out_path, run_id;
    double threshold = 0.5;
    int size = 256;
};

int cmd_evaluate(const EvalOpts& o, std::ostream& out) {
    if (!(o.threshold > 0.0 && o.threshold < 1.0))
        throw DomainError("threshold must be in (0,1)");
    const Model model = load_checkpoint(o.checkpoint);
    const int div = 1 << model.config.depth;
    if (o.size < 8 || o.size % div != 0)
        throw ConfigError("--size must be >= 8 and divisible by 2^depth = " + std::to_string(div));

    const std::vector<ImageSample> samples = load_resized(o.data, o.size);
    const std::string run_id = o.run_id.empty() ? arch_name(model.config.arch) : o.run_id;
    const RunReport report = evaluate(model, samples, o.threshold, run_id);
    write_file(o.out_path, report_to_json(report));

    const MetricSet& m = report.aggregate;
    out << report.run_id << ',' << format_metric(m.jaccard) << ',' << format_metric(m.dsc) << ','
        << format_metric(m.recall) << ',' << format_metric(m.precision) << ','
        << format_metric(m.accuracy) << ',' << format_metric(m.f2) << "\n";
    return 0;
}

// --- report ------------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& inputs, const std::string& format,
               std::ostream& out) {
    TableFormat fmt;
    if (format == "csv") fmt = TableFormat::csv;
    else if (format == "markdown") fmt = TableFormat::markdown;
    else throw ConfigError("unknown format '" + format + "'; valid: csv, markdown");

    std::vector<RunReport> reports;
    for (const std::string& path : inputs) reports.push_back(report_from_json(read_file(path)));
    out << format_table(reports, fmt);
    return 0;
}

} // namespace

int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"polyseg: polyp segmentation workbench (prepare / train / evaluate / report)"};
    app.require_subcommand(1);

    PrepareOpts po;
    auto* prep = app.add_subcommand("prepare",
                                    "Crop to mask bounding boxes and augment a Kvasir-SEG layout");
    prep->add_option("--input", po.input, "dataset root with images/ and masks/")->required();
    prep->add_option("--output", po.output, "output root")->required();
    auto* crop_flag = prep->add_flag("--crop", po.crop, "append a cropped copy of every sample");
    prep->add_option("--margin", po.margin, "bounding-box margin fraction")->capture_default_str();
    auto* aug_opt = prep->add_option("--augment", po.augment,
                                     "comma list of augmentations (rotation,zoom)");
    prep->add_option("--seed", po.seed, "augmentation seed")->capture_default_str();
    prep->add_option("--preset", po.preset, "run preset supplying crop/augment defaults");

    TrainOpts to;
    auto* tr = app.add_subcommand("train", "Fit one of the five run architectures");
    tr->add_option("--config", to.config_path, "JSON config with model/train sections");
    auto* arch_opt = tr->add_option("--arch", to.arch, "architecture name");
    tr->add_option("--preset", to.preset, "run preset (run1..run5)");
    tr->add_option("--data", to.data, "dataset root")->required();
    tr->add_option("--out", to.out_ckpt, "checkpoint output path")->required();
    tr->add_option("--history", to.history, "history JSONL path (default: <out>.history.jsonl)");
    auto* ep_opt = tr->add_option("--epochs", to.epochs, "training epochs");
    auto* bs_opt = tr->add_option("--batch-size", to.batch_size, "batch size");
    auto* lr_opt = tr->add_option("--lr", to.lr, "learning rate");
    auto* loss_opt = tr->add_option("--loss", to.loss, "loss: bce, dice, bce+dice");
    auto* seed_opt = tr->add_option("--seed", to.seed, "seed for init, shuffle and split");
    tr->add_option("--size", to.size, "training resolution")->capture_default_str();
    tr->add_option("--val-fraction", to.val_fraction, "validation fraction")
        ->capture_default_str();

    EvalOpts eo;
    auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint and write a run report");
    ev->add_option("--checkpoint", eo.checkpoint, "checkpoint path")->required();
    ev->add_option("--data", eo.data, "dataset root")->required();
    ev->add_option("--threshold", eo.threshold, "probability threshold")->capture_default_str();
    ev->add_option("--out", eo.out_path, "report JSON output path")->required();
    ev->add_option("--size", eo.size, "evaluation resolution")->capture_default_str();
    ev->add_option("--run-id", eo.run_id, "run id in the report (default: arch name)");

    std::vector<std::string> inputs;
    std::string format = "csv";
    auto* rp = app.add_subcommand("report", "Render run reports as a leaderboard table");
    rp->add_option("--inputs", inputs, "run report JSON files")->required()->expected(-1);
    rp->add_option("--format", format, "csv or markdown")->capture_default_str();

    try {
        std::reverse(args.begin(), args.end()); // CLI11's vector parse wants reversed args
        app.parse(std::move(args));
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n\n" << app.help();
        return 2;
    }

    try {
        if (*prep) {
            po.crop_given = crop_flag->count() > 0;
            po.augment_given = aug_opt->count() > 0;
            return cmd_prepare(po, out);
        }
        if (*tr) {
            to.arch_given = arch_opt->count() > 0;
            to.epochs_given = ep_opt->count() > 0;
            to.batch_given = bs_opt->count() > 0;
            to.lr_given = lr_opt->count() > 0;
            to.loss_given = loss_opt->count() > 0;
            to.seed_given = seed_opt->count() > 0;
            return cmd_train(to, out);
        }
        if (*ev) return cmd_evaluate(eo, out);
        if (*rp) return cmd_report(inputs, format, out);
    } catch (const NumericError& e) {
        err << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
    err << "no command given\n";
    return 2;
}

} // namespace polyseg
