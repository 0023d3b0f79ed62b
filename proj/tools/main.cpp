// Command-line front end: training / evaluation runs, gradient-check suites,
// FLOPs & parameter reports, and fusion-weight inspection.
//
// Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 numeric divergence.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aff/analysis.hpp"
#include "aff/config.hpp"
#include "aff/gradcheck.hpp"
#include "aff/serialize.hpp"
#include "aff/train.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::vector<std::string> sets;
    std::optional<long long> seed;
    std::string out;
    std::string precision;
    bool dry_run = false;
};

void add_common(CLI::App* sub, CommonOpts& o) {
    sub->add_option("--config", o.config_path, "config file (key = value lines, # comments)");
    sub->add_option("--set", o.sets, "override one config key (key=value); repeatable");
    sub->add_option("--seed", o.seed, "override the run seed");
    sub->add_option("--out", o.out, "override the output directory");
    sub->add_option("--precision", o.precision, "numeric precision")
        ->check(CLI::IsMember({"f32", "f64"}));
    sub->add_flag("--dry-run", o.dry_run,
                  "validate the config and print the resolved network inventory, then stop");
}

aff::RunConfig resolve(const CommonOpts& o) {
    aff::RunConfig cfg;
    if (!o.config_path.empty()) {
        std::ifstream in(o.config_path);
        if (!in) throw aff::ConfigError("cannot open config file '" + o.config_path + "'");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        aff::config_parse_text(cfg, text, o.config_path);
    }
    for (const auto& kv : o.sets) aff::config_apply_override(cfg, kv);
    if (o.seed) cfg.seed = static_cast<unsigned long long>(*o.seed);
    if (!o.out.empty()) cfg.out = o.out;
    if (!o.precision.empty()) cfg.precision = aff::parse_precision(o.precision);
    aff::config_validate(cfg);
    return cfg;
}

template <typename Fn>
int with_precision(const aff::RunConfig& cfg, Fn fn) {
    return cfg.precision == aff::Precision::f32 ? fn.template operator()<float>()
                                                : fn.template operator()<double>();
}

std::string default_checkpoint(const aff::RunConfig& cfg) {
    return (std::filesystem::path(cfg.out) / "checkpoint.fsds").string();
}

std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int run_train(const CommonOpts& o) {
    const aff::RunConfig cfg = resolve(o);
    if (o.dry_run) {
        std::cout << aff::network_inventory(cfg);
        return 0;
    }
    return with_precision(cfg, [&]<typename T>() -> int {
        aff::Dataset<T> train, val;
        aff::load_datasets(cfg, train, val);
        auto res = aff::run_training<T>(cfg, train, val, &std::cout);
        std::cout << "checkpoint: " << res.checkpoint_path << "\n";
        return 0;
    });
}

int run_eval(const CommonOpts& o, std::string ckpt) {
    const aff::RunConfig cfg = resolve(o);
    if (o.dry_run) {
        std::cout << aff::network_inventory(cfg);
        return 0;
    }
    if (ckpt.empty()) ckpt = default_checkpoint(cfg);
    return with_precision(cfg, [&]<typename T>() -> int {
        auto lm = aff::model_from_blobs<T>(aff::read_blobs(ckpt));
        if (lm.task != cfg.task)
            throw aff::ConfigError(std::string("checkpoint task '") + aff::task_name(lm.task) +
                                   "' does not match config task '" + aff::task_name(cfg.task) + "'");
        aff::Dataset<T> train, val;
        aff::load_datasets(cfg, train, val);
        const aff::Shape s = val.front().pixels.shape();
        if (s.c != lm.model.spec.in_channels || s.h != lm.image_size || s.w != lm.image_size)
            throw aff::ConfigError("checkpoint expects " + std::to_string(lm.model.spec.in_channels) +
                                   "x" + std::to_string(lm.image_size) + "x" +
                                   std::to_string(lm.image_size) + " input, dataset provides " +
                                   std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
                                   std::to_string(s.w));
        const double metric = aff::evaluate(lm.model, val, lm.stats, cfg.batch_size, lm.task,
                                            lm.model.spec.num_classes);
        std::cout << "{\"" << (lm.task == aff::Task::segment ? "val_miou" : "val_accuracy")
                  << "\":" << fmt_g17(metric) << "}\n";
        return 0;
    });
}

int run_gradcheck(const CommonOpts& o, const std::string& scope_str, bool inject_fault) {
    const aff::RunConfig cfg = resolve(o);
    if (o.dry_run) {
        std::cout << aff::network_inventory(cfg);
        return 0;
    }
    if (cfg.precision != aff::Precision::f64)
        throw aff::ConfigError("gradcheck needs precision f64 (finite differences drown in f32 noise)");
    const aff::CheckScope scope = aff::parse_check_scope(scope_str);
    aff::Rng rng(cfg.seed);
    auto units = aff::build_check_suite<double>(scope, rng);
    if (inject_fault) units.push_back(aff::make_fault_unit<double>());

    std::vector<std::string> failures;
    double worst = 0;
    for (auto& u : units) {
        auto res = aff::grad_check(u, rng);
        std::printf("%-4s %-28s %.3e\n", res.pass ? "ok" : "FAIL", res.name.c_str(),
                    res.max_rel_err);
        worst = std::max(worst, res.max_rel_err);
        if (!res.pass) failures.push_back(res.name);
    }
    std::printf("gradcheck %s: %zu units, worst rel err %.3e\n", scope_str.c_str(), units.size(),
                worst);
    if (!failures.empty()) {
        std::string names;
        for (const auto& f : failures) names += " " + f;
        std::fprintf(stderr, "gradcheck failed:%s\n", names.c_str());
        return 1;
    }
    return 0;
}

int run_report(const CommonOpts& o) {
    const aff::RunConfig cfg = resolve(o);
    if (o.dry_run) {
        std::cout << aff::network_inventory(cfg);
        return 0;
    }
    const aff::NetworkSpec spec = aff::config_network_spec(cfg);
    aff::NetworkSpec base = spec;
    base.fusion = aff::FusionKind::add;
    const int size = aff::config_image_size(cfg);
    const aff::Shape input{1, spec.in_channels, size, size};

    std::cout << "== configured network (fusion=" << aff::fusion_kind_name(spec.fusion) << ") ==\n";
    const aff::FlopsReport fr = aff::count_flops(spec, input);
    std::cout << fr.text();
    std::cout << "\n== add-fusion baseline ==\n";
    const aff::FlopsReport fb = aff::count_flops(base, input);
    std::cout << fb.text();

    const aff::ParamReport pr = aff::count_params(spec);
    const aff::ParamReport pb = aff::count_params(base);
    std::cout << "\n== parameters ==\n";
    std::cout << "configured: total=" << pr.total << " attention=" << pr.attention
              << " host=" << pr.host << "\n";
    std::cout << "baseline:   total=" << pb.total << " attention=" << pb.attention
              << " host=" << pb.host << "\n";

    std::cout << "\n== analytic attention overhead at r=" << cfg.r << " ==\n";
    std::cout << "basic block, channel doubling:       "
              << aff::percent_str(aff::overhead_ratio(aff::CostBlock::basic, true, cfg.r)) << "\n";
    std::cout << "basic block, no doubling:            "
              << aff::percent_str(aff::overhead_ratio(aff::CostBlock::basic, false, cfg.r)) << "\n";
    std::cout << "bottleneck block, channel doubling:  "
              << aff::percent_str(aff::overhead_ratio(aff::CostBlock::bottleneck, true, cfg.r)) << "\n";
    std::cout << "bottleneck block, no doubling:       "
              << aff::percent_str(aff::overhead_ratio(aff::CostBlock::bottleneck, false, cfg.r)) << "\n";
    return 0;
}

int run_inspect(const CommonOpts& o, std::string ckpt) {
    const aff::RunConfig cfg = resolve(o);
    if (o.dry_run) {
        std::cout << aff::network_inventory(cfg);
        return 0;
    }
    if (ckpt.empty()) ckpt = default_checkpoint(cfg);
    return with_precision(cfg, [&]<typename T>() -> int {
        auto lm = aff::model_from_blobs<T>(aff::read_blobs(ckpt));
        const aff::NetworkSpec& spec = lm.model.spec;
        if (!aff::fusion_is_attentional(spec.fusion))
            throw aff::UnsupportedError(std::string("fusion '") + aff::fusion_kind_name(spec.fusion) +
                                        "' carries no attention weights to inspect");
        bool any_active = false;
        for (const auto& bi : aff::count_blocks(spec)) any_active |= bi.attention_active;
        if (!any_active)
            throw aff::UnsupportedError("no attention-active fusion sites under the configured policy");

        aff::Dataset<T> train, val;
        aff::load_datasets(cfg, train, val);
        const aff::Shape s = val.front().pixels.shape();
        if (s.c != spec.in_channels || s.h != lm.image_size || s.w != lm.image_size)
            throw aff::ConfigError("checkpoint expects " + std::to_string(spec.in_channels) + "x" +
                                   std::to_string(lm.image_size) + "x" + std::to_string(lm.image_size) +
                                   " input, dataset provides " + std::to_string(s.c) + "x" +
                                   std::to_string(s.h) + "x" + std::to_string(s.w));

        std::vector<int> order(val.size());
        std::iota(order.begin(), order.end(), 0);
        const std::size_t hi = std::min(val.size(), static_cast<std::size_t>(cfg.batch_size));
        std::vector<int> labels;
        aff::Tensor<T> batch =
            aff::make_batch(val, order, 0, hi, lm.stats, /*augment=*/false, nullptr, &labels, nullptr);

        aff::Tape<T> t;
        aff::WeightProbe<T> probe;
        lm.model.forward(t, t.input(batch, /*requires_grad=*/false, "batch"), aff::Mode::eval, &probe);

        std::vector<aff::Blob> blobs;
        for (const auto& [name, map] : probe.maps) {
            double mn = map[0], mx = map[0], sum = 0;
            for (std::size_t i = 0; i < map.size(); ++i) {
                const double v = map[i];
                mn = std::min(mn, v);
                mx = std::max(mx, v);
                sum += v;
            }
            std::cout << name << " shape=" << map.shape().str()
                      << " mean=" << fmt_g17(sum / static_cast<double>(map.size()))
                      << " min=" << fmt_g17(mn) << " max=" << fmt_g17(mx) << "\n";
            blobs.push_back(aff::Blob::from_tensor(name, map));
        }
        std::filesystem::create_directories(cfg.out);
        const std::string path = (std::filesystem::path(cfg.out) / "attention_maps.fsds").string();
        aff::write_blobs(path, blobs);
        std::cout << "maps: " << path << "\n";
        return 0;
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attentional feature fusion workbench"};
    app.require_subcommand(1);

    CommonOpts train_o, eval_o, grad_o, report_o, inspect_o;
    std::string eval_ckpt, inspect_ckpt, grad_scope = "all";
    bool inject_fault = false;

    CLI::App* s_train = app.add_subcommand("train", "train a network per the config");
    add_common(s_train, train_o);

    CLI::App* s_eval = app.add_subcommand("eval", "evaluate a checkpoint on the config's val set");
    add_common(s_eval, eval_o);
    s_eval->add_option("--checkpoint", eval_ckpt, "checkpoint path (default: <out>/checkpoint.fsds)");

    CLI::App* s_grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_common(s_grad, grad_o);
    s_grad->add_option("scope", grad_scope, "ops|attention|fusion|blocks|all (default all)");
    s_grad->add_flag("--inject-fault", inject_fault, "add a deliberately wrong backward rule")
        ->group("");  // hidden: negative control for the harness itself

    CLI::App* s_report = app.add_subcommand("report", "FLOPs/parameter report vs the add baseline");
    add_common(s_report, report_o);

    CLI::App* s_inspect = app.add_subcommand("inspect", "dump per-site fusion weight maps");
    add_common(s_inspect, inspect_o);
    s_inspect->add_option("--checkpoint", inspect_ckpt,
                          "checkpoint path (default: <out>/checkpoint.fsds)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (s_train->parsed()) return run_train(train_o);
        if (s_eval->parsed()) return run_eval(eval_o, eval_ckpt);
        if (s_grad->parsed()) return run_gradcheck(grad_o, grad_scope, inject_fault);
        if (s_report->parsed()) return run_report(report_o);
        if (s_inspect->parsed()) return run_inspect(inspect_o, inspect_ckpt);
    } catch (const aff::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const aff::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 2;
}
