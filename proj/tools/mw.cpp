// Command-line entry point: data generation, the training stages,
// distillation, evaluation, ablation and the session server.

#include <atomic>
#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "mw/config.hpp"
#include "mw/distill.hpp"
#include "mw/eval.hpp"
#include "mw/hash.hpp"
#include "mw/server.hpp"
#include "mw/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mw;

namespace {

struct Common {
    std::string config_file;
    std::vector<std::string> sets;
    std::int64_t seed = -1;
};

Config load_config(const Common& c) {
    Config cfg;
    if (!c.config_file.empty()) cfg = Config::from_file(c.config_file);
    for (const auto& kv : c.sets) cfg.set_assignment(kv);
    if (c.seed >= 0) cfg.set("seed", std::to_string(c.seed));
    return cfg;
}

std::uint64_t run_seed(const Config& c) { return static_cast<std::uint64_t>(c.get_int("seed", 0)); }

std::string now_utc() {
    const std::time_t t = std::time(nullptr);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

class Manifest {
public:
    Manifest(fs::path dir, std::string command, const Config& cfg, int argc, char** argv) : dir_(std::move(dir)) {
        json args = json::array();
        for (int i = 0; i < argc; ++i) args.push_back(argv[i]);
        j_ = {{"command", std::move(command)},
              {"argv", args},
              {"config", cfg.values()},
              {"config_hash", cfg.hash()},
              {"seed", run_seed(cfg)},
              {"source_hash", MW_SOURCE_HASH},
              {"started", now_utc()}};
    }
    json& extra() { return j_; }
    void write(int status) {
        j_["finished"] = now_utc();
        j_["status"] = status;
        fs::create_directories(dir_);
        std::ofstream(dir_ / "run.json") << j_.dump(2) << "\n";
    }

private:
    fs::path dir_;
    json j_;
};

ModelConfig model_config(const Config& c) {
    ModelConfig m = ModelConfig::from_config(c);
    m.validate();
    return m;
}

RetrievalOptions retrieval_for(const ModelConfig& m, int world_size, const Config& c) {
    const int L = static_cast<int>(c.get_int("memory.L", m.mem_L));
    const int K = static_cast<int>(c.get_int("memory.K", m.mem_K));
    RetrievalOptions r = RetrievalOptions::for_world(world_size, L, K);
    r.threshold = c.get_double("memory.threshold", r.threshold);
    r.additive = c.get_bool("memory.additive", r.additive);
    return r;
}

EvalSpec eval_spec(const Config& c) {
    EvalSpec s;
    s.episodes = static_cast<int>(c.get_int("eval.episodes", s.episodes));
    s.length = static_cast<int>(c.get_int("eval.length", s.length));
    s.world_size = static_cast<int>(c.get_int("eval.world_size", c.get_int("data.world_size", s.world_size)));
    s.seed = static_cast<std::uint64_t>(c.get_int("eval.seed", static_cast<std::int64_t>(s.seed)));
    s.pose_episodes = static_cast<int>(c.get_int("eval.pose_episodes", s.pose_episodes));
    s.pose_length = static_cast<int>(c.get_int("eval.pose_length", s.pose_length));
    return s;
}

std::vector<EpisodeData> dataset(const std::string& dir, const std::string& split, const ModelConfig& m) {
    if (dir.empty()) throw CLI::RequiredError("--data");
    return load_dataset(dir, split, m);
}

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Config& cfg, const std::string& out, Manifest& man) {
    DataSpec spec = DataSpec::from_config(cfg);
    spec.seed = static_cast<std::uint64_t>(cfg.get_int("data.seed", static_cast<std::int64_t>(run_seed(cfg))));
    const double val = cfg.get_double("data.val_fraction", 0.0);
    const auto eps = generate_episodes(spec);
    std::vector<DatasetEntry> entries;
    const std::size_t n_val = static_cast<std::size_t>(val * static_cast<double>(eps.size()));
    for (std::size_t i = 0; i < eps.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "ep%05zu", i);
        write_episode(fs::path(out) / name, eps[i]);
        entries.push_back({name, i + n_val >= eps.size() && n_val > 0 ? "val" : "train"});
    }
    write_dataset_manifest(out, entries, cfg.hash());
    man.extra()["data"] = spec.to_json();
    std::cout << "wrote " << eps.size() << " episodes to " << out << "\n";
    return 0;
}

int cmd_train(const Config& cfg, const std::string& stage_name, const std::string& data, const std::string& init,
              const std::string& out, Manifest& man) {
    TrainOptions o;
    o.stage = stage_from_string(stage_name);
    o.steps = static_cast<int>(cfg.get_int("train.steps", o.steps));
    o.batch = static_cast<int>(cfg.get_int("train.batch", o.batch));
    o.lr = cfg.get_double("train.lr", o.lr);
    o.warmup = static_cast<int>(cfg.get_int("train.warmup", o.warmup));
    o.grad_clip = cfg.get_double("train.grad_clip", o.grad_clip);
    o.window = static_cast<int>(cfg.get_int("train.window", o.window));
    o.seed = run_seed(cfg);
    WorldModel model = init.empty() ? WorldModel(model_config(cfg)) : load_model(init);
    const auto d = dataset(data, cfg.get("data.split", "train"), model.config());
    o.retrieval = retrieval_for(model.config(), d.front().world_size, cfg);
    fs::create_directories(out);
    std::ofstream log(fs::path(out) / "log.jsonl");
    const auto losses = train(model, d, o, &log);
    save_model(out, model, {{"stage", to_string(o.stage)}, {"steps", o.steps}, {"seed", o.seed}, {"init", init}});
    man.extra()["stage"] = to_string(o.stage);
    man.extra()["final_loss"] = losses.empty() ? 0.0 : losses.back();
    std::cout << "stage " << to_string(o.stage) << ": " << o.steps << " steps, final loss "
              << (losses.empty() ? 0.0 : losses.back()) << "\n";
    return 0;
}

int cmd_distill(const Config& cfg, const std::string& data, const std::string& student_dir,
                const std::string& teacher_dir, const std::string& out, Manifest& man) {
    if (student_dir.empty()) throw CLI::RequiredError("--student");
    if (teacher_dir.empty()) throw CLI::RequiredError("--teacher");
    WorldModel student = load_model(student_dir);
    const WorldModel teacher = load_model(teacher_dir);
    WorldModel fake = load_model(teacher_dir);
    const auto d = dataset(data, cfg.get("data.split", "train"), student.config());
    DistillOptions o;
    o.steps = static_cast<int>(cfg.get_int("distill.steps", o.steps));
    o.lr_student = cfg.get_double("distill.lr_student", o.lr_student);
    o.lr_fake = cfg.get_double("distill.lr_fake", o.lr_fake);
    o.grad_clip = cfg.get_double("distill.grad_clip", o.grad_clip);
    o.per_chunk_k = cfg.get_bool("distill.per_chunk_k", o.per_chunk_k);
    o.seed = run_seed(cfg);
    o.retrieval = retrieval_for(student.config(), d.front().world_size, cfg);
    fs::create_directories(out);
    std::ofstream log(fs::path(out) / "log.jsonl");
    distill(student, teacher, fake, d, o, &log);
    save_model(out, student, {{"stage", "distill"}, {"steps", o.steps}, {"seed", o.seed}, {"student", student_dir},
                              {"teacher", teacher_dir}});
    man.extra()["teacher_hash"] = hex64(teacher.parameter_hash());
    std::cout << "distilled " << o.steps << " steps\n";
    return 0;
}

int cmd_eval(const Config& cfg, const std::string& ckpt, int steps, const std::string& out, Manifest& man) {
    if (ckpt.empty()) throw CLI::RequiredError("--ckpt");
    const WorldModel model = load_model(ckpt);
    const EvalSpec spec = eval_spec(cfg);
    RolloutOptions ro;
    ro.schedule = uniform_schedule(steps > 0 ? steps : model.config().steps_student);
    ro.retrieval = retrieval_for(model.config(), spec.world_size, cfg);
    ro.noise_seed = run_seed(cfg);
    const EvalReport r = evaluate(model, ro, spec, ckpt);
    json j = r.to_json();
    j["schedule_steps"] = ro.schedule.size();
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "report.json") << j.dump(2) << "\n";
    man.extra()["checkpoint_hash"] = r.checkpoint_hash;
    std::cout << "revisit psnr " << r.revisit.psnr << " ssim " << r.revisit.ssim << "  pose R_err " << r.pose.r_err_deg
              << " deg T_err " << r.pose.t_err << "  latency p50 " << r.latency.p50 << " ms\n";
    return 0;
}

int cmd_ablate(const Config& cfg, const std::string& data, const std::string& out, Manifest& man) {
    const ModelConfig base = model_config(cfg);
    const auto d = dataset(data, cfg.get("data.split", "train"), base);
    const auto rs = ablate(base, d, Budget::from_config(cfg), eval_spec(cfg), run_seed(cfg));
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "ablation.json") << ablation_json(rs).dump(2) << "\n";
    const std::string table = ablation_table(rs);
    std::ofstream(fs::path(out) / "ablation.txt") << table;
    man.extra()["cells"] = rs.size();
    std::cout << table;
    return 0;
}

std::atomic<bool> g_stop{false};

int cmd_serve(const Config& cfg, const std::string& addr, const std::string& ckpt, int tick_ms) {
    if (ckpt.empty()) throw CLI::RequiredError("--ckpt");
    const WorldModel model = load_model(ckpt);
    ServerOptions o;
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos) throw CLI::ValidationError("--addr", "expected host:port");
    o.host = addr.substr(0, colon);
    o.port = static_cast<unsigned short>(std::stoi(addr.substr(colon + 1)));
    o.session.tick_ms = tick_ms;
    o.session.world_size = static_cast<int>(cfg.get_int("serve.world_size", cfg.get_int("data.world_size", 12)));
    o.session.schedule = uniform_schedule(model.config().steps_student);
    o.session.noise_seed = run_seed(cfg);
    Server server(model, o);
    server.start();
    std::cout << "listening on " << o.host << ":" << server.port() << " (tick " << tick_ms << " ms)" << std::endl;
    std::signal(SIGINT, [](int) { g_stop = true; });
    std::signal(SIGTERM, [](int) { g_stop = true; });
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    server.stop();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"interactive world model: data, training, distillation, evaluation, serving"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* s) {
        s->add_option("--config", common.config_file, "key=value config file")->check(CLI::ExistingFile);
        s->add_option("--set", common.sets, "config override key=value (repeatable)");
        s->add_option("--seed", common.seed, "run seed");
    };

    std::string out, data, init, stage, ckpt, student, teacher, addr = "127.0.0.1:8080";
    int episodes = -1, steps = -1, tick_ms = 80;

    auto* gen = app.add_subcommand("gen-data", "generate a dataset of rendered episodes");
    add_common(gen);
    gen->add_option("--out", out, "dataset directory")->required();
    gen->add_option("--episodes", episodes, "number of episodes");

    auto* tr = app.add_subcommand("train", "run one training stage");
    add_common(tr);
    tr->add_option("--stage", stage, "1a | 1b | 2 | 3-teacher")->required()->check(CLI::IsMember({"1a", "1b", "2", "3-teacher"}));
    tr->add_option("--data", data, "dataset directory")->required();
    tr->add_option("--init", init, "checkpoint to start from");
    tr->add_option("--out", out, "checkpoint directory")->required();
    tr->add_option("--steps", steps, "optimiser steps");

    auto* di = app.add_subcommand("distill", "context-forcing distillation of the student");
    add_common(di);
    di->add_option("--data", data, "dataset directory")->required();
    di->add_option("--student", student, "student checkpoint")->required();
    di->add_option("--teacher", teacher, "teacher checkpoint")->required();
    di->add_option("--out", out, "checkpoint directory")->required();
    di->add_option("--steps", steps, "distillation steps");

    auto* ev = app.add_subcommand("eval", "revisit and pose-following evaluation");
    add_common(ev);
    ev->add_option("--ckpt", ckpt, "checkpoint")->required();
    ev->add_option("--out", out, "report directory")->required();
    ev->add_option("--steps", steps, "denoising steps (default: model.steps_student)");

    auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid");
    add_common(ab);
    ab->add_option("--data", data, "dataset directory")->required();
    ab->add_option("--out", out, "report directory")->required();

    auto* sv = app.add_subcommand("serve", "streaming session server");
    add_common(sv);
    sv->add_option("--addr", addr, "host:port");
    sv->add_option("--ckpt", ckpt, "checkpoint")->required();
    sv->add_option("--tick-ms", tick_ms, "input tick period")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    int status = 1;
    try {
        Config cfg = load_config(common);
        if (episodes >= 0) cfg.set("data.episodes", std::to_string(episodes));
        if (steps >= 0 && name == "train") cfg.set("train.steps", std::to_string(steps));
        if (steps >= 0 && name == "distill") cfg.set("distill.steps", std::to_string(steps));
        if (name == "serve") return cmd_serve(cfg, addr, ckpt, tick_ms);
        Manifest man(out, name, cfg, argc, argv);
        if (name == "gen-data") status = cmd_gen_data(cfg, out, man);
        if (name == "train") status = cmd_train(cfg, stage, data, init, out, man);
        if (name == "distill") status = cmd_distill(cfg, data, student, teacher, out, man);
        if (name == "eval") status = cmd_eval(cfg, ckpt, steps, out, man);
        if (name == "ablate") status = cmd_ablate(cfg, data, out, man);
        man.write(status);
    } catch (const CLI::Error& e) {
        std::cerr << "error: " << e.what() << "\n" << sub->help();
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return status;
}
