#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mic/config.hpp"
#include "mic/error.hpp"
#include "mic/eval.hpp"
#include "mic/gradcheck.hpp"
#include "mic/trainer.hpp"

namespace mic {

inline constexpr const char* kOutDirEnv = "MIC_OUT_DIR";
inline constexpr double kGradCheckTolerance = 1e-5;

inline nlohmann::json to_json(const DetectorMetrics& m) {
  return {{"iter", m.iter},         {"loss_cls", m.loss_cls}, {"loss_icl", m.loss_icl},
          {"alpha", m.alpha},       {"loss_det", m.loss_det}, {"lr", m.lr},
          {"icl_anchors", m.icl_anchors}, {"bank_size", m.bank_size}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"base_acc", r.base_acc},
          {"novel_acc", r.novel_acc},
          {"overall_acc", r.overall_acc},
          {"novel_as_base", r.novel_as_base},
          {"novel_correct", r.novel_correct},
          {"novel_as_other_novel", r.novel_as_other_novel},
          {"novel_as_background", r.novel_as_background},
          {"bg_false_positive", r.bg_false_positive},
          {"intra_cos", r.intra_cos},
          {"inter_cos", r.inter_cos},
          {"row_counts", r.row_counts},
          {"confusion", r.confusion}};
}

inline EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  r.base_acc = j.at("base_acc").get<double>();
  r.novel_acc = j.at("novel_acc").get<double>();
  r.overall_acc = j.at("overall_acc").get<double>();
  r.novel_as_base = j.at("novel_as_base").get<double>();
  r.novel_correct = j.at("novel_correct").get<double>();
  r.novel_as_other_novel = j.at("novel_as_other_novel").get<double>();
  r.novel_as_background = j.at("novel_as_background").get<double>();
  r.bg_false_positive = j.at("bg_false_positive").get<double>();
  r.intra_cos = j.at("intra_cos").get<double>();
  r.inter_cos = j.at("inter_cos").get<double>();
  r.row_counts = j.at("row_counts").get<std::vector<std::size_t>>();
  r.confusion = j.at("confusion").get<std::vector<std::vector<std::size_t>>>();
  return r;
}

inline void write_metrics_jsonl(std::ostream& os, std::span<const DetectorMetrics> ms) {
  for (const auto& m : ms) os << to_json(m).dump() << '\n';
}

inline void write_prompt_loss_csv(std::ostream& os, std::span<const PromptLossRow> rows) {
  os << "level,step,loss_p,loss_n\n";
  for (const auto& r : rows)
    os << r.level << ',' << r.step << ',' << format_double(r.loss_p) << ',' << format_double(r.loss_n) << '\n';
}

namespace detail {

struct CliOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  std::string world;
  std::string prompts;
  std::string detector;
};

inline std::filesystem::path out_dir(const CliOptions& o) {
  std::filesystem::path dir = ".";
  if (const char* env = std::getenv(kOutDirEnv); env && *env) dir = env;
  if (!o.out.empty()) dir = o.out;
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write '" + p.string() + "'");
  return os;
}

inline std::ifstream open_artifact(const std::filesystem::path& p, const std::string& what) {
  std::ifstream is(p);
  if (!is) throw ArtifactError("missing " + what + " '" + p.string() + "'");
  return is;
}

inline RunConfig resolve_config(const CliOptions& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_config(o.config);
  if (o.seed) rc.train.seed = *o.seed;
  rc.world.validate();
  rc.train.validate();
  return rc;
}

inline SyntheticWorld resolve_world(const CliOptions& o, const RunConfig& rc) {
  if (o.world.empty()) return gen_world(rc.world);
  std::ifstream is = open_artifact(o.world, "world file");
  return read_world(is);
}

inline PromptEnsemble load_prompts(const CliOptions& o, const std::filesystem::path& dir) {
  const std::filesystem::path p = o.prompts.empty() ? dir / "prompts.txt" : std::filesystem::path(o.prompts);
  std::ifstream is = open_artifact(p, "prompt checkpoint");
  return read_prompts(is);
}

inline void print_report(std::ostream& out, const EvalReport& r) {
  out << std::fixed << std::setprecision(4) << "base_acc " << r.base_acc << "\nnovel_acc " << r.novel_acc
      << "\noverall_acc " << r.overall_acc << "\nnovel_as_base " << r.novel_as_base << "\nnovel_as_background "
      << r.novel_as_background << "\nbg_false_positive " << r.bg_false_positive << "\nintra_cos " << r.intra_cos
      << "\ninter_cos " << r.inter_cos << '\n'
      << std::defaultfloat;
}

}  // namespace detail

// Entry point of the `mic` tool. Exit codes: 0 success, 2 configuration or
// missing-artifact error, 1 any other failure.
inline int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Meta prompt and instance contrastive learning on synthetic open-vocabulary tasks", "mic"};
  app.require_subcommand(1);
  detail::CliOptions o;
  app.add_option("--config", o.config, "key = value config file");
  app.add_option("--seed", o.seed, "training seed (world seed for gen-world)");
  app.add_option("--out", o.out, std::string("output directory (default $") + kOutDirEnv + " or .)");
  app.add_flag("--quiet", o.quiet, "suppress the stdout summary");

  auto* gen = app.add_subcommand("gen-world", "generate the synthetic world and write world.txt");
  auto* tp = app.add_subcommand("train-prompts", "procedure A: meta prompt learning");
  auto* td = app.add_subcommand("train-detector", "procedure B: detector training with ICL");
  auto* ev = app.add_subcommand("eval", "evaluate a prompt checkpoint (and optionally a detector)");
  auto* sw = app.add_subcommand("sweep-k", "novel accuracy against the sampled vocabulary size");
  auto* ab = app.add_subcommand("ablate", "component ablation grid");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every analytic gradient");
  for (auto* sub : {gen, tp, td, ev, sw, ab, gc}) sub->fallthrough();
  for (auto* sub : {tp, td, ev, sw, ab}) sub->add_option("--world", o.world, "world file instead of generating one");
  for (auto* sub : {td, ev}) sub->add_option("--prompts", o.prompts, "prompt checkpoint (default OUT/prompts.txt)");
  ev->add_option("--detector", o.detector, "detector checkpoint");

  std::vector<std::string> args;
  for (int i = argc - 1; i >= 1; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "mic: " << e.what() << '\n';
    return 2;
  }

  try {
    RunConfig rc = detail::resolve_config(o);
    const std::filesystem::path dir = detail::out_dir(o);

    if (gen->parsed()) {
      if (o.seed) rc.world.seed = *o.seed;
      const SyntheticWorld w = gen_world(rc.world);
      auto os = detail::open_out(dir / "world.txt");
      write_world(os, w);
      if (!o.quiet) out << "world: " << w.vocab.base.size() << " base, " << w.vocab.novel.size() << " novel, d = "
                        << w.spec.dim << ", seed " << w.spec.seed << '\n';
    } else if (tp->parsed()) {
      const SyntheticWorld w = detail::resolve_world(o, rc);
      const ProcedureAResult a = run_procedure_A(w, rc.train);
      auto ps = detail::open_out(dir / "prompts.txt");
      write_prompts(ps, a.prompts);
      auto cs = detail::open_out(dir / "prompt_loss.csv");
      write_prompt_loss_csv(cs, a.curve);
      auto cfg = detail::open_out(dir / "config.txt");
      write_config(cfg, rc);
      if (!o.quiet && !a.curve.empty())
        out << "prompts: " << a.prompts.members.size() << " member(s), final loss_p "
            << format_double(a.curve.back().loss_p) << ", loss_n " << format_double(a.curve.back().loss_n) << '\n';
    } else if (td->parsed()) {
      const SyntheticWorld w = detail::resolve_world(o, rc);
      const PromptEnsemble prompts = detail::load_prompts(o, dir);
      const ProcedureBResult b = run_procedure_B(w, prompts, rc.train);
      auto ds = detail::open_out(dir / "detector.txt");
      write_detector(ds, b.detector);
      auto bs = detail::open_out(dir / "bank.txt");
      b.bank.write(bs);
      auto ms = detail::open_out(dir / "metrics.jsonl");
      write_metrics_jsonl(ms, b.metrics);
      if (!o.quiet && !b.metrics.empty())
        out << "detector: " << b.metrics.size() << " steps, final loss_det " << format_double(b.metrics.back().loss_det)
            << ", bank size " << b.metrics.back().bank_size << '\n';
    } else if (ev->parsed()) {
      const SyntheticWorld w = detail::resolve_world(o, rc);
      const PromptEnsemble prompts = detail::load_prompts(o, dir);
      std::optional<Detector> det;
      if (!o.detector.empty()) {
        std::ifstream is = detail::open_artifact(o.detector, "detector checkpoint");
        det = read_detector(is);
      }
      const EvalReport r = eval_classifier(w, prompts, det ? &*det : nullptr, gen_test_set(w, rc.train), rc.train.tau_cls);
      auto js = detail::open_out(dir / "eval.json");
      js << to_json(r).dump(2) << '\n';
      if (!o.quiet) detail::print_report(out, r);
    } else if (sw->parsed()) {
      const SyntheticWorld w = detail::resolve_world(o, rc);
      const auto pts = sweep_sampled_classes(w, rc.train, rc.sweep_k, rc.sweep_seeds);
      auto cs = detail::open_out(dir / "sweep_k.csv");
      write_sweep_csv(cs, pts);
      if (!o.quiet) write_sweep_csv(out, pts);
    } else if (ab->parsed()) {
      const SyntheticWorld w = detail::resolve_world(o, rc);
      const auto cells = ablation_grid(w, rc.train, kAblationRows, rc.sweep_seeds);
      auto cs = detail::open_out(dir / "ablation.csv");
      write_ablation_csv(cs, cells);
      if (!o.quiet) write_ablation_csv(out, cells);
    } else if (gc->parsed()) {
      const GradCheckReport r = run_gradcheck(rc.train.seed);
      if (!o.quiet) {
        for (const auto& e : r.entries)
          out << std::left << std::setw(20) << e.name << ' ' << std::scientific << std::setprecision(3)
              << e.max_rel_err << std::defaultfloat << '\n';
        out << "max relative error " << std::scientific << std::setprecision(3) << r.max_rel_err()
            << std::defaultfloat << " over " << r.instances << " instances\n";
      }
      if (!r.passed(kGradCheckTolerance)) {
        err << "mic: gradient check failed (tolerance " << kGradCheckTolerance << ")\n";
        return 1;
      }
    }
  } catch (const ConfigError& e) {
    err << "mic: config error: " << e.what() << '\n';
    return 2;
  } catch (const ArtifactError& e) {
    err << "mic: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "mic: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace mic
