#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "rcisysid/error.hpp"
#include "rcisysid/pipeline.hpp"
#include "rcisysid/plant.hpp"

using namespace rcisysid;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config, out = "out", data, test, model;
  std::optional<std::uint64_t> seed;
  double tau = -1.0;
  int np = -1;
};

PipelineConfig load_config(const Options& o) {
  PipelineConfig cfg = o.config.empty() ? PipelineConfig::from_json(Json::object()) : PipelineConfig::load(o.config);
  if (o.seed) cfg.set_seed(*o.seed);
  return cfg;
}

// Records for a stage: CSV files when given, otherwise the configured
// generator. Downstream stages reuse the scaler stored in their input artifact.
Datasets load_data(const PipelineConfig& cfg, const Options& o, const Artifact* prev) {
  Datasets d;
  if (!o.data.empty()) {
    const Dataset tr = load_csv(o.data);
    d = scale_datasets(tr, o.test.empty() ? tr : load_csv(o.test));
  } else {
    if (!o.test.empty()) throw ConfigError("--test needs --data");
    d = make_datasets(cfg);
  }
  if (prev) {
    d.scaler = prev->scaler;
    d.train_s = apply_scaler(d.train, d.scaler);
    d.test_s = apply_scaler(d.test, d.scaler);
  }
  return d;
}

Artifact load_model(const Options& o) {
  if (o.model.empty()) throw ConfigError("--model is required");
  return load_artifact(o.model);
}

std::string out_path(const Options& o, const std::string& file) {
  fs::create_directories(o.out);
  return (fs::path(o.out) / file).string();
}

void emit(const Options& o, const StageResult& r) {
  save_artifact(r.artifact, out_path(o, r.artifact.stage + ".json"));
  if (!r.log.empty()) write_train_log(r.log, out_path(o, r.artifact.stage + "_log.csv"));
  std::ofstream m(out_path(o, r.artifact.stage + "_metrics.csv"));
  write_metrics_header(m);
  write_metrics_row(m, r.artifact);
  write_set_vertices(r.artifact, out_path(o, r.artifact.stage + "_set.csv"), false);
  write_metrics_row(std::cout, r.artifact);
}

int error_exit(const char* kind, int code, const std::string& msg, const CLI::App* sub) {
  Json e{{"error", kind}, {"exit", code}, {"message", msg}};
  std::cerr << e.dump() << '\n';
  if (sub && code == 2) std::cerr << sub->help();
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Identification of qLPV models with robust control invariant sets", "rci-sysid"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s, bool data, bool model) {
    s->add_option("--config", o.config, "JSON experiment configuration")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "Override the configured seed");
    s->add_option("--out", o.out, "Output directory")->capture_default_str();
    if (data) {
      s->add_option("--data", o.data, "Training CSV (default: configured generator)")->check(CLI::ExistingFile);
      s->add_option("--test", o.test, "Test CSV")->check(CLI::ExistingFile);
    }
    if (model) s->add_option("--model", o.model, "Input artifact")->required()->check(CLI::ExistingFile);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate train/test records");
  common(gen, false, false);
  auto* lti = app.add_subcommand("fit-lti", "Fit the LTI model and its disturbance set");
  common(lti, true, false);
  auto* init = app.add_subcommand("init-rci", "Initial RCI set for the LTI model");
  common(init, false, true);
  auto* qlpv = app.add_subcommand("fit-qlpv", "qLPV fit penalized by the initial set");
  common(qlpv, true, true);
  auto* red = app.add_subcommand("reduce", "Lump, reduce scheduling order and refit C");
  common(red, true, true);
  red->add_option("--np", o.np, "Target scheduling order (default: config)");
  auto* conc = app.add_subcommand("fit-concurrent", "Concurrent model and set fit");
  common(conc, true, true);
  conc->add_option("--tau", o.tau, "Size weight (default: config)");
  auto* ev = app.add_subcommand("eval", "Train and test BFR of an artifact");
  common(ev, true, true);
  auto* ctl = app.add_subcommand("control-sim", "Closed-loop tracking with the safety filter");
  common(ctl, false, true);
  auto* stau = app.add_subcommand("sweep-tau", "Concurrent fits over the tau grid");
  common(stau, true, true);
  auto* skp = app.add_subcommand("sweep-kp", "qLPV fits over the group-lasso grid");
  common(skp, true, true);
  auto* snp = app.add_subcommand("sweep-np", "Reduction to every scheduling order");
  common(snp, true, true);
  auto* run = app.add_subcommand("run", "All enabled stages in sequence");
  common(run, false, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return error_exit("usage", 2, e.what(), nullptr);
  }

  const CLI::App* sub = app.get_subcommands().front();
  try {
    const PipelineConfig cfg = load_config(o);
    if (sub == gen) {
      const Datasets d = make_datasets(cfg);
      save_csv(d.train, out_path(o, "train.csv"));
      save_csv(d.test, out_path(o, "test.csv"));
    } else if (sub == lti) {
      emit(o, stage_lti(cfg, load_data(cfg, o, nullptr)));
    } else if (sub == init) {
      emit(o, stage_init_rci(cfg, load_model(o)));
    } else if (sub == qlpv) {
      const Artifact prev = load_model(o);
      emit(o, stage_qlpv(cfg, prev, load_data(cfg, o, &prev)));
    } else if (sub == red) {
      const Artifact prev = load_model(o);
      emit(o, stage_reduce(cfg, prev, load_data(cfg, o, &prev), o.np >= 0 ? o.np : cfg.reduce_np));
    } else if (sub == conc) {
      const Artifact prev = load_model(o);
      emit(o, stage_concurrent(cfg, prev, load_data(cfg, o, &prev), o.tau >= 0 ? o.tau : cfg.concurrent.tau));
    } else if (sub == ev) {
      const Artifact a = load_model(o);
      const Datasets d = load_data(cfg, o, &a);
      const double tr = artifact_bfr(a, d.train_s);
      const double te = prediction_bfr(a.model, d.test_s, Vec::Zero(a.model.nx()));
      std::cout << "bfr_train," << tr << "\nbfr_test," << te << '\n';
      std::ofstream os(out_path(o, "eval.csv"));
      os << "stage,config_hash,seed,bfr_train,bfr_test\n"
         << a.stage << ',' << a.config_hash << ',' << a.seed << ',' << tr << ',' << te << '\n';
    } else if (sub == ctl) {
      Artifact summary;
      const ClosedLoopLog log = stage_control(cfg, load_model(o), &summary);
      write_control_log(log, out_path(o, "control.csv"));
      std::ofstream m(out_path(o, "control_metrics.csv"));
      m << "steps,filter_active_steps,y_violations,max_set_violation\n"
        << cfg.control.T << ',' << summary.metrics["filter_active_steps"] << ',' << summary.metrics["y_violations"]
        << ',' << summary.metrics["max_set_violation"] << '\n';
      std::cout << "filter_active_steps," << summary.metrics["filter_active_steps"] << "\ny_violations,"
                << summary.metrics["y_violations"] << '\n';
    } else if (sub == stau || sub == skp) {
      const Artifact prev = load_model(o);
      const Datasets d = load_data(cfg, o, &prev);
      const bool is_tau = sub == stau;
      const auto rows = is_tau ? sweep_tau(cfg, prev, d) : sweep_kp(cfg, prev, d);
      write_sweep(rows, is_tau ? "tau" : "kappa_p", out_path(o, is_tau ? "sweep_tau.csv" : "sweep_kp.csv"));
      for (const auto& r : rows) std::cout << r.param << ',' << r.bfr_train << ',' << r.r << ',' << r.nonzero << '\n';
    } else if (sub == snp) {
      const Artifact prev = load_model(o);
      const auto rows = reduction_sweep(cfg, prev, load_data(cfg, o, &prev));
      write_reduction(rows, out_path(o, "sweep_np.csv"));
      for (const auto& r : rows) std::cout << r.np << ',' << r.bfr_train << ',' << r.r << '\n';
    } else if (sub == run) {
      const Artifact a = run_pipeline(cfg, o.out);
      std::cout << "final_stage," << a.stage << "\nr," << a.r << '\n';
    }
  } catch (const ConfigError& e) {
    return error_exit("config", 2, e.what(), sub);
  } catch (const NumericalError& e) {
    return error_exit("numerical", 3, e.what(), nullptr);
  } catch (const InfeasibleError& e) {
    return error_exit("infeasible", 4, e.what(), nullptr);
  } catch (const std::exception& e) {
    return error_exit("numerical", 3, e.what(), nullptr);
  }
  return 0;
}
