// Command-line front end: generate, train, ablate, distill, report.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "focalpyr/focalpyr.hpp"

namespace fp = focalpyr;

namespace {

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fp::IoError("cannot open '" + path + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw fp::ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

fp::ExperimentConfig load_config(const std::string& path) {
  fp::ExperimentConfig cfg = fp::config_from_json(read_json(path));
  fp::apply_seed_override(cfg, std::getenv("FP_SEED"));
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw fp::IoError("cannot write '" + path + "'");
  return out;
}

// results.csv -> results_curves.csv
std::string curves_path_for(const std::string& results_path) {
  const std::string ext = ".csv";
  std::string stem = results_path;
  if (stem.size() > ext.size() && stem.compare(stem.size() - ext.size(), ext.size(), ext) == 0)
    stem.resize(stem.size() - ext.size());
  return stem + "_curves.csv";
}

void write_results(const std::string& path, const std::vector<fp::ResultRow>& rows) {
  if (path.empty()) {
    fp::write_results_csv(std::cout, rows);
    return;
  }
  auto out = open_out(path);
  fp::write_results_csv(out, rows);
  std::vector<std::vector<fp::CurvePoint>> curves;
  for (const auto& r : rows) curves.push_back(r.metrics.curve);
  auto curves_out = open_out(curves_path_for(path));
  fp::write_curves_csv(curves_out, curves);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"focalpyr: bitwise-encoded regression heads, focal losses, orthogonal regularization"};
  app.require_subcommand(1);

  auto* generate = app.add_subcommand("generate", "write a synthetic dataset (targets CSV + FPFT features)");
  std::string task = "MRD1", out_prefix = "synthetic";
  std::size_t n = 2000, dim = 32;
  double noise = 0.05;
  std::uint64_t seed = 42;
  generate->add_option("--task", task, "MRD1 | MRD2 | LF")->capture_default_str();
  generate->add_option("--n", n)->capture_default_str();
  generate->add_option("--dim", dim)->capture_default_str();
  generate->add_option("--noise", noise)->capture_default_str();
  generate->add_option("--seed", seed)->capture_default_str();
  generate->add_option("--out-prefix", out_prefix, "writes <prefix>_targets.csv and <prefix>_features.fpft")
      ->capture_default_str();

  auto* train = app.add_subcommand("train", "train one configuration and report test metrics");
  std::string config_path, out_path;
  train->add_option("--config", config_path, "flat JSON experiment config")->required();
  train->add_option("--out", out_path, "results CSV (stdout if omitted); curves go to <out>_curves.csv");

  auto* ablate = app.add_subcommand("ablate", "run the encoding × loss × OR grid");
  std::string grid_path;
  ablate->add_option("--config", config_path, "base config")->required();
  ablate->add_option("--grid", grid_path, "grid JSON (gammas, or, encoding, base_loss)")->required();
  ablate->add_option("--out", out_path, "results CSV (stdout if omitted); curves go to <out>_curves.csv");

  auto* distill = app.add_subcommand("distill", "run the toy student/teacher distillation loop");
  fp::DistillRunConfig dcfg;
  distill->add_option("--tps", dcfg.distill.student_temperature, "student temperature")->capture_default_str();
  distill->add_option("--tpt", dcfg.distill.teacher_temperature, "teacher temperature")->capture_default_str();
  distill->add_option("--l", dcfg.distill.teacher_momentum, "teacher momentum")->capture_default_str();
  distill->add_option("--m", dcfg.distill.center_momentum, "center momentum")->capture_default_str();
  distill->add_option("--steps", dcfg.steps)->capture_default_str();
  distill->add_option("--lr", dcfg.lr)->capture_default_str();
  distill->add_option("--seed", dcfg.seed)->capture_default_str();
  distill->add_option("--out", out_path, "log CSV (stdout if omitted)");

  auto* report = app.add_subcommand("report", "render a results CSV");
  std::string in_path, format = "csv", svg_path, curves_in;
  report->add_option("--in", in_path, "results CSV")->required();
  report->add_option("--format", format)->check(CLI::IsMember({"csv", "markdown"}))->capture_default_str();
  report->add_option("--curves", svg_path, "write learning curves as SVG");
  report->add_option("--curves-in", curves_in, "curve CSV (default <in>_curves.csv)");
  report->add_option("--out", out_path, "output file (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*generate) {
      const fp::TaskSpec spec = fp::task_or_throw(task);
      const fp::Dataset data = fp::synth_generate(spec, n, dim, noise, seed);
      std::vector<fp::TargetRow> rows;
      for (std::size_t i = 0; i < data.size(); ++i) rows.push_back({i, spec.name, data.targets[i]});
      fp::save_targets_csv(out_prefix + "_targets.csv", rows);
      fp::save_features_bin(out_prefix + "_features.fpft", data.inputs);
      std::cerr << "wrote " << n << " samples to " << out_prefix << "_{targets.csv,features.fpft}\n";
    } else if (*train) {
      const fp::ExperimentConfig cfg = load_config(config_path);
      const fp::Dataset data = fp::load_or_generate(cfg);
      const fp::SplitIndices splits = fp::split(data.size(), cfg.seed);
      const fp::TrainResult result = fp::train(cfg, data, splits);
      write_results(out_path, {fp::ResultRow::from(cfg, result.metrics)});
    } else if (*ablate) {
      const fp::ExperimentConfig cfg = load_config(config_path);
      const fp::AblationGrid grid = fp::grid_from_json(read_json(grid_path));
      write_results(out_path, fp::ablate(cfg, grid));
    } else if (*distill) {
      dcfg.distill.validate();
      const fp::DistillRun run = fp::run_distillation(dcfg);
      std::ostringstream csv;
      csv << "step,loss,divergence,center_norm\n";
      for (const auto& r : run.log)
        csv << r.step << ',' << fp::format_decimal(r.loss, 17) << ',' << fp::format_decimal(r.divergence, 17) << ','
            << fp::format_decimal(r.center_norm, 17) << '\n';
      if (out_path.empty())
        std::cout << csv.str();
      else
        open_out(out_path) << csv.str();
    } else if (*report) {
      std::ifstream in(in_path);
      if (!in) throw fp::IoError("cannot open '" + in_path + "'");
      const auto rows = fp::read_results_csv(in);
      if (rows.empty()) throw fp::FormatError("'" + in_path + "' has no result rows");
      std::ostringstream text;
      if (format == "markdown")
        fp::write_results_markdown(text, rows);
      else
        fp::write_results_csv(text, rows);
      if (out_path.empty())
        std::cout << text.str();
      else
        open_out(out_path) << text.str();
      if (!svg_path.empty()) {
        const std::string source = curves_in.empty() ? curves_path_for(in_path) : curves_in;
        std::ifstream cin(source);
        if (!cin) throw fp::IoError("cannot open curve file '" + source + "'");
        auto svg = open_out(svg_path);
        fp::write_curves_svg(svg, fp::read_curves_csv(cin));
      }
    }
  } catch (const fp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.exit_code();
  }
  return 0;
}
