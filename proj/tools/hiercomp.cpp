// hiercomp: command-line front end for the scrambling experiments.
#include <CLI11.hpp>

#include <iostream>

#include "hiercomp/analysis.hpp"
#include "hiercomp/nonlocal.hpp"
#include "hiercomp/runner.hpp"

using namespace hiercomp;
namespace fs = std::filesystem;

namespace {

struct DataArgs {
  std::string cifar, texture_dir, stylized_dir;
  std::size_t records_per_file = 10000;

  void add(CLI::App* app) {
    app->add_option("--cifar", cifar, "CIFAR-10 binary directory (or its parent)");
    app->add_option("--texture-dir", texture_dir, "generated texture set");
    app->add_option("--stylized-dir", stylized_dir, "generated stylized set");
    app->add_option("--records-per-file", records_per_file, "records per CIFAR training batch file");
  }
  void fill(GridSpec& g) const {
    if (!cifar.empty()) g.cifar_dir = cifar;
    if (!texture_dir.empty()) g.texture_dir = texture_dir;
    if (!stylized_dir.empty()) g.stylized_dir = stylized_dir;
    if (records_per_file != 10000) g.records_per_file = records_per_file;
  }
};

int report(const GridResult& r, const fs::path& out) {
  std::cout << "trained " << r.trained << ", skipped " << r.skipped << ", failed " << r.failed.size() << "\n";
  for (const auto& f : r.failed) std::cout << "  " << f << "\n";
  std::cout << "results: " << (out / "results.csv").string() << "\n";
  return r.failed.empty() ? 0 : 2;
}

std::vector<ResultRow> rows_from(const fs::path& in) {
  if (fs::is_directory(in)) {
    const fs::path records = fs::exists(in / "records") ? in / "records" : in;
    return result_rows(read_records(records));
  }
  return read_results_csv(in);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical scrambling experiments"};
  app.require_subcommand(1);

  // run
  auto* run = app.add_subcommand("run", "train and evaluate one cell");
  std::string task = "object", network = "VGG11", scramble = "s0", preset = "desk", out = "results";
  int run_id = 1;
  std::optional<int> epochs;
  std::optional<std::size_t> train_size, test_size;
  DataArgs data;
  run->add_option("--task", task, "object|stylized|texture|color")->capture_default_str();
  run->add_option("--network", network, "VGG11|ShallowFC|WideNet|DeepNet|ThreeConvNet")->capture_default_str();
  run->add_option("--scramble", scramble, "s0|td1..td4|bu1..bu4|s5")->capture_default_str();
  run->add_option("--run-id", run_id)->check(CLI::Range(1, kMaxRunId))->capture_default_str();
  run->add_option("--preset", preset, "paper|desk")->capture_default_str();
  run->add_option("--out", out, "output directory")->capture_default_str();
  run->add_option("--epochs", epochs);
  run->add_option("--train-size", train_size);
  run->add_option("--test-size", test_size);
  data.add(run);

  // grid
  auto* grid = app.add_subcommand("grid", "run every cell of a config file, skipping finished ones");
  std::string config;
  std::optional<std::size_t> jobs;
  grid->add_option("--config", config, "key = value grid file")->required()->check(CLI::ExistingFile);
  grid->add_option("--jobs", jobs, "parallel cells");
  DataArgs grid_data;
  grid_data.add(grid);

  // nonlocal
  auto* nl = app.add_subcommand("nonlocal", "Toeplitz network with random nonlocal entries");
  double prob = 0.0005;
  std::string nl_preset = "desk", nl_out = "nonlocal.csv";
  std::optional<int> nl_epochs;
  std::optional<std::size_t> nl_train;
  std::uint64_t nl_seed = 1;
  nl->add_option("--prob", prob, "probability of a nonlocal entry per structural zero")->capture_default_str();
  nl->add_option("--epochs", nl_epochs);
  nl->add_option("--preset", nl_preset, "paper (50k images) | desk (10k images)")->capture_default_str();
  nl->add_option("--train-size", nl_train);
  nl->add_option("--seed", nl_seed)->capture_default_str();
  nl->add_option("--out", nl_out, "CSV file")->capture_default_str();
  DataArgs nl_data;
  nl_data.add(nl);

  // scramble
  auto* sc = app.add_subcommand("scramble", "write a permutation map and its legend");
  std::string sc_tag = "td2", sc_map, sc_legend, sc_image, sc_image_out;
  sc->add_option("--scramble", sc_tag)->capture_default_str();
  sc->add_option("--map", sc_map, ".pmap output");
  sc->add_option("--legend", sc_legend, "PNG index visualization");
  sc->add_option("--image", sc_image, "32x32 PNG to scramble")->check(CLI::ExistingFile);
  sc->add_option("--image-out", sc_image_out, "scrambled PNG");

  // aggregate / plots
  auto* ag = app.add_subcommand("aggregate", "summarize runs per condition");
  std::string ag_in = "results", ag_out;
  ag->add_option("--in", ag_in, "results dir, records dir or results.csv")->capture_default_str();
  ag->add_option("--out", ag_out, "summaries CSV (default: stdout)");

  auto* pl = app.add_subcommand("plots", "one SVG per task plus summaries.csv");
  std::string pl_in = "results", pl_out = "plots";
  pl->add_option("--in", pl_in, "results dir, records dir or results.csv")->capture_default_str();
  pl->add_option("--out", pl_out)->capture_default_str();

  // filters
  auto* fl = app.add_subcommand("filters", "tile a layer's filters into a PNG");
  std::string fl_ckpt, fl_layer = "conv1", fl_out = "filters.png";
  std::size_t fl_scale = 8;
  fl->add_option("--checkpoint", fl_ckpt)->required()->check(CLI::ExistingFile);
  fl->add_option("--layer", fl_layer)->capture_default_str();
  fl->add_option("--out", fl_out)->capture_default_str();
  fl->add_option("--scale", fl_scale, "pixels per weight")->capture_default_str();

  // synth-cifar
  auto* sy = app.add_subcommand("synth-cifar", "write a synthetic dataset in CIFAR-10 binary layout");
  std::string sy_out;
  std::size_t sy_per_file = 200;
  std::uint64_t sy_seed = 1;
  sy->add_option("--out", sy_out)->required();
  sy->add_option("--records-per-file", sy_per_file, "images per file: 5 training files + 1 test file")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sy->add_option("--seed", sy_seed)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      GridSpec g;
      g.tasks = {parse_task(task)};
      g.networks = {parse_network(network)};
      g.scrambles = {parse_scramble(scramble)};
      g.run_ids = {run_id};
      g.preset = parse_preset(preset);
      g.epochs = epochs;
      g.train_size = train_size;
      g.test_size = test_size;
      g.out_dir = out;
      data.fill(g);
      const auto cells = g.cells();
      const auto source = load_data_source(g);
      RunOptions opt;
      opt.out_dir = g.out_dir;
      opt.log = &std::cout;
      const RunRecord r = run_cell(cells.front(), source, opt);
      write_results_csv(OutputLayout{g.out_dir}.results_csv(), read_records(g.out_dir / "records"));
      std::cout << r.config.cell_id() << ": " << r.status << ", " << metric_name(task_metric(r.config.task))
                << " i.i.d. " << r.metric_iid << "\n";
      return r.ok() ? 0 : 2;
    }
    if (*grid) {
      GridSpec g = load_grid_config(config);
      grid_data.fill(g);
      if (jobs) g.jobs = *jobs;
      const auto source = load_data_source(g);
      RunOptions opt;
      opt.out_dir = g.out_dir;
      opt.log = &std::cout;
      return report(run_grid(g.cells(), source, opt, g.jobs), g.out_dir);
    }
    if (*nl) {
      const Preset p = parse_preset(nl_preset);
      NonlocalConfig cfg;
      cfg.probability = prob;
      cfg.seed = nl_seed;
      cfg.epochs = nl_epochs.value_or(10);
      const std::size_t n = nl_train.value_or(p == Preset::Paper ? 50000 : 10000);
      if (nl_data.cifar.empty()) throw std::invalid_argument("nonlocal: --cifar is required");
      CifarOptions o;
      o.records_per_file = nl_data.records_per_file;
      o.train_limit = n;
      o.test_limit = 0;
      const auto raw = load_cifar10(nl_data.cifar, o);
      const auto train = make_task_dataset(Task::ObjectRecognition, Split::Train, raw.train, ScrambleSpec::identity());
      const auto res = run_nonlocal_experiment<float>(cfg, train, &std::cout);
      write_nonlocal_csv(nl_out, res);
      std::cout << "status " << res.status << ", first layer: " << res.first_layer_conv << " conv + "
                << res.first_layer_nonlocal << " nonlocal entries, norm slope " << norm_slope(res.series) << "\n";
      return res.status == "ok" ? 0 : 2;
    }
    if (*sc) {
      const auto spec = parse_scramble(sc_tag);
      const auto map = build_permutation(spec);
      if (!sc_map.empty()) save_map(sc_map, map);
      if (!sc_legend.empty()) write_png(sc_legend, map_legend(map));
      if (!sc_image.empty()) {
        const auto img = read_png_rgb(sc_image);
        if (img.width != kImageSide || img.height != kImageSide) throw std::invalid_argument("scramble: image is not 32x32");
        if (sc_image_out.empty()) throw std::invalid_argument("scramble: --image needs --image-out");
        Image8 outimg = img;
        const std::size_t hw = kImagePixels;
        for (std::size_t c = 0; c < kImageChannels; ++c)
          for (std::size_t p = 0; p < hw; ++p) outimg.planar[c * hw + map[p]] = img.planar[c * hw + p];
        write_png_rgb(sc_image_out, outimg);
      }
      std::cout << spec.tag() << ": " << map.size() << " positions\n";
      return 0;
    }
    if (*ag) {
      std::vector<std::string> warnings;
      const auto s = aggregate(rows_from(ag_in), &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      if (!ag_out.empty()) {
        write_summaries_csv(ag_out, s);
      } else {
        std::cout << std::setprecision(4) << "task network condition n mean popstd (iid | ood)\n";
        for (const auto& x : s)
          std::cout << task_name(x.task) << ' ' << network_name(x.network) << ' ' << x.condition.tag() << ' '
                    << x.iid.n << ' ' << x.iid.mean << ' ' << x.iid.std << " | " << x.ood.n << ' ' << x.ood.mean
                    << ' ' << x.ood.std << "\n";
      }
      return 0;
    }
    if (*pl) {
      std::vector<std::string> warnings;
      const auto s = aggregate(rows_from(pl_in), &warnings);
      for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
      for (const auto& f : emit_plots(s, pl_out)) std::cout << f.string() << "\n";
      return 0;
    }
    if (*fl) {
      const auto g = export_filters(load_checkpoint<float>(fl_ckpt), fl_layer, fl_out, fl_scale);
      std::cout << g.filters << " filters in a " << g.grid << "x" << g.grid << " grid -> " << fl_out << "\n";
      return 0;
    }
    if (*sy) {
      CifarData d;
      d.train = synthetic_split(5 * sy_per_file, sy_seed);
      d.test = synthetic_split(sy_per_file, mix_seed(sy_seed, 0x7E57));
      save_cifar10(sy_out, d, sy_per_file);
      std::cout << "wrote " << d.train.size() << " training + " << d.test.size() << " test images\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
