#pragma once

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "checkpoint.hpp"
#include "data.hpp"
#include "models.hpp"
#include "optim.hpp"

namespace hiercomp {

enum class Preset : std::uint8_t { Paper, Desk };

inline std::string_view preset_name(Preset p) { return p == Preset::Paper ? "paper" : "desk"; }
inline Preset parse_preset(std::string_view s) {
  if (s == "paper") return Preset::Paper;
  if (s == "desk") return Preset::Desk;
  throw std::invalid_argument("unknown preset '" + std::string(s) + "' (paper|desk)");
}

// Learning-rate tables of the training recipe.
inline double lr_network_adjustment(NetworkName n) {
  switch (n) {
    case NetworkName::VGG11:
    case NetworkName::ThreeConvNet: return 1.0;
    case NetworkName::ShallowFC:
    case NetworkName::WideNet:
    case NetworkName::DeepNet: return 0.5;
  }
  return 1.0;
}

inline double dataset_learning_factor(Task t) {
  switch (t) {
    case Task::ObjectRecognition: return 0.1;
    case Task::StylizedObjectRecognition:
    case Task::TexturePerception: return 0.25;
    case Task::ColorEstimation: return 0.001;
  }
  return 0.1;
}

inline int paper_epochs(Task t) { return t == Task::ColorEstimation ? 40 : 100; }
inline int desk_epochs(Task t) { return t == Task::ColorEstimation ? 10 : 20; }

struct ExperimentConfig {
  Task task = Task::ObjectRecognition;
  NetworkName network = NetworkName::ThreeConvNet;
  ScrambleSpec scramble;
  int run_id = 1;
  Preset preset = Preset::Desk;
  int epochs = 20;
  std::size_t batch_size = 64;
  double lr_network_adjustment = 1.0;
  double dataset_learning_factor = 0.1;
  std::size_t train_size = 10000;
  std::size_t test_size = 2000;
  SgdConfig sgd;
  AugmentConfig augment;
  bool augment_train = true;

  double base_lr() const { return recipe_base_lr(lr_network_adjustment, dataset_learning_factor); }
  std::size_t output_dim() const { return task_output_dim(task); }
  // Data order depends on the cell but not on the scrambling condition.
  std::uint64_t data_seed() const {
    return mix_seed(fnv1a64(task_name(task)), fnv1a64(network_name(network)), static_cast<std::uint64_t>(run_id));
  }
  std::string cell_id() const {
    return std::string(task_name(task)) + "_" + std::string(network_name(network)) + "_" + scramble.tag() + "_r" +
           std::to_string(run_id);
  }

  void validate() const {
    scramble.validate();
    if (scramble.image_side != kImageSide) throw std::invalid_argument("config: scramble side must be 32");
    if (run_id < 1 || run_id > kMaxRunId) throw std::invalid_argument("config: run_id must be in 1..5");
    if (epochs < 0) throw std::invalid_argument("config: epochs must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("config: batch_size must be positive");
    if (train_size == 0 || test_size == 0) throw std::invalid_argument("config: dataset sizes must be positive");
    if (!(base_lr() > 0)) throw std::invalid_argument("config: learning rate must be positive");
    sgd.validate();
    augment.validate();
  }
};

inline ExperimentConfig make_config(Task task, NetworkName network, ScrambleSpec scramble, int run_id,
                                    Preset preset) {
  ExperimentConfig c;
  c.task = task;
  c.network = network;
  c.scramble = scramble;
  c.run_id = run_id;
  c.preset = preset;
  c.lr_network_adjustment = lr_network_adjustment(network);
  c.dataset_learning_factor = dataset_learning_factor(task);
  if (preset == Preset::Paper) {
    c.epochs = paper_epochs(task);
    c.train_size = 50000;
    c.test_size = 10000;
  } else {
    c.epochs = desk_epochs(task);
    c.train_size = 10000;
    c.test_size = 2000;
  }
  return c;
}

// ---- evaluation -----------------------------------------------------------

enum class Metric : std::uint8_t { Accuracy, MSE };

inline Metric task_metric(Task t) { return is_classification(t) ? Metric::Accuracy : Metric::MSE; }
inline std::string_view metric_name(Metric m) { return m == Metric::Accuracy ? "accuracy" : "mse"; }

// preds: [N x 10] logits for accuracy, [N x 3] colors for MSE.
inline double score_predictions(const Tensor<float>& preds, const TaskDataset& ds, Metric metric) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (metric != task_metric(ds.task))
    throw std::invalid_argument("evaluate: metric " + std::string(metric_name(metric)) + " does not fit task " +
                                std::string(task_name(ds.task)));
  const std::size_t k = metric == Metric::Accuracy ? kNumClasses : 3;
  if (preds.shape() != Shape{ds.size(), k})
    throw ShapeError("evaluate: predictions " + to_string(preds.shape()) + " for " + std::to_string(ds.size()) +
                     " items");
  if (metric == Metric::Accuracy) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const float* row = preds.data() + i * k;
      const auto arg = static_cast<int>(std::max_element(row, row + k) - row);
      correct += arg == ds.labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
  }
  double se = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = static_cast<double>(preds[i * 3 + c]) - ds.colors[i][c];
      se += d * d;
    }
  return se / static_cast<double>(3 * ds.size());
}

template <class T>
Tensor<float> predict_dataset(Network<T>& net, const TaskDataset& ds, const AugmentConfig& cfg,
                              std::size_t batch_size = 256) {
  const std::size_t k = net.spec().output_dim;
  Tensor<float> out({ds.size(), k});
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(ds, idx, cfg, nullptr);
    const Tensor<T> y = net.predict(b.inputs.template cast<T>());
    for (std::size_t i = 0; i < y.size(); ++i) out[start * k + i] = static_cast<float>(y[i]);
  }
  return out;
}

template <class T>
double evaluate(Network<T>& net, const TaskDataset& ds, Metric metric, const AugmentConfig& cfg = {}) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (metric != task_metric(ds.task))
    throw std::invalid_argument("evaluate: metric " + std::string(metric_name(metric)) + " does not fit task " +
                                std::string(task_name(ds.task)));
  return score_predictions(predict_dataset(net, ds, cfg), ds, metric);
}

// ---- training -------------------------------------------------------------

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochStats {
  double loss = 0;
  double metric = 0;  // running accuracy / MSE over the augmented batches
};

template <class T>
EpochStats train_epoch(Network<T>& net, OptimizerState<T>& opt, const TaskDataset& train, const ExperimentConfig& cfg,
                       int epoch, double lr) {
  const auto order = epoch_order(train.size(), cfg.data_seed(), static_cast<std::size_t>(epoch));
  const Metric metric = task_metric(cfg.task);
  double loss_sum = 0, metric_sum = 0;
  std::size_t batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batch_index) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const std::span<const std::size_t> idx(order.data() + start, end - start);
    Rng rng = batch_rng(cfg.data_seed(), static_cast<std::size_t>(epoch), batch_index);
    const Batch b = make_batch(train, idx, cfg.augment, cfg.augment_train ? &rng : nullptr);

    Tape<T> tape;
    const Var<T> out = net.forward(tape, tape.constant(b.inputs.template cast<T>()));
    const Var<T> loss = metric == Metric::Accuracy ? cross_entropy(out, std::span<const int>(b.labels))
                                                   : mse(out, b.targets.template cast<T>());
    const double l = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(l))
      throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batch_index));
    tape.backward(loss);
    sgd_step(net.parameters(), opt, lr);
    zero_grad(net.parameters());

    const double w = static_cast<double>(b.size());
    loss_sum += l * w;
    const Tensor<T>& y = out.value();
    if (metric == Metric::Accuracy) {
      for (std::size_t i = 0; i < b.size(); ++i) {
        const T* row = y.data() + i * kNumClasses;
        metric_sum += static_cast<int>(std::max_element(row, row + kNumClasses) - row) == b.labels[i];
      }
    } else {
      metric_sum += l * w;
    }
  }
  const double n = static_cast<double>(order.size());
  return {loss_sum / n, metric_sum / n};
}

// ---- records --------------------------------------------------------------

inline constexpr int kRecordSchemaVersion = 1;

struct RunRecord {
  int schema_version = kRecordSchemaVersion;
  ExperimentConfig config;
  std::string status = "ok";  // ok | diverged
  std::string error;
  std::vector<double> train_loss;  // per epoch
  std::vector<double> train_metric;
  double metric_iid = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, double> metric_ood;  // scramble tag -> metric; only for s0 cells
  double seconds = 0;
  std::string checkpoint;
  std::string init_checkpoint;
  std::string init_hash;

  bool ok() const { return status == "ok"; }
  Metric metric() const { return task_metric(config.task); }
};

namespace detail {
inline nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(); }
inline double number_or_nan(const nlohmann::json& j) {
  return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN();
}
}  // namespace detail

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  return {{"task", task_name(c.task)},
          {"network", network_name(c.network)},
          {"scramble", c.scramble.tag()},
          {"scheme", scheme_name(c.scramble.scheme)},
          {"level", c.scramble.level},
          {"scramble_seed", c.scramble.seed},
          {"run_id", c.run_id},
          {"preset", preset_name(c.preset)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"lr_network_adjustment", c.lr_network_adjustment},
          {"dataset_learning_factor", c.dataset_learning_factor},
          {"base_lr", c.base_lr()},
          {"train_size", c.train_size},
          {"test_size", c.test_size},
          {"momentum", c.sgd.momentum},
          {"weight_decay", c.sgd.weight_decay},
          {"dampening", c.sgd.dampening},
          {"nesterov", c.sgd.nesterov},
          {"augment_train", c.augment_train}};
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c = make_config(parse_task(j.at("task").get<std::string>()),
                                   parse_network(j.at("network").get<std::string>()),
                                   parse_scramble(j.at("scramble").get<std::string>(), kImageSide,
                                                  j.value("scramble_seed", kDefaultScrambleSeed)),
                                   j.at("run_id").get<int>(), parse_preset(j.at("preset").get<std::string>()));
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.lr_network_adjustment = j.at("lr_network_adjustment").get<double>();
  c.dataset_learning_factor = j.at("dataset_learning_factor").get<double>();
  c.train_size = j.at("train_size").get<std::size_t>();
  c.test_size = j.at("test_size").get<std::size_t>();
  c.sgd.momentum = j.at("momentum").get<double>();
  c.sgd.weight_decay = j.at("weight_decay").get<double>();
  c.sgd.dampening = j.at("dampening").get<double>();
  c.sgd.nesterov = j.at("nesterov").get<bool>();
  c.augment_train = j.value("augment_train", true);
  return c;
}

inline nlohmann::json record_to_json(const RunRecord& r) {
  nlohmann::json ood = nlohmann::json::object();
  for (const auto& [tag, v] : r.metric_ood) ood[tag] = detail::number_or_null(v);
  nlohmann::json losses = nlohmann::json::array(), metrics = nlohmann::json::array();
  for (double v : r.train_loss) losses.push_back(detail::number_or_null(v));
  for (double v : r.train_metric) metrics.push_back(detail::number_or_null(v));
  return {{"schema_version", r.schema_version},
          {"cell", r.config.cell_id()},
          {"config", config_to_json(r.config)},
          {"status", r.status},
          {"error", r.error},
          {"metric", metric_name(r.metric())},
          {"train_loss", losses},
          {"train_metric", metrics},
          {"metric_iid", detail::number_or_null(r.metric_iid)},
          {"metric_ood", ood},
          {"seconds", r.seconds},
          {"checkpoint", r.checkpoint},
          {"init_checkpoint", r.init_checkpoint},
          {"init_hash", r.init_hash}};
}

class RecordError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline RunRecord record_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("schema_version").get<int>();
    if (version != kRecordSchemaVersion)
      throw RecordError("record: schema version " + std::to_string(version) + ", expected " +
                        std::to_string(kRecordSchemaVersion));
    RunRecord r;
    r.schema_version = version;
    r.config = config_from_json(j.at("config"));
    r.status = j.at("status").get<std::string>();
    r.error = j.value("error", "");
    for (const auto& v : j.at("train_loss")) r.train_loss.push_back(detail::number_or_nan(v));
    for (const auto& v : j.value("train_metric", nlohmann::json::array())) r.train_metric.push_back(detail::number_or_nan(v));
    r.metric_iid = detail::number_or_nan(j.at("metric_iid"));
    for (const auto& [tag, v] : j.at("metric_ood").items()) r.metric_ood[tag] = detail::number_or_nan(v);
    r.seconds = j.at("seconds").get<double>();
    r.checkpoint = j.value("checkpoint", "");
    r.init_checkpoint = j.value("init_checkpoint", "");
    r.init_hash = j.value("init_hash", "");
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw RecordError(std::string("record: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw RecordError(std::string("record: ") + e.what());
  }
}

// Written to a temporary name and renamed, so a record file is either complete or absent.
inline void write_record(const std::filesystem::path& path, const RunRecord& r) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << std::setw(2) << record_to_json(r) << '\n';
    if (!out) throw std::runtime_error("cannot write " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline RunRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RecordError("cannot open " + path.string());
  try {
    return record_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw RecordError(path.string() + ": " + e.what());
  } catch (const RecordError& e) {
    throw RecordError(path.string() + ": " + e.what());
  }
}

inline std::vector<RunRecord> read_records(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(dir))
    for (const auto& e : std::filesystem::directory_iterator(dir))
      if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) out.push_back(read_record(f));
  return out;
}

// ---- data access ----------------------------------------------------------

// Raw images plus locations of the generated sets; builds task datasets on demand.
struct DataSource {
  CifarData raw;
  std::filesystem::path texture_dir;
  std::filesystem::path stylized_dir;

  TaskDataset dataset(Task task, Split split, const ScrambleSpec& scramble, std::size_t limit) const {
    const RawSplit& src = split == Split::Train ? raw.train : raw.test;
    if (src.size() == 0) throw DataError("no " + std::string(split_name(split)) + " images loaded");
    const RawSplit part = src.head(limit);
    std::filesystem::path gen;
    if (task == Task::TexturePerception) gen = texture_dir;
    if (task == Task::StylizedObjectRecognition) gen = stylized_dir;
    return make_task_dataset(task, split, part, scramble, gen);
  }
};

// ---- one cell -------------------------------------------------------------

struct RunOptions {
  std::filesystem::path out_dir = "results";
  std::ostream* log = nullptr;
  bool save_checkpoint = true;
};

struct OutputLayout {
  std::filesystem::path root;
  std::filesystem::path record(const ExperimentConfig& c) const { return root / "records" / (c.cell_id() + ".json"); }
  std::filesystem::path checkpoint(const ExperimentConfig& c) const {
    return root / "checkpoints" / (c.cell_id() + ".hckp");
  }
  std::filesystem::path curve(const ExperimentConfig& c) const { return root / "curves" / (c.cell_id() + ".csv"); }
  std::filesystem::path init_checkpoint(const ExperimentConfig& c) const {
    return root / "init" /
           (std::string(network_name(c.network)) + "_o" + std::to_string(c.output_dim()) + "_r" +
            std::to_string(c.run_id) + ".hckp");
  }
  std::filesystem::path results_csv() const { return root / "results.csv"; }
};

namespace detail {
inline std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Initial weights for (network, output_dim, run_id): loaded when already on
// disk, otherwise built and saved. Returns the checkpoint fingerprint.
template <class T>
std::string load_or_create_init(Network<T>& net, const ExperimentConfig& c, const OutputLayout& layout) {
  const auto path = layout.init_checkpoint(c);
  std::lock_guard lock(detail::init_mutex());
  if (std::filesystem::exists(path)) {
    const auto bytes = read_file(path.string());
    restore_parameters(net.parameters(), deserialize_checkpoint<T>(bytes));
    net.spec().init_seed = init_seed_for(c.network, c.output_dim(), c.run_id);
    return fingerprint(bytes);
  }
  init_matched(net, c.run_id);
  const auto bytes = serialize_checkpoint<T>(net.parameters());
  std::filesystem::create_directories(path.parent_path());
  write_file(path.string() + ".tmp", bytes);
  std::filesystem::rename(path.string() + ".tmp", path);
  return fingerprint(bytes);
}

inline void append_curve_row(std::ofstream& out, int epoch, std::string_view split, double loss, double metric) {
  out << epoch << ',' << split << ',';
  if (std::isfinite(loss)) out << std::setprecision(9) << loss;
  out << ',';
  if (std::isfinite(metric)) out << std::setprecision(9) << metric;
  out << '\n';
  out.flush();
}

// Trains one cell and persists its record, checkpoint and loss curve.
// `trained` receives the final network when non-null.
inline RunRecord run_cell(const ExperimentConfig& cfg, const DataSource& data, const RunOptions& opt,
                          Network<float>* trained = nullptr) {
  cfg.validate();
  const OutputLayout layout{opt.out_dir};
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = cfg;
  rec.init_checkpoint = layout.init_checkpoint(cfg).string();

  Network<float> net(make_network_spec(cfg.network, cfg.output_dim()));
  rec.init_hash = load_or_create_init(net, cfg, layout);

  const Metric metric = task_metric(cfg.task);
  const TaskDataset train = data.dataset(cfg.task, Split::Train, cfg.scramble, cfg.train_size);
  const TaskDataset test = data.dataset(cfg.task, Split::Test, cfg.scramble, cfg.test_size);

  std::filesystem::create_directories(layout.curve(cfg).parent_path());
  std::ofstream curve(layout.curve(cfg), std::ios::trunc);
  curve << "epoch,split,loss," << metric_name(metric) << '\n';

  OptimizerState<float> state(cfg.sgd);
  const LrSchedule schedule{cfg.base_lr(), std::max(cfg.epochs, 1)};
  try {
    for (int e = 0; e < cfg.epochs; ++e) {
      const EpochStats s = train_epoch(net, state, train, cfg, e, lr_at(schedule, e));
      rec.train_loss.push_back(s.loss);
      rec.train_metric.push_back(s.metric);
      append_curve_row(curve, e, "train", s.loss, s.metric);
      if (opt.log)
        *opt.log << cfg.cell_id() << " epoch " << e + 1 << "/" << cfg.epochs << " loss " << s.loss << " "
                 << metric_name(metric) << " " << s.metric << std::endl;
    }
    rec.metric_iid = evaluate(net, test, metric, cfg.augment);
    append_curve_row(curve, cfg.epochs, "test", std::numeric_limits<double>::quiet_NaN(), rec.metric_iid);
    if (cfg.scramble.scheme == ScrambleScheme::Identity) {
      for (const auto& spec : all_scramble_conditions(kImageSide, cfg.scramble.seed)) {
        const TaskDataset shifted = data.dataset(cfg.task, Split::Test, spec, cfg.test_size);
        rec.metric_ood[spec.tag()] = evaluate(net, shifted, metric, cfg.augment);
      }
    }
  } catch (const DivergenceError& e) {
    rec.status = "diverged";
    rec.error = e.what();
    if (opt.log) *opt.log << cfg.cell_id() << " diverged: " << e.what() << std::endl;
  }
  if (opt.save_checkpoint) {
    rec.checkpoint = layout.checkpoint(cfg).string();
    std::filesystem::create_directories(layout.checkpoint(cfg).parent_path());
    save_checkpoint<float>(rec.checkpoint, net.parameters());
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_record(layout.record(cfg), rec);
  if (trained) *trained = std::move(net);
  return rec;
}

// ---- aggregate CSV --------------------------------------------------------

// One row per (task, network, condition, run): metric_iid from the cell
// trained at that condition, metric_ood from the s0 cell tested there.
struct ResultRow {
  Task task = Task::ObjectRecognition;
  NetworkName network = NetworkName::ThreeConvNet;
  ScrambleSpec condition;
  int run_id = 1;
  double metric_iid = std::numeric_limits<double>::quiet_NaN();
  double metric_ood = std::numeric_limits<double>::quiet_NaN();
  double seconds = std::numeric_limits<double>::quiet_NaN();
};

// Position of a condition in all_scramble_conditions().
inline int condition_index(const ScrambleSpec& s) {
  const auto all = all_scramble_conditions(kImageSide, s.seed);
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].scheme == s.scheme && all[i].level == s.level) return static_cast<int>(i);
  throw RecordError("unknown scramble condition " + s.tag());
}

inline std::vector<ResultRow> result_rows(const std::vector<RunRecord>& records) {
  using Key = std::tuple<int, int, int, int>;  // task, network, condition, run
  std::map<Key, ResultRow> rows;
  auto row_for = [&](const ExperimentConfig& c, const ScrambleSpec& cond) -> ResultRow& {
    const Key key{static_cast<int>(c.task), static_cast<int>(c.network), condition_index(cond), c.run_id};
    auto [it, fresh] = rows.try_emplace(key);
    if (fresh) {
      it->second.task = c.task;
      it->second.network = c.network;
      it->second.condition = cond;
      it->second.run_id = c.run_id;
    }
    return it->second;
  };
  for (const auto& r : records) {
    ResultRow& row = row_for(r.config, r.config.scramble);
    row.metric_iid = r.metric_iid;
    row.seconds = r.seconds;
    for (const auto& [tag, v] : r.metric_ood)
      row_for(r.config, parse_scramble(tag, kImageSide, r.config.scramble.seed)).metric_ood = v;
  }
  std::vector<ResultRow> out;
  for (auto& [key, row] : rows) out.push_back(row);
  return out;
}

inline constexpr const char* kResultsHeader = "task,network,scheme,level,run_id,metric_iid,metric_ood,seconds";

inline void write_results_csv(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << kResultsHeader << '\n';
  auto num = [&](double v) {
    if (std::isfinite(v)) out << std::setprecision(17) << v;
  };
  for (const auto& row : rows) {
    out << task_name(row.task) << ',' << network_name(row.network) << ',' << scheme_name(row.condition.scheme) << ','
        << row.condition.level << ',' << row.run_id << ',';
    num(row.metric_iid);
    out << ',';
    num(row.metric_ood);
    out << ',';
    num(row.seconds);
    out << '\n';
  }
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline void write_results_csv(const std::filesystem::path& path, const std::vector<RunRecord>& records) {
  write_results_csv(path, result_rows(records));
}

inline ScrambleSpec condition_from(std::string_view scheme, int level) {
  for (const auto& s : all_scramble_conditions())
    if (scheme_name(s.scheme) == scheme && s.level == level) return s;
  throw RecordError("unknown condition " + std::string(scheme) + " level " + std::to_string(level));
}

inline std::vector<ResultRow> read_results_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RecordError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kResultsHeader) throw RecordError(path.string() + ": unexpected header");
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 8) throw RecordError(path.string() + ":" + std::to_string(lineno) + ": expected 8 fields");
    auto num = [](const std::string& v) { return v.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(v); };
    try {
      ResultRow r;
      r.task = parse_task(f[0]);
      r.network = parse_network(f[1]);
      r.condition = condition_from(f[2], std::stoi(f[3]));
      r.run_id = std::stoi(f[4]);
      r.metric_iid = num(f[5]);
      r.metric_ood = num(f[6]);
      r.seconds = num(f[7]);
      rows.push_back(r);
    } catch (const std::logic_error& e) {
      throw RecordError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

// ---- grid -----------------------------------------------------------------

struct GridSpec {
  std::vector<Task> tasks;
  std::vector<NetworkName> networks;
  std::vector<ScrambleSpec> scrambles;
  std::vector<int> run_ids;
  Preset preset = Preset::Desk;
  std::optional<int> epochs;
  std::optional<std::size_t> train_size;
  std::optional<std::size_t> test_size;
  std::filesystem::path out_dir = "results";
  std::filesystem::path cifar_dir;
  std::filesystem::path texture_dir;
  std::filesystem::path stylized_dir;
  std::size_t records_per_file = 10000;
  std::size_t jobs = 1;

  std::vector<ExperimentConfig> cells() const {
    std::vector<ExperimentConfig> out;
    for (Task t : tasks)
      for (NetworkName n : networks)
        for (int r : run_ids)
          for (const auto& s : scrambles) {
            ExperimentConfig c = make_config(t, n, s, r, preset);
            if (epochs) c.epochs = *epochs;
            if (train_size) c.train_size = *train_size;
            if (test_size) c.test_size = *test_size;
            out.push_back(c);
          }
    return out;
  }
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string w; in >> w;) {
    for (char& ch : w)
      if (ch == ',') ch = ' ';
    std::istringstream parts(w);
    for (std::string p; parts >> p;) out.push_back(p);
  }
  return out;
}
}  // namespace detail

// Plain-text grid file: `key = value` lines, '#' comments, lists separated
// by spaces or commas. `scrambles = all` expands to the ten conditions.
inline GridSpec parse_grid_config(const std::string& text) {
  GridSpec g;
  g.run_ids = {1};
  g.scrambles = all_scramble_conditions();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto eq = line.find('=');
    auto fail = [&](const std::string& why) {
      throw ConfigError("grid config line " + std::to_string(lineno) + ": " + why);
    };
    if (eq == std::string::npos) fail("expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto words = detail::split_words(value);
    try {
      if (key == "tasks") {
        g.tasks.clear();
        for (const auto& w : words) g.tasks.push_back(parse_task(w));
      } else if (key == "networks") {
        g.networks.clear();
        for (const auto& w : words) g.networks.push_back(parse_network(w));
      } else if (key == "scrambles") {
        g.scrambles.clear();
        if (words.size() == 1 && words[0] == "all")
          g.scrambles = all_scramble_conditions();
        else
          for (const auto& w : words) g.scrambles.push_back(parse_scramble(w));
      } else if (key == "run_ids") {
        g.run_ids.clear();
        for (const auto& w : words) g.run_ids.push_back(std::stoi(w));
      } else if (key == "preset") {
        g.preset = parse_preset(value);
      } else if (key == "epochs") {
        g.epochs = std::stoi(value);
      } else if (key == "train_size") {
        g.train_size = std::stoul(value);
      } else if (key == "test_size") {
        g.test_size = std::stoul(value);
      } else if (key == "out") {
        g.out_dir = value;
      } else if (key == "cifar") {
        g.cifar_dir = value;
      } else if (key == "texture_dir") {
        g.texture_dir = value;
      } else if (key == "stylized_dir") {
        g.stylized_dir = value;
      } else if (key == "records_per_file") {
        g.records_per_file = std::stoul(value);
      } else if (key == "jobs") {
        g.jobs = std::stoul(value);
      } else {
        fail("unknown key '" + key + "'");
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      fail(key + ": " + e.what());
    }
  }
  for (int r : g.run_ids)
    if (r < 1 || r > kMaxRunId) throw ConfigError("grid config: run_id " + std::to_string(r) + " outside 1..5");
  if (g.jobs == 0) throw ConfigError("grid config: jobs must be >= 1");
  return g;
}

inline GridSpec load_grid_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open grid config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_grid_config(ss.str());
}

struct GridResult {
  std::vector<RunRecord> records;  // in cell order
  std::size_t trained = 0;
  std::size_t skipped = 0;
  std::vector<std::string> failed;  // "cell: reason"
};

// Runs every cell without a persisted record. Divergent cells count as done.
inline GridResult run_grid(const std::vector<ExperimentConfig>& cells, const DataSource& data, const RunOptions& opt,
                           std::size_t jobs = 1) {
  GridResult result;
  const OutputLayout layout{opt.out_dir};
  std::vector<std::optional<RunRecord>> slots(cells.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto path = layout.record(cells[i]);
    if (std::filesystem::exists(path)) {
      try {
        slots[i] = read_record(path);
        ++result.skipped;
        continue;
      } catch (const RecordError&) {
        // unreadable record: retrain
      }
    }
    todo.push_back(i);
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k; (k = next.fetch_add(1)) < todo.size();) {
      const std::size_t i = todo[k];
      try {
        RunRecord r = run_cell(cells[i], data, opt);
        std::lock_guard lock(mu);
        if (!r.ok()) result.failed.push_back(cells[i].cell_id() + ": " + r.error);
        slots[i] = std::move(r);
        ++result.trained;
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        result.failed.push_back(cells[i].cell_id() + ": " + e.what());
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, todo.size()));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& s : slots)
    if (s) result.records.push_back(std::move(*s));
  if (!cells.empty()) write_results_csv(layout.results_csv(), read_records(layout.root / "records"));
  return result;
}

inline DataSource load_data_source(const GridSpec& g) {
  DataSource ds;
  std::size_t train = 0, test = 0;
  for (const auto& c : g.cells()) {
    train = std::max(train, c.train_size);
    test = std::max(test, c.test_size);
  }
  if (train > 0) {
    if (g.cifar_dir.empty()) throw ConfigError("grid config: 'cifar' directory not set");
    CifarOptions o;
    o.records_per_file = g.records_per_file;
    o.train_limit = train;
    o.test_limit = test;
    ds.raw = load_cifar10(g.cifar_dir, o);
  }
  ds.texture_dir = g.texture_dir;
  ds.stylized_dir = g.stylized_dir;
  return ds;
}

}  // namespace hiercomp
