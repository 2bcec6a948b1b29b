#include "puma/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "puma/baselines.hpp"
#include "puma/errors.hpp"
#include "puma/metrics.hpp"
#include "puma/rng.hpp"

namespace puma {

namespace pt = boost::property_tree;
using nlohmann::json;

Method parse_method(std::string_view name) {
  if (name == "puma") return Method::puma;
  if (name == "retrain") return Method::retrain;
  if (name == "sisa") return Method::sisa;
  if (name == "amnesiac") return Method::amnesiac;
  throw InvalidArgument("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method method) {
  switch (method) {
    case Method::puma: return "puma";
    case Method::retrain: return "retrain";
    case Method::sisa: return "sisa";
    case Method::amnesiac: return "amnesiac";
  }
  return "?";
}

namespace {

MarkTarget parse_mark_target(std::string_view s) {
  if (s == "kmeans") return MarkTarget::kmeans;
  if (s == "cluster") return MarkTarget::cluster;
  if (s == "none") return MarkTarget::none;
  throw InvalidArgument("unknown mark target '" + std::string(s) + "'");
}

std::string_view to_string(MarkTarget t) {
  switch (t) {
    case MarkTarget::kmeans: return "kmeans";
    case MarkTarget::cluster: return "cluster";
    case MarkTarget::none: return "none";
  }
  return "?";
}

CriterionSet parse_criterion_set(std::string_view s) {
  if (s == "remaining") return CriterionSet::remaining;
  if (s == "test") return CriterionSet::test;
  if (s == "train") return CriterionSet::train;
  throw InvalidArgument("unknown criterion set '" + std::string(s) + "'");
}

std::string_view to_string(CriterionSet c) {
  switch (c) {
    case CriterionSet::remaining: return "remaining";
    case CriterionSet::test: return "test";
    case CriterionSet::train: return "train";
  }
  return "?";
}

const std::map<std::string, std::set<std::string>>& known_keys() {
  static const std::map<std::string, std::set<std::string>> keys = {
      {"experiment", {"name", "seed", "repeats", "delta"}},
      {"data", {"shape", "csv", "label_column", "n", "noise", "test_fraction", "flip_fraction"}},
      {"model", {"layers", "activation"}},
      {"train", {"epochs", "batch_size", "learning_rate"}},
      {"mark", {"scenario", "fractions", "kmeans_k", "target"}},
      {"removal", {"methods", "eta", "l1", "l2", "pool_size", "lambda_box", "criterion"}},
      {"lissa", {"depth", "damping", "scale", "repeats", "batch_size"}},
      {"sisa", {"shards"}},
      {"attack",
       {"enabled", "shadows", "subset_fraction", "shadow_epochs", "shadow_batch_size",
        "shadow_learning_rate", "hidden", "epochs", "batch_size", "learning_rate"}},
      {"debug", {"k_fraction", "inspect_fraction", "grid_step", "per_point_ihvp"}},
      {"calibration", {"eta", "k_fraction"}},
      {"sweep", {"etas"}},
  };
  return keys;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

class Reader {
 public:
  explicit Reader(const pt::ptree& tree) : tree_(tree) {}

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto sec = tree_.get_child_optional(section);
    if (!sec) return std::nullopt;
    const auto v = sec->get_optional<std::string>(key);
    if (!v) return std::nullopt;
    return trim(*v);
  }

  template <class T>
  void read(const std::string& section, const std::string& key, T& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    out = convert<T>(*v, section + "." + key);
  }

  template <class T>
  void read_list(const std::string& section, const std::string& key, std::vector<T>& out) const {
    const auto v = raw(section, key);
    if (!v) return;
    out.clear();
    for (const auto& item : split_list(*v)) out.push_back(convert<T>(item, section + "." + key));
  }

 private:
  template <class T>
  static T convert(const std::string& text, const std::string& where) {
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        return text;
      } else if constexpr (std::is_same_v<T, bool>) {
        if (text == "true" || text == "1" || text == "yes") return true;
        if (text == "false" || text == "0" || text == "no") return false;
        throw std::invalid_argument("bool");
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t pos = 0;
        const double v = std::stod(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("trailing");
        return v;
      } else if constexpr (std::is_signed_v<T>) {
        std::size_t pos = 0;
        const long long v = std::stoll(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("trailing");
        return static_cast<T>(v);
      } else {
        if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(text, &pos);
        if (pos != text.size()) throw std::invalid_argument("trailing");
        return static_cast<T>(v);
      }
    } catch (const std::logic_error&) {
      throw ParseError("config key " + where + ": cannot parse '" + text + "'");
    }
  }

  const pt::ptree& tree_;
};

ExperimentConfig from_tree(const pt::ptree& tree) {
  for (const auto& [section, child] : tree) {
    const auto it = known_keys().find(section);
    if (it == known_keys().end()) throw ParseError("unknown config section [" + section + "]");
    for (const auto& [key, value] : child) {
      if (!it->second.contains(key)) {
        throw ParseError("unknown config key " + section + "." + key);
      }
    }
  }

  ExperimentConfig c;
  const Reader r(tree);
  r.read("experiment", "name", c.name);
  r.read("experiment", "seed", c.seed);
  r.read("experiment", "repeats", c.repeats);
  r.read("experiment", "delta", c.delta);

  if (const auto shape = r.raw("data", "shape")) {
    c.data.shape = *shape == "csv" ? std::nullopt : std::optional<Shape>(parse_shape(*shape));
  }
  std::string csv;
  r.read("data", "csv", csv);
  c.data.csv = csv;
  if (!csv.empty() && !r.raw("data", "shape")) c.data.shape = std::nullopt;
  r.read("data", "label_column", c.data.label_column);
  r.read("data", "n", c.data.n);
  r.read("data", "noise", c.data.noise);
  r.read("data", "test_fraction", c.data.test_fraction);
  r.read("data", "flip_fraction", c.data.flip_fraction);

  r.read_list("model", "layers", c.layers);
  if (const auto a = r.raw("model", "activation")) c.activation = parse_activation(*a);

  r.read("train", "epochs", c.train.epochs);
  r.read("train", "batch_size", c.train.batch_size);
  r.read("train", "learning_rate", c.train.learning_rate);

  if (const auto s = r.raw("mark", "scenario")) c.scenario = parse_scenario(*s);
  r.read_list("mark", "fractions", c.fractions);
  r.read("mark", "kmeans_k", c.kmeans_k);
  if (const auto t = r.raw("mark", "target")) c.mark_target = parse_mark_target(*t);

  if (const auto m = r.raw("removal", "methods")) {
    c.methods.clear();
    for (const auto& name : split_list(*m)) c.methods.push_back(parse_method(name));
  }
  r.read("removal", "eta", c.removal.eta);
  r.read("removal", "l1", c.removal.l1);
  r.read("removal", "l2", c.removal.l2);
  r.read("removal", "pool_size", c.removal.pool_size);
  r.read("removal", "lambda_box", c.removal.lambda_box);
  if (const auto s = r.raw("removal", "criterion")) c.criterion = parse_criterion_set(*s);

  r.read("lissa", "depth", c.lissa.recursion_depth);
  r.read("lissa", "damping", c.lissa.damping);
  r.read("lissa", "scale", c.lissa.scale);
  r.read("lissa", "repeats", c.lissa.repeats);
  r.read("lissa", "batch_size", c.lissa.batch_size);

  r.read("sisa", "shards", c.sisa_shards);

  r.read("attack", "enabled", c.attack_enabled);
  r.read("attack", "shadows", c.shadows.count);
  r.read("attack", "subset_fraction", c.shadows.subset_fraction);
  r.read("attack", "shadow_epochs", c.shadows.epochs);
  r.read("attack", "shadow_batch_size", c.shadows.batch_size);
  r.read("attack", "shadow_learning_rate", c.shadows.learning_rate);
  r.read_list("attack", "hidden", c.attack.hidden);
  r.read("attack", "epochs", c.attack.epochs);
  r.read("attack", "batch_size", c.attack.batch_size);
  r.read("attack", "learning_rate", c.attack.learning_rate);

  r.read("debug", "k_fraction", c.k_fraction);
  r.read("debug", "inspect_fraction", c.inspect_fraction);
  r.read("debug", "grid_step", c.grid_step);
  r.read("debug", "per_point_ihvp", c.per_point_ihvp);

  r.read("calibration", "eta", c.calibration_eta);
  r.read("calibration", "k_fraction", c.calibration_k_fraction);

  r.read_list("sweep", "etas", c.eta_grid);

  c.validate();
  return c;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw InvalidArgument("config: " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
  require(repeats >= 1 && repeats <= 100, "experiment.repeats must be in [1, 100]");
  require(std::isfinite(delta) && delta >= 0.0, "experiment.delta must be >= 0");
  if (data.shape) {
    require(data.n >= 10, "data.n must be >= 10");
    require(std::isfinite(data.noise) && data.noise >= 0.0, "data.noise must be >= 0");
  } else {
    require(!data.csv.empty(), "data.csv is required when data.shape = csv");
  }
  require(data.test_fraction > 0.0 && data.test_fraction < 1.0,
          "data.test_fraction must be in (0, 1)");
  require(data.flip_fraction >= 0.0 && data.flip_fraction < 1.0,
          "data.flip_fraction must be in [0, 1)");
  require(layers.size() >= 2, "model.layers needs an input and an output width");
  for (auto w : layers) require(w >= 1, "model.layers entries must be positive");
  require(train.epochs >= 1, "train.epochs must be >= 1");
  require(train.batch_size >= 1, "train.batch_size must be >= 1");
  require(std::isfinite(train.learning_rate) && train.learning_rate > 0.0,
          "train.learning_rate must be > 0");
  require(!fractions.empty(), "mark.fractions must not be empty");
  for (std::size_t i = 0; i < fractions.size(); ++i) {
    require(fractions[i] > 0.0 && fractions[i] < 1.0, "mark.fractions must lie in (0, 1)");
    require(i == 0 || fractions[i] > fractions[i - 1], "mark.fractions must be strictly increasing");
  }
  require(kmeans_k >= 1, "mark.kmeans_k must be >= 1");
  require(!methods.empty(), "removal.methods must not be empty");
  for (std::size_t i = 0; i < methods.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) require(methods[i] != methods[j], "removal.methods repeats a method");
  }
  try {
    removal.validate();
    lissa.validate();
  } catch (const InvalidArgument& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  require(sisa_shards >= 1, "sisa.shards must be >= 1");
  require(shadows.count >= 1, "attack.shadows must be >= 1");
  require(shadows.epochs >= 1 && shadows.batch_size >= 1 && shadows.learning_rate > 0.0,
          "attack shadow training settings must be positive");
  require(attack.epochs >= 1 && attack.batch_size >= 1 && attack.learning_rate > 0.0,
          "attack classifier training settings must be positive");
  require(k_fraction > 0.0 && k_fraction <= 1.0, "debug.k_fraction must be in (0, 1]");
  require(inspect_fraction > 0.0 && inspect_fraction <= 1.0,
          "debug.inspect_fraction must be in (0, 1]");
  require(grid_step > 0.0 && grid_step <= 1.0, "debug.grid_step must be in (0, 1]");
  require(calibration_eta >= 0.0 && calibration_eta <= kMaxCalibrationEta,
          "calibration.eta must be in [0, 1e-3]");
  require(calibration_k_fraction > 0.0 && calibration_k_fraction <= 1.0,
          "calibration.k_fraction must be in (0, 1]");
  require(!eta_grid.empty(), "sweep.etas must not be empty");
  for (double e : eta_grid) {
    require(std::isfinite(e) && e >= 0.0 && e <= RemovalConfig::kMaxEta,
            "sweep.etas entries must be in [0, 0.5]");
  }
}

json ExperimentConfig::to_json() const {
  std::vector<std::string> method_names;
  for (auto m : methods) method_names.emplace_back(puma::to_string(m));
  json data_j = {{"shape", data.shape ? std::string(puma::to_string(*data.shape)) : "csv"},
                 {"n", data.n},
                 {"noise", data.noise},
                 {"test_fraction", data.test_fraction},
                 {"flip_fraction", data.flip_fraction}};
  if (!data.shape) {
    data_j["csv"] = data.csv.string();
    data_j["label_column"] = data.label_column;
  }
  return {
      {"experiment", {{"name", name}, {"seed", seed}, {"repeats", repeats}, {"delta", delta}}},
      {"data", data_j},
      {"model", {{"layers", layers}, {"activation", puma::to_string(activation)}}},
      {"train",
       {{"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"learning_rate", train.learning_rate}}},
      {"mark",
       {{"scenario", puma::to_string(scenario)},
        {"fractions", fractions},
        {"kmeans_k", kmeans_k},
        {"target", to_string(mark_target)}}},
      {"removal",
       {{"methods", method_names},
        {"eta", removal.eta},
        {"l1", removal.l1},
        {"l2", removal.l2},
        {"pool_size", removal.pool_size},
        {"lambda_box", removal.lambda_box},
        {"criterion", to_string(criterion)}}},
      {"lissa",
       {{"depth", lissa.recursion_depth},
        {"damping", lissa.damping},
        {"scale", lissa.scale},
        {"repeats", lissa.repeats},
        {"batch_size", lissa.batch_size}}},
      {"sisa", {{"shards", sisa_shards}}},
      {"attack",
       {{"enabled", attack_enabled},
        {"shadows", shadows.count},
        {"subset_fraction", shadows.subset_fraction},
        {"shadow_epochs", shadows.epochs},
        {"shadow_batch_size", shadows.batch_size},
        {"shadow_learning_rate", shadows.learning_rate},
        {"hidden", attack.hidden},
        {"epochs", attack.epochs},
        {"batch_size", attack.batch_size},
        {"learning_rate", attack.learning_rate}}},
      {"debug",
       {{"k_fraction", k_fraction},
        {"inspect_fraction", inspect_fraction},
        {"grid_step", grid_step},
        {"per_point_ihvp", per_point_ihvp}}},
      {"calibration", {{"eta", calibration_eta}, {"k_fraction", calibration_k_fraction}}},
      {"sweep", {{"etas", eta_grid}}},
  };
}

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return from_tree(tree);
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ParseError("config echo must be an object");
  pt::ptree tree;
  for (const auto& [section, keys] : j.items()) {
    if (!keys.is_object()) throw ParseError("config echo section " + section + " must be an object");
    for (const auto& [key, value] : keys.items()) {
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_array()) {
        for (std::size_t i = 0; i < value.size(); ++i) {
          if (i) text += ",";
          text += value[i].is_string() ? value[i].get<std::string>() : value[i].dump();
        }
      } else {
        text = value.dump();
      }
      tree.put(pt::ptree::path_type(section + "/" + key, '/'), text);
    }
  }
  return from_tree(tree);
}

// Reports ---------------------------------------------------------------------

std::size_t RunReport::failed_cells() const {
  return static_cast<std::size_t>(
      std::count_if(cells.begin(), cells.end(), [](const ReportCell& c) { return !c.ok; }));
}

int RunReport::exit_code() const {
  const std::size_t failed = failed_cells();
  if (cells.empty() || failed == cells.size()) return 3;
  return failed > 0 ? 2 : 0;
}

namespace {

bool is_timing(const std::string& name) {
  return name.size() >= 3 && name.compare(name.size() - 3, 3, "_ms") == 0;
}

json cell_to_json(const ReportCell& c, bool timing) {
  json metrics = json::object();
  for (const auto& [k, v] : c.metrics) {
    if (timing || !is_timing(k)) metrics[k] = v;
  }
  return {{"method", c.method}, {"scenario", c.scenario}, {"fraction", c.fraction},
          {"repeat", c.repeat}, {"ok", c.ok},             {"error", c.error},
          {"metrics", metrics}, {"details", c.details}};
}

json report_json(const RunReport& r, bool timing) {
  json cells = json::array();
  for (const auto& c : r.cells) cells.push_back(cell_to_json(c, timing));
  return {{"schema", kReportSchema}, {"kind", r.kind},   {"config", r.config},
          {"environment", r.environment}, {"cells", cells}};
}

}  // namespace

json RunReport::to_json() const { return report_json(*this, true); }

json RunReport::without_timing() const { return report_json(*this, false); }

RunReport RunReport::from_json(const json& j) {
  try {
    if (j.at("schema").get<std::string>() != kReportSchema) {
      throw ParseError("unsupported report schema '" + j.at("schema").get<std::string>() + "'");
    }
    RunReport r;
    r.kind = j.at("kind").get<std::string>();
    r.config = j.at("config");
    r.environment = j.at("environment");
    for (const auto& cj : j.at("cells")) {
      ReportCell c;
      c.method = cj.at("method").get<std::string>();
      c.scenario = cj.at("scenario").get<std::string>();
      c.fraction = cj.at("fraction").get<double>();
      c.repeat = cj.at("repeat").get<int>();
      c.ok = cj.at("ok").get<bool>();
      c.error = cj.at("error").get<std::string>();
      for (const auto& [k, v] : cj.at("metrics").items()) {
        c.metrics[k] = v.is_null() ? std::nan("") : v.get<double>();
      }
      c.details = cj.at("details");
      r.cells.push_back(std::move(c));
    }
    return r;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed report: ") + e.what());
  }
}

std::vector<const ReportCell*> RunReport::select(std::string_view method,
                                                 std::optional<double> fraction) const {
  std::vector<const ReportCell*> out;
  for (const auto& c : cells) {
    if (c.method != method) continue;
    if (fraction && std::abs(c.fraction - *fraction) > 1e-12) continue;
    out.push_back(&c);
  }
  return out;
}

ReportFormat parse_report_format(std::string_view name) {
  if (name == "json") return ReportFormat::json;
  if (name == "csv") return ReportFormat::csv;
  throw InvalidArgument("unknown report format '" + std::string(name) + "'");
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string number(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

}  // namespace

std::string report_to_csv(const RunReport& report) {
  std::set<std::string> names;
  for (const auto& c : report.cells) {
    for (const auto& [k, v] : c.metrics) names.insert(k);
  }
  std::ostringstream out;
  out << "kind,method,scenario,fraction,repeat,ok,error";
  for (const auto& n : names) out << ',' << csv_field(n);
  out << '\n';
  for (const auto& c : report.cells) {
    out << csv_field(report.kind) << ',' << csv_field(c.method) << ',' << csv_field(c.scenario)
        << ',' << number(c.fraction) << ',' << c.repeat << ',' << (c.ok ? 1 : 0) << ','
        << csv_field(c.error);
    for (const auto& n : names) {
      out << ',';
      const auto it = c.metrics.find(n);
      if (it != c.metrics.end()) out << number(it->second);
    }
    out << '\n';
  }
  return out.str();
}

void emit_report(const RunReport& report, const std::filesystem::path& path, ReportFormat format) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write report " + path.string());
  if (format == ReportFormat::json) {
    out << report.to_json().dump(2) << '\n';
  } else {
    out << report_to_csv(report);
  }
  if (!out) throw IoError("failed writing report " + path.string());
}

RunReport load_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open report " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("report " + path.string() + ": " + e.what());
  }
  return RunReport::from_json(j);
}

// Experiments -----------------------------------------------------------------

namespace {

json environment_fingerprint() {
#if defined(__clang__)
  const std::string compiler = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  const std::string compiler = std::string("gcc ") + __VERSION__;
#else
  const std::string compiler = "unknown";
#endif
#ifdef NDEBUG
  const bool optimized = true;
#else
  const bool optimized = false;
#endif
  return {{"library", "puma_lab"},
          {"compiler", compiler},
          {"cplusplus", static_cast<long>(__cplusplus)},
          {"ndebug", optimized},
          {"pointer_bits", sizeof(void*) * 8},
          {"ledger_quantum", kLedgerQuantum}};
}

std::uint64_t seed_for(const ExperimentConfig& cfg, std::uint64_t offset, int rep) {
  return cfg.seed + offset + static_cast<std::uint64_t>(rep);
}

struct RepeatData {
  Dataset train;
  Dataset test;
  IdSet flipped;
};

RepeatData prepare_data(const ExperimentConfig& cfg, int rep, bool flip) {
  Dataset all;
  if (cfg.data.shape) {
    all = generate(*cfg.data.shape, cfg.data.n, cfg.data.noise, seed_for(cfg, seed_offset::data, rep));
  } else {
    all = load_csv(cfg.data.csv, cfg.data.label_column).dataset;
  }
  auto sp = split(all, cfg.data.test_fraction, seed_for(cfg, seed_offset::split, rep));
  RepeatData out{std::move(sp.train), std::move(sp.test), {}};
  if (flip && cfg.data.flip_fraction > 0.0) {
    auto fl = flip_labels(out.train, cfg.data.flip_fraction, seed_for(cfg, seed_offset::flip, rep));
    out.train = std::move(fl.dataset);
    out.flipped = std::move(fl.flipped);
  }
  return out;
}

MlpSpec model_spec(const ExperimentConfig& cfg, int rep, const Dataset& train_set) {
  MlpSpec spec{cfg.layers, cfg.activation, seed_for(cfg, seed_offset::model, rep)};
  spec.validate();
  if (spec.input_dim() != train_set.num_features || spec.num_classes() != train_set.num_classes) {
    throw DimensionMismatch("model.layers " + std::to_string(spec.input_dim()) + "->" +
                            std::to_string(spec.num_classes()) + " does not fit data with " +
                            std::to_string(train_set.num_features) + " features and " +
                            std::to_string(train_set.num_classes) + " classes");
  }
  return spec;
}

TrainConfig train_config(const ExperimentConfig& cfg, int rep) {
  TrainConfig tc;
  tc.epochs = cfg.train.epochs;
  tc.batch_size = cfg.train.batch_size;
  tc.learning_rate = cfg.train.learning_rate;
  tc.shuffle_seed = seed_for(cfg, seed_offset::shuffle, rep);
  return tc;
}

LissaConfig lissa_config(const ExperimentConfig& cfg, int rep) {
  LissaConfig lc = cfg.lissa;
  lc.seed = seed_for(cfg, seed_offset::lissa, rep);
  return lc;
}

RemovalConfig removal_config(const ExperimentConfig& cfg, int rep) {
  RemovalConfig rc = cfg.removal;
  rc.seed = seed_for(cfg, seed_offset::removal, rep);
  return rc;
}

struct AttackPipeline {
  AttackClassifier classifier;
  double train_ms = 0.0;
};

AttackPipeline build_attack(const ExperimentConfig& cfg, int rep, const Dataset& train_set,
                            const MlpSpec& spec) {
  ShadowConfig sc = cfg.shadows;
  sc.seed = seed_for(cfg, seed_offset::shadows, rep);
  AttackTrainConfig ac = cfg.attack;
  ac.seed = seed_for(cfg, seed_offset::attack, rep);
  AttackPipeline out;
  out.train_ms = timed([&] {
    const auto shadows = train_shadows(train_set, spec, sc);
    out.classifier = train_attack(build_attack_dataset(shadows, train_set), ac);
  });
  return out;
}

/// One marked set per requested fraction, or the repeat's generator cluster.
struct MarkedSet {
  double fraction = 0.0;  // the cell key
  IdSet ids;
  json details;
};

std::vector<MarkedSet> marked_sets(const ExperimentConfig& cfg, int rep, const Dataset& train_set) {
  std::vector<MarkedSet> out;
  if (cfg.mark_target == MarkTarget::none) {
    out.push_back({0.0, {}, {{"target", "none"}}});
    return out;
  }
  if (cfg.mark_target == MarkTarget::cluster) {
    if (train_set.clusters.empty()) {
      throw InvalidArgument("mark.target = cluster needs generator cluster labels");
    }
    const int num_clusters = *std::max_element(train_set.clusters.begin(), train_set.clusters.end()) + 1;
    const int cluster = rep % num_clusters;
    IdSet ids;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      if (train_set.clusters[i] == cluster) ids.push_back(train_set.ids[i]);
    }
    ids = make_id_set(std::move(ids));
    const double frac = static_cast<double>(ids.size()) / static_cast<double>(train_set.size());
    out.push_back({frac, std::move(ids), {{"target", "cluster"}, {"cluster", cluster}}});
    return out;
  }
  for (double f : cfg.fractions) {
    const MarkSpec ms{cfg.scenario, f, cfg.kmeans_k, seed_for(cfg, seed_offset::mark, rep)};
    auto res = mark_for_removal(train_set, ms);
    json d = {{"target", "kmeans"}, {"truncated", res.truncated}};
    out.push_back({f, std::move(res.ids), std::move(d)});
  }
  return out;
}

const Dataset& criterion_set(const ExperimentConfig& cfg, const Dataset& train_set,
                             const Dataset& test_set, const Dataset& remaining) {
  switch (cfg.criterion) {
    case CriterionSet::remaining: return remaining;
    case CriterionSet::test: return test_set;
    case CriterionSet::train: return train_set;
  }
  return remaining;
}

double changed_share(const ProbabilityFn& before, const ProbabilityFn& after, const Dataset& data) {
  if (data.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto p = before(data.row(i));
    const auto q = after(data.row(i));
    const auto a = std::max_element(p.begin(), p.end()) - p.begin();
    const auto b = std::max_element(q.begin(), q.end()) - q.begin();
    if (a != b) ++changed;
  }
  return static_cast<double>(changed) / static_cast<double>(data.size());
}

void record_outcome(ReportCell& cell, const ExperimentConfig& cfg, const ProbabilityFn& before,
                    const ProbabilityFn& after, const Dataset& test_set, const Dataset& marked,
                    const AttackPipeline* attack) {
  const double acc_before = accuracy(before, test_set);
  const double acc_after = accuracy(after, test_set);
  cell.metrics["accuracy_before"] = acc_before;
  cell.metrics["accuracy_after"] = acc_after;
  cell.metrics["accuracy_change"] = acc_after - acc_before;
  cell.metrics["within_delta"] = std::abs(acc_after - acc_before) <= cfg.delta ? 1.0 : 0.0;
  if (!marked.empty()) {
    cell.metrics["marked_accuracy_before"] = accuracy(before, marked);
    cell.metrics["marked_accuracy_after"] = accuracy(after, marked);
    cell.metrics["marked_prediction_changed"] = changed_share(before, after, marked);
  }
  if (attack) {
    cell.metrics["attack_before"] = attack_rate(attack->classifier, before, marked);
    cell.metrics["attack_after"] = attack_rate(attack->classifier, after, marked);
    cell.metrics["attack_test_before"] = attack_rate(attack->classifier, before, test_set);
    cell.metrics["attack_test_after"] = attack_rate(attack->classifier, after, test_set);
  }
}

void record_plan(ReportCell& cell, const RemovalDiagnostics& d) {
  const auto& plan = d.plan;
  cell.metrics["lambda_nnz"] = static_cast<double>(plan.lambda.nnz);
  cell.metrics["lambda_objective"] = plan.lambda.objective_value;
  cell.metrics["lambda_iterations"] = plan.lambda.iterations;
  cell.metrics["lambda_attained"] = plan.lambda.attained ? 1.0 : 0.0;
  cell.metrics["psi_marked_sum"] = plan.psi_marked_sum;
  cell.metrics["pool_size"] = static_cast<double>(plan.pool_ids.size());
  cell.metrics["train_grad_norm"] = plan.train_grad_norm;
  cell.metrics["criterion_grad_norm"] = plan.criterion_grad_norm;
  cell.metrics["patch_norm"] = norm(d.patch);
  cell.details["removal"] = d.to_json();
  cell.details["removal"].erase("marked_ids");
}

ReportCell make_cell(std::string method, std::string scenario, double fraction, int repeat) {
  ReportCell c;
  c.method = std::move(method);
  c.scenario = std::move(scenario);
  c.fraction = fraction;
  c.repeat = repeat;
  return c;
}

void fail_cell(ReportCell& cell, const std::exception& e) {
  cell.ok = false;
  cell.error = e.what();
}

/// Runs `body` for one cell, recording any exception as the cell's error.
void run_cell(ReportCell& cell, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    fail_cell(cell, e);
  }
}

RunReport new_report(std::string kind, const ExperimentConfig& cfg) {
  cfg.validate();
  RunReport r;
  r.kind = std::move(kind);
  r.config = cfg.to_json();
  r.environment = environment_fingerprint();
  return r;
}

std::vector<double> planned_fractions(const ExperimentConfig& cfg) {
  if (cfg.mark_target != MarkTarget::kmeans) return {0.0};
  return cfg.fractions;
}

}  // namespace

std::pair<MlpModel, double> train_base_model(const ExperimentConfig& cfg, int repeat) {
  cfg.validate();
  const RepeatData data = prepare_data(cfg, repeat, true);
  const MlpSpec spec = model_spec(cfg, repeat, data.train);
  auto [res, ms] = timed([&] { return train(init_mlp(spec), data.train, train_config(cfg, repeat)); });
  return {std::move(res.model), ms};
}

RunReport run_removal_experiment(const ExperimentConfig& cfg) {
  RunReport report = new_report("removal", cfg);
  const std::string scenario(puma::to_string(cfg.scenario));
  const bool ordered = cfg.scenario == Scenario::ordered;
  const bool need_ledger =
      std::find(cfg.methods.begin(), cfg.methods.end(), Method::amnesiac) != cfg.methods.end();

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    RepeatData data;
    MlpSpec spec;
    std::vector<MarkedSet> sets;
    std::optional<AttackPipeline> attack;
    try {
      data = prepare_data(cfg, rep, true);
      spec = model_spec(cfg, rep, data.train);
      sets = marked_sets(cfg, rep, data.train);
      if (cfg.attack_enabled) attack = build_attack(cfg, rep, data.train, spec);
    } catch (const std::exception& e) {
      for (double f : planned_fractions(cfg)) {
        for (auto m : cfg.methods) {
          ReportCell cell = make_cell(std::string(puma::to_string(m)), scenario, f, rep);
          fail_cell(cell, e);
          report.cells.push_back(std::move(cell));
        }
      }
      continue;
    }

    const TrainConfig tc = train_config(cfg, rep);
    std::optional<TrainResult> shared_base;
    double shared_base_ms = 0.0;
    std::optional<SisaEnsemble> shared_sisa;

    for (const auto& set : sets) {
      const Dataset marked = data.train.select_ids(set.ids);
      const Dataset remaining = data.train.without_ids(set.ids);
      const CriterionSpec crit{LossKind::cross_entropy,
                               &criterion_set(cfg, data.train, data.test, remaining)};

      std::optional<TrainResult> own_base;
      double base_ms = 0.0;
      std::string base_error;
      try {
        if (ordered) {
          TrainConfig otc = tc;
          otc.record_ledger = need_ledger;
          otc.grouped_ids = set.ids;
          auto [res, ms] = timed([&] { return train(init_mlp(spec), data.train, otc); });
          own_base = std::move(res);
          base_ms = ms;
        } else if (!shared_base) {
          TrainConfig rtc = tc;
          rtc.record_ledger = need_ledger;
          auto [res, ms] = timed([&] { return train(init_mlp(spec), data.train, rtc); });
          shared_base = std::move(res);
          shared_base_ms = ms;
        }
      } catch (const std::exception& e) {
        base_error = e.what();
      }
      if (!ordered) base_ms = shared_base_ms;
      const TrainResult* base = ordered ? (own_base ? &*own_base : nullptr)
                                        : (shared_base ? &*shared_base : nullptr);

      for (auto method : cfg.methods) {
        ReportCell cell = make_cell(std::string(puma::to_string(method)), scenario, set.fraction, rep);
        cell.details["marking"] = set.details;
        cell.metrics["marked_count"] = static_cast<double>(set.ids.size());
        cell.metrics["marked_fraction"] =
            static_cast<double>(set.ids.size()) / static_cast<double>(data.train.size());
        if (!base) {
          cell.ok = false;
          cell.error = base_error.empty() ? "base model unavailable" : base_error;
          report.cells.push_back(std::move(cell));
          continue;
        }
        cell.metrics["base_train_ms"] = base_ms;
        if (attack) cell.metrics["attack_train_ms"] = attack->train_ms;
        const AttackPipeline* atk = attack ? &*attack : nullptr;
        const ProbabilityFn before = as_predictor(base->model);

        run_cell(cell, [&] {
          switch (method) {
            case Method::puma: {
              const RemovalConfig rc = removal_config(cfg, rep);
              const LissaConfig lc = lissa_config(cfg, rep);
              auto [res, ms] = timed(
                  [&] { return remove(base->model, data.train, set.ids, crit, rc, lc); });
              cell.metrics["remove_ms"] = ms;
              record_plan(cell, res.diagnostics);
              record_outcome(cell, cfg, before, as_predictor(res.model), data.test, marked, atk);
              break;
            }
            case Method::retrain: {
              auto [res, ms] = timed([&] { return retrain(data.train, set.ids, spec, tc); });
              cell.metrics["remove_ms"] = ms;
              record_outcome(cell, cfg, before, as_predictor(res.model), data.test, marked, atk);
              break;
            }
            case Method::sisa: {
              const std::uint64_t sseed = seed_for(cfg, seed_offset::sisa, rep);
              std::optional<SisaEnsemble> own;
              const SisaEnsemble* ens = nullptr;
              if (ordered) {
                own = sisa_train(data.train, cfg.sisa_shards, spec, tc, sseed, set.ids);
                ens = &*own;
              } else {
                if (!shared_sisa) shared_sisa = sisa_train(data.train, cfg.sisa_shards, spec, tc, sseed);
                ens = &*shared_sisa;
              }
              auto [res, ms] = timed([&] { return sisa_remove(*ens, set.ids); });
              cell.metrics["remove_ms"] = ms;
              cell.metrics["shards_retrained"] = static_cast<double>(res.retrained.size());
              cell.metrics["shards_dropped"] = static_cast<double>(res.dropped.size());
              if (res.ensemble.shards.empty()) throw InvalidArgument("every SISA shard was removed");
              record_outcome(cell, cfg, as_predictor(*ens), as_predictor(res.ensemble), data.test,
                             marked, atk);
              break;
            }
            case Method::amnesiac: {
              auto [res, ms] = timed([&] { return amnesiac_remove(base->model, *base->ledger, set.ids); });
              cell.metrics["remove_ms"] = ms;
              cell.metrics["ledger_entries_removed"] = static_cast<double>(res.removed_entries.size());
              cell.metrics["ledger_entries"] = static_cast<double>(base->ledger->entries.size());
              record_outcome(cell, cfg, before, as_predictor(res.model), data.test, marked, atk);
              break;
            }
          }
        });
        report.cells.push_back(std::move(cell));
      }
    }
  }
  return report;
}

RunReport run_eta_sweep(const ExperimentConfig& cfg) {
  RunReport report = new_report("sweep", cfg);
  const std::string scenario(puma::to_string(cfg.scenario));
  for (int rep = 0; rep < cfg.repeats; ++rep) {
    RepeatData data;
    MarkedSet set;
    std::optional<AttackPipeline> attack;
    TrainResult base;
    RemovalPlan plan;
    Dataset remaining;
    double plan_ms = 0.0;
    std::string error;
    try {
      data = prepare_data(cfg, rep, true);
      const MlpSpec spec = model_spec(cfg, rep, data.train);
      set = marked_sets(cfg, rep, data.train).front();
      TrainConfig tc = train_config(cfg, rep);
      if (cfg.scenario == Scenario::ordered) tc.grouped_ids = set.ids;
      base = train(init_mlp(spec), data.train, tc);
      if (cfg.attack_enabled) attack = build_attack(cfg, rep, data.train, spec);
      remaining = data.train.without_ids(set.ids);
      const CriterionSpec crit{LossKind::cross_entropy,
                               &criterion_set(cfg, data.train, data.test, remaining)};
      std::tie(plan, plan_ms) = timed([&] {
        return plan_removal(base.model, data.train, set.ids, crit, removal_config(cfg, rep),
                            lissa_config(cfg, rep));
      });
    } catch (const std::exception& e) {
      error = e.what();
    }
    const Dataset marked = error.empty() ? data.train.select_ids(set.ids) : Dataset{};
    for (double eta : cfg.eta_grid) {
      ReportCell cell = make_cell("puma", scenario, set.fraction, rep);
      cell.metrics["eta"] = eta;
      if (!error.empty()) {
        cell.ok = false;
        cell.error = error;
        report.cells.push_back(std::move(cell));
        continue;
      }
      cell.details["marking"] = set.details;
      cell.metrics["marked_count"] = static_cast<double>(set.ids.size());
      cell.metrics["plan_ms"] = plan_ms;
      run_cell(cell, [&] {
        const CriterionSpec crit{LossKind::cross_entropy,
                                 &criterion_set(cfg, data.train, data.test, remaining)};
        auto [res, ms] = timed([&] { return apply_removal(base.model, plan, eta, crit); });
        cell.metrics["apply_ms"] = ms;
        cell.metrics["patch_norm"] = norm(res.diagnostics.patch);
        cell.metrics["identical"] = res.model.params == base.model.params ? 1.0 : 0.0;
        record_outcome(cell, cfg, as_predictor(base.model), as_predictor(res.model), data.test,
                       marked, attack ? &*attack : nullptr);
      });
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

namespace {

std::size_t top_k(double fraction, std::size_t n) {
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n))),
                                 1, n);
}

std::vector<SampleId> ascending_ranking(const std::vector<InfluenceScore>& scores) {
  std::vector<InfluenceScore> s = scores;
  std::stable_sort(s.begin(), s.end(),
                   [](const InfluenceScore& a, const InfluenceScore& b) { return a.psi < b.psi; });
  std::vector<SampleId> out;
  out.reserve(s.size());
  for (const auto& x : s) out.push_back(x.id);
  return out;
}

void record_ranking(ReportCell& cell, const ExperimentConfig& cfg,
                    const std::vector<SampleId>& ranking, const IdSet& flipped) {
  cell.metrics["flipped_count"] = static_cast<double>(flipped.size());
  if (flipped.empty()) return;
  const auto grid = uniform_grid(cfg.grid_step);
  const auto curve = discovery_curve(ranking, flipped, grid);
  const std::vector<double> at{cfg.inspect_fraction};
  cell.metrics["recall_at_inspect"] = discovery_curve(ranking, flipped, at).recall[0];
  cell.details["curve"] = {{"fractions", curve.fractions}, {"recall", curve.recall}};
}

}  // namespace

RunReport run_debug_experiment(const ExperimentConfig& cfg) {
  RunReport report = new_report("debug", cfg);
  std::vector<std::string> methods = {"puma", "ntk", "random"};
  if (cfg.per_point_ihvp) methods.push_back("ntk_ihvp");

  for (int rep = 0; rep < cfg.repeats; ++rep) {
    RepeatData data;
    TrainResult base;
    double base_ms = 0.0;
    std::string error;
    try {
      data = prepare_data(cfg, rep, true);
      const MlpSpec spec = model_spec(cfg, rep, data.train);
      std::tie(base, base_ms) =
          timed([&] { return train(init_mlp(spec), data.train, train_config(cfg, rep)); });
    } catch (const std::exception& e) {
      error = e.what();
    }
    const Dataset& eval = cfg.criterion == CriterionSet::test ? data.test : data.train;
    const CriterionSpec crit{LossKind::cross_entropy, &eval};
    const LissaConfig lc = lissa_config(cfg, rep);

    for (const auto& method : methods) {
      ReportCell cell = make_cell(method, "flip", cfg.data.flip_fraction, rep);
      if (!error.empty()) {
        cell.ok = false;
        cell.error = error;
        report.cells.push_back(std::move(cell));
        continue;
      }
      cell.metrics["base_train_ms"] = base_ms;
      cell.metrics["train_accuracy"] = accuracy(base.model, data.train);
      cell.metrics["test_accuracy"] = accuracy(base.model, data.test);
      run_cell(cell, [&] {
        std::vector<SampleId> ranking;
        if (method == "puma") {
          const std::size_t k = top_k(cfg.k_fraction, data.train.size());
          auto [rep_, ms] = timed([&] { return debug_mislabels(base.model, data.train, crit, k, lc); });
          cell.metrics["rank_ms"] = ms;
          cell.metrics["k"] = static_cast<double>(k);
          cell.metrics["suspects"] = static_cast<double>(rep_.suspects.size());
          cell.metrics["guard_triggered"] = rep_.guard_triggered ? 1.0 : 0.0;
          std::size_t hits = 0;
          for (auto id : rep_.suspects) hits += contains(data.flipped, id) ? 1 : 0;
          cell.metrics["suspects_flipped"] = static_cast<double>(hits);
          ranking = std::move(rep_.ranking);
        } else if (method == "ntk") {
          auto [r, ms] = timed([&] {
            return ascending_ranking(ntk_scores(base.model, criterion_grad(base.model, crit), data.train));
          });
          cell.metrics["rank_ms"] = ms;
          ranking = std::move(r);
        } else if (method == "random") {
          ranking = data.train.ids;
          CounterRng rng(seed_for(cfg, seed_offset::ranking, rep));
          shuffle(ranking, rng);
        } else {
          auto [r, ms] = timed([&] {
            const ParamVector cg = criterion_grad(base.model, crit);
            std::vector<InfluenceScore> scores;
            scores.reserve(data.train.size());
            for (std::size_t i = 0; i < data.train.size(); ++i) {
              const auto g = per_sample_grad(base.model, data.train.row(i), data.train.labels[i],
                                             LossKind::cross_entropy);
              scores.push_back({data.train.ids[i], dot(cg, inverse_hvp(base.model, data.train, g, lc))});
            }
            return ascending_ranking(scores);
          });
          cell.metrics["rank_ms"] = ms;
          ranking = std::move(r);
        }
        record_ranking(cell, cfg, ranking, data.flipped);
      });
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

RunReport run_calibration_experiment(const ExperimentConfig& cfg) {
  RunReport report = new_report("calibration", cfg);
  for (int rep = 0; rep < cfg.repeats; ++rep) {
    ReportCell cell = make_cell("calibration_patch", "flip", cfg.data.flip_fraction, rep);
    run_cell(cell, [&] {
      const RepeatData data = prepare_data(cfg, rep, true);
      const MlpSpec spec = model_spec(cfg, rep, data.train);
      const auto base = train(init_mlp(spec), data.train, train_config(cfg, rep));
      const std::size_t k = top_k(cfg.calibration_k_fraction, data.train.size());
      auto [res, ms] = timed([&] {
        return calibration_patch(base.model, data.train, lissa_config(cfg, rep), cfg.calibration_eta,
                                 k, removal_config(cfg, rep));
      });
      cell.metrics["patch_ms"] = ms;
      cell.metrics["k"] = static_cast<double>(k);
      cell.metrics["eta"] = cfg.calibration_eta;
      cell.metrics["applied"] = res.applied ? 1.0 : 0.0;
      cell.metrics["ece_before"] = ece(base.model, data.train).ece;
      cell.metrics["ece_after"] = ece(res.model, data.train).ece;
      cell.metrics["test_ece_before"] = ece(base.model, data.test).ece;
      cell.metrics["test_ece_after"] = ece(res.model, data.test).ece;
      cell.metrics["surrogate_before"] = mean_loss(base.model, data.train, LossKind::calibration_surrogate);
      cell.metrics["surrogate_after"] = mean_loss(res.model, data.train, LossKind::calibration_surrogate);
      cell.metrics["accuracy_before"] = accuracy(base.model, data.test);
      cell.metrics["accuracy_after"] = accuracy(res.model, data.test);
      for (const auto& [name, ids] : res.report.categories) {
        cell.metrics[name] = static_cast<double>(ids.size());
      }
      cell.details["notice"] = res.notice;
      if (res.removal) {
        cell.details["removal"] = res.removal->to_json();
        cell.details["removal"].erase("marked_ids");
      }
    });
    report.cells.push_back(std::move(cell));
  }
  return report;
}

}  // namespace puma
