#include "cracknet/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "cracknet/io.hpp"

namespace cracknet {

namespace {
std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size()) {
    throw ConfigError("key '" + key + "': '" + v + "' is not an integer");
  }
  return out;
}

double to_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("key '" + key + "': '" + v + "' is not a number");
  }
}

std::vector<int> to_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  if (v.empty()) return out;
  for (const auto& part : io::split_csv_line(v)) out.push_back(static_cast<int>(to_int(key, trim(part))));
  return out;
}

std::string list_str(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = {
      "arch",   "scale",       "height",      "width",  "embed_dim", "depths",       "heads",
      "window", "lgg_window",  "patch",       "memory_units", "mlp_ratio", "stem_widths", "lr",
      "weight_decay", "beta1", "beta2",       "eps",    "batch_size", "epochs",      "loss",
      "seed",   "eval_every",  "threshold",   "split_ratio"};
  return keys;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (!(split_ratio > 0 && split_ratio < 1)) throw ConfigError("split_ratio must lie in (0,1)");
}

RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) throw ConfigError("unknown config key '" + key + "'");
    if (kv.count(key)) throw ConfigError("config key '" + key + "' given twice");
    kv[key] = value;
  }

  RunConfig rc;
  Arch arch = kv.count("arch") ? parse_arch(kv["arch"]) : Arch::MtUNet;
  Scale scale = Scale::Toy;
  if (kv.count("scale")) {
    if (kv["scale"] == "toy") scale = Scale::Toy;
    else if (kv["scale"] == "full") scale = Scale::Full;
    else throw ConfigError("key 'scale': expected toy or full, got '" + kv["scale"] + "'");
  }
  rc.model = ModelConfig::preset(arch, scale);

  auto& m = rc.model;
  auto& t = rc.train;
  for (const auto& [key, value] : kv) {
    if (key == "arch" || key == "scale") continue;
    if (key == "height") m.height = static_cast<int>(to_int(key, value));
    else if (key == "width") m.width = static_cast<int>(to_int(key, value));
    else if (key == "embed_dim") m.embed_dim = static_cast<int>(to_int(key, value));
    else if (key == "depths") m.depths = to_list(key, value);
    else if (key == "heads") m.heads = to_list(key, value);
    else if (key == "window") m.window = static_cast<int>(to_int(key, value));
    else if (key == "lgg_window") m.lgg_window = static_cast<int>(to_int(key, value));
    else if (key == "patch") m.patch = static_cast<int>(to_int(key, value));
    else if (key == "memory_units") m.memory_units = static_cast<int>(to_int(key, value));
    else if (key == "mlp_ratio") m.mlp_ratio = static_cast<int>(to_int(key, value));
    else if (key == "stem_widths") m.stem_widths = to_list(key, value);
    else if (key == "lr") t.lr = to_real(key, value);
    else if (key == "weight_decay") t.weight_decay = to_real(key, value);
    else if (key == "beta1") t.beta1 = to_real(key, value);
    else if (key == "beta2") t.beta2 = to_real(key, value);
    else if (key == "eps") t.eps = to_real(key, value);
    else if (key == "batch_size") t.batch_size = static_cast<int>(to_int(key, value));
    else if (key == "epochs") t.epochs = to_int(key, value);
    else if (key == "loss") t.loss = losses::LossSpec::of(losses::parse_loss(value));
    else if (key == "seed") t.seed = static_cast<std::uint64_t>(to_int(key, value));
    else if (key == "eval_every") t.eval_every = static_cast<int>(to_int(key, value));
    else if (key == "threshold") t.threshold = to_real(key, value);
    else if (key == "split_ratio") rc.split_ratio = to_real(key, value);
  }
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(io::read_file(path)); }

std::string RunConfig::to_text() const {
  const auto& m = model;
  const auto& t = train;
  std::ostringstream o;
  o << "arch = " << arch_name(m.arch) << "\n"
    << "height = " << m.height << "\n"
    << "width = " << m.width << "\n"
    << "embed_dim = " << m.embed_dim << "\n"
    << "depths = " << list_str(m.depths) << "\n"
    << "heads = " << list_str(m.heads) << "\n"
    << "window = " << m.window << "\n"
    << "lgg_window = " << m.lgg_window << "\n"
    << "patch = " << m.patch << "\n"
    << "memory_units = " << m.memory_units << "\n"
    << "mlp_ratio = " << m.mlp_ratio << "\n"
    << "stem_widths = " << list_str(m.stem_widths) << "\n"
    << "lr = " << real_str(t.lr) << "\n"
    << "weight_decay = " << real_str(t.weight_decay) << "\n"
    << "beta1 = " << real_str(t.beta1) << "\n"
    << "beta2 = " << real_str(t.beta2) << "\n"
    << "eps = " << real_str(t.eps) << "\n"
    << "batch_size = " << t.batch_size << "\n"
    << "epochs = " << t.epochs << "\n"
    << "loss = " << losses::loss_name(t.loss.kind) << "\n"
    << "seed = " << t.seed << "\n"
    << "eval_every = " << t.eval_every << "\n"
    << "threshold = " << real_str(t.threshold) << "\n"
    << "split_ratio = " << real_str(split_ratio) << "\n";
  return o.str();
}

}  // namespace cracknet
