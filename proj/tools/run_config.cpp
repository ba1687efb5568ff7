#include "run_config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <functional>
#include <sstream>

namespace mambaclip::cli {

namespace {

namespace pt = boost::property_tree;

struct Field {
  std::string section;
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

template <class T>
T parse_number(const std::string& text) {
  const std::string s = trim(text);
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <class T>
std::string join(const std::vector<T>& v, const std::string& sep, const std::function<std::string(const T&)>& f) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + f(v[i]);
  return out;
}

Field size_field(std::string section, std::string key, std::size_t RunConfig::*member) {
  return {section, key, [member](RunConfig& c, const std::string& v) { c.*member = parse_number<std::size_t>(v); },
          [member](const RunConfig& c) { return std::to_string(c.*member); }};
}

Field double_field(std::string section, std::string key, double RunConfig::*member) {
  return {section, key, [member](RunConfig& c, const std::string& v) { c.*member = parse_number<double>(v); },
          [member](const RunConfig& c) { return format_double(c.*member); }};
}

Field string_field(std::string section, std::string key, std::string RunConfig::*member) {
  return {section, key, [member](RunConfig& c, const std::string& v) { c.*member = trim(v); },
          [member](const RunConfig& c) { return c.*member; }};
}

Field path_field(std::string section, std::string key, std::filesystem::path RunConfig::*member) {
  return {section, key, [member](RunConfig& c, const std::string& v) { c.*member = trim(v); },
          [member](const RunConfig& c) { return (c.*member).string(); }};
}

template <class M>
Field model_field(std::string key, M ClipConfig::*member) {
  return {"model", key,
          [member](RunConfig& c, const std::string& v) {
            c.train.model.*member = parse_number<M>(v);
            c.model_set = true;
          },
          [member](const RunConfig& c) { return std::to_string(c.train.model.*member); }};
}

Field model_list_field(std::string key, std::vector<std::size_t> ClipConfig::*member) {
  return {"model", key,
          [member](RunConfig& c, const std::string& v) {
            std::vector<std::size_t> out;
            for (const auto& part : split(v, ',')) out.push_back(parse_number<std::size_t>(part));
            c.train.model.*member = out;
            c.model_set = true;
          },
          [member](const RunConfig& c) {
            return join<std::size_t>(c.train.model.*member, ",", [](const std::size_t& x) { return std::to_string(x); });
          }};
}

template <class M>
Field train_field(std::string key, M TrainConfig::*member) {
  return {"train", key, [member](RunConfig& c, const std::string& v) { c.train.*member = parse_number<M>(v); },
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<M>) {
              return format_double(c.train.*member);
            } else {
              return std::to_string(c.train.*member);
            }
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(string_field("run", "command", &RunConfig::command));
    f.push_back({"run", "seed",
                 [](RunConfig& c, const std::string& v) {
                   c.seed = parse_number<std::uint64_t>(v);
                   c.train.seed = c.seed;
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back(path_field("run", "out", &RunConfig::out));
    f.push_back(path_field("run", "checkpoint", &RunConfig::checkpoint));
    f.push_back(path_field("run", "manifest", &RunConfig::manifest));
    f.push_back(string_field("run", "model_id", &RunConfig::model_id));

    f.push_back(model_field("image_size", &ClipConfig::image_size));
    f.push_back(model_field("patch_size", &ClipConfig::patch_size));
    f.push_back(model_list_field("stage_depths", &ClipConfig::stage_depths));
    f.push_back(model_list_field("stage_dims", &ClipConfig::stage_dims));
    f.push_back(model_field("state_dim", &ClipConfig::state_dim));
    f.push_back(model_field("expand", &ClipConfig::expand));
    f.push_back(model_field("conv_width", &ClipConfig::conv_width));
    f.push_back(model_field("embed_dim", &ClipConfig::embed_dim));
    f.push_back(model_field("text_dim", &ClipConfig::text_dim));
    f.push_back(model_field("text_depth", &ClipConfig::text_depth));
    f.push_back(model_field("context_len", &ClipConfig::context_len));
    f.push_back({"model", "text_tower",
                 [](RunConfig& c, const std::string& v) {
                   c.train.model.text_tower = parse_text_tower(trim(v));
                   c.model_set = true;
                 },
                 [](const RunConfig& c) { return std::string(text_tower_name(c.train.model.text_tower)); }});
    f.push_back({"model", "scan_mode",
                 [](RunConfig& c, const std::string& v) {
                   c.train.model.scan_mode = parse_scan_mode(trim(v));
                   c.model_set = true;
                 },
                 [](const RunConfig& c) { return std::string(scan_mode_name(c.train.model.scan_mode)); }});

    f.push_back(train_field("batch_size", &TrainConfig::batch_size));
    f.push_back(train_field("total_steps", &TrainConfig::total_steps));
    f.push_back(train_field("warmup_steps", &TrainConfig::warmup_steps));
    f.push_back(train_field("learning_rate", &TrainConfig::learning_rate));
    f.push_back(train_field("weight_decay", &TrainConfig::weight_decay));
    f.push_back(train_field("beta1", &TrainConfig::beta1));
    f.push_back(train_field("beta2", &TrainConfig::beta2));
    f.push_back(train_field("eps", &TrainConfig::eps));
    f.push_back({"train", "precision",
                 [](RunConfig& c, const std::string& v) { c.train.precision = parse_precision(trim(v)); },
                 [](const RunConfig& c) { return std::string(precision_name(c.train.precision)); }});

    f.push_back(string_field("zeroshot", "dataset", &RunConfig::dataset));
    f.push_back({"zeroshot", "templates",
                 [](RunConfig& c, const std::string& v) { c.templates = split(v, '|'); },
                 [](const RunConfig& c) {
                   return join<std::string>(c.templates, " | ", [](const std::string& s) { return s; });
                 }});
    f.push_back(size_field("zeroshot", "batch", &RunConfig::eval_batch));

    f.push_back(string_field("ood", "kind", &RunConfig::ood_kind));
    f.push_back({"ood", "levels",
                 [](RunConfig& c, const std::string& v) {
                   c.ood_levels.clear();
                   for (const auto& part : split(v, ',')) c.ood_levels.push_back(parse_number<double>(part));
                 },
                 [](const RunConfig& c) { return join<double>(c.ood_levels, ",", format_double); }});

    f.push_back(size_field("hessian", "batch_size", &RunConfig::hessian_batch_size));
    f.push_back(size_field("hessian", "num_samples", &RunConfig::hessian_samples));
    f.push_back(size_field("hessian", "k", &RunConfig::hessian_k));
    f.push_back(size_field("hessian", "iterations", &RunConfig::hessian_iterations));
    f.push_back(double_field("hessian", "tolerance", &RunConfig::hessian_tolerance));
    f.push_back(double_field("hessian", "loss_scale", &RunConfig::hessian_loss_scale));
    f.push_back(size_field("hessian", "bins", &RunConfig::hessian_bins));

    f.push_back(path_field("perturb", "input", &RunConfig::perturb_input));
    f.push_back(string_field("perturb", "kind", &RunConfig::perturb_kind));
    f.push_back(double_field("perturb", "level", &RunConfig::perturb_level));

    f.push_back(path_field("summarize", "table", &RunConfig::table));
    f.push_back(size_field("synthetic", "image_size", &RunConfig::synthetic_image_size));
    return f;
  }();
  return all;
}

void apply_tree(RunConfig& cfg, const pt::ptree& tree) {
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) {
      throw ConfigError("key '" + section + "' must be inside a [section]");
    }
    for (const auto& [key, value] : body) set_value(cfg, section, key, value.data());
  }
}

}  // namespace

void set_value(RunConfig& cfg, const std::string& section, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) {
      try {
        f.set(cfg, value);
      } catch (const std::exception& e) {
        throw ConfigError(section + "." + key + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + section + "." + key + "'");
}

void apply_ini_file(RunConfig& cfg, const std::filesystem::path& path) {
  pt::ptree tree;
  try {
    pt::read_ini(path.string(), tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  apply_tree(cfg, tree);
}

void apply_ini_text(RunConfig& cfg, const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(e.what());
  }
  apply_tree(cfg, tree);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  const auto dot = assignment.find('.');
  if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
    throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  }
  set_value(cfg, trim(assignment.substr(0, dot)), trim(assignment.substr(dot + 1, eq - dot - 1)),
            assignment.substr(eq + 1));
}

std::string echo(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out << (section.empty() ? "" : "\n") << '[' << f.section << "]\n";
      section = f.section;
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

const std::filesystem::path& require_path(const std::filesystem::path& p, const std::string& key) {
  if (p.empty()) throw ConfigError("missing required setting '" + key + "'");
  return p;
}

}  // namespace mambaclip::cli
