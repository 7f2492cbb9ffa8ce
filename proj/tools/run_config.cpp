#include "run_config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

namespace ospd::cli {

namespace {

using nlohmann::json;
using Setter = std::function<void(const json&)>;

template <typename T>
Setter into(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

void apply_section(const json& section, const std::string& name, const std::map<std::string, Setter>& keys) {
  if (!section.is_object()) throw ConfigError("config: section '" + name + "' must be an object");
  for (const auto& [key, value] : section.items()) {
    const auto it = keys.find(key);
    if (it == keys.end()) throw ConfigError("config: unknown key '" + name + "." + key + "'");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + name + "." + key + "': " + e.what());
    }
  }
}

}  // namespace

void apply_config_text(RunConfig& config, const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");

  auto& m = config.model;
  auto& o = config.obfuscation;
  auto& b = config.bench;
  const std::map<std::string, Setter> model_keys{
      {"n_layers", into(m.n_layers)},   {"n_heads", into(m.n_heads)}, {"d_model", into(m.d_model)},
      {"head_dim", into(m.head_dim)},   {"max_seq", into(m.max_seq)}, {"seed", into(m.seed)},
      {"vocab_size", [&](const json& v) {
         m.vocab_size = v.get<int>();
         config.model_vocab_set = true;
       }}};
  const std::map<std::string, Setter> obf_keys{{"epsilon", into(o.epsilon)},
                                               {"lambda_max", into(o.lambda_max)},
                                               {"lambda_min", into(o.lambda_min)},
                                               {"temperature", into(o.temperature)},
                                               {"prf_key", into(o.prf_key)}};
  const std::map<std::string, Setter> demo_keys{{"prompt", into(config.demo.prompt)},
                                                {"max_tokens", into(config.demo.max_tokens)},
                                                {"tag_rules", into(config.demo.tag_rules)}};
  const std::map<std::string, Setter> bench_keys{
      {"modes", into(b.modes)},
      {"users", into(b.users)},
      {"lambdas", into(b.lambdas)},
      {"lambda_users", into(b.lambda_users)},
      {"in_tokens", into(b.base.in_tokens)},
      {"out_tokens", into(b.base.out_tokens)},
      {"repetitions", into(b.base.repetitions)},
      {"transport", [&](const json& v) {
         const auto t = v.get<std::string>();
         if (t != "in_process" && t != "tcp") throw ConfigError("config: bench.transport must be in_process or tcp");
         b.base.transport = t == "tcp" ? Transport::tcp : Transport::in_process;
       }}};

  for (const auto& [section, value] : doc.items()) {
    if (section == "model") {
      apply_section(value, section, model_keys);
    } else if (section == "obfuscation") {
      apply_section(value, section, obf_keys);
    } else if (section == "demo") {
      apply_section(value, section, demo_keys);
    } else if (section == "bench") {
      apply_section(value, section, bench_keys);
    } else {
      throw ConfigError("config: unknown section '" + section + "'");
    }
  }
  for (const auto& mode : b.modes) parse_mode(mode);
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_config_text(config, text.str());
}

std::vector<BenchConfig> sweep_configs(const RunConfig& config) {
  BenchConfig base = config.bench.base;
  base.model = config.model;
  base.seed = config.seed;
  std::vector<BenchConfig> out;
  for (const auto& name : config.bench.modes) {
    for (int m : config.bench.users) {
      BenchConfig c = base;
      c.mode = parse_mode(name);
      c.users = m;
      out.push_back(c);
    }
  }
  for (int lambda : config.bench.lambdas) {
    BenchConfig c = base;
    c.mode = BenchMode::spd;
    c.users = config.bench.lambda_users;
    c.lambda = lambda;
    out.push_back(c);
  }
  return out;
}

}  // namespace ospd::cli
