#include "vqvae/config.h"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace vqvae {
namespace {

struct Field {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string_view Trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T ParseNumber(const std::string& key, const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
  }
  return v;
}

bool ParseBool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + text + "'");
}

template <typename T>
Field IntField(std::string_view name, ConfigGroup group, std::string_view help,
               std::function<T&(RunConfig&)> ref) {
  return {{name, group, help},
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, name](RunConfig& c, const std::string& v) {
            ref(c) = ParseNumber<T>(std::string(name), v);
          }};
}

Field FloatField(std::string_view name, ConfigGroup group, std::string_view help,
                 std::function<float&(RunConfig&)> ref) {
  return {{name, group, help},
          [ref](const RunConfig& c) { return FormatFloat(ref(const_cast<RunConfig&>(c))); },
          [ref, name](RunConfig& c, const std::string& v) {
            ref(c) = ParseNumber<float>(std::string(name), v);
          }};
}

const std::vector<Field>& Fields() {
  using G = ConfigGroup;
  static const std::vector<Field> fields = {
      IntField<int64_t>("in_channels", G::kModel, "image channels (1 or 3)",
                        [](RunConfig& c) -> int64_t& { return c.model.in_channels; }),
      IntField<int64_t>("height", G::kModel, "image height",
                        [](RunConfig& c) -> int64_t& { return c.model.height; }),
      IntField<int64_t>("width", G::kModel, "image width",
                        [](RunConfig& c) -> int64_t& { return c.model.width; }),
      IntField<int64_t>("hidden", G::kModel, "hidden channels of encoder and decoder",
                        [](RunConfig& c) -> int64_t& { return c.model.hidden; }),
      IntField<int64_t>("stages", G::kModel, "stride-2 down/up-sampling stages",
                        [](RunConfig& c) -> int64_t& { return c.model.stages; }),
      IntField<int64_t>("res_blocks", G::kModel, "residual blocks in encoder and decoder",
                        [](RunConfig& c) -> int64_t& { return c.model.res_blocks; }),
      IntField<int64_t>("embedding_dim", G::kModel, "codebook vector size D",
                        [](RunConfig& c) -> int64_t& { return c.model.embedding_dim; }),
      IntField<int64_t>("num_codes", G::kModel, "codebook size K",
                        [](RunConfig& c) -> int64_t& { return c.model.num_codes; }),
      FloatField("beta", G::kModel, "commitment weight",
                 [](RunConfig& c) -> float& { return c.model.beta; }),
      FloatField("gamma", G::kModel, "EMA decay",
                 [](RunConfig& c) -> float& { return c.model.gamma; }),
      {{"ema", G::kModel, "maintain the codebook by EMA instead of the codebook loss"},
       [](const RunConfig& c) { return std::string(c.model.ema ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.model.ema = ParseBool("ema", v); }},
      {{"likelihood", G::kModel, "decoder output distribution: gaussian or logistic"},
       [](const RunConfig& c) { return std::string(LikelihoodName(c.model.likelihood)); },
       [](RunConfig& c, const std::string& v) { c.model.likelihood = ParseLikelihood(v); }},

      IntField<int64_t>("prior_height", G::kPrior, "latent grid height (taken from the VQ-VAE)",
                        [](RunConfig& c) -> int64_t& { return c.prior.height; }),
      IntField<int64_t>("prior_width", G::kPrior, "latent grid width (taken from the VQ-VAE)",
                        [](RunConfig& c) -> int64_t& { return c.prior.width; }),
      IntField<int64_t>("prior_num_codes", G::kPrior, "categories K (taken from the VQ-VAE)",
                        [](RunConfig& c) -> int64_t& { return c.prior.num_codes; }),
      IntField<int64_t>("prior_layers", G::kPrior, "masked convolution layers",
                        [](RunConfig& c) -> int64_t& { return c.prior.layers; }),
      IntField<int64_t>("prior_hidden", G::kPrior, "prior hidden channels",
                        [](RunConfig& c) -> int64_t& { return c.prior.hidden; }),
      IntField<int64_t>("prior_embed_dim", G::kPrior, "prior input embedding size",
                        [](RunConfig& c) -> int64_t& { return c.prior.embed_dim; }),
      IntField<int64_t>("prior_kernel", G::kPrior, "masked kernel size (odd)",
                        [](RunConfig& c) -> int64_t& { return c.prior.kernel; }),

      IntField<int64_t>("batch_size", G::kTrain, "minibatch size",
                        [](RunConfig& c) -> int64_t& { return c.train.batch_size; }),
      IntField<int64_t>("steps", G::kTrain, "total optimizer steps",
                        [](RunConfig& c) -> int64_t& { return c.train.steps; }),
      IntField<int64_t>("eval_interval", G::kTrain, "steps between evaluations (0 = never)",
                        [](RunConfig& c) -> int64_t& { return c.train.eval_interval; }),
      IntField<int64_t>("checkpoint_interval", G::kTrain,
                        "steps between checkpoints (0 = final only)",
                        [](RunConfig& c) -> int64_t& { return c.train.checkpoint_interval; }),
      IntField<uint64_t>("seed", G::kTrain, "seed for initialization and data order",
                         [](RunConfig& c) -> uint64_t& { return c.train.seed; }),
      FloatField("lr", G::kTrain, "Adam learning rate",
                 [](RunConfig& c) -> float& { return c.train.adam.lr; }),
      FloatField("adam_beta1", G::kTrain, "Adam first-moment decay",
                 [](RunConfig& c) -> float& { return c.train.adam.beta1; }),
      FloatField("adam_beta2", G::kTrain, "Adam second-moment decay",
                 [](RunConfig& c) -> float& { return c.train.adam.beta2; }),
      FloatField("adam_eps", G::kTrain, "Adam epsilon",
                 [](RunConfig& c) -> float& { return c.train.adam.eps; }),
  };
  return fields;
}

}  // namespace

std::string FormatFloat(float v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

const std::vector<ConfigKey>& ConfigKeys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const Field& f : Fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

RunConfig ApplyConfig(RunConfig base, const KeyValues& values) {
  for (const auto& [key, value] : values) {
    const Field* field = nullptr;
    for (const Field& f : Fields()) {
      if (f.key.name == key) field = &f;
    }
    if (field == nullptr) throw ConfigError("unknown config key '" + key + "'");
    field->set(base, value);
  }
  return base;
}

KeyValues ParseKeyValues(std::string_view text, std::string_view origin) {
  KeyValues out;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view body = line;
    if (const auto hash = body.find('#'); hash != std::string_view::npos) body = body.substr(0, hash);
    body = Trim(body);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    const std::string where = std::string(origin) + ":" + std::to_string(line_no);
    if (eq == std::string_view::npos) throw ConfigError(where + ": expected key = value");
    const std::string key(Trim(body.substr(0, eq)));
    const std::string value(Trim(body.substr(eq + 1)));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (!out.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return out;
}

RunConfig LoadConfigFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return ApplyConfig(RunConfig{}, ParseKeyValues(buf.str(), path.string()));
}

KeyValues FormatConfig(const RunConfig& config, const std::vector<ConfigGroup>& groups) {
  KeyValues out;
  for (const Field& f : Fields()) {
    for (ConfigGroup g : groups) {
      if (f.key.group == g) out.emplace(std::string(f.key.name), f.get(config));
    }
  }
  return out;
}

std::string ConfigHelp() {
  const RunConfig defaults;
  std::string out;
  for (const Field& f : Fields()) {
    out += "  " + std::string(f.key.name) + " (default " + f.get(defaults) + "): " +
           std::string(f.key.help) + "\n";
  }
  return out;
}

}  // namespace vqvae
