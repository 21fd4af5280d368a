#include "vqvae/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vqvae {
namespace {

namespace fs = std::filesystem;

class Writer {
 public:
  void U32(uint32_t v) { Int(v, 4); }
  void U64(uint64_t v) { Int(v, 8); }
  void Str(std::string_view s) {
    U32(static_cast<uint32_t>(s.size()));
    out_.append(s);
  }
  void F32(float f) { U32(std::bit_cast<uint32_t>(f)); }
  void Raw(std::string_view s) { out_.append(s); }
  std::string Take() { return std::move(out_); }

 private:
  void Int(uint64_t v, int bytes) {
    for (int i = 0; i < bytes; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string_view origin) : b_(bytes), origin_(origin) {}

  uint32_t U32() { return static_cast<uint32_t>(Int(4)); }
  uint64_t U64() { return Int(8); }
  std::string Str() { return std::string(Bytes(U32())); }
  float F32() { return std::bit_cast<float>(U32()); }
  std::string_view Bytes(uint64_t n) {
    Need(n);
    std::string_view s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool Done() const { return pos_ == b_.size(); }
  [[noreturn]] void Fail(const std::string& what) const {
    throw DataError(std::string(origin_) + ": " + what);
  }

 private:
  void Need(uint64_t n) const {
    if (n > b_.size() - pos_) Fail("truncated checkpoint");
  }
  uint64_t Int(int bytes) {
    Need(static_cast<uint64_t>(bytes));
    uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    }
    pos_ += static_cast<size_t>(bytes);
    return v;
  }
  std::string_view b_;
  std::string_view origin_;
  size_t pos_ = 0;
};

const std::string& Meta(const Checkpoint& c, const std::string& key) {
  auto it = c.meta.find(key);
  if (it == c.meta.end()) throw DataError("checkpoint lacks meta entry '" + key + "'");
  return it->second;
}

int64_t MetaInt(const Checkpoint& c, const std::string& key) {
  const std::string& s = Meta(c, key);
  try {
    size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError("checkpoint meta '" + key + "' is not an integer: '" + s + "'");
  }
}

const Tensor& Get(const Checkpoint& c, const std::string& name) {
  auto it = c.tensors.find(name);
  if (it == c.tensors.end()) throw DataError("checkpoint lacks tensor '" + name + "'");
  return it->second;
}

const std::string& Blob(const Checkpoint& c, const std::string& name) {
  auto it = c.blobs.find(name);
  if (it == c.blobs.end()) throw DataError("checkpoint lacks blob '" + name + "'");
  return it->second;
}

Tensor Plain(const Tensor& t) { return Tensor(t.shape, t.data); }

// Restores |dst| from |src| keeping dst's requires_grad flag; shapes must agree.
void Assign(Tensor& dst, const Tensor& src, const std::string& name) {
  if (dst.shape != src.shape) {
    throw DataError("checkpoint tensor '" + name + "' has shape " + ShapeToString(src.shape) +
                    ", model expects " + ShapeToString(dst.shape));
  }
  dst.data = src.data;
  dst.grad.clear();
}

void PutCommon(Checkpoint& c, const RunConfig& config, std::vector<ConfigGroup> groups,
               const TrainConfig& train, const Adam& adam, const BatchSampler& sampler,
               const std::map<std::string, const Tensor*>& optimized) {
  RunConfig rc = config;
  rc.train = train;
  for (auto& [k, v] : FormatConfig(rc, groups)) c.meta.emplace("config." + k, v);
  c.meta["adam.step"] = std::to_string(adam.step());
  c.meta["sampler.size"] = std::to_string(sampler.size);
  c.meta["sampler.batch"] = std::to_string(sampler.batch);
  c.meta["sampler.cursor"] = std::to_string(sampler.cursor);
  for (const auto& [name, mo] : adam.moments()) {
    auto it = optimized.find(name);
    if (it == optimized.end()) throw Error("adam state for unknown tensor '" + name + "'");
    c.tensors.emplace("adam.m/" + name, Tensor(it->second->shape, mo.m));
    c.tensors.emplace("adam.v/" + name, Tensor(it->second->shape, mo.v));
  }
  c.blobs["sampler.rng"] = sampler.rng.SaveState();
  std::string order(sampler.order.size() * 8, '\0');
  for (size_t i = 0; i < sampler.order.size(); ++i) {
    const uint64_t v = static_cast<uint64_t>(sampler.order[i]);
    for (int b = 0; b < 8; ++b) order[i * 8 + static_cast<size_t>(b)] = static_cast<char>((v >> (8 * b)) & 0xff);
  }
  c.blobs["sampler.order"] = std::move(order);
}

RunConfig ConfigFromMeta(const Checkpoint& c) {
  KeyValues kv;
  for (const auto& [k, v] : c.meta) {
    if (k.rfind("config.", 0) == 0) kv.emplace(k.substr(7), v);
  }
  try {
    return ApplyConfig(RunConfig{}, kv);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint carries an invalid configuration: ") + e.what());
  }
}

void RestoreCommon(const Checkpoint& c, const std::map<std::string, const Tensor*>& optimized,
                   Adam& adam, BatchSampler& sampler) {
  std::map<std::string, Adam::Moments> moments;
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind("adam.m/", 0) != 0) continue;
    const std::string param = name.substr(7);
    auto it = optimized.find(param);
    if (it == optimized.end()) throw DataError("adam state for unknown tensor '" + param + "'");
    const Tensor& v = Get(c, "adam.v/" + param);
    if (t.shape != it->second->shape || v.shape != it->second->shape) {
      throw DataError("adam moments for '" + param + "' do not match the parameter shape");
    }
    moments[param] = Adam::Moments{t.data, v.data};
  }
  adam.Restore(MetaInt(c, "adam.step"), std::move(moments));

  sampler.size = MetaInt(c, "sampler.size");
  sampler.batch = MetaInt(c, "sampler.batch");
  sampler.cursor = MetaInt(c, "sampler.cursor");
  try {
    sampler.rng.LoadState(Blob(c, "sampler.rng"));
  } catch (const Error& e) {
    throw DataError(std::string("checkpoint sampler state: ") + e.what());
  }
  const std::string& order = Blob(c, "sampler.order");
  if (order.size() % 8 != 0) throw DataError("checkpoint sampler order is corrupt");
  sampler.order.assign(order.size() / 8, 0);
  for (size_t i = 0; i < sampler.order.size(); ++i) {
    uint64_t v = 0;
    for (int b = 0; b < 8; ++b) v |= static_cast<uint64_t>(static_cast<unsigned char>(order[i * 8 + static_cast<size_t>(b)])) << (8 * b);
    sampler.order[i] = static_cast<int64_t>(v);
  }
  const bool consistent = sampler.size > 0 && sampler.batch > 0 && sampler.batch <= sampler.size &&
                          sampler.cursor >= 0 && sampler.cursor <= sampler.size &&
                          (sampler.order.empty() ||
                           static_cast<int64_t>(sampler.order.size()) == sampler.size);
  if (!consistent) throw DataError("checkpoint sampler state is inconsistent");
  for (int64_t v : sampler.order) {
    if (v < 0 || v >= sampler.size) throw DataError("checkpoint sampler order is corrupt");
  }
}

void CheckKind(const Checkpoint& c, std::string_view kind) {
  if (c.kind != kind) {
    throw DataError("expected a " + std::string(kind) + " checkpoint, got '" + c.kind + "'");
  }
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& other) const {
  return SerializeCheckpoint(*this) == SerializeCheckpoint(other);
}

std::string SerializeCheckpoint(const Checkpoint& ckpt) {
  Writer w;
  w.Raw(std::string_view(kCheckpointMagic, 4));
  w.U32(kCheckpointVersion);
  w.Str(ckpt.kind);
  w.U64(ckpt.step);
  w.U32(static_cast<uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.Str(k);
    w.Str(v);
  }
  w.U32(static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (NumElements(t.shape) != t.numel()) {
      throw ShapeError("checkpoint tensor '" + name + "' has inconsistent shape");
    }
    w.Str(name);
    w.U32(static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) w.U64(static_cast<uint64_t>(d));
    for (float f : t.data) w.F32(f);
  }
  w.U32(static_cast<uint32_t>(ckpt.blobs.size()));
  for (const auto& [name, b] : ckpt.blobs) {
    w.Str(name);
    w.U64(b.size());
    w.Raw(b);
  }
  return w.Take();
}

Checkpoint ParseCheckpoint(std::string_view bytes, std::string_view origin) {
  Reader r(bytes, origin);
  if (r.Bytes(4) != std::string_view(kCheckpointMagic, 4)) r.Fail("not a checkpoint (bad magic)");
  const uint32_t version = r.U32();
  if (version != kCheckpointVersion) {
    r.Fail("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint c;
  c.kind = r.Str();
  c.step = r.U64();
  for (uint32_t n = r.U32(); n > 0; --n) {
    std::string k = r.Str();
    c.meta[k] = r.Str();
  }
  for (uint32_t n = r.U32(); n > 0; --n) {
    std::string name = r.Str();
    const uint32_t rank = r.U32();
    if (rank > 8) r.Fail("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape;
    uint64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      const uint64_t d = r.U64();
      if (d > (uint64_t{1} << 40) || (d != 0 && count > (uint64_t{1} << 40) / d)) {
        r.Fail("tensor '" + name + "' has an overflowing shape");
      }
      count *= d;
      shape.push_back(static_cast<int64_t>(d));
    }
    const std::string_view payload = r.Bytes(count * 4);
    Tensor t(shape);
    for (uint64_t i = 0; i < count; ++i) {
      uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<uint32_t>(static_cast<unsigned char>(payload[i * 4 + static_cast<uint64_t>(b)])) << (8 * b);
      t.data[i] = std::bit_cast<float>(bits);
    }
    c.tensors[name] = std::move(t);
  }
  for (uint32_t n = r.U32(); n > 0; --n) {
    std::string name = r.Str();
    c.blobs[name] = std::string(r.Bytes(r.U64()));
  }
  if (!r.Done()) r.Fail("trailing bytes after checkpoint");
  return c;
}

void SaveCheckpoint(const Checkpoint& ckpt, const fs::path& path) {
  const std::string bytes = SerializeCheckpoint(ckpt);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) {
      std::error_code ignored;
      fs::remove(tmp, ignored);
      throw DataError("failed to write checkpoint '" + tmp.string() + "'");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw DataError("failed to move checkpoint into '" + path.string() + "': " + ec.message());
}

Checkpoint LoadCheckpoint(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::stringstream buf;
  buf << f.rdbuf();
  return ParseCheckpoint(buf.str(), path.string());
}

Checkpoint ToCheckpoint(const VqVaeRun& run) {
  Checkpoint c;
  c.kind = "vqvae";
  c.step = static_cast<uint64_t>(run.step);
  std::map<std::string, const Tensor*> optimized;
  for (const auto& [name, t] : run.model.params) {
    c.tensors.emplace("param/" + name, Plain(t));
    optimized[name] = &t;
  }
  const Codebook& cb = run.model.codebook;
  c.tensors.emplace("codebook/embeddings", Plain(cb.embeddings));
  optimized["codebook"] = &cb.embeddings;
  if (cb.ema_enabled) {
    c.tensors.emplace("codebook/ema_counts",
                      Tensor(Shape{static_cast<int64_t>(cb.ema_counts.size())}, cb.ema_counts));
    c.tensors.emplace("codebook/ema_sums", Plain(cb.ema_sums));
  }
  RunConfig rc;
  rc.model = run.model.spec;
  PutCommon(c, rc, {ConfigGroup::kModel, ConfigGroup::kTrain}, run.config, run.adam, run.sampler,
            optimized);
  return c;
}

Checkpoint ToCheckpoint(const PriorRun& run) {
  Checkpoint c;
  c.kind = "prior";
  c.step = static_cast<uint64_t>(run.step);
  std::map<std::string, const Tensor*> optimized;
  for (const auto& [name, t] : run.model.params) {
    c.tensors.emplace("param/" + name, Plain(t));
    optimized[name] = &t;
  }
  RunConfig rc;
  rc.prior = run.model.spec;
  PutCommon(c, rc, {ConfigGroup::kPrior, ConfigGroup::kTrain}, run.config, run.adam, run.sampler,
            optimized);
  return c;
}

VqVaeRun VqVaeRunFromCheckpoint(const Checkpoint& c) {
  CheckKind(c, "vqvae");
  const RunConfig rc = ConfigFromMeta(c);
  VqVaeRun run;
  try {
    rc.model.Validate();
    rc.train.Validate();
    // A throwaway generator: every value is overwritten below.
    Rng scratch(0);
    run.model = VqVae::Create(rc.model, scratch);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint carries an invalid configuration: ") + e.what());
  }
  run.config = rc.train;
  run.adam = Adam(rc.train.adam);
  run.step = static_cast<int64_t>(c.step);

  std::map<std::string, const Tensor*> optimized;
  for (auto& [name, t] : run.model.params) {
    Assign(t, Get(c, "param/" + name), name);
    optimized[name] = &t;
  }
  for (const auto& [name, t] : c.tensors) {
    if (name.rfind("param/", 0) == 0 && !run.model.params.contains(name.substr(6))) {
      throw DataError("checkpoint has unexpected parameter '" + name.substr(6) + "'");
    }
  }
  Codebook& cb = run.model.codebook;
  Assign(cb.embeddings, Get(c, "codebook/embeddings"), "codebook/embeddings");
  optimized["codebook"] = &cb.embeddings;
  if (cb.ema_enabled) {
    const Tensor& counts = Get(c, "codebook/ema_counts");
    if (counts.shape != Shape{cb.num_codes()}) throw DataError("checkpoint EMA counts have the wrong shape");
    cb.ema_counts = counts.data;
    Assign(cb.ema_sums, Get(c, "codebook/ema_sums"), "codebook/ema_sums");
  }
  if (!AllFinite(cb.embeddings.data)) throw DataError("checkpoint codebook holds non-finite values");
  RestoreCommon(c, optimized, run.adam, run.sampler);
  return run;
}

PriorRun PriorRunFromCheckpoint(const Checkpoint& c) {
  CheckKind(c, "prior");
  const RunConfig rc = ConfigFromMeta(c);
  PriorRun run;
  try {
    rc.prior.Validate();
    rc.train.Validate();
    Rng scratch(0);
    run.model = PriorModel::Create(rc.prior, scratch);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint carries an invalid configuration: ") + e.what());
  }
  run.config = rc.train;
  run.adam = Adam(rc.train.adam);
  run.step = static_cast<int64_t>(c.step);
  std::map<std::string, const Tensor*> optimized;
  for (auto& [name, t] : run.model.params) {
    Assign(t, Get(c, "param/" + name), name);
    optimized[name] = &t;
  }
  RestoreCommon(c, optimized, run.adam, run.sampler);
  return run;
}

}  // namespace vqvae
