#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mrcl/checkpoint.hpp"
#include "mrcl/errors.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace mrcl::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'R', 'C', 'L', 'C', 'K', 'P', 'T'};

json model_to_json(const vit::ViTConfig& c) {
  return {{"image_height", c.image_height},   {"image_width", c.image_width},
          {"channels", c.channels},           {"patch_size", c.patch_size},
          {"embed_dim", c.embed_dim},         {"depth", c.depth},
          {"num_heads", c.num_heads},         {"mlp_ratio", c.mlp_ratio},
          {"decoder_dim", c.decoder_dim},     {"decoder_depth", c.decoder_depth},
          {"decoder_heads", c.decoder_heads}, {"proj_hidden_dim", c.proj_hidden_dim},
          {"proj_dim", c.proj_dim},           {"use_class_token", c.use_class_token},
          {"norm_eps", c.norm_eps},           {"input_mean", c.input_mean},
          {"input_std", c.input_std}};
}

vit::ViTConfig model_from_json(const json& j) {
  vit::ViTConfig c;
  j.at("image_height").get_to(c.image_height);
  j.at("image_width").get_to(c.image_width);
  j.at("channels").get_to(c.channels);
  j.at("patch_size").get_to(c.patch_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depth").get_to(c.depth);
  j.at("num_heads").get_to(c.num_heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
  j.at("decoder_dim").get_to(c.decoder_dim);
  j.at("decoder_depth").get_to(c.decoder_depth);
  j.at("decoder_heads").get_to(c.decoder_heads);
  j.at("proj_hidden_dim").get_to(c.proj_hidden_dim);
  j.at("proj_dim").get_to(c.proj_dim);
  j.at("use_class_token").get_to(c.use_class_token);
  j.at("norm_eps").get_to(c.norm_eps);
  j.at("input_mean").get_to(c.input_mean);
  j.at("input_std").get_to(c.input_std);
  return c;
}

class Writer {
 public:
  template <typename V>
  void pod(const V& v) {
    bytes(&v, sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  template <typename T>
  void tensor(const std::string& name, const Mat<T>& m) {
    str(name);
    pod(static_cast<std::uint8_t>(sizeof(T)));
    pod(static_cast<std::uint64_t>(m.rows()));
    pod(static_cast<std::uint64_t>(m.cols()));
    bytes(m.data(), static_cast<std::size_t>(m.size()) * sizeof(T));
  }
  std::string& buffer() { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end, fs::path path) : buf_(buf), end_(end), path_(std::move(path)) {}

  void bytes(void* p, std::size_t n) {
    if (n > end_ - pos_) fail("truncated");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename V>
  V pod() {
    V v{};
    bytes(&v, sizeof(V));
    return v;
  }
  std::string str(std::size_t len) {
    if (len > end_ - pos_) fail("truncated");
    std::string s = buf_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  std::string str() { return str(pod<std::uint32_t>()); }
  [[noreturn]] void fail(const std::string& why) const {
    throw CheckpointError("checkpoint " + path_.string() + ": " + why);
  }
  [[nodiscard]] std::size_t position() const { return pos_; }

 private:
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
  fs::path path_;
};

std::uint64_t fnv1a_bytes(const char* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(p[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

struct Container {
  json meta;
  std::string buffer;
  std::size_t tensors_offset = 0;
  std::size_t payload_end = 0;
};

Container read_container(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  Container c;
  c.buffer.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (c.buffer.size() < sizeof(kMagic) + 4 + 8 + 8) {
    throw CheckpointError("checkpoint " + path.string() + ": truncated");
  }
  c.payload_end = c.buffer.size() - sizeof(std::uint64_t);
  Reader r(c.buffer, c.payload_end, path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) r.fail("bad magic (not an mrcl checkpoint)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    r.fail("unsupported version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  std::uint64_t stored = 0;
  std::memcpy(&stored, c.buffer.data() + c.payload_end, sizeof(stored));
  if (stored != fnv1a_bytes(c.buffer.data(), c.payload_end)) r.fail("checksum mismatch (file is corrupt)");
  const auto meta_len = r.pod<std::uint64_t>();
  try {
    c.meta = json::parse(r.str(meta_len));
  } catch (const json::exception& e) {
    r.fail(std::string("bad metadata: ") + e.what());
  }
  c.tensors_offset = r.position();
  return c;
}

CheckpointInfo info_from_meta(const json& meta, const fs::path& path) {
  try {
    CheckpointInfo info;
    meta.at("step").get_to(info.step);
    meta.at("epoch").get_to(info.epoch);
    meta.at("seed").get_to(info.seed);
    meta.at("scalar_bytes").get_to(info.scalar_bytes);
    meta.at("config_hash").get_to(info.config_hash);
    meta.at("config_text").get_to(info.config_text);
    info.model = model_from_json(meta.at("model"));
    return info;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + ": bad metadata: " + e.what());
  }
}

}  // namespace

std::uint64_t fnv1a(const std::string& text) { return fnv1a_bytes(text.data(), text.size()); }

template <typename T>
void save_checkpoint(const TrainState<T>& state, const fs::path& path, const std::string& config_text) {
  const auto& adam = state.optimizer.config();
  json meta = {{"step", state.step},
               {"epoch", state.epoch},
               {"seed", state.seed},
               {"scalar_bytes", sizeof(T)},
               {"config_hash", fnv1a(config_text)},
               {"config_text", config_text},
               {"model", model_to_json(state.model.config())},
               {"adam",
                {{"beta1", adam.beta1},
                 {"beta2", adam.beta2},
                 {"eps", adam.eps},
                 {"weight_decay", adam.weight_decay},
                 {"steps_taken", state.optimizer.steps_taken()}}}};
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.pod(kCheckpointVersion);
  const std::string meta_text = meta.dump();
  w.pod(static_cast<std::uint64_t>(meta_text.size()));
  w.bytes(meta_text.data(), meta_text.size());
  const auto& params = state.model.params();
  w.pod(static_cast<std::uint64_t>(3 * params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) w.tensor("param/" + params[i].name, params[i].value);
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.tensor("adam.exp_avg/" + params[i].name, state.optimizer.exp_avg()[i]);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    w.tensor("adam.exp_avg_sq/" + params[i].name, state.optimizer.exp_avg_sq()[i]);
  }
  const std::uint64_t sum = fnv1a_bytes(w.buffer().data(), w.buffer().size());
  w.pod(sum);

  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + tmp.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("short write to checkpoint: " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

template <typename T>
TrainState<T> load_checkpoint(const fs::path& path) {
  const Container c = read_container(path);
  const CheckpointInfo info = info_from_meta(c.meta, path);
  if (info.scalar_bytes != static_cast<int>(sizeof(T))) {
    throw CheckpointError("checkpoint " + path.string() + ": stored with " + std::to_string(info.scalar_bytes) +
                          "-byte scalars, requested " + std::to_string(sizeof(T)));
  }
  optim::AdamWConfig adam;
  std::int64_t steps_taken = 0;
  try {
    const auto& a = c.meta.at("adam");
    a.at("beta1").get_to(adam.beta1);
    a.at("beta2").get_to(adam.beta2);
    a.at("eps").get_to(adam.eps);
    a.at("weight_decay").get_to(adam.weight_decay);
    a.at("steps_taken").get_to(steps_taken);
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint " + path.string() + ": bad metadata: " + e.what());
  }
  try {
    info.model.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError("checkpoint " + path.string() + ": invalid model config: " + e.what());
  }

  TrainState<T> state(info.model, adam);
  state.step = info.step;
  state.epoch = info.epoch;
  state.seed = info.seed;
  state.optimizer.set_steps_taken(steps_taken);

  auto& params = state.model.params();
  std::vector<bool> seen(3 * params.size(), false);
  Reader r(c.buffer, c.payload_end, path);
  r.str(c.tensors_offset);
  const auto count = r.pod<std::uint64_t>();
  if (count != 3 * params.size()) {
    r.fail("holds " + std::to_string(count) + " tensors, model expects " + std::to_string(3 * params.size()));
  }
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.str();
    const auto scalar = r.pod<std::uint8_t>();
    const auto rows = r.pod<std::uint64_t>();
    const auto cols = r.pod<std::uint64_t>();
    if (scalar != sizeof(T)) r.fail("tensor " + name + " has the wrong scalar size");
    const auto slash = name.find('/');
    if (slash == std::string::npos) r.fail("malformed tensor name " + name);
    const std::string group = name.substr(0, slash);
    const std::size_t slot = group == "param" ? 0 : group == "adam.exp_avg" ? 1 : group == "adam.exp_avg_sq" ? 2 : 3;
    if (slot == 3) r.fail("unknown tensor group in " + name);
    const std::string pname = name.substr(slash + 1);
    std::size_t idx = params.size();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == pname) idx = i;
    }
    if (idx == params.size()) r.fail("unknown parameter " + pname);
    Mat<T>& dst = slot == 0   ? params[idx].value
                  : slot == 1 ? state.optimizer.exp_avg()[idx]
                              : state.optimizer.exp_avg_sq()[idx];
    if (static_cast<std::uint64_t>(dst.rows()) != rows || static_cast<std::uint64_t>(dst.cols()) != cols) {
      r.fail("tensor " + name + " has shape " + std::to_string(rows) + "x" + std::to_string(cols) + ", expected " +
             std::to_string(dst.rows()) + "x" + std::to_string(dst.cols()));
    }
    r.bytes(dst.data(), static_cast<std::size_t>(dst.size()) * sizeof(T));
    seen[slot * params.size() + idx] = true;
  }
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) r.fail("missing tensor for parameter " + params[i % params.size()].name);
  }
  return state;
}

CheckpointInfo read_checkpoint_info(const fs::path& path) {
  const Container c = read_container(path);
  return info_from_meta(c.meta, path);
}

template void save_checkpoint<float>(const TrainState<float>&, const fs::path&, const std::string&);
template void save_checkpoint<double>(const TrainState<double>&, const fs::path&, const std::string&);
template TrainState<float> load_checkpoint<float>(const fs::path&);
template TrainState<double> load_checkpoint<double>(const fs::path&);

}  // namespace mrcl::train
