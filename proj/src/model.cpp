#include "nnm/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "nnm/json_util.hpp"

namespace nnm {

const char* to_string(BlockKind kind) { return kind == BlockKind::ilrb ? "ilrb" : "plain_residual"; }

BlockKind parse_block_kind(const std::string& name) {
  if (name == "ilrb") return BlockKind::ilrb;
  if (name == "plain_residual") return BlockKind::plain_residual;
  throw ConfigError("unknown block kind '" + name + "' (ilrb|plain_residual)");
}

std::size_t round_channels(double channels) {
  const auto rounded = std::size_t(std::floor(channels / 8.0 + 0.5)) * 8;
  return std::max<std::size_t>(8, rounded);
}

std::vector<BlockSpec> default_table(const std::string& name) {
  if (name == "mbv2") {
    // (t, c, n, s)
    const std::size_t rows[7][4] = {{1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                    {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
    std::vector<BlockSpec> out;
    for (const auto& r : rows) out.push_back({r[0], r[1], r[2], r[3]});
    return out;
  }
  if (name == "rexnet-lin") {
    // 16 blocks on a linear channel ramp; one spec per block
    const std::size_t groups[6] = {1, 2, 2, 3, 3, 5};
    const std::size_t strides[6] = {1, 2, 2, 2, 1, 2};
    std::vector<BlockSpec> out;
    std::size_t index = 0;
    for (std::size_t g = 0; g < 6; ++g)
      for (std::size_t r = 0; r < groups[g]; ++r, ++index) {
        const double c = 16.0 + (180.0 - 16.0) * double(index) / 15.0;
        out.push_back({index == 0 ? 1u : 6u, round_channels(c), 1, r == 0 ? strides[g] : 1});
      }
    return out;
  }
  throw ConfigError("unknown block table '" + name + "' (mbv2|rexnet-lin)");
}

ModelConfig default_model_config(const std::string& table, std::size_t num_classes) {
  ModelConfig c;
  c.blocks = default_table(table);
  c.num_classes = num_classes;
  return c;
}

void ModelConfig::validate() const {
  if (stem_channels == 0 || head_channels == 0) throw ConfigError("model: channel counts must be >= 1");
  if (!(width_multiplier > 0)) throw ConfigError("model: width_multiplier must be > 0");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (blocks.empty()) throw ConfigError("model: block table is empty");
  if (se_reduction == 0) throw ConfigError("model: se_reduction must be >= 1");
  if (head_dropout < 0 || head_dropout >= 1) throw ConfigError("model: head_dropout must lie in [0,1)");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string where = "model.blocks[" + std::to_string(i) + "]";
    if (b.repeats < 1) throw ConfigError(where + ": repeats must be >= 1");
    if (b.first_stride != 1 && b.first_stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
    if (b.expansion < 1) throw ConfigError(where + ": expansion must be >= 1");
    if (b.out_channels == 0) throw ConfigError(where + ": out_channels must be >= 1");
    if (b.dropout_position < 0 || b.dropout_position > 3) throw ConfigError(where + ": dropout_position must be 0-3");
    if (b.dropout_rate < 0 || b.dropout_rate >= 1) throw ConfigError(where + ": dropout_rate must lie in [0,1)");
  }
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json blocks_json = nlohmann::json::array();
  for (const auto& b : blocks) {
    blocks_json.push_back({{"expansion", b.expansion},
                           {"out_channels", b.out_channels},
                           {"repeats", b.repeats},
                           {"first_stride", b.first_stride},
                           {"se", b.se},
                           {"dropout_position", b.dropout_position},
                           {"dropout_rate", b.dropout_rate}});
  }
  return {{"stem_channels", stem_channels},
          {"width_multiplier", width_multiplier},
          {"blocks", blocks_json},
          {"head_channels", head_channels},
          {"num_classes", num_classes},
          {"activation", to_string(activation)},
          {"block_kind", to_string(block_kind)},
          {"se_reduction", se_reduction},
          {"se_activation", to_string(se_activation)},
          {"dropout_mode", to_string(dropout_mode)},
          {"head_dropout", head_dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  const std::string where = "model";
  reject_unknown_keys(j,
                      {"table", "stem_channels", "width_multiplier", "blocks", "head_channels", "num_classes",
                       "activation", "block_kind", "se_reduction", "se_activation", "dropout_mode", "head_dropout",
                       "dropout_position", "dropout_rate", "se"},
                      where);
  ModelConfig c;
  std::string table = "mbv2";
  read_opt(j, "table", table, where);
  c.blocks = default_table(table);
  read_opt(j, "stem_channels", c.stem_channels, where);
  read_opt(j, "width_multiplier", c.width_multiplier, where);
  read_opt(j, "head_channels", c.head_channels, where);
  read_opt(j, "num_classes", c.num_classes, where);
  read_opt(j, "se_reduction", c.se_reduction, where);
  read_opt(j, "head_dropout", c.head_dropout, where);
  std::string name;
  if (j.contains("activation")) read_opt(j, "activation", name, where), c.activation = parse_activation(name);
  if (j.contains("se_activation")) read_opt(j, "se_activation", name, where), c.se_activation = parse_activation(name);
  if (j.contains("block_kind")) read_opt(j, "block_kind", name, where), c.block_kind = parse_block_kind(name);
  if (j.contains("dropout_mode")) read_opt(j, "dropout_mode", name, where), c.dropout_mode = parse_dropout_mode(name);
  if (j.contains("blocks")) {
    if (!j["blocks"].is_array()) throw ConfigError("model.blocks: expected an array");
    c.blocks.clear();
    for (std::size_t i = 0; i < j["blocks"].size(); ++i) {
      const auto& bj = j["blocks"][i];
      const std::string bw = "model.blocks[" + std::to_string(i) + "]";
      reject_unknown_keys(bj, {"expansion", "out_channels", "repeats", "first_stride", "se", "dropout_position",
                               "dropout_rate"},
                          bw);
      BlockSpec b;
      read_opt(bj, "expansion", b.expansion, bw);
      read_opt(bj, "out_channels", b.out_channels, bw);
      read_opt(bj, "repeats", b.repeats, bw);
      read_opt(bj, "first_stride", b.first_stride, bw);
      read_opt(bj, "se", b.se, bw);
      read_opt(bj, "dropout_position", b.dropout_position, bw);
      read_opt(bj, "dropout_rate", b.dropout_rate, bw);
      c.blocks.push_back(b);
    }
  }
  // Whole-stack overrides, applied after the table.
  for (auto& b : c.blocks) {
    read_opt(j, "dropout_position", b.dropout_position, where);
    read_opt(j, "dropout_rate", b.dropout_rate, where);
    read_opt(j, "se", b.se, where);
  }
  c.validate();
  return c;
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t ModelConfig::hash() const { return fnv1a(to_json().dump()); }

// ---- Model ---------------------------------------------------------------------

namespace {

std::size_t scaled(const ModelConfig& c, std::size_t channels) {
  return round_channels(double(channels) * c.width_multiplier);
}

}  // namespace

template <typename T>
Model<T>::Model(const ModelConfig& c, Rng& rng)
    : stem_conv((c.validate(), 3), scaled(c, c.stem_channels), 3, {2, 1, 1}, false, rng),
      stem_bn(scaled(c, c.stem_channels)),
      stem_act(c.activation),
      head_conv(scaled(c, c.blocks.back().out_channels), scaled(c, c.head_channels), 1, {1, 0, 1}, false, rng),
      head_bn(scaled(c, c.head_channels)),
      head_act(c.activation),
      head_dropout(DropoutMode::regular, c.head_dropout),
      classifier(scaled(c, c.head_channels), c.num_classes, rng),
      config_(c) {
  std::size_t in = scaled(c, c.stem_channels);
  for (const auto& spec : c.blocks) {
    for (std::size_t r = 0; r < spec.repeats; ++r) {
      BlockOptions o;
      o.in_channels = in;
      o.out_channels = scaled(c, spec.out_channels);
      o.stride = r == 0 ? spec.first_stride : 1;
      o.expansion = spec.expansion;
      o.se = spec.se;
      o.se_reduction = c.se_reduction;
      o.activation = c.activation;
      o.se_activation = c.se_activation;
      o.dropout_site = dropout_site_from_int(spec.dropout_position);
      o.dropout_mode = c.dropout_mode;
      o.dropout_rate = spec.dropout_rate;
      if (c.block_kind == BlockKind::ilrb) blocks_.push_back(std::make_unique<ILRB<T>>(o, rng));
      else blocks_.push_back(std::make_unique<PlainResidual<T>>(o, rng));
      in = o.out_channels;
    }
  }
}

template <typename T>
Tensor<T> Model<T>::features(const Tensor<T>& x, Mode mode, Rng& rng) {
  if (x.rank() != 4 || x.dim(1) != 3) throw DimensionError("model expects [N,3,H,W], got " + shape_str(x.dims()));
  Tensor<T> h = stem_act.forward(stem_bn.forward(stem_conv.forward(x), mode));
  for (auto& b : blocks_) h = b->forward(h, mode, rng);
  return head_act.forward(head_bn.forward(head_conv.forward(h), mode));
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& x, Mode mode, Rng& rng) {
  auto h = features(x, mode, rng);
  const std::size_t n = h.dim(0), c = h.dim(1);
  auto pooled = ops::reshape(ops::global_avg_pool(h), Shape{n, c});
  return classifier.forward(head_dropout.forward(pooled, mode, rng));
}

template <typename T>
void Model<T>::collect_parameters(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  stem_conv.collect_parameters(prefix + "stem.conv.", out);
  stem_bn.collect_parameters(prefix + "stem.bn.", out);
  stem_act.collect_parameters(prefix + "stem.act.", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i]->collect_parameters(prefix + "blocks." + std::to_string(i) + ".", out);
  head_conv.collect_parameters(prefix + "head.conv.", out);
  head_bn.collect_parameters(prefix + "head.bn.", out);
  head_act.collect_parameters(prefix + "head.act.", out);
  classifier.collect_parameters(prefix + "classifier.", out);
}

template <typename T>
void Model<T>::collect_buffers(const std::string& prefix, std::vector<NamedTensor<T>>& out) {
  stem_bn.collect_buffers(prefix + "stem.bn.", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i]->collect_buffers(prefix + "blocks." + std::to_string(i) + ".", out);
  head_bn.collect_buffers(prefix + "head.bn.", out);
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() {
  std::vector<NamedTensor<T>> out;
  collect_parameters("", out);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::buffers() {
  std::vector<NamedTensor<T>> out;
  collect_buffers("", out);
  return out;
}

template <typename T>
std::size_t count_params(Module<T>& module) {
  std::vector<NamedTensor<T>> params;
  module.collect_parameters("", params);
  std::size_t total = 0;
  for (const auto& p : params) total += p.tensor.numel();
  return total;
}

template class Model<float>;
template class Model<double>;
template std::size_t count_params(Module<float>&);
template std::size_t count_params(Module<double>&);

// ---- checkpoint file -------------------------------------------------------------

const Tensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return &t;
  return nullptr;
}

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const char*>(p);
    buf.insert(buf.end(), c, c + n);
  }
  template <typename U>
  void le(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(char((std::uint64_t(v) >> (8 * i)) & 0xff));
  }
  std::string buf;
};

class Reader {
 public:
  Reader(const std::string& data, const std::string& path) : data_(data), path_(path) {}
  void need(std::size_t n) {
    if (data_.size() - pos_ < n) throw FormatError("checkpoint " + path_ + " is truncated");
  }
  template <typename U>
  U le() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(std::uint8_t(data_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return U(v);
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Writer w;
  w.bytes(kCheckpointMagic, 4);
  w.le<std::uint8_t>(kCheckpointVersion);
  w.le<std::uint32_t>(std::uint32_t(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    if (name.size() > 0xffff) throw ContractError("tensor name too long: " + name);
    w.le<std::uint16_t>(std::uint16_t(name.size()));
    w.bytes(name.data(), name.size());
    w.le<std::uint8_t>(0);  // f32
    w.le<std::uint8_t>(std::uint8_t(t.rank()));
    for (std::size_t d : t.dims()) w.le<std::uint32_t>(std::uint32_t(d));
    for (float v : t.data()) w.le<std::uint32_t>(std::bit_cast<std::uint32_t>(v));
  }
  const std::string meta = ck.meta.dump();
  w.le<std::uint32_t>(std::uint32_t(meta.size()));
  w.bytes(meta.data(), meta.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    out.write(w.buf.data(), std::streamsize(w.buf.size()));
    if (!out) throw DataError("write failed for checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(data, path);
  if (r.str(4) != std::string(kCheckpointMagic, 4)) throw FormatError(path + " is not a checkpoint (bad magic)");
  const auto version = r.le<std::uint8_t>();
  if (version != kCheckpointVersion)
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.le<std::uint16_t>();
    std::string name = r.str(len);
    if (r.le<std::uint8_t>() != 0) throw FormatError(path + ": unknown dtype for " + name);
    const auto rank = r.le<std::uint8_t>();
    if (rank < 1 || rank > 4) throw FormatError(path + ": bad rank for " + name);
    Shape dims(rank);
    for (auto& d : dims) d = r.le<std::uint32_t>();
    const std::size_t n = shape_numel(dims);
    r.need(n * 4);
    std::vector<float> values(n);
    for (auto& v : values) v = std::bit_cast<float>(r.le<std::uint32_t>());
    ck.tensors.emplace_back(std::move(name), Tensor<float>(dims, std::move(values)));
  }
  const auto meta_len = r.le<std::uint32_t>();
  const std::string meta = r.str(meta_len);
  if (!r.done()) throw FormatError(path + ": trailing bytes after metadata");
  try {
    ck.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": corrupt metadata: " + e.what());
  }
  return ck;
}

Checkpoint model_state(Model<float>& model) {
  Checkpoint ck;
  for (auto& p : model.parameters()) ck.tensors.emplace_back(p.name, p.tensor.clone());
  for (auto& b : model.buffers()) ck.tensors.emplace_back(b.name, b.tensor.clone());
  ck.meta["model"] = model.config().to_json();
  ck.meta["config_hash"] = model.config().hash();
  return ck;
}

void load_model_state(Model<float>& model, const Checkpoint& ck) {
  if (!ck.meta.contains("config_hash") || ck.meta["config_hash"].get<std::uint64_t>() != model.config().hash())
    throw CompatibilityError("checkpoint was written for a different model config");
  auto targets = model.parameters();
  for (auto& b : model.buffers()) targets.push_back(b);
  // validate everything before copying anything
  std::vector<const Tensor<float>*> sources;
  for (auto& t : targets) {
    const auto* src = ck.find(t.name);
    if (!src) throw CompatibilityError("checkpoint lacks tensor " + t.name);
    if (src->dims() != t.tensor.dims()) throw CompatibilityError("shape mismatch for " + t.name);
    sources.push_back(src);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    auto dst = targets[i].tensor.data();
    std::copy(sources[i]->data().begin(), sources[i]->data().end(), dst.begin());
  }
}

}  // namespace nnm
