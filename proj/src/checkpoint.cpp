#include "fincflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "io_util.hpp"

namespace fincflow {

namespace {

constexpr char kMagic[8] = {'F', 'I', 'N', 'C', 'C', 'K', 'P', 'T'};

CheckpointInfo read_header(std::istream& in, const std::string& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) throw BadFormat(path + ": not a checkpoint");
  const auto version = io::read_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) throw BadFormat(path + ": unsupported version " + std::to_string(version));
  CheckpointInfo info;
  ModelConfig& c = info.config;
  c.levels = io::read_le<std::uint32_t>(in, "config");
  c.steps = io::read_le<std::uint32_t>(in, "config");
  c.channels = io::read_le<std::uint32_t>(in, "config");
  c.height = io::read_le<std::uint32_t>(in, "config");
  c.width = io::read_le<std::uint32_t>(in, "config");
  c.hidden = io::read_le<std::uint32_t>(in, "config");
  c.kernel = io::read_le<std::uint32_t>(in, "config");
  const auto dtype = io::read_le<std::uint8_t>(in, "config");
  if (dtype != 1 && dtype != 2) throw BadFormat(path + ": dtype code " + std::to_string(dtype));
  info.dtype = static_cast<Dtype>(dtype);
  info.actnorm_initialized = io::read_le<std::uint8_t>(in, "config") != 0;
  try {
    c.validate();
  } catch (const InvalidConfig& e) {
    throw BadFormat(path + ": " + e.what());
  }
  return info;
}

}  // namespace

template <typename T>
void save_checkpoint(FlowModel<T>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  const ModelConfig& c = model.config();
  out.write(kMagic, 8);
  io::write_le<std::uint32_t>(out, kCheckpointVersion);
  for (std::size_t v : {c.levels, c.steps, c.channels, c.height, c.width, c.hidden, c.kernel})
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(dtype_of<T>()));
  io::write_le<std::uint8_t>(out, model.actnorm_initialized() ? 1 : 0);
  const auto params = model.params();
  io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_tensor_body(out, *p.value);
  }
  if (!out) throw Error("write failed: " + path.string());
}

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return read_header(in, path.string());
  } catch (const TruncatedFile& e) {
    throw BadFormat(path.string() + ": " + e.what());
  }
}

template <typename T>
FlowModel<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string p = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + p);
  try {
    const CheckpointInfo info = read_header(in, p);
    FlowModel<T> model(info.config, 0);
    std::map<std::string, Param<T>> by_name;
    for (auto& param : model.params()) by_name.emplace(param.name, param);

    const auto count = io::read_le<std::uint32_t>(in, "record count");
    if (count != by_name.size())
      throw BadFormat(p + ": " + std::to_string(count) + " records, model has " + std::to_string(by_name.size()));
    for (std::uint32_t r = 0; r < count; ++r) {
      const auto len = io::read_le<std::uint32_t>(in, "name length");
      if (len > 4096) throw BadFormat(p + ": implausible name length");
      std::string name(len, '\0');
      if (!in.read(name.data(), len)) throw BadFormat(p + ": truncated record name");
      const auto it = by_name.find(name);
      if (it == by_name.end()) throw BadFormat(p + ": unknown parameter '" + name + "'");
      Tensor<T> value = std::visit([](const auto& t) { return t.template cast<T>(); }, read_tensor_body(in));
      if (value.shape() != it->second.value->shape())
        throw DimsMismatch(name + " is " + value.shape().str() + ", model expects " +
                           it->second.value->shape().str());
      *it->second.value = std::move(value);
      by_name.erase(it);
    }
    model.set_actnorm_initialized(info.actnorm_initialized);
    return model;
  } catch (const TruncatedFile& e) {
    throw BadFormat(p + ": " + e.what());
  } catch (const UnsupportedDtype& e) {
    throw BadFormat(p + ": " + e.what());
  }
}

template void save_checkpoint(FlowModel<float>&, const std::filesystem::path&);
template void save_checkpoint(FlowModel<double>&, const std::filesystem::path&);
template FlowModel<float> load_checkpoint(const std::filesystem::path&);
template FlowModel<double> load_checkpoint(const std::filesystem::path&);

}  // namespace fincflow
