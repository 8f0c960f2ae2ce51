#include <cstring>
#include <fstream>

#include "cmtnet/training.hpp"
#include "json.hpp"

namespace cmtnet {

namespace {

constexpr char kMagic[8] = {'C', 'M', 'T', 'N', 'E', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw CheckpointError("corrupt checkpoint: truncated");
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

void append_floats(std::string& data, const std::vector<float>& v) {
  data.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
}

}  // namespace

void save_checkpoint(const Net& net, const std::filesystem::path& path, const CheckpointMeta& meta) {
  nlohmann::ordered_json header;
  header["config"] = nlohmann::json::parse(network_config_to_json(net.config()));
  header["seed"] = net.seed();
  header["epoch"] = meta.epoch;
  header["dtype"] = "f32";
  std::string data;
  auto tensors = nlohmann::ordered_json::array();
  auto add = [&](const std::string& name, const std::vector<int>& shape, const std::vector<float>& values) {
    tensors.push_back({{"name", name}, {"shape", shape}, {"offset", data.size()}, {"count", values.size()}});
    append_floats(data, values);
  };
  for (const auto& p : net.parameters()) add(p.name, p.shape, p.value);
  if (meta.adam) {
    header["adam_steps"] = meta.adam->steps();
    for (const auto& p : net.parameters()) {
      auto m = meta.adam->first_moment().find(p.name);
      if (m == meta.adam->first_moment().end()) continue;
      add("adam.m." + p.name, p.shape, m->second);
      add("adam.v." + p.name, p.shape, meta.adam->second_moment().at(p.name));
    }
  }
  header["tensors"] = tensors;

  std::string out(kMagic, sizeof kMagic);
  put(out, kVersion);
  const std::string h = header.dump();
  put(out, static_cast<std::uint64_t>(h.size()));
  out += h;
  put(out, static_cast<std::uint64_t>(data.size()));
  out += data;
  put(out, fnv1a(out));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkConfig>& expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot read checkpoint " + path.string());
  const std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "checkpoint " + path.string() + ": ";
  if (in.size() < sizeof kMagic + 28 || std::memcmp(in.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(where + "not a checkpoint archive");
  }
  std::size_t pos = in.size() - sizeof(std::uint64_t);
  const auto stored_sum = get<std::uint64_t>(in, pos);
  if (stored_sum != fnv1a(in.substr(0, in.size() - sizeof(std::uint64_t)))) {
    throw CheckpointError(where + "checksum mismatch (corrupt archive)");
  }
  pos = sizeof kMagic;
  if (get<std::uint32_t>(in, pos) != kVersion) throw CheckpointError(where + "unsupported version");
  const auto hlen = get<std::uint64_t>(in, pos);
  if (pos + hlen > in.size()) throw CheckpointError(where + "corrupt header length");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.substr(pos, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + "corrupt header: " + e.what());
  }
  pos += hlen;
  const auto dlen = get<std::uint64_t>(in, pos);
  if (pos + dlen + sizeof(std::uint64_t) != in.size()) throw CheckpointError(where + "corrupt data length");
  const char* data = in.data() + pos;

  try {
    const NetworkConfig config = network_config_from_json(header.at("config").dump());
    if (expected && !(*expected == config)) {
      throw CheckpointError(where + "config mismatch: stored " + network_config_to_json(config) + ", expected " +
                            network_config_to_json(*expected));
    }
    LoadedCheckpoint out;
    out.net = Net::create(config, header.at("seed").get<std::uint64_t>());
    out.epoch = header.at("epoch").get<int>();

    std::map<std::string, std::vector<float>> tensors;
    for (const auto& t : header.at("tensors")) {
      const auto offset = t.at("offset").get<std::size_t>();
      const auto count = t.at("count").get<std::size_t>();
      if (offset + count * sizeof(float) > dlen) throw CheckpointError(where + "tensor out of range");
      std::vector<float> v(count);
      std::memcpy(v.data(), data + offset, count * sizeof(float));
      tensors[t.at("name").get<std::string>()] = std::move(v);
    }
    for (auto& p : out.net.parameters()) {
      auto it = tensors.find(p.name);
      if (it == tensors.end()) throw CheckpointError(where + "missing tensor " + p.name);
      if (it->second.size() != p.value.size()) throw CheckpointError(where + "weight shape mismatch for " + p.name);
      p.value = it->second;
    }
    if (header.contains("adam_steps")) {
      std::map<std::string, std::vector<float>> m, v;
      for (auto& [name, values] : tensors) {
        if (name.rfind("adam.m.", 0) == 0) m[name.substr(7)] = values;
        if (name.rfind("adam.v.", 0) == 0) v[name.substr(7)] = values;
      }
      Adam adam;
      adam.restore(header.at("adam_steps").get<std::int64_t>(), std::move(m), std::move(v));
      out.adam = std::move(adam);
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(where + "corrupt header: " + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(where + e.what());
  }
}

}  // namespace cmtnet
