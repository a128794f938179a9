#pragma once

// Checkpoint file:
//   8-byte magic "SAURCKPT", u32 version,
//   u64 manifest length, JSON manifest (architecture, shapes, provenance),
//   raw little-endian f64 arrays in manifest order,
//   u64 FNV-1a hash of everything before it.
// Pruned shapes live in the manifest, so no config is needed to reload.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "sauron/binio.hpp"
#include "sauron/segnet.hpp"

namespace sauron {

inline constexpr char kCheckpointMagic[8] = {'S', 'A', 'U', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <std::floating_point T>
void put_values(std::ostream& os, std::span<const T> v) {
  for (T x : v) binio::put_f64(os, static_cast<double>(x));
}

}  // namespace detail

template <std::floating_point T>
std::string serialize_checkpoint(const SegNet<T>& net) {
  nlohmann::json manifest;
  const auto& s = net.spec();
  manifest["spec"] = {{"levels", s.levels},           {"init_filters", s.init_filters},
                      {"in_channels", s.in_channels}, {"num_classes", s.num_classes},
                      {"norm", to_string(s.norm)},    {"activation", to_string(s.activation)}};
  manifest["layers"] = nlohmann::json::array();
  for (const auto& l : net.layers()) {
    manifest["layers"].push_back({{"name", l.name},
                                  {"kind", to_string(l.kind)},
                                  {"kernel", l.kernel},
                                  {"stride", l.stride},
                                  {"padding", l.padding},
                                  {"norm", to_string(l.norm)},
                                  {"activation", to_string(l.activation)},
                                  {"prunable", l.prunable},
                                  {"inputs", l.inputs},
                                  {"weight_shape", l.weight.shape()},
                                  {"origin", l.origin},
                                  {"running_stats", !l.running_mean.empty()}});
  }
  std::ostringstream body;
  body.write(kCheckpointMagic, 8);
  binio::put_u32(body, kCheckpointVersion);
  const std::string m = manifest.dump();
  binio::put_u64(body, m.size());
  body.write(m.data(), static_cast<std::streamsize>(m.size()));
  for (const auto& l : net.layers()) {
    detail::put_values<T>(body, l.weight.data());
    detail::put_values<T>(body, l.bias.data());
    if (l.norm != NormKind::none) {
      detail::put_values<T>(body, l.norm_scale.data());
      detail::put_values<T>(body, l.norm_shift.data());
    }
    if (!l.running_mean.empty()) {
      detail::put_values<T>(body, std::span<const T>(l.running_mean));
      detail::put_values<T>(body, std::span<const T>(l.running_var));
    }
  }
  std::string out = body.str();
  std::ostringstream tail;
  binio::put_u64(tail, detail::fnv1a(out));
  return out + tail.str();
}

template <std::floating_point T>
SegNet<T> deserialize_checkpoint(const std::string& bytes, const std::string& context = "checkpoint") {
  if (bytes.size() < 8 + 4 + 8 + 8) throw CheckpointError(context + ": truncated file");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw CheckpointError(context + ": not a checkpoint");
  const std::string_view payload(bytes.data(), bytes.size() - 8);
  {
    std::istringstream tail(bytes.substr(bytes.size() - 8));
    binio::Reader<CheckpointError> tr(tail, context);
    if (tr.u64() != detail::fnv1a(payload)) throw CheckpointError(context + ": checksum mismatch (corrupted or truncated)");
  }
  std::istringstream is(std::string(payload.substr(8)));
  binio::Reader<CheckpointError> r(is, context);
  if (const auto ver = r.u32(); ver != kCheckpointVersion)
    throw CheckpointError(context + ": unsupported version " + std::to_string(ver) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t mlen = r.u64();
  if (mlen > payload.size()) throw CheckpointError(context + ": manifest length exceeds file size");
  std::string mtext(mlen, '\0');
  r.bytes(mtext.data(), mlen);

  try {
    const auto manifest = nlohmann::json::parse(mtext);
    const auto& js = manifest.at("spec");
    UNetSpec spec{js.at("levels").get<std::size_t>(),      js.at("init_filters").get<std::size_t>(),
                  js.at("in_channels").get<std::size_t>(), js.at("num_classes").get<std::size_t>(),
                  parse_norm(js.at("norm").get<std::string>()), parse_activation(js.at("activation").get<std::string>())};
    auto read = [&](std::size_t n) {
      std::vector<T> v(n);
      for (auto& x : v) x = static_cast<T>(r.f64());
      return v;
    };
    std::vector<ConvLayer<T>> layers;
    for (const auto& jl : manifest.at("layers")) {
      ConvLayer<T> l;
      l.name = jl.at("name").get<std::string>();
      l.kind = parse_layer_kind(jl.at("kind").get<std::string>());
      l.kernel = jl.at("kernel").get<std::size_t>();
      l.stride = jl.at("stride").get<std::size_t>();
      l.padding = jl.at("padding").get<std::size_t>();
      l.norm = parse_norm(jl.at("norm").get<std::string>());
      l.activation = parse_activation(jl.at("activation").get<std::string>());
      l.prunable = jl.at("prunable").get<bool>();
      l.inputs = jl.at("inputs").get<std::vector<int>>();
      const auto shape = jl.at("weight_shape").get<Shape>();
      if (shape.size() != 4) throw CheckpointError(context + ": layer '" + l.name + "' weight is not rank 4");
      l.origin = jl.at("origin").get<std::vector<std::size_t>>();
      const std::size_t cout = shape[0];
      l.weight = Tensor<T>::parameter(shape, read(numel_of(shape)));
      l.bias = Tensor<T>::parameter({cout}, read(cout));
      if (l.norm != NormKind::none) {
        l.norm_scale = Tensor<T>::parameter({cout}, read(cout));
        l.norm_shift = Tensor<T>::parameter({cout}, read(cout));
      }
      if (jl.at("running_stats").get<bool>()) {
        l.running_mean = read(cout);
        l.running_var = read(cout);
      }
      layers.push_back(std::move(l));
    }
    if (!r.at_end()) throw CheckpointError(context + ": trailing bytes after parameter data");
    return SegNet<T>(spec, std::move(layers));
  } catch (const CheckpointError&) {
    throw;
  } catch (const std::exception& e) {
    throw CheckpointError(context + ": invalid manifest or parameters: " + e.what());
  }
}

template <std::floating_point T>
void save_checkpoint(const SegNet<T>& net, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(net);
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <std::floating_point T>
SegNet<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return deserialize_checkpoint<T>(ss.str(), path.string());
}

}  // namespace sauron
