#include "spm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spm {

namespace {

constexpr std::size_t kMagicSize = sizeof(kCheckpointMagic) - 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

std::string shape_field(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out;
}

Shape parse_shape(const std::string& s) {
  Shape shape;
  for (const auto& d : split(s, 'x')) shape.push_back(std::stoull(d));
  return shape;
}

struct Manifest {
  ModelConfig config;
  std::map<std::string, std::string> state;
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset;
    std::uint64_t count;
  };
  std::vector<Entry> entries;
};

[[noreturn]] void corrupt(const std::filesystem::path& path, const std::string& why) {
  throw std::runtime_error("checkpoint " + path.string() + ": " + why);
}

Manifest parse_manifest(const std::filesystem::path& path, const std::string& text) {
  Manifest m;
  bool have_config = false;
  for (const auto& line : split(text, '\n')) {
    if (line.empty()) continue;
    auto fields = split(line, '\t');
    if (fields[0] == "config" || fields[0] == "state") {
      std::map<std::string, std::string> kv;
      for (std::size_t i = 1; i < fields.size(); ++i) {
        const auto eq = fields[i].find('=');
        if (eq == std::string::npos) corrupt(path, "malformed key=value '" + fields[i] + "'");
        kv[fields[i].substr(0, eq)] = fields[i].substr(eq + 1);
      }
      if (fields[0] == "state") {
        m.state.insert(kv.begin(), kv.end());
        continue;
      }
      try {
        m.config.embed_dim = std::stoull(kv.at("embed_dim"));
        m.config.hidden_dim = std::stoull(kv.at("hidden_dim"));
        m.config.source_vocab = std::stoull(kv.at("source_vocab"));
        m.config.target_vocab = std::stoull(kv.at("target_vocab"));
        m.config.layers = std::stoull(kv.at("layers"));
      } catch (const std::exception&) {
        corrupt(path, "incomplete config echo");
      }
      have_config = true;
    } else if (fields[0] == "tensor" && fields.size() == 5) {
      m.entries.push_back({fields[1], parse_shape(fields[2]), std::stoull(fields[3]), std::stoull(fields[4])});
    } else {
      corrupt(path, "unknown manifest line '" + line + "'");
    }
  }
  if (!have_config) corrupt(path, "missing config echo");
  return m;
}

std::pair<Manifest, std::string> read_file(const std::filesystem::path& path, bool with_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  char head[kMagicSize + 8];
  if (!in.read(head, sizeof head) || std::memcmp(head, kCheckpointMagic, kMagicSize) != 0) {
    corrupt(path, "bad magic");
  }
  const std::uint64_t manifest_len = get_u64(head + kMagicSize);
  std::string manifest(manifest_len, '\0');
  if (!in.read(manifest.data(), static_cast<std::streamsize>(manifest_len))) corrupt(path, "truncated manifest");
  std::string payload;
  if (with_payload) {
    std::ostringstream rest;
    rest << in.rdbuf();
    payload = rest.str();
  }
  return {parse_manifest(path, manifest), std::move(payload)};
}

void fill_tensor(const std::filesystem::path& path, const Manifest::Entry& e, const std::string& payload,
                 Tensor& dst) {
  if (e.shape != dst.shape()) {
    corrupt(path, "tensor " + e.name + " has shape " + shape_string(e.shape) + ", expected " +
                      shape_string(dst.shape()));
  }
  if (e.count != dst.size() || e.offset + 8 * e.count > payload.size()) corrupt(path, "tensor " + e.name + " truncated");
  auto data = dst.mutable_data();
  for (std::size_t i = 0; i < e.count; ++i) {
    data[i] = std::bit_cast<double>(get_u64(payload.data() + e.offset + 8 * i));
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const std::map<std::string, std::string>& state,
                     const std::vector<std::pair<std::string, Tensor>>& extra) {
  const auto& c = params.config;
  std::string manifest = "config\tembed_dim=" + std::to_string(c.embed_dim) + "\thidden_dim=" +
                         std::to_string(c.hidden_dim) + "\tsource_vocab=" + std::to_string(c.source_vocab) +
                         "\ttarget_vocab=" + std::to_string(c.target_vocab) + "\tlayers=" + std::to_string(c.layers) +
                         "\n";
  if (!state.empty()) {
    manifest += "state";
    for (const auto& [k, v] : state) manifest += "\t" + k + "=" + v;
    manifest += "\n";
  }

  auto named = params.named_tensors();
  named.insert(named.end(), extra.begin(), extra.end());
  std::string payload;
  for (const auto& [name, t] : named) {
    manifest += "tensor\t" + name + "\t" + shape_field(t.shape()) + "\t" + std::to_string(payload.size()) + "\t" +
                std::to_string(t.size()) + "\n";
    for (double v : t.data()) put_u64(payload, std::bit_cast<std::uint64_t>(v));
  }

  std::string blob(kCheckpointMagic, kMagicSize);
  put_u64(blob, manifest.size());
  blob += manifest;
  blob += payload;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto [manifest, payload] = read_file(path, true);
  Checkpoint ck{ModelParams(manifest.config), manifest.state, {}};
  std::map<std::string, Tensor> wanted;
  for (auto& [name, t] : ck.params.named_tensors()) wanted.emplace(name, t);
  for (const auto& e : manifest.entries) {
    auto it = wanted.find(e.name);
    if (it != wanted.end()) {
      fill_tensor(path, e, payload, it->second);
      wanted.erase(it);
    } else {
      Tensor t = Tensor::zeros(e.shape);
      fill_tensor(path, e, payload, t);
      ck.extra.emplace_back(e.name, t);
    }
  }
  if (!wanted.empty()) corrupt(path, "missing tensor " + wanted.begin()->first);
  return ck;
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) { return read_file(path, false).first.config; }

}  // namespace spm
