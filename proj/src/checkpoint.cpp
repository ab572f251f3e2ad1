#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "ngram/model.hpp"

namespace ngram {

namespace {

constexpr const char* kMagic = "NGRAMCKPT";

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

void write_checkpoint(std::ostream& out, const ModelConfig& config, const ModelParams& params) {
  check_params(params, config);
  out << kMagic << ' ' << kCheckpointVersion << '\n';
  for (const auto& [key, value] : config.to_key_values()) out << key << " = " << value << '\n';
  out << "end\n";
  std::vector<std::pair<std::string, const Tensor*>> tensors;
  params.for_each([&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  write_u64(out, tensors.size());
  for (const auto& [name, tensor] : tensors) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, *tensor);
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: empty stream");
  std::istringstream header(line);
  std::string magic;
  int version = 0;
  header >> magic >> version;
  if (magic != kMagic) throw std::runtime_error("checkpoint: bad magic '" + magic + "'");
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  }
  std::map<std::string, std::string> kv;
  while (true) {
    if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated config block");
    if (line == "end") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("checkpoint: malformed config line '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  Checkpoint ckpt;
  ckpt.config = ModelConfig::from_key_values(kv);
  ckpt.params = init_params(ckpt.config, 0);

  std::vector<std::pair<std::string, Tensor*>> slots;
  ckpt.params.for_each([&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
  const std::uint64_t count = read_u64(in);
  if (count != slots.size()) {
    throw std::runtime_error("checkpoint: holds " + std::to_string(count) + " tensors, config implies " +
                             std::to_string(slots.size()));
  }
  for (auto& [name, slot] : slots) {
    const std::uint64_t len = read_u64(in);
    if (len > 4096) throw std::runtime_error("checkpoint: implausible tensor name length");
    std::string stored(len, '\0');
    if (!in.read(stored.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated");
    if (stored != name) throw std::runtime_error("checkpoint: expected tensor '" + name + "', found '" + stored + "'");
    Tensor t = read_tensor(in);
    if (t.shape() != slot->shape()) {
      throw std::runtime_error("checkpoint: tensor '" + name + "' has shape " + shape_to_string(t.shape()) +
                               ", expected " + shape_to_string(slot->shape()));
    }
    *slot = std::move(t);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ModelParams& params) {
  // Written next to the destination and renamed so a failure never leaves a
  // partial checkpoint behind.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    write_checkpoint(out, config, params);
    if (!out) throw std::runtime_error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace ngram
