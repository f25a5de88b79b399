#include "dnbp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dnbp/error.hpp"

namespace dnbp {

namespace {

constexpr char kMagic[] = "DNBPCKPT";
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

}  // namespace

std::string checkpoint_bytes(const Potentials& pots) {
  nlohmann::json h;
  h["version"] = kVersion;
  h["graph"] = pots.graph().name();
  h["graph_text"] = pots.graph().to_text();
  auto params = nlohmann::json::array();
  for (const auto& p : pots.params()) params.push_back({{"name", p.name}, {"group", p.group}, {"shape", p.value.shape}});
  h["params"] = std::move(params);

  std::string out(kMagic, 8);
  out += h.dump();
  out += '\n';
  for (const auto& p : pots.params()) {
    const auto* bytes = reinterpret_cast<const char*>(p.value.data.data());
    out.append(bytes, p.value.data.size() * sizeof(float));
  }
  return out;
}

void save_checkpoint(const Potentials& pots, const std::string& path) {
  const std::string bytes = checkpoint_bytes(pots);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open checkpoint '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint '" + path + "'");
}

std::unique_ptr<Potentials> checkpoint_from_bytes(const std::string& bytes) {
  if (bytes.size() < 8 || bytes.compare(0, 8, kMagic) != 0) throw DataError("not a dnbp checkpoint (bad magic)");
  const auto nl = bytes.find('\n', 8);
  if (nl == std::string::npos) throw DataError("checkpoint header is truncated");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(8, nl - 8));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (h.value("version", -1) != kVersion)
    throw DataError("unsupported checkpoint version " + h.value("version", nlohmann::json(-1)).dump());
  auto graph = GraphSpec::parse(h.at("graph_text").get<std::string>());
  auto pots = std::make_unique<Potentials>(graph, 0);
  auto& store = pots->params();
  const auto& entries = h.at("params");
  if (static_cast<int>(entries.size()) != store.size())
    throw DataError("checkpoint has " + std::to_string(entries.size()) + " parameters, graph '" + graph.name() +
                    "' needs " + std::to_string(store.size()));
  std::size_t off = nl + 1;
  for (int i = 0; i < store.size(); ++i) {
    const auto& e = entries[i];
    Param& p = store[i];
    if (e.at("name").get<std::string>() != p.name || e.at("shape").get<std::vector<int>>() != p.value.shape)
      throw DataError("checkpoint parameter " + std::to_string(i) + " ('" + e.at("name").get<std::string>() +
                      "') does not match '" + p.name + "' " + shape_str(p.value.shape));
    const std::size_t n = p.value.data.size() * sizeof(float);
    if (off + n > bytes.size()) throw DataError("checkpoint data truncated at parameter '" + p.name + "'");
    std::memcpy(p.value.data.data(), bytes.data() + off, n);
    off += n;
  }
  if (off != bytes.size()) throw DataError("checkpoint has trailing bytes");
  return pots;
}

std::unique_ptr<Potentials> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return checkpoint_from_bytes(ss.str());
}

void copy_parameters(const Potentials& src, Potentials& dst) {
  if (src.params().size() != dst.params().size()) throw ShapeError("parameter layouts differ");
  for (int i = 0; i < src.params().size(); ++i) {
    if (src.params()[i].value.shape != dst.params()[i].value.shape)
      throw ShapeError("parameter '" + src.params()[i].name + "' shape differs");
    dst.params()[i].value.data = src.params()[i].value.data;
  }
}

}  // namespace dnbp
