#include "heros/checkpoint.hpp"

#include "heros/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace heros {

namespace {

constexpr const char* kFormat = "heros-checkpoint";
constexpr int kFormatVersion = 1;

void put_le(std::ostream& out, double x) {
  auto bits = std::bit_cast<std::uint64_t>(x);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

double get_le(const unsigned char* b) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

nlohmann::json arch_to_json(const ArchConfig& arch) {
  return {{"window", arch.window}, {"gen_channels", arch.gen_channels}, {"disc_channels", arch.disc_channels}};
}

ArchConfig arch_from_json(const nlohmann::json& j) {
  ArchConfig a;
  a.window = j.at("window").get<Index>();
  a.gen_channels = j.at("gen_channels").get<Index>();
  a.disc_channels = j.at("disc_channels").get<Index>();
  a.validate();
  return a;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto& p = ckpt.params;
  nlohmann::json views = nlohmann::json::array();
  for (const auto& v : p.views) views.push_back({v.name, v.offset, v.rows, v.cols});
  const nlohmann::json header = {
      {"format", kFormat}, {"format_version", kFormatVersion}, {"arch", arch_to_json(p.arch)},
      {"seed", p.seed},    {"step", ckpt.step},                {"scale", ckpt.scale},
      {"param_count", p.values.size()}, {"views", views},      {"config", ckpt.config},
  };
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (Index i = 0; i < p.values.size(); ++i) put_le(out, p.values[i]);
  if (!out) throw IoError("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty checkpoint " + path.string(), 1);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("checkpoint header is not JSON: " + std::string(e.what()), 1);
  }
  if (header.value("format", "") != kFormat || header.value("format_version", 0) != kFormatVersion)
    throw ParseError("not a heros checkpoint (format tag mismatch)", 1);

  Checkpoint ck;
  try {
    ck.params = init_params(arch_from_json(header.at("arch")), header.at("seed").get<std::uint64_t>());
    ck.step = header.at("step").get<std::uint64_t>();
    ck.scale = header.at("scale").get<double>();
    ck.config = header.value("config", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad checkpoint header: " + std::string(e.what()), 1);
  }
  const auto count = header.at("param_count").get<Index>();
  if (count != ck.params.values.size())
    throw ParseError("checkpoint parameter count does not match its architecture", 1);

  std::vector<unsigned char> raw(static_cast<std::size_t>(count) * 8);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw ParseError("truncated checkpoint parameter block", 0);
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes after checkpoint parameters", 0);
  for (Index i = 0; i < count; ++i) ck.params.values[i] = get_le(raw.data() + 8 * i);
  if (!ck.params.values.allFinite()) throw ParseError("checkpoint holds non-finite parameters", 0);
  return ck;
}

}  // namespace heros
