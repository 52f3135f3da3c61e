#include "unlearn/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace unlearn {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'T', 'L', 'M', '1'};

template <typename V>
void put(std::ofstream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename V>
V get(std::ifstream& in, const std::filesystem::path& path) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v))) throw ValidationError(path.string() + ": truncated header");
  return v;
}

nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path, std::size_t* header_size) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError(path.string() + ": bad magic, not a TLM1 tensor file");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kTensorFileVersion) {
    throw ValidationError(path.string() + ": unsupported format version " + std::to_string(version));
  }
  const auto len = get<std::uint64_t>(in, path);
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError(path.string() + ": truncated header");
  if (header_size) *header_size = 16 + len;
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(path.string() + ": malformed header (" + e.what() + ")");
  }
}

}  // namespace

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
  if (file.names.size() != file.tensors.size()) throw ValidationError("tensor name/count mismatch");
  nlohmann::json header = file.header.is_null() ? nlohmann::json::object() : file.header;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    const auto& t = file.tensors[i];
    table.push_back({{"name", file.names[i]}, {"shape", {t.rows(), t.cols()}}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(t.size()) * sizeof(float);
  }
  header["tensors"] = table;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write " + path.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kTensorFileVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : file.tensors) {
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw RuntimeError("write failed for " + path.string());
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  TensorFile file;
  std::size_t header_size = 0;
  file.header = read_header(in, path, &header_size);
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t expected = header_size;
  for (const auto& entry : file.header.at("tensors")) {
    const auto rows = entry.at("shape").at(0).get<Eigen::Index>();
    const auto cols = entry.at("shape").at(1).get<Eigen::Index>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    if (rows < 0 || cols < 0 || header_size + offset != expected) {
      throw ValidationError(path.string() + ": inconsistent tensor table at '" + entry.at("name").get<std::string>() + "'");
    }
    MatrixF t(rows, cols);
    if (!in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)))) {
      throw ValidationError(path.string() + ": truncated tensor data");
    }
    expected += static_cast<std::uint64_t>(t.size()) * sizeof(float);
    file.names.push_back(entry.at("name").get<std::string>());
    file.tensors.push_back(std::move(t));
  }
  if (expected != file_size) throw ValidationError(path.string() + ": file size does not match tensor table");
  file.header.erase("tensors");
  return file;
}

std::size_t tensor_file_header_size(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open " + path.string());
  std::size_t size = 0;
  read_header(in, path, &size);
  return size;
}

}  // namespace unlearn
