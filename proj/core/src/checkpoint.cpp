#include "cgdetr/checkpoint.hpp"

#include "cgdetr/errors.hpp"

#include <array>
#include <bit>
#include <fstream>

namespace cgdetr::checkpoint {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 8> kMagic{'C', 'G', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError(path.string() + ": truncated checkpoint");
  return v;
}

void put_tensor(std::ostream& os, const std::string& name, const ad::Matrix& m) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(m.cols()));
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  os.write(reinterpret_cast<const char*>(rm.data()),
           static_cast<std::streamsize>(rm.size() * sizeof(double)));
}

std::pair<std::string, ad::Matrix> get_tensor(std::istream& is, const fs::path& path) {
  const auto len = get<std::uint32_t>(is, path);
  std::string name(len, '\0');
  is.read(name.data(), len);
  const auto rows = get<std::uint32_t>(is, path);
  const auto cols = get<std::uint32_t>(is, path);
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  is.read(reinterpret_cast<char*>(rm.data()),
          static_cast<std::streamsize>(rm.size() * sizeof(double)));
  if (!is) throw IoError(path.string() + ": truncated tensor " + name);
  return {name, ad::Matrix(rm)};
}

json read_header(std::istream& is, const fs::path& path) {
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kMagic) throw IoError(path.string() + ": not a checkpoint");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get<std::uint64_t>(is, path);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw IoError(path.string() + ": truncated manifest");
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad manifest: " + e.what());
  }
}

}  // namespace

void save(const fs::path& path, const Trainer& trainer) {
  json history = json::array();
  for (const auto& r : trainer.history()) history.push_back(r);
  json manifest{{"version", kVersion},
                {"config", trainer.config()},
                {"seed", trainer.seed()},
                {"epoch", trainer.epoch()},
                {"step", trainer.step()},
                {"adam_steps", trainer.optimizer().steps()},
                {"history", history}};
  const std::string text = manifest.dump();

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(os, kVersion);
    put<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto& entries = trainer.model().parameters().entries();
    put<std::uint32_t>(os, static_cast<std::uint32_t>(3 * entries.size()));
    for (const auto& [name, v] : entries) put_tensor(os, "param/" + name, v.value());
    const auto& m = trainer.optimizer().first_moments();
    const auto& s = trainer.optimizer().second_moments();
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(os, "adam.m/" + entries[i].first, m[i]);
    for (std::size_t i = 0; i < entries.size(); ++i) put_tensor(os, "adam.v/" + entries[i].first, s[i]);
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

json read_manifest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_header(is, path);
}

std::unique_ptr<Trainer> load(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  json manifest = read_header(is, path);
  RunConfig cfg = manifest.at("config").get<RunConfig>();
  auto trainer = std::make_unique<Trainer>(cfg, manifest.at("seed").get<std::uint64_t>());

  const auto& entries = trainer->model().parameters().entries();
  const auto count = get<std::uint32_t>(is, path);
  if (count != 3 * entries.size()) {
    throw ShapeError(path.string() + ": tensor count " + std::to_string(count) +
                     " does not match the model layout");
  }
  auto expect = [&](const std::string& want, const ad::Var& like) {
    auto [name, m] = get_tensor(is, path);
    if (name != want) throw ShapeError(path.string() + ": expected " + want + ", found " + name);
    if (m.rows() != like.rows() || m.cols() != like.cols()) {
      throw ShapeError(path.string() + ": shape mismatch for " + name);
    }
    return m;
  };
  for (const auto& [name, v] : entries) {
    ad::Var p = v;
    p.mutable_value() = expect("param/" + name, v);
  }
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> s;
  for (const auto& [name, v] : entries) m.push_back(expect("adam.m/" + name, v));
  for (const auto& [name, v] : entries) s.push_back(expect("adam.v/" + name, v));
  trainer->optimizer().restore(manifest.at("adam_steps").get<long long>(), std::move(m), std::move(s));

  std::vector<EpochRecord> history;
  for (const auto& r : manifest.at("history")) history.push_back(r.get<EpochRecord>());
  trainer->restore_progress(manifest.at("epoch").get<int>(), manifest.at("step").get<long long>(),
                            std::move(history));
  return trainer;
}

}  // namespace cgdetr::checkpoint
