#include "cdseg/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include "cdseg/rng.hpp"

namespace cdseg {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kSplitStream = 0x5B117;

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xFFU) << 24) | ((v & 0xFF00U) << 8) | ((v >> 8) & 0xFF00U) | (v >> 24);
  }
}

void write_f32(const fs::path& path, const FloatVolume& v) {
  std::vector<std::uint32_t> words(v.data.size());
  for (std::size_t i = 0; i < words.size(); ++i) {
    words[i] = to_little(std::bit_cast<std::uint32_t>(v.data[i]));
  }
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(words.data()),
            static_cast<std::streamsize>(words.size() * sizeof(std::uint32_t)));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::vector<char> read_bytes(const fs::path& path, std::size_t expected) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("missing volume file " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size != expected) {
    throw std::runtime_error(path.string() + ": expected " + std::to_string(expected) +
                             " bytes, found " + std::to_string(size));
  }
  std::vector<char> buf(size);
  in.seekg(0);
  in.read(buf.data(), static_cast<std::streamsize>(size));
  return buf;
}

FloatVolume read_f32(const fs::path& path, GridShape shape) {
  FloatVolume v(shape);
  const auto buf = read_bytes(path, v.data.size() * 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) {
    std::uint32_t w = 0;
    std::memcpy(&w, buf.data() + i * 4, 4);
    v.data[i] = std::bit_cast<float>(to_little(w));
  }
  return v;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("missing file " + path.string());
  return json::parse(in);
}

json seeds_for(const PhantomConfig& c, int index) {
  json styles = json::object();
  for (Modality m : kAllModalities) {
    styles[std::string(modality_name(m))] =
        derive_seed(c.master_seed, static_cast<std::uint64_t>(index), 1 + index_of(m));
  }
  return json{{"anatomy", derive_seed(c.master_seed, static_cast<std::uint64_t>(index), 0)},
              {"style", styles}};
}

}  // namespace

const std::vector<std::string>& DatasetManifest::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

SplitCounts split_counts(int cases, const std::array<double, 3>& f) {
  const double total = f[0] + f[1] + f[2];
  SplitCounts s;
  s.train = static_cast<int>(std::lround(cases * f[0] / total));
  s.val = static_cast<int>(std::lround(cases * f[1] / total));
  s.train = std::min(s.train, cases);
  s.val = std::min(s.val, cases - s.train);
  s.test = cases - s.train - s.val;
  return s;
}

std::string case_name(int index) {
  std::ostringstream os;
  os << "case_" << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

int num_workers() {
  int n = static_cast<int>(std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CDSEG_NUM_WORKERS")) {
    const int v = std::atoi(env);
    if (v > 0) n = v;
  }
  return std::max(1, n);
}

MultimodalSample generate_case(const PhantomConfig& config, int index) {
  const json seeds = seeds_for(config, index);
  const AnatomyLatent anatomy =
      sample_anatomy(seeds.at("anatomy").get<std::uint64_t>(), config.grid_shape);
  MultimodalSample s;
  s.name = case_name(index);
  s.shape = config.grid_shape;
  s.label_map = anatomy.label_map;
  s.availability = Availability::all();
  for (Modality m : kAllModalities) {
    const auto seed = seeds.at("style").at(std::string(modality_name(m))).get<std::uint64_t>();
    auto [vol, style] = render_modality(anatomy, m, seed);
    s.volumes[index_of(m)] = std::move(vol);
    s.style_records[index_of(m)] = style;
  }
  return s;
}

void write_case(const MultimodalSample& s, const fs::path& dir, const json& seeds) {
  fs::create_directories(dir);
  json records = json::object();
  json mods = json::array();
  for (Modality m : kAllModalities) {
    if (!s.availability.has(m)) continue;
    const std::string name(modality_name(m));
    mods.push_back(name);
    write_f32(dir / (name + ".f32"), s.volumes[index_of(m)]);
    if (s.style_records[index_of(m)]) records[name] = to_json(*s.style_records[index_of(m)]);
  }
  {
    std::ofstream out(dir / "label.u8", std::ios::binary);
    out.write(reinterpret_cast<const char*>(s.label_map.data.data()),
              static_cast<std::streamsize>(s.label_map.data.size()));
    if (!out) throw std::runtime_error("failed writing labels for " + s.name);
  }
  const json meta{{"shape", json::array({s.shape.d, s.shape.h, s.shape.w})},
                  {"dtype", "float32"},
                  {"label_dtype", "uint8"},
                  {"endianness", "little"},
                  {"order", "DHW"},
                  {"modalities", mods},
                  {"style_records", records},
                  {"seeds", seeds}};
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

DatasetManifest generate_dataset(const PhantomConfig& config, const fs::path& out, bool overwrite) {
  validate(config);
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw std::invalid_argument("output path " + out.string() + " exists and is not a directory");
  }
  if (fs::exists(out)) {
    // a run manifest written by the caller just before generation is not data
    std::vector<fs::path> existing;
    for (const auto& entry : fs::directory_iterator(out)) {
      if (entry.path().filename() != kRunManifestFile) existing.push_back(entry.path());
    }
    if (!existing.empty() && !overwrite) {
      throw std::invalid_argument("output directory " + out.string() +
                                  " is not empty (pass --overwrite to replace it)");
    }
    for (const auto& p : existing) fs::remove_all(p);
  }
  fs::create_directories(out / "cases");

  const int workers = std::min(num_workers(), config.cases);
  std::atomic<int> next{0};
  std::vector<std::string> errors(static_cast<std::size_t>(workers));
  auto work = [&](int w) {
    try {
      for (int i = next++; i < config.cases; i = next++) {
        const MultimodalSample s = generate_case(config, i);
        write_case(s, out / "cases" / s.name, seeds_for(config, i));
      }
    } catch (const std::exception& e) {
      errors[static_cast<std::size_t>(w)] = e.what();
      next = config.cases;
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw std::runtime_error("dataset generation failed: " + e);
  }

  std::vector<int> order(static_cast<std::size_t>(config.cases));
  for (int i = 0; i < config.cases; ++i) order[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(config.master_seed, kSplitStream));
  rng.shuffle(order.begin(), order.end());
  const SplitCounts counts = split_counts(config.cases, config.split);

  DatasetManifest m;
  m.root = out;
  m.config = to_json(config);
  m.grid_shape = config.grid_shape;
  auto take = [&](int from, int n) {
    std::vector<int> idx(order.begin() + from, order.begin() + from + n);
    std::sort(idx.begin(), idx.end());
    std::vector<std::string> names;
    for (int i : idx) names.push_back(case_name(i));
    return names;
  };
  m.train = take(0, counts.train);
  m.val = take(counts.train, counts.val);
  m.test = take(counts.train + counts.val, counts.test);

  const json manifest{{"format_version", 1},
                      {"config", m.config},
                      {"cases", config.cases},
                      {"splits", {{"train", m.train}, {"val", m.val}, {"test", m.test}}}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return m;
}

DatasetManifest load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) throw std::invalid_argument("no dataset manifest at " + path.string());
  const json j = read_json(path);
  DatasetManifest m;
  m.root = root;
  m.config = j.at("config");
  m.grid_shape = phantom_config_from_json(m.config).grid_shape;
  const json& splits = j.at("splits");
  m.train = splits.at("train").get<std::vector<std::string>>();
  m.val = splits.at("val").get<std::vector<std::string>>();
  m.test = splits.at("test").get<std::vector<std::string>>();
  return m;
}

MultimodalSample load_case(const DatasetManifest& manifest, const std::string& name) {
  const fs::path dir = manifest.root / "cases" / name;
  const json meta = read_json(dir / "meta.json");
  if (meta.at("order").get<std::string>() != "DHW" || meta.at("dtype").get<std::string>() != "float32") {
    throw std::runtime_error(dir.string() + ": unsupported container layout");
  }
  const auto dims = meta.at("shape").get<std::vector<std::int64_t>>();
  if (dims.size() != 3) throw std::runtime_error(dir.string() + ": shape must have 3 entries");
  MultimodalSample s;
  s.name = name;
  s.shape = GridShape{dims[0], dims[1], dims[2]};
  for (const auto& mod : meta.at("modalities")) {
    const Modality m = modality_from_name(mod.get<std::string>());
    s.volumes[index_of(m)] = read_f32(dir / (mod.get<std::string>() + ".f32"), s.shape);
    s.availability.set(m);
    const auto& rec = meta.at("style_records");
    if (rec.contains(mod.get<std::string>())) {
      s.style_records[index_of(m)] = style_from_json(rec.at(mod.get<std::string>()));
    }
  }
  s.label_map = LabelVolume(s.shape);
  const auto buf = read_bytes(dir / "label.u8", s.label_map.data.size());
  std::memcpy(s.label_map.data.data(), buf.data(), buf.size());
  for (auto l : s.label_map.data) {
    if (l >= kNumClasses) throw std::runtime_error(dir.string() + ": label value out of range");
  }
  return s;
}

std::vector<MultimodalSample> load_split(const DatasetManifest& manifest, std::string_view split,
                                         int limit) {
  const auto& names = manifest.split(split);
  const std::size_t n =
      limit > 0 ? std::min(names.size(), static_cast<std::size_t>(limit)) : names.size();
  std::vector<MultimodalSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(load_case(manifest, names[i]));
  return out;
}

}  // namespace cdseg
