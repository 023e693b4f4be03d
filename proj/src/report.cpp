#include "cdseg/report.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "cdseg/dataset.hpp"

namespace cdseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// run_dir first, then its subdirectories in name order
std::vector<fs::path> search_dirs(const fs::path& run_dir) {
  std::vector<fs::path> dirs{run_dir};
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    if (e.is_directory() && e.path().filename() != kHeatmapDir) subs.push_back(e.path());
  }
  std::sort(subs.begin(), subs.end());
  dirs.insert(dirs.end(), subs.begin(), subs.end());
  return dirs;
}

std::optional<fs::path> find_artifact(const std::vector<fs::path>& dirs, const std::string& name) {
  for (const auto& d : dirs) {
    if (fs::is_regular_file(d / name)) return d / name;
  }
  return std::nullopt;
}

}  // namespace

std::string git_blob_sha1(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), digest);
  std::ostringstream os;
  for (unsigned char c : digest) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(c);
  return os.str();
}

std::string dataset_hash(const fs::path& root) { return git_blob_sha1(read_file(root / "manifest.json")); }

std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

json RunManifest::to_json() const {
  return {{"command", command},  {"config", config},     {"dataset_hash", dataset_hash}, {"seed", seed},
          {"started", started},  {"finished", finished.empty() ? json(nullptr) : json(finished)},
          {"outputs", outputs}};
}

void RunManifest::write(const fs::path& dir) const {
  fs::create_directories(dir);
  std::ofstream out(dir / kRunManifestFile, std::ios::binary);
  out << to_json().dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write run manifest in " + dir.string());
}

Report render_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw std::invalid_argument("run directory not found: " + run_dir.string());
  const auto dirs = search_dirs(run_dir);
  Report r;
  std::ostringstream md;
  md << "# Run report\n\n";

  struct Table {
    const char* file;
    const char* title;
  };
  const Table tables[] = {{kSubsetGridFile, "Missing-modality subset grid (test split, Dice %)"},
                          {kAblationFile, "Ablation ladder (seed-averaged Dice %)"},
                          {kSweepFile, "Loss-weight sensitivity (seed-averaged Dice %)"}};
  bool any = false;
  for (const auto& t : tables) {
    const auto path = find_artifact(dirs, t.file);
    if (!path) {
      r.missing.emplace_back(t.file);
      continue;
    }
    any = true;
    md << "## " << t.title << "\n\nSource: `" << fs::relative(*path, run_dir).generic_string() << "`\n\n"
       << read_file(*path) << '\n';
  }

  if (const auto path = find_artifact(dirs, kDisentanglementFile)) {
    any = true;
    md << "## Disentanglement diagnostics\n\nSource: `" << fs::relative(*path, run_dir).generic_string()
       << "`\n\n```json\n" << json::parse(read_file(*path)).dump(2) << "\n```\n\n";
  } else {
    r.missing.emplace_back(kDisentanglementFile);
  }

  std::vector<fs::path> pngs;
  for (const auto& d : dirs) {
    const fs::path hd = d / kHeatmapDir;
    if (!fs::is_directory(hd)) continue;
    for (const auto& e : fs::directory_iterator(hd)) {
      if (e.path().extension() == ".png") pngs.push_back(e.path());
    }
    if (!pngs.empty()) break;
  }
  std::sort(pngs.begin(), pngs.end());
  if (pngs.empty()) {
    r.missing.emplace_back(std::string(kHeatmapDir) + "/*.png");
  } else {
    any = true;
    md << "## Causality-map heatmaps\n\n";
    for (const auto& p : pngs) {
      const std::string rel = fs::relative(p, run_dir).generic_string();
      md << "- [" << p.filename().string() << "](" << rel << ")\n";
    }
    md << '\n';
  }

  if (!any) md << "_No artifacts found in this directory._\n\n";
  if (!r.missing.empty()) {
    md << "## Missing artifacts\n\n";
    for (const auto& m : r.missing) md << "- `" << m << "`\n";
  }
  r.markdown = md.str();
  return r;
}

}  // namespace cdseg
