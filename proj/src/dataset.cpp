#include "maskx/dataset.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "maskx/png_io.hpp"
#include "maskx/rle.hpp"

namespace fs = std::filesystem;

namespace maskx {

namespace {

constexpr const char* kMagic = "maskx-dataset";
constexpr int kVersion = 1;

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  return bytes;
}

uint32_t crc_of_file(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return static_cast<uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

std::string hex64(uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string image_rel_path(int id) { return "images/" + std::to_string(id) + ".png"; }

}  // namespace

uint64_t Dataset::content_hash() const {
  uint64_t h = fnv1a64("maskx-dataset-content");
  h = fnv1a64(&canvas_h, sizeof(canvas_h), h);
  h = fnv1a64(&canvas_w, sizeof(canvas_w), h);
  h = fnv1a64(&config_hash, sizeof(config_hash), h);
  for (const SceneRecord& r : records) {
    h = fnv1a64(&r.id, sizeof(r.id), h);
    h = fnv1a64(r.image.data(), r.image.size(), h);
    for (const Instance& inst : r.instances) {
      h = fnv1a64(&inst.category, sizeof(inst.category), h);
      h = fnv1a64(&inst.box, sizeof(inst.box), h);
      const auto runs = rle_encode(inst.mask.px);
      h = fnv1a64(runs.data(), runs.size() * sizeof(int64_t), h);
    }
  }
  return h;
}

Dataset build_dataset(uint64_t seed, int count, const GenConfig& config) {
  config.validate();
  check(count >= 1, "build_dataset: count must be >= 1");
  Dataset ds;
  ds.canvas_h = config.canvas_h;
  ds.canvas_w = config.canvas_w;
  ds.config_hash = config.hash();
  ds.records.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    SceneRecord rec = generate_scene(mix_seed(seed, static_cast<uint64_t>(i)), config);
    rec.id = i;
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

void write_dataset(const Dataset& ds, const std::string& dir) {
  check(!ds.records.empty(), "write_dataset: empty dataset");
  fs::create_directories(fs::path(dir) / "images");

  for (const SceneRecord& r : ds.records)
    write_png_rgb8((fs::path(dir) / image_rel_path(r.id)).string(), r.w, r.h, r.image);

  {
    std::ofstream ann((fs::path(dir) / "annotations.rle").string(), std::ios::binary);
    check(ann.good(), "write_dataset: cannot write annotations");
    for (const SceneRecord& r : ds.records) {
      for (const Instance& inst : r.instances) {
        ann << r.id << ' ' << inst.category << ' ' << inst.box.x0 << ' ' << inst.box.y0 << ' '
            << inst.box.x1 << ' ' << inst.box.y1;
        for (int64_t run : rle_encode(inst.mask.px)) ann << ' ' << run;
        ann << '\n';
      }
    }
  }

  std::ostringstream man;
  man << kMagic << ' ' << kVersion << '\n';
  man << "config_hash " << hex64(ds.config_hash) << '\n';
  man << "canvas " << ds.canvas_h << ' ' << ds.canvas_w << '\n';
  man << "images " << ds.records.size() << '\n';
  char crcbuf[16];
  std::snprintf(crcbuf, sizeof(crcbuf), "%08x",
                crc_of_file((fs::path(dir) / "annotations.rle").string()));
  man << "crc annotations.rle " << crcbuf << '\n';
  for (const SceneRecord& r : ds.records) {
    std::snprintf(crcbuf, sizeof(crcbuf), "%08x",
                  crc_of_file((fs::path(dir) / image_rel_path(r.id)).string()));
    man << "crc " << image_rel_path(r.id) << ' ' << crcbuf << '\n';
  }
  std::ofstream mf((fs::path(dir) / "manifest").string(), std::ios::binary);
  check(mf.good(), "write_dataset: cannot write manifest");
  mf << man.str();
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream mf((fs::path(dir) / "manifest").string());
  check(mf.good(), "read_dataset: missing manifest in " + dir);
  std::string magic;
  int version = 0;
  mf >> magic >> version;
  check(magic == kMagic, "read_dataset: bad magic string");
  check(version == kVersion, "read_dataset: unsupported format version " + std::to_string(version));

  Dataset ds;
  size_t image_count = 0;
  std::vector<std::pair<std::string, uint32_t>> crcs;
  std::string key;
  while (mf >> key) {
    if (key == "config_hash") {
      std::string hex;
      mf >> hex;
      ds.config_hash = std::stoull(hex, nullptr, 16);
    } else if (key == "canvas") {
      mf >> ds.canvas_h >> ds.canvas_w;
    } else if (key == "images") {
      mf >> image_count;
    } else if (key == "crc") {
      std::string rel, hex;
      mf >> rel >> hex;
      crcs.emplace_back(rel, static_cast<uint32_t>(std::stoul(hex, nullptr, 16)));
    } else {
      fail("read_dataset: unknown manifest key '" + key + "'");
    }
  }
  check(image_count >= 1, "read_dataset: manifest lists no images");
  check(ds.canvas_h > 0 && ds.canvas_w > 0, "read_dataset: bad canvas dims");

  // verify checksums before touching any content
  for (const auto& [rel, expect] : crcs) {
    const std::string path = (fs::path(dir) / rel).string();
    check(fs::exists(path), "read_dataset: missing file " + rel);
    check(crc_of_file(path) == expect, "read_dataset: checksum failure on " + rel);
  }

  ds.records.resize(image_count);
  for (size_t i = 0; i < image_count; ++i) {
    SceneRecord& r = ds.records[i];
    r.id = static_cast<int>(i);
    int w = 0, h = 0;
    r.image = read_png_rgb8((fs::path(dir) / image_rel_path(r.id)).string(), &w, &h);
    check(w == ds.canvas_w && h == ds.canvas_h, "read_dataset: image dims mismatch");
    r.w = w;
    r.h = h;
  }

  std::ifstream ann((fs::path(dir) / "annotations.rle").string());
  check(ann.good(), "read_dataset: missing annotations.rle");
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    Instance inst;
    int image_id = 0;
    ls >> image_id >> inst.category;
    ls >> inst.box.x0 >> inst.box.y0 >> inst.box.x1 >> inst.box.y1;
    check(!ls.fail(), "read_dataset: malformed annotation line");
    std::vector<int64_t> runs;
    int64_t run;
    while (ls >> run) runs.push_back(run);
    check(image_id >= 0 && static_cast<size_t>(image_id) < image_count,
          "read_dataset: annotation references unknown image");
    check(inst.category >= 0 && inst.category < kNumCategories,
          "read_dataset: category id out of range");
    inst.mask.h = ds.canvas_h;
    inst.mask.w = ds.canvas_w;
    inst.mask.px = rle_decode(runs, static_cast<int64_t>(ds.canvas_h) * ds.canvas_w);
    check(inst.mask.area() > 0, "read_dataset: empty instance mask");
    const Box derived = derive_bbox(inst.mask);
    check(derived.x0 == inst.box.x0 && derived.y0 == inst.box.y0 && derived.x1 == inst.box.x1 &&
              derived.y1 == inst.box.y1,
          "read_dataset: stored box does not match mask bounds");
    ds.records[static_cast<size_t>(image_id)].instances.push_back(std::move(inst));
  }
  return ds;
}

}  // namespace maskx
