#pragma once

// On-disk formats: netpbm rasters, the JSON-lines dataset manifest,
// checkpoints (JSON header + float32 blob), training logs and metrics.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rbc/data_synth.hpp"
#include "rbc/eval.hpp"
#include "rbc/losses.hpp"
#include "rbc/model.hpp"
#include "rbc/trainer.hpp"

namespace rbc::io {

namespace fs = std::filesystem;
using nlohmann::json;

class IoError : public std::runtime_error {
 public:
  IoError(const fs::path& path, const std::string& what) : std::runtime_error(path.string() + ": " + what) {}
};

inline std::ofstream open_out(const fs::path& path, bool binary = false) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, binary ? std::ios::binary : std::ios::out);
  if (!f) throw IoError(path, "cannot open for writing");
  return f;
}

inline std::ifstream open_in(const fs::path& path, bool binary = false) {
  std::ifstream f(path, binary ? std::ios::binary : std::ios::in);
  if (!f) throw IoError(path, "cannot open for reading");
  return f;
}

inline void write_text(const fs::path& path, const std::string& text) {
  auto f = open_out(path);
  f << text;
  if (!f) throw IoError(path, "write failed");
}

inline std::string read_text(const fs::path& path) {
  auto f = open_in(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------- rasters

namespace detail {

inline std::uint8_t quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

/// Reads a binary netpbm header ("P5"/"P6", width, height, maxval 255).
inline void read_pnm_header(std::istream& in, const fs::path& path, const char* magic, int& w, int& h) {
  std::string m;
  in >> m;
  if (m != magic) throw IoError(path, std::string("expected a ") + magic + " raster");
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
      in >> std::ws;
    }
    int v = -1;
    in >> v;
    if (!in) throw IoError(path, "truncated raster header");
    return v;
  };
  w = next_int();
  h = next_int();
  const int maxval = next_int();
  if (w <= 0 || h <= 0 || maxval != 255) throw IoError(path, "unsupported raster geometry");
  in.get();  // single whitespace before the payload
}

}  // namespace detail

/// 8-bit RGB (P6). Values are clamped to [0,1] and rounded to 1/255 steps.
inline void write_ppm(const fs::path& path, const Tensor<float>& image) {
  if (image.channels != 3) throw ShapeError("write_ppm: need 3 channels");
  auto f = open_out(path, true);
  f << "P6\n" << image.width << " " << image.height << "\n255\n";
  std::vector<std::uint8_t> buf(image.plane() * 3);
  for (std::size_t i = 0; i < image.plane(); ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + c] = detail::quantize(image.channel(c)[i]);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError(path, "write failed");
}

inline Tensor<float> read_ppm(const fs::path& path) {
  auto f = open_in(path, true);
  int w = 0, h = 0;
  detail::read_pnm_header(f, path, "P6", w, h);
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * 3);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError(path, "truncated raster payload");
  Tensor<float> t(3, h, w);
  for (std::size_t i = 0; i < t.plane(); ++i)
    for (int c = 0; c < 3; ++c) t.channel(c)[i] = static_cast<float>(buf[i * 3 + c]) / 255.0f;
  return t;
}

/// Single-channel 8-bit index raster (P5).
inline void write_pgm(const fs::path& path, const Mask& mask) {
  auto f = open_out(path, true);
  f << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(mask.data.data()), static_cast<std::streamsize>(mask.data.size()));
  if (!f) throw IoError(path, "write failed");
}

inline Mask read_pgm(const fs::path& path) {
  auto f = open_in(path, true);
  int w = 0, h = 0;
  detail::read_pnm_header(f, path, "P5", w, h);
  Mask m(h, w);
  f.read(reinterpret_cast<char*>(m.data.data()), static_cast<std::streamsize>(m.data.size()));
  if (!f) throw IoError(path, "truncated raster payload");
  return m;
}

// ---------------------------------------------------------------- datasets

/// Writes images/<id>.ppm, masks/<id>.pgm and manifest.jsonl under `dir`.
inline void save_dataset(const fs::path& dir, const std::vector<LabeledImage>& items) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  auto manifest = open_out(dir / "manifest.jsonl");
  for (const auto& it : items) {
    const std::string image_rel = "images/" + it.id + ".ppm", mask_rel = "masks/" + it.id + ".pgm";
    write_ppm(dir / image_rel, it.image);
    write_pgm(dir / mask_rel, it.mask);
    manifest << json{{"id", it.id}, {"image", image_rel}, {"mask", mask_rel}, {"classes", class_inventory(it.mask)}}
                    .dump()
             << "\n";
  }
  if (!manifest) throw IoError(dir / "manifest.jsonl", "write failed");
}

inline std::vector<LabeledImage> load_dataset(const fs::path& dir) {
  auto manifest = open_in(dir / "manifest.jsonl");
  std::vector<LabeledImage> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw IoError(dir / "manifest.jsonl", "line " + std::to_string(lineno) + ": " + e.what());
    }
    LabeledImage it;
    it.id = j.at("id").get<std::string>();
    it.image = read_ppm(dir / j.at("image").get<std::string>());
    it.mask = read_pgm(dir / j.at("mask").get<std::string>());
    if (it.mask.height != it.image.height || it.mask.width != it.image.width)
      throw IoError(dir / j.at("mask").get<std::string>(), "mask extent differs from its image");
    out.push_back(std::move(it));
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[8] = {'R', 'B', 'C', 'K', 'P', 'T', '0', '1'};

inline json to_json(const ArchConfig& a) {
  return {{"in_channels", a.in_channels}, {"height", a.height}, {"width", a.width},
          {"width0", a.width0},           {"width1", a.width1}, {"width2", a.width2}};
}

inline ArchConfig arch_from_json(const json& j) {
  ArchConfig a;
  a.in_channels = j.at("in_channels");
  a.height = j.at("height");
  a.width = j.at("width");
  a.width0 = j.at("width0");
  a.width1 = j.at("width1");
  a.width2 = j.at("width2");
  return a;
}

struct Checkpoint {
  SegModel<float> model;
  int step = 0;
};

/// Layout: 8-byte magic, uint64 header length, JSON header, float32 blob
/// (per layer: weights then biases, little-endian).
inline void save_checkpoint(const fs::path& path, const SegModel<float>& model, int step) {
  json layers = json::array();
  std::uint64_t count = 0;
  for (int l = 0; l < static_cast<int>(model.layers.size()); ++l) {
    const auto& c = model.layers[l];
    layers.push_back({{"name", layer_name(l)},
                      {"in", c.in},
                      {"out", c.out},
                      {"kernel", c.kernel},
                      {"stride", c.stride},
                      {"offset", count},
                      {"weights", c.weight.size()},
                      {"biases", c.bias.size()}});
    count += c.weight.size() + c.bias.size();
  }
  const json header{{"format", "rbc-checkpoint"}, {"version", 1},
                    {"dtype", "float32"},         {"step", step},
                    {"arch", to_json(model.arch)}, {"class_inventory", model.class_inventory},
                    {"layers", layers},           {"parameters", count}};
  const std::string text = header.dump();
  const fs::path tmp = fs::path(path).concat(".tmp");
  {
    auto f = open_out(tmp, true);
    f.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint64_t len = text.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof len);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : model.layers) {
      f.write(reinterpret_cast<const char*>(c.weight.data()), static_cast<std::streamsize>(c.weight.size() * 4));
      f.write(reinterpret_cast<const char*>(c.bias.data()), static_cast<std::streamsize>(c.bias.size() * 4));
    }
    if (!f) throw IoError(tmp, "write failed");
  }
  fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  static_assert(sizeof(float) == 4);
  auto f = open_in(path, true);
  char magic[8];
  f.read(magic, sizeof magic);
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError(path, "not a checkpoint");
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!f || len > (1u << 24)) throw IoError(path, "corrupt checkpoint header");
  std::string text(len, '\0');
  f.read(text.data(), static_cast<std::streamsize>(len));
  if (!f) throw IoError(path, "truncated checkpoint header");
  const json h = json::parse(text);
  Checkpoint ck;
  ck.step = h.at("step");
  ck.model.arch = arch_from_json(h.at("arch"));
  ck.model.class_inventory = h.at("class_inventory").get<std::vector<int>>();
  for (const auto& l : h.at("layers")) {
    Conv2d<float> c(l.at("in"), l.at("out"), l.at("kernel"), l.at("stride"));
    if (c.weight.size() != l.at("weights").get<std::size_t>() || c.bias.size() != l.at("biases").get<std::size_t>())
      throw IoError(path, "layer geometry does not match its parameter counts");
    f.read(reinterpret_cast<char*>(c.weight.data()), static_cast<std::streamsize>(c.weight.size() * 4));
    f.read(reinterpret_cast<char*>(c.bias.data()), static_cast<std::streamsize>(c.bias.size() * 4));
    if (!f) throw IoError(path, "truncated parameter blob");
    ck.model.layers.push_back(std::move(c));
  }
  if (ck.model.layers.size() != kNumLayers) throw IoError(path, "unexpected layer count");
  int inventory = 1;
  for (int n : ck.model.class_inventory) inventory += n;
  if (inventory != ck.model.num_classes()) throw IoError(path, "class inventory does not match the head");
  return ck;
}

// ---------------------------------------------------------------- logs and metrics

inline json to_json(const LossBreakdown& b) {
  json j{{"l_ps", b.l_ps}, {"l_kd", b.l_kd}, {"l_dup", b.l_dup},   {"total", b.total},
         {"alpha", b.alpha}, {"gamma", b.gamma}, {"tau", b.tau}, {"eps_clamped", b.eps_clamped}};
  j["l_bps"] = b.l_bps ? json(*b.l_bps) : json(nullptr);
  j["l_ctx"] = b.l_ctx ? json(*b.l_ctx) : json(nullptr);
  j["betas"] = b.betas;
  return j;
}

/// One JSON object per optimization step.
inline void append_training_log(std::ostream& out, const std::vector<EpochLog>& logs, std::uint64_t seed,
                                const std::string& ablation) {
  for (const auto& e : logs)
    for (std::size_t i = 0; i < e.per_batch.size(); ++i) {
      json j = to_json(e.per_batch[i]);
      j["seed"] = seed;
      j["ablation"] = ablation;
      j["step"] = e.step;
      j["epoch"] = e.epoch;
      j["batch"] = i;
      out << j.dump() << "\n";
    }
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

inline json to_json(const GroupMiou& g) {
  return {{"initial", optional_json(g.initial)},
          {"incremented", optional_json(g.incremented)},
          {"all", optional_json(g.all)}};
}

inline GroupMiou group_from_json(const json& j) {
  auto opt = [](const json& v) { return v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>()); };
  return {opt(j.at("initial")), opt(j.at("incremented")), opt(j.at("all"))};
}

inline json to_json(const MetricsReport& r) {
  json per_class = json::array();
  for (const auto& v : r.per_class_iou) per_class.push_back(optional_json(v));
  json history = json::array();
  for (const auto& g : r.per_step_history) history.push_back(to_json(g));
  return {{"per_class_iou", per_class}, {"group_miou", to_json(r.group_miou)}, {"per_step_history", history}};
}

inline MetricsReport metrics_from_json(const json& j) {
  MetricsReport r;
  for (const auto& v : j.at("per_class_iou"))
    r.per_class_iou.push_back(v.is_null() ? std::optional<double>() : std::optional<double>(v.get<double>()));
  r.group_miou = group_from_json(j.at("group_miou"));
  for (const auto& g : j.at("per_step_history")) r.per_step_history.push_back(group_from_json(g));
  return r;
}

inline std::string format_value(const std::optional<double>& v) {
  if (!v) return "";
  std::ostringstream ss;
  ss << std::setprecision(17) << *v;
  return ss.str();
}

/// Table-shaped CSV: one row per method, columns initial / incremented / all.
inline std::string metrics_table_csv(const std::vector<std::pair<std::string, GroupMiou>>& rows) {
  std::string out = "method,initial,incremented,all\n";
  for (const auto& [name, g] : rows)
    out += name + "," + format_value(g.initial) + "," + format_value(g.incremented) + "," + format_value(g.all) + "\n";
  return out;
}

}  // namespace rbc::io
