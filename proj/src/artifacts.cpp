#include "f3r/artifacts.hpp"

#include <fstream>
#include <sstream>

#include "f3r/binary_io.hpp"
#include "f3r/error.hpp"

namespace f3r {

namespace {

void put_points(io::BinaryWriter& out, const Pointmap& pm, std::vector<float>& buf) {
  buf.resize(pm.size() * 3);
  for (std::size_t i = 0; i < pm.size(); ++i)
    for (int c = 0; c < 3; ++c) buf[i * 3 + c] = static_cast<float>(pm.points[i][c]);
  out.put_array<float>(buf);
}

void put_conf(io::BinaryWriter& out, const ConfidenceMap& conf, std::vector<float>& buf) {
  buf.resize(conf.size());
  for (std::size_t i = 0; i < conf.size(); ++i) buf[i] = static_cast<float>(conf.raw(i));
  out.put_array<float>(buf);
}

void get_head(io::BinaryReader& in, std::size_t h, std::size_t w, Frame frame, std::vector<float>& buf,
              std::vector<Pointmap>& points, std::vector<ConfidenceMap>& confs) {
  Pointmap pm(h, w, frame);
  buf.resize(h * w * 3);
  in.get_array<float>(buf);
  for (std::size_t i = 0; i < h * w; ++i)
    for (int c = 0; c < 3; ++c) pm.points[i][c] = buf[i * 3 + c];
  buf.resize(h * w);
  in.get_array<float>(buf);
  std::vector<double> raw(buf.begin(), buf.end());
  in.get_array<std::uint8_t>(pm.valid);
  points.push_back(std::move(pm));
  confs.emplace_back(h, w, std::move(raw));
}

}  // namespace

void write_predictions(std::span<const PredictionRecord> records, const std::string& path) {
  io::BinaryWriter out(path);
  out.magic(std::string_view(kPredictionMagic, 8));
  out.put<std::uint32_t>(kPredictionVersion);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(records.size()));
  std::vector<float> buf;
  for (const auto& r : records) {
    const std::size_t n = r.bundle.view_count();
    const std::size_t h = r.images.height;
    const std::size_t w = r.images.width;
    if (r.views.size() != n || r.slots.size() != n || r.images.count != n) {
      throw Error(ErrorKind::Shape, "prediction record fields disagree on the view count");
    }
    out.put<std::uint32_t>(r.sample);
    out.put<std::uint32_t>(static_cast<std::uint32_t>(n));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    out.put<std::uint32_t>(static_cast<std::uint32_t>(w));
    out.put_array<std::uint32_t>(r.views);
    out.put_array<std::uint32_t>(r.slots.indices);
    for (std::size_t v = 0; v < n; ++v) {
      out.put_array<float>(std::span<const float>(r.images.view(v), r.images.view_stride()));
      put_points(out, r.bundle.local[v], buf);
      put_conf(out, r.bundle.local_conf[v], buf);
      out.put_array<std::uint8_t>(r.bundle.local[v].valid);
      put_points(out, r.bundle.global[v], buf);
      put_conf(out, r.bundle.global_conf[v], buf);
      out.put_array<std::uint8_t>(r.bundle.global[v].valid);
    }
  }
  out.close();
}

std::vector<PredictionRecord> read_predictions(const std::string& path) {
  io::BinaryReader in(path);
  in.expect_magic(std::string_view(kPredictionMagic, 8));
  if (in.get<std::uint32_t>() != kPredictionVersion) throw Error(ErrorKind::Format, "unsupported prediction version");
  const auto count = in.get<std::uint32_t>();
  std::vector<PredictionRecord> records;
  std::vector<float> buf;
  for (std::uint32_t k = 0; k < count; ++k) {
    PredictionRecord r;
    r.sample = in.get<std::uint32_t>();
    const std::size_t n = in.get<std::uint32_t>();
    const std::size_t h = in.get<std::uint32_t>();
    const std::size_t w = in.get<std::uint32_t>();
    const std::size_t per_view = h * w * (3 * 4 + 2 * (3 * 4 + 4 + 1));
    if (n == 0 || h == 0 || w == 0 || in.remaining() / per_view < n) {
      throw Error(ErrorKind::Format, "truncated or invalid prediction header");
    }
    r.views.resize(n);
    r.slots.indices.resize(n);
    in.get_array<std::uint32_t>(r.views);
    in.get_array<std::uint32_t>(r.slots.indices);
    r.images = ImageSet(n, h, w);
    for (std::size_t v = 0; v < n; ++v) {
      in.get_array<float>(std::span<float>(r.images.view(v), r.images.view_stride()));
      get_head(in, h, w, Frame::Local, buf, r.bundle.local, r.bundle.local_conf);
      get_head(in, h, w, Frame::Global, buf, r.bundle.global, r.bundle.global_conf);
    }
    records.push_back(std::move(r));
  }
  if (!in.at_end()) throw Error(ErrorKind::Format, "trailing bytes in prediction file");
  return records;
}

void write_ply(const ColoredCloud& cloud, const std::string& path) {
  if (cloud.colors.size() != cloud.points.size()) throw Error(ErrorKind::Shape, "point and color counts differ");
  std::ostringstream header;
  header << "ply\nformat binary_little_endian 1.0\nelement vertex " << cloud.points.size()
         << "\nproperty float x\nproperty float y\nproperty float z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
  io::BinaryWriter out(path);
  const std::string h = header.str();
  out.bytes(h.data(), h.size());
  for (std::size_t i = 0; i < cloud.points.size(); ++i) {
    for (int c = 0; c < 3; ++c) out.put<float>(static_cast<float>(cloud.points[i][c]));
    out.bytes(cloud.colors[i].data(), 3);
  }
  out.close();
}

ColoredCloud read_ply(const std::string& path) {
  io::BinaryReader in(path);
  std::string header;
  while (header.size() < 4096) {
    char c;
    in.bytes(&c, 1);
    header.push_back(c);
    if (header.ends_with("end_header\n")) break;
  }
  std::istringstream lines(header);
  std::string line;
  std::size_t count = 0;
  bool has_count = false;
  std::vector<std::string> props;
  std::getline(lines, line);
  if (line != "ply") throw Error(ErrorKind::Format, "not a PLY file");
  while (std::getline(lines, line)) {
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "binary_little_endian") throw Error(ErrorKind::Format, "only binary little-endian PLY is supported");
    } else if (word == "element") {
      std::string name;
      ls >> name >> count;
      if (name != "vertex" || !ls) throw Error(ErrorKind::Format, "unexpected PLY element");
      has_count = true;
    } else if (word == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(type + " " + name);
    } else if (word == "end_header") {
      break;
    }
  }
  const std::vector<std::string> expected{"float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"};
  if (!has_count || props != expected) throw Error(ErrorKind::Format, "unsupported PLY layout");
  if (in.remaining() != count * 15) throw Error(ErrorKind::Format, "PLY vertex data has the wrong size");
  ColoredCloud cloud;
  cloud.points.resize(count);
  cloud.colors.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    for (int c = 0; c < 3; ++c) cloud.points[i][c] = in.get<float>();
    in.bytes(cloud.colors[i].data(), 3);
  }
  return cloud;
}

}  // namespace f3r
