#pragma once

// Trajectory ingestion: ETH/UCY-style annotation files and robot logs,
// resampling to a uniform grid, 20-frame windowing, and displacement
// conversion.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "binary_io.hpp"
#include "diffcore.hpp"
#include "errors.hpp"

namespace stgcvae {

inline constexpr std::size_t kObsLen = 8;
inline constexpr std::size_t kPredLen = 12;
inline constexpr std::size_t kSeqLen = kObsLen + kPredLen;
inline constexpr double kGridPeriod = 0.4;  // 2.5 Hz
/// Seconds per frame-id unit in the common ETH/UCY text release, where
/// consecutive annotated frames are 10 ids (0.4 s) apart.
inline constexpr double kEthUcyFramePeriod = 0.04;

struct RawAnnotation {
  std::int64_t frame = 0;
  std::int64_t agent = 0;
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const RawAnnotation&, const RawAnnotation&) = default;
};

struct Scene {
  std::string name;
  std::vector<RawAnnotation> annotations;  // sorted by (frame, agent)
  double frame_period = kGridPeriod;       // seconds per frame-id unit
  std::optional<std::int64_t> robot_id;
  std::size_t dropped_agents = 0;  // agents discarded by resample()

  std::vector<std::int64_t> agent_ids() const {
    std::vector<std::int64_t> ids;
    for (const auto& a : annotations) ids.push_back(a.agent);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    return ids;
  }
};

struct SequenceWindow {
  std::string scene;
  std::int64_t start_frame = 0;
  std::vector<std::int32_t> agent_ids;
  Tensor positions;  // (T, N, 2), meters
  std::optional<std::size_t> robot_index;

  std::size_t frames() const { return positions.dim(0); }
  std::size_t agents() const { return positions.dim(1); }
  bool includes_robot() const { return robot_index.has_value(); }
  bool has_future() const { return frames() >= kSeqLen; }
};

/// Node features: per-frame displacements, shape (2, T, N), plus the
/// absolute position of every agent at frame 0, shape (N, 2).
struct DisplacementTensor {
  Tensor values;
  Tensor origin;
};

enum class WindowMode { train, infer };

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline double parse_number(std::string_view tok, const std::string& where, std::size_t line) {
  double v = 0.0;
  const auto* first = tok.data();
  if (!tok.empty() && tok.front() == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || !std::isfinite(v)) {
    throw ParseError(where + ":" + std::to_string(line) + ": '" + std::string(tok) + "' is not a number",
                     line);
  }
  return v;
}

inline std::int64_t parse_integral(std::string_view tok, const std::string& where, std::size_t line) {
  const double v = parse_number(tok, where, line);
  if (std::floor(v) != v || std::abs(v) > 9.0e15) {
    throw ParseError(where + ":" + std::to_string(line) + ": '" + std::string(tok) + "' is not an integer id",
                     line);
  }
  return static_cast<std::int64_t>(v);
}

}  // namespace detail

/// Parses annotation text: one `frame agent x y` observation per line,
/// whitespace separated. Header lines `#robot_id=<id>` and
/// `#frame_period=<seconds>` are recognised; other `#` lines are comments.
inline Scene parse_annotations_text(std::string_view text, std::string name,
                                    double frame_period = kEthUcyFramePeriod) {
  Scene scene;
  scene.name = std::move(name);
  scene.frame_period = frame_period;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty()) continue;
    if (line.front() == '#') {
      const auto body = detail::trim(line.substr(1));
      const auto eq = body.find('=');
      if (eq == std::string_view::npos) continue;
      const auto key = detail::trim(body.substr(0, eq));
      const auto val = detail::trim(body.substr(eq + 1));
      if (key == "robot_id") {
        scene.robot_id = detail::parse_integral(val, scene.name, line_no);
      } else if (key == "frame_period") {
        scene.frame_period = detail::parse_number(val, scene.name, line_no);
        if (scene.frame_period <= 0.0) {
          throw ParseError(scene.name + ":" + std::to_string(line_no) + ": frame_period must be positive",
                           line_no);
        }
      }
      continue;
    }
    std::vector<std::string_view> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      const auto start = i;
      while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
      if (i > start) fields.push_back(line.substr(start, i - start));
    }
    if (fields.size() != 4) {
      throw ParseError(scene.name + ":" + std::to_string(line_no) + ": expected 4 fields, found " +
                           std::to_string(fields.size()),
                       line_no);
    }
    RawAnnotation a;
    a.frame = detail::parse_integral(fields[0], scene.name, line_no);
    a.agent = detail::parse_integral(fields[1], scene.name, line_no);
    a.x = detail::parse_number(fields[2], scene.name, line_no);
    a.y = detail::parse_number(fields[3], scene.name, line_no);
    scene.annotations.push_back(a);
  }
  std::sort(scene.annotations.begin(), scene.annotations.end(), [](const auto& l, const auto& r) {
    return l.frame != r.frame ? l.frame < r.frame : l.agent < r.agent;
  });
  for (std::size_t k = 1; k < scene.annotations.size(); ++k) {
    const auto& p = scene.annotations[k - 1];
    const auto& c = scene.annotations[k];
    if (p.frame == c.frame && p.agent == c.agent) {
      throw IntegrityError(scene.name + ": duplicate observation for frame " + std::to_string(c.frame) +
                           ", agent " + std::to_string(c.agent));
    }
  }
  return scene;
}

/// Reads an annotation file; the scene is named after the file stem.
inline Scene parse_annotations(const std::filesystem::path& path, double frame_period = kEthUcyFramePeriod) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return parse_annotations_text(text, path.stem().string(), frame_period);
  } catch (const ParseError& e) {
    // Re-label with the full path so diagnostics read file:line.
    std::string msg = e.what();
    const auto stem = path.stem().string();
    if (msg.rfind(stem, 0) == 0) msg = path.string() + msg.substr(stem.size());
    throw ParseError(msg, e.line);
  }
}

/// Linear interpolation of every agent onto a uniform grid of `target_period`
/// seconds starting at the scene's first timestamp. Grid frames are
/// renumbered 0, 1, 2, ...; a grid time falling inside a source gap longer
/// than the scene's nominal sampling interval leaves that agent absent.
/// Agents with fewer than two samples are dropped and counted.
inline Scene resample(const Scene& scene, double target_period = kGridPeriod) {
  if (!(target_period > 0.0)) throw ParameterError("resample: target period must be positive");
  Scene out;
  out.name = scene.name;
  out.frame_period = target_period;
  out.robot_id = scene.robot_id;
  out.dropped_agents = scene.dropped_agents;
  if (scene.annotations.empty()) return out;

  std::map<std::int64_t, std::vector<RawAnnotation>> tracks;
  for (const auto& a : scene.annotations) tracks[a.agent].push_back(a);

  // Nominal interval: the most frequent consecutive frame step (ties go to
  // the smaller step).
  std::map<std::int64_t, std::size_t> step_counts;
  for (auto& [id, tr] : tracks) {
    std::sort(tr.begin(), tr.end(), [](const auto& l, const auto& r) { return l.frame < r.frame; });
    for (std::size_t k = 1; k < tr.size(); ++k) ++step_counts[tr[k].frame - tr[k - 1].frame];
  }
  std::int64_t nominal_step = 1;
  std::size_t best = 0;
  for (const auto& [step, count] : step_counts) {
    if (count > best) {
      best = count;
      nominal_step = step;
    }
  }
  const double nominal_interval = static_cast<double>(nominal_step) * scene.frame_period;
  const double eps = 1e-9 * std::max(1.0, target_period);

  std::int64_t first_frame = INT64_MAX, last_frame = INT64_MIN;
  for (const auto& [id, tr] : tracks) {
    if (tr.size() < 2) continue;
    first_frame = std::min(first_frame, tr.front().frame);
    last_frame = std::max(last_frame, tr.back().frame);
  }
  for (const auto& [id, tr] : tracks)
    if (tr.size() < 2) ++out.dropped_agents;
  if (first_frame > last_frame) return out;

  const auto time_of = [&](std::int64_t frame) {
    return static_cast<double>(frame - first_frame) * scene.frame_period;
  };
  for (const auto& [id, tr] : tracks) {
    if (tr.size() < 2) continue;
    const double t_first = time_of(tr.front().frame);
    const double t_last = time_of(tr.back().frame);
    const auto k_begin = static_cast<std::int64_t>(std::ceil(t_first / target_period - 1e-9));
    const auto k_end = static_cast<std::int64_t>(std::floor(t_last / target_period + 1e-9));
    std::size_t seg = 0;
    for (std::int64_t k = std::max<std::int64_t>(k_begin, 0); k <= k_end; ++k) {
      const double t = static_cast<double>(k) * target_period;
      while (seg + 1 < tr.size() && time_of(tr[seg + 1].frame) < t - eps) ++seg;
      const auto& a = tr[seg];
      const double ta = time_of(a.frame);
      if (std::abs(t - ta) <= eps) {
        out.annotations.push_back({k, id, a.x, a.y});
        continue;
      }
      if (seg + 1 >= tr.size()) break;
      const auto& b = tr[seg + 1];
      const double tb = time_of(b.frame);
      if (std::abs(t - tb) <= eps) {
        out.annotations.push_back({k, id, b.x, b.y});
        continue;
      }
      if (tb - ta > nominal_interval * (1.0 + 1e-6)) continue;  // gap
      const double w = (t - ta) / (tb - ta);
      out.annotations.push_back({k, id, a.x + w * (b.x - a.x), a.y + w * (b.y - a.y)});
    }
  }
  std::sort(out.annotations.begin(), out.annotations.end(), [](const auto& l, const auto& r) {
    return l.frame != r.frame ? l.frame < r.frame : l.agent < r.agent;
  });
  return out;
}

/// Sliding 20-frame windows over a uniformly sampled scene. Training windows
/// keep agents present in all 20 frames; inference windows keep agents
/// present in the 8 observed frames and store only those frames. Windows
/// with no qualifying agent are dropped.
inline std::vector<SequenceWindow> build_windows(const Scene& scene, std::size_t stride,
                                                 WindowMode mode = WindowMode::train) {
  if (stride == 0) throw ParameterError("build_windows: stride must be positive");
  std::vector<SequenceWindow> windows;
  if (scene.annotations.empty()) return windows;

  const std::int64_t f_min = scene.annotations.front().frame;
  const std::int64_t f_max = scene.annotations.back().frame;
  const auto frame_count = static_cast<std::size_t>(f_max - f_min + 1);
  const auto ids = scene.agent_ids();
  std::unordered_map<std::int64_t, std::size_t> slot;
  for (std::size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;

  // presence[f * agents + a] -> index into annotations, or npos.
  constexpr auto npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> presence(frame_count * ids.size(), npos);
  for (std::size_t k = 0; k < scene.annotations.size(); ++k) {
    const auto& a = scene.annotations[k];
    presence[static_cast<std::size_t>(a.frame - f_min) * ids.size() + slot[a.agent]] = k;
  }

  const std::size_t required = mode == WindowMode::train ? kSeqLen : kObsLen;
  for (std::size_t start = 0; start + kSeqLen <= frame_count; start += stride) {
    std::vector<std::size_t> members;
    for (std::size_t a = 0; a < ids.size(); ++a) {
      bool ok = true;
      for (std::size_t f = start; f < start + required && ok; ++f) ok = presence[f * ids.size() + a] != npos;
      if (ok) members.push_back(a);
    }
    if (members.empty()) continue;
    SequenceWindow w;
    w.scene = scene.name;
    w.start_frame = f_min + static_cast<std::int64_t>(start);
    w.positions = Tensor({required, members.size(), 2});
    for (std::size_t n = 0; n < members.size(); ++n) {
      const auto id = ids[members[n]];
      w.agent_ids.push_back(static_cast<std::int32_t>(id));
      if (scene.robot_id && *scene.robot_id == id) w.robot_index = n;
      for (std::size_t f = 0; f < required; ++f) {
        const auto& a = scene.annotations[presence[(start + f) * ids.size() + members[n]]];
        w.positions.at(f, n, 0) = a.x;
        w.positions.at(f, n, 1) = a.y;
      }
    }
    windows.push_back(std::move(w));
  }
  return windows;
}

/// Positions (T, N, 2) -> displacements (2, T, N) with a zero first frame.
inline DisplacementTensor to_displacements(const Tensor& positions) {
  if (positions.rank() != 3 || positions.dim(2) != 2) {
    throw DimensionError("to_displacements: expected (T, N, 2), got " + shape_string(positions.shape()));
  }
  const std::size_t t_len = positions.dim(0), n = positions.dim(1);
  DisplacementTensor d{Tensor({2, t_len, n}), Tensor({n, 2})};
  for (std::size_t a = 0; a < n; ++a) {
    d.origin.at(a, 0) = positions.at(0, a, 0);
    d.origin.at(a, 1) = positions.at(0, a, 1);
  }
  for (std::size_t t = 1; t < t_len; ++t)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t c = 0; c < 2; ++c) d.values.at(c, t, a) = positions.at(t, a, c) - positions.at(t - 1, a, c);
  return d;
}

inline DisplacementTensor to_displacements(const SequenceWindow& window) {
  return to_displacements(window.positions);
}

/// Inverse of to_displacements: origin plus running sum.
inline Tensor to_absolute(const DisplacementTensor& disp) {
  const auto& v = disp.values;
  if (v.rank() != 3 || v.dim(0) != 2 || disp.origin.rank() != 2 || disp.origin.dim(0) != v.dim(2) ||
      disp.origin.dim(1) != 2) {
    throw DimensionError("to_absolute: values " + shape_string(v.shape()) + " and origin " +
                         shape_string(disp.origin.shape()) + " disagree");
  }
  const std::size_t t_len = v.dim(1), n = v.dim(2);
  Tensor pos({t_len, n, 2});
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t c = 0; c < 2; ++c) {
      double acc = disp.origin.at(a, c);
      pos.at(0, a, c) = acc;
      for (std::size_t t = 1; t < t_len; ++t) {
        acc += v.at(c, t, a);
        pos.at(t, a, c) = acc;
      }
    }
  return pos;
}

/// Frames [begin, end) of a (T, N, 2) position tensor.
inline Tensor slice_frames(const Tensor& positions, std::size_t begin, std::size_t end) {
  if (begin >= end || end > positions.dim(0)) {
    throw DimensionError("slice_frames: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_string(positions.shape()));
  }
  const std::size_t stride = positions.size() / positions.dim(0);
  Shape s = positions.shape();
  s[0] = end - begin;
  return Tensor(s, std::vector<double>(positions.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                       positions.data().begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

// ---------------------------------------------------------------------------
// STGW window cache
// ---------------------------------------------------------------------------

inline constexpr std::string_view kWindowMagic = "STGW";
inline constexpr std::uint8_t kWindowCacheVersion = 2;

/// Layout (little-endian): magic, version byte, u32 window count, then per
/// window: u32 N, u32 T, N x i32 agent ids, i32 robot index (-1 if none),
/// [version >= 2: u16 length + UTF-8 scene name], T*N*2 float32 positions
/// row-major (T, N, 2). Version 1 files carry no scene name; their windows
/// take the file stem.
inline std::vector<char> encode_window_cache(const std::vector<SequenceWindow>& windows) {
  binary::Writer w;
  w.bytes(kWindowMagic);
  w.u8(kWindowCacheVersion);
  w.u32(static_cast<std::uint32_t>(windows.size()));
  for (const auto& win : windows) {
    w.u32(static_cast<std::uint32_t>(win.agents()));
    w.u32(static_cast<std::uint32_t>(win.frames()));
    for (auto id : win.agent_ids) w.i32(id);
    w.i32(win.robot_index ? static_cast<std::int32_t>(*win.robot_index) : -1);
    if (win.scene.size() > UINT16_MAX) throw ParameterError("scene name too long for window cache");
    w.u16(static_cast<std::uint16_t>(win.scene.size()));
    w.bytes(win.scene);
    for (double v : win.positions.data()) w.f32(static_cast<float>(v));
  }
  return w.buffer();
}

inline std::vector<SequenceWindow> decode_window_cache(binary::Reader r, const std::string& default_scene) {
  if (r.bytes(4) != kWindowMagic) throw FormatError(r.label() + ": not a window cache (bad magic)");
  const auto version = r.u8();
  if (version != 1 && version != 2) {
    throw FormatError(r.label() + ": unsupported window cache version " + std::to_string(version));
  }
  const auto count = r.u32();
  std::vector<SequenceWindow> windows;
  windows.reserve(std::min<std::size_t>(count, 1 << 20));
  for (std::uint32_t k = 0; k < count; ++k) {
    SequenceWindow win;
    const auto n = r.u32();
    const auto t = r.u32();
    if (n == 0 || t == 0) throw FormatError(r.label() + ": window with zero agents or frames");
    for (std::uint32_t a = 0; a < n; ++a) win.agent_ids.push_back(r.i32());
    const auto robot = r.i32();
    if (robot >= 0) {
      if (static_cast<std::uint32_t>(robot) >= n) throw FormatError(r.label() + ": robot index out of range");
      win.robot_index = static_cast<std::size_t>(robot);
    }
    win.scene = version >= 2 ? r.bytes(r.u16()) : default_scene;
    if (static_cast<std::size_t>(t) * n * 2 * 4 > r.remaining()) throw FormatError(r.label() + ": truncated file");
    win.positions = Tensor({t, n, 2});
    for (auto& v : win.positions.data()) v = r.f32();
    windows.push_back(std::move(win));
  }
  if (!r.at_end()) throw FormatError(r.label() + ": trailing bytes after last window");
  return windows;
}

inline void write_window_cache(const std::filesystem::path& path, const std::vector<SequenceWindow>& windows) {
  binary::Writer w;
  const auto bytes = encode_window_cache(windows);
  w.bytes(std::string_view(bytes.data(), bytes.size()));
  w.save(path);
}

inline std::vector<SequenceWindow> read_window_cache(const std::filesystem::path& path) {
  return decode_window_cache(binary::Reader::load(path), path.stem().string());
}

}  // namespace stgcvae
