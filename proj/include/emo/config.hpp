#pragma once

// Key-value model configuration files.
//
//   # comment
//   [stem]    width
//   [input]   resolution, fit (strict|pad)
//   [stage1] .. [stage4]
//             depth, dim, exp_ratio, attention, spanning, window,
//             drop_path, head_dim, kernel
//   [head]    classes
//
// window: auto | full | N | HxW. Stage sections are mandatory and need depth,
// dim and exp_ratio; everything else has a default.

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "emo/io.hpp"

namespace emo {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::int64_t parse_int(const std::string& v, const std::string& where) {
  try {
    std::size_t n = 0;
    auto x = std::stoll(v, &n);
    if (n == v.size()) return x;
  } catch (const std::logic_error&) {
  }
  throw ConfigError(where + ": expected an integer, got '" + v + "'");
}

inline double parse_double(const std::string& v, const std::string& where) {
  try {
    std::size_t n = 0;
    auto x = std::stod(v, &n);
    if (n == v.size()) return x;
  } catch (const std::logic_error&) {
  }
  throw ConfigError(where + ": expected a number, got '" + v + "'");
}

inline bool parse_bool(const std::string& v, const std::string& where) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(where + ": expected a boolean, got '" + v + "'");
}

inline WindowSpec parse_window(const std::string& v, const std::string& where) {
  if (v == "auto") return kAutoWindow;
  if (v == "full") return kFullWindow;
  const auto x = v.find('x');
  WindowSpec w;
  if (x == std::string::npos) {
    w.h = w.w = parse_int(v, where);
  } else {
    w.h = parse_int(v.substr(0, x), where);
    w.w = parse_int(v.substr(x + 1), where);
  }
  if (w.h < 1 || w.w < 1) throw ConfigError(where + ": window extents must be positive");
  return w;
}

inline std::string window_str(const WindowSpec& w) {
  if (w.h == 0 && w.w == 0) return "auto";
  if (w.h == kFullExtent && w.w == kFullExtent) return "full";
  if (w.h == w.w) return std::to_string(w.h);
  return std::to_string(w.h) + "x" + std::to_string(w.w);
}

inline std::string double_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline BackboneConfig parse_config_text(const std::string& text, const std::string& origin = "config") {
  BackboneConfig cfg;
  cfg.name = origin;
  std::string section;
  std::set<std::string> seen_sections;
  std::set<std::string> seen_keys;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string at = origin + ":" + std::to_string(lineno);
    auto line = raw;
    if (auto c = line.find_first_of("#;"); c != std::string::npos) line = line.substr(0, c);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(at + ": malformed section header '" + line + "'");
      section = detail::trim(line.substr(1, line.size() - 2));
      static const std::set<std::string> known{"stem", "input", "stage1", "stage2", "stage3", "stage4", "head"};
      if (!known.count(section)) throw ConfigError(at + ": unknown section [" + section + "]");
      if (!seen_sections.insert(section).second) throw ConfigError(at + ": duplicate section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(at + ": expected 'key = value', got '" + line + "'");
    const auto key = detail::trim(line.substr(0, eq));
    const auto val = detail::trim(line.substr(eq + 1));
    if (section.empty()) throw ConfigError(at + ": key '" + key + "' outside any section");
    const std::string qualified = section + "." + key;
    const std::string where = at + ": " + qualified;
    if (!seen_keys.insert(qualified).second) throw ConfigError(where + ": duplicate key");
    if (val.empty()) throw ConfigError(where + ": empty value");

    if (section == "stem") {
      if (key == "width")
        cfg.stem_width = detail::parse_int(val, where);
      else
        throw ConfigError(at + ": unknown key '" + key + "' in [stem]");
    } else if (section == "input") {
      if (key == "resolution") {
        cfg.resolution = detail::parse_int(val, where);
      } else if (key == "fit") {
        if (val == "strict")
          cfg.fit = WindowFit::strict;
        else if (val == "pad")
          cfg.fit = WindowFit::pad;
        else
          throw ConfigError(where + ": expected strict or pad");
      } else {
        throw ConfigError(at + ": unknown key '" + key + "' in [input]");
      }
    } else if (section == "head") {
      if (key == "classes")
        cfg.classes = detail::parse_int(val, where);
      else
        throw ConfigError(at + ": unknown key '" + key + "' in [head]");
    } else {
      auto& st = cfg.stages[static_cast<std::size_t>(section.back() - '1')];
      if (key == "depth") st.depth = detail::parse_int(val, where);
      else if (key == "dim") st.dim = detail::parse_int(val, where);
      else if (key == "exp_ratio") {
        try {
          st.expansion = Ratio::parse(val);
        } catch (const std::invalid_argument& e) {
          throw ConfigError(where + ": " + e.what());
        }
      } else if (key == "attention") st.attention = detail::parse_bool(val, where);
      else if (key == "spanning") st.spanning = detail::parse_bool(val, where);
      else if (key == "window") st.window = detail::parse_window(val, where);
      else if (key == "drop_path") st.drop_path = detail::parse_double(val, where);
      else if (key == "head_dim") st.head_dim = detail::parse_int(val, where);
      else if (key == "kernel") st.kernel = detail::parse_int(val, where);
      else throw ConfigError(at + ": unknown key '" + key + "' in [" + section + "]");
    }
  }
  for (int i = 1; i <= 4; ++i) {
    const auto s = "stage" + std::to_string(i);
    if (!seen_sections.count(s)) throw ConfigError(origin + ": missing section [" + s + "]");
    for (const char* k : {"depth", "dim", "exp_ratio"})
      if (!seen_keys.count(s + "." + k)) throw ConfigError(origin + ": [" + s + "] missing key '" + k + "'");
  }
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

inline BackboneConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str(), path);
}

inline std::string emit_config(const BackboneConfig& cfg) {
  std::ostringstream os;
  os << "[stem]\nwidth = " << cfg.effective_stem_width() << "\n\n";
  os << "[input]\nresolution = " << cfg.resolution << "\nfit = " << (cfg.fit == WindowFit::pad ? "pad" : "strict")
     << "\n\n";
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& s = cfg.stages[i];
    os << "[stage" << i + 1 << "]\n"
       << "depth = " << s.depth << "\n"
       << "dim = " << s.dim << "\n"
       << "exp_ratio = " << s.expansion.str() << "\n"
       << "attention = " << (s.attention ? "true" : "false") << "\n"
       << "spanning = " << (s.spanning ? "true" : "false") << "\n"
       << "window = " << detail::window_str(s.window) << "\n"
       << "drop_path = " << detail::double_str(s.drop_path) << "\n"
       << "head_dim = " << s.head_dim << "\n"
       << "kernel = " << s.kernel << "\n\n";
  }
  os << "[head]\nclasses = " << cfg.classes << "\n";
  return os.str();
}

}  // namespace emo
