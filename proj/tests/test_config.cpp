#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "emo/config.hpp"

using namespace emo;

namespace {

const char* kFiveM = R"(# 5M variant
[stem]
width = 24

[input]
resolution = 224
fit = strict

[stage1]
depth = 3
dim = 48
exp_ratio = 2
[stage2]
depth = 3
dim = 72
exp_ratio = 3.0
[stage3]
depth = 9
dim = 160
exp_ratio = 4
attention = true
spanning = true
head_dim = 32
[stage4]
depth = 3 ; trailing comment
dim = 288
exp_ratio = 8/2
attention = yes
spanning = on
head_dim = 32

[head]
classes = 1000
)";

std::string error_of(const std::string& text) {
  try {
    parse_config_text(text, "t.ini");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::string replace(std::string s, const std::string& from, const std::string& to) {
  s.replace(s.find(from), from.size(), to);
  return s;
}

}  // namespace

TEST(Config, FiveMTextMatchesPreset) {
  EXPECT_TRUE(parse_config_text(kFiveM) == preset("emov2-5m"));
}

TEST(Config, ShippedFilesMatchPresets) {
  for (const auto& name : preset_names()) {
    const auto path = std::filesystem::path(EMOV2_CONFIG_DIR) / (name + ".ini");
    EXPECT_TRUE(parse_config(path.string()) == preset(name)) << path;
  }
}

TEST(Config, EmitRoundTrip) {
  for (const auto& name : preset_names()) {
    auto c = preset(name);
    c.stages[1].window = {4, 2};
    c.stages[2].window = kFullWindow;
    c.stages[0].drop_path = 0.1;
    c.fit = WindowFit::pad;
    EXPECT_TRUE(parse_config_text(emit_config(c)) == c) << name;
  }
}

TEST(Config, MissingSection) {
  auto text = replace(kFiveM, "[stage3]", "[stem2]");
  EXPECT_NE(error_of(text).find("unknown section [stem2]"), std::string::npos);
  std::string cut = kFiveM;
  cut = cut.substr(0, cut.find("[stage3]")) + cut.substr(cut.find("[stage4]"));
  EXPECT_NE(error_of(cut).find("missing section [stage3]"), std::string::npos) << error_of(cut);
}

TEST(Config, UnknownKeyReportsLine) {
  auto text = replace(kFiveM, "dim = 72", "dims = 72");
  const auto e = error_of(text);
  EXPECT_NE(e.find("t.ini:15"), std::string::npos) << e;
  EXPECT_NE(e.find("dims"), std::string::npos) << e;
}

TEST(Config, BadValues) {
  EXPECT_NE(error_of(replace(kFiveM, "depth = 9", "depth = nine")).find("t.ini:18"), std::string::npos);
  EXPECT_NE(error_of(replace(kFiveM, "exp_ratio = 4\n", "exp_ratio = 4x\n")), "");
  EXPECT_NE(error_of(replace(kFiveM, "fit = strict", "fit = loose")), "");
  EXPECT_NE(error_of(replace(kFiveM, "dim = 160", "dim = 161")).find("head_dim"), std::string::npos);
  EXPECT_NE(error_of(replace(kFiveM, "depth = 3 ;", "depth = 3\ndepth = 4 ;")).find("duplicate"), std::string::npos);
  EXPECT_NE(error_of(replace(kFiveM, "[stem]", "[stem]\n[stem]")).find("duplicate section"), std::string::npos);
  EXPECT_NE(error_of(std::string("width = 3\n") + kFiveM).find("outside"), std::string::npos);
}

TEST(Config, MissingFileIsIoError) { EXPECT_THROW(parse_config("/nonexistent/x.ini"), IoError); }
