// emov2: cost reports, invariant checks, forward passes, toy training, ERF maps
// and checkpoint tooling.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 I/O or file-format error.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "emo/checks.hpp"
#include "emo/config.hpp"
#include "emo/cost.hpp"
#include "emo/io.hpp"
#include "emo/toy.hpp"

namespace {

enum Exit { kOk = 0, kVerify = 1, kUsage = 2, kIo = 3 };

enum class Level { error = 0, info = 1, debug = 2 };

Level g_level = Level::error;

void log(Level l, const std::string& msg) {
  if (l <= g_level) std::cerr << (l == Level::error ? "error: " : l == Level::info ? "info: " : "debug: ") << msg << "\n";
}

Level level_from_env() {
  const char* v = std::getenv("EMOV2_LOG");
  if (!v || !*v) return Level::error;
  const std::string s(v);
  if (s == "error") return Level::error;
  if (s == "info") return Level::info;
  if (s == "debug") return Level::debug;
  throw std::invalid_argument("EMOV2_LOG must be error, info or debug (got '" + s + "')");
}

struct Source {
  std::string preset;
  std::string config;
  bool strict = false;
  bool pad = false;
  std::int64_t res = 0;

  void add(CLI::App* cmd, bool with_res) {
    auto* p = cmd->add_option("--preset", preset, "built-in configuration")->check(CLI::IsMember(emo::preset_names()));
    auto* c = cmd->add_option("--config", config, "configuration file");
    p->excludes(c);
    auto* s = cmd->add_flag("--strict-windows", strict, "windows must divide every feature map (default)");
    auto* d = cmd->add_flag("--pad-windows", pad, "zero-pad feature maps up to a window multiple");
    s->excludes(d);
    if (with_res) cmd->add_option("--res", res, "input resolution")->check(CLI::PositiveNumber);
  }

  emo::BackboneConfig load() const {
    if (preset.empty() == config.empty()) throw std::invalid_argument("exactly one of --preset or --config is required");
    auto cfg = preset.empty() ? emo::parse_config(config) : emo::preset(preset);
    if (pad) cfg.fit = emo::WindowFit::pad;
    if (strict) cfg.fit = emo::WindowFit::strict;
    if (res > 0) cfg.resolution = res;
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw emo::IoError("cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw emo::IoError("write failed on '" + path + "'");
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-")
    std::cout << text;
  else
    write_text(out, text);
}

// --- commands ---------------------------------------------------------------

int cmd_cost(const Source& src, const std::string& out) {
  const auto cfg = src.load();
  const auto rep = emo::report_model(cfg, cfg.resolution);
  emit(out, rep.csv());
  log(Level::info, cfg.name + " @" + std::to_string(cfg.resolution) + ": params=" + std::to_string(rep.params()) +
                       " macs=" + std::to_string(rep.macs()) + " flops=" + std::to_string(rep.flops()));
  return kOk;
}

int cmd_check(const std::string& suite, std::uint64_t seed, int threads) {
  std::vector<std::string> names;
  if (suite == "all")
    names = emo::suite_names();
  else
    names = {suite};
  bool ok = true;
  for (const auto& line : emo::run_suites(names, seed, threads)) {
    std::cout << line.str() << "\n";
    ok = ok && line.pass;
  }
  std::cout << (ok ? "PASS" : "FAIL") << " " << suite << "\n";
  return ok ? kOk : kVerify;
}

int cmd_forward(const Source& src, const std::string& weights, const std::string& input, const std::string& out,
                std::uint64_t seed) {
  auto cfg = src.load();
  emo::Model m(cfg, seed);
  if (!weights.empty()) emo::load_weights(weights, m);
  const auto x = emo::load_tensor(input);
  emo::NoGradGuard ng;
  const auto feats = m.forward_features(x, emo::Mode::eval);
  for (std::size_t i = 0; i < feats.size(); ++i)
    std::cout << "stage" << i + 1 << " " << emo::to_string(feats[i].shape()) << "\n";
  const auto logits = m.head(feats[3]);
  std::cout << "logits " << emo::to_string(logits.shape()) << "\n";
  emo::save_tensor(out, logits);
  return kOk;
}

int cmd_train_toy(std::int64_t steps, double lr, std::uint64_t seed, std::int64_t batch, const std::string& out) {
  if (steps < 1) throw std::invalid_argument("--steps must be >= 1");
  emo::TrainOptions opt;
  opt.steps = steps;
  opt.lr = lr;
  opt.seed = seed;
  opt.batch = batch;
  const auto r = emo::train_toy(opt);
  std::ostringstream csv;
  csv.precision(17);
  csv << "step,loss\n";
  for (std::size_t i = 0; i < r.losses.size(); ++i) csv << i << ',' << r.losses[i] << '\n';
  emit(out, csv.str());
  std::cerr.precision(6);
  std::cerr << "params=" << r.params << " initial_loss=" << r.initial_loss << " final_loss=" << r.final_loss
            << " ratio=" << r.final_loss / r.initial_loss << "\n";
  return kOk;
}

int cmd_erf(const std::string& stack, std::int64_t H, std::int64_t W, std::int64_t repeat, const std::string& dir) {
  auto layers = emo::LayerDesc::parse_stack(stack);
  if (repeat < 1) throw std::invalid_argument("--repeat must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw emo::IoError("cannot create '" + dir + "': " + ec.message());
  emo::Reachability r(H, W);
  const auto center = (H / 2) * W + W / 2;
  std::ostringstream csv;
  csv << "layer,kind,reached,coverage\n";
  std::int64_t index = 0;
  for (std::int64_t rep = 0; rep < repeat; ++rep)
    for (const auto& d : layers) {
      r.apply(d);
      ++index;
      std::string pgm = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
      for (std::int64_t p = 0; p < H * W; ++p) pgm.push_back(static_cast<char>(r.influences(p, center) ? 255 : 0));
      char name[32];
      std::snprintf(name, sizeof name, "layer_%03lld.pgm", static_cast<long long>(index));
      emo::detail::write_file((std::filesystem::path(dir) / name).string(), pgm);
      static const char* kinds[] = {"dwconv", "neighbor", "distant", "spanning"};
      csv << index << ',' << kinds[static_cast<int>(d.kind)] << ',' << r.reached_count(center) << ','
          << r.coverage(center) << '\n';
    }
  write_text((std::filesystem::path(dir) / "coverage.csv").string(), csv.str());
  const auto full = emo::layers_to_full_coverage(layers, H, W);
  std::cout << "layers_to_full_coverage " << (full ? std::to_string(*full) : "inf") << "\n";
  return kOk;
}

int cmd_init_weights(const Source& src, std::uint64_t seed, const std::string& out, bool f32) {
  const emo::Model m(src.load(), seed);
  emo::save_weights(out, m, f32 ? emo::DType::f32 : emo::DType::f64);
  log(Level::info, "wrote " + std::to_string(m.parameters().size()) + " tensors to " + out);
  return kOk;
}

int cmd_verify_weights(const Source& src, const std::string& path) {
  emo::Model m(src.load(), 0);
  emo::load_weights(path, m);
  std::cout << "loaded " << m.parameters().size() << " tensors, " << m.param_count() << " learnable parameters\n";
  return kOk;
}

int cmd_random_tensor(const std::string& shape, std::uint64_t seed, const std::string& out) {
  emo::Shape s;
  std::stringstream ss(shape);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      s.push_back(std::stoll(item));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("bad --shape '" + shape + "'");
    }
    if (s.back() < 1) throw std::invalid_argument("bad --shape '" + shape + "'");
  }
  if (s.empty()) throw std::invalid_argument("empty --shape");
  std::mt19937_64 rng(seed);
  emo::save_tensor(out, emo::detail::random_tensor(s, rng));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EMOv2 reference tooling"};
  app.require_subcommand(1);
  app.fallthrough();

  std::uint64_t seed = 0;
  int threads = 1;
  bool deterministic = false;
  app.add_option("--seed", seed, "random seed")->capture_default_str();
  app.add_option("--threads", threads, "worker threads for independent checks")->check(CLI::PositiveNumber);
  app.add_flag("--deterministic", deterministic, "force single-threaded, seed-determined execution");

  std::string out;

  Source cost_src;
  auto* cost = app.add_subcommand("cost", "per-layer parameter / FLOPs / MPL report (CSV)");
  cost_src.add(cost, true);
  cost->add_option("--out", out, "output CSV (default stdout)");

  std::string suite;
  auto* check = app.add_subcommand("check", "run an invariant suite");
  check->add_option("suite", suite, "grads | partition | equivalence | cost | erf | all")
      ->required()
      ->check(CLI::IsMember({"grads", "partition", "equivalence", "cost", "erf", "all"}));

  Source fwd_src;
  std::string weights, input;
  auto* fwd = app.add_subcommand("forward", "eval-mode forward pass on an EMOT tensor");
  fwd_src.add(fwd, false);
  fwd->add_option("--weights", weights, "EMOW checkpoint (default: seeded init)");
  fwd->add_option("--input", input, "input tensor [N,3,H,W]")->required();
  fwd->add_option("--out", out, "output logits tensor")->required();

  std::int64_t steps = 200, batch = 16;
  double lr = 0.05;
  std::string toy_preset = "toy";
  auto* train = app.add_subcommand("train-toy", "SGD on the synthetic 4-class dataset; prints the loss curve");
  train->add_option("--preset", toy_preset, "model (only 'toy')")->check(CLI::IsMember({"toy"}));
  train->add_option("--steps", steps, "SGD steps")->capture_default_str();
  train->add_option("--lr", lr, "learning rate")->capture_default_str();
  train->add_option("--batch", batch, "minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  train->add_option("--out", out, "loss curve CSV (default stdout)");

  std::string stack;
  std::int64_t H = 0, W = 0, res = 0, repeat = 1;
  auto* erf = app.add_subcommand("erf", "center-pixel reachability maps (PGM) and coverage CSV");
  erf->add_option("--stack", stack, "comma list of dwK, nbHxW, distHxW, spanHxW")->required();
  erf->add_option("--res", res, "square map side")->check(CLI::PositiveNumber);
  erf->add_option("--height", H, "map height")->check(CLI::PositiveNumber);
  erf->add_option("--width", W, "map width")->check(CLI::PositiveNumber);
  erf->add_option("--repeat", repeat, "apply the stack this many times")->capture_default_str();
  erf->add_option("--out", out, "output directory")->required();

  Source init_src;
  bool f32 = false;
  auto* init = app.add_subcommand("init-weights", "write a seeded-initialization EMOW checkpoint");
  init_src.add(init, false);
  init->add_flag("--f32", f32, "store float32 payloads");
  init->add_option("--out", out, "checkpoint path")->required();

  Source ver_src;
  std::string ckpt;
  auto* verify = app.add_subcommand("load-weights", "load a checkpoint into a model and report");
  ver_src.add(verify, false);
  verify->add_option("checkpoint", ckpt, "EMOW file")->required();

  std::string shape;
  auto* rnd = app.add_subcommand("random-tensor", "write a seeded N(0,1) EMOT tensor");
  rnd->add_option("--shape", shape, "comma-separated dims, e.g. 1,3,224,224")->required();
  rnd->add_option("--out", out, "tensor path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    g_level = level_from_env();
    if (deterministic) threads = 1;
    log(Level::debug, "seed=" + std::to_string(seed) + " threads=" + std::to_string(threads));
    if (*cost) return cmd_cost(cost_src, out);
    if (*check) return cmd_check(suite, seed, threads);
    if (*fwd) return cmd_forward(fwd_src, weights, input, out, seed);
    if (*train) return cmd_train_toy(steps, lr, seed, batch, out);
    if (*erf) {
      if (res > 0) H = W = res;
      if (H < 1 || W < 1) throw std::invalid_argument("erf needs --res or --height and --width");
      return cmd_erf(stack, H, W, repeat, out);
    }
    if (*init) return cmd_init_weights(init_src, seed, out, f32);
    if (*verify) return cmd_verify_weights(ver_src, ckpt);
    if (*rnd) return cmd_random_tensor(shape, seed, out);
  } catch (const emo::IoError& e) {
    log(Level::error, e.what());
    return kIo;
  } catch (const emo::FormatError& e) {
    log(Level::error, e.what());
    return kIo;
  } catch (const emo::NumericError& e) {
    log(Level::error, e.what());
    return kVerify;
  } catch (const std::invalid_argument& e) {
    log(Level::error, e.what());
    return kUsage;
  } catch (const std::exception& e) {
    log(Level::error, e.what());
    return kVerify;
  }
  return kUsage;
}
