// unidiff: data generation, training, sampling, evaluation and plotting.
//
// Exit codes: 0 success, 2 usage or invalid configuration, 3 I/O or format
// failure, 4 numerical failure (non-finite loss, failed gradient check).

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "unidiff/gradcheck.hpp"
#include "unidiff/png.hpp"
#include "unidiff/svg_plot.hpp"
#include "unidiff/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace unidiff;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

fs::path default_out(const std::string& command) {
  const char* root = std::getenv("UNIDIFF_OUT_ROOT");
  return fs::path(root && *root ? root : "runs") / command;
}

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  detail::write_atomic(path, text.data(), text.size());
}

/// Run manifest: written before any long work and completed on success.
class RunManifest {
 public:
  RunManifest(std::string command, fs::path out, json config, json inputs, std::uint64_t seed)
      : path_(std::move(out) / "run_manifest.json") {
    std::error_code ec;
    fs::create_directories(path_.parent_path(), ec);
    if (ec) throw IoError("cannot create '" + path_.parent_path().string() + "': " + ec.message());
    j_ = {{"command", std::move(command)},
          {"config", std::move(config)},
          {"inputs", std::move(inputs)},
          {"outputs", json::object()},
          {"seed", seed},
          {"tool_version", kToolVersion},
          {"start_time", utc_now()},
          {"end_time", nullptr}};
    write_json(path_, j_);
  }

  void output(const std::string& key, const fs::path& p) { j_["outputs"][key] = p.string(); }

  void finish() {
    j_["end_time"] = utc_now();
    write_json(path_, j_);
  }

 private:
  fs::path path_;
  json j_;
};

/// Append-only JSON-lines log. When resuming, records at or past `resume_step`
/// of `stage` are dropped so the log matches an uninterrupted run.
class MetricsLog {
 public:
  MetricsLog(const fs::path& path, bool resume, const std::string& stage, int resume_step) : path_(path) {
    std::vector<std::string> keep;
    if (resume && fs::exists(path)) {
      std::ifstream in(path);
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const json r = json::parse(line);
        if (r.value("stage", "") == stage && r.value("step", 0) >= resume_step) continue;
        keep.push_back(line);
      }
    }
    out_.open(path, std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + path.string() + "'");
    for (const auto& l : keep) out_ << l << '\n';
    out_.flush();
  }

  void write(const StepRecord& r) {
    out_ << r.to_json().dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed for '" + path_.string() + "'");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

Dataset read_split(const fs::path& data, const std::string& split) {
  const fs::path dir = fs::exists(data / split / "manifest") ? data / split : data;
  return read_dataset(dir);
}

Pipeline pipeline_for(const Checkpoint& ck) {
  Pipeline pl;
  pl.model = ck.model;
  pl.schedule = ck.schedule;
  if (ck.sets.count("codec")) {
    pl.codec = Codec<float>{CodecMode::learned, 3, pl.model.latent_channels, 0, ck.sets.at("codec")};
  }
  return pl;
}

const ParamSet<float>& inference_params(const Checkpoint& ck) {
  return ck.sets.count("theta_c") ? ck.sets.at("theta_c") : ck.sets.at("theta_e");
}

/// Periodic checkpointing and logging shared by warmup and improve.
void run_stage(Trainer& t, int total, int every, const fs::path& ckpt, MetricsLog& log) {
  while (t.step_index() < total && !(t.stage() == "warmup" && t.plateaued())) {
    const StepRecord r = t.step();
    log.write(r);
    if (every > 0 && t.step_index() % every == 0 && t.step_index() < total) save_checkpoint(t.to_checkpoint(), ckpt);
  }
  save_checkpoint(t.to_checkpoint(), ckpt);
}

// ------------------------------------------------------------------ commands

struct GenDataOpts {
  fs::path out;
  int train_count = 64, test_count = 256, resolution = 32;
  std::string style = "A";
  std::uint64_t seed = 0;
};

int cmd_gen_data(const GenDataOpts& o) {
  const fs::path out = o.out.empty() ? default_out("data") : o.out;
  const Style style = parse_style(o.style);
  RunManifest man("gen-data", out,
                  {{"train_count", o.train_count},
                   {"test_count", o.test_count},
                   {"style", o.style},
                   {"resolution", o.resolution},
                   {"seed", o.seed}},
                  json::object(), o.seed);
  if (o.train_count < 1 || o.test_count < 1) throw ParameterError("split sizes must be positive");
  for (const auto& [split, count, stream] : {std::tuple{"train", o.train_count, 0ULL}, std::tuple{"test", o.test_count, 1ULL}}) {
    Dataset d;
    d.resolution = o.resolution;
    d.samples = render_dataset(count, style, o.resolution, mix_seed(o.seed) ^ stream, split);
    d.meta = {{"style", o.style}, {"seed", o.seed}, {"split", split}};
    write_dataset(d, out / split);
    const json m = json::parse(detail::read_file(out / split / "manifest"));
    std::cout << split << ": " << count << " samples, crc32 " << m.at("blob_crc32").get<std::string>() << "\n";
    man.output(split, out / split);
  }
  man.finish();
  return 0;
}

struct WarmupOpts {
  fs::path data, out;
  int steps = 1000, m = 8, checkpoint_every = 250, patience = 200, window = 100;
  double lr = 1e-3, ldm_weight = 1.0;
  std::string task = "normals";
  std::uint64_t seed = 0;
  bool resume = false;
};

int cmd_warmup(const WarmupOpts& o) {
  const fs::path out = o.out.empty() ? default_out("warmup") : o.out;
  TrainConfig tc;
  tc.mode = TrainMode::warmup_only;
  tc.n = 0;
  tc.m = o.m;
  tc.warmup_steps = o.steps;
  tc.lr = o.lr;
  tc.task = parse_task(o.task);
  tc.seed = o.seed;
  tc.ldm_weight = o.ldm_weight;
  tc.plateau_patience = o.patience;
  tc.plateau_window = o.window;
  tc.validate();
  const Dataset train = read_split(o.data, "train");
  Pipeline pl;
  pl.model.image_size = pl.model.latent_size = train.resolution;
  RunManifest man("warmup", out, {{"train", tc.to_json()}, {"model", pl.model.to_json()}, {"checkpoint_every", o.checkpoint_every}},
                  {{"data", o.data.string()}}, o.seed);

  Trainer t(pl, tc, train);
  const fs::path ckpt = out / "checkpoint";
  if (o.resume && fs::exists(ckpt / "manifest")) {
    t.restore(load_checkpoint(ckpt, &pl.model));
    std::cout << "resuming warm-up at step " << t.step_index() << "\n";
  } else {
    t.start_warmup(init_params<float>(pl.model, o.seed));
  }
  MetricsLog log(out / "metrics.jsonl", o.resume, "warmup", t.step_index());
  run_stage(t, o.steps, o.checkpoint_every, ckpt, log);
  std::cout << "warm-up finished after " << t.step_index() << " steps" << (t.plateaued() ? " (plateau)" : "") << "\n";
  man.output("checkpoint", ckpt);
  man.output("metrics", out / "metrics.jsonl");
  man.finish();
  return 0;
}

struct ImproveOpts {
  fs::path data, warmup_ckpt, out;
  std::string mode = "self-improve", ema_scope = "full";
  int gen_t = 600, ema_interval = 40, m = 8, n = 2, steps = 1000, checkpoint_every = 250, store_size = 64;
  double ema_alpha = 0.998, lr = 0, syn_weight = 1.0;
  std::uint64_t seed = 0;
  bool resume = false;
};

int cmd_improve(const ImproveOpts& o) {
  const fs::path out = o.out.empty() ? default_out("improve") : o.out;
  const Checkpoint warm = load_checkpoint(o.warmup_ckpt);
  const TrainConfig wc = TrainConfig::from_json(warm.state.at("train_config"));
  TrainConfig tc = wc;
  tc.mode = parse_mode(o.mode);
  tc.gen_t = o.gen_t;
  tc.ema_alpha = o.ema_alpha;
  tc.ema_interval_samples = o.ema_interval;
  tc.ema_scope = o.ema_scope == "head" ? EmaScope::head : EmaScope::full;
  tc.m = o.m;
  tc.n = o.n;
  tc.improve_steps = o.steps;
  tc.seed = o.seed;
  tc.syn_weight = o.syn_weight;
  if (o.lr > 0) tc.lr = o.lr;
  tc.validate();
  const Pipeline pl = pipeline_for(warm);
  if (tc.mode == TrainMode::self_improve && (tc.gen_t <= 0 || tc.gen_t >= pl.schedule.t_max()))
    throw ConfigError("--gen-t must lie in (0, " + std::to_string(pl.schedule.t_max()) + ")");
  const Dataset train = read_split(o.data, "train");
  RunManifest man("improve", out,
                  {{"train", tc.to_json()}, {"store_size", o.store_size}, {"checkpoint_every", o.checkpoint_every}},
                  {{"data", o.data.string()}, {"warmup_ckpt", o.warmup_ckpt.string()}}, o.seed);

  std::optional<Dataset> store;
  if (tc.n > 0 && o.store_size > 0) {
    const fs::path sdir = out / "store";
    if (o.resume && fs::exists(sdir / "manifest")) {
      store = read_dataset(sdir);
    } else {
      const int t = tc.mode == TrainMode::gna ? pl.schedule.t_max() : tc.gen_t;
      store = presynthesize(warm.sets.at("theta_e"), pl, train, o.store_size, t, mix_seed(o.seed ^ 0x57053),
                            8, [](int done, int total) { std::cerr << "\rsynthesized " << done << "/" << total << std::flush; });
      std::cerr << "\n";
      write_dataset(*store, sdir);
    }
    man.output("store", sdir);
  }

  Trainer t(pl, tc, train, store ? &*store : nullptr);
  const fs::path ckpt = out / "checkpoint";
  if (o.resume && fs::exists(ckpt / "manifest")) {
    t.restore(load_checkpoint(ckpt, &pl.model));
    std::cout << "resuming " << o.mode << " at step " << t.step_index() << "\n";
  } else {
    t.start_improve(warm);
  }
  MetricsLog log(out / "metrics.jsonl", o.resume, "improve", t.step_index());
  run_stage(t, o.steps, o.checkpoint_every, ckpt, log);
  std::cout << o.mode << " finished after " << t.step_index() << " steps\n";
  man.output("checkpoint", ckpt);
  man.output("metrics", out / "metrics.jsonl");
  man.finish();
  return 0;
}

struct SampleOpts {
  fs::path ckpt, data, out;
  std::string mode = "partial", task = "normals";
  int ref_index = 0, t = 600, count = 8;
  std::uint64_t seed = 0;
};

Tensor<float> label_tile(const Tensor<float>& labels, Task task, int classes) {
  Tensor<float> tile({3, labels.dim(1), labels.dim(2)});
  const std::size_t hw = static_cast<std::size_t>(labels.dim(1)) * labels.dim(2);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) {
      if (task == Task::normals)
        tile[c * hw + p] = 0.5f * (labels[c * hw + p] + 1);
      else if (task == Task::depth)
        tile[c * hw + p] = 1.0f / (1.0f + labels[p]);
      else
        tile[c * hw + p] = static_cast<float>((static_cast<int>(labels[p]) * (c + 2)) % classes) / (classes - 1);
    }
  return tile;
}

int cmd_sample(const SampleOpts& o) {
  const fs::path out = o.out.empty() ? default_out("sample") : o.out;
  if (o.mode != "full" && o.mode != "partial") throw ParameterError("--mode must be full or partial");
  if (o.count < 1) throw ParameterError("--count must be positive");
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Pipeline pl = pipeline_for(ck);
  const Task task = parse_task(o.task);
  const Dataset data = read_split(o.data, "train");
  if (o.ref_index < 0 || o.ref_index >= data.size()) throw ParameterError("--ref-index out of range");
  const Sample& ref = data.samples[static_cast<std::size_t>(o.ref_index)];
  RunManifest man("sample", out,
                  {{"mode", o.mode}, {"t", o.t}, {"count", o.count}, {"ref_index", o.ref_index}, {"task", o.task}, {"seed", o.seed}},
                  {{"ckpt", o.ckpt.string()}, {"data", o.data.string()}}, o.seed);

  const ParamSet<float>& theta = inference_params(ck);
  const auto cond = Condition<float>::of(ref.descriptor);
  std::vector<Tensor<float>> images{ref.image}, labels{label_tile(task_target(ref, task), task, pl.model.num_classes)};
  double l2 = 0;
  for (int k = 0; k < o.count; ++k) {
    Rng rng = make_rng(o.seed, 100 + static_cast<std::uint64_t>(k));
    const SyntheticPair sp = o.mode == "full" ? generate_full(theta, pl, cond, rng, task)
                                              : generate_partial(theta, pl, ref, o.t, cond, rng, task);
    double d = 0;
    for (std::size_t i = 0; i < sp.image.size(); ++i) d += std::pow(sp.image[i] - ref.image[i], 2);
    l2 += std::sqrt(d);
    images.push_back(sp.image);
    labels.push_back(label_tile(sp.labels, task, pl.model.num_classes));
  }
  write_png_strip(out / "images.png", images);
  write_png_strip(out / "labels.png", labels);
  const json report = {{"mode", o.mode},
                       {"t", o.mode == "full" ? pl.schedule.t_max() : o.t},
                       {"count", o.count},
                       {"ref_id", ref.id},
                       {"mean_l2_to_ref", l2 / o.count}};
  write_json(out / "sample_report.json", report);
  std::cout << "mean L2 to reference " << l2 / o.count << "\n";
  man.output("images", out / "images.png");
  man.output("labels", out / "labels.png");
  man.output("report", out / "sample_report.json");
  man.finish();
  return 0;
}

struct EvalOpts {
  fs::path ckpt, data, out;
  std::string task = "normals", label;
};

int cmd_eval(const EvalOpts& o) {
  const fs::path out = o.out.empty() ? default_out("eval") : o.out;
  const Checkpoint ck = load_checkpoint(o.ckpt);
  const Pipeline pl = pipeline_for(ck);
  const Task task = parse_task(o.task);
  const Dataset test = read_split(o.data, "test");
  RunManifest man("eval", out, {{"task", o.task}, {"label", o.label}}, {{"ckpt", o.ckpt.string()}, {"data", o.data.string()}},
                  0);
  bool conditioned = true;
  if (ck.state.contains("train_config")) conditioned = ck.state.at("train_config").value("conditioned", true);
  MetricReport r = evaluate_model(inference_params(ck), pl, test, task, conditioned);
  r.label = o.label.empty() ? o.ckpt.parent_path().filename().string() : o.label;
  write_json(out / "report.json", r.to_json());
  for (const auto& [k, v] : r.values) std::cout << k << " " << v << "\n";
  man.output("report", out / "report.json");
  man.finish();
  return 0;
}

struct GradcheckOpts {
  fs::path out;
  std::string scale = "tiny";
  double tolerance = 1e-4;
};

int cmd_gradcheck(const GradcheckOpts& o) {
  if (o.scale != "tiny") throw ParameterError("only --scale tiny is available");
  const fs::path out = o.out.empty() ? default_out("gradcheck") : o.out;
  RunManifest man("gradcheck", out, {{"scale", o.scale}, {"tolerance", o.tolerance}}, json::object(), 7);
  const auto results = gradcheck_suite(o.tolerance);
  double worst = 0;
  bool ok = true;
  json rows = json::array();
  for (const auto& r : results) {
    std::cout << (r.pass ? "pass " : "FAIL ") << r.name << " params " << r.param_count << " worst_rel " << r.worst_rel
              << " at " << r.worst_param << "[" << r.worst_index << "]\n";
    worst = std::max(worst, r.worst_rel);
    ok = ok && r.pass;
    rows.push_back({{"name", r.name}, {"worst_rel", r.worst_rel}, {"param", r.worst_param}, {"pass", r.pass}});
  }
  std::cout << "worst relative error " << worst << " (tolerance " << o.tolerance << ")\n";
  write_json(out / "gradcheck.json", {{"worst_rel", worst}, {"pass", ok}, {"cases", rows}});
  man.output("report", out / "gradcheck.json");
  man.finish();
  return ok ? 0 : 4;
}

struct PlotOpts {
  std::vector<fs::path> logs;
  fs::path out;
};

int cmd_plot(const PlotOpts& o) {
  const fs::path out = o.out.empty() ? default_out("plot") : o.out;
  json inputs = json::array();
  for (const auto& l : o.logs) inputs.push_back(l.string());
  RunManifest man("plot", out, json::object(), {{"logs", inputs}}, 0);
  std::vector<Series> losses, metric, diversity;
  std::map<std::string, Series> div_by_mode;
  Series mean_err{"mean", {}, {}};
  for (const auto& path : o.logs) {
    if (!fs::exists(path)) throw IoError("no such log '" + path.string() + "'");
    if (path.extension() == ".jsonl") {
      Series s{path.parent_path().filename().string(), {}, {}};
      std::ifstream in(path);
      int k = 0;
      for (std::string line; std::getline(in, line);) {
        if (line.empty()) continue;
        const json r = json::parse(line);
        s.x.push_back(k++);
        s.y.push_back(r.at("loss"));
      }
      losses.push_back(std::move(s));
      continue;
    }
    const json j = json::parse(detail::read_file(path));
    if (j.contains("mean_l2_to_ref")) {
      auto& s = div_by_mode[j.at("mode").get<std::string>()];
      s.name = j.at("mode");
      s.x.push_back(j.at("t"));
      s.y.push_back(j.at("mean_l2_to_ref"));
    } else if (j.contains("values")) {
      const auto& v = j.at("values");
      const std::string key = v.contains("mean") ? "mean" : v.contains("miou") ? "miou" : "rmse";
      mean_err.name = key;
      mean_err.x.push_back(static_cast<double>(mean_err.x.size()));
      mean_err.y.push_back(v.at(key));
    } else {
      throw FormatError("unrecognised log '" + path.string() + "'");
    }
  }
  if (!losses.empty()) {
    write_text_file((out / "loss_vs_step.svg").string(), svg_line_chart("training loss", "iteration", "loss", losses));
    man.output("loss", out / "loss_vs_step.svg");
  }
  for (auto& [_, s] : div_by_mode) {
    std::vector<std::size_t> order(s.x.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](auto a, auto b) { return s.x[a] < s.x[b]; });
    Series sorted{s.name, {}, {}};
    for (auto i : order) sorted.x.push_back(s.x[i]), sorted.y.push_back(s.y[i]);
    diversity.push_back(std::move(sorted));
  }
  if (!diversity.empty()) {
    write_text_file((out / "diversity_vs_t.svg").string(),
                    svg_line_chart("distance to reference", "timestep", "mean L2", diversity, true));
    man.output("diversity", out / "diversity_vs_t.svg");
  }
  if (!mean_err.x.empty()) {
    metric.push_back(mean_err);
    write_text_file((out / "metric_vs_run.svg").string(),
                    svg_line_chart("held-out metric", "run (order given)", mean_err.name, metric, true));
    man.output("metric", out / "metric_vs_run.svg");
  }
  man.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"unidiff: unified diffusion model with self-improving training"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);
  app.set_version_flag("--version", kToolVersion);

  GenDataOpts gd;
  auto* g = app.add_subcommand("gen-data", "render train/test splits of synthetic scenes");
  g->add_option("--out", gd.out, "output directory");
  g->add_option("--train-count", gd.train_count)->capture_default_str();
  g->add_option("--test-count", gd.test_count)->capture_default_str();
  g->add_option("--style", gd.style)->check(CLI::IsMember({"A", "B"}))->capture_default_str();
  g->add_option("--resolution", gd.resolution)->check(CLI::IsMember({8, 16, 32, 64, 128}))->capture_default_str();
  g->add_option("--seed", gd.seed)->capture_default_str();

  WarmupOpts wo;
  auto* w = app.add_subcommand("warmup", "supervised warm-up with the joint denoising objective");
  w->add_option("--data", wo.data, "dataset directory (with a train/ split)")->required();
  w->add_option("--out", wo.out);
  w->add_option("--steps", wo.steps)->check(CLI::NonNegativeNumber)->capture_default_str();
  w->add_option("--lr", wo.lr)->check(CLI::PositiveNumber)->capture_default_str();
  w->add_option("--task", wo.task)->check(CLI::IsMember({"normals", "segmentation", "depth"}))->capture_default_str();
  w->add_option("--seed", wo.seed)->capture_default_str();
  w->add_option("--m", wo.m, "real pairs per iteration")->check(CLI::PositiveNumber)->capture_default_str();
  w->add_option("--ldm-weight", wo.ldm_weight)->check(CLI::NonNegativeNumber)->capture_default_str();
  w->add_option("--plateau-patience", wo.patience)->capture_default_str();
  w->add_option("--plateau-window", wo.window)->capture_default_str();
  w->add_option("--checkpoint-every", wo.checkpoint_every)->capture_default_str();
  w->add_flag("--resume", wo.resume, "continue from the checkpoint in --out");

  ImproveOpts io;
  auto* im = app.add_subcommand("improve", "self-improving stage (or a baseline mode) after warm-up");
  im->add_option("--data", io.data)->required();
  im->add_option("--warmup-ckpt", io.warmup_ckpt)->required();
  im->add_option("--out", io.out);
  im->add_option("--mode", io.mode)->check(CLI::IsMember({"self-improve", "gna", "warmup-only"}))->capture_default_str();
  im->add_option("--gen-t", io.gen_t)->capture_default_str();
  im->add_option("--ema-alpha", io.ema_alpha)->capture_default_str();
  im->add_option("--ema-interval", io.ema_interval, "samples consumed between EMA updates")->capture_default_str();
  im->add_option("--ema-scope", io.ema_scope)->check(CLI::IsMember({"full", "head"}))->capture_default_str();
  im->add_option("--m", io.m)->capture_default_str();
  im->add_option("--n", io.n)->capture_default_str();
  im->add_option("--steps", io.steps)->check(CLI::NonNegativeNumber)->capture_default_str();
  im->add_option("--lr", io.lr, "defaults to the warm-up learning rate");
  im->add_option("--syn-weight", io.syn_weight)->capture_default_str();
  im->add_option("--store-size", io.store_size, "presynthesized images; 0 generates on the fly")->capture_default_str();
  im->add_option("--seed", io.seed)->capture_default_str();
  im->add_option("--checkpoint-every", io.checkpoint_every)->capture_default_str();
  im->add_flag("--resume", io.resume);

  SampleOpts so;
  auto* sa = app.add_subcommand("sample", "generate image/label pairs and export PNG strips");
  sa->add_option("--ckpt", so.ckpt)->required();
  sa->add_option("--data", so.data, "dataset providing the reference image and descriptor")->required();
  sa->add_option("--mode", so.mode)->check(CLI::IsMember({"full", "partial"}))->capture_default_str();
  sa->add_option("--ref-index", so.ref_index)->capture_default_str();
  sa->add_option("--t", so.t)->capture_default_str();
  sa->add_option("--count", so.count)->capture_default_str();
  sa->add_option("--task", so.task)->check(CLI::IsMember({"normals", "segmentation", "depth"}))->capture_default_str();
  sa->add_option("--seed", so.seed)->capture_default_str();
  sa->add_option("--out", so.out);

  EvalOpts eo;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a labelled dataset");
  ev->add_option("--ckpt", eo.ckpt)->required();
  ev->add_option("--data", eo.data, "dataset directory (test/ split if present)")->required();
  ev->add_option("--task", eo.task)->check(CLI::IsMember({"normals", "segmentation", "depth"}))->capture_default_str();
  ev->add_option("--label", eo.label, "row name in comparison tables");
  ev->add_option("--out", eo.out);

  GradcheckOpts go;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every learnable path");
  gc->add_option("--scale", go.scale)->check(CLI::IsMember({"tiny"}))->capture_default_str();
  gc->add_option("--tolerance", go.tolerance)->capture_default_str();
  gc->add_option("--out", go.out);

  PlotOpts po;
  auto* pt = app.add_subcommand("plot", "SVG curves from metrics logs, sample and eval reports");
  pt->add_option("--logs", po.logs)->required();
  pt->add_option("--out", po.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen_data(gd);
    if (*w) return cmd_warmup(wo);
    if (*im) return cmd_improve(io);
    if (*sa) return cmd_sample(so);
    if (*ev) return cmd_eval(eo);
    if (*gc) return cmd_gradcheck(go);
    if (*pt) return cmd_plot(po);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const IoError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "i/o failure: " << e.what() << "\n";
    return 3;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "i/o failure: malformed file: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
