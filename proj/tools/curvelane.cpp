// Command-line front end: generate | train | eval | infer | plot.

#include "curvelane/config.hpp"
#include "curvelane/dataset_io.hpp"
#include "curvelane/plot.hpp"
#include "curvelane/runner.hpp"
#include "curvelane/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace curvelane;
using nlohmann::json;

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  bool force = false;
  std::vector<std::string> overrides;
  // generate
  std::optional<int> sequences, frames;
  // eval
  bool oracle = false;
  // plot
  std::string predictions, report;
  int max_frames = 2;
};

class CliError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// JSON-lines log on stderr.
void log_event(const std::string& event, json fields = json::object()) {
  fields["event"] = event;
  std::cerr << fields.dump() << std::endl;
}

RunConfig resolve(const Options& o) {
  std::vector<std::string> ov = o.overrides;
  if (o.seed) ov.push_back("seed=" + std::to_string(*o.seed));
  if (!o.out.empty()) ov.push_back("out=" + json(o.out).dump());
  if (o.sequences) ov.push_back("data.sequences=" + std::to_string(*o.sequences));
  if (o.frames) ov.push_back("data.frames=" + std::to_string(*o.frames));
  return load_config(o.config, ov);
}

/// Config echo for artifacts; the output directory is reported separately so
/// runs that differ only in where they write compare equal.
json config_echo(const RunConfig& c) {
  json j = c;
  j.erase("out");
  return j;
}

bool non_empty_dir(const fs::path& p) { return fs::is_directory(p) && !fs::is_empty(p); }

void prepare_out_dir(const fs::path& out, bool force, const std::string& what) {
  if (fs::exists(out) && !fs::is_directory(out)) throw CliError(out.string() + " exists and is not a directory");
  if (non_empty_dir(out) && !force) {
    throw CliError(out.string() + " is not empty; pass --force to write into it (" + what + ")");
  }
  fs::create_directories(out);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw CliError("cannot write " + p.string());
  f << text;
}

// ---------------------------------------------------------------------------

int cmd_generate(const Options& o) {
  RunConfig c = resolve(o);
  const fs::path out = c.out;
  prepare_out_dir(out, o.force, "dataset");
  if (o.force) {
    // drop an earlier dataset's files so the directory holds exactly this one
    for (const auto& e : fs::directory_iterator(out)) {
      if (e.path().extension() == ".json") fs::remove(e.path());
    }
    fs::remove_all(out / "images");
  }
  const auto seqs = load_or_generate(c.data);
  save_dataset(seqs, out);
  json manifest;
  manifest["seed"] = c.data.scene.seed;
  manifest["sequences"] = json::array();
  for (const auto& s : seqs) manifest["sequences"].push_back({{"id", s.sequence_id}, {"frames", s.frames.size()}});
  manifest["config"] = config_echo(c);
  write_text(out / "manifest.json", manifest.dump(1) + "\n");
  log_event("generate_done", {{"out", out.string()}, {"sequences", seqs.size()}, {"frames", c.data.frames}});
  return 0;
}

template <class S>
int train_impl(const Options& o, const RunConfig& c) {
  const fs::path out = c.out;
  const bool resuming = !o.checkpoint.empty();
  if (!resuming) prepare_out_dir(out, o.force, "training run");
  fs::create_directories(out);
  const auto seqs = load_or_generate(c.data);
  Trainer<S> tr(c, seqs);
  if (resuming) {
    tr.resume(o.checkpoint);
    log_event("resume", {{"checkpoint", o.checkpoint}, {"step", tr.step_index()}});
  }
  write_text(out / "config.json", json(c).dump(1) + "\n");
  std::ofstream log(out / "train_log.jsonl", resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw CliError("cannot write the training log");
  log_event("train_start", {{"steps", tr.total_steps()}, {"params", tr.model().params().scalar_count()},
                            {"precision", c.train.precision}});
  const auto t0 = std::chrono::steady_clock::now();
  tr.run(
      [&](const StepRecord& r) {
        if (r.step % c.train.log_every == 0 || r.step == tr.total_steps()) {
          log << r.to_json().dump() << "\n";
          log.flush();
        }
      },
      out / "checkpoints");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log_event("train_done", {{"step", tr.step_index()}, {"seconds", secs},
                           {"checkpoint", (out / "checkpoints" / "last.json").string()}});
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolve(o);
  return c.train.precision == "double" ? train_impl<double>(o, c) : train_impl<float>(o, c);
}

template <class S>
Model<S> load_model(const Options& o, const RunConfig& c) {
  if (o.checkpoint.empty()) throw CliError("--checkpoint is required");
  Model<S> m(c.model, c.seed);
  load_model_weights(m, read_checkpoint(o.checkpoint), json(c));
  return m;
}

void write_report(const fs::path& out, const MetricReport& rep, const RunConfig& c, const std::string& source) {
  json j = to_json(rep, config_echo(c));
  j["source"] = source;
  write_text(out / "metrics.json", j.dump(1) + "\n");
  write_text(out / "metrics.csv", metric_report_csv(rep));
  write_text(out / "stability.csv", stability_csv(rep.stability));
  log_event("eval_done", {{"out", out.string()},
                          {"F1", rep.openlane.f1},
                          {"once_F1", rep.once.f1},
                          {"mean_F_stab", detail::number_or_null(rep.stability.mean_f_stab)}});
}

template <class S>
int eval_impl(const Options& o, const RunConfig& c) {
  const fs::path out = c.out;
  prepare_out_dir(out, o.force, "evaluation report");
  const auto seqs = load_or_generate(c.data);
  if (o.oracle) {
    write_report(out, evaluate_oracle(seqs, c.eval), c, "ground_truth");
    return 0;
  }
  const Model<S> m = load_model<S>(o, c);
  const auto preds = predict_sequences(m, c.fusion, seqs);
  write_report(out, evaluate_predictions(preds, seqs, c.eval), c, o.checkpoint);
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = resolve(o);
  return c.train.precision == "double" ? eval_impl<double>(o, c) : eval_impl<float>(o, c);
}

json lane_json(const PolyLane& l) {
  return {{"confidence", l.confidence},
          {"y_start", l.y_start},
          {"y_end", l.y_end},
          {"coeffs_x", l.coeffs_x},
          {"coeffs_z", l.coeffs_z}};
}

template <class S>
int infer_impl(const Options& o, const RunConfig& c) {
  const fs::path out = c.out;
  prepare_out_dir(out, o.force, "predictions");
  const auto seqs = load_or_generate(c.data);
  const Model<S> m = load_model<S>(o, c);
  const auto& mc = c.model;
  const auto ys = mc.y_positions();
  const auto grid = c.eval.grid();
  ag::NoGradGuard ng;
  json doc;
  doc["config"] = config_echo(c);
  doc["checkpoint"] = o.checkpoint;
  doc["anchor_y"] = ys;
  doc["eval_y"] = grid;
  doc["sequences"] = json::array();
  for (const auto& seq : seqs) {
    TemporalMemory mem(c.fusion.history_len);
    json js{{"sequence_id", seq.sequence_id}, {"frames", json::array()}};
    for (const auto& f : seq.frames) {
      const auto res = fused_forward(m, mem, c.fusion, f.image, f.rig, f.ego_motion_from_prev, f.index);
      json jf{{"index", f.index}, {"lanes", json::array()}, {"layers", json::array()}, {"ground_truth", json::array()}};
      for (const auto& l : to_poly_lanes(res.head, mc.box.y)) jf["lanes"].push_back(lane_json(l));
      for (const auto& layer : res.layers) {
        jf["layers"].push_back({{"x", as_doubles(layer.state.x)},
                                {"z", as_doubles(layer.state.z)},
                                {"start", as_doubles(layer.state.start)},
                                {"end", as_doubles(layer.state.end)}});
      }
      for (const auto& g : f.lanes) {
        if (!g.is_lane) continue;
        json pts = json::array();
        for (const auto& p : g.points) pts.push_back({p.x(), p.y(), p.z()});
        jf["ground_truth"].push_back({{"category", g.category}, {"points", pts}});
      }
      js["frames"].push_back(std::move(jf));
    }
    doc["sequences"].push_back(std::move(js));
  }
  write_text(out / "predictions.json", doc.dump() + "\n");
  log_event("infer_done", {{"out", (out / "predictions.json").string()}, {"sequences", seqs.size()}});
  return 0;
}

int cmd_infer(const Options& o) {
  const RunConfig c = resolve(o);
  return c.train.precision == "double" ? infer_impl<double>(o, c) : infer_impl<float>(o, c);
}

// ---------------------------------------------------------------------------
// plot

const char* kPredColor = "#d62728";
const char* kGtColor = "#2ca02c";

PolyLane lane_from(const json& j) {
  PolyLane l;
  l.confidence = j.at("confidence");
  l.y_start = j.at("y_start");
  l.y_end = j.at("y_end");
  l.coeffs_x = j.at("coeffs_x").get<std::vector<double>>();
  l.coeffs_z = j.at("coeffs_z").get<std::vector<double>>();
  return l;
}

GroundTruthLane gt_from(const json& j) {
  GroundTruthLane g;
  g.category = j.at("category");
  for (const auto& p : j.at("points")) g.points.emplace_back(p[0].get<double>(), p[1].get<double>(), p[2].get<double>());
  return g;
}

Series lane_series(const PolyLane& l, bool side, const char* color) {
  Series s;
  s.color = color;
  for (double y = l.y_start; y <= l.y_end + 1e-9; y += 1.0) {
    s.x.push_back(side ? y : horner(l.coeffs_x, y));
    s.y.push_back(side ? horner(l.coeffs_z, y) : y);
  }
  return s;
}

Series gt_series(const GroundTruthLane& g, bool side) {
  Series s;
  s.color = kGtColor;
  s.dashed = true;
  for (const auto& p : g.points) {
    s.x.push_back(side ? p.y() : p.x());
    s.y.push_back(side ? p.z() : p.y());
  }
  return s;
}

int cmd_plot(const Options& o) {
  if (o.predictions.empty() && o.report.empty()) throw CliError("plot needs --predictions and/or --report");
  if (o.out.empty()) throw CliError("plot needs --out");
  const fs::path out = o.out;
  prepare_out_dir(out, o.force, "plots");
  int written = 0;
  auto save = [&](const SvgChart& c, const std::string& name) {
    c.save((out / name).string());
    ++written;
  };

  if (!o.predictions.empty()) {
    const json doc = read_json_file(o.predictions);
    const RunConfig c = config_from_json(doc.at("config"));
    const double thr = c.eval.confidence;
    const auto anchor_y = doc.at("anchor_y").get<std::vector<double>>();
    const auto& box = c.model.box;
    if (doc.at("sequences").empty()) throw CliError("predictions file holds no sequences");
    std::vector<FrameLanes> preds, gts;
    std::vector<std::string> ids;
    const auto grid = c.eval.grid();
    for (const auto& js : doc.at("sequences")) {
      const std::string id = js.at("sequence_id");
      ids.push_back(id);
      FrameLanes ps, gs;
      int shown = 0;
      for (const auto& jf : js.at("frames")) {
        std::vector<PolyLane> lanes;
        for (const auto& l : jf.at("lanes")) lanes.push_back(lane_from(l));
        std::vector<GroundTruthLane> gt;
        for (const auto& g : jf.at("ground_truth")) gt.push_back(gt_from(g));
        ps.push_back(pred_eval_lanes(lanes, grid, thr));
        gs.push_back(gt_eval_lanes(gt, grid));
        if (shown >= o.max_frames) continue;
        const std::string stem = id + "_" + std::to_string(jf.at("index").get<int>());
        SvgChart top("top view " + stem, "x (m)", "y (m)");
        SvgChart side("side view " + stem, "y (m)", "z (m)", 640, 320);
        top.set_limits(box.x.lo / 2, box.x.hi / 2, box.y.lo, box.y.hi);
        for (const auto& g : gt) {
          top.add(gt_series(g, false));
          side.add(gt_series(g, true));
        }
        for (const auto& l : lanes) {
          if (l.confidence < thr) continue;
          top.add(lane_series(l, false, kPredColor));
          side.add(lane_series(l, true, kPredColor));
        }
        top.note("red: prediction, green dashed: ground truth");
        save(top, "topview_" + stem + ".svg");
        save(side, "sideview_" + stem + ".svg");
        // anchors of the confident queries after every decoder layer
        const auto& layers = jf.at("layers");
        for (std::size_t k = 0; k < layers.size(); ++k) {
          SvgChart tr("anchors after layer " + std::to_string(k + 1) + " " + stem, "x (m)", "y (m)");
          tr.set_limits(box.x.lo / 2, box.x.hi / 2, box.y.lo, box.y.hi);
          for (const auto& g : gt) tr.add(gt_series(g, false));
          const auto x = layers[k].at("x").get<std::vector<double>>();
          const int n = static_cast<int>(anchor_y.size());
          for (int q = 0; q < static_cast<int>(lanes.size()); ++q) {
            Series s;
            s.color = lanes[q].confidence >= thr ? kPredColor : "#bbbbbb";
            s.markers = true;
            s.width = 0.8;
            for (int i = 0; i < n; ++i) {
              s.x.push_back(x[static_cast<std::size_t>(q) * n + i]);
              s.y.push_back(anchor_y[i]);
            }
            tr.add(std::move(s));
          }
          save(tr, "refine_" + stem + "_layer" + std::to_string(k + 1) + ".svg");
        }
        ++shown;
      }
      preds.push_back(std::move(ps));
      gts.push_back(std::move(gs));
    }
    const auto rep = evaluate_lanes(preds, gts, ids, c.eval);
    for (const auto& s : rep.stability.sequences) {
      SvgChart ch("lateral disparity " + s.sequence_id, "frame", "dist_x (m)", 640, 320);
      Series sr;
      sr.markers = true;
      for (std::size_t i = 0; i < s.dist_x.size(); ++i) {
        sr.x.push_back(static_cast<double>(i));
        sr.y.push_back(s.dist_x[i]);
      }
      ch.add(sr);
      ch.note("F_stab = " + (std::isnan(s.f_stab) ? std::string("n/a") : json(s.f_stab).dump()) + " m");
      save(ch, "stability_" + s.sequence_id + ".svg");
    }
  }

  if (!o.report.empty()) {
    const json rep = read_json_file(o.report);
    const auto& seqs = rep.at("stability").at("sequences");
    for (const auto& s : seqs) {
      const auto d = s.at("dist_x").get<std::vector<double>>();
      SvgChart ch("lateral disparity " + s.at("sequence_id").get<std::string>(), "frame", "dist_x (m)", 640, 320);
      Series sr;
      sr.markers = true;
      for (std::size_t i = 0; i < d.size(); ++i) {
        sr.x.push_back(static_cast<double>(i));
        sr.y.push_back(d[i]);
      }
      ch.add(sr);
      ch.note("F_stab = " + s.at("F_stab").dump() + " m");
      save(ch, "report_stability_" + s.at("sequence_id").get<std::string>() + ".svg");
    }
  }
  if (written == 0) throw CliError("nothing to plot");
  log_event("plot_done", {{"out", out.string()}, {"files", written}});
  return 0;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config, "JSON config file");
  sub->add_option("--seed", o.seed, "Run seed");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_flag("--force", o.force, "Write into a non-empty output directory");
  sub->add_option("overrides", o.overrides, "Dotted key overrides, e.g. fusion.variant=topk_query");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Curve-query 3D lane detection toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Write a synthetic dataset");
  add_common(gen, o);
  gen->add_option("--sequences", o.sequences, "Number of sequences");
  gen->add_option("--frames", o.frames, "Frames per sequence");

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, o);
  train->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint manifest");

  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
  add_common(eval, o);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint manifest");
  eval->add_flag("--oracle", o.oracle, "Score the ground truth against itself");

  auto* infer = app.add_subcommand("infer", "Write predictions and decoder traces");
  add_common(infer, o);
  infer->add_option("--checkpoint", o.checkpoint, "Checkpoint manifest")->required();

  auto* plot = app.add_subcommand("plot", "Render SVG figures");
  plot->add_option("--predictions", o.predictions, "predictions.json from infer");
  plot->add_option("--report", o.report, "metrics.json from eval");
  plot->add_option("--out", o.out, "Output directory");
  plot->add_option("--max-frames", o.max_frames, "Frames per sequence to draw");
  plot->add_flag("--force", o.force, "Write into a non-empty output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_generate(o);
    if (*train) return cmd_train(o);
    if (*eval) return cmd_eval(o);
    if (*infer) return cmd_infer(o);
    if (*plot) return cmd_plot(o);
  } catch (const std::exception& e) {
    log_event("error", {{"message", e.what()}});
    return 1;
  }
  return 0;
}
