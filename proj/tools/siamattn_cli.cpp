#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "siamattn/siamattn.hpp"

namespace fs = std::filesystem;
using namespace siamattn;

namespace {

struct Common {
  std::string config_path;
  std::string preset = "tiny";
};

RunConfig resolve_config(const Common& c) {
  if (!c.config_path.empty()) return load_config(c.config_path);
  return config_from_json(Json{{"preset", c.preset}});
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "Preset used when no config file is given")
      ->check(CLI::IsMember({"tiny", "paper"}));
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  SIAMATTN_CHECK(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  return out;
}

void write_resolved_config(const fs::path& dir, const RunConfig& cfg) {
  Json j = config_to_json(cfg);
  auto out = open_out(dir / "config.json");
  out << j.dump(2) << '\n';
  auto h = open_out(dir / "config_hash.txt");
  h << config_hash(cfg) << '\n';
}

Box parse_box(const std::string& text) {
  std::string s = text;
  for (char& ch : s)
    if (ch == ',') ch = ' ';
  std::istringstream in(s);
  Box b;
  std::string extra;
  if (!(in >> b.cx >> b.cy >> b.w >> b.h) || (in >> extra) || !b.valid())
    throw Error(ErrorCode::kInvalidArgument, "init box must be 'cx,cy,w,h' with positive size, got '" + text + "'");
  return b;
}

SequenceRecord sequence_for_demo(const std::string& dir, const RunConfig& cfg) {
  if (dir.empty()) return evaluation_sequences(cfg).at(0);
  int warnings = 0;
  auto rec = read_sequence(dir, warnings);
  SIAMATTN_CHECK(rec.has_value(), ErrorCode::kDataset, "cannot read annotated sequence " + dir);
  return *rec;
}

// ---------------------------------------------------------------------------

int cmd_generate(const Common& common, const std::string& out_dir, const std::string& split) {
  const RunConfig cfg = resolve_config(common);
  std::size_t n = 0;
  if (split == "train" || split == "both") {
    for (const auto& s : generate_synthetic_suite(cfg.synthetic.train, "train")) write_sequence(fs::path(out_dir) / "train", s), ++n;
  }
  if (split == "eval" || split == "both") {
    for (const auto& s : generate_synthetic_suite(cfg.synthetic.eval, "eval")) write_sequence(fs::path(out_dir) / "eval", s), ++n;
  }
  write_resolved_config(out_dir, cfg);
  std::printf("wrote %zu sequences to %s (config %s)\n", n, out_dir.c_str(), config_hash(cfg).c_str());
  return 0;
}

int cmd_train(const Common& common, const std::string& out_dir, const std::string& resume) {
  const RunConfig cfg = resolve_config(common);
  const std::string hash = config_hash(cfg);
  fs::create_directories(out_dir);
  write_resolved_config(out_dir, cfg);
  const auto seqs = training_sequences(cfg);
  std::ofstream log = open_out(fs::path(out_dir) / "train_log.jsonl");
  std::optional<Checkpoint> ck;
  TrainOptions opts;
  opts.log = &log;
  opts.checkpoint_dir = (fs::path(out_dir) / "checkpoints").string();
  if (!resume.empty()) {
    ck = read_checkpoint(resume);
    opts.resume = &*ck;
  }
  const auto model = train_model(cfg, seqs, opts);
  const std::string final_path = (fs::path(out_dir) / "final.ckpt").string();
  save_checkpoint(final_path, cfg, model->parameters(), cfg.training.schedule.epochs - 1);
  std::printf("trained %d epochs on %zu sequences; checkpoint %s (config %s)\n", cfg.training.schedule.epochs,
              seqs.size(), final_path.c_str(), hash.c_str());
  return 0;
}

int cmd_track(const Common& common, const std::string& checkpoint, const std::string& seq_dir,
              const std::string& init_box, const std::string& mode, const std::string& out_path,
              const std::string& overlay_dir, const std::string& mask_dir) {
  RunConfig cfg = resolve_config(common);
  if (!mode.empty()) cfg.tracker.mode = mode == "rotated" ? TrackMode::kRotatedFromMask : TrackMode::kAxisAligned;
  const std::string hash = config_hash(cfg);
  const Box box = parse_box(init_box);
  const auto model = load_model(checkpoint, cfg);
  SequenceRecord seq;
  seq.id = fs::path(seq_dir).filename().string();
  seq.frames = read_frames(seq_dir);
  SIAMATTN_CHECK(!seq.frames.empty(), ErrorCode::kDataset, "no frames (*.ppm, *.pgm) in " + seq_dir);
  seq.boxes.push_back(box);
  const auto res = track_sequence(*model, cfg.tracker, seq, true);
  std::vector<std::string> mask_paths(res.boxes.size());
  if (!mask_dir.empty() && cfg.tracker.mode == TrackMode::kRotatedFromMask) {
    fs::create_directories(mask_dir);
    for (std::size_t f = 1; f < res.boxes.size(); ++f) {
      const auto& o = res.outputs[f - 1];
      if (o.mask.empty()) continue;
      Image full(1, seq.frames[f].height, seq.frames[f].width);
      const int ox = static_cast<int>(std::lround(o.mask_box.x1())), oy = static_cast<int>(std::lround(o.mask_box.y1()));
      for (int y = 0; y < o.mask.height; ++y)
        for (int x = 0; x < o.mask.width; ++x) {
          const int fy = oy + y, fx = ox + x;
          if (fy >= 0 && fx >= 0 && fy < full.height && fx < full.width && o.mask.at(0, y, x) > 0.5f)
            full.at(0, fy, fx) = 255.f;
        }
      char name[32];
      std::snprintf(name, sizeof(name), "%05zu.pgm", f);
      write_pnm((fs::path(mask_dir) / name).string(), full);
      mask_paths[f] = (fs::path(mask_dir) / name).string();
    }
  }
  {
    std::ofstream out = open_out(out_path);
    std::ostringstream body;
    write_results(body, res, hash);
    std::istringstream lines(body.str());
    std::string line;
    std::size_t f = 0;
    while (std::getline(lines, line)) {
      if (line.rfind('#', 0) == 0) {
        out << line << '\n';
        continue;
      }
      out << line;
      if (!mask_paths[f].empty()) out << " mask=" << mask_paths[f];
      out << '\n';
      ++f;
    }
  }
  if (!overlay_dir.empty()) {
    fs::create_directories(overlay_dir);
    for (std::size_t f = 0; f < res.boxes.size(); ++f) {
      Image img = seq.frames[f];
      if (img.channels == 1) {
        Image rgb(3, img.height, img.width);
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) rgb.at(c, y, x) = img.at(0, y, x);
        img = rgb;
      }
      draw_box_outline(img, res.boxes[f], {0.f, 255.f, 0.f});
      if (res.rotated[f]) draw_rotated_box(img, *res.rotated[f], {255.f, 0.f, 0.f});
      write_pnm((fs::path(overlay_dir) / frame_file_name(f)).string(), img);
    }
  }
  std::printf("tracked %zu frames; results %s (config %s)\n", res.boxes.size(), out_path.c_str(), hash.c_str());
  return 0;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& results_dir,
             const std::string& gt_root, const std::string& out_dir) {
  RunConfig cfg = resolve_config(common);
  if (!gt_root.empty()) cfg.data.eval_root = gt_root;
  const std::string hash = config_hash(cfg);
  SIAMATTN_CHECK(checkpoint.empty() != results_dir.empty(), ErrorCode::kInvalidArgument,
                 "eval needs exactly one of --checkpoint or --results");
  const auto seqs = evaluation_sequences(cfg);
  EvalReport rep;
  if (!checkpoint.empty()) {
    const auto model = load_model(checkpoint, cfg);
    rep = evaluate(*model, cfg.tracker, seqs, cfg.protocol);
    std::ofstream ev = open_out(fs::path(out_dir) / "reset_events.tsv");
    ev << "# config_hash=" << hash << "\nsequence\tframe\tevent\n";
    for (const auto& s : rep.per_sequence)
      for (const auto& e : s.reset.events) ev << s.id << '\t' << e.frame << '\t' << event_name(e.event) << '\n';
  } else {
    std::string missing;
    for (const auto& s : seqs) {
      const fs::path p = fs::path(results_dir) / (s.id + ".txt");
      if (!fs::exists(p)) missing += (missing.empty() ? "" : ", ") + p.string();
    }
    if (!missing.empty()) throw Error(ErrorCode::kIo, "missing result files: " + missing);
    std::vector<std::vector<Box>> all_r, all_g;
    for (const auto& s : seqs) {
      auto r = read_result_boxes((fs::path(results_dir) / (s.id + ".txt")).string());
      SIAMATTN_CHECK(r.size() == s.size(), ErrorCode::kInvalidArgument,
                     "results for " + s.id + " have " + std::to_string(r.size()) + " frames, ground truth has " +
                         std::to_string(s.size()));
      std::vector<Box> rr(r.begin() + 1, r.end()), gg(s.boxes.begin() + 1, s.boxes.end());
      SequenceMetrics sm;
      sm.id = s.id;
      sm.report = precision_success(rr, gg);
      rep.per_sequence.push_back(sm);
      all_r.push_back(std::move(rr));
      all_g.push_back(std::move(gg));
    }
    rep.overall = aggregate(all_r, all_g);
    rep.has_reset = false;
  }
  std::ofstream table = open_out(fs::path(out_dir) / "metrics.tsv");
  write_metric_table(table, rep, hash);
  write_metric_plots(out_dir, {{"SiamAttn", rep.overall}}, hash);
  std::printf("precision@20 %.4f  AUC %.4f  mean IoU %.4f", rep.overall.precision_at_20, rep.overall.auc,
              rep.overall.accuracy);
  if (rep.has_reset) std::printf("  failures %d", rep.reset_failures);
  std::printf(" (config %s)\n", hash.c_str());
  return 0;
}

int cmd_ablate(const Common& common, const std::string& ckpt_dir, const std::string& set, bool train_missing,
               const std::string& out_dir) {
  const RunConfig cfg = resolve_config(common);
  const std::string hash = config_hash(cfg);
  const auto variants = variant_set(set);
  std::vector<std::string> paths;
  for (const auto& v : variants) paths.push_back(variant_checkpoint(ckpt_dir, v));
  if (train_missing) {
    std::vector<SequenceRecord> train;
    for (std::size_t i = 0; i < variants.size(); ++i) {
      if (fs::exists(paths[i])) continue;
      if (train.empty()) train = training_sequences(cfg);
      const RunConfig vc = variants[i].apply(cfg);
      std::ofstream log = open_out(fs::path(ckpt_dir) / (variants[i].name + "_log.jsonl"));
      TrainOptions opts;
      opts.log = &log;
      const auto model = train_model(vc, train, opts);
      save_checkpoint(paths[i], vc, model->parameters(), vc.training.schedule.epochs - 1);
      std::printf("trained variant %s\n", variants[i].name.c_str());
    }
  }
  const auto rows = run_ablation(cfg, variants, paths, evaluation_sequences(cfg));
  std::ofstream table = open_out(fs::path(out_dir) / "ablation.tsv");
  write_ablation_table(table, rows, hash);
  std::vector<std::pair<std::string, MetricReport>> curves;
  for (const auto& r : rows) curves.emplace_back(r.variant.name, r.report.overall);
  write_metric_plots(out_dir, curves, hash);
  write_ablation_table(std::cout, rows, hash);
  return 0;
}

int cmd_demo_attention(const Common& common, const std::string& checkpoint, const std::string& seq_dir, int frame,
                       const std::string& out_dir) {
  const RunConfig cfg = resolve_config(common);
  const std::string hash = config_hash(cfg);
  std::unique_ptr<Model> model =
      checkpoint.empty() ? std::make_unique<Model>(cfg.model, cfg.seed) : load_model(checkpoint, cfg);
  const SequenceRecord seq = sequence_for_demo(seq_dir, cfg);
  SIAMATTN_CHECK(frame >= 1 && static_cast<std::size_t>(frame) < seq.size(), ErrorCode::kInvalidArgument,
                 "--frame must lie in [1, " + std::to_string(seq.size() - 1) + "]");
  const CropConfig cc = cfg.crop_config();
  const Image z = crop_window(seq.frames[0], exemplar_window(seq.boxes[0], cc));
  const Box& prev = seq.boxes[static_cast<std::size_t>(frame - 1)];
  const CropWindow win = search_window(prev.cx, prev.cy, prev, cc);
  const Image x = crop_window(seq.frames[static_cast<std::size_t>(frame)], win);
  NoGradGuard ng;
  const auto tf = model->encode_template(crop_input<float>(z));
  const auto out = model->forward(tf, crop_input<float>(x), true);
  auto names = dump_attention_maps(out_dir, out, model->anchors().k);
  write_pnm((fs::path(out_dir) / "exemplar.ppm").string(), z);
  write_pnm((fs::path(out_dir) / "search.ppm").string(), x);
  std::ofstream manifest = open_out(fs::path(out_dir) / "manifest.txt");
  manifest << "# config_hash=" << hash << " sequence=" << seq.id << " frame=" << frame << '\n';
  manifest << "exemplar.ppm\nsearch.ppm\n";
  for (const auto& n : names) manifest << n << '\n';
  std::printf("wrote %zu maps to %s (config %s)\n", names.size() + 2, out_dir.c_str(), hash.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SiamAttn: deformable Siamese attention tracker"};
  app.require_subcommand(1);

  Common common;
  std::string out_dir, checkpoint, seq_dir, init_box, mode, out_path = "results.txt", overlay_dir, mask_dir, results_dir,
                                                                gt_root, resume, split = "both", set = "components";
  int frame = 1;
  bool train_missing = false;

  auto* gen = app.add_subcommand("generate", "Write the synthetic train/eval suites to disk");
  add_common(gen, common);
  gen->add_option("-o,--out", out_dir, "Output dataset root")->required();
  gen->add_option("--split", split, "Which suite")->check(CLI::IsMember({"train", "eval", "both"}));

  auto* train = app.add_subcommand("train", "Train a model");
  add_common(train, common);
  train->add_option("-o,--out", out_dir, "Output directory")->required();
  train->add_option("--resume", resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  auto* track = app.add_subcommand("track", "Track one sequence from an initial box");
  add_common(track, common);
  track->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  track->add_option("--sequence", seq_dir, "Directory of frame images")->required();
  track->add_option("--init-box", init_box, "Initial box 'cx,cy,w,h' in frame pixels")->required();
  track->add_option("--mode", mode, "Output geometry")->check(CLI::IsMember({"axis", "rotated"}));
  track->add_option("-o,--out", out_path, "Result record file");
  track->add_option("--overlay", overlay_dir, "Write annotated frames here");
  track->add_option("--masks", mask_dir, "Write per-frame binary masks here (rotated mode)");

  auto* eval = app.add_subcommand("eval", "Compute precision/success/AUC and reset-protocol metrics");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Track the evaluation suite with this checkpoint");
  eval->add_option("--results", results_dir, "Directory of <sequence>.txt result files");
  eval->add_option("--gt", gt_root, "Annotated dataset root (default: the configured evaluation data)");
  eval->add_option("-o,--out", out_dir, "Report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "Evaluate the variant matrix");
  add_common(ablate, common);
  ablate->add_option("--checkpoints", checkpoint, "Directory holding <variant>.ckpt")->required();
  ablate->add_option("--set", set, "Variant set")->check(CLI::IsMember({"components", "toggles", "all"}));
  ablate->add_flag("--train-missing", train_missing, "Train variants whose checkpoint is absent");
  ablate->add_option("-o,--out", out_dir, "Report directory")->required();

  auto* demo = app.add_subcommand("demo-attention", "Dump attention and confidence maps for one frame");
  add_common(demo, common);
  demo->add_option("--checkpoint", checkpoint, "Model checkpoint (default: untrained weights)");
  demo->add_option("--sequence", seq_dir, "Annotated sequence directory (default: first evaluation sequence)");
  demo->add_option("--frame", frame, "Search frame index");
  demo->add_option("-o,--out", out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: E_USAGE: %s\n", e.what());
    std::fprintf(stderr, "%s", (app.get_subcommands().empty() ? &app : app.get_subcommands().front())->help().c_str());
    return 2;
  }

  try {
    if (*gen) return cmd_generate(common, out_dir, split);
    if (*train) return cmd_train(common, out_dir, resume);
    if (*track) return cmd_track(common, checkpoint, seq_dir, init_box, mode, out_path, overlay_dir, mask_dir);
    if (*eval) return cmd_eval(common, checkpoint, results_dir, gt_root, out_dir);
    if (*ablate) return cmd_ablate(common, checkpoint, set, train_missing, out_dir);
    if (*demo) return cmd_demo_attention(common, checkpoint, seq_dir, frame, out_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", std::string(error_code_name(e.code())).c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: E_INTERNAL: %s\n", e.what());
    return 1;
  }
  return 0;
}
