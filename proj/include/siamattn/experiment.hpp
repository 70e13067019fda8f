#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "siamattn/checkpoint.hpp"
#include "siamattn/config.hpp"
#include "siamattn/metrics.hpp"
#include "siamattn/tracker.hpp"

namespace siamattn {

using Model = SiamAttnModel<float>;

inline std::vector<SequenceRecord> training_sequences(const RunConfig& cfg) {
  if (!cfg.data.train_root.empty()) {
    auto seqs = load_all(cfg.data.train_root);
    SIAMATTN_CHECK(!seqs.empty(), ErrorCode::kDataset, "no usable sequences under " + cfg.data.train_root);
    return seqs;
  }
  return generate_synthetic_suite(cfg.synthetic.train, "train");
}

inline std::vector<SequenceRecord> evaluation_sequences(const RunConfig& cfg) {
  if (!cfg.data.eval_root.empty()) {
    auto seqs = load_all(cfg.data.eval_root);
    SIAMATTN_CHECK(!seqs.empty(), ErrorCode::kDataset, "no usable sequences under " + cfg.data.eval_root);
    return seqs;
  }
  return generate_synthetic_suite(cfg.synthetic.eval, "eval");
}

struct TrainOptions {
  std::ostream* log = nullptr;
  std::string checkpoint_dir;  // empty: no per-epoch checkpoints
  const Checkpoint* resume = nullptr;
};

// Trains a fresh model under `cfg`. Model initialisation, pair sampling and
// anchor sampling all derive from cfg.seed.
inline std::unique_ptr<Model> train_model(const RunConfig& cfg, const std::vector<SequenceRecord>& sequences,
                                          const TrainOptions& opts = {}) {
  cfg.validate();
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  const PairSampler sampler(sequences, cfg.crop_config(), cfg.training.pairs, mix_seed(cfg.seed, 1));
  Trainer<float> trainer(*model, sampler, cfg.training, cfg.seed);
  int start = 0;
  if (opts.resume) {
    load_checkpoint_into(*opts.resume, cfg, model->parameters(), &trainer.optimizer());
    start = opts.resume->epoch + 1;
  }
  const std::string hash = config_hash(cfg);
  Trainer<float>::EpochCallback cb;
  if (!opts.checkpoint_dir.empty()) {
    cb = [&](int epoch, const Sgd<float>& opt) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << epoch << ".ckpt";
      save_checkpoint((std::filesystem::path(opts.checkpoint_dir) / name.str()).string(), cfg, model->parameters(),
                      epoch, &opt);
    };
  }
  trainer.run(opts.log, hash, cb, start);
  return model;
}

inline std::unique_ptr<Model> load_model(const std::string& checkpoint_path, const RunConfig& cfg) {
  const Checkpoint ck = read_checkpoint(checkpoint_path);
  auto model = std::make_unique<Model>(cfg.model, cfg.seed);
  load_checkpoint_into(ck, cfg, model->parameters());
  return model;
}

struct SequenceResult {
  std::string id;
  std::vector<Box> boxes;  // frame 0 is the initialisation box
  std::vector<std::optional<RotatedBox>> rotated;
  std::vector<double> scores;
  std::vector<TrackOutput> outputs;  // frames 1.., kept only on request
};

inline SequenceResult track_sequence(const Model& model, const TrackerConfig& cfg, const SequenceRecord& seq,
                                     bool keep_outputs = false) {
  SIAMATTN_CHECK(seq.size() > 0, ErrorCode::kDataset, "sequence " + seq.id + " has no frames");
  SequenceResult res;
  res.id = seq.id;
  Tracker<float> tracker(model, cfg);
  tracker.init(seq.frames[0], seq.boxes[0]);
  res.boxes.push_back(seq.boxes[0]);
  res.rotated.push_back(cfg.mode == TrackMode::kRotatedFromMask ? std::optional(rotated_from_axis(seq.boxes[0]))
                                                                : std::nullopt);
  res.scores.push_back(1.0);
  for (std::size_t f = 1; f < seq.size(); ++f) {
    TrackOutput out = tracker.track(seq.frames[f]);
    res.boxes.push_back(out.box);
    res.rotated.push_back(out.rotated);
    res.scores.push_back(out.score);
    if (keep_outputs) res.outputs.push_back(std::move(out));
  }
  return res;
}

struct SequenceMetrics {
  std::string id;
  MetricReport report;
  ResetResult reset;
};

struct EvalReport {
  MetricReport overall;  // one-pass OTB-style metrics pooled over frames
  double reset_accuracy = 0;
  int reset_failures = 0;
  bool has_reset = true;  // false when built from result files alone
  std::vector<SequenceMetrics> per_sequence;
};

// One-pass metrics skip the initialisation frame; the reset protocol runs a
// second pass per sequence.
inline EvalReport evaluate(const Model& model, const TrackerConfig& cfg, const std::vector<SequenceRecord>& seqs,
                           const ResetProtocol& protocol = {}) {
  EvalReport rep;
  std::vector<std::vector<Box>> all_res, all_gt;
  double acc_sum = 0;
  for (const auto& seq : seqs) {
    const auto tr = track_sequence(model, cfg, seq);
    std::vector<Box> r(tr.boxes.begin() + 1, tr.boxes.end()), g(seq.boxes.begin() + 1, seq.boxes.end());
    SequenceMetrics sm;
    sm.id = seq.id;
    sm.report = precision_success(r, g);
    Tracker<float> tracker(model, cfg);
    SequenceTrackerFn fn{[&](const Image& f, const Box& b) { tracker.init(f, b); },
                         [&](const Image& f) { return tracker.track(f).box; }};
    sm.reset = reset_protocol_run(fn, seq, protocol);
    sm.report.failures = sm.reset.failures;
    rep.reset_failures += sm.reset.failures;
    acc_sum += sm.reset.accuracy;
    all_res.push_back(std::move(r));
    all_gt.push_back(std::move(g));
    rep.per_sequence.push_back(std::move(sm));
  }
  rep.overall = aggregate(all_res, all_gt);
  rep.overall.failures = rep.reset_failures;
  rep.reset_accuracy = seqs.empty() ? 0.0 : acc_sum / static_cast<double>(seqs.size());
  return rep;
}

// Plain result records: `frame cx cy w h score [rcx rcy rw rh angle]`.
inline void write_results(std::ostream& out, const SequenceResult& r, const std::string& hash) {
  out << "# config_hash=" << hash << " sequence=" << r.id << '\n';
  out << std::setprecision(8);
  for (std::size_t f = 0; f < r.boxes.size(); ++f) {
    const Box& b = r.boxes[f];
    out << f << ' ' << b.cx << ' ' << b.cy << ' ' << b.w << ' ' << b.h << ' ' << r.scores[f];
    if (r.rotated[f]) {
      const auto& rb = *r.rotated[f];
      out << ' ' << rb.cx << ' ' << rb.cy << ' ' << rb.w << ' ' << rb.h << ' ' << rb.angle;
    }
    out << '\n';
  }
}

inline std::vector<Box> read_result_boxes(const std::string& path) {
  std::ifstream in(path);
  SIAMATTN_CHECK(in.good(), ErrorCode::kIo, "cannot open results " + path);
  std::vector<Box> boxes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    long idx;
    Box b;
    if (!(ls >> idx >> b.cx >> b.cy >> b.w >> b.h))
      throw Error(ErrorCode::kDataset, path + ":" + std::to_string(lineno) + ": malformed result record");
    boxes.push_back(b);
  }
  return boxes;
}

inline void write_metric_table(std::ostream& out, const EvalReport& rep, const std::string& hash) {
  out << "# config_hash=" << hash << '\n';
  out << "sequence\tframes\tprecision_at_20\tauc\tmean_iou\treset_accuracy\tfailures\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& s : rep.per_sequence) {
    out << s.id << '\t' << s.report.frames << '\t' << s.report.precision_at_20 << '\t' << s.report.auc << '\t'
        << s.report.accuracy << '\t';
    if (rep.has_reset)
      out << s.reset.accuracy << '\t' << s.reset.failures << '\n';
    else
      out << "-\t-\n";
  }
  out << "ALL\t" << rep.overall.frames << '\t' << rep.overall.precision_at_20 << '\t' << rep.overall.auc << '\t'
      << rep.overall.accuracy << '\t';
  if (rep.has_reset)
    out << rep.reset_accuracy << '\t' << rep.reset_failures << '\n';
  else
    out << "-\t-\n";
}

struct AblationVariant {
  std::string name;
  bool self_attention = true;   // spatial and channel
  bool cross_attention = true;
  bool refinement = true;
  bool deformable = true;       // deformable conv in the attention block and deformable RoI pooling

  RunConfig apply(RunConfig cfg) const {
    auto& a = cfg.model.attention;
    a.spatial_sa = self_attention;
    a.channel_sa = self_attention;
    a.cross_attn = cross_attention;
    a.deform_conv = deformable;
    cfg.model.refinement.deform_pool = deformable;
    cfg.model.refinement.enabled = refinement;
    return cfg;
  }
};

// Row structure of the component study: baseline, +RR, +RR+SA, +RR+CA, full.
inline std::vector<AblationVariant> component_variants() {
  return {{"baseline", false, false, false, false},
          {"rr", false, false, true, true},
          {"rr_sa", true, false, true, true},
          {"rr_ca", false, true, true, true},
          {"full", true, true, true, true}};
}

// The full model with one toggle switched off at a time.
inline std::vector<AblationVariant> toggle_variants() {
  return {{"no_sa", false, true, true, true},
          {"no_ca", true, false, true, true},
          {"no_rr", true, true, false, true},
          {"no_deform", true, true, true, false}};
}

inline std::vector<AblationVariant> variant_set(const std::string& name) {
  if (name == "components") return component_variants();
  if (name == "toggles") {
    auto v = toggle_variants();
    v.insert(v.begin(), AblationVariant{"full"});
    return v;
  }
  if (name == "all") {
    auto v = component_variants();
    for (const auto& t : toggle_variants()) v.push_back(t);
    return v;
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown variant set '" + name + "' (components, toggles, all)");
}

struct AblationRow {
  AblationVariant variant;
  std::string checkpoint;
  EvalReport report;
};

inline std::string variant_checkpoint(const std::string& dir, const AblationVariant& v) {
  return (std::filesystem::path(dir) / (v.name + ".ckpt")).string();
}

// Evaluates every variant's checkpoint. All missing checkpoints are reported
// together before any evaluation starts.
inline std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                             const std::vector<std::string>& checkpoints,
                                             const std::vector<SequenceRecord>& seqs) {
  SIAMATTN_CHECK(variants.size() == checkpoints.size(), ErrorCode::kInvalidArgument,
                 "run_ablation: one checkpoint per variant required");
  std::string missing;
  for (const auto& path : checkpoints)
    if (!std::filesystem::exists(path)) missing += (missing.empty() ? "" : ", ") + path;
  if (!missing.empty()) throw Error(ErrorCode::kCheckpointMissing, "missing checkpoints: " + missing);
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const RunConfig cfg = variants[i].apply(base);
    const auto model = load_model(checkpoints[i], cfg);
    rows.push_back({variants[i], checkpoints[i], evaluate(*model, cfg.tracker, seqs, cfg.protocol)});
  }
  return rows;
}

inline void write_ablation_table(std::ostream& out, const std::vector<AblationRow>& rows, const std::string& hash) {
  out << "# config_hash=" << hash << '\n';
  out << "variant\tself_attention\tcross_attention\trefinement\tdeformable\tmean_iou\tauc\tprecision_at_20\t"
         "reset_accuracy\tfailures\n";
  out << std::fixed << std::setprecision(6);
  for (const auto& r : rows) {
    const auto& v = r.variant;
    out << v.name << '\t' << v.self_attention << '\t' << v.cross_attention << '\t' << v.refinement << '\t'
        << v.deformable << '\t' << r.report.overall.accuracy << '\t' << r.report.overall.auc << '\t'
        << r.report.overall.precision_at_20 << '\t' << r.report.reset_accuracy << '\t' << r.report.reset_failures
        << '\n';
  }
}

}  // namespace siamattn
