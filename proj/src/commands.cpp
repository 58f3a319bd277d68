#include "pan/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pan/error.hpp"

namespace pan {

namespace fs = std::filesystem;
using nlohmann::json;

const std::array<Color, 256>& voc_palette() {
  static const std::array<Color, 256> palette = [] {
    std::array<Color, 256> p{};
    for (int i = 0; i < 256; ++i) {
      int c = i;
      int r = 0, g = 0, b = 0;
      for (int j = 0; j < 8; ++j) {
        r |= ((c >> 0) & 1) << (7 - j);
        g |= ((c >> 1) & 1) << (7 - j);
        b |= ((c >> 2) & 1) << (7 - j);
        c >>= 3;
      }
      p[static_cast<std::size_t>(i)] = {static_cast<std::uint8_t>(r), static_cast<std::uint8_t>(g),
                                        static_cast<std::uint8_t>(b)};
    }
    return p;
  }();
  return palette;
}

Tensor colorize(const IntTensor& mask) {
  if (mask.shape.size() != 2) throw ShapeError("mask", "colorize: expected an [H,W] mask");
  const std::int64_t h = mask.shape[0], w = mask.shape[1];
  Tensor out({3, h, w});
  for (std::int64_t i = 0; i < h * w; ++i) {
    const std::int32_t v = mask.data[static_cast<std::size_t>(i)];
    if (v < 0 || v > 255) throw ShapeError("mask", "colorize: mask value " + std::to_string(v) + " outside [0,255]");
    const Color& c = voc_palette()[static_cast<std::size_t>(v)];
    for (std::int64_t ch = 0; ch < 3; ++ch) out[ch * h * w + i] = c[static_cast<std::size_t>(ch)] / 255.0;
  }
  return out;
}

IntTensor predict_mask(const PanModel& model, const Tensor& image) {
  expect_rank(image, 3, "image");
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  const std::int64_t ph = (h + 15) / 16 * 16, pw = (w + 15) / 16 * 16;
  Tensor padded({1, c, ph, pw});
  for (std::int64_t ch = 0; ch < c; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) padded[(ch * ph + y) * pw + x] = image[(ch * h + y) * w + x];
    }
  }
  const Tensor logits = model.predict_logits(padded);
  const std::int64_t k = logits.dim(1);
  Tensor cropped({1, k, h, w});
  for (std::int64_t ch = 0; ch < k; ++ch) {
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) cropped[(ch * h + y) * w + x] = logits[(ch * ph + y) * pw + x];
    }
  }
  IntTensor mask = argmax_channels(cropped);
  mask.shape = {h, w};
  return mask;
}

fs::path manifest_path(const RunConfig& config, const std::string& split) {
  return fs::path(config.data_dir) / (split + ".txt");
}

namespace {

std::vector<Sample> load_split(const RunConfig& config, const std::string& split) {
  const fs::path manifest = manifest_path(config, split);
  if (!fs::exists(manifest)) {
    throw Error("no " + split + " manifest at " + manifest.string() + "; run gen-data first");
  }
  std::vector<Sample> data = load_dataset(manifest);
  for (const Sample& s : data) {
    for (std::int32_t v : s.label.data) {
      if (v != kIgnoreIndex && (v < 0 || v >= config.num_classes)) {
        throw ConfigError("data.num_classes", "sample " + std::to_string(s.id) + " of " + manifest.string() +
                                                  " has label " + std::to_string(v) + " but num_classes is " +
                                                  std::to_string(config.num_classes));
      }
    }
  }
  return data;
}

PanModel load_model(const RunConfig& config) {
  PanModel model(config.pan_config(), config.seed);
  const fs::path ckpt = config.checkpoint_path();
  if (!fs::exists(ckpt)) throw Error("checkpoint " + ckpt.string() + " does not exist; run train first");
  load_checkpoint(ckpt, model);
  return model;
}

json metrics_json(const Metrics& m) {
  json per = json::array();
  for (const auto& v : m.per_class_iou) per.push_back(v ? json(*v) : json(nullptr));
  return json{{"mean_iou", m.mean_iou}, {"pixel_acc", m.pixel_acc}, {"per_class_iou", per}};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

}  // namespace

int cmd_gen_data(const RunConfig& config, std::ostream& out) {
  config.validate();
  for (const std::string split : {"train", "val"}) {
    const DatasetSpec spec = config.dataset_spec(split == "val");
    const std::int64_t count = split == "train" ? config.n_train : config.n_val;
    const fs::path dir = fs::path(config.data_dir) / split;
    fs::create_directories(dir);
    std::vector<ManifestEntry> entries;
    for (std::int64_t i = 0; i < count; ++i) {
      const Sample s = generate_sample(spec, i);
      char stem[32];
      std::snprintf(stem, sizeof stem, "%06lld", static_cast<long long>(i));
      const std::string image = split + "/" + stem + ".ppm";
      const std::string mask = split + "/" + stem + ".pgm";
      write_image(fs::path(config.data_dir) / image, s.image);
      write_mask(fs::path(config.data_dir) / mask, s.label);
      entries.push_back({i, image, mask});
    }
    write_manifest(manifest_path(config, split), entries);
    out << "gen-data: wrote " << count << " " << split << " samples to " << dir.string() << "\n";
  }
  return 0;
}

int cmd_train(const RunConfig& config, std::ostream& out) {
  config.validate();
  const std::vector<Sample> data = load_split(config, "train");
  PanModel model(config.pan_config(), config.seed);
  TrainOptions options;
  options.out_dir = config.out_dir;
  if (config.resume) {
    const fs::path ckpt = config.checkpoint_path();
    if (!fs::exists(ckpt)) throw Error("cannot resume: checkpoint " + ckpt.string() + " does not exist");
    options.resume_from = ckpt;
  }
  const TrainConfig tc = config.train_config();
  options.on_record = [&out, &tc](const TrainRecord& r) {
    if (r.iter % 25 == 0 || r.iter + 1 == tc.max_iter) {
      out << "iter " << r.iter << " lr " << std::setprecision(6) << r.lr << " loss " << r.loss << "\n";
    }
  };
  const std::vector<TrainRecord> records = train(model, data, tc, options);
  if (records.empty()) {
    out << "train: checkpoint already at max_iter " << tc.max_iter << "; nothing to do\n";
  } else {
    out << "train: iterations " << records.front().iter << ".." << records.back().iter << ", first loss "
        << records.front().loss << ", last loss " << records.back().loss << "\n";
  }
  out << "train: checkpoint " << (fs::path(config.out_dir) / "checkpoint.bin").string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& config, std::ostream& out) {
  config.validate();
  const PanModel model = load_model(config);
  const std::vector<Sample> data = load_split(config, config.split);
  const EvalResult result = evaluate(model, data, config.eval_config());

  json report = metrics_json(result.metrics);
  report["split"] = config.split;
  report["scales"] = config.scales;
  report["flip"] = config.flip;
  report["forward_passes"] = result.forward_passes;
  report["samples"] = data.size();
  fs::create_directories(config.out_dir);
  write_text(fs::path(config.out_dir) / "metrics.json", report.dump(2) + "\n");

  std::ofstream log(fs::path(config.out_dir) / "train_log.jsonl", std::ios::app);
  if (!log) throw Error("cannot append to the log in " + config.out_dir);
  json record = metrics_json(result.metrics);
  record["split"] = config.split;
  log << record.dump() << "\n";

  out << "eval: split " << config.split << " samples " << data.size() << " forwards " << result.forward_passes
      << "\n";
  out << "mean_iou " << fixed(result.metrics.mean_iou, 6) << " pixel_acc " << fixed(result.metrics.pixel_acc, 6)
      << "\n";
  for (std::size_t c = 0; c < result.metrics.per_class_iou.size(); ++c) {
    const auto& v = result.metrics.per_class_iou[c];
    out << "  class " << c << " iou " << (v ? fixed(*v, 6) : std::string("n/a")) << "\n";
  }
  return 0;
}

int cmd_predict(const RunConfig& config, std::ostream& out) {
  config.validate();
  if (config.image.empty()) throw ConfigError("predict.image", "predict: no input image given (--image)");
  const PanModel model = load_model(config);
  const Tensor image = read_image(config.image);
  const IntTensor mask = predict_mask(model, image);
  const std::string stem = fs::path(config.image).stem().string();
  const fs::path mask_path =
      config.mask_out.empty() ? fs::path(config.out_dir) / (stem + "_mask.pgm") : fs::path(config.mask_out);
  const fs::path color_path =
      config.color_out.empty() ? fs::path(config.out_dir) / (stem + "_color.ppm") : fs::path(config.color_out);
  for (const fs::path& p : {mask_path, color_path}) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  }
  write_mask(mask_path, mask);
  write_image(color_path, colorize(mask));
  out << "predict: " << mask.shape[0] << "x" << mask.shape[1] << " mask -> " << mask_path.string() << ", "
      << color_path.string() << "\n";
  return 0;
}

// -- ablation ----------------------------------------------------------------------

std::vector<AblationVariant> ablation_variants(const RunConfig& config) {
  PanConfig base = config.pan_config();
  base.fpa.reset();
  base.gau_chain.clear();
  const std::int64_t width = config.decoder_width;
  const std::string backbone_label = "ResNet101";

  const bool fpa_grid = config.grid == "fpa" || config.grid == "all";
  const bool gau_grid = config.grid == "gau" || config.grid == "all";

  std::vector<AblationVariant> all;
  {
    AblationVariant v;
    v.id = "baseline";
    v.label = backbone_label;
    if (fpa_grid) v.tables.push_back("table1");
    if (gau_grid) v.tables.push_back("table3");
    v.config = base;
    v.config.rechain(width);
    all.push_back(v);
  }
  if (fpa_grid) {
    std::vector<FpaConfig> centers{FpaConfig::se(0)};
    for (bool c357 : {false, true}) {
      for (bool gp : {false, true}) {
        for (PoolMode pool : {PoolMode::max, PoolMode::avg}) {
          centers.push_back(c357 ? FpaConfig::c357(0, 0, pool, gp) : FpaConfig::c333(0, 0, pool, gp));
        }
      }
    }
    for (const FpaConfig& f : centers) {
      AblationVariant v;
      v.id = f.label();
      v.label = backbone_label + "+" + f.label();
      v.tables = {"table1"};
      v.config = base;
      v.config.fpa = f;
      v.config.rechain(width);
      all.push_back(v);
    }
  }
  if (gau_grid) {
    const std::vector<std::pair<bool, std::int64_t>> designs{{false, 3}, {true, 1}, {true, 3}};
    for (const auto& [gp, k] : designs) {
      GauConfig g;
      g.use_global_context = gp;
      g.reduce_kernel = k;
      AblationVariant v;
      v.id = g.label();
      v.label = backbone_label + "+GAU";
      v.tables = {"table3"};
      v.gp = gp;
      v.reduce_1x1 = k == 1;
      v.reduce_3x3 = k == 3;
      v.config = base;
      v.config.gau_chain.assign(3, g);
      v.config.rechain(width);
      all.push_back(v);
    }
  }

  if (config.variants.empty()) return all;
  std::vector<AblationVariant> picked;
  for (const std::string& name : config.variants) {
    auto it = std::find_if(all.begin(), all.end(), [&](const AblationVariant& v) { return v.id == name; });
    if (it == all.end()) {
      std::string valid;
      for (const auto& v : all) valid += (valid.empty() ? "" : ", ") + v.id;
      throw ConfigError("ablate.variants",
                        "unknown ablation variant '" + name + "' for grid " + config.grid + "; valid: " + valid);
    }
    picked.push_back(*it);
  }
  return picked;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

namespace {

const AblationRow* find_row(const std::vector<AblationRow>& rows, const std::string& id) {
  for (const auto& r : rows) {
    if (r.variant.id == id) return &r;
  }
  return nullptr;
}

// Orderings the published grid reports; informative only at desk scale.
json directional_claims(const std::vector<AblationRow>& rows) {
  json claims = json::array();
  auto claim = [&](const std::string& text, const std::string& better, const std::string& worse) {
    const AblationRow* a = find_row(rows, better);
    const AblationRow* b = find_row(rows, worse);
    if (!a || !b) return;
    const double ma = mean_of(a->mean_iou), mb = mean_of(b->mean_iou);
    claims.push_back({{"claim", text}, {"better", better}, {"worse", worse}, {"better_mean_iou", ma},
                      {"worse_mean_iou", mb}, {"holds", ma >= mb}});
  };
  for (const std::string k : {"C333", "C357"}) {
    for (const std::string gp : {"", "+GP"}) {
      claim("AVE >= MAX", k + "+AVE" + gp, k + "+MAX" + gp);
      claim("GP >= no GP", k + "+AVE+GP", k + "+AVE");
    }
    for (const std::string pool : {"+MAX", "+AVE"}) claim("C357 >= C333", "C357" + pool, "C333" + pool);
  }
  claim("pyramid >= SE", "C357+AVE+GP", "SE");
  claim("SE >= baseline", "SE", "baseline");
  claim("FPA >= baseline", "C357+AVE+GP", "baseline");
  claim("GAU global context >= none", "GAU+GP+3x3", "GAU+3x3");
  claim("3x3 reduction >= 1x1", "GAU+GP+3x3", "GAU+GP+1x1");
  claim("GAU >= baseline", "GAU+GP+3x3", "baseline");
  // the same claim can be pushed twice by the loops above
  json unique = json::array();
  std::set<std::string> seen;
  for (const auto& c : claims) {
    const std::string key = c["better"].get<std::string>() + ">" + c["worse"].get<std::string>();
    if (seen.insert(key).second) unique.push_back(c);
  }
  return unique;
}

}  // namespace

int cmd_ablate(const RunConfig& config, std::ostream& out) {
  config.validate();
  const std::vector<AblationVariant> variants = ablation_variants(config);
  const std::vector<Sample> train_data = load_split(config, "train");
  const std::vector<Sample> val_data = load_split(config, "val");

  TrainConfig tc = config.train_config();
  tc.max_iter = config.ablate_max_iter;
  tc.batch_size = config.ablate_batch_size;
  tc.base_lr = config.ablate_base_lr;

  std::vector<AblationRow> rows;
  for (const AblationVariant& v : variants) rows.push_back(AblationRow{v, {}, {}, {}});
  for (std::int64_t r = 0; r < config.repeat; ++r) {
    // every variant of repeat r shares data, init seed and batch order
    const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(r);
    tc.seed = seed;
    for (AblationRow& row : rows) {
      PanModel model(row.variant.config, seed);
      const double untrained = evaluate(model, val_data, EvalConfig{}).metrics.mean_iou;
      train(model, train_data, tc);
      const Metrics m = evaluate(model, val_data, EvalConfig{}).metrics;
      row.mean_iou.push_back(m.mean_iou);
      row.pixel_acc.push_back(m.pixel_acc);
      row.untrained_mean_iou.push_back(untrained);
      out << "ablate: repeat " << r + 1 << "/" << config.repeat << " " << row.variant.id << " mean_iou "
          << fixed(m.mean_iou) << " (untrained " << fixed(untrained) << ")" << std::endl;
    }
  }

  std::ostringstream tsv;
  tsv << "table\tvariant\tlabel\tgp\treduce\trepeats\tmean_iou\tmean_iou_std\tpixel_acc\tpixel_acc_std\t"
         "untrained_mean_iou\n";
  json table = json::array();
  for (const std::string t : {"table1", "table3"}) {
    bool header = false;
    for (const AblationRow& row : rows) {
      const AblationVariant& v = row.variant;
      if (std::find(v.tables.begin(), v.tables.end(), t) == v.tables.end()) continue;
      if (!header) {
        out << "\n" << (t == "table1" ? "center block ablation" : "decoder ablation") << "\n";
        header = true;
      }
      const bool is_gau = t == "table3" && v.id != "baseline";
      const std::string gp = t == "table3" ? (v.gp ? "yes" : (is_gau ? "no" : "-")) : "-";
      const std::string reduce = is_gau ? (v.reduce_1x1 ? "1x1" : "3x3") : "-";
      const double mi = mean_of(row.mean_iou), si = stddev_of(row.mean_iou);
      const double mp = mean_of(row.pixel_acc), sp = stddev_of(row.pixel_acc);
      const double mu = mean_of(row.untrained_mean_iou);
      tsv << t << '\t' << v.id << '\t' << v.label << '\t' << gp << '\t' << reduce << '\t' << row.mean_iou.size()
          << '\t' << fixed(mi, 6) << '\t' << fixed(si, 6) << '\t' << fixed(mp, 6) << '\t' << fixed(sp, 6) << '\t'
          << fixed(mu, 6) << '\n';
      out << "  " << std::left << std::setw(24) << v.label << std::setw(13) << v.id << " mIoU " << fixed(mi)
          << " ± " << fixed(si) << "  pixAcc " << fixed(mp) << " ± " << fixed(sp) << "  untrained " << fixed(mu)
          << std::right << "\n";
      table.push_back({{"table", t}, {"variant", v.id}, {"label", v.label}, {"gp", gp}, {"reduce", reduce},
                       {"mean_iou", row.mean_iou}, {"pixel_acc", row.pixel_acc},
                       {"untrained_mean_iou", row.untrained_mean_iou}, {"mean_iou_mean", mi},
                       {"mean_iou_std", si}, {"pixel_acc_mean", mp}, {"pixel_acc_std", sp}});
    }
  }

  const json claims = directional_claims(rows);
  if (!claims.empty()) out << "\ndirectional claims (reported, not gated)\n";
  for (const auto& c : claims) {
    out << "  " << c["claim"].get<std::string>() << ": " << c["better"].get<std::string>() << " "
        << fixed(c["better_mean_iou"].get<double>()) << " vs " << c["worse"].get<std::string>() << " "
        << fixed(c["worse_mean_iou"].get<double>()) << " -> " << (c["holds"].get<bool>() ? "holds" : "does not hold")
        << "\n";
  }

  const fs::path dir(config.out_dir);
  write_text(dir / "ablation.tsv", tsv.str());
  write_text(dir / "ablation.json",
             json{{"grid", config.grid}, {"repeat", config.repeat}, {"rows", table}, {"claims", claims}}.dump(2) +
                 "\n");
  out << "\nablate: wrote " << (dir / "ablation.tsv").string() << "\n";
  return 0;
}

int cmd_gradcheck(const RunConfig& config, std::ostream& out) {
  config.validate();
  std::vector<GradcheckCase> cases = gradcheck_suite(config.seed);
  if (config.inject_fault) cases.push_back(corrupted_backward_case(config.seed));
  int failures = 0;
  for (const GradcheckCase& c : cases) {
    const GradcheckReport r = c.run(config.gc_samples, config.gc_h, config.gc_tol);
    if (!r.passed) ++failures;
    char line[160];
    std::snprintf(line, sizeof line, "%-28s max_rel_err %.3e  checked %4lld  %s", r.name.c_str(), r.max_rel_error,
                  static_cast<long long>(r.checked), r.passed ? "PASS" : "FAIL");
    out << line;
    if (!r.passed) out << "  worst " << r.worst;
    out << "\n";
  }
  out << "gradcheck: " << cases.size() - static_cast<std::size_t>(failures) << "/" << cases.size()
      << " passed (h " << config.gc_h << ", tol " << config.gc_tol << ")\n";
  return failures == 0 ? 0 : 2;
}

}  // namespace pan
