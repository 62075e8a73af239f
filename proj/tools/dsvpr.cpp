#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dsvpr/clustering.hpp"
#include "dsvpr/dsformer.hpp"
#include "dsvpr/errors.hpp"
#include "dsvpr/manifest.hpp"
#include "dsvpr/retrieval.hpp"
#include "dsvpr/rng.hpp"
#include "dsvpr/synthetic.hpp"
#include "dsvpr/training.hpp"
#include "dsvpr/weight_store.hpp"

namespace {

using Json = nlohmann::ordered_json;
using namespace dsvpr;

// The CLI trains and embeds at a reduced resolution; the architecture is the
// same at any multiple of 16.
constexpr int kInputSide = 64;

std::uint64_t id_seed(const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : id) h = (h ^ c) * 0x100000001b3ull;
  return mix64(h);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f << content;
  if (!f) throw DataError("short write to '" + path + "'");
}

// ----- minimal binary PPM/PGM reader, nearest-neighbor resized -----

Tensor load_image_file(const std::string& path, int side, const std::string& id) {
  auto fail = [&](const std::string& why) -> Tensor {
    throw DataError("image for '" + id + "' (" + path + "): " + why);
  };
  std::ifstream f(path, std::ios::binary);
  if (!f) return fail("cannot open file");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 2) return fail("not a P5/P6 image");
  const bool color = buf[1] == '6';
  if (buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) return fail("not a P5/P6 image");

  std::size_t pos = 2;
  auto next_int = [&]() -> long {
    while (pos < buf.size()) {
      if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos])))
      fail("malformed header");
    long v = 0;
    while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos])))
      v = v * 10 + (buf[pos++] - '0');
    return v;
  };
  const long w = next_int(), h = next_int(), maxval = next_int();
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) return fail("unsupported dimensions");
  ++pos;  // single whitespace after maxval
  const std::size_t channels = color ? 3 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * h * channels;
  if (buf.size() - pos < need) return fail("pixel data truncated");

  std::vector<double> out(static_cast<std::size_t>(3) * side * side);
  for (int y = 0; y < side; ++y) {
    const long sy = std::min<long>(h - 1, y * h / side);
    for (int x = 0; x < side; ++x) {
      const long sx = std::min<long>(w - 1, x * w / side);
      const std::size_t px = pos + (static_cast<std::size_t>(sy) * w + sx) * channels;
      for (int c = 0; c < 3; ++c) {
        const auto raw = static_cast<unsigned char>(buf[px + (color ? c : 0)]);
        out[(static_cast<std::size_t>(c) * side + y) * side + x] =
            static_cast<double>(raw) / static_cast<double>(maxval);
      }
    }
  }
  return Tensor::from_data({3, side, side}, std::move(out));
}

// ----- shared helpers -----

Json dsformer_config_to_json(const DsFormerConfig& c) {
  Json j;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["dim"] = c.dim;
  j["ffn_ratio"] = c.ffn_ratio;
  j["rpe_clip"] = c.rpe_clip;
  j["descriptor_dim"] = c.descriptor_dim;
  j["input_side"] = c.input_side;
  j["use_irpe"] = c.use_irpe;
  j["use_self_encoder"] = c.use_self_encoder;
  j["use_cross_encoder"] = c.use_cross_encoder;
  j["gem_p_init"] = c.gem_p_init;
  j["backbone_c1"] = c.backbone_c1;
  j["backbone_c2"] = c.backbone_c2;
  return j;
}

DsFormerConfig dsformer_config_from_json(const Json& j) {
  DsFormerConfig c;
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dim = j.at("dim").get<int>();
  c.ffn_ratio = j.at("ffn_ratio").get<int>();
  c.rpe_clip = j.at("rpe_clip").get<int>();
  c.descriptor_dim = j.at("descriptor_dim").get<int>();
  c.input_side = j.at("input_side").get<int>();
  c.use_irpe = j.at("use_irpe").get<bool>();
  c.use_self_encoder = j.at("use_self_encoder").get<bool>();
  c.use_cross_encoder = j.at("use_cross_encoder").get<bool>();
  c.gem_p_init = j.at("gem_p_init").get<double>();
  c.backbone_c1 = j.at("backbone_c1").get<int>();
  c.backbone_c2 = j.at("backbone_c2").get<int>();
  return c;
}

std::vector<UtmLocation> manifest_to_locations(const std::vector<ManifestRow>& rows) {
  std::vector<UtmLocation> locs;
  locs.reserve(rows.size());
  for (const auto& r : rows)
    locs.push_back({r.id, r.easting, r.northing, r.heading, r.frame_index});
  return locs;
}

// ----- subcommands -----

int cmd_synth(const std::string& mode, const std::string& out, double extent,
              double street_spacing, double point_spacing, double bearing, double length) {
  std::vector<SyntheticPoint> pts;
  if (mode == "grid") {
    pts = manhattan_grid(extent, street_spacing, point_spacing);
  } else if (mode == "street") {
    pts = single_street(bearing, length, point_spacing);
  } else {
    throw ConfigError("synth: mode must be 'grid' or 'street'");
  }
  std::vector<ManifestRow> rows;
  rows.reserve(pts.size());
  for (const auto& p : pts) rows.push_back({p.id, "", p.easting, p.northing, p.heading, p.frame});
  write_manifest(out, rows);
  std::cout << "wrote " << rows.size() << " locations to " << out << "\n";
  return 0;
}

int cmd_partition(const std::string& meta, const std::string& out, const PartitionConfig& cfg) {
  const auto rows = read_manifest(meta);
  const Partition p = build_partition(manifest_to_locations(rows), cfg);
  write_file(out, partition_to_json(p));

  // The exit code promises a usable artifact, so read it back.
  const Partition check = partition_from_json(read_file(out));
  if (check.groups.size() != static_cast<std::size_t>(2 * cfg.group_count))
    throw DataError("partition output failed validation: wrong group count");
  std::size_t classes = 0;
  for (const auto& g : check.groups) classes += g.classes.size();
  std::cout << "partitioned " << p.stats.locations_total << " locations into "
            << check.groups.size() << " groups, " << classes << " classes ("
            << p.merged_catalog.size() << " merged)\n";
  return 0;
}

int cmd_train(const std::string& partition_path, const std::string& out,
              const DsFormerConfig& model_cfg, const TrainConfig& train_cfg) {
  const Partition partition = partition_from_json(read_file(partition_path));

  std::vector<TrainGroup> groups;
  std::unordered_map<std::string, UtmLocation> by_id;
  for (const auto& g : partition.groups) {
    TrainGroup tg;
    for (const auto& c : g.classes) {
      tg.class_ids.push_back(c.class_id);
      // Train on the heading-selected views when any survive the filter.
      std::vector<std::string> ids = c.selected_ids;
      if (ids.empty())
        for (const auto& m : c.members) ids.push_back(m.id);
      tg.members.push_back(std::move(ids));
      for (const auto& m : c.members) by_id[m.id] = m;
    }
    groups.push_back(std::move(tg));
  }

  auto image_for = [&](const std::string& id) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("train: unknown image id '" + id + "'");
    const UtmLocation& l = it->second;
    return render_place_image(l.easting, l.northing, l.heading.value_or(0.0), id_seed(id),
                              model_cfg.input_side);
  };

  DsFormerWeights model = DsFormerWeights::init(model_cfg, train_cfg.seed);
  Rng rng(mix64(train_cfg.seed));
  std::vector<ClassifierWeights> classifiers;
  for (const auto& g : groups)
    classifiers.push_back(init_classifier(static_cast<std::int64_t>(g.class_ids.size()),
                                          model_cfg.descriptor_dim, rng));

  AdamState state;
  std::vector<std::vector<double>> history;
  for (int e = 0; e < train_cfg.epochs; ++e) {
    const EpochResult r = train_epoch(model, classifiers, groups, image_for, state, train_cfg, rng);
    history.push_back(r.losses);
    std::cout << "epoch " << (e + 1) << "/" << train_cfg.epochs << " mean loss " << r.mean_loss
              << "\n";
  }

  model.to_store().save(out);
  Json side;
  side["config"] = dsformer_config_to_json(model_cfg);
  side["epochs"] = train_cfg.epochs;
  side["iters"] = train_cfg.iters;
  side["batch"] = train_cfg.batch;
  side["seed"] = train_cfg.seed;
  side["lr_model"] = train_cfg.lr_model;
  side["lr_classifier"] = train_cfg.lr_classifier;
  side["loss_history"] = history;
  write_file(out + ".json", side.dump(2) + "\n");

  // Round-trip validation backs the exit code.
  DsFormerWeights::from_store(WeightStore::load(out), model_cfg);
  std::cout << "wrote checkpoint " << out << "\n";
  return 0;
}

int cmd_embed(const std::string& ckpt, const std::string& meta, const std::string& out) {
  const Json side = Json::parse(read_file(ckpt + ".json"));
  const DsFormerConfig cfg = dsformer_config_from_json(side.at("config"));
  const DsFormerWeights model = DsFormerWeights::from_store(WeightStore::load(ckpt), cfg);

  const auto rows = read_manifest(meta);
  DescriptorDb db(cfg.descriptor_dim);
  NoGradGuard guard;
  for (const auto& r : rows) {
    Tensor image = r.path.empty()
                       ? render_place_image(r.easting, r.northing, r.heading.value_or(0.0),
                                            id_seed(r.id), cfg.input_side)
                       : load_image_file(r.path, cfg.input_side, r.id);
    const Tensor desc = dsformer_forward(image, model);
    DbEntry e;
    e.id = r.id;
    e.position = {{r.easting, r.northing}};
    e.frame = r.frame_index;
    e.descriptor.assign(desc.data().begin(), desc.data().end());
    db.add(std::move(e));
  }
  db.save(out);
  const DescriptorDb check = DescriptorDb::load(out);
  if (check.size() != rows.size())
    throw DataError("descriptor output failed validation: entry count mismatch");
  std::cout << "embedded " << check.size() << " images into " << out << "\n";
  return 0;
}

GroundTruth parse_ground_truth(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos)
    throw ConfigError("ground truth must look like geo:25 or frame:2");
  const std::string kind = text.substr(0, colon);
  const std::string value = text.substr(colon + 1);
  GroundTruth gt;
  try {
    if (kind == "geo") {
      gt.kind = GroundTruth::Kind::Geo;
      gt.radius = std::stod(value);
      if (!(gt.radius > 0.0)) throw ConfigError("geo radius must be positive");
    } else if (kind == "frame") {
      gt.kind = GroundTruth::Kind::Frame;
      gt.window = std::stoll(value);
      if (gt.window < 0) throw ConfigError("frame window must be >= 0");
    } else {
      throw ConfigError("ground truth kind must be geo or frame");
    }
  } catch (const std::invalid_argument&) {
    throw ConfigError("cannot parse ground truth value '" + value + "'");
  } catch (const std::out_of_range&) {
    throw ConfigError("ground truth value '" + value + "' out of range");
  }
  return gt;
}

int cmd_eval(const std::string& db_path, const std::string& queries_path, const std::string& gt_text,
             std::vector<int> topk, const std::string& report_path) {
  if (topk.empty()) throw ConfigError("eval: --topk must name at least one cutoff");
  const DescriptorDb db = DescriptorDb::load(db_path);
  const DescriptorDb queries = DescriptorDb::load(queries_path);
  const GroundTruth gt = parse_ground_truth(gt_text);
  const RecallReport report = recall_at_n(db, queries, topk, gt);

  Json j;
  j["database"] = db_path;
  j["queries"] = queries_path;
  j["ground_truth"] = gt_text;
  j["database_size"] = db.size();
  j["queries_evaluated"] = report.queries_evaluated;
  j["queries_skipped"] = report.queries_skipped;
  j["recall"] = Json::object();
  for (std::size_t i = 0; i < report.ns.size(); ++i) {
    j["recall"]["@" + std::to_string(report.ns[i])] = report.recall[i];
    std::cout << "R@" << report.ns[i] << " " << report.recall[i] << "\n";
  }
  write_file(report_path, j.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-scale place recognition toolkit"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic location manifest");
  std::string synth_mode = "grid", synth_out;
  double synth_extent = 700.0, synth_street = 50.0, synth_point = 2.0;
  double synth_bearing = 30.0, synth_length = 200.0;
  synth->add_option("--mode", synth_mode, "grid or street");
  synth->add_option("--out", synth_out, "output manifest csv")->required();
  synth->add_option("--extent", synth_extent, "grid side length in meters");
  synth->add_option("--street-spacing", synth_street, "meters between streets");
  synth->add_option("--point-spacing", synth_point, "meters between samples");
  synth->add_option("--bearing", synth_bearing, "street bearing, street mode");
  synth->add_option("--length", synth_length, "street length, street mode");

  // partition
  auto* part = app.add_subcommand("partition", "cluster locations into training groups");
  std::string part_meta, part_out;
  PartitionConfig pcfg;
  double part_radius = pcfg.retention_radius;
  part->add_option("--meta", part_meta, "input manifest csv")->required();
  part->add_option("--out", part_out, "output partition json")->required();
  part->add_option("--block-width", pcfg.block_width, "block width in meters");
  part->add_option("--groups", pcfg.group_count, "groups per axis");
  part->add_option("--radius", part_radius, "peak density and retention radius");
  part->add_option("--min-sep", pcfg.min_separation, "minimum peak separation");
  part->add_option("--focal", pcfg.focal_distance, "focal point distance");
  part->add_option("--min-cluster-size", pcfg.min_cluster_size, "density cluster floor");
  part->add_option("--seed", pcfg.seed, "seed echoed into the output");

  // train
  auto* train = app.add_subcommand("train", "train a model on a partition");
  std::string train_partition, train_out;
  DsFormerConfig mcfg;
  mcfg.input_side = kInputSide;
  TrainConfig tcfg;
  tcfg.iters = 50;
  tcfg.epochs = 2;
  bool no_irpe = false, no_se = false, no_ce = false;
  train->add_option("--partition", train_partition, "partition json")->required();
  train->add_option("--out", train_out, "output checkpoint (.dswt)")->required();
  train->add_option("--layers", mcfg.layers, "encoder layers");
  train->add_option("--heads", mcfg.heads, "attention heads");
  train->add_option("--dim", mcfg.dim, "token width");
  train->add_flag("--no-irpe", no_irpe, "drop relative position bias");
  train->add_flag("--no-se", no_se, "drop self-attention sublayers");
  train->add_flag("--no-ce", no_ce, "drop cross-attention sublayers");
  train->add_option("--epochs", tcfg.epochs, "training epochs");
  train->add_option("--iters", tcfg.iters, "iterations per epoch");
  train->add_option("--batch", tcfg.batch, "batch size");
  train->add_option("--seed", tcfg.seed, "training seed");

  // embed
  auto* embed = app.add_subcommand("embed", "compute descriptors for a manifest");
  std::string embed_ckpt, embed_meta, embed_out;
  embed->add_option("--ckpt", embed_ckpt, "checkpoint from train")->required();
  embed->add_option("--meta", embed_meta, "manifest csv")->required();
  embed->add_option("--out", embed_out, "output descriptor db (.dsfv)")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "recall of queries against a database");
  std::string eval_db, eval_queries, eval_gt = "geo:25", eval_report;
  std::vector<int> eval_topk{1, 5, 10};
  eval->add_option("--db", eval_db, "database descriptors")->required();
  eval->add_option("--queries", eval_queries, "query descriptors")->required();
  eval->add_option("--gt", eval_gt, "ground truth rule, geo:<m> or frame:<k>");
  eval->add_option("--topk", eval_topk, "recall cutoffs")->delimiter(',');
  eval->add_option("--report", eval_report, "output report json")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed())
      return cmd_synth(synth_mode, synth_out, synth_extent, synth_street, synth_point,
                       synth_bearing, synth_length);
    if (part->parsed()) {
      pcfg.retention_radius = part_radius;
      pcfg.density_radius = part_radius;
      return cmd_partition(part_meta, part_out, pcfg);
    }
    if (train->parsed()) {
      mcfg.use_irpe = !no_irpe;
      mcfg.use_self_encoder = !no_se;
      mcfg.use_cross_encoder = !no_ce;
      return cmd_train(train_partition, train_out, mcfg, tcfg);
    }
    if (embed->parsed()) return cmd_embed(embed_ckpt, embed_meta, embed_out);
    if (eval->parsed())
      return cmd_eval(eval_db, eval_queries, eval_gt, eval_topk, eval_report);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
