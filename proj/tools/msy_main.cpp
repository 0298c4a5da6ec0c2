// msy: command-line entry point for the detector family — synthetic data
// generation, training, evaluation, prediction, checkout receipts and
// structural accounting. Every run honors --seed, and a run manifest is
// written beside the output directory (or printed when there is none).
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "msy/datasynth.hpp"
#include "msy/metrics.hpp"
#include "msy/model.hpp"
#include "msy/postprocess.hpp"
#include "msy/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunContext {
  std::string subcommand;
  json config = json::object();
  uint64_t seed = 0;
  std::vector<std::string> inputs, outputs;
  std::string out_dir;  // empty = manifest to stdout
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

void emit_manifest(const RunContext& ctx) {
  json j;
  j["subcommand"] = ctx.subcommand;
  j["config"] = ctx.config;
  j["seed"] = ctx.seed;
  j["tool_version"] = msy::kVersion;
  j["inputs"] = ctx.inputs;
  j["outputs"] = ctx.outputs;
  j["duration_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - ctx.start)
          .count();
  if (ctx.out_dir.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    // beside the output directory so the directory tree itself stays
    // byte-reproducible for fixed seeds
    std::string path = ctx.out_dir;
    while (!path.empty() && path.back() == '/') path.pop_back();
    std::ofstream f(path + ".run_manifest.json", std::ios::trunc);
    f << j.dump(2) << "\n";
  }
}

msy::ModelConfig model_config_from_flags(const std::string& variant, int classes, double width,
                                         int size, int ema_groups, int dual_groups) {
  msy::ModelConfig cfg;
  cfg.variant = msy::parse_variant(variant);
  cfg.num_classes = classes;
  cfg.width_mult = width;
  cfg.input_size = size;
  cfg.ema_groups = ema_groups;
  cfg.dualconv_groups = dual_groups;
  return cfg;
}

void check_band(const char* what, double value, double target, double pct) {
  const double lo = target * (1 - pct / 100), hi = target * (1 + pct / 100);
  const bool ok = value >= lo && value <= hi;
  std::printf("%s: %.6g vs reference %.6g -> %+.2f%% (size band +/-%g%%): %s\n", what, value,
              target, 100.0 * (value / target - 1.0), pct, ok ? "within" : "OUTSIDE");
}

msy::Model<float> load_model(const std::string& weights_path) {
  auto cfg = msy::peek_weights_config(weights_path);
  auto model = msy::build_model<float>(cfg);
  msy::load_weights(model, weights_path);
  return model;
}

int dispatch(CLI::App& app);

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msy: lightweight retail-checkout detector toolkit"};
  app.require_subcommand(1);

  try {
    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic checkout dataset");
    gen->add_option("--out", "dataset directory")->required();
    gen->add_option("--images", "number of images")->default_val(10);
    gen->add_option("--classes", "number of product classes")->default_val(3);
    gen->add_option("--size", "square image size")->default_val(160);
    gen->add_option("--kmin", "minimum items per image")->default_val(1);
    gen->add_option("--kmax", "maximum items per image")->default_val(4);
    gen->add_option("--overlap", "max pairwise overlap fraction")->default_val(0.3);
    gen->add_option("--seed", "generator seed")->default_val(0);

    // ---- split ----
    auto* split = app.add_subcommand("split", "re-split a dataset into train/val/test");
    split->add_option("--dataset", "dataset directory")->required();
    split->add_option("--ratios", "train,val,test ratios")->default_val("8,1,1");
    split->add_option("--seed", "shuffle seed")->default_val(0);

    // ---- train ----
    auto* train = app.add_subcommand("train", "train a detector on a generated dataset");
    train->add_option("--dataset", "dataset directory")->required();
    train->add_option("--out", "run directory")->required();
    train->add_option("--variant", "model variant")->default_val("midstate-ed");
    train->add_option("--classes", "class count (default: from the dataset manifest)")
        ->default_val(-1);
    train->add_option("--width", "width multiplier")->default_val(0.25);
    train->add_option("--size", "train image size")->default_val(160);
    train->add_option("--epochs", "epochs")->default_val(25);
    train->add_option("--batch", "batch size")->default_val(8);
    train->add_option("--lr", "learning rate")->default_val(0.01);
    train->add_option("--momentum", "sgd momentum")->default_val(0.937);
    train->add_option("--weight-decay", "weight decay")->default_val(0.0005);
    train->add_option("--seed", "training seed")->default_val(0);
    train->add_option("--eval-split", "split evaluated between epochs")->default_val("val");
    train->add_option("--eval-every", "epochs between evaluations, 0 = off")->default_val(1);
    train->add_option("--stop-map50", "early-stop target on eval mAP@0.5")->default_val(-1.0);
    train->add_option("--config", "train config file (key=value), overridden by flags");
    train->add_flag("--resume", "resume from the run directory checkpoint");

    // ---- eval ----
    auto* eval = app.add_subcommand("eval", "evaluate a model or a results file");
    eval->add_option("--weights", "weights file (model mode)");
    eval->add_option("--results", "detections JSONL (results mode)");
    eval->add_option("--dataset", "dataset directory");
    eval->add_option("--split", "dataset split")->default_val("test");
    eval->add_option("--labels", "bare labels directory (results mode without a dataset)");
    eval->add_option("--image-size", "image size for bare labels")->default_val(0);
    eval->add_option("--conf", "operating confidence")->default_val(0.25);
    eval->add_option("--eval-conf", "decode confidence (model mode)")->default_val(0.001);
    eval->add_option("--iou", "nms iou threshold (model mode)")->default_val(0.45);
    eval->add_option("--out", "output directory for report.json and preds.jsonl");
    eval->add_option("--seed", "unused, accepted for uniformity")->default_val(0);

    // ---- predict ----
    auto* predict = app.add_subcommand("predict", "run detection and annotate images");
    predict->add_option("--weights", "weights file")->required();
    predict->add_option("--image", "input image(s), PPM")->take_all();
    predict->add_option("--dataset", "dataset directory (with --split)");
    predict->add_option("--split", "dataset split")->default_val("test");
    predict->add_option("--conf", "confidence threshold")->default_val(0.25);
    predict->add_option("--iou", "nms iou threshold")->default_val(0.45);
    predict->add_option("--out", "output directory")->required();
    predict->add_flag("--plain-boxes", "draw rectangles without text labels");
    predict->add_option("--seed", "unused, accepted for uniformity")->default_val(0);

    // ---- checkout ----
    auto* checkout = app.add_subcommand("checkout", "predict and price a shopping list");
    checkout->add_option("--weights", "weights file")->required();
    checkout->add_option("--catalog", "catalog CSV")->required();
    checkout->add_option("--image", "input image(s), PPM")->take_all();
    checkout->add_option("--dataset", "dataset directory (with --split)");
    checkout->add_option("--split", "dataset split")->default_val("test");
    checkout->add_option("--conf", "confidence threshold")->default_val(0.25);
    checkout->add_option("--iou", "nms iou threshold")->default_val(0.45);
    checkout->add_option("--out", "output directory")->required();
    checkout->add_option("--seed", "unused, accepted for uniformity")->default_val(0);

    // ---- params ----
    auto* params = app.add_subcommand("params", "parameter accounting for a variant");
    params->add_option("--variant", "model variant")->default_val("midstate-ed");
    params->add_option("--classes", "class count")->default_val(200);
    params->add_option("--width", "width multiplier")->default_val(0.25);
    params->add_option("--ema-groups", "ema group count")->default_val(16);
    params->add_option("--dual-groups", "dual-conv group count")->default_val(2);
    params->add_flag("--report", "print the full reconciliation report");
    params->add_flag("--per-layer", "print the per-layer breakdown");
    params->add_option("--out", "directory for params.json");
    params->add_option("--seed", "unused, accepted for uniformity")->default_val(0);

    // ---- flops ----
    auto* flops = app.add_subcommand("flops", "flop accounting for a variant");
    flops->add_option("--variant", "model variant")->default_val("midstate-ed");
    flops->add_option("--classes", "class count")->default_val(200);
    flops->add_option("--width", "width multiplier")->default_val(0.25);
    flops->add_option("--size", "input size")->default_val(640);
    flops->add_option("--out", "directory for flops.json");
    flops->add_option("--seed", "unused, accepted for uniformity")->default_val(0);

    // ---- bench ----
    auto* bench = app.add_subcommand("bench", "forward-latency benchmark");
    bench->add_option("--variant", "model variant")->default_val("midstate-ed");
    bench->add_option("--classes", "class count")->default_val(200);
    bench->add_option("--width", "width multiplier")->default_val(0.25);
    bench->add_option("--size", "input size")->default_val(160);
    bench->add_option("--iters", "timed iterations")->default_val(30);
    bench->add_option("--warmup", "warm iterations")->default_val(5);
    bench->add_option("--seed", "model/input seed")->default_val(0);
    bench->add_option("--out", "directory for bench.json");

    app.parse(argc, argv);
    return dispatch(app);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // usage errors (incl. unknown flags) -> 1
  } catch (const msy::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const msy::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const msy::Error& e) {  // DataError, DimensionError
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

namespace {

int dispatch(CLI::App& app) {
  CLI::App* sub = app.get_subcommands().front();
  RunContext ctx;
  ctx.subcommand = sub->get_name();
  for (const auto* opt : sub->get_options()) {
    if (opt->get_name().rfind("--", 0) != 0) continue;
    const auto& results = opt->results();
    if (results.size() == 1)
      ctx.config[opt->get_name().substr(2)] = results.front();
    else if (!results.empty())
      ctx.config[opt->get_name().substr(2)] = results;
    else if (!opt->get_default_str().empty())
      ctx.config[opt->get_name().substr(2)] = opt->get_default_str();
  }
  auto opt_str = [&](const char* name) { return sub->get_option(name)->as<std::string>(); };
  auto opt_int = [&](const char* name) { return sub->get_option(name)->as<int>(); };
  auto opt_dbl = [&](const char* name) { return sub->get_option(name)->as<double>(); };
  auto opt_u64 = [&](const char* name) { return sub->get_option(name)->as<uint64_t>(); };
  auto opt_set = [&](const char* name) { return sub->get_option(name)->count() > 0; };

  if (ctx.subcommand == "gen-data") {
    ctx.seed = opt_u64("--seed");
    ctx.out_dir = opt_str("--out");
    msy::SceneSpec scene;
    scene.image_size = opt_int("--size");
    scene.kmin = opt_int("--kmin");
    scene.kmax = opt_int("--kmax");
    scene.max_overlap = opt_dbl("--overlap");
    auto manifest = msy::generate_dataset(ctx.out_dir, opt_int("--images"), opt_int("--classes"),
                                          scene, ctx.seed);
    std::printf("generated %zu images, %d classes at %dpx under %s\n", manifest.images.size(),
                manifest.num_classes, scene.image_size, ctx.out_dir.c_str());
    ctx.outputs = {ctx.out_dir};
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "split") {
    ctx.seed = opt_u64("--seed");
    const std::string root = opt_str("--dataset");
    std::array<int, 3> ratios{};
    if (std::sscanf(opt_str("--ratios").c_str(), "%d,%d,%d", &ratios[0], &ratios[1],
                    &ratios[2]) != 3)
      throw msy::UsageError("--ratios expects three comma-separated integers");
    auto manifest = msy::DatasetManifest::load(root);
    msy::split_dataset(root, manifest, ratios, ctx.seed);
    std::printf("split %zu images: train %zu / val %zu / test %zu\n", manifest.images.size(),
                manifest.split_images("train").size(), manifest.split_images("val").size(),
                manifest.split_images("test").size());
    ctx.inputs = {root};
    ctx.out_dir = root;
    ctx.outputs = {root + "/manifest.json"};
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "train") {
    msy::TrainConfig tc;
    if (opt_set("--config")) {
      std::ifstream f(opt_str("--config"));
      if (!f) throw msy::DataError("cannot read " + opt_str("--config"));
      std::stringstream ss;
      ss << f.rdbuf();
      tc = msy::TrainConfig::from_text(ss.str());
    }
    auto flag_or = [&](const char* name, double fallback) {
      return opt_set(name) || !opt_set("--config") ? opt_dbl(name) : fallback;
    };
    tc.lr = flag_or("--lr", tc.lr);
    tc.momentum = flag_or("--momentum", tc.momentum);
    tc.weight_decay = flag_or("--weight-decay", tc.weight_decay);
    tc.batch_size = static_cast<int>(flag_or("--batch", tc.batch_size));
    tc.image_size = static_cast<int>(flag_or("--size", tc.image_size));
    tc.epochs = static_cast<int>(flag_or("--epochs", tc.epochs));
    tc.eval_every = static_cast<int>(flag_or("--eval-every", tc.eval_every));
    tc.stop_map50 = flag_or("--stop-map50", tc.stop_map50);
    if (opt_set("--eval-split") || !opt_set("--config")) tc.eval_split = opt_str("--eval-split");
    tc.seed = opt_u64("--seed");
    ctx.seed = tc.seed;
    ctx.out_dir = opt_str("--out");
    ctx.inputs = {opt_str("--dataset")};

    auto manifest = msy::DatasetManifest::load(opt_str("--dataset"));
    int classes = opt_int("--classes");
    if (classes <= 0) classes = manifest.num_classes;
    auto mc = model_config_from_flags(opt_str("--variant"), classes, opt_dbl("--width"),
                                      tc.image_size, 16, 2);
    auto model = msy::build_model<float>(mc, tc.seed);
    const bool resume = opt_set("--resume");
    if (resume) {
      // rebuild from the checkpoint's own config so widths match exactly
      model = load_model(ctx.out_dir + "/last.msyw");
    }
    fs::create_directories(ctx.out_dir);
    {
      std::ofstream f(ctx.out_dir + "/train_config.txt", std::ios::trunc);
      f << tc.to_text();
      std::ofstream g(ctx.out_dir + "/model_config.txt", std::ios::trunc);
      g << model.config().to_text();
    }
    auto result = msy::train_loop(tc, model, opt_str("--dataset"), ctx.out_dir, resume,
                                  &std::cout);
    std::printf("trained %d epochs; final eval mAP@0.5 %.4f%s\n", result.epochs_run,
                result.final_map50, result.reached_target ? " (target reached)" : "");
    ctx.outputs = {ctx.out_dir + "/last.msyw", ctx.out_dir + "/metrics.csv"};
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "eval") {
    ctx.seed = opt_u64("--seed");
    msy::EvalReport report;
    std::vector<msy::EvalDetection> dets;
    if (opt_set("--results")) {
      dets = msy::read_results_jsonl(opt_str("--results"));
      ctx.inputs.push_back(opt_str("--results"));
      std::vector<msy::GroundTruth> gts;
      if (opt_set("--dataset")) {
        auto manifest = msy::DatasetManifest::load(opt_str("--dataset"));
        for (const auto* entry : manifest.split_images(opt_str("--split")))
          for (const auto& label :
               msy::read_labels(msy::label_path(opt_str("--dataset"), *entry)))
            gts.push_back({entry->id, msy::to_pixels(label, entry->width, entry->height),
                           label.class_id});
        ctx.inputs.push_back(opt_str("--dataset"));
      } else if (opt_set("--labels")) {
        const int size = opt_int("--image-size");
        if (size <= 0)
          throw msy::UsageError("--labels mode requires --image-size");
        for (const auto& file : fs::directory_iterator(opt_str("--labels"))) {
          if (file.path().extension() != ".txt") continue;
          for (const auto& label : msy::read_labels(file.path().string()))
            gts.push_back({file.path().stem().string(), msy::to_pixels(label, size, size),
                           label.class_id});
        }
        ctx.inputs.push_back(opt_str("--labels"));
      } else {
        throw msy::UsageError("results mode needs --dataset or --labels");
      }
      msy::EvalOptions opts;
      opts.operating_conf = opt_dbl("--conf");
      report = msy::evaluate(dets, gts, opts);
    } else if (opt_set("--weights")) {
      if (!opt_set("--dataset")) throw msy::UsageError("model mode needs --dataset");
      auto model = load_model(opt_str("--weights"));
      report = msy::evaluate_model(model, opt_str("--dataset"), opt_str("--split"),
                                   opt_dbl("--eval-conf"), opt_dbl("--iou"), &dets);
      ctx.inputs = {opt_str("--weights"), opt_str("--dataset")};
    } else {
      throw msy::UsageError("eval needs --weights (model mode) or --results (results mode)");
    }
    std::cout << report.to_text();
    if (opt_set("--out")) {
      ctx.out_dir = opt_str("--out");
      fs::create_directories(ctx.out_dir);
      std::ofstream f(ctx.out_dir + "/report.json", std::ios::trunc);
      f << report.to_json() << "\n";
      msy::write_results_jsonl(dets, ctx.out_dir + "/preds.jsonl");
      ctx.outputs = {ctx.out_dir + "/report.json", ctx.out_dir + "/preds.jsonl"};
    }
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "predict" || ctx.subcommand == "checkout") {
    const bool is_checkout = ctx.subcommand == "checkout";
    ctx.seed = opt_u64("--seed");
    ctx.out_dir = opt_str("--out");
    fs::create_directories(ctx.out_dir);
    auto model = load_model(opt_str("--weights"));
    ctx.inputs = {opt_str("--weights")};
    msy::Catalog catalog;
    if (is_checkout) {
      catalog = msy::Catalog::from_csv(opt_str("--catalog"));
      ctx.inputs.push_back(opt_str("--catalog"));
    }

    std::vector<std::pair<std::string, std::string>> images;  // (id, path)
    if (opt_set("--image")) {
      for (const auto& path : sub->get_option("--image")->as<std::vector<std::string>>())
        images.push_back({fs::path(path).stem().string(), path});
    } else if (opt_set("--dataset")) {
      auto manifest = msy::DatasetManifest::load(opt_str("--dataset"));
      for (const auto* entry : manifest.split_images(opt_str("--split")))
        images.push_back({entry->id, msy::image_path(opt_str("--dataset"), *entry)});
      ctx.inputs.push_back(opt_str("--dataset"));
    } else {
      throw msy::UsageError(ctx.subcommand + " needs --image or --dataset");
    }

    const double conf = opt_dbl("--conf"), iou_thresh = opt_dbl("--iou");
    std::vector<msy::EvalDetection> all;
    int64_t grand_total = 0;
    for (const auto& [id, path] : images) {
      const msy::ImageU8 img = msy::read_ppm(path);
      auto dets = msy::predict_image(model, img, conf, iou_thresh);
      for (const auto& d : dets) all.push_back({id, d.bbox, d.class_id, d.score});
      const bool labels_on = !is_checkout && !opt_set("--plain-boxes");
      msy::write_ppm(msy::annotate(img, dets, labels_on),
                     ctx.out_dir + "/" + id + "_annotated.ppm");
      if (is_checkout) {
        auto receipt = msy::build_shopping_list(dets, catalog, id, conf);
        std::ofstream f(ctx.out_dir + "/" + id + "_receipt.json", std::ios::trunc);
        f << receipt.to_json() << "\n";
        std::printf("%s: %zu line(s), total %lld\n", id.c_str(), receipt.lines.size(),
                    static_cast<long long>(receipt.total));
        grand_total += receipt.total;
      } else {
        std::printf("%s: %zu detection(s)\n", id.c_str(), dets.size());
      }
    }
    msy::write_results_jsonl(all, ctx.out_dir + "/preds.jsonl");
    if (is_checkout) std::printf("grand total over %zu image(s): %lld\n", images.size(),
                                 static_cast<long long>(grand_total));
    ctx.outputs = {ctx.out_dir};
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "params") {
    ctx.seed = opt_u64("--seed");
    if (opt_set("--report")) {
      std::cout << msy::reconciliation_report(opt_int("--classes"));
      emit_manifest(ctx);
      return 0;
    }
    auto mc = model_config_from_flags(opt_str("--variant"), opt_int("--classes"),
                                      opt_dbl("--width"), 640, opt_int("--ema-groups"),
                                      opt_int("--dual-groups"));
    auto model = msy::build_model<float>(mc);
    auto pc = msy::count_params(model);
    std::printf("%s at %d classes, width %.3g: trainable %lld, total %lld\n",
                opt_str("--variant").c_str(), mc.num_classes, mc.width_mult,
                static_cast<long long>(pc.trainable), static_cast<long long>(pc.total));
    if (opt_set("--per-layer"))
      for (const auto& [layer, count] : pc.per_layer)
        std::printf("  %-10s %10lld\n", layer.c_str(), static_cast<long long>(count));
    if (mc.num_classes == 200 && mc.width_mult == 0.25) {
      switch (mc.variant) {
        case msy::Variant::yolov8n_like:
          check_band("params", pc.trainable, msy::reference::kParamsYolov8nLike, 5);
          break;
        case msy::Variant::midstate:
          check_band("params", pc.trainable, msy::reference::kParamsMidstate, 5);
          break;
        case msy::Variant::midstate_dualconv:
          check_band("params", pc.trainable, msy::reference::kParamsMidstateDualconv, 5);
          break;
        case msy::Variant::midstate_ema:
          check_band("params", pc.trainable, msy::reference::kParamsMidstateEma, 5);
          break;
        case msy::Variant::midstate_ed:
          check_band("params", pc.trainable, msy::reference::kParamsMidstateEd, 5);
          break;
        default:
          break;
      }
    }
    if (opt_set("--out")) {
      ctx.out_dir = opt_str("--out");
      fs::create_directories(ctx.out_dir);
      json j;
      j["variant"] = opt_str("--variant");
      j["trainable"] = pc.trainable;
      j["total"] = pc.total;
      std::ofstream f(ctx.out_dir + "/params.json", std::ios::trunc);
      f << j.dump(2) << "\n";
      ctx.outputs = {ctx.out_dir + "/params.json"};
    }
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "flops") {
    ctx.seed = opt_u64("--seed");
    auto mc = model_config_from_flags(opt_str("--variant"), opt_int("--classes"),
                                      opt_dbl("--width"), opt_int("--size"), 16, 2);
    auto model = msy::build_model<float>(mc);
    const double gf = msy::count_flops(model, opt_int("--size"));
    std::printf("%s at %dpx, %d classes: %.3f GFLOPs (2 ops/MAC, batch 1)\n",
                opt_str("--variant").c_str(), opt_int("--size"), mc.num_classes, gf);
    if (mc.num_classes == 200 && mc.width_mult == 0.25 && opt_int("--size") == 640) {
      if (mc.variant == msy::Variant::yolov8n_like)
        check_band("gflops", gf, msy::reference::kGflopsYolov8nLike, 10);
      if (mc.variant == msy::Variant::midstate_ed)
        check_band("gflops", gf, msy::reference::kGflopsMidstateEd, 10);
    }
    if (opt_set("--out")) {
      ctx.out_dir = opt_str("--out");
      fs::create_directories(ctx.out_dir);
      json j;
      j["variant"] = opt_str("--variant");
      j["input_size"] = opt_int("--size");
      j["gflops"] = gf;
      std::ofstream f(ctx.out_dir + "/flops.json", std::ios::trunc);
      f << j.dump(2) << "\n";
      ctx.outputs = {ctx.out_dir + "/flops.json"};
    }
    emit_manifest(ctx);
    return 0;
  }

  if (ctx.subcommand == "bench") {
    ctx.seed = opt_u64("--seed");
    auto mc = model_config_from_flags(opt_str("--variant"), opt_int("--classes"),
                                      opt_dbl("--width"), opt_int("--size"), 16, 2);
    auto model = msy::build_model<float>(mc, ctx.seed);
    msy::Rng rng(ctx.seed);
    std::vector<float> data(static_cast<size_t>(3) * mc.input_size * mc.input_size);
    for (auto& v : data) v = static_cast<float>(rng.uniform());
    auto input = msy::Tensor<float>::from({1, 3, mc.input_size, mc.input_size}, std::move(data));
    for (int i = 0; i < opt_int("--warmup"); ++i) model.forward(input);
    std::vector<double> times;
    for (int i = 0; i < opt_int("--iters"); ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      model.forward(input);
      times.push_back(
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
              .count());
    }
    std::sort(times.begin(), times.end());
    const double median = times[times.size() / 2];
    const double p95 = times[static_cast<size_t>(std::ceil(times.size() * 0.95)) - 1];
    std::printf("%s forward at %dpx over %d iters: median %.2f ms, p95 %.2f ms\n",
                opt_str("--variant").c_str(), mc.input_size, opt_int("--iters"), median, p95);
    if (opt_set("--out")) {
      ctx.out_dir = opt_str("--out");
      fs::create_directories(ctx.out_dir);
      json j;
      j["variant"] = opt_str("--variant");
      j["median_ms"] = median;
      j["p95_ms"] = p95;
      std::ofstream f(ctx.out_dir + "/bench.json", std::ios::trunc);
      f << j.dump(2) << "\n";
      ctx.outputs = {ctx.out_dir + "/bench.json"};
    }
    emit_manifest(ctx);
    return 0;
  }

  throw msy::UsageError("unknown subcommand");
}

}  // namespace
