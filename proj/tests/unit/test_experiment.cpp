#include <doctest.h>

#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

#include "helpers.hpp"
#include "scalenet/experiment.hpp"
#include "scalenet/util.hpp"

#ifndef SCALENET_CLI_PATH
#error "SCALENET_CLI_PATH must name the command-line binary"
#endif

using namespace scalenet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const fs::path& small_archive() {
  static const fs::path dir = [] {
    const auto d = testutil::scratch_dir("exp_archive");
    write_synthetic_cifar(d, {16, 4, 3});
    return d;
  }();
  return dir;
}

json tiny_doc(const fs::path& out) {
  return json{{"task", "pretrain_scalenet"},
              {"dataset", {{"path", small_archive().string()}}},
              {"model", {{"width", 4}}},
              {"schedule", {{"alphas", {0.5, 1.0}}, {"lrs", {0.05, 0.05}}, {"epochs", {5}}, {"batch_images", 32}}},
              {"deterministic", true},
              {"out_dir", out.string()}};
}

std::vector<RunRecord> all_records(const RunRecord& r) {
  std::vector<RunRecord> out{r};
  for (const auto& c : r.children) {
    auto sub = all_records(c);
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

// Every file below root must be listed by exactly one record.
void check_artifact_ownership(const fs::path& root, const RunRecord& top) {
  std::map<fs::path, int> owners;
  for (const auto& r : all_records(top))
    for (const auto& a : r.artifacts) ++owners[fs::weakly_canonical(r.dir / a)];
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    CAPTURE(e.path().string());
    CHECK(owners[fs::weakly_canonical(e.path())] == 1);
  }
  for (const auto& [p, n] : owners) {
    CAPTURE(p.string());
    CHECK(fs::exists(p));
  }
}

RunRecord fake_record(const std::string& method, std::uint64_t seed, double pre, double down,
                      const std::string& dataset = "d0") {
  RunRecord r;
  r.task = "pretrain_" + method;
  r.method = method;
  r.dataset_digest = dataset;
  r.seed = seed;
  r.alpha_schedule = method == "scalenet" ? "0.5,1" : "1";
  r.lr_ladder = "0.1/5@30";
  r.pretext_acc = pre;
  EvalReport rep;
  rep.accuracy = down;
  rep.per_class_acc = {down};
  rep.class_counts = {10};
  r.reports.push_back(rep);
  return r;
}

std::vector<std::string> csv_lines(const fs::path& p) {
  std::istringstream in(read_file(p));
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) lines.push_back(l);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') {
      quoted = !quoted;
    } else if (ch == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

int run_cli(const std::string& args, const fs::path& err_file) {
  const std::string cmd = std::string(SCALENET_CLI_PATH) + " " + args + " >/dev/null 2>" + err_file.string();
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("digest ignores key order") {
    const auto a = json::parse(R"({"seed": 3, "model": {"width": 4, "arch": "small_convnet"}, "task": "pretrain_rotnet"})");
    const auto b = json::parse(R"({"task": "pretrain_rotnet", "model": {"arch": "small_convnet", "width": 4}, "seed": 3})");
    CHECK(ExperimentConfig::from_json(a).digest() == ExperimentConfig::from_json(b).digest());
    auto c = b;
    c["seed"] = 4;
    CHECK(ExperimentConfig::from_json(c).digest() != ExperimentConfig::from_json(a).digest());
  }

  TEST_CASE("json round trip and unknown keys") {
    const auto cfg = ExperimentConfig::from_json(tiny_doc("/tmp/x"));
    CHECK(ExperimentConfig::from_json(cfg.to_json()).to_json() == cfg.to_json());
    auto bad = tiny_doc("/tmp/x");
    bad["schedule"]["alpha"] = {1.0};
    CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
    bad = tiny_doc("/tmp/x");
    bad["typo"] = 1;
    CHECK_THROWS_AS(ExperimentConfig::from_json(bad), ConfigError);
  }

  TEST_CASE("dotted overrides win") {
    auto doc = tiny_doc("/tmp/x");
    set_config_value(doc, "schedule.epochs", std::vector<int>{7});
    set_config_value(doc, "contrastive.temperature", 0.2);
    const auto cfg = ExperimentConfig::from_json(doc);
    CHECK(cfg.schedule.stages[1].epochs == 7);
    CHECK(cfg.contrastive.temperature == 0.2);
  }

  TEST_CASE("probe protocol switches the evaluation ladder") {
    auto doc = tiny_doc("/tmp/x");
    doc["evaluation"] = {{"protocol", "linear_probe"}};
    const auto cfg = ExperimentConfig::from_json(doc);
    CHECK(cfg.evaluation.downstream.lr.initial_lr == probe_defaults().lr.initial_lr);
    CHECK(cfg.evaluation.downstream.epochs == 30);
  }

  TEST_CASE("validation") {
    auto doc = tiny_doc("/tmp/x");
    doc["dataset"]["path"] = "/nonexistent/cifar";
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc).validate(), ConfigError);
    doc = tiny_doc("/tmp/x");
    doc["task"] = "finetune";
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc).validate(), ConfigError);
    doc = tiny_doc("/tmp/x");
    doc["schedule"]["alphas"] = {1.0, 0.5};
    CHECK_THROWS(ExperimentConfig::from_json(doc).validate());
    doc = tiny_doc("/tmp/x");
    doc["ablation"] = {{"corner_removal", true}, {"hybrid_prob", 0.5}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(doc).validate(), ConfigError);
  }

  TEST_CASE("ablation names") {
    for (const char* n : {"none", "harris", "grayscale", "grayscale_harris", "hybrid"})
      CHECK(AblationSpec::from_name(n).name() == n);
    CHECK_THROWS_AS(AblationSpec::from_name("sepia"), ConfigError);
  }

  TEST_CASE("rotation baseline keeps only the full-scale stage") {
    const auto s = rotnet_schedule(make_schedule({0.5, 1}, {0.1, 0.05}, {30, 40}));
    REQUIRE(s.stages.size() == 1);
    CHECK(s.stages[0].alpha == 1.0);
    CHECK(s.stages[0].lr.initial_lr == 0.1);
    CHECK(s.stages[0].epochs == 40);
  }
}

TEST_SUITE("pipeline") {
  TEST_CASE("two-stage pretraining writes checkpoints, metrics and a record") {
    const auto out = testutil::scratch_dir("exp_pretrain");
    const auto rec = run(ExperimentConfig::from_json(tiny_doc(out)));
    CHECK(rec.checkpoints == std::vector<std::string>{"stage0_alpha0.5.ckpt", "stage1_alpha1.ckpt"});
    for (const auto& c : rec.checkpoints) CHECK(fs::exists(out / c));
    CHECK(csv_lines(out / "metrics.jsonl").size() == 10);
    REQUIRE(rec.pretext_acc);
    CHECK(*rec.pretext_acc > 0.25);
    CHECK(load_checkpoint(out / "stage1_alpha1.ckpt").meta.alpha == 1.0);
    const auto back = load_record(out / kRecordFile);
    CHECK(back.to_json() == rec.to_json());
    CHECK(rec.alpha_schedule == "0.5;1");
    check_artifact_ownership(out, rec);
  }

  TEST_CASE("deterministic reruns produce identical metric files") {
    const auto a = testutil::scratch_dir("exp_det_a");
    const auto b = testutil::scratch_dir("exp_det_b");
    const auto ra = run(ExperimentConfig::from_json(tiny_doc(a)));
    const auto rb = run(ExperimentConfig::from_json(tiny_doc(b)));
    CHECK(read_file(a / "metrics.jsonl") == read_file(b / "metrics.jsonl"));
    CHECK(read_file(a / "stage1_alpha1.ckpt") == read_file(b / "stage1_alpha1.ckpt"));
    CHECK(ra.config_digest == rb.config_digest);
  }

  TEST_CASE("evaluation, probing and grad-cam from a checkpoint") {
    const auto pre = testutil::scratch_dir("exp_eval_pre");
    auto doc = tiny_doc(pre);
    doc["task"] = "pretrain_rotnet";
    doc["schedule"]["epochs"] = {2};
    doc["evaluation"] = {{"protocol", "finetune"}, {"epochs", 2}, {"batch_size", 32}};
    const auto rec = run(ExperimentConfig::from_json(doc));
    REQUIRE(rec.reports.size() == 1);
    CHECK(fs::exists(pre / "finetuned.ckpt"));
    CHECK(fs::exists(pre / "eval.json"));

    const auto probe_out = testutil::scratch_dir("exp_eval_probe");
    auto pdoc = tiny_doc(probe_out);
    pdoc["task"] = "probe";
    pdoc["checkpoint"] = (pre / "stage0_alpha1.ckpt").string();
    pdoc["evaluation"] = {{"epochs", 2}, {"batch_size", 32}};
    const auto prec = run(ExperimentConfig::from_json(pdoc));
    CHECK(prec.reports.size() == 4);
    check_artifact_ownership(probe_out, prec);

    const auto cam_out = testutil::scratch_dir("exp_eval_cam");
    auto gdoc = tiny_doc(cam_out);
    gdoc["task"] = "gradcam";
    gdoc["checkpoint"] = (pre / "finetuned.ckpt").string();
    gdoc["gradcam"] = {{"count", 3}, {"block", "block2"}};
    const auto grec = run(ExperimentConfig::from_json(gdoc));
    for (int i = 0; i < 3; ++i) {
      CHECK(fs::exists(cam_out / ("gradcam_" + std::to_string(i) + ".png")));
      const auto side = json::parse(read_file(cam_out / ("gradcam_" + std::to_string(i) + ".json")));
      CHECK(side.at("block") == "block2");
      CHECK(side.contains("class_name"));
    }
    check_artifact_ownership(cam_out, grec);
  }

  TEST_CASE("failures carry their phase and keep a record") {
    const auto out = testutil::scratch_dir("exp_fail");
    const auto broken = testutil::scratch_dir("exp_fail_data");
    write_synthetic_cifar(broken, {2, 1, 1});
    fs::remove(broken / "SHA256SUMS");
    const auto bytes = read_file(broken / "test_batch");
    write_file_atomic(broken / "test_batch", bytes.substr(0, 40));
    auto doc = tiny_doc(out);
    doc["dataset"]["path"] = broken.string();
    try {
      run(ExperimentConfig::from_json(doc));
      FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
      CHECK(e.phase() == "ingest");
      CHECK(std::string(e.what()).rfind("[ingest]", 0) == 0);
    }

    auto diverge = tiny_doc(out);
    diverge["schedule"]["lrs"] = {1e30, 1e30};
    diverge["schedule"]["weight_decay"] = 0.0;
    try {
      run(ExperimentConfig::from_json(diverge));
      FAIL("expected PipelineError");
    } catch (const PipelineError& e) {
      CHECK(e.phase() == "pretrain");
    }
    const auto rec = load_record(out / kRecordFile);
    REQUIRE(rec.error);
    CHECK(fs::exists(out / "metrics.jsonl"));
  }

  TEST_CASE("ablation grid at toy scale") {
    const auto out = testutil::scratch_dir("exp_ablation");
    auto doc = tiny_doc(out);
    doc["task"] = "ablation_suite";
    doc["schedule"]["epochs"] = {1};
    doc["evaluation"] = {{"epochs", 1}, {"batch_size", 32}};
    const auto rec = run(ExperimentConfig::from_json(doc));
    CHECK(rec.children.size() == 10);
    CHECK(rec.reports.size() == 10);
    std::set<std::string> rows;
    for (const auto& c : rec.children) rows.insert(c.ablation + "/" + c.method);
    for (const char* v : {"none", "harris", "hybrid", "grayscale", "grayscale_harris"})
      for (const char* m : {"rotnet", "scalenet"}) CHECK(rows.count(std::string(v) + "/" + m) == 1);
    CHECK(csv_lines(out / "report" / "summary.csv").size() == 11);
    check_artifact_ownership(out, rec);
  }
}

TEST_SUITE("report") {
  TEST_CASE("one row per run") {
    const auto out = testutil::scratch_dir("report_two");
    const auto paths = emit_report({fake_record("rotnet", 0, 0.8, 0.7), fake_record("scalenet", 0, 0.82, 0.72)}, out);
    CHECK(paths.size() == 3);
    for (const auto& p : paths) CHECK(fs::exists(p));
    const auto lines = csv_lines(out / "summary.csv");
    CHECK(lines.size() == 3);
    CHECK(split_csv(lines[1])[0] == "rotnet");
    CHECK(split_csv(lines[1]).back().empty());
  }

  TEST_CASE("seed mean and std per method") {
    const auto out = testutil::scratch_dir("report_seeds");
    std::vector<RunRecord> recs;
    for (std::uint64_t s = 0; s < 3; ++s) {
      recs.push_back(fake_record("rotnet", s, 0.8, 0.70 + 0.01 * static_cast<double>(s)));
      recs.push_back(fake_record("scalenet", s, 0.8, 0.72));
    }
    emit_report(recs, out);
    const auto lines = csv_lines(out / "summary.csv");
    REQUIRE(lines.size() == 7);
    const auto header = split_csv(lines[0]);
    const auto col = [&](const std::string& name) {
      return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    };
    const auto row = split_csv(lines[1]);
    CHECK(std::stod(row[col("downstream_mean")]) == doctest::Approx(0.71));
    CHECK(std::stod(row[col("downstream_std")]) == doctest::Approx(0.01));
    CHECK(row[col("group_runs")] == "3");
    CHECK(std::stod(split_csv(lines[2])[col("downstream_std")]) == doctest::Approx(0.0));
  }

  TEST_CASE("empty and mixed inputs are rejected") {
    const auto out = testutil::scratch_dir("report_bad");
    CHECK_THROWS_AS(emit_report({}, out), ArgumentError);
    CHECK_THROWS_AS(emit_report({fake_record("rotnet", 0, 0.8, 0.7), fake_record("rotnet", 1, 0.8, 0.7, "d1")}, out),
                    ArgumentError);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("pretrain, report and a phase-tagged failure") {
    const auto out = testutil::scratch_dir("cli_run");
    const auto err = out / "stderr.txt";
    const std::string common = "--data " + small_archive().string() + " --width 4 --epochs 1 --batch-images 32 --deterministic";
    CHECK(run_cli("pretrain --method rotnet " + common + " --out " + (out / "rot").string(), err) == 0);
    CHECK(run_cli("pretrain --method scalenet --alphas 0.5,1 --lrs 0.1,0.05 " + common + " --out " +
                      (out / "scale").string(),
                  err) == 0);
    CHECK(fs::exists(out / "scale" / "stage0_alpha0.5.ckpt"));
    CHECK(run_cli("report " + (out / "rot").string() + " " + (out / "scale").string() + " --out " +
                      (out / "report").string(),
                  err) == 0);
    CHECK(csv_lines(out / "report" / "summary.csv").size() == 3);

    CHECK(run_cli("pretrain --method rotnet --data /nonexistent --out " + (out / "bad").string(), err) != 0);
    CHECK(read_file(err).rfind("error [config]", 0) == 0);
    CHECK(run_cli("pretrain --method rotnet --alphas 1,0.5 --lrs 0.1,0.1 --data " + small_archive().string() +
                      " --out " + (out / "bad").string(),
                  err) != 0);
    CHECK(read_file(err).rfind("error [config]", 0) == 0);
  }
}
