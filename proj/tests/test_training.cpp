#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "xfactor/training.hpp"

using namespace xfactor;

namespace {

TrainConfig tiny_train_config() {
  TrainConfig c;
  c.model.layers = 1;
  c.model.width = 32;
  c.model.heads = 4;
  c.model.patch_size = 4;
  c.model.pose_dim = 8;
  c.model.image_size = 16;
  c.model.mlp_ratio = 2;
  c.batch_size = 1;
  c.total_steps = 4;
  c.checkpoint_every = 2;
  c.log_every = 1;
  c.seed = 3;
  return c;
}

Image random_image(int size, Rng& rng) {
  Image img(size, size);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform(0.1, 0.9));
  return img;
}

}  // namespace

TEST_CASE("ssim window is a normalized 11-tap gaussian") {
  const auto w = ssim_window();
  REQUIRE(w.size() == 11);
  double s = 0;
  for (double v : w) s += v;
  CHECK(s == Catch::Approx(1.0).margin(1e-12));
  CHECK(w[5] > w[0]);
  for (int i = 0; i < 5; ++i) CHECK(w[i] == Catch::Approx(w[10 - i]));
}

TEST_CASE("ssim of an image with itself is one") {
  Rng rng(61);
  std::vector<double> d(20 * 20 * 3);
  for (auto& v : d) v = rng.uniform(0.0, 1.0);
  Tensor<double> x({20, 20, 3}, d);
  CHECK(ssim(x, x).item() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("image_distance pins") {
  Rng rng(62);
  std::vector<double> d(16 * 16 * 3);
  for (auto& v : d) v = rng.uniform(0.2, 0.7);
  Tensor<double> gt({16, 16, 3}, d);

  // Zero distance to itself.
  auto self_d = image_distance(gt, gt, 0.5);
  CHECK(self_d.l1 == 0.0);
  CHECK(self_d.perceptual == Catch::Approx(0.0).margin(1e-9));
  CHECK(self_d.total.item() == Catch::Approx(0.0).margin(1e-9));

  // A uniform +0.1 offset gives exactly l1 = 0.1.
  auto pred = add_scalar(gt, 0.1);
  auto lb = image_distance(pred, gt, 0.5);
  CHECK(lb.l1 == Catch::Approx(0.1).margin(1e-9));
  CHECK(lb.perceptual > 0.0);
  CHECK(lb.total.item() == Catch::Approx(lb.l1 + 0.5 * lb.perceptual).margin(1e-6));

  // lambda = 0 disables the perceptual term.
  auto l1_only = image_distance(pred, gt, 0.0);
  CHECK(l1_only.total.item() == Catch::Approx(0.1).margin(1e-9));
  CHECK(l1_only.perceptual == 0.0);
}

TEST_CASE("image_distance is differentiable") {
  Rng rng(63);
  auto gt_data = std::vector<double>(12 * 12 * 3);
  for (auto& v : gt_data) v = rng.uniform(0.0, 1.0);
  Tensor<double> gt({12, 12, 3}, gt_data);
  auto x = testutil::random_tensor({12, 12, 3}, rng, 0.2, 0.8);
  auto res = testutil::check_gradient(
      x, [&](const Tensor<double>& t) { return image_distance(t, gt, 0.5).total; }, 1e-5, 5e-4);
  INFO("max rel err " << res.max_rel_err);
  CHECK(res.ok);
}

TEST_CASE("autoencoding objective is bit-identical to self-transferability") {
  const TrainConfig cfg = tiny_train_config();
  auto model = XFactorModel<float>::init(cfg.model, 9);
  Rng rng(64);
  std::vector<Image> frames{random_image(16, rng), random_image(16, rng)};
  std::vector<AugmentedSeq> v{plain_seq(frames, cfg.model.grid())};
  auto a = autoencoding_loss(model, v, 0, 1, 0.5);
  auto t = transferability_loss(model, v, v, 0, 1, 0.5);
  CHECK(a.total.item() == t.total.item());
  CHECK(a.l1 == t.l1);
  CHECK(a.perceptual == t.perceptual);
}

TEST_CASE("losses are finite and positive at initialization") {
  for (Objective obj : {Objective::Transferability, Objective::Autoencoding}) {
    TrainConfig cfg = tiny_train_config();
    cfg.objective = obj;
    auto model = XFactorModel<float>::init(cfg.model, 10);
    auto lb = training_step_loss(model, cfg, TrainStage::Stereo, 0);
    const double v = lb.total.item();
    CHECK(std::isfinite(v));
    CHECK(v > 0.0);
    CHECK(lb.l1 > 0.0);
  }
}

TEST_CASE("transferability loss validates sequence shape and indices") {
  const TrainConfig cfg = tiny_train_config();
  auto model = XFactorModel<float>::init(cfg.model, 11);
  Rng rng(65);
  std::vector<Image> three{random_image(16, rng), random_image(16, rng), random_image(16, rng)};
  std::vector<AugmentedSeq> v3{plain_seq(three, cfg.model.grid())};
  CHECK_THROWS_AS(transferability_loss(model, v3, v3, 0, 1, 0.5), std::invalid_argument);

  std::vector<Image> two{three[0], three[1]};
  std::vector<AugmentedSeq> v2{plain_seq(two, cfg.model.grid())};
  CHECK_THROWS_AS(transferability_loss(model, v2, v2, 0, 0, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(transferability_loss(model, v2, v2, 0, 2, 0.5), std::invalid_argument);
}

TEST_CASE("train samples are deterministic and stage-consistent") {
  TrainConfig cfg = tiny_train_config();

  const auto s1 = make_train_sample(cfg, TrainStage::Stereo, 5, 2);
  const auto s2 = make_train_sample(cfg, TrainStage::Stereo, 5, 2);
  CHECK(s1.seq.frames[0].data == s2.seq.frames[0].data);
  CHECK(s1.view_a.frames[0].data == s2.view_a.frames[0].data);
  CHECK(s1.view_a.masks[0].grid == s2.view_a.masks[0].grid);
  CHECK(s1.ref_idx == 0);
  CHECK(s1.target_idx == 1);

  // Different (step, sample) coordinates give different data.
  const auto s3 = make_train_sample(cfg, TrainStage::Stereo, 6, 2);
  CHECK(s3.seq.frames[0].data != s1.seq.frames[0].data);

  // Stereo pair baselines stay within the configured cap.
  for (int i = 0; i < 10; ++i) {
    const auto s = make_train_sample(cfg, TrainStage::Stereo, 0, i);
    const double ang =
        rotation_angle_deg(relative_pose(s.seq.poses[0], s.seq.poses[1]).rotation);
    CHECK(ang < cfg.data.baseline_max_deg + 2 * cfg.data.orbit.azimuth_jitter_deg + 1.0);
  }

  // Multi-view: reference comes from the sequence, targets cover non-ref frames.
  cfg.model.views_decoder = 3;
  std::vector<int> seen(4, 0);
  for (int i = 0; i < 40; ++i) {
    const auto s = make_train_sample(cfg, TrainStage::Multiview, 0, i);
    REQUIRE(s.seq.frames.size() == 4);
    CHECK(s.ref_idx == s.seq.reference_index);
    CHECK(s.target_idx != s.ref_idx);
    REQUIRE(s.target_idx >= 0);
    REQUIRE(s.target_idx < 4);
    ++seen[static_cast<size_t>(s.target_idx)];
  }
  int distinct = 0;
  for (int i = 0; i < 4; ++i) distinct += seen[static_cast<size_t>(i)] > 0;
  CHECK(distinct >= 3);  // every non-reference frame appears
}

TEST_CASE("train checkpoints round-trip model and optimizer state") {
  auto dir = testutil::scratch_dir("train_ckpt");
  const TrainConfig cfg = tiny_train_config();
  auto model = XFactorModel<float>::init(cfg.model, cfg.seed);
  typename AdamW<float>::Hyper h;
  h.weight_decay = cfg.weight_decay;
  AdamW<float> opt(model.named_params(), h);

  // One real step so moments are nonzero.
  auto lb = training_step_loss(model, cfg, TrainStage::Stereo, 0);
  backward(lb.total);
  opt.step(1e-3);

  const auto path = (dir / "state.xfck").string();
  save_train_checkpoint(path, model, opt, cfg, 17);

  auto model2 = XFactorModel<float>::init(cfg.model, 999);
  AdamW<float> opt2(model2.named_params(), h);
  const int64_t step = load_train_checkpoint(path, model2, &opt2);
  CHECK(step == 17);
  CHECK(opt2.step_count() == opt.step_count());

  const auto pa = model.named_params(), pb = model2.named_params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) REQUIRE(pa[i].second.data() == pb[i].second.data());
  auto sa = opt.named_state(), sb = opt2.named_state();
  for (size_t i = 0; i < sa.size(); ++i) REQUIRE(*sa[i].second == *sb[i].second);

  // Checkpoint meta records the config hash.
  const auto ck = load_checkpoint(path);
  const auto meta = nlohmann::json::parse(ck.meta);
  CHECK(meta.at("config_hash").get<std::string>() == config_hash(cfg.to_json()));
}

TEST_CASE("training is bit-identical across reruns") {
  const TrainConfig cfg = tiny_train_config();
  auto d1 = testutil::scratch_dir("train_a");
  auto d2 = testutil::scratch_dir("train_b");
  const auto r1 = train_loop<float>(cfg, TrainStage::Stereo, d1.string());
  const auto r2 = train_loop<float>(cfg, TrainStage::Stereo, d2.string());
  CHECK(r1.final_step == cfg.total_steps);
  CHECK(r1.final_loss == r2.final_loss);
  CHECK(testutil::read_file(r1.final_checkpoint) == testutil::read_file(r2.final_checkpoint));
}

TEST_CASE("interrupted training resumes to the same final state") {
  const TrainConfig cfg = tiny_train_config();
  auto full_dir = testutil::scratch_dir("train_full");
  auto part_dir = testutil::scratch_dir("train_part");

  const auto full = train_loop<float>(cfg, TrainStage::Stereo, full_dir.string());

  const auto part = train_loop<float>(cfg, TrainStage::Stereo, part_dir.string(), "", "", 2);
  CHECK(part.final_step == 2);
  const auto resumed =
      train_loop<float>(cfg, TrainStage::Stereo, part_dir.string(), "", part.final_checkpoint);
  CHECK(resumed.final_step == cfg.total_steps);
  CHECK(testutil::read_file(full.final_checkpoint) ==
        testutil::read_file(resumed.final_checkpoint));
}

TEST_CASE("training log records the cosine schedule") {
  const TrainConfig cfg = tiny_train_config();
  auto dir = testutil::scratch_dir("train_log");
  train_loop<float>(cfg, TrainStage::Stereo, dir.string());

  std::ifstream log(dir / "logs" / "train_stereo.csv");
  std::string line;
  std::getline(log, line);
  CHECK(line == "step,total,l1,perceptual,lr,wall_ms");
  int rows = 0;
  while (std::getline(log, line)) {
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    REQUIRE(fields.size() == 6);
    const int64_t step = std::stoll(fields[0]);
    const double total = std::stod(fields[1]);
    const double lr = std::stod(fields[4]);
    CHECK(std::isfinite(total));
    CHECK(lr == Catch::Approx(cosine_lr(step, cfg.total_steps, cfg.lr_start, cfg.lr_end))
                    .epsilon(1e-6));
    ++rows;
  }
  CHECK(rows == cfg.total_steps);  // log_every = 1
}

TEST_CASE("multi-view fine-tuning widens the decoder and doubles the baseline") {
  TrainConfig cfg = tiny_train_config();
  cfg.data.sequence_length = 3;
  cfg.total_steps = 1;
  cfg.checkpoint_every = 1;

  auto stereo_dir = testutil::scratch_dir("ft_stereo");
  const auto stereo = train_loop<float>(cfg, TrainStage::Stereo, stereo_dir.string());

  auto ft_dir = testutil::scratch_dir("ft_multi");
  const auto ft = train_multiview<float>(cfg, stereo.final_checkpoint, ft_dir.string());
  CHECK(ft.final_step == 1);

  const auto ck = load_checkpoint(ft.final_checkpoint);
  const auto meta = nlohmann::json::parse(ck.meta);
  CHECK(meta.at("config").at("model").at("views_decoder").get<int>() == 2);
  CHECK(meta.at("config").at("data").at("baseline_max_deg").get<double>() ==
        Catch::Approx(cfg.data.baseline_max_deg * 2.0));
}
