#include <gtest/gtest.h>

#include <numeric>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "arflow/checkpoint.hpp"
#include "arflow/config.hpp"
#include "arflow/dataset.hpp"
#include "arflow/losses.hpp"
#include "arflow/optim.hpp"
#include "arflow/trainer.hpp"
#include "test_support.hpp"

namespace arflow {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

NetConfig tiny_net() {
  NetConfig n;
  n.width = 4;
  n.num_blocks = 1;
  n.embed_dim = 6;
  n.freq_bands = 2;
  n.init_seed = 3;
  return n;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.net = tiny_net();
  c.crop_size = 12;
  c.batch_size = 2;
  c.attn.grid = 4;
  c.seed = 9;
  return c;
}

template <typename T>
Batch<T> random_batch(std::size_t b, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {random_tensor<T>({b, 3, h, w}, rng), random_tensor<T>({b, 3, h, w}, rng)};
}

bool all_zero(std::span<const double> g) {
  for (double v : g)
    if (v != 0.0) return false;
  return true;
}

// ---------------------------------------------------------------- losses

TEST(TotalLoss, WeightedSum) {
  LossWeights w;
  LossParts<double> zero{Tensor<double>::scalar(0), Tensor<double>::scalar(0), Tensor<double>::scalar(0),
                         Tensor<double>::scalar(0)};
  EXPECT_EQ(total_loss(zero, w).item(), 0.0);
  LossParts<double> ones{Tensor<double>::scalar(1), Tensor<double>::scalar(1), Tensor<double>::scalar(1),
                         Tensor<double>::scalar(1)};
  LossLog log;
  EXPECT_NEAR(total_loss(ones, w, &log).item(), 2.11, 1e-12);
  EXPECT_NEAR(log.total, 2.11, 1e-12);
  EXPECT_EQ(log.cons, 1.0);
  LossWeights bad;
  bad.cond = -1;
  EXPECT_THROW(total_loss(ones, bad), ContractError);
}

TEST(TotalLoss, ZeroConsistencyWeightDropsItsGradient) {
  std::mt19937_64 rng(71);
  auto x = random_tensor<double>({5}, rng);
  x.set_requires_grad(true);
  auto grad_with = [&](double w_cons, bool include_cons) {
    x.zero_grad();
    Tape<double> tape;
    Tensor<double> root;
    {
      Tape<double>::Recording rec(tape);
      LossParts<double> p;
      p.flow = mean(mul(x, x));
      if (include_cons) p.cons = sum(x);
      LossWeights w;
      w.cons = w_cons;
      root = total_loss(p, w);
    }
    tape.backward(root);
    return std::vector<double>(x.grad().begin(), x.grad().end());
  };
  EXPECT_EQ(grad_with(0.0, true), grad_with(0.1, false));
  EXPECT_NE(grad_with(0.1, true), grad_with(0.1, false));
}

TEST(ConsistencyLoss, Identities) {
  std::mt19937_64 rng(72);
  auto r = random_tensor<double>({2, 3, 4, 4}, rng);
  auto z0 = random_tensor<double>({2, 3, 4, 4}, rng);
  auto v = random_tensor<double>({2, 3, 4, 4}, rng);
  EXPECT_EQ(consistency_loss(r, 1.0, v, r).item(), 0.0);
  for (double t : {0.0, 0.3, 0.9})
    EXPECT_NEAR(consistency_loss(sample_path(z0, r, t), t, target_field(z0, r), r).item(), 0.0, 1e-15);
}

TEST(ConsistencyLoss, HandComputedTwoElementCase) {
  Tensor<double> xt({1, 1, 1, 2}, {1.0, 2.0});
  Tensor<double> v({1, 1, 1, 2}, {2.0, -2.0});
  Tensor<double> r({1, 1, 1, 2}, {0.0, 0.0});
  // xt + 0.5 v = [2, 1]
  EXPECT_DOUBLE_EQ(consistency_loss(xt, 0.5, v, r).item(), 1.5);
  EXPECT_THROW(consistency_loss(xt, 0.5, Tensor<double>::zeros({1, 1, 2, 1}), r), ContractError);
}

TEST(FinalSupervision, ZeroNetOnConstantImage) {
  VFieldNet<double> net(tiny_net());
  for (auto& p : net.parameters())
    for (auto& v : p.value.mutable_data()) v = 0;
  for (double c : {0.4, -0.7}) {
    auto img = Tensor<double>::full({2, 3, 6, 5}, c);
    EXPECT_NEAR(final_supervision_loss(net, img, img, img, 1, 1.0).item(), std::abs(c), 1e-13);
  }
  // With down = 2 the low-resolution prediction is upsampled and the detail layer of a constant image is 0.
  auto img = Tensor<double>::full({1, 3, 8, 8}, 0.25);
  EXPECT_NEAR(final_supervision_loss(net, downsample(img, 2), img, img, 2, 1.0).item(), 0.25, 1e-13);
}

// Straight-line reimplementation: one item at a time, pyramid from plain
// resizes, squared error summed in loops.
double flow_loss_oracle(const VFieldNet<double>& net, const Batch<double>& batch, const ScaleSequence& seq,
                        Rng& rng) {
  const std::size_t B = batch.sharp.dim(0), S = seq.count();
  std::vector<Tensor<double>> sharp_s;
  for (std::size_t s = 0; s < S; ++s) sharp_s.push_back(bilinear_resize(batch.sharp, seq[s].height, seq[s].width));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double total = 0;
  for (std::size_t s = 0; s < S; ++s) {
    const std::size_t h = seq[s].height, w = seq[s].width, n = 3 * h * w;
    Tensor<double> prev = s == 0 ? Tensor<double>::zeros({B, 3, h, w}) : bilinear_resize(sharp_s[s - 1], h, w);
    Tensor<double> blur_s = bilinear_resize(batch.blur, h, w);
    std::vector<double> t(B);
    for (auto& v : t) v = unif(rng);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> z0(B * n);
    for (auto& v : z0) v = normal(rng);
    double se = 0;
    for (std::size_t b = 0; b < B; ++b) {
      std::vector<double> xt(n), r(n);
      for (std::size_t i = 0; i < n; ++i) {
        r[i] = sharp_s[s].data()[b * n + i] - prev.data()[b * n + i];
        xt[i] = (1 - t[b]) * z0[b * n + i] + t[b] * r[i];
      }
      auto item = [&](const Tensor<double>& x) {
        return Tensor<double>({1, 3, h, w}, std::vector<double>(x.data().begin() + b * n, x.data().begin() + (b + 1) * n));
      };
      auto v = net.forward(Tensor<double>({1, 3, h, w}, xt), item(blur_s), item(prev), t[b],
                           scale_scalar(s + 1, S));
      for (std::size_t i = 0; i < n; ++i) {
        const double d = v.data()[i] - (r[i] - z0[b * n + i]);
        se += d * d;
      }
    }
    total += se / static_cast<double>(B * n);
  }
  return total / static_cast<double>(S);
}

TEST(FlowLoss, MatchesStraightLineOracle) {
  VFieldNet<double> net(tiny_net());
  auto batch = random_batch<double>(2, 9, 11, 73);
  auto seq = build_scale_sequence(9, 11);
  ASSERT_GE(seq.count(), 2u);
  std::vector<std::size_t> all(seq.count());
  std::iota(all.begin(), all.end(), std::size_t{0});
  Rng a(5), b(5);
  const double got = flow_loss(net, batch.blur, batch.sharp, seq, all, a).loss.item();
  EXPECT_NEAR(got, flow_loss_oracle(net, batch, seq, b), 1e-6);
  EXPECT_GE(got, 0.0);
  Rng c(5);
  EXPECT_EQ(flow_loss(net, batch.blur, batch.sharp, seq, all, c).loss.item(), got);
}

TEST(FlowLoss, TeacherForcingUsesGroundTruth) {
  VFieldNet<double> net(tiny_net());
  auto batch = random_batch<double>(2, 20, 17, 74);
  auto seq = build_scale_sequence(20, 17);
  std::vector<std::size_t> all;
  for (std::size_t s = 0; s < seq.count(); ++s) all.push_back(s);
  std::size_t calls = 0;
  TeacherHook<double> hook = [&](std::size_t s, const Tensor<double>& prev_up) {
    ++calls;
    if (s == 0) {
      for (double v : prev_up.data()) EXPECT_EQ(v, 0.0);
      return;
    }
    auto gt = bilinear_resize(bilinear_resize(batch.sharp, seq[s - 1].height, seq[s - 1].width), seq[s].height,
                              seq[s].width);
    EXPECT_EQ(prev_up.values(), gt.values()) << "scale " << s;
  };
  Rng rng(1);
  flow_loss(net, batch.blur, batch.sharp, seq, all, rng, hook);
  EXPECT_EQ(calls, seq.count());
}

// ------------------------------------------------------------ optimizer

TEST(ClipGradNorm, ScalesToMaxNorm) {
  std::vector<float> a{6, 0}, b{0, 8};  // norm 10
  const double before = clip_grad_norm<float>({std::span<float>(a), std::span<float>(b)}, 1.0);
  EXPECT_NEAR(before, 10.0, 1e-6);
  EXPECT_NEAR(std::hypot(a[0], b[1]), 1.0, 1e-6);
  std::vector<float> small{0.3f, 0.4f};
  clip_grad_norm<float>({std::span<float>(small)}, 1.0);
  EXPECT_EQ(small, (std::vector<float>{0.3f, 0.4f}));
}

TEST(AdamW, FirstStepAndDecoupledDecay) {
  VFieldNet<double> net(tiny_net());
  auto& ps = net.parameters();
  std::vector<std::vector<double>> before;
  for (auto& p : ps) before.emplace_back(p.value.data().begin(), p.value.data().end());
  for (auto& p : ps) {
    auto g = p.value.mutable_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (i % 3 == 0) ? 0.5 : -2.0;
  }
  AdamW<double> opt(ps, {0.01, 0.9, 0.999, 1e-8, 0.0});
  opt.step(ps);
  for (std::size_t k = 0; k < ps.size(); ++k)
    for (std::size_t i = 0; i < before[k].size(); ++i) {
      const double g = (i % 3 == 0) ? 0.5 : -2.0;
      EXPECT_NEAR(ps[k].value.data()[i], before[k][i] - 0.01 * g / (std::abs(g) + 1e-8), 1e-12);
    }

  VFieldNet<double> decay_net(tiny_net());
  auto& dp = decay_net.parameters();
  for (auto& p : dp) p.value.mutable_grad();  // all-zero gradients
  AdamW<double> wd(dp, {0.1, 0.9, 0.999, 1e-8, 0.5});
  std::vector<double> w0(dp[0].value.data().begin(), dp[0].value.data().end());
  wd.step(dp);
  for (std::size_t i = 0; i < w0.size(); ++i) EXPECT_NEAR(dp[0].value.data()[i], w0[i] * (1 - 0.1 * 0.5), 1e-15);
}

TEST(Ema, ClosedFormGeometricDecay) {
  VFieldNet<double> net(tiny_net());
  NetConfig other = tiny_net();
  other.init_seed = 99;
  VFieldNet<double> seed_net(other);
  VFieldNet<double> shadow(tiny_net());
  shadow.copy_values_from(seed_net);
  for (int k = 1; k <= 300; ++k) ema_update(shadow, net, 0.999);
  const double f = std::pow(0.999, 300);
  for (std::size_t p = 0; p < net.parameters().size(); ++p)
    for (std::size_t i = 0; i < net.parameters()[p].value.numel(); ++i) {
      const double pv = net.parameters()[p].value.data()[i], s0 = seed_net.parameters()[p].value.data()[i];
      EXPECT_NEAR(shadow.parameters()[p].value.data()[i], pv + (s0 - pv) * f, 1e-7);
    }
}

// ------------------------------------------------------------ train step

TEST(TrainStep, EveryParameterReceivesGradient) {
  TrainConfig cfg = tiny_train();
  VFieldNet<double> net(cfg.net);
  net.set_requires_grad(true);
  auto batch = random_batch<double>(2, 12, 12, 75);
  Rng rng(2);
  Tape<double> tape;
  Tensor<double> loss;
  {
    Tape<double>::Recording rec(tape);
    loss = compute_losses(net, batch, cfg, rng, nullptr, nullptr);
  }
  tape.backward(loss);
  for (const auto& p : net.parameters()) {
    ASSERT_TRUE(p.value.has_grad()) << p.name;
    EXPECT_FALSE(all_zero(p.value.grad())) << p.name;
  }
}

TEST(TrainStep, CondPenaltyOncePerStepOnFinestScale) {
  TrainConfig cfg = tiny_train();
  cfg.attn.max_images = 1;
  TrainState<float> st(cfg);
  auto batch = random_batch<float>(3, 12, 12, 76);
  StepResult r = train_step(st, batch);
  EXPECT_EQ(r.cond.images, 1u);
  EXPECT_EQ(r.cond.kappas.size(), 1u);
  EXPECT_TRUE(r.log.cond_enabled);

  cfg.weights.cond = 0;
  TrainState<float> off(cfg);
  StepResult r2 = train_step(off, batch);
  EXPECT_EQ(r2.cond.images, 0u);
  EXPECT_FALSE(r2.log.cond_enabled);
}

TEST(TrainStep, DisablingTermsChangesLogs) {
  auto batch = random_batch<float>(2, 12, 12, 77);
  TrainConfig cfg = tiny_train();
  TrainState<float> a(cfg);
  cfg.weights.cons = 0;
  TrainState<float> b(cfg);
  const LossLog la = train_step(a, batch).log, lb = train_step(b, batch).log;
  EXPECT_TRUE(la.cons_enabled);
  EXPECT_FALSE(lb.cons_enabled);
  EXPECT_GT(la.cons, 0.0);
  EXPECT_EQ(lb.cons, 0.0);
  EXPECT_EQ(la.flow, lb.flow);
  EXPECT_NE(la.total, lb.total);
}

TEST(TrainStep, SeededRunsAreBitIdentical) {
  auto run = [] {
    TrainState<float> st(tiny_train());
    std::vector<double> losses;
    for (int i = 0; i < 10; ++i) losses.push_back(train_step(st, random_batch<float>(2, 12, 12, 78 + i)).log.total);
    return std::make_pair(serialize_checkpoint(st), losses);
  };
  auto [ca, la] = run();
  auto [cb, lb] = run();
  EXPECT_EQ(la, lb);
  EXPECT_EQ(ca, cb);
}

TEST(TrainStep, NonFiniteLossAbortsAndKeepsParameters) {
  TrainState<float> st(tiny_train());
  auto batch = random_batch<float>(2, 12, 12, 79);
  batch.sharp.mutable_data()[5] = std::nanf("");
  const auto before = serialize_checkpoint(st);
  StepResult r = train_step(st, batch);
  EXPECT_TRUE(r.aborted);
  EXPECT_EQ(st.step, 0u);
  TrainState<float> copy = deserialize_checkpoint(before, "copy");
  for (std::size_t k = 0; k < st.net.parameters().size(); ++k)
    EXPECT_EQ(st.net.parameters()[k].value.values(), copy.net.parameters()[k].value.values());
}

TEST(TrainStep, StepUpdatesParametersAndEma) {
  TrainState<float> st(tiny_train());
  const auto p0 = st.net.param("head.weight").values();
  const StepResult r = train_step(st, random_batch<float>(2, 12, 12, 80));
  EXPECT_FALSE(r.aborted);
  EXPECT_EQ(st.step, 1u);
  EXPECT_GT(r.grad_norm, 0.0);
  const auto& p1 = st.net.param("head.weight").values();
  const auto& e1 = st.ema.param("head.weight").values();
  EXPECT_NE(p1, p0);
  for (std::size_t i = 0; i < p1.size(); ++i)
    EXPECT_NEAR(e1[i], 0.999 * p0[i] + 0.001 * p1[i], 1e-7);
}

TEST(TrainStep, FinalSupervisionOverfitsOneImage) {
  TrainConfig cfg = tiny_train();
  cfg.net.width = 8;
  cfg.weights = {0.0, 1.0, 0.0, 0.0};
  cfg.learning_rate = 5e-3;
  TrainState<float> st(cfg);
  auto batch = random_batch<float>(1, 16, 16, 81);
  double first = 0, last = 0;
  for (int i = 0; i < 200; ++i) {
    const double l = train_step(st, batch).log.final;
    if (i == 0) first = l;
    last = l;
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(TrainStep, SampledScaleMode) {
  TrainConfig cfg = tiny_train();
  cfg.sample_scale = true;
  TrainState<float> st(cfg);
  for (int i = 0; i < 5; ++i) EXPECT_FALSE(train_step(st, random_batch<float>(2, 12, 12, 82 + i)).aborted);
}

TEST(PlannedSteps, StepsOverrideEpochs) {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 3;
  EXPECT_EQ(planned_steps(cfg, 20), 9u);
  cfg.steps = 5;
  EXPECT_EQ(planned_steps(cfg, 20), 5u);
}

// --------------------------------------------------------------- dataset

fs::path scratch_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "arflow_training_test" / name;
  fs::remove_all(d);
  fs::create_directories(d / "blur");
  fs::create_directories(d / "sharp");
  return d;
}

Image ramp_image(std::size_t w, std::size_t h, int offset) {
  Image img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<std::uint8_t>((x * 7 + y * 13 + c * 50 + offset) % 256);
  return img;
}

TEST(Dataset, ScanMatchesByFilename) {
  const fs::path root = scratch_dir("scan");
  write_png(ramp_image(16, 16, 0), root / "blur" / "b.png");
  write_png(ramp_image(16, 16, 1), root / "sharp" / "b.png");
  write_ppm(ramp_image(16, 16, 2), root / "blur" / "a.ppm");
  write_ppm(ramp_image(16, 16, 3), root / "sharp" / "a.ppm");
  std::ofstream(root / "blur" / "notes.txt") << "ignored";
  auto idx = DatasetIndex::scan(root);
  ASSERT_EQ(idx.pairs.size(), 2u);
  EXPECT_EQ(idx.pairs[0].blur.filename(), "a.ppm");
  EXPECT_EQ(idx.pairs[0].sharp, root / "sharp" / "a.ppm");
  auto loaded = load_pairs(idx);
  EXPECT_EQ(loaded[1].sharp, ramp_image(16, 16, 1));
}

TEST(Dataset, BrokenLayoutsRaiseDataError) {
  const fs::path missing = scratch_dir("missing");
  write_png(ramp_image(8, 8, 0), missing / "blur" / "x.png");
  EXPECT_THROW(DatasetIndex::scan(missing), DataError);

  const fs::path mismatch = scratch_dir("mismatch");
  write_png(ramp_image(8, 8, 0), mismatch / "blur" / "x.png");
  write_png(ramp_image(9, 8, 0), mismatch / "sharp" / "x.png");
  EXPECT_THROW(load_pairs(DatasetIndex::scan(mismatch)), DataError);

  EXPECT_THROW(DatasetIndex::scan(fs::temp_directory_path() / "arflow_no_such_dataset"), DataError);
}

TEST(Augment, SmallImageNamesTheFile) {
  std::vector<LoadedPair> pairs{{"tiny.png", ramp_image(8, 8, 0), ramp_image(8, 8, 0)}};
  TrainConfig cfg;
  cfg.crop_size = 12;
  Rng rng(1);
  try {
    load_and_augment<float>(pairs, {0}, cfg, rng);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("tiny.png"), std::string::npos);
  }
}

TEST(Augment, FlipTwiceIsIdentityAndPairsStayAligned) {
  const Image img = ramp_image(10, 10, 5);
  std::vector<float> once(3 * 100), twice(3 * 100), plain(3 * 100);
  CropSpec flip{0, 0, 10, true, true}, none{0, 0, 10, false, false};
  crop_flip_into(img, flip, once, 0);
  crop_flip_into(img, none, plain, 0);
  Image flipped(10, 10);
  for (std::size_t y = 0; y < 10; ++y)
    for (std::size_t x = 0; x < 10; ++x)
      for (std::size_t c = 0; c < 3; ++c) flipped.at(y, x, c) = img.at(9 - y, 9 - x, c);
  crop_flip_into(flipped, flip, twice, 0);
  EXPECT_EQ(twice, plain);
  EXPECT_NE(once, plain);

  // Same draw for blur and sharp: an identical pair stays identical.
  std::vector<LoadedPair> pairs{{"p", ramp_image(20, 18, 1), ramp_image(20, 18, 1)}};
  TrainConfig cfg;
  cfg.crop_size = 8;
  Rng rng(4);
  for (int i = 0; i < 10; ++i) {
    auto b = load_and_augment<float>(pairs, {0}, cfg, rng);
    EXPECT_EQ(b.blur.values(), b.sharp.values());
    for (float v : b.blur.values()) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Augment, SeededCropsAreReproducible) {
  std::vector<LoadedPair> pairs{{"p", ramp_image(30, 25, 0), ramp_image(30, 25, 9)}};
  TrainConfig cfg;
  cfg.crop_size = 10;
  Rng a(8), b(8);
  for (int i = 0; i < 5; ++i) {
    const CropSpec x = random_crop(pairs[0], cfg, a), y = random_crop(pairs[0], cfg, b);
    EXPECT_EQ(x.y0, y.y0);
    EXPECT_EQ(x.x0, y.x0);
    EXPECT_EQ(x.flip_h, y.flip_h);
    EXPECT_LE(x.y0 + 10, 25u);
    EXPECT_LE(x.x0 + 10, 30u);
  }
}

TEST(BatchSamplerTest, CoversEachItemOncePerEpoch) {
  BatchSampler s(7);
  Rng rng(3);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7; ++i) ++seen[s.next(1, rng)[0]];
  EXPECT_EQ(seen, std::vector<int>(7, 1));
}

// ------------------------------------------------------------ checkpoint

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TrainConfig cfg = tiny_train();
  cfg.learning_rate = 3.3e-4;
  TrainState<float> st(cfg);
  for (int i = 0; i < 3; ++i) train_step(st, random_batch<float>(2, 12, 12, 90 + i));
  const fs::path p = fs::temp_directory_path() / "arflow_ckpt_roundtrip.bin";
  save_checkpoint(st, p);
  TrainState<float> back = load_checkpoint(p);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(st));
  EXPECT_EQ(back.step, 3u);
  EXPECT_EQ(back.cfg.learning_rate, 3.3e-4);
  EXPECT_EQ(back.cfg.net, cfg.net);
  for (std::size_t k = 0; k < st.net.parameters().size(); ++k) {
    EXPECT_EQ(back.net.parameters()[k].value.values(), st.net.parameters()[k].value.values());
    EXPECT_EQ(back.ema.parameters()[k].value.values(), st.ema.parameters()[k].value.values());
  }
  // Resuming continues exactly where the original would have.
  const auto batch = random_batch<float>(2, 12, 12, 99);
  EXPECT_EQ(train_step(back, batch).log.total, train_step(st, batch).log.total);
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(st));
}

TEST(Checkpoint, CorruptionAndVersionMismatch) {
  TrainState<float> st(tiny_train());
  auto bytes = serialize_checkpoint(st);

  auto bad_version = bytes;
  bad_version[8] = 7;
  EXPECT_THROW(deserialize_checkpoint(bad_version, "v"), CheckpointVersionError);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    deserialize_checkpoint(bad_magic, "m");
    FAIL();
  } catch (const CheckpointVersionError&) {
    FAIL() << "magic error reported as version error";
  } catch (const CheckpointError&) {
  }

  auto truncated = bytes;
  truncated.resize(bytes.size() / 2);
  EXPECT_THROW(deserialize_checkpoint(truncated, "t"), CheckpointError);

  auto trailing = bytes;
  trailing.push_back(0);
  EXPECT_THROW(deserialize_checkpoint(trailing, "x"), CheckpointError);

  EXPECT_THROW(load_checkpoint(fs::temp_directory_path() / "arflow_no_such.ckpt"), CheckpointError);
}

TEST(Checkpoint, TensorsAreLittleEndianFloat32) {
  TrainState<float> st(tiny_train());
  const auto bytes = serialize_checkpoint(st);
  // Header: magic, version, config block, step, parameter count, then the first tensor record.
  std::size_t pos = 8;
  auto u32 = [&] {
    std::uint32_t v = bytes[pos] | bytes[pos + 1] << 8 | bytes[pos + 2] << 16 | static_cast<std::uint32_t>(bytes[pos + 3]) << 24;
    pos += 4;
    return v;
  };
  EXPECT_EQ(u32(), kCheckpointVersion);
  pos += u32();  // config text
  pos += 8;      // step
  EXPECT_EQ(u32(), st.net.parameters().size());
  const std::uint32_t name_len = u32();
  EXPECT_EQ(std::string(bytes.begin() + pos, bytes.begin() + pos + name_len), "embed.fc1.weight");
  pos += name_len;
  EXPECT_EQ(u32(), 2u);
  pos += 16;  // dims
  const float first = std::bit_cast<float>(u32());
  EXPECT_EQ(first, st.net.param("embed.fc1.weight").data()[0]);
}

// ---------------------------------------------------------------- config

TEST(Config, ParsesFlatKeyValueText) {
  const TrainConfig c = parse_train_config(
      "# desk run\n"
      "learning_rate = 1e-3\n"
      "  batch_size=2   # inline comment\n"
      "\n"
      "w_cons = 0\n"
      "width = 16\n"
      "sample_scale = true\n");
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.batch_size, 2u);
  EXPECT_EQ(c.weights.cons, 0.0);
  EXPECT_EQ(c.net.width, 16u);
  EXPECT_TRUE(c.sample_scale);
  EXPECT_EQ(c.weights.flow, 1.0);

  const InferenceConfig ic = parse_inference_config("schedule = 4,2,1\ndown = 2\nema_weights = false\n");
  EXPECT_EQ(ic.schedule, (std::vector<int>{4, 2, 1}));
  EXPECT_EQ(ic.down, 2u);
  EXPECT_FALSE(ic.ema_weights);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(parse_train_config("learning_rat = 1\n"), ContractError);
  EXPECT_THROW(parse_train_config("batch_size = two\n"), ContractError);
  EXPECT_THROW(parse_train_config("just words\n"), ContractError);
  EXPECT_THROW(parse_train_config("learning_rate = 0\n"), ContractError);
  EXPECT_THROW(parse_train_config("crop_size = 6\n"), ContractError);
  EXPECT_THROW(parse_inference_config("alpha = 3\n"), ContractError);
  EXPECT_THROW(parse_inference_config("schedule = 4,0\n"), ContractError);
}

TEST(Config, TextRoundTrip) {
  TrainConfig c;
  c.learning_rate = 1.0 / 3.0;
  c.seed = 123456789012345ull;
  c.attn.kappa_thr = 250;
  c.net.embed_dim = 12;
  const TrainConfig back = parse_train_config(to_text(c));
  EXPECT_EQ(to_text(back), to_text(c));
  EXPECT_EQ(back.learning_rate, c.learning_rate);
  EXPECT_EQ(back.seed, c.seed);
}

TEST(Config, SuggestedDownsampleFactor) {
  EXPECT_EQ(suggested_down(2160, 3840), 2u);
  EXPECT_EQ(suggested_down(2159, 3840), 1u);
  EXPECT_EQ(suggested_down(48, 48), 1u);
}

}  // namespace
}  // namespace arflow
