#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "mdd/trainer.hpp"
#include "test_support.hpp"

namespace mdd {
namespace {

Dataset small_dataset(double sup, int n = 60, std::uint64_t seed = 7) {
  DatasetSpec spec;
  spec.mode = ViewMode::kVector;
  spec.n_points = n;
  spec.sup_fraction = sup;
  spec.seed = seed;
  return generate_dataset(spec);
}

std::vector<int> all_indices(const Dataset& ds) {
  std::vector<int> out(ds.points.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i);
  return out;
}

ModelConfig small_arch(bool code) {
  ModelConfig c = ModelConfig::vector_defaults();
  c.base_width = 16;
  c.time_embed_dim = 16;
  c.sinusoid_dim = 16;
  c.condition_code = code;
  return c;
}

TEST(Schemes, LabelsRoundTrip) {
  for (const char* label : {"MDD", "UMM-CSGM-N", "UMM-CSGM-O", "NoisyCond-N", "NoisyCond-O"}) {
    EXPECT_EQ(parse_scheme_label(label).label(), label);
  }
  EXPECT_THROW(parse_scheme_label("MDD-O"), std::invalid_argument);
}

TEST(Schemes, MddRejectsMinusOneFill) {
  TrainingScheme s = TrainingScheme::mdd();
  EXPECT_NO_THROW(s.validate());
  s.fill = FillPolicy::kMinusOne;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  EXPECT_TRUE(TrainingScheme::umm_csgm(FillPolicy::kPureNoise).uses_condition_code());
  EXPECT_FALSE(TrainingScheme::noisy_cond(FillPolicy::kPureNoise).uses_condition_code());
}

TEST(MakeBatch, PlaceholdersAreNaN) {
  const Dataset ds = small_dataset(0.4);
  const auto batch = make_batch(ds, all_indices(ds));
  for (int n = 0; n < batch.batch_size(); ++n) {
    const DataPoint& p = ds.points[static_cast<std::size_t>(n)];
    for (int d = 0; d < 3; ++d) {
      EXPECT_EQ(batch.available(n, d), p.sup_mask[static_cast<std::size_t>(d)] != 0);
      const float v = batch.x0[static_cast<std::size_t>(d)][static_cast<std::size_t>(n) * 8];
      if (batch.available(n, d)) {
        EXPECT_EQ(v, p.views[static_cast<std::size_t>(d)][0]);
      } else {
        EXPECT_TRUE(std::isnan(v));
      }
    }
  }
}

TEST(PrepareStep, MddNoisesAvailableSlotsAndFillsMissingWithNoise) {
  const Dataset ds = small_dataset(0.0);
  const auto batch = make_batch(ds, all_indices(ds));
  const NoiseSchedule s = make_linear_schedule();
  Rng rng(1);
  const auto step = prepare_step(TrainingScheme::mdd(), batch, s, rng);
  for (int n = 0; n < batch.batch_size(); ++n) {
    for (int d = 0; d < 3; ++d) {
      const auto ud = static_cast<std::size_t>(d);
      const int t = step.input.tvec[static_cast<std::size_t>(n)][ud];
      EXPECT_EQ(step.loss_mask[static_cast<std::size_t>(n) * 3 + ud], 1.0f);
      for (std::size_t i = 0; i < 8; ++i) {
        const std::size_t k = static_cast<std::size_t>(n) * 8 + i;
        const float x = step.input.x[ud][k];
        const float e = step.target[ud][k];
        if (!batch.available(n, d)) {
          EXPECT_EQ(t, 1000);
          EXPECT_EQ(x, e);
        } else {
          const NoiseCoefficients c = coefficients_at(s, t);
          EXPECT_NEAR(x, c.signal * batch.x0[ud][k] + c.noise * e, 1e-5);
        }
      }
    }
  }
}

TEST(PrepareStep, SupervisedOnlyScopeSkipsMissingSlots) {
  const Dataset ds = small_dataset(0.0);
  const auto batch = make_batch(ds, all_indices(ds));
  Rng rng(2);
  const auto step = prepare_step(TrainingScheme::mdd(LossScope::kSupervisedOnly), batch, make_linear_schedule(), rng);
  for (int n = 0; n < batch.batch_size(); ++n) {
    for (int d = 0; d < 3; ++d) {
      EXPECT_EQ(step.loss_mask[static_cast<std::size_t>(n) * 3 + static_cast<std::size_t>(d)],
                batch.available(n, d) ? 1.0f : 0.0f);
    }
  }
}

TEST(PrepareStep, ZeroTimestepOverrideKeepsCleanInput) {
  const Dataset ds = small_dataset(1.0, 10);
  const auto batch = make_batch(ds, all_indices(ds));
  NoiseOverrides ov;
  ov.timesteps = std::vector<int>{0, 0, 0};
  Rng rng(3);
  const auto step = prepare_step(TrainingScheme::mdd(), batch, make_linear_schedule(), rng, ov);
  for (int d = 0; d < 3; ++d) EXPECT_EQ(step.input.x[static_cast<std::size_t>(d)], batch.x0[static_cast<std::size_t>(d)]);
}

TEST(PrepareStep, SameSeedSameStep) {
  const Dataset ds = small_dataset(0.4);
  const auto batch = make_batch(ds, all_indices(ds));
  Rng a(9);
  Rng b(9);
  const auto sa = prepare_step(TrainingScheme::umm_csgm(FillPolicy::kPureNoise), batch, make_linear_schedule(), a);
  const auto sb = prepare_step(TrainingScheme::umm_csgm(FillPolicy::kPureNoise), batch, make_linear_schedule(), b);
  EXPECT_EQ(sa.input.x, sb.input.x);
  EXPECT_EQ(sa.input.tvec, sb.input.tvec);
  EXPECT_EQ(sa.input.codes, sb.input.codes);
  EXPECT_EQ(sa.target, sb.target);
}

TEST(PrepareStep, UmmConditionsAreCleanAndUnscored) {
  const Dataset ds = small_dataset(0.4);
  const auto batch = make_batch(ds, all_indices(ds));
  for (FillPolicy fill : {FillPolicy::kPureNoise, FillPolicy::kMinusOne}) {
    Rng rng(4);
    const auto step = prepare_step(TrainingScheme::umm_csgm(fill), batch, make_linear_schedule(), rng);
    for (int n = 0; n < batch.batch_size(); ++n) {
      std::set<int> target_t;
      for (int d = 0; d < 3; ++d) {
        const auto ud = static_cast<std::size_t>(d);
        const std::size_t slot = static_cast<std::size_t>(n) * 3 + ud;
        const int t = step.input.tvec[static_cast<std::size_t>(n)][ud];
        const float first = step.input.x[ud][static_cast<std::size_t>(n) * 8];
        if (!batch.available(n, d)) {
          EXPECT_EQ(t, 1000);
          EXPECT_EQ(step.input.codes[slot], 0);
          EXPECT_EQ(step.loss_mask[slot], 0.0f);
          if (fill == FillPolicy::kMinusOne) {
            EXPECT_EQ(first, -1.0f);
          }
          if (fill == FillPolicy::kPureNoise) {
            EXPECT_EQ(first, step.target[ud][static_cast<std::size_t>(n) * 8]);
          }
        } else if (step.input.codes[slot]) {
          EXPECT_EQ(t, 0);
          EXPECT_EQ(step.loss_mask[slot], 0.0f);
          EXPECT_EQ(first, batch.x0[ud][static_cast<std::size_t>(n) * 8]);
        } else {
          EXPECT_EQ(step.loss_mask[slot], 1.0f);
          target_t.insert(t);
        }
      }
      EXPECT_EQ(target_t.size(), 1u) << "every sample has exactly one shared target level";
    }
  }
}

TEST(PrepareStep, NoisyCondSharesOneTimestep) {
  const Dataset ds = small_dataset(1.0, 20);
  const auto batch = make_batch(ds, all_indices(ds));
  Rng rng(5);
  const auto step = prepare_step(TrainingScheme::noisy_cond(FillPolicy::kPureNoise), batch, make_linear_schedule(), rng);
  EXPECT_TRUE(step.input.codes.empty());
  for (const auto& tv : step.input.tvec) {
    EXPECT_EQ(tv[0], tv[1]);
    EXPECT_EQ(tv[1], tv[2]);
    EXPECT_GE(tv[0], 1);
  }
}

TEST(ConditionSubset, UniformOverProperSubsets) {
  Rng rng(6);
  const std::vector<std::uint8_t> all{1, 1, 1};
  std::map<std::vector<std::uint8_t>, int> counts;
  const int draws = 6000;
  for (int i = 0; i < draws; ++i) counts[sample_condition_subset(all, rng)]++;
  EXPECT_EQ(counts.size(), 6u);
  for (const auto& [subset, count] : counts) {
    int ones = 0;
    for (auto v : subset) ones += v;
    EXPECT_GE(ones, 1);
    EXPECT_LE(ones, 2);
    EXPECT_NEAR(count, draws / 6.0, 4.0 * std::sqrt(draws / 6.0));
  }
  const std::vector<std::uint8_t> pair{1, 0, 1};
  for (int i = 0; i < 50; ++i) {
    const auto c = sample_condition_subset(pair, rng);
    EXPECT_EQ(c[1], 0);
    EXPECT_EQ(c[0] + c[2], 1);
  }
  const std::vector<std::uint8_t> single{0, 1, 0};
  EXPECT_EQ(sample_condition_subset(single, rng), (std::vector<std::uint8_t>{0, 0, 0}));
}

TEST(TrainingStep, ConditionCodeMustMatchScheme) {
  const Dataset ds = small_dataset(1.0, 8);
  const auto batch = make_batch(ds, all_indices(ds));
  const DenoiserModel<float> plain(small_arch(false), 1);
  Rng rng(7);
  EXPECT_THROW(ummcsgm_training_step(batch, plain, make_linear_schedule(), rng, FillPolicy::kPureNoise),
               std::invalid_argument);
  const auto lg = mdd_training_step(batch, plain, make_linear_schedule(), rng);
  EXPECT_TRUE(std::isfinite(lg.loss));
  EXPECT_EQ(lg.gradients.size(), plain.parameters().size());
}

TEST(Validation, HoldOutIsStableAndNearFraction) {
  int held = 0;
  for (std::size_t i = 0; i < 20000; ++i) {
    const bool v = is_validation_point(3, i, 0.05);
    EXPECT_EQ(v, is_validation_point(3, i, 0.05));
    held += v ? 1 : 0;
  }
  EXPECT_NEAR(held / 20000.0, 0.05, 0.006);
  EXPECT_FALSE(is_validation_point(3, 0, 0.0));
}

TrainConfig quick_config(const TrainingScheme& scheme, long steps) {
  TrainConfig tc;
  tc.scheme = scheme;
  tc.max_steps = steps;
  tc.batch_size = 16;
  tc.adam.lr = 1e-3;
  tc.seed = 4;
  tc.validation_fraction = 0.1;
  return tc;
}

TEST(Train, LossDecreasesAndHonoursMaxSteps) {
  const Dataset ds = small_dataset(0.4, 200);
  const NoiseSchedule s = make_linear_schedule();
  DenoiserModel<float> model(small_arch(false), 2);
  const TrainResult r = train(quick_config(TrainingScheme::mdd(), 150), ds, model, s);
  EXPECT_EQ(r.steps, 150);
  std::vector<double> validation;
  long last_step = 0;
  for (const auto& rec : r.curve) {
    if (rec.split == "validation") validation.push_back(rec.loss);
    if (rec.split == "train") last_step = rec.step;
  }
  EXPECT_EQ(last_step, 150);
  ASSERT_GE(validation.size(), 3u);
  EXPECT_LT(*std::min_element(validation.begin(), validation.end()), validation.front());
  EXPECT_EQ(r.best_loss, *std::min_element(validation.begin(), validation.end()));
}

TEST(Train, BitReproducible) {
  const Dataset ds = small_dataset(0.4, 80);
  const NoiseSchedule s = make_linear_schedule();
  for (const char* label : {"MDD", "UMM-CSGM-O", "NoisyCond-N"}) {
    const TrainingScheme scheme = parse_scheme_label(label);
    DenoiserModel<float> a(small_arch(scheme.uses_condition_code()), 3);
    DenoiserModel<float> b(small_arch(scheme.uses_condition_code()), 3);
    const TrainResult ra = train(quick_config(scheme, 12), ds, a, s);
    const TrainResult rb = train(quick_config(scheme, 12), ds, b, s);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      EXPECT_EQ(a.parameters()[i].value, b.parameters()[i].value) << label;
      EXPECT_EQ(ra.best.parameters()[i].value, rb.best.parameters()[i].value) << label;
    }
  }
}

TEST(Train, NonFiniteLossIsReported) {
  const Dataset ds = small_dataset(1.0, 40);
  DenoiserModel<float> model(small_arch(false), 5);
  model.parameters().back().value.fill(std::nanf(""));
  try {
    train(quick_config(TrainingScheme::mdd(), 5), ds, model, make_linear_schedule());
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("MDD"), std::string::npos);
  }
}

TEST(Train, RejectsMismatchedSetups) {
  const Dataset ds = small_dataset(1.0, 20);
  DenoiserModel<float> model(small_arch(false), 5);
  TrainConfig tc = quick_config(TrainingScheme::mdd(), 0);
  EXPECT_THROW(train(tc, ds, model, make_linear_schedule()), std::invalid_argument);
  EXPECT_THROW(train(quick_config(TrainingScheme::umm_csgm(FillPolicy::kPureNoise), 2), ds, model,
                     make_linear_schedule()),
               std::invalid_argument);
  EXPECT_THROW(train(quick_config(TrainingScheme::mdd(), 2), ds, model, make_linear_schedule(100)),
               std::invalid_argument);
}

TEST(Train, LossCurveCsv) {
  const std::vector<LossRecord> curve{{1, 1, "train", 0.5, 1e-3}, {1, 1, "validation", 0.25, 1e-3}};
  EXPECT_EQ(loss_curve_csv(curve, "MDD"), "step,epoch,scheme,split,loss,lr\n1,1,MDD,train,0.5,0.001\n"
                                          "1,1,MDD,validation,0.25,0.001\n");
}

}  // namespace
}  // namespace mdd
