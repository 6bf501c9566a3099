#include <gtest/gtest.h>

#include <vector>

#include "randprune/schedule.hpp"

using namespace randprune;

TEST(MasksCount, DecreaseUsesPrunedCount) {
  EXPECT_EQ(masks_count(RandomnessSchedule::decrease, 0.01, 10000, 0.83), 83u);
}

TEST(MasksCount, IncreaseUsesKeptCount) {
  EXPECT_EQ(masks_count(RandomnessSchedule::increase, 0.01, 10000, 0.83), 17u);
}

TEST(MasksCount, ClampsToOne) {
  EXPECT_EQ(masks_count(RandomnessSchedule::decrease, 5e-5, 10000, 0.54), 1u);
  EXPECT_EQ(masks_count(RandomnessSchedule::increase, 5e-5, 64, 0.9375), 1u);
}

TEST(MasksCount, RejectsOutOfRangeArguments) {
  EXPECT_THROW(masks_count(RandomnessSchedule::decrease, 0.01, 100, 1.0), Error);
  EXPECT_THROW(masks_count(RandomnessSchedule::decrease, 0.0, 100, 0.5), Error);
  EXPECT_THROW(masks_count(RandomnessSchedule::decrease, 0.01, 1, 0.5), Error);
}

TEST(MasksCount, MonotoneInSparsity) {
  for (double sr : {1e-3, 0.01, 0.05, 0.3}) {
    for (std::size_t c : {2u, 17u, 64u, 1024u, 10000u}) {
      std::size_t prev_dec = 0, prev_inc = SIZE_MAX;
      for (int i = 1; i < 100; ++i) {
        const double s = i / 100.0;
        const auto dec = masks_count(RandomnessSchedule::decrease, sr, c, s);
        const auto inc = masks_count(RandomnessSchedule::increase, sr, c, s);
        ASSERT_GE(dec, 1u);
        ASSERT_GE(inc, 1u);
        ASSERT_GE(dec, prev_dec) << "sr=" << sr << " C=" << c << " s=" << s;
        ASSERT_LE(inc, prev_inc) << "sr=" << sr << " C=" << c << " s=" << s;
        prev_dec = dec;
        prev_inc = inc;
      }
    }
  }
}

TEST(PrunedCount, CeilingOfProduct) {
  EXPECT_EQ(pruned_count(64, 0.54), 35u);
  EXPECT_EQ(pruned_count(1024, 0.83), 850u);
  EXPECT_EQ(pruned_count(64, 0.9375), 60u);
  EXPECT_EQ(pruned_count(10000, 0.83), 8300u);
  EXPECT_EQ(pruned_count(100, 0.29), 29u);  // 0.29·100 = 28.999999999999996 in binary
}

TEST(Schedule, AcceptsFourStageSchedule) {
  const std::vector<double> s{0.54, 0.83, 0.91, 0.9375};
  EXPECT_EQ(validate_schedule(s).size(), 4u);
}

TEST(Schedule, AcceptsNineStageSchedule) {
  const std::vector<double> s{0.54, 0.83, 0.875, 0.9, 0.92, 0.9275, 0.93, 0.935, 0.9375};
  EXPECT_EQ(validate_schedule(s).size(), 9u);
}

TEST(Schedule, RejectsNonIncreasingWithIndex) {
  const std::vector<double> s{0.5, 0.5};
  try {
    validate_schedule(s);
    FAIL();
  } catch (const ScheduleError& e) {
    EXPECT_EQ(e.index, 1u);
  }
}

TEST(Schedule, RejectsOutOfRangeAndEmpty) {
  EXPECT_THROW(validate_schedule(std::vector<double>{0.5, 1.0}), ScheduleError);
  EXPECT_THROW(validate_schedule(std::vector<double>{0.0}), ScheduleError);
  EXPECT_THROW(validate_schedule(std::vector<double>{}), ScheduleError);
}

TEST(StageContext, BudgetsAddUp) {
  SamplingConfig sampling;
  sampling.sampling_ratio = 0.01;
  const std::vector<std::size_t> sizes{64, 1024, 64};
  const auto ctx = make_stage_context(1, 0.83, sizes, sampling);
  ASSERT_EQ(ctx.layers.size(), 3u);
  for (const auto& b : ctx.layers) {
    EXPECT_EQ(b.zeros + b.retained, b.total);
    EXPECT_GE(b.retained, 1u);
    EXPECT_GE(b.masks, 1u);
  }
  EXPECT_EQ(ctx.layers[1].zeros, 850u);
  EXPECT_EQ(ctx.layers[1].masks, 8u);
}

TEST(StageContext, RejectsLayerWithNothingRetained) {
  const std::vector<std::size_t> sizes{4};
  EXPECT_THROW(make_stage_context(0, 0.9, sizes, SamplingConfig{}), ScheduleError);
}
