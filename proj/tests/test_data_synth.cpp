#include <gtest/gtest.h>

#include <set>

#include "rbc/data_synth.hpp"

using namespace rbc;

namespace {

LabeledImage hand_image(std::initializer_list<int> labels, int size = 4) {
  LabeledImage it;
  it.id = "hand";
  it.image = Tensor<float>(3, size, size, 0.5f);
  it.mask = Mask(size, size, kBackground);
  int i = 0;
  for (int l : labels) it.mask.data[i++] = static_cast<std::uint8_t>(l);
  return it;
}

bool has_class(const LabeledImage& it, int c) {
  for (auto v : it.mask.data)
    if (v == c) return true;
  return false;
}

}  // namespace

TEST(Generate, ZeroCooccurrenceNeverMixes) {
  auto spec = uniform_scene(2, 0.0, 5);
  spec.shapes_per_image = {1, 4};
  auto data = generate_dataset(spec, 50);
  for (const auto& it : data) EXPECT_FALSE(has_class(it, 1) && has_class(it, 2)) << it.id;
}

TEST(Generate, CertainCooccurrenceAlmostAlwaysMixes) {
  auto spec = uniform_scene(2, 1.0, 6);
  auto data = generate_dataset(spec, 100);
  int both = 0;
  for (const auto& it : data) both += has_class(it, 1) && has_class(it, 2);
  EXPECT_GE(both / 100.0, 0.95);
}

TEST(Generate, DeterministicPerSeedAndIndex) {
  auto spec = uniform_scene(3, 0.4, 77);
  auto a = generate_dataset(spec, 20), b = generate_dataset(spec, 20);
  EXPECT_EQ(a, b);
  // Image i does not depend on how many images are generated.
  EXPECT_EQ(generate_dataset(spec, 5)[4], a[4]);
  spec.rng_seed = 78;
  EXPECT_NE(generate_dataset(spec, 20), a);
}

TEST(Generate, MasksUseValidLabelsAndCarryForeground) {
  auto spec = uniform_scene(6, 0.5, 1, 32);
  for (const auto& it : generate_dataset(spec, 60)) {
    EXPECT_EQ(it.image.height, it.mask.height);
    EXPECT_EQ(it.image.width, it.mask.width);
    bool fg = false;
    for (auto v : it.mask.data) {
      EXPECT_TRUE(v <= 6 || v == kIgnore);
      fg = fg || (v >= 1 && v <= 6);
    }
    EXPECT_TRUE(fg);
    for (float v : it.image.data) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Generate, RejectsInvalidSpecs) {
  auto spec = uniform_scene(3, 0.5, 1);
  spec.cooccurrence[0][1] = 0.2;
  EXPECT_THROW(generate_dataset(spec, 1), ValidationError);
  spec = uniform_scene(3, 0.5, 1);
  spec.cooccurrence[1][2] = spec.cooccurrence[2][1] = 1.5;
  EXPECT_THROW(generate_dataset(spec, 1), ValidationError);
  spec = uniform_scene(3, 0.5, 1);
  spec.num_fg_classes = 0;
  EXPECT_THROW(generate_dataset(spec, 1), ValidationError);
  EXPECT_THROW(generate_dataset(uniform_scene(3, 0.5, 1), 0), ValidationError);
}

TEST(TaskSequence, NamedProtocols) {
  auto t191 = build_task_sequence(20, "19-1", ProtocolMode::Overlapped);
  ASSERT_EQ(t191.num_steps(), 2);
  EXPECT_EQ(t191.partitions[0].size(), 19u);
  EXPECT_EQ(t191.partitions[1], std::vector<int>{20});

  auto t155 = build_task_sequence(20, "15-5", ProtocolMode::Disjoint);
  ASSERT_EQ(t155.num_steps(), 2);
  EXPECT_EQ(t155.partitions[1], (std::vector<int>{16, 17, 18, 19, 20}));

  auto t151 = build_task_sequence(20, "15-1", ProtocolMode::Disjoint);
  ASSERT_EQ(t151.num_steps(), 6);
  std::vector<std::size_t> sizes;
  for (const auto& p : t151.partitions) sizes.push_back(p.size());
  EXPECT_EQ(sizes, (std::vector<std::size_t>{15, 1, 1, 1, 1, 1}));
  EXPECT_EQ(t151.mode, ProtocolMode::Disjoint);

  auto joint = build_task_sequence(20, "20-0", ProtocolMode::Overlapped);
  ASSERT_EQ(joint.num_steps(), 1);
  EXPECT_EQ(joint.partitions[0].size(), 20u);
}

TEST(TaskSequence, InconsistentArithmeticIsRejected) {
  EXPECT_THROW(build_task_sequence(20, "15-4", ProtocolMode::Overlapped), ValidationError);
  EXPECT_THROW(build_task_sequence(20, "19-0", ProtocolMode::Overlapped), ValidationError);
  EXPECT_THROW(build_task_sequence(20, "21-1", ProtocolMode::Overlapped), ValidationError);
  EXPECT_THROW(build_task_sequence(20, "15_5", ProtocolMode::Overlapped), ValidationError);
  EXPECT_THROW(build_task_sequence(20, "x-1", ProtocolMode::Overlapped), ValidationError);
}

TEST(MaterializeStep, FutureClassHandling) {
  const std::vector<LabeledImage> data{hand_image({1, 17, 0, 255})};
  auto task = build_task_sequence(20, "15-1", ProtocolMode::Disjoint);
  EXPECT_TRUE(materialize_step(data, task, 1).items.empty());

  task.mode = ProtocolMode::Overlapped;
  auto step = materialize_step(data, task, 1);
  ASSERT_EQ(step.items.size(), 1u);
  EXPECT_EQ(step.items[0].mask.data[0], 1);
  EXPECT_EQ(step.items[0].mask.data[1], 0);
  EXPECT_EQ(step.items[0].mask.data[3], kIgnore);
}

TEST(MaterializeStep, NoCurrentPixelMeansExcluded) {
  const std::vector<LabeledImage> data{hand_image({3, 3, 0})};
  for (auto mode : {ProtocolMode::Disjoint, ProtocolMode::Overlapped}) {
    auto task = build_task_sequence(20, "15-1", mode);
    EXPECT_TRUE(materialize_step(data, task, 2).items.empty());
  }
}

TEST(MaterializeStep, SingleStepIsIdentity) {
  auto spec = uniform_scene(4, 0.5, 3, 16);
  auto data = generate_dataset(spec, 30);
  data[0].mask.data[0] = kIgnore;
  auto task = build_task_sequence(4, "4-0", ProtocolMode::Disjoint);
  auto step = materialize_step(data, task, 1);
  ASSERT_EQ(step.items.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(step.items[i].mask, data[i].mask);
}

TEST(MaterializeStep, OutOfRangeStep) {
  const std::vector<LabeledImage> data{hand_image({1})};
  auto task = build_task_sequence(20, "19-1", ProtocolMode::Disjoint);
  EXPECT_THROW(materialize_step(data, task, 0), std::out_of_range);
  EXPECT_THROW(materialize_step(data, task, 3), std::out_of_range);
}

TEST(MaterializeStep, LabelsCollapseAndRelabelingIsIdempotent) {
  auto spec = uniform_scene(6, 0.6, 9, 24);
  auto data = generate_dataset(spec, 80);
  for (auto mode : {ProtocolMode::Disjoint, ProtocolMode::Overlapped}) {
    auto task = build_task_sequence(6, "2-2", mode);
    for (int t = 1; t <= task.num_steps(); ++t) {
      auto step = materialize_step(data, task, t);
      for (const auto& it : step.items)
        for (auto v : it.mask.data) EXPECT_TRUE(v == 0 || v == kIgnore || task.is_new(v, t));
      auto again = materialize_step(step.items, task, t);
      ASSERT_EQ(again.items.size(), step.items.size());
      for (std::size_t i = 0; i < step.items.size(); ++i) EXPECT_EQ(again.items[i], step.items[i]);
    }
  }
}
