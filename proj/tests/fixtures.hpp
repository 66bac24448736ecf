#pragma once

#include "lffs/episodes.hpp"
#include "lffs/pretrain.hpp"

namespace lffs::test {

// Small trained backbone shared by the finetune, attack and eval suites.
// Built once per process; callers get their own copy of the network.
struct Trained {
  SyntheticData data;
  ConvNet<float> teacher;
};

inline const Trained& trained() {
  static const Trained t = [] {
    SyntheticConfig c;
    c.classes = 10;
    c.novel_classes = 5;
    c.per_class = 40;
    c.side = 16;
    c.low_freq_signal_radius = 3;
    auto data = generate_synthetic(c, 2024);
    PretrainConfig p;
    p.epochs = 6;
    p.batch_size = 16;
    p.optimizer.learning_rate = 0.05;
    p.r_max = 8;
    p.r_min = 2;
    p.seed = 7;
    const ConvNetConfig arch{3, 16, 8, data.base.class_count};
    auto teacher = train_teacher<float>(data.base, arch, p);
    return Trained{std::move(data), std::move(teacher.net)};
  }();
  return t;
}

}  // namespace lffs::test
