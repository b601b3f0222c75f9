#![allow(dead_code)]

use cdkd::data::{make_synthetic_split, Dataset, SyntheticSpec};
use cdkd::losses::DistillConfig;
use cdkd::model::NetworkSpec;
use cdkd::optim::{LrSchedule, SgdConfig};
use cdkd::train::{train_teacher, AugmentSpec, RunCheckpoint, RunOptions, TrainConfig};

pub const CLASSES: usize = 4;

/// Small synthetic split: 4 classes, 12 train and 4 val images per class, 8×8.
pub fn tiny_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        classes: CLASSES,
        per_class: 12,
        image_size: 8,
        seed: 11,
    };
    make_synthetic_split(&spec, 4).unwrap()
}

pub fn teacher_spec() -> NetworkSpec {
    NetworkSpec::family(&[4, 6, 8], 1, CLASSES, 3)
}

pub fn student_spec() -> NetworkSpec {
    NetworkSpec::family(&[2, 3, 4], 1, CLASSES, 3)
}

pub fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        drop_last: false,
        sgd: SgdConfig {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
        },
        schedule: LrSchedule {
            milestones: vec![2],
            factor: 0.1,
        },
        augment: AugmentSpec {
            pad: 1,
            random_crop: true,
            hflip_prob: 0.5,
        },
        normalization: None,
        seed,
        wall_clock: false,
    }
}

pub fn distill_cfg() -> DistillConfig {
    DistillConfig {
        n_decay: 2,
        ..Default::default()
    }
}

pub fn tiny_teacher(train: &Dataset, val: &Dataset) -> RunCheckpoint {
    train_teacher(&teacher_spec(), train, val, &train_cfg(2, 3), RunOptions::default())
        .unwrap()
        .checkpoint
}
