//! End-to-end training: determinism, capacity, and the two-stage lite
//! pipeline contracts.

use std::collections::BTreeMap;

use mrfseg::data::{generate, Dataset, SceneConfig};
use mrfseg::segnet::{MrfmMode, NetConfig, SegModel};
use mrfseg::train::{
    evaluate, history_csv, train, train_lite_two_stage, LossKind, Stage2Config, TrainConfig,
};
use mrfseg::{EalConfig, StateDict, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, seed: u64) -> Dataset {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    Dataset {
        samples: generate(&cfg, n).unwrap(),
        num_classes: cfg.num_classes,
        ignore_id: cfg.ignore_id,
        height: cfg.height,
        width: cfg.width,
    }
}

fn short(max_iter: usize) -> TrainConfig {
    TrainConfig {
        max_iter,
        batch_size: 4,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

pub fn same_seed_gives_identical_runs() {
    let ds = dataset(12, 1);
    let val = dataset(4, 2);
    for (mode, loss) in [
        (MrfmMode::None, LossKind::Ce),
        (MrfmMode::Standard, LossKind::Eal(EalConfig::default())),
    ] {
        let cfg = NetConfig {
            mrfm_mode: mode,
            ..NetConfig::default()
        };
        let run = |seed| {
            let model = SegModel::build(&cfg, seed).unwrap();
            let out = train(
                &model,
                &ds,
                Some(&val),
                &TrainConfig { loss, ..short(10) },
                seed,
            )
            .unwrap();
            (model.to_bytes().unwrap(), history_csv(&out.history, 4))
        };
        let (a, b) = (run(7), run(7));
        assert_eq!(a, b, "{mode}");
        assert_ne!(run(8).0, a.0);
    }
}

pub fn poly_schedule_and_best_checkpoint_bookkeeping() {
    let ds = dataset(8, 3);
    let model = SegModel::build(&NetConfig::default(), 3).unwrap();
    let cfg = short(10);
    let out = train(&model, &ds, Some(&ds), &cfg, 3).unwrap();
    assert_eq!(out.history.len(), 10);
    assert_eq!(out.history[0].lr, cfg.base_lr);
    assert!(out.history.windows(2).all(|w| w[1].lr < w[0].lr));
    let evals: Vec<_> = out
        .history
        .iter()
        .filter_map(|r| r.miou.map(|m| (r.iter, m)))
        .collect();
    assert_eq!(evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![5, 10]);
    let (best, at, _) = out.best.as_ref().unwrap();
    let expected = evals.iter().fold(
        (0.0, 0),
        |acc, &(i, m)| if m > acc.0 { (m, i) } else { acc },
    );
    assert_eq!((*best, *at), expected);
}

pub fn eight_samples_are_memorized() {
    let ds = dataset(8, 1000);
    let model = SegModel::build(&NetConfig::default(), 1).unwrap();
    let cfg = TrainConfig {
        max_iter: 500,
        augment: false,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&model, &ds, None, &cfg, 1).unwrap();
    let miou = evaluate(&model, &ds, &[1.0], 2).unwrap().per_scale[0].miou;
    assert!(miou >= 0.95, "train mIoU {miou}");
}

fn lite_config() -> NetConfig {
    NetConfig {
        mrfm_mode: MrfmMode::Lite,
        mrfm_dilation: 2,
        ..NetConfig::default()
    }
}

fn forward_eval(model: &SegModel, x: &Tensor) -> Tensor {
    model.set_training(false);
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let y = model.forward(&mut tape, xv).unwrap();
    tape.value(y).clone()
}

pub fn pruning_without_stage_two_keeps_the_standard_path() {
    let ds = dataset(8, 4);
    let mut model = SegModel::build(&lite_config(), 4).unwrap();
    let cfg = TrainConfig {
        stage2: Stage2Config {
            iters: Some(0),
            ..Stage2Config::default()
        },
        ..short(6)
    };
    let out = train_lite_two_stage(&mut model, &ds, None, &cfg, 4).unwrap();
    assert!(out.stage2.history.is_empty());
    assert!(model.config().mrfm_pruned);

    // f₁ of the stage-1 weights, computed by a plain network holding them.
    let plain = SegModel::build(
        &NetConfig {
            mrfm_mode: MrfmMode::None,
            ..lite_config()
        },
        0,
    )
    .unwrap();
    let dict: StateDict = out
        .stage1_state
        .iter()
        .filter(|(n, _)| !n.ends_with(".logits"))
        .map(|(n, t)| (n.replace(".shared.", ".standard."), t.clone()))
        .collect();
    plain.load_state_dict(&dict).unwrap();
    let x = Tensor::uniform(
        mrfseg::Shape::new(3, 3, 64, 64),
        0.0,
        1.0,
        &mut ChaCha8Rng::seed_from_u64(5),
    );
    assert_eq!(
        forward_eval(&model, &x).data(),
        forward_eval(&plain, &x).data()
    );
}

pub fn stage_two_leaves_normalization_statistics_untouched() {
    let ds = dataset(8, 6);
    let mut model = SegModel::build(&lite_config(), 6).unwrap();
    let cfg = TrainConfig {
        stage2: Stage2Config {
            iters: Some(5),
            ..Stage2Config::default()
        },
        ..short(5)
    };
    let out = train_lite_two_stage(&mut model, &ds, Some(&ds), &cfg, 6).unwrap();
    assert_eq!(out.stage2.history.len(), 5);
    let before: BTreeMap<&str, &Tensor> = out
        .stage1_state
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let after = model.state_dict();
    let (mut norms, mut moved) = (0, 0);
    for (name, t) in &after {
        let old = before[name.as_str()];
        if name.contains(".bn.") || name.ends_with("running_mean") || name.ends_with("running_var")
        {
            assert_eq!(t.data(), old.data(), "{name}");
            norms += 1;
        } else if t.data() != old.data() {
            moved += 1;
        }
    }
    assert!(norms > 0 && moved > 0);
    let lr2: Vec<f64> = out.stage2.history.iter().map(|r| r.lr).collect();
    assert_eq!(lr2[0], cfg.base_lr * cfg.stage2.lr_scale);
}

#[cfg(test)]
mod tests {
    #[test]
    fn same_seed_gives_identical_runs() {
        super::same_seed_gives_identical_runs()
    }
    #[test]
    fn poly_schedule_and_best_checkpoint_bookkeeping() {
        super::poly_schedule_and_best_checkpoint_bookkeeping()
    }
    #[test]
    fn eight_samples_are_memorized() {
        super::eight_samples_are_memorized()
    }
    #[test]
    fn pruning_without_stage_two_keeps_the_standard_path() {
        super::pruning_without_stage_two_keeps_the_standard_path()
    }
    #[test]
    fn stage_two_leaves_normalization_statistics_untouched() {
        super::stage_two_leaves_normalization_statistics_untouched()
    }
}
