//! Slower behavioural checks that need a few hundred training iterations.

use decoupled_isp::codec::{LatentFeature, Modality};
use decoupled_isp::config::RunConfig;
use decoupled_isp::nn::loss::{mean_l2, scalar};
use decoupled_isp::tadm::{diffusion_loss, sample};
use decoupled_isp::trainer::{run_stage1, run_stage2, LatentSet, Pipeline, TrainOptions, TrainingSet};

fn tiny(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "patch_size=32",
        "latent_channels=8",
        "predictor_width=16",
        "chp_width=16",
        "checkpoint_every=0",
    ]
    .map(String::from)
    .to_vec();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml("", &o).unwrap()
}

#[test]
fn stage1_loss_trends_down() {
    let cfg = tiny(&[
        "procedural_pairs=4",
        "batch_size=4",
        "max_iters=500",
        "learning_rate=1e-3",
    ]);
    let data = TrainingSet::procedural(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(&cfg).unwrap();
    let r = run_stage1(
        &cfg,
        &pipe,
        &data,
        &TrainOptions {
            out_dir: dir.path().to_path_buf(),
            resume: None,
        },
    )
    .unwrap();
    let mut ema = None;
    let mut at = std::collections::BTreeMap::new();
    for rec in &r.history {
        let v = rec.losses["total"];
        let e = match ema {
            None => v,
            Some(prev) => 0.9 * prev + 0.1 * v,
        };
        ema = Some(e);
        at.insert(rec.iteration + 1, e);
    }
    assert!(at[&500] < at[&50], "EMA at 50: {}, at 500: {}", at[&50], at[&500]);
}

#[test]
fn sampled_latents_follow_their_condition() {
    let cfg = tiny(&[
        "procedural_pairs=2",
        "batch_size=2",
        "max_iters=100",
        "learning_rate=2e-3",
        "sampling_steps=10",
    ]);
    let data = TrainingSet::procedural(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let pipe = Pipeline::new(&cfg).unwrap();
    let s1 = run_stage1(
        &cfg,
        &pipe,
        &data,
        &TrainOptions {
            out_dir: dir.path().join("a"),
            resume: None,
        },
    )
    .unwrap();
    let mut cfg2 = cfg.clone();
    cfg2.stage = 2;
    cfg2.max_iters = 400;
    cfg2.learning_rate = 1e-3;
    let pipe2 = Pipeline::new(&cfg2).unwrap();
    run_stage2(
        &cfg2,
        &pipe2,
        &data,
        &s1.checkpoint,
        &TrainOptions {
            out_dir: dir.path().join("b"),
            resume: None,
        },
    )
    .unwrap();
    let lat = LatentSet::encode(&pipe2.codec, &data).unwrap();
    let g_hat = sample(&lat.raw, &pipe2.schedule, &pipe2.sampler, &pipe2.predictor, 1).unwrap();
    let item = |t: &candle_core::Tensor, i: usize| t.narrow(0, i, 1).unwrap();
    for i in 0..2 {
        let own = scalar(&mean_l2(&item(&g_hat, i), &item(&lat.gray, i)).unwrap()).unwrap();
        let other = scalar(&mean_l2(&item(&g_hat, i), &item(&lat.gray, 1 - i)).unwrap()).unwrap();
        assert!(own < other, "pair {i}: own {own}, other {other}");
    }

    // The diffusion objective is positive for the trained network.
    let mut rng = decoupled_isp::rng::stream(0, &[1]);
    let f_r = LatentFeature::new(lat.raw.clone(), Modality::Raw).unwrap();
    let l = diffusion_loss(
        &lat.gray,
        f_r.values(),
        &pipe2.schedule,
        &pipe2.predictor,
        0.01,
        &mut rng,
    )
    .unwrap();
    assert!(scalar(&l.total).unwrap() > 0.0);
}
