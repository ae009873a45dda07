//! Cross-module integration: the full library path from image files on disk
//! through manifest loading, training, checkpointing, and evaluation,
//! exercised through the public API only.

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgsr::checkpoint::Checkpoint;
use sgsr::data::{save_png, Dataset, DatasetManifest};
use sgsr::metrics::EvalReport;
use sgsr::model::{build_model, ModelConfig};
use sgsr::train::{TrainConfig, Trainer};
use sgsr::FeatureMap;

fn textured(seed: u64, size: usize) -> FeatureMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phases: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.3..0.8),
                rng.random_range(0.3..0.8),
                rng.random_range(0.0..6.0),
            )
        })
        .collect();
    FeatureMap::from_shape_fn(3, size, size, |c, y, x| {
        let (fx, fy, p) = phases[c];
        (0.5 + 0.35 * (x as f64 * fx + y as f64 * fy + p).sin()).clamp(0.0, 1.0)
    })
    .unwrap()
}

fn small_cfg(scale: usize) -> ModelConfig {
    ModelConfig {
        scale,
        channels: 8,
        n_blocks: 1,
        heads: 2,
        patch: 2,
        stride: 1,
        k: 2,
        seed: 5,
        ..ModelConfig::tiny(scale)
    }
}

fn quick_train_cfg(total: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 2,
        lr_patch: 8,
        seed: 77,
        ..TrainConfig::desk(total)
    }
}

/// PNG corpus on disk → text manifest → dataset → short training run with an
/// output directory → reload the written checkpoint → evaluation report.
#[test]
fn png_corpus_through_training_to_eval_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for i in 0..3 {
        let name = format!("img{i}.png");
        save_png(dir.path().join(&name), &textured(10 + i, 20)).unwrap();
        lines.push_str(&name);
        lines.push('\n');
    }
    let manifest_path = dir.path().join("train.txt");
    std::fs::write(&manifest_path, lines).unwrap();

    let manifest = DatasetManifest::load(&manifest_path, 2).unwrap();
    let data = Dataset::load(&manifest).unwrap();
    assert_eq!(data.pairs.len(), 3);
    // PNG round-trip quantizes to 8 bits; dataset values stay in range
    for pair in &data.pairs {
        assert_eq!(pair.hr.shape(), (3, 20, 20));
        assert_eq!(pair.lr.shape(), (3, 10, 10));
    }

    let out = dir.path().join("run");
    let cfg = quick_train_cfg(6);
    let mut trainer = Trainer::new(build_model(&small_cfg(2)).unwrap(), cfg.clone()).unwrap();
    let summary = trainer.run(&data, cfg.total_iters, Some(&out)).unwrap();
    assert_eq!(summary.iterations_run, 6);
    assert!(summary.final_loss.is_finite());

    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7, "header plus one row per iteration");
    assert!(log.starts_with("iter,lr,loss,wall_time_s"));

    let ckpt_path = out.join("iter_0000006.ckpt");
    let model = Checkpoint::load(&ckpt_path).unwrap().into_model().unwrap();
    let outputs: Vec<(String, FeatureMap)> = data
        .pairs
        .iter()
        .map(|p| (p.id.clone(), model.forward(&p.lr).unwrap()))
        .collect();
    let report = EvalReport::evaluate(
        outputs
            .iter()
            .zip(&data.pairs)
            .map(|((id, sr), p)| (id.as_str(), sr, &p.hr)),
        2,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.mean_psnr.is_finite() && report.mean_psnr > 0.0);
    assert!(report.mean_ssim > 0.0 && report.mean_ssim <= 1.0);

    let mut csv = Vec::new();
    report.write_csv(&mut csv).unwrap();
    let csv = String::from_utf8(csv).unwrap();
    assert_eq!(csv.lines().count(), 5, "header, three images, mean row");
}

/// Gradients reach every corner of the parameter set: after a few steps the
/// attention projections, subgraph-generation weights, and the
/// zero-initialized block output all move.
#[test]
fn training_moves_graph_attention_and_projection_parameters() {
    let data = Dataset {
        pairs: (0..2)
            .map(|i| {
                let hr = textured(30 + i, 16);
                let lr = sgsr::data::bicubic_downscale(&hr, 2).unwrap();
                sgsr::data::ImagePair::new(format!("p{i}"), hr, lr, 2).unwrap()
            })
            .collect(),
        scale: 2,
    };
    let cfg = quick_train_cfg(4);
    let mut trainer = Trainer::new(build_model(&small_cfg(2)).unwrap(), cfg.clone()).unwrap();
    let before: Vec<(String, ArrayD<f64>)> = trainer
        .model
        .params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    assert!(
        before
            .iter()
            .find(|(n, _)| n == "block0.out_proj.weight")
            .map(|(_, v)| v.iter().all(|&x| x == 0.0))
            .unwrap(),
        "block output projection starts at zero"
    );

    trainer.run(&data, cfg.total_iters, None).unwrap();

    let moved = |name: &str| {
        let old = &before.iter().find(|(n, _)| n == name).expect(name).1;
        let new = trainer.model.params.get(name).expect(name);
        old != new
    };
    for name in [
        "block0.attn0.head0.w_q",
        "block0.attn3.head1.w_v",
        "block0.attn0.w_o",
        "block0.out_proj.weight",
        "shallow.weight",
        "recon.weight",
    ] {
        assert!(moved(name), "{name} never received a gradient");
    }
}

/// The evaluation scale travels with the manifest: a JSON manifest that
/// contradicts the requested scale is refused up front.
#[test]
fn manifest_scale_conflicts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    save_png(dir.path().join("a.png"), &textured(50, 16)).unwrap();
    let manifest_path = dir.path().join("list.json");
    std::fs::write(
        &manifest_path,
        r#"{"scale": 3, "entries": [{"hr": "a.png"}]}"#,
    )
    .unwrap();
    let err = DatasetManifest::load(&manifest_path, 2).unwrap_err();
    assert!(matches!(err, sgsr::Error::Incompatible(_)), "got {err:?}");
    assert!(DatasetManifest::load(&manifest_path, 3).is_ok());
}
