//! Verbose diagnostic for the desk-scale fixture; run on demand with
//! `cargo test -p texsyn-cli --test desk_probe -- --ignored --nocapture`.

use rand_chacha::ChaCha8Rng;
use texsyn_core::analysis::{self, DetectionConfig, PatchRect};
use texsyn_core::data::{self, TextureDataset};
use texsyn_core::eval::{self, ClassifierConfig};
use texsyn_core::latent::LatentSpec;
use texsyn_core::networks::{ArchitectureSpec, ModelBundle};
use texsyn_core::params::ParamSet;
use texsyn_core::rng::{self, stream_rng};
use texsyn_core::tensor::Tensor;
use texsyn_core::train::{self, Trainer, TrainingConfig};

const SEED: u64 = 11;

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn nth_image(batch: &Tensor, i: usize) -> Tensor {
    let shape = batch.shape();
    let chunk: usize = shape[1..].iter().product();
    Tensor::new(shape[1..].to_vec(), batch.data()[i * chunk..(i + 1) * chunk].to_vec())
}

fn hstack(left: &Tensor, right: &Tensor) -> Tensor {
    let (c, h, w) = (left.shape()[0], left.shape()[1], left.shape()[2]);
    let mut data = vec![0.0; c * h * 2 * w];
    for ch in 0..c {
        for row in 0..h {
            let src = (ch * h + row) * w;
            let dst = (ch * h + row) * 2 * w;
            data[dst..dst + w].copy_from_slice(&left.data()[src..src + w]);
            data[dst + w..dst + 2 * w].copy_from_slice(&right.data()[src..src + w]);
        }
    }
    Tensor::new(vec![c, h, 2 * w], data)
}

fn accuracy_report(
    what: &str,
    dataset: &TextureDataset,
    preds: &[usize],
    labels: &[usize],
) {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    println!("{what}: accuracy {:.3} ({correct}/{})", correct as f64 / preds.len() as f64, preds.len());
    let c = dataset.num_classes();
    let mut confusion = vec![0usize; c * c];
    for (&p, &l) in preds.iter().zip(labels) {
        confusion[l * c + p] += 1;
    }
    for l in 0..c {
        println!("  true {l}: {:?}", &confusion[l * c..(l + 1) * c]);
    }
}

#[test]
#[ignore]
fn desk_probe() {
    let dataset = data::desk_textures(&mut stream_rng(SEED, 4)).unwrap();
    let spec = LatentSpec::new(2, 6, 2, 2, 2).unwrap();
    let arch = ArchitectureSpec::desk_2d(&spec);
    let config = TrainingConfig {
        batch: 16,
        iterations: 2000,
        seed: SEED,
        checkpoint_every: 0,
        ..TrainingConfig::default_2d()
    };
    let mut params = ParamSet::new();
    let bundle =
        ModelBundle::build(&mut params, &mut stream_rng(SEED, rng::STREAM_INIT), &spec, &arch)
            .unwrap();
    let mut trainer = Trainer::new(bundle, params, config);
    let mut data_rng = stream_rng(SEED, rng::STREAM_DATA);
    let mut latent_rng = stream_rng(SEED, rng::STREAM_LATENT);
    let mut records = Vec::new();
    let start = std::time::Instant::now();
    train::train_loop(&mut trainer, &dataset, &mut data_rng, &mut latent_rng, &mut records, |t, _, _| {
        if t.iteration % 250 == 0 {
            eprintln!("  [{}s] iteration {}", start.elapsed().as_secs(), t.iteration);
        }
        Ok(())
    })
    .unwrap();
    println!("trained {} iterations in {:.0}s", records.len(), start.elapsed().as_secs_f64());

    for (name, get) in [
        ("l_dx", &(|r: &train::LossRecord| r.l_dx) as &dyn Fn(&train::LossRecord) -> f64),
        ("l_dz", &|r| r.l_dz),
        ("l_dxx", &|r| r.l_dxx),
        ("l_g", &|r| r.l_g),
        ("l_e", &|r| r.l_e),
    ] {
        let vals: Vec<f64> = records.iter().map(|r| get(r)).collect();
        let windows: Vec<String> =
            vals.chunks(250).map(|w| format!("{:.3}", mean(w))).collect();
        println!("{name} per-250 means: {}", windows.join(" "));
    }
    let l_dx: Vec<f64> = records.iter().map(|r| r.l_dx).collect();
    println!(
        "criterion 6a: first-200 {:.4} vs last-200 {:.4} (want decrease)",
        mean(&l_dx[..200]),
        mean(&l_dx[1800..])
    );

    let outcome =
        eval::train_classifier(&dataset, &trainer.bundle.arch, &ClassifierConfig::default())
            .unwrap();
    println!(
        "classifier: steps {}, reached_full_accuracy {}",
        outcome.steps, outcome.reached_full_accuracy
    );

    let mut eval_rng = stream_rng(SEED, 7);
    let (images, labels) = dataset.sample_batch(128, &mut eval_rng);
    let mut cls_params = outcome.params.clone();
    let real_preds = outcome.classifier.predict(&mut cls_params, &images);
    accuracy_report("classifier on real crops", &dataset, &real_preds, &labels);

    for sigma_zero in [false, true] {
        let mut model_params = trainer.params.clone();
        let recon = analysis::reconstruct(
            &trainer.bundle,
            &mut model_params,
            &images,
            sigma_zero,
            &mut stream_rng(SEED, 8),
        )
        .unwrap();
        let mut cls_params = outcome.params.clone();
        let preds = outcome.classifier.predict(&mut cls_params, &recon);
        accuracy_report(
            &format!("reconstructions (sigma_zero={sigma_zero})"),
            &dataset,
            &preds,
            &labels,
        );
        let coverage = eval::coverage_histogram(&preds, dataset.num_classes()).unwrap();
        println!("  coverage counts {:?} empty {:?}", coverage.counts, coverage.empty_classes);
    }

    // Detection: class-0 left, class-3 right, patch = left half.
    let mut rng: ChaCha8Rng = stream_rng(SEED, 9);
    let (mut left, mut right) = (None, None);
    while left.is_none() || right.is_none() {
        let (imgs, labs) = dataset.sample_batch(16, &mut rng);
        for (i, &label) in labs.iter().enumerate() {
            if label == 0 && left.is_none() {
                left = Some(nth_image(&imgs, i));
            }
            if label == 3 && right.is_none() {
                right = Some(nth_image(&imgs, i));
            }
        }
    }
    let composite = hstack(left.as_ref().unwrap(), right.as_ref().unwrap());
    for pool_kernel in [1usize, 2, 5] {
        for alpha in [1.0, 3.0] {
            let patch = PatchRect { x: 0, y: 0, w: 64, h: 64 };
            let config = DetectionConfig { alpha, pool_kernel, upsample: true };
            let mut model_params = trainer.params.clone();
            let result =
                analysis::detect(&trainer.bundle, &mut model_params, &composite, &patch, &config)
                    .unwrap();
            let hm = &result.heatmap;
            let w = hm.shape()[2];
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for row in 0..hm.shape()[1] {
                for col in 0..w {
                    let v = hm.data()[row * w + col];
                    if col < w / 2 {
                        inside.push(v);
                    } else {
                        outside.push(v);
                    }
                }
            }
            println!(
                "detect pool={pool_kernel} alpha={alpha}: grid {:?} inside {:.4} outside {:.4} ({})",
                result.grid.shape(),
                mean(&inside),
                mean(&outside),
                if mean(&inside) > mean(&outside) { "OK" } else { "INVERTED" }
            );
        }
    }

    // Visual artifacts for inspection.
    let dir = std::path::Path::new("/tmp/desk_probe");
    std::fs::create_dir_all(dir).unwrap();
    let mut model_params = trainer.params.clone();
    let recon = analysis::reconstruct(
        &trainer.bundle,
        &mut model_params,
        &images,
        false,
        &mut stream_rng(SEED, 8),
    )
    .unwrap();
    let real_tiles: Vec<Tensor> = (0..24).map(|i| nth_image(&images, i)).collect();
    let recon_tiles: Vec<Tensor> = (0..24).map(|i| nth_image(&recon, i)).collect();
    let real_grid = texsyn_core::io::assemble_grid(&real_tiles, 12, 2, -1.0);
    let recon_grid = texsyn_core::io::assemble_grid(&recon_tiles, 12, 2, -1.0);
    texsyn_core::io::write_image(&real_grid, &dir.join("real.png")).unwrap();
    texsyn_core::io::write_image(&recon_grid, &dir.join("recon.png")).unwrap();
    texsyn_core::io::write_image(&composite, &dir.join("composite.png")).unwrap();
    println!("wrote /tmp/desk_probe/{{real,recon,composite}}.png");
}
