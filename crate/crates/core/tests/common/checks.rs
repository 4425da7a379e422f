//! Self-contained checks shared by the focused test files and the acceptance
//! report. Each returns a one-line summary on success and the first
//! disagreement on failure.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmim_core::data::{synth_generate, AnnotatedImage, Batch, SynthConfig};
use tmim_core::losses::{FeatureExtractor, LossWeights};
use tmim_core::masks::{rasterize, TextPolygon};
use tmim_core::metrics::{age_peps_pceps, mse100, psnr};
use tmim_core::model::{ModelConfig, PromptedModel, TaskId};
use tmim_core::oracles::{
    compare, oracle_adamw_trajectory, oracle_age_peps_pceps, oracle_dft2, oracle_mse, oracle_point_in_polygon,
    oracle_psnr, ScalarAdamW,
};
use tmim_core::pipeline::{self, RunConfig, Start};
use tmim_core::tensor::no_grad;
use tmim_core::trainer::{adamw_step, pretrain_forward, AdamWConfig, BmLoss, OptimizerState, Stage, TrainConfig, Trainer};
use tmim_core::Tensor;

pub type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn dft_matches_brute_force() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, &(h, w)) in [(8, 8), (8, 13), (11, 16), (16, 12), (16, 16)].iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let x = ok(Tensor::new(uniform(&mut rng, 2 * h * w, -1.0, 1.0), &[1, 2, h, w]))?;
        let y = ok(x.dft2())?;
        let (xd, yd) = (x.data(), y.data());
        for c in 0..2 {
            let (re, im) = ok(oracle_dft2(&xd[c * h * w..][..h * w], h, w))?;
            let base = c * 2 * h * w;
            worst = worst.max(compare(&yd[base..][..h * w], &re).max_abs);
            worst = worst.max(compare(&yd[base + h * w..][..h * w], &im).max_abs);
        }
    }
    ensure(worst < 1e-9, || format!("dft2 max abs err {worst:.3e}"))?;
    Ok(format!("dft2 max abs err {worst:.2e} on 8x8..16x16"))
}

fn random_polygon(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = rng.gen_range(3..9);
    if rng.gen_bool(0.3) {
        // arbitrary vertex order, often self-intersecting
        return (0..n).map(|_| (rng.gen_range(-8.0..72.0), rng.gen_range(-8.0..72.0))).collect();
    }
    let (cx, cy) = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
    let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    angles.sort_by(f64::total_cmp);
    angles
        .into_iter()
        .map(|a| {
            let r = rng.gen_range(2.0..30.0);
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

pub fn rasterize_matches_point_in_polygon() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut covered = 0usize;
    for k in 0..50 {
        let verts = random_polygon(&mut rng);
        let mask = ok(rasterize(&[ok(TextPolygon::new(verts.clone(), false))?], 64, 64))?;
        for y in 0..64 {
            for x in 0..64 {
                let want = oracle_point_in_polygon((x as f64 + 0.5, y as f64 + 0.5), &verts);
                ensure(mask.get(y, x) == want, || format!("polygon {k} pixel ({x},{y}): got {}, want {want}", mask.get(y, x)))?;
                covered += want as usize;
            }
        }
    }
    Ok(format!("50 polygons at 64x64 agree on every pixel ({covered} inside)"))
}

pub fn adamw_matches_scalar_reimplementation() -> Outcome {
    let cfg = AdamWConfig {
        lr: 0.05,
        ..AdamWConfig::default()
    };
    let scalar = ScalarAdamW {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let start = uniform(&mut rng, 6, -2.0, 2.0);
    let target = uniform(&mut rng, 6, -1.0, 1.0);
    let curv = uniform(&mut rng, 6, 0.1, 3.0);
    let mut worst: f64 = 0.0;
    for name in ["w", "prompt.te"] {
        let p = ok(Tensor::param(start.clone(), &[6]))?;
        let params = vec![(name.to_string(), p.clone())];
        let mut state = OptimizerState::new(&params);
        let mut traj = Vec::new();
        for _ in 0..10 {
            p.zero_grad();
            let t = ok(Tensor::new(target.clone(), &[6]))?;
            let c = ok(Tensor::new(curv.clone(), &[6]))?;
            let loss = ok(ok(p.sub(&t))?.square().mul(&c))?.sum();
            ok(loss.backward())?;
            ok(adamw_step(&params, &mut state, &cfg))?;
            traj.push(p.to_vec());
        }
        let decay = if name == "w" { cfg.weight_decay } else { 0.0 };
        for i in 0..6 {
            let (t, c) = (target[i], curv[i]);
            let want = oracle_adamw_trajectory(ScalarAdamW { weight_decay: decay, ..scalar }, start[i], 10, |x| 2.0 * c * (x - t));
            for (step, w) in want.iter().enumerate() {
                worst = worst.max((traj[step][i] - w).abs());
            }
        }
    }
    ensure(worst < 1e-12, || format!("AdamW trajectory max abs err {worst:.3e}"))?;
    Ok(format!("AdamW trajectory max abs err {worst:.2e} over 10 steps"))
}

pub fn metrics_match_direct_recomputation() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let a = uniform(&mut rng, 3 * h * w, 0.0, 1.0);
        // near copies exercise both sides of the error threshold
        let spread = [0.02, 0.1, 0.5][seed as usize % 3];
        let b: Vec<f64> = a.iter().map(|v| (v + rng.gen_range(-spread..spread)).clamp(0.0, 1.0)).collect();
        let (ta, tb) = (ok(Tensor::new(a.clone(), &[3, h, w]))?, ok(Tensor::new(b.clone(), &[3, h, w]))?);
        let (age, peps, pceps) = ok(age_peps_pceps(&ta, &tb))?;
        let (oage, opeps, opceps) = oracle_age_peps_pceps(&a, &b, h, w, 20.0);
        for (got, want) in [
            (ok(psnr(&ta, &tb))?, oracle_psnr(&a, &b)),
            (ok(mse100(&ta, &tb))?, 100.0 * oracle_mse(&a, &b)),
            (age, oage),
            (peps, opeps),
            (pceps, opceps),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    ensure(worst < 1e-9, || format!("metric max abs err {worst:.3e}"))?;
    Ok(format!("PSNR/MSE/AGE/pEPs/pCEPs max abs err {worst:.2e}"))
}

pub fn small_model(seed: u64) -> PromptedModel {
    PromptedModel::with_config(
        &ModelConfig {
            widths: [4, 8, 8],
            ..ModelConfig::default()
        },
        seed,
    )
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, p: f64) -> Tensor {
    let v = (0..n * h * w).map(|_| if rng.gen_bool(p) { 1.0 } else { 0.0 }).collect();
    Tensor::new(v, &[n, 1, h, w]).unwrap()
}

fn random_batch(seed: u64, text_p: f64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, h, w) = (2, 16, 16);
    Batch {
        images: Tensor::new(uniform(&mut rng, n * 3 * h * w, 0.0, 1.0), &[n, 3, h, w]).unwrap(),
        text_masks: random_mask(&mut rng, n, h, w, text_p),
        rand_masks: random_mask(&mut rng, n, h, w, 0.3),
        cleans: None,
    }
}

pub fn pseudo_label_identities() -> Outcome {
    let (lw, fx) = (LossWeights::default(), FeatureExtractor::new());
    let model = small_model(1);
    for seed in 0..5 {
        let batch = random_batch(seed, 0.4);
        let out = ok(pretrain_forward(&model, &batch, &lw, &fx, BmLoss::TextAware))?;
        let (img, mt, pseudo, b) = (batch.images.data(), batch.text_masks.data(), out.pseudo.data(), out.bm_out.data());
        let plane = 16 * 16;
        for i in 0..img.len() {
            let m = mt[(i / (3 * plane)) * plane + i % plane];
            let want = if m == 1.0 { b[i] } else { img[i] };
            ensure(pseudo[i].to_bits() == want.to_bits(), || format!("seed {seed} element {i}: pseudo label is not the partition"))?;
        }
    }

    let mut none = random_batch(7, 0.0);
    ensure(none.text_masks.data().iter().all(|&v| v == 0.0), || "mask not empty".into())?;
    let out = ok(pretrain_forward(&model, &none, &lw, &fx, BmLoss::TextAware))?;
    ensure(bits(&out.pseudo) == bits(&none.images), || "M_text = 0 does not give I".into())?;

    none.text_masks = Tensor::ones(none.text_masks.shape());
    let out = ok(pretrain_forward(&model, &none, &lw, &fx, BmLoss::TextAware))?;
    let direct = {
        let _g = no_grad();
        let masked = ok(none.images.mul(&Tensor::zeros(none.text_masks.shape())))?;
        ok(model.forward(&masked, TaskId::Bm))?
    };
    ensure(bits(&out.pseudo) == bits(&direct), || "M_text = 1 does not give F_B(I_m)".into())?;
    Ok("partition holds bit-exactly on 5 random batches; M_text = 0 and 1 limits exact".into())
}

fn grads(model: &PromptedModel) -> Vec<(String, Option<Vec<u64>>)> {
    model
        .named_parameters()
        .into_iter()
        .map(|(n, p)| (n, p.grad().map(|g| g.iter().map(|v| v.to_bits()).collect())))
        .collect()
}

pub fn pseudo_label_carries_no_gradient() -> Outcome {
    let (lw, fx) = (LossWeights::default(), FeatureExtractor::new());
    let model = small_model(2);
    let batch = random_batch(11, 0.4);

    let out = ok(pretrain_forward(&model, &batch, &lw, &fx, BmLoss::TextAware))?;
    model.zero_grad();
    ok(out.l_te.total.backward())?;
    let through_pseudo = grads(&model);
    ensure(out.bm_out.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), || "L_TE reached the BM output".into())?;
    let bm_prompt = model.prompt_bm.grad();
    ensure(bm_prompt.is_none_or(|g| g.iter().all(|&v| v == 0.0)), || "L_TE reached the BM prompt".into())?;

    // same loss against a constant copy of the pseudo label
    model.zero_grad();
    let frozen = ok(Tensor::new(out.pseudo.to_vec(), out.pseudo.shape()))?;
    let te = ok(model.forward(&batch.images, TaskId::Te))?;
    let l = ok(tmim_core::losses::combined_loss_parts(&te, &frozen, &lw, &fx))?;
    ok(l.total.backward())?;
    ensure(grads(&model) == through_pseudo, || "gradients differ from a constant pseudo label".into())?;
    Ok("L_TE gradients equal those against a constant label; BM output and prompt untouched".into())
}

pub fn zero_prompts_share_outputs() -> Outcome {
    let model = small_model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = ok(Tensor::new(uniform(&mut rng, 2 * 3 * 16 * 16, 0.0, 1.0), &[2, 3, 16, 16]))?;
    let _g = no_grad();
    let run = |t| bits(&model.forward(&x, t).unwrap());
    let (bm0, te0) = (run(TaskId::Bm), run(TaskId::Te));
    ensure(bm0 == te0, || "zero prompts give different outputs".into())?;

    model.prompt_bm.update_data(|d| d[5] += 0.5);
    let (bm1, te1) = (run(TaskId::Bm), run(TaskId::Te));
    ensure(bm1 != bm0, || "BM prompt has no effect".into())?;
    ensure(te1 == te0, || "BM prompt leaked into TE".into())?;

    model.prompt_te.update_data(|d| d[2] -= 0.5);
    let (bm2, te2) = (run(TaskId::Bm), run(TaskId::Te));
    ensure(te2 != te1, || "TE prompt has no effect".into())?;
    ensure(bm2 == bm1, || "TE prompt leaked into BM".into())?;
    Ok("zero prompts agree bit-exactly; each prompt moves only its own task".into())
}

fn tiny_synth() -> SynthConfig {
    SynthConfig {
        width: 16,
        height: 16,
        max_boxes: 2,
        box_width: (4, 7),
        box_height: (3, 5),
        ..SynthConfig::default()
    }
}

fn tiny_train_config(stage: Stage) -> TrainConfig {
    TrainConfig {
        stage,
        batch_size: 4,
        epochs: 2,
        seed: 5,
        image_size: 16,
        model: ModelConfig {
            widths: [4, 8, 8],
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn pretrain_trace(data: &[AnnotatedImage]) -> Result<(Vec<u8>, Vec<String>), String> {
    let cfg = tiny_train_config(Stage::Pretrain);
    let model = PromptedModel::with_config(&cfg.model, cfg.seed);
    let mut trainer = ok(Trainer::new(cfg, model))?;
    let mut rows = Vec::new();
    ok(trainer.run(data, None, &mut |r| rows.push(r.csv_row())))?;
    Ok((ok(trainer.checkpoint().to_bytes())?, rows))
}

pub fn nan_clean_targets_do_not_matter() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scfg = tiny_synth();
    let data: Vec<AnnotatedImage> = (0..6).map(|_| synth_generate(&scfg, &mut rng).unwrap()).collect();
    let poisoned: Vec<AnnotatedImage> = data
        .iter()
        .map(|s| AnnotatedImage {
            clean: Some(Tensor::full(s.image.shape(), f64::NAN)),
            ..s.clone()
        })
        .collect();
    let absent: Vec<AnnotatedImage> = data.iter().map(|s| AnnotatedImage { clean: None, ..s.clone() }).collect();
    let reference = pretrain_trace(&data)?;
    ensure(pretrain_trace(&poisoned)? == reference, || "NaN clean targets changed pretraining".into())?;
    ensure(pretrain_trace(&absent)? == reference, || "missing clean targets changed pretraining".into())?;

    // the loss terms of one forward pass, batch by batch
    let (lw, fx) = (LossWeights::default(), FeatureExtractor::new());
    let model = small_model(4);
    let mut batch = random_batch(4, 0.3);
    let a = ok(pretrain_forward(&model, &batch, &lw, &fx, BmLoss::TextAware))?;
    batch.cleans = Some(Tensor::full(batch.images.shape(), f64::NAN));
    let b = ok(pretrain_forward(&model, &batch, &lw, &fx, BmLoss::TextAware))?;
    for (x, y) in [(&a.bm_out, &b.bm_out), (&a.pseudo, &b.pseudo), (&a.te_out, &b.te_out), (&a.l_bm.total, &b.l_bm.total), (&a.l_te.total, &b.l_te.total)] {
        ensure(bits(x) == bits(y), || "NaN clean batch changed a pretraining value".into())?;
    }
    Ok(format!("{} steps: checkpoint and loss rows bit-identical with NaN or missing clean targets", reference.1.len()))
}

/// Flat config for a corpus of 6 train and 3 test images at 16x16.
pub fn tiny_run_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(
        "seed = 3\ntrain_size = 6\ntest_size = 3\nimage_size = 16\nmin_boxes = 1\nmax_boxes = 2\n\
         box_width_min = 4\nbox_width_max = 7\nbox_height_min = 3\nbox_height_max = 5\n\
         batch_size = 4\npretrain_epochs = 2\nfinetune_epochs = 2\nwidths = [4, 8, 8]\n",
    )
    .expect("valid config");
    cfg.data_dir = root.join("corpus");
    cfg
}

pub fn read_tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn same_files(a: &Path, b: &Path, what: &str) -> Result<(), String> {
    let (ta, tb) = (read_tree(a), read_tree(b));
    ensure(!ta.is_empty() && ta == tb, || format!("{what}: {} and {} differ", a.display(), b.display()))
}

pub fn repeated_runs_are_byte_identical() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let root = dir.path();
    let cfg = tiny_run_config(root);
    ok(pipeline::synth(&cfg, &cfg.data_dir))?;
    let mut other = cfg.clone();
    other.data_dir = root.join("corpus2");
    ok(pipeline::synth(&other, &other.data_dir))?;
    let strip = |t: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        t.into_iter().filter(|(p, _)| p != Path::new(pipeline::CONFIG_SNAPSHOT)).collect()
    };
    ensure(strip(read_tree(&cfg.data_dir)) == strip(read_tree(&other.data_dir)), || "synth is not repeatable".into())?;

    for run in ["a", "b"] {
        let dir = root.join(run);
        ok(pipeline::train(&cfg, Stage::Pretrain, &Start::Fresh, &dir.join("pre"), None))?;
        let init = Start::Init(dir.join("pre").join(pipeline::CHECKPOINT_NAME));
        let ft = ok(pipeline::train(&cfg, Stage::Finetune, &init, &dir.join("ft"), None))?;
        ok(pipeline::eval(&cfg, &ft.checkpoint, None, TaskId::Te, true, &dir.join("eval")))?;
        let image = cfg.data_dir.join("test/images/img_0000.png");
        ok(pipeline::infer(&ft.checkpoint, &image, &dir.join("infer/out.png")))?;
    }
    for part in ["pre", "ft", "eval", "infer"] {
        same_files(&root.join("a").join(part), &root.join("b").join(part), part)?;
    }
    Ok("synth, pretrain, finetune, eval and infer outputs byte-identical across runs".into())
}

pub fn resume_is_bit_exact() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let root = dir.path();
    let cfg = tiny_run_config(root);
    ok(pipeline::synth(&cfg, &cfg.data_dir))?;
    // 2 batches per epoch: stop inside the first epoch and at an epoch edge
    for (stage, k) in [(Stage::Pretrain, 1), (Stage::Pretrain, 2), (Stage::Finetune, 3)] {
        let full = root.join(format!("{stage:?}_full"));
        let part = root.join(format!("{stage:?}_{k}"));
        ok(pipeline::train(&cfg, stage, &Start::Fresh, &full, None))?;
        let first = ok(pipeline::train(&cfg, stage, &Start::Fresh, &part, Some(k)))?;
        ensure(first.steps == k, || format!("stopped at step {} not {k}", first.steps))?;
        let resumed = ok(pipeline::train(&cfg, stage, &Start::Resume(first.checkpoint.clone()), &part, None))?;
        ensure(resumed.steps == 4, || format!("resumed run ended at step {}", resumed.steps))?;
        same_files(&full, &part, &format!("{stage:?} resumed at step {k}"))?;
    }
    Ok("resume at steps 1, 2 (pretrain) and 3 (finetune) matches uninterrupted runs".into())
}

pub fn pretraining_never_opens_clean_files() -> Outcome {
    let dir = ok(tempfile::tempdir())?;
    let cfg = tiny_run_config(dir.path());
    ok(pipeline::synth(&cfg, &cfg.data_dir))?;
    let out = ok(pipeline::train(&cfg, Stage::Pretrain, &Start::Fresh, &dir.path().join("pre"), None))?;
    let clean = out.files_read.iter().filter(|p| p.components().any(|c| c.as_os_str() == "clean")).count();
    ensure(clean == 0, || format!("pretraining opened {clean} clean files"))?;
    let ft = ok(pipeline::train(&cfg, Stage::Finetune, &Start::Fresh, &dir.path().join("ft"), None))?;
    let used = ft.files_read.iter().filter(|p| p.components().any(|c| c.as_os_str() == "clean")).count();
    ensure(used == cfg.train_size, || format!("finetuning opened {used} clean files"))?;
    Ok(format!("pretraining read {} files, none of them clean targets", out.files_read.len()))
}
