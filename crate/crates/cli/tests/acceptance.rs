//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Numbers on the command line pick a subset,
//! e.g. `cargo test -p ctsf-cli --test acceptance -- 1 7`.

#[path = "../../core/tests/oracles/mod.rs"]
mod oracles;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ctsf_core::boxes::{BBox, LabeledBox};
use ctsf_core::cls::{balanced_batches, patchify, train_classifier, ClsCheckpoint, ViT, ViTConfig};
use ctsf_core::dataset::{
    classifier_patches, detection_samples, generate_phantom, prepare_case, write_phantom_bundle, DetectionSample, Malignancy, NodulePatch,
    Phantom, PhantomSpec, BUNDLE_MASK, BUNDLE_VOLUME,
};
use ctsf_core::det::{assign_targets, decode_predictions, detection_loss, nms, train_detector, DetCheckpoint, DetNetConfig, Letterbox};
use ctsf_core::imaging::{clip_and_normalize_hu, hu_to_unit, resample_to_canonical, CtVolume, Geometry, LungMask, HU_WINDOW_MAX, HU_WINDOW_MIN};
use ctsf_core::metrics::{average_precision, confusion_and_scores, dice_score};
use ctsf_core::nn::{Graph, ParamStore, Tensor, Var};
use ctsf_core::pipeline::{evaluate_classification, evaluate_detection, run_inference, PipelineConfig, REPORT_FILE};
use ctsf_core::seg::{segment, train_segmenter, SegCheckpoint, SegNetConfig, SegVariant};
use ctsf_core::train::TrainConfig;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T>(r: ctsf_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Phantoms with one nodule each; the detector trains on their slices, the
/// segmenter on the first four, and the end-to-end case is drawn from those.
const DET_SEEDS: std::ops::Range<u64> = 100..108;
const SEG_PHANTOMS: usize = 4;
/// Extra four-nodule phantoms for the classifier.
const CLS_SEEDS: std::ops::Range<u64> = 200..230;
const CUBE: usize = 64;
const SEG_CUBE: usize = 32;

fn one_nodule_phantom(seed: u64) -> Phantom {
    generate_phantom(&PhantomSpec { seed, nodule_count: 1, ..Default::default() }).expect("phantom")
}

#[derive(Default)]
struct Fixtures {
    seg: Option<SegCheckpoint>,
    det: Option<DetCheckpoint>,
    cls: Option<ClsCheckpoint>,
}

// 1 ---------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_dice = 0.0f64;
    for _ in 0..512 {
        let (px, py) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let x = Array3::from_shape_fn((3, 3, 3), |_| u8::from(rng.random_bool(px)));
        let y = Array3::from_shape_fn((3, 3, 3), |_| u8::from(rng.random_bool(py)));
        let got = ok(dice_score(x.view(), y.view()))?;
        worst_dice = worst_dice.max((got - oracles::dice_by_sets(x.as_slice().unwrap(), y.as_slice().unwrap())).abs());
    }
    ensure!(worst_dice <= 1e-12, "dice differs from the set oracle by {worst_dice:e}");

    for _ in 0..512 {
        let n = rng.random_range(1..60);
        let pred: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let s = ok(confusion_and_scores(&pred, &truth))?;
        let (tp, tn, fp, fn_) = oracles::confusion_by_filtering(&pred, &truth);
        ensure!((s.counts.tp, s.counts.tn, s.counts.fp, s.counts.fn_) == (tp, tn, fp, fn_), "confusion counts differ on {pred:?} / {truth:?}");
        ensure!(s.accuracy == (tp + tn) as f64 / n as f64, "accuracy differs from counting");
        ensure!(s.precision == (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64), "precision differs from counting");
        ensure!(s.recall == (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64), "recall differs from counting");
    }

    let mut worst_ap = 0.0f64;
    for _ in 0..200 {
        let (d, g) = oracles::random_detection_instance(&mut rng, 10);
        let got = ok(average_precision(&d, &g, 0.5))?;
        match (got, oracles::ap_by_thresholds(&d, &g, 0.5)) {
            (Some(a), Some(b)) => worst_ap = worst_ap.max((a - b).abs()),
            (a, b) => ensure!(a == b, "AP defined-ness differs: {a:?} vs {b:?}"),
        }
    }
    ensure!(worst_ap <= 1e-9, "AP differs from the operating-point oracle by {worst_ap:e}");
    Ok(format!("max |dice - oracle| {worst_dice:.1e}, max |AP - oracle| {worst_ap:.1e} over 200 instances"))
}

// 2 ---------------------------------------------------------------------

fn preprocessing_exactness() -> Outcome {
    ensure!(hu_to_unit(HU_WINDOW_MIN) == 0.0 && hu_to_unit(HU_WINDOW_MAX) == 1.0, "window endpoints do not map to 0 and 1");
    let v = ok(CtVolume::new(Array3::from_shape_vec((1, 1, 4), vec![HU_WINDOW_MIN, HU_WINDOW_MAX, -5000.0, 5000.0]).unwrap(), Geometry::unit()))?;
    let n = ok(clip_and_normalize_hu(&v))?;
    ensure!(n.voxels().iter().copied().collect::<Vec<_>>() == [0.0, 1.0, 0.0, 1.0], "normalised endpoints {:?}", n.voxels());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut hu: Vec<f32> = (0..100_000).map(|_| rng.random_range(-3000.0..3000.0)).collect();
    hu.sort_by(f32::total_cmp);
    let mapped: Vec<f32> = hu.iter().map(|&h| hu_to_unit(h)).collect();
    ensure!(mapped.windows(2).all(|w| w[0] <= w[1]), "hu_to_unit is not monotone");
    ensure!(mapped.iter().all(|v| (0.0..=1.0).contains(v)), "hu_to_unit leaves [0, 1]");

    let mut worst_rt = 0.0f64;
    for _ in 0..10_000 {
        let g = ok(Geometry::new([0; 3].map(|_| rng.random_range(0.3..3.0)), [0; 3].map(|_| rng.random_range(-500.0..500.0))))?;
        let shape = [0; 3].map(|_| rng.random_range(1..600));
        let idx = [0, 1, 2].map(|a| rng.random_range(0.0..shape[a] as f64 - 1.0 + 1e-9));
        let back = ok(g.world_to_voxel(g.voxel_to_world(idx), shape))?;
        worst_rt = (0..3).map(|a| (back[a] - idx[a]).abs()).fold(worst_rt, f64::max);
    }
    ensure!(worst_rt <= 1e-9, "world/voxel round trip error {worst_rt:e}");

    let mut worst_extent = 0.0f64;
    for _ in 0..20 {
        let shape = [0; 3].map(|_| rng.random_range(8..48));
        let g = ok(Geometry::new([0; 3].map(|_| rng.random_range(0.5..2.5)), [0.0; 3]))?;
        let vol = ok(CtVolume::new(Array3::from_shape_fn((shape[0], shape[1], shape[2]), |_| rng.random_range(-1000.0..400.0)), g))?;
        let cube = rng.random_range(16..40);
        let r = ok(resample_to_canonical(&ok(clip_and_normalize_hu(&vol))?, None, cube))?;
        let (before, after) = (vol.extent(), r.volume.extent());
        for a in 0..3 {
            // the 1 mm isotropic step may move the extent by half a voxel;
            // the resize to the cube must then keep it exactly
            let err = (before[a] - after[a]).abs();
            ensure!(err <= 0.5 + 1e-9, "axis {a}: extent {} -> {} mm", before[a], after[a]);
            ensure!((after[a] - before[a].round().max(1.0)).abs() <= 1e-9, "axis {a}: cube resize moved the extent to {}", after[a]);
            worst_extent = worst_extent.max(err);
        }
    }
    Ok(format!("10^5 monotone values, round trip {worst_rt:.1e}, worst extent change {worst_extent:.3} mm"))
}

// 3 ---------------------------------------------------------------------

fn sphere_slicing() -> Outcome {
    let mut parts = Vec::new();
    for r in [3.0, 5.0, 10.0] {
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        let (integrated, _) = oracles::sphere_slice_volumes(r, 0.5);
        let rel = (integrated - exact).abs() / exact;
        ensure!(rel < 0.05, "r = {r} mm: disks integrate to {integrated:.2} vs {exact:.2}");
        parts.push(format!("r={r}: {:.2}%", 100.0 * rel));
    }
    Ok(parts.join(", "))
}

// 4 ---------------------------------------------------------------------

const FD_STEP: f64 = 1e-6;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

/// Worst relative error between analytic input gradients and central
/// differences of the scalar `loss`.
fn input_gradient_error(inputs: &[Tensor<f64>], loss: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) -> f64 {
    let store = ParamStore::<f64>::new();
    let value = |xs: &[Tensor<f64>]| {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let l = loss(&mut g, &vars);
        g.value(l).item()
    };
    let mut g = Graph::recording(&store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let l = loss(&mut g, &vars);
    let grads = g.backward(l);
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("input gradient");
        for i in 0..inputs[k].len() {
            let mut up = inputs.to_vec();
            up[k].data_mut()[i] += FD_STEP;
            let mut down = inputs.to_vec();
            down[k].data_mut()[i] -= FD_STEP;
            worst = worst.max(relative_error(analytic.data()[i], (value(&up) - value(&down)) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    let logits = Tensor::from_fn(&[2, 1, 3, 3, 3], |_| rng.random_range(-2.0..2.0));
    let target = Tensor::from_fn(&[2, 1, 3, 3, 3], |i| f64::from(u8::from(i % 3 != 1)));
    let dice = input_gradient_error(&[logits], |g, v| {
        let p = g.sigmoid(v[0]);
        g.dice_loss(p, &target, 1e-5)
    });

    let det_cfg = DetNetConfig { input_size: 32, ..Default::default() };
    let labels = vec![
        vec![LabeledBox { bbox: BBox::new(0.4, 0.5, 0.2, 0.25), class_id: 0 }],
        vec![LabeledBox { bbox: BBox::new(0.62, 0.3, 0.3, 0.22), class_id: 0 }, LabeledBox { bbox: BBox::new(0.2, 0.7, 0.15, 0.12), class_id: 0 }],
    ];
    let assignments = assign_targets(&det_cfg, &labels);
    let heads: Vec<Tensor<f64>> =
        det_cfg.grid_sizes().iter().map(|&gs| Tensor::from_fn(&[2, det_cfg.head_channels(), 1, gs, gs], |_| rng.random_range(-1.0..1.0))).collect();
    let boxes = input_gradient_error(&heads, |g, v| detection_loss(g, &[v[0], v[1], v[2]], &assignments, &det_cfg).0);

    let vit_cfg = ViTConfig {
        image_size: 2,
        patch_size: 1,
        projection_dim: 4,
        encoder_blocks: 1,
        attention_heads: 2,
        mlp_hidden: vec![4, 6],
        head_hidden: vec![5],
        class_count: 2,
        dropout: 0.0,
    };
    let mut store = ParamStore::<f64>::new();
    let vit = ok(ViT::build(&vit_cfg, &mut store, &mut rng))?;
    let tokens = Tensor::from_fn(&[3, 4, 1], |_| rng.random_range(-1.0..1.0));
    let classes = [0usize, 1, 1];
    let ce_of = |s: &ParamStore<f64>| {
        let mut g = Graph::inference(s);
        let x = g.input(tokens.clone());
        let z = vit.logits(&mut g, x);
        let l = g.cross_entropy(z, &classes);
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::recording(&store);
        let x = g.input(tokens.clone());
        let z = vit.logits(&mut g, x);
        let l = g.cross_entropy(z, &classes);
        g.backward(l).into_param_grads()
    };
    let mut vit_err = 0.0f64;
    for (id, grad) in &grads {
        for k in 0..grad.len() {
            let mut s = store.clone();
            s.get_mut(*id).data_mut()[k] += FD_STEP;
            let up = ce_of(&s);
            s.get_mut(*id).data_mut()[k] -= 2.0 * FD_STEP;
            let down = ce_of(&s);
            vit_err = vit_err.max(relative_error(grad.data()[k], (up - down) / (2.0 * FD_STEP)));
        }
    }
    for (name, err) in [("dice", dice), ("box/obj/cls", boxes), ("ViT cross-entropy", vit_err)] {
        ensure!(err <= 1e-3, "{name} loss gradient relative error {err:e}");
    }
    Ok(format!("relative error dice {dice:.1e}, detection loss {boxes:.1e}, ViT cross-entropy {vit_err:.1e}"))
}

// 5 ---------------------------------------------------------------------

fn seg_dataset() -> Result<Vec<(CtVolume, LungMask)>, String> {
    DET_SEEDS
        .take(SEG_PHANTOMS)
        .map(|s| {
            let p = one_nodule_phantom(s);
            let c = ok(prepare_case("seg", &p.volume, &p.mask, &p.annotations, SEG_CUBE))?;
            Ok((c.volume, c.mask))
        })
        .collect()
}

fn seg_hyper() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs: 300,
        max_steps: Some(300),
        validation_fraction: 0.0,
        target_train_score: Some(0.95),
        seed: 0,
        ..TrainConfig::segmentation()
    }
}

fn train_seg(variant: SegVariant, data: &[(CtVolume, LungMask)]) -> Result<(SegCheckpoint, f64), String> {
    let cfg = SegNetConfig { input_cube: SEG_CUBE, variant, ..Default::default() };
    let ckpt = ok(train_segmenter(data, &cfg, &seg_hyper()))?;
    let mut worst = f64::INFINITY;
    for (v, m) in data {
        worst = worst.min(ok(dice_score(ok(segment(v, &ckpt, 0.5))?.voxels().view(), m.voxels().view()))?);
    }
    Ok((ckpt, worst))
}

fn segmentation_overfit(fx: &mut Fixtures) -> Outcome {
    let t = Instant::now();
    let data = seg_dataset()?;
    let (residual, res_dice) = train_seg(SegVariant::Residual, &data)?;
    let res_steps = residual.meta.steps;
    fx.seg = Some(residual);
    let (plain, plain_dice) = train_seg(SegVariant::Plain, &data)?;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let msg = format!(
        "residual min Dice {res_dice:.4} ({res_steps} steps), plain min Dice {plain_dice:.4} ({} steps), cube {SEG_CUBE}, {minutes:.1} min",
        plain.meta.steps
    );
    ensure!(res_dice >= 0.95, "{msg}: residual below 0.95");
    ensure!(plain_dice >= 0.90, "{msg}: plain below 0.90");
    ensure!(minutes <= 60.0, "{msg}: over the 60 minute CPU budget");
    Ok(msg)
}

// 6 ---------------------------------------------------------------------

/// The four widest nodule cross-sections of each detection phantom.
fn det_dataset() -> Result<Vec<DetectionSample>, String> {
    let mut out = Vec::new();
    for s in DET_SEEDS {
        let p = one_nodule_phantom(s);
        let c = ok(prepare_case(&format!("phantom-{s}"), &p.volume, &p.mask, &p.annotations, CUBE))?;
        let (mut v, _) = ok(detection_samples(&c, 0))?;
        v.sort_by(|a, b| b.labels[0].w.total_cmp(&a.labels[0].w).then(a.slice.cmp(&b.slice)));
        out.extend(v.into_iter().take(4));
    }
    Ok(out)
}

fn det_config() -> DetNetConfig {
    DetNetConfig { input_size: CUBE, ..Default::default() }
}

fn det_hyper() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        learning_rate: 2e-3,
        epochs: 400,
        validation_fraction: 0.0,
        target_train_score: Some(0.95),
        seed: 0,
        ..TrainConfig::detection()
    }
}

fn detector_overfit(fx: &mut Fixtures) -> Outcome {
    let t = Instant::now();
    let samples = det_dataset()?;
    ensure!(samples.len() == 32 && samples.iter().all(|s| s.labels.len() == 1), "expected 32 single-nodule slices, got {}", samples.len());
    let ckpt = ok(train_detector(&samples, &det_config(), &det_hyper()))?;
    let eval = ok(evaluate_detection(&samples, &ckpt))?;
    let map50 = eval.map_50.unwrap_or(0.0);

    let cfg = ckpt.model.config().clone();
    let mut candidates = 0;
    for s in &samples {
        let (h, w) = s.image.dim();
        let canvas = ok(ok(Letterbox::new(h, w, cfg.input_size))?.apply(&s.image))?;
        let flat: Vec<f32> = canvas.iter().copied().collect();
        let raw = ckpt.model.raw_outputs(&[flat.as_slice()]);
        let dets = ok(decode_predictions(&[&raw[0], &raw[1], &raw[2]], &cfg, s.slice))?.remove(0);
        candidates += dets.len();
        ensure!(nms(&dets, cfg.nms_iou) == oracles::nms_by_repeated_max(&dets, cfg.nms_iou), "NMS differs from the oracle on slice {}", s.slice);
    }
    let msg = format!(
        "mAP@50 {map50:.3}, mAP@50:95 {:.3} after {} steps; NMS matched the oracle on {} slices ({candidates} candidates), {:.1} min",
        eval.map_50_95.unwrap_or(0.0),
        ckpt.meta.steps,
        samples.len(),
        t.elapsed().as_secs_f64() / 60.0
    );
    fx.det = Some(ckpt);
    ensure!(map50 >= 0.9, "{msg}: mAP@50 below 0.9");
    Ok(msg)
}

// 7 ---------------------------------------------------------------------

fn cls_dataset() -> Result<Vec<NodulePatch>, String> {
    let mut out = Vec::new();
    let specs = DET_SEEDS
        .map(|seed| PhantomSpec { seed, nodule_count: 1, ..Default::default() })
        .chain(CLS_SEEDS.map(|seed| PhantomSpec { seed, nodule_count: 4, ..Default::default() }));
    for spec in specs {
        let p = ok(generate_phantom(&spec))?;
        let c = ok(prepare_case(&spec.series_id(), &p.volume, &p.mask, &p.annotations, CUBE))?;
        out.extend(ok(classifier_patches(&c))?);
    }
    Ok(out)
}

fn cls_hyper() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        learning_rate: 1e-4,
        epochs: 100,
        validation_fraction: 0.0,
        target_train_score: Some(0.98),
        seed: 0,
        ..TrainConfig::classification()
    }
}

fn classifier_overfit(fx: &mut Fixtures) -> Outcome {
    let t = Instant::now();
    let cfg = ViTConfig::default();
    ensure!(cfg.token_count() == 64, "64x64 / patch 8 gives {} tokens", cfg.token_count());
    let tokens = ok(patchify(&Array2::zeros((64, 64)), 8))?;
    ensure!(tokens.dim() == (64, 64), "patchify shape {:?}", tokens.dim());

    let patches = cls_dataset()?;
    ensure!(patches.len() == 128, "expected 128 patches, got {}", patches.len());
    let labels: Vec<usize> = patches.iter().map(|p| usize::from(p.label == Malignancy::Malignant)).collect();
    let hyper = cls_hyper();
    for batch in ok(balanced_batches(&labels, 2, hyper.batch_size, 0))? {
        let malignant = batch.iter().filter(|&&i| labels[i] == 1).count();
        ensure!(2 * malignant == batch.len(), "unbalanced batch: {malignant} malignant of {}", batch.len());
    }
    let ckpt = ok(train_classifier(&patches, &cfg, &hyper))?;
    let acc = ok(evaluate_classification(&patches, &ckpt))?.accuracy;
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let msg = format!(
        "64 tokens; balanced batches; training accuracy {acc:.4} on 128 patches ({} malignant) after {} epochs, {minutes:.1} min",
        labels.iter().sum::<usize>(),
        ckpt.meta.epochs_run
    );
    fx.cls = Some(ckpt);
    ensure!(acc >= 0.98, "{msg}: accuracy below 0.98");
    ensure!(minutes <= 5.0, "{msg}: over the 5 minute budget");
    Ok(msg)
}

// 8 ---------------------------------------------------------------------

fn end_to_end(fx: &mut Fixtures) -> Outcome {
    if fx.seg.is_none() {
        fx.seg = Some(train_seg(SegVariant::Residual, &seg_dataset()?)?.0);
    }
    if fx.det.is_none() {
        fx.det = Some(ok(train_detector(&det_dataset()?, &det_config(), &det_hyper()))?);
    }
    if fx.cls.is_none() {
        fx.cls = Some(ok(train_classifier(&cls_dataset()?, &ViTConfig::default(), &cls_hyper()))?);
    }
    let seed = DET_SEEDS
        .take(SEG_PHANTOMS)
        .find(|&s| one_nodule_phantom(s).annotations[0].malignancy == Some(Malignancy::Malignant))
        .ok_or("no held-in phantom carries a malignant nodule")?;
    let spec = PhantomSpec { seed, nodule_count: 1, ..Default::default() };
    let phantom = one_nodule_phantom(seed);
    let truth = &phantom.annotations[0];

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let bundle = tmp.path().join("bundle");
    ok(write_phantom_bundle(&bundle, &phantom, &spec))?;
    let ck = tmp.path().join("checkpoints");
    ok(fx.seg.as_ref().unwrap().save(&ck.join("seg")))?;
    ok(fx.det.as_ref().unwrap().save(&ck.join("det")))?;
    ok(fx.cls.as_ref().unwrap().save(&ck.join("cls")))?;
    let mut config = PipelineConfig { cube: CUBE, ..Default::default() };
    config.paths.checkpoints.seg = ck.join("seg");
    config.paths.checkpoints.det = ck.join("det");
    config.paths.checkpoints.cls = ck.join("cls");
    let config_path = tmp.path().join("config.toml");
    fs::write(&config_path, ok(config.to_toml_string())?).map_err(|e| e.to_string())?;

    let case = ok(run_inference(&bundle.join(BUNDLE_VOLUME), Some(&bundle.join(BUNDLE_MASK)), &config))?;
    let r = &case.report;
    ensure!(!r.degenerate, "predicted lung mask is empty");
    let centre = ok(case.volume.geometry().world_to_voxel(truth.center, case.volume.shape()))?;
    let radius_vox = 0.5 * truth.diameter / case.volume.spacing()[0] + 1.5;
    let hit = r.detections.iter().zip(&r.nodules).find(|(d, n)| {
        let dist = (0..3).map(|a| (d.center_voxel[a] as f64 - centre[a]).powi(2)).sum::<f64>().sqrt();
        dist <= radius_vox && case.mask.contains(d.center_voxel) && n.label == Malignancy::Malignant
    });
    let report_json = serde_json::to_string_pretty(r).map_err(|e| e.to_string())? + "\n";

    let run_cli = |out: &Path| -> Result<Vec<u8>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_ctsf"))
            .args(["--config".as_ref(), config_path.as_os_str(), "infer".as_ref(), "--in".as_ref(), bundle.join(BUNDLE_VOLUME).as_os_str()])
            .args(["--mask".as_ref(), bundle.join(BUNDLE_MASK).as_os_str(), "--out".as_ref(), out.as_os_str()])
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "infer failed: {}", String::from_utf8_lossy(&status.stderr));
        fs::read(out.join(REPORT_FILE)).map_err(|e| e.to_string())
    };
    let first = run_cli(&tmp.path().join("run1"))?;
    let second = run_cli(&tmp.path().join("run2"))?;
    ensure!(first == second, "CaseReport bytes differ between runs");
    ensure!(first == report_json.as_bytes(), "CLI report differs from the in-process report");

    let msg = format!(
        "phantom-{seed}: {} detections, lung Dice {:.3}; malignant nodule at voxel {:?}",
        r.detections.len(),
        r.lung.dice_vs_reference.unwrap_or(0.0),
        centre.map(|c| c.round() as i64)
    );
    let (d, n) = hit.ok_or_else(|| format!("{msg}: no detection on the nodule classified malignant"))?;
    Ok(format!("{msg} found (score {:.2}, p_malignant {:.2}); re-run byte-identical", d.score, n.p_malignant))
}

// 9 ---------------------------------------------------------------------

fn hyperparameter_fidelity() -> Outcome {
    let snapshot = |t: &TrainConfig| format!("{}/{}/{}/{:?}", t.batch_size, t.learning_rate, t.epochs, t.optimizer);
    let got = [TrainConfig::segmentation(), TrainConfig::detection(), TrainConfig::classification()].map(|t| snapshot(&t));
    let want = ["4/0.0001/60/Adam", "64/0.01/600/Adam", "256/0.0001/60/Adam"];
    ensure!(got == want, "train configs {got:?}, expected {want:?}");
    let defaults = PipelineConfig::default();
    let from_config = [&defaults.train.seg, &defaults.train.det, &defaults.train.cls].map(snapshot);
    ensure!(from_config == want, "pipeline defaults {from_config:?}");
    ensure!(ViTConfig::default().patch_size == 8, "patch size {}", ViTConfig::default().patch_size);
    Ok(format!("{} | patch 8", want.join(", ")))
}

fn main() {
    let selected: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: u8| selected.is_empty() || selected.contains(&id);
    let mut fx = Fixtures::default();
    type Check = Box<dyn FnMut(&mut Fixtures) -> Outcome>;
    let criteria: Vec<(u8, &str, Check)> = vec![
        (1, "metric oracle equivalence", Box::new(|_| metric_oracles())),
        (2, "preprocessing exactness", Box::new(|_| preprocessing_exactness())),
        (3, "sphere-slicing geometry", Box::new(|_| sphere_slicing())),
        (4, "gradient checks", Box::new(|_| gradient_checks())),
        (5, "segmentation overfit", Box::new(segmentation_overfit)),
        (6, "detector overfit", Box::new(detector_overfit)),
        (7, "classifier overfit and shape", Box::new(classifier_overfit)),
        (8, "end-to-end inference", Box::new(end_to_end)),
        (9, "hyperparameter fidelity", Box::new(|_| hyperparameter_fidelity())),
    ];
    let budgets = [(1, 60.0), (4, 120.0)];
    let mut failed = 0;
    for (id, name, mut check) in criteria {
        if !wanted(id) {
            continue;
        }
        let t = Instant::now();
        let mut outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut fx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()));
        let secs = t.elapsed().as_secs_f64();
        if let Some((_, limit)) = budgets.iter().find(|(b, _)| *b == id) {
            if secs >= *limit && outcome.is_ok() {
                outcome = Err(format!("took {secs:.1} s, budget {limit} s"));
            }
        }
        match outcome {
            Ok(detail) => println!("PASS [{id}] {name}: {detail} ({secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{id}] {name}: {detail} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
