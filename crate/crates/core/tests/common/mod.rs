//! Criterion checks shared by the topical test files and the acceptance
//! target. Every check returns an [`Outcome`] instead of panicking so the
//! acceptance run can report all of them.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use image::{GrayImage, Luma, RgbImage};
use percept::augment::{apply_augmentation, transform_boxes, AugmentParams, MAX_ANGLE_DEG, SCALE_RANGE};
use percept::dataio::{
    box_distance_gt, corrupt_disparity, distance_from_disparity, synth_generate, CameraModel, DisparityMap,
    DisparityNoise, GtBox, Scene,
};
use percept::detect::{decode_box, encode_target, generate_priors, AnchorConfig, Detection, NormBox, PixelBox, PriorBox};
use percept::encoder::{Preset, STAGE_PREFIXES};
use percept::evalkit::{average_precision, distance_error, error_cdf, segmentation_scores, ImageDetection, ImageGt};
use percept::model::{batch_targets, image_tensor, Model, ModelConfig};
use percept::ndgrad::check::{check_gradients, weighted_sum, GradCheck};
use percept::ndgrad::{Graph, NormMode, ParamStore, Reduction, Tensor, Var};
use percept::nn::Forward;
use percept::train::{evaluate, Trainer};
use percept::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- priors

pub fn prior_count() -> Outcome {
    let t = Instant::now();
    let priors = generate_priors(1024, 512, &AnchorConfig::default());
    let elapsed = t.elapsed();
    match priors {
        Ok(p) => Outcome::new(
            p.len() == 12_264 && elapsed < Duration::from_secs(1),
            format!("{} priors at 1024x512 in {:.3}s (want 12264, < 1s)", p.len(), secs(elapsed)),
        ),
        Err(e) => Outcome::new(false, format!("generate_priors failed: {e}")),
    }
}

// ---------------------------------------------------------------- segmentation size

pub fn seg_output_size() -> Outcome {
    let t = Instant::now();
    let run = || -> percept::Result<Vec<usize>> {
        let mut store = ParamStore::<f32>::new();
        let model = Model::build(&ModelConfig::for_preset(Preset::Mini), &mut store, 0)?;
        let img = RgbImage::new(1024, 512);
        let mut f = Forward::new(&store, false);
        let x = f.graph.constant(image_tensor::<f32>(&[&img])?);
        let out = model.forward(&mut f, x, true)?;
        Ok(f.graph.shape(out.seg).to_vec())
    };
    let result = run();
    let elapsed = t.elapsed();
    match result {
        Ok(shape) => {
            let positions = shape[2] * shape[3];
            Outcome::new(
                shape[2..] == [128, 256] && positions == 32_768 && elapsed < Duration::from_secs(30),
                format!(
                    "logits {shape:?}, {positions} softmax positions in {:.2}s (want 128x256 = 32768, < 30s)",
                    secs(elapsed)
                ),
            )
        }
        Err(e) => Outcome::new(false, format!("seg forward failed: {e}")),
    }
}

// ---------------------------------------------------------------- gradient checks

pub const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, r)
}

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> percept::Result<Var>>;

struct OpCase {
    op: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: OpFn,
}

fn case(op: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> percept::Result<Var> + 'static) -> OpCase {
    OpCase {
        op,
        inputs,
        f: Box::new(f),
    }
}

/// Three seeded shapes for every differentiable operator, each reduced to a
/// scalar through fixed pseudo-random weights.
fn op_cases() -> Vec<OpCase> {
    let mut r = rng(0x6ad);
    let mut v = Vec::new();

    for (x, w, bias, stride, pad) in [
        ([1, 2, 5, 5], [3, 2, 3, 3], true, 1, 1),
        ([2, 3, 6, 7], [2, 3, 3, 3], true, 2, 1),
        ([1, 2, 6, 6], [2, 2, 2, 2], false, 2, 0),
    ] {
        let mut inputs = vec![randn(&x, &mut r), randn(&w, &mut r)];
        if bias {
            inputs.push(randn(&[w[0]], &mut r));
        }
        v.push(case("conv2d", inputs, move |g, a| {
            let y = g.conv2d(a[0], a[1], a.get(2).copied(), stride, pad)?;
            weighted_sum(g, y)
        }));
    }
    for (x, w, stride, groups) in [
        ([1, 2, 3, 3], [2, 1, 4, 4], 2, 2),
        ([1, 2, 3, 4], [2, 3, 2, 2], 2, 1),
        ([2, 2, 2, 3], [2, 1, 8, 8], 4, 2),
    ] {
        v.push(case("deconv2d", vec![randn(&x, &mut r), randn(&w, &mut r)], move |g, a| {
            let y = g.deconv2d(a[0], a[1], stride, groups)?;
            weighted_sum(g, y)
        }));
    }
    for (x, k, s) in [([1, 2, 6, 6], 2, 2), ([2, 1, 7, 5], 3, 2), ([1, 3, 4, 8], 4, 4)] {
        v.push(case("avgpool2d", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.avgpool2d(a[0], k, s)?;
            weighted_sum(g, y)
        }));
    }
    for (x, k, s, p) in [([1, 2, 6, 6], 2, 2, 0), ([1, 1, 7, 7], 3, 2, 1), ([2, 2, 5, 6], 2, 1, 0)] {
        v.push(case("maxpool2d", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.maxpool2d(a[0], k, s, p)?;
            weighted_sum(g, y)
        }));
    }
    for x in [[1, 1, 4, 4], [2, 3, 3, 5], [1, 2, 7, 2]] {
        v.push(case("relu", vec![randn(&x, &mut r)], |g, a| {
            let y = g.relu(a[0]);
            weighted_sum(g, y)
        }));
    }
    for x in [[1, 1, 4, 4], [2, 3, 3, 5], [1, 2, 7, 2]] {
        v.push(case("add", vec![randn(&x, &mut r), randn(&x, &mut r)], |g, a| {
            let y = g.add(a[0], a[1])?;
            weighted_sum(g, y)
        }));
        v.push(case("mul", vec![randn(&x, &mut r), randn(&x, &mut r)], |g, a| {
            let y = g.mul(a[0], a[1])?;
            weighted_sum(g, y)
        }));
    }
    for (x, factor) in [([1, 1, 4, 4], 0.5), ([2, 3, 3, 5], -3.0), ([1, 2, 7, 2], 10.0)] {
        v.push(case("scale", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.scale(a[0], factor);
            weighted_sum(g, y)
        }));
    }
    for x in [vec![5], vec![2, 3, 4], vec![1, 2, 3, 3]] {
        v.push(case("sum", vec![randn(&x, &mut r)], |g, a| {
            let y = g.mul(a[0], a[0])?;
            Ok(g.sum(y))
        }));
    }
    for (a_shape, b_shape, axis) in [([1, 2, 3, 3], [1, 3, 3, 3], 1), ([1, 2, 3, 3], [2, 2, 3, 3], 0), ([2, 1, 2, 3], [2, 1, 2, 2], 3)] {
        v.push(case("concat", vec![randn(&a_shape, &mut r), randn(&b_shape, &mut r)], move |g, a| {
            let y = g.concat(&[a[0], a[1]], axis)?;
            weighted_sum(g, y)
        }));
    }
    for x in [[2, 2, 3, 3], [4, 3, 2, 2], [1, 2, 5, 4]] {
        let c = x[1];
        v.push(case(
            "batch_norm(train)",
            vec![randn(&x, &mut r), randn(&[c], &mut r), randn(&[c], &mut r)],
            |g, a| {
                let (y, _) = g.batch_norm(a[0], a[1], a[2], NormMode::Train, 1e-5)?;
                weighted_sum(g, y)
            },
        ));
        let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
        v.push(case(
            "batch_norm(eval)",
            vec![randn(&x, &mut r), randn(&[c], &mut r), randn(&[c], &mut r)],
            move |g, a| {
                let (y, _) = g.batch_norm(a[0], a[1], a[2], NormMode::Eval { mean: &mean, var: &var }, 1e-5)?;
                weighted_sum(g, y)
            },
        ));
    }
    for (x, oh, ow) in [([1, 2, 3, 3], 6, 6), ([2, 1, 4, 6], 2, 3), ([1, 1, 3, 5], 7, 4)] {
        v.push(case("resize_nearest", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.resize_nearest(a[0], oh, ow)?;
            weighted_sum(g, y)
        }));
        v.push(case("resize_bilinear", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.resize_bilinear(a[0], oh, ow)?;
            weighted_sum(g, y)
        }));
    }
    for (x, to) in [(vec![2, 6], vec![3, 4]), (vec![1, 2, 3, 4], vec![6, 4]), (vec![24], vec![2, 3, 4])] {
        v.push(case("reshape", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.reshape(a[0], &to)?;
            weighted_sum(g, y)
        }));
    }
    for (x, axis, start, len) in [(vec![2, 5], 1, 1, 3), (vec![4, 2, 3], 0, 2, 2), (vec![1, 3, 4, 4], 3, 0, 1)] {
        v.push(case("slice", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.slice(a[0], axis, start, len)?;
            weighted_sum(g, y)
        }));
    }
    for (x, perm) in [(vec![2, 3], vec![1, 0]), (vec![2, 3, 4], vec![2, 0, 1]), (vec![1, 2, 3, 4], vec![0, 2, 3, 1])] {
        v.push(case("permute", vec![randn(&x, &mut r)], move |g, a| {
            let y = g.permute(a[0], &perm)?;
            weighted_sum(g, y)
        }));
    }
    for (shape, axis, reduction) in [
        (vec![6, 4], 1, Reduction::Sum),
        (vec![2, 3, 4], 2, Reduction::Mean),
        (vec![2, 5, 2, 3], 1, Reduction::Mean),
    ] {
        let classes = shape[axis];
        let positions: usize = shape.iter().product::<usize>() / classes;
        let targets: Vec<usize> = (0..positions)
            .map(|i| if i % 5 == 3 { 255 } else { r.random_range(0..classes) })
            .collect();
        v.push(case("softmax_cross_entropy", vec![randn(&shape, &mut r)], move |g, a| {
            g.softmax_cross_entropy(a[0], &targets, 255, axis, reduction)
        }));
    }
    for shape in [vec![7], vec![3, 5], vec![2, 2, 4]] {
        let p = Tensor::randn(shape.clone(), 2.0, &mut r);
        let t = Tensor::randn(shape, 2.0, &mut r);
        v.push(case("smooth_l1", vec![p, t], |g, a| g.smooth_l1(a[0], a[1])));
    }
    v
}

/// Maximum relative error per operator and shape.
pub fn gradient_checks() -> Vec<(String, percept::Result<GradCheck>)> {
    op_cases()
        .into_iter()
        .map(|c| {
            let shapes: Vec<String> = c.inputs.iter().map(|t| format!("{:?}", t.shape())).collect();
            let name = format!("{} {}", c.op, shapes.join(" "));
            let f = c.f;
            (name, check_gradients(&c.inputs, FD_STEP, move |g, a| f(g, a)))
        })
        .collect()
}

/// Gradient through `stop_gradient` must be exactly zero while its forward
/// value is the identity.
pub fn stop_gradient_blocks() -> bool {
    let mut r = rng(5);
    [[1, 2, 3, 3], [2, 1, 4, 2], [1, 1, 1, 5]].iter().all(|shape| {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(randn(shape, &mut r));
        let s = g.stop_gradient(x);
        let same = g.value(s) == g.value(x);
        let y = g.mul(s, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d/dx of stop(x)·x is stop(x) only.
        same && g.grad(&grads, x) == *g.value(x)
    })
}

pub fn gradient_soundness() -> Outcome {
    let t = Instant::now();
    let results = gradient_checks();
    let mut worst = (String::new(), 0.0f64);
    let mut failures = Vec::new();
    let mut per_op = std::collections::BTreeMap::<&str, usize>::new();
    for (name, r) in &results {
        let op = name.split(' ').next().unwrap_or("");
        match r {
            Ok(c) => {
                *per_op.entry(op).or_default() += 1;
                if c.max_rel_error > worst.1 {
                    worst = (name.clone(), c.max_rel_error);
                }
                if !(c.max_rel_error < GRAD_TOL) {
                    failures.push(format!("{name}: {:.2e}", c.max_rel_error));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    let stop_ok = stop_gradient_blocks();
    let min_shapes = per_op.values().copied().min().unwrap_or(0);
    let elapsed = t.elapsed();
    Outcome::new(
        failures.is_empty() && stop_ok && min_shapes >= 3 && elapsed < Duration::from_secs(120),
        format!(
            "{} ops x >= {min_shapes} shapes, worst rel err {:.2e} ({}), stop_gradient exact: {stop_ok}, {:.1}s{}",
            per_op.len(),
            worst.1,
            worst.0,
            secs(elapsed),
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- gradient block

pub struct BlockReport {
    pub w_seg: f64,
    /// Largest |∂(w·L_seg)/∂θ| over encoder blocks 1–4.
    pub seg_only_max: f64,
    /// Largest |∂L_total/∂θ − ∂L_det/∂θ| over encoder blocks 1–4.
    pub total_vs_det: f64,
    /// Largest |∂(w·L_seg)/∂θ| over `res5`, to show the loss does reach the encoder.
    pub res5_seg_max: f64,
}

pub fn is_blocked_param(name: &str) -> bool {
    STAGE_PREFIXES[..4].iter().any(|p| name.starts_with(p))
}

/// Gradients of the three objectives on a mini model in `f64`.
pub fn gradient_block(w_seg: f64, block: bool) -> percept::Result<BlockReport> {
    let mut store = ParamStore::<f64>::new();
    let model = Model::build(&ModelConfig::for_preset(Preset::Mini), &mut store, 11)?;
    let scenes = synth_generate(21, 2, (128, 128), CameraModel::scaled_to_width(128))?;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let priors = model.priors(128, 128)?;
    let targets = batch_targets(&refs, &priors)?;
    let images: Vec<&RgbImage> = scenes.iter().map(|s| &s.image).collect();
    let tensor = image_tensor::<f64>(&images)?;

    // One graph per objective so every backward sees only its own loss.
    let grads_of = |which: u8| -> percept::Result<Vec<(String, Tensor<f64>)>> {
        let mut f = Forward::new(&store, true);
        let (_, l) = model.losses(&mut f, tensor.clone(), &targets, w_seg, block)?;
        let loss = match which {
            0 => l.total,
            1 => f.graph.add(l.l_cls, l.l_reg)?,
            _ => f.graph.scale(l.l_seg, w_seg),
        };
        let (graph, _) = f.finish();
        let grads = graph.backward(loss)?;
        Ok(graph
            .param_grads(&grads)
            .into_iter()
            .map(|(id, t)| (store.name(id).to_string(), t))
            .collect())
    };
    let total = grads_of(0)?;
    let det = grads_of(1)?;
    let seg = grads_of(2)?;
    let lookup = |set: &[(String, Tensor<f64>)], name: &str| set.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone());

    let mut report = BlockReport {
        w_seg,
        seg_only_max: 0.0,
        total_vs_det: 0.0,
        res5_seg_max: 0.0,
    };
    for id in store.ids().filter(|&id| store.is_trainable(id)) {
        let name = store.name(id);
        let zeros = Tensor::zeros(store.get(id).shape().to_vec());
        let s = lookup(&seg, name).unwrap_or_else(|| zeros.clone());
        let max_abs = s.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if is_blocked_param(name) {
            report.seg_only_max = report.seg_only_max.max(max_abs);
            let t = lookup(&total, name).unwrap_or_else(|| zeros.clone());
            let d = lookup(&det, name).unwrap_or(zeros);
            report.total_vs_det = report.total_vs_det.max(t.max_abs_diff(&d));
        } else if name.starts_with(STAGE_PREFIXES[4]) {
            report.res5_seg_max = report.res5_seg_max.max(max_abs);
        }
    }
    Ok(report)
}

pub const BLOCK_TOL: f64 = 1e-12;

pub fn gradient_block_contract() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for w in [1.0, 4.0, 10.0] {
        match gradient_block(w, true) {
            Ok(r) => {
                let ok = r.seg_only_max == 0.0 && r.total_vs_det <= BLOCK_TOL && r.res5_seg_max > 0.0;
                pass &= ok;
                parts.push(format!(
                    "w_seg={w}: seg-only max {:.1e}, |total-det| {:.1e}, res5 seg grad {:.1e}",
                    r.seg_only_max, r.total_vs_det, r.res5_seg_max
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("w_seg={w}: {e}"));
            }
        }
    }
    Outcome::new(pass, parts.join("; "))
}

// ---------------------------------------------------------------- augmentation

pub const AUGMENT_DRAWS: u64 = 1000;

/// Single solid object of segmentation id 13 on a class-0 canvas.
pub fn single_object_scene(r: &mut ChaCha8Rng, width: u32, height: u32) -> Scene {
    let w = r.random_range(8.0..width as f64 / 2.0);
    let h = r.random_range(8.0..height as f64 / 2.0);
    let b = GtBox {
        class: 3,
        x: r.random_range(0.0..width as f64 - w),
        y: r.random_range(0.0..height as f64 - h),
        w,
        h,
        depth: Some(r.random_range(3.0..60.0)),
    };
    let mut mask = GrayImage::new(width, height);
    let (xs, ys) = b.pixel_span(width, height);
    for y in ys {
        for x in xs.clone() {
            mask.put_pixel(x, y, Luma([13]));
        }
    }
    Scene {
        name: "single".into(),
        image: RgbImage::new(width, height),
        boxes: vec![b],
        mask,
        disparity: DisparityMap::new(width, height),
        camera: CameraModel::scaled_to_width(width as usize),
    }
}

/// Largest distance (pixels) by which an object pixel lies outside its box's
/// pixel span; 0 when all are inside.
pub fn coherence_violation(scene: &Scene, seg_id: u8) -> f64 {
    let (w, h) = scene.mask.dimensions();
    let spans: Vec<_> = scene.boxes.iter().map(|b| b.pixel_span(w, h)).collect();
    let mut worst = 0.0f64;
    for (x, y, p) in scene.mask.enumerate_pixels() {
        if p[0] != seg_id {
            continue;
        }
        let d = spans
            .iter()
            .map(|(xs, ys)| {
                let dx = (xs.start as f64 - x as f64).max(x as f64 + 1.0 - xs.end as f64).max(0.0);
                let dy = (ys.start as f64 - y as f64).max(y as f64 + 1.0 - ys.end as f64).max(0.0);
                dx.max(dy)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(d);
    }
    worst
}

pub struct AugmentLaws {
    pub draws: u64,
    pub rotation_depth_changes: usize,
    pub resize_depth_max_rel: f64,
    pub size_depth_max_rel: f64,
    pub size_depth_checked: usize,
    pub coherence_worst_px: f64,
    pub boxes_checked: usize,
}

pub fn augmentation_laws(draws: u64) -> percept::Result<AugmentLaws> {
    let (w, h) = (256usize, 128usize);
    let scenes = synth_generate(3, 10, (w, h), CameraModel::scaled_to_width(w))?;
    let mut laws = AugmentLaws {
        draws,
        rotation_depth_changes: 0,
        resize_depth_max_rel: 0.0,
        size_depth_max_rel: 0.0,
        size_depth_checked: 0,
        coherence_worst_px: 0.0,
        boxes_checked: 0,
    };
    let mut r = rng(0xa11);
    for i in 0..draws {
        let scene = &scenes[(i % scenes.len() as u64) as usize];
        let drawn = AugmentParams::draw(i);

        // Mirror and rotation alone.
        let rot = AugmentParams {
            scale_x: 1.0,
            scale_y: 1.0,
            ..drawn
        };
        for (before, after) in scene.boxes.iter().zip(transform_boxes(&scene.boxes, &rot, w, h)) {
            if let Some(a) = after {
                laws.boxes_checked += 1;
                if a.depth != before.depth {
                    laws.rotation_depth_changes += 1;
                }
            }
        }

        // Uniform resize.
        let s = r.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let resize = AugmentParams {
            flip: false,
            angle_deg: 0.0,
            scale_x: s,
            scale_y: s,
            seed: drawn.seed,
        };
        for (before, after) in scene.boxes.iter().zip(transform_boxes(&scene.boxes, &resize, w, h)) {
            let (Some(a), Some(d0)) = (after, before.depth) else { continue };
            let d1 = a.depth.expect("depth kept");
            laws.resize_depth_max_rel = laws.resize_depth_max_rel.max(((d1 - d0 / s) / (d0 / s)).abs());
            let unclipped = (a.w - s * before.w).abs() < 1e-9 && (a.h - s * before.h).abs() < 1e-9;
            if unclipped {
                laws.size_depth_checked += 1;
                let p0 = before.h * d0;
                let p1 = a.h * d1;
                laws.size_depth_max_rel = laws.size_depth_max_rel.max(((p1 - p0) / p0).abs());
            }
        }

        // Full draw on a single-object scene: instance pixels stay inside the box.
        let single = single_object_scene(&mut r, w as u32, h as u32);
        let out = apply_augmentation(&single, &drawn)?;
        laws.coherence_worst_px = laws.coherence_worst_px.max(coherence_violation(&out, 13));
    }
    Ok(laws)
}

pub const SIZE_DEPTH_TOL: f64 = 1e-9;

pub fn augmentation_depth_laws() -> Outcome {
    match augmentation_laws(AUGMENT_DRAWS) {
        Ok(l) => Outcome::new(
            l.rotation_depth_changes == 0
                && l.resize_depth_max_rel <= SIZE_DEPTH_TOL
                && l.size_depth_max_rel <= SIZE_DEPTH_TOL
                && l.size_depth_checked > 0
                && l.coherence_worst_px <= 1.0,
            format!(
                "{} draws: {} rotated/mirrored boxes with changed depth (of {}), D->D/s max rel err {:.1e}, height*depth max rel drift {:.1e} over {} boxes, mask outside box by <= {} px",
                l.draws,
                l.rotation_depth_changes,
                l.boxes_checked,
                l.resize_depth_max_rel,
                l.size_depth_max_rel,
                l.size_depth_checked,
                l.coherence_worst_px
            ),
        ),
        Err(e) => Outcome::new(false, format!("augmentation failed: {e}")),
    }
}

// ---------------------------------------------------------------- ground truth

pub struct DepthRecovery {
    pub boxes: usize,
    pub clean_max_rel: f64,
    pub noisy_max_rel: f64,
    pub noisy_missing: usize,
}

pub const NOISE: DisparityNoise = DisparityNoise { invalid: 0.2, salt: 0.1 };

pub fn depth_recovery(scenes: usize) -> percept::Result<DepthRecovery> {
    let set = synth_generate(44, scenes, (256, 128), CameraModel::scaled_to_width(256))?;
    let mut out = DepthRecovery {
        boxes: 0,
        clean_max_rel: 0.0,
        noisy_max_rel: 0.0,
        noisy_missing: 0,
    };
    for (i, scene) in set.iter().enumerate() {
        let mut noisy = scene.clone();
        let mut r = rng(1000 + i as u64);
        corrupt_disparity(&mut noisy.disparity, NOISE, &mut r);
        for b in &scene.boxes {
            let planted = b.depth.expect("synthetic boxes carry depth");
            out.boxes += 1;
            let clean = box_distance_gt(scene, b).map_or(f64::INFINITY, |d| ((d - planted) / planted).abs());
            out.clean_max_rel = out.clean_max_rel.max(clean);
            match box_distance_gt(&noisy, b) {
                Some(d) => out.noisy_max_rel = out.noisy_max_rel.max(((d - planted) / planted).abs()),
                None => out.noisy_missing += 1,
            }
        }
    }
    Ok(out)
}

/// Closed-form cases of the distance and error formulas, compared exactly.
pub fn formula_cases() -> Vec<(&'static str, bool)> {
    let cam = |b, f| CameraModel::new(b, f).unwrap();
    vec![
        ("b=0.2 f=2000 d=100 -> 4 m", distance_from_disparity(&cam(0.2, 2000.0), 100.0).ok() == Some(4.0)),
        ("b=0.22 f=2262 d=62.205 -> 8 m", distance_from_disparity(&cam(0.22, 2262.0), 62.205).ok() == Some(8.0)),
        ("d=0 rejected", distance_from_disparity(&cam(0.2, 2000.0), 0.0).is_err()),
        ("d<0 rejected", distance_from_disparity(&cam(0.2, 2000.0), -1.0).is_err()),
        ("est 11 gt 10 -> 0.1", distance_error(11.0, 10.0).ok() == Some(0.1)),
        ("est 8 gt 10 -> 0.2", distance_error(8.0, 10.0).ok() == Some(0.2)),
        ("est = gt -> 0", distance_error(7.5, 7.5).ok() == Some(0.0)),
        ("gt 0 rejected", distance_error(1.0, 0.0).is_err()),
    ]
}

pub fn ground_truth_pipeline() -> Outcome {
    let cases = formula_cases();
    let failed: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
    match depth_recovery(100) {
        Ok(d) => Outcome::new(
            failed.is_empty() && d.clean_max_rel == 0.0 && d.noisy_max_rel < 0.05 && d.noisy_missing == 0,
            format!(
                "{}/{} formula cases exact; 100 scenes, {} boxes: noise-free max rel err {:e}, 20% invalid + 10% salt max rel err {:.2e}{}",
                cases.len() - failed.len(),
                cases.len(),
                d.boxes,
                d.clean_max_rel,
                d.noisy_max_rel,
                if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
            ),
        ),
        Err(e) => Outcome::new(false, format!("synthetic generation failed: {e}")),
    }
}

// ---------------------------------------------------------------- metric oracles

/// IoU of integer-cornered boxes by counting unit cells.
pub fn cell_iou(a: [i32; 4], b: [i32; 4]) -> f64 {
    let inside = |bx: [i32; 4], x: i32, y: i32| x >= bx[0] && x < bx[2] && y >= bx[1] && y < bx[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for y in a[1].min(b[1])..a[3].max(b[3]) {
        for x in a[0].min(b[0])..a[2].max(b[2]) {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn int_box(r: &mut ChaCha8Rng, max: i32) -> [i32; 4] {
    let x0 = r.random_range(0..max - 2);
    let y0 = r.random_range(0..max - 2);
    [x0, y0, r.random_range(x0 + 1..=max), r.random_range(y0 + 1..=max)]
}

fn pixel(b: [i32; 4]) -> PixelBox {
    PixelBox {
        x: b[0] as f64,
        y: b[1] as f64,
        w: (b[2] - b[0]) as f64,
        h: (b[3] - b[1]) as f64,
    }
}

pub struct DetInstance {
    pub dets: Vec<ImageDetection>,
    pub gts: Vec<ImageGt>,
    /// Integer corners, parallel to `dets` / `gts`.
    pub det_boxes: Vec<[i32; 4]>,
    pub gt_boxes: Vec<[i32; 4]>,
}

pub fn det_instance(seed: u64, classes: usize) -> DetInstance {
    let mut r = rng(seed);
    let images = r.random_range(1..=3);
    let mut inst = DetInstance {
        dets: Vec::new(),
        gts: Vec::new(),
        det_boxes: Vec::new(),
        gt_boxes: Vec::new(),
    };
    for image in 0..images {
        let n_gt = r.random_range(0..=6);
        let mut local = Vec::new();
        for _ in 0..n_gt {
            // Mix of regular and sub-100 px (ignored) objects.
            let b = if r.random_bool(0.2) {
                let x = r.random_range(0..50);
                let y = r.random_range(0..50);
                [x, y, x + r.random_range(2..9), y + r.random_range(2..9)]
            } else {
                int_box(&mut r, 64)
            };
            let class = r.random_range(1..=classes);
            let p = pixel(b);
            inst.gts.push(ImageGt {
                image,
                gt: GtBox {
                    class,
                    x: p.x,
                    y: p.y,
                    w: p.w,
                    h: p.h,
                    depth: None,
                },
            });
            inst.gt_boxes.push(b);
            local.push((b, class));
        }
        for _ in 0..r.random_range(0..=10) {
            let (b, class) = match local.get(r.random_range(0..local.len().max(1))) {
                Some(&(g, c)) if r.random_bool(0.7) => {
                    let mut j = |v: i32| v + r.random_range(-3..=3);
                    let (x0, y0) = (j(g[0]), j(g[1]));
                    let (x1, y1) = (j(g[2]).max(x0 + 1), j(g[3]).max(y0 + 1));
                    let c = if r.random_bool(0.85) { c } else { r.random_range(1..=classes) };
                    ([x0, y0, x1, y1], c)
                }
                _ => (int_box(&mut r, 64), r.random_range(1..=classes)),
            };
            inst.dets.push(ImageDetection {
                image,
                det: Detection {
                    class,
                    score: r.random(),
                    bbox: pixel(b),
                    depth: 1.0,
                },
            });
            inst.det_boxes.push(b);
        }
    }
    inst
}

/// Brute-force greedy matching of one class by cell-count IoU, in score
/// order: `(detection index, Some(true) for TP, Some(false) for FP, None
/// when it only overlaps an ignored ground truth)`.
pub fn oracle_outcomes(inst: &DetInstance, class: usize, iou_thr: f64, ignore_area: f64) -> Vec<(usize, Option<bool>)> {
    let gts: Vec<usize> = (0..inst.gts.len()).filter(|&j| inst.gts[j].gt.class == class).collect();
    let ignored = |j: usize| {
        let b = inst.gt_boxes[j];
        (((b[2] - b[0]) * (b[3] - b[1])) as f64) < ignore_area
    };
    let mut dets: Vec<usize> = (0..inst.dets.len()).filter(|&i| inst.dets[i].det.class == class).collect();
    dets.sort_by(|&a, &b| inst.dets[b].det.score.partial_cmp(&inst.dets[a].det.score).unwrap().then(a.cmp(&b)));
    let mut used = vec![false; inst.gts.len()];
    let mut out = Vec::new();
    for &i in &dets {
        let image = inst.dets[i].image;
        let mut best: Option<(usize, f64)> = None;
        for &j in &gts {
            if inst.gts[j].image != image || used[j] || ignored(j) {
                continue;
            }
            let iou = cell_iou(inst.det_boxes[i], inst.gt_boxes[j]);
            if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            out.push((i, Some(true)));
        } else if gts
            .iter()
            .any(|&j| inst.gts[j].image == image && ignored(j) && cell_iou(inst.det_boxes[i], inst.gt_boxes[j]) >= iou_thr)
        {
            out.push((i, None));
        } else {
            out.push((i, Some(false)));
        }
    }
    out
}

/// Brute-force AP: each true positive contributes `1/n_gt` times the best
/// precision at or after its rank.
pub fn ap_oracle(inst: &DetInstance, class: usize, iou_thr: f64, ignore_area: f64) -> Option<f64> {
    let n_gt = (0..inst.gts.len())
        .filter(|&j| {
            let b = inst.gt_boxes[j];
            inst.gts[j].gt.class == class && (((b[2] - b[0]) * (b[3] - b[1])) as f64) >= ignore_area
        })
        .count();
    if n_gt == 0 {
        return None;
    }
    let flags: Vec<bool> = oracle_outcomes(inst, class, iou_thr, ignore_area).into_iter().filter_map(|(_, o)| o).collect();
    let precision: Vec<f64> = (0..flags.len())
        .map(|k| flags[..=k].iter().filter(|&&f| f).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..flags.len() {
        if flags[k] {
            let best = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best / n_gt as f64;
        }
    }
    Some(ap)
}

/// `F(x)` by direct counting at every grid point.
pub fn cdf_oracle(errors: &[f64]) -> Vec<(f64, f64)> {
    (0..=100)
        .map(|i| {
            let x = i as f64 / 100.0;
            let n = errors.iter().filter(|&&e| e <= x).count();
            (x, if errors.is_empty() { 0.0 } else { n as f64 / errors.len() as f64 })
        })
        .collect()
}

/// Per-class IoU, mIoU over classes present in the ground truth, and pixel
/// accuracy, by counting pixel pairs.
pub fn seg_oracle(pred: &[Vec<u8>], gt: &[Vec<u8>], classes: usize) -> (Vec<Option<f64>>, f64, f64) {
    let mut ious = Vec::new();
    for c in 0..classes as u8 {
        let (mut tp, mut fp, mut fn_, mut present) = (0u64, 0u64, 0u64, false);
        for (p, g) in pred.iter().zip(gt) {
            for (&a, &b) in p.iter().zip(g) {
                if b == 255 {
                    continue;
                }
                present |= b == c;
                tp += (a == c && b == c) as u64;
                fp += (a == c && b != c) as u64;
                fn_ += (a != c && b == c) as u64;
            }
        }
        ious.push(present.then(|| tp as f64 / (tp + fp + fn_) as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let miou = present.iter().sum::<f64>() / present.len().max(1) as f64;
    let (mut right, mut valid) = (0u64, 0u64);
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.iter().zip(g) {
            if b != 255 {
                valid += 1;
                right += (a == b) as u64;
            }
        }
    }
    (ious, miou, right as f64 / valid.max(1) as f64)
}

pub const ORACLE_TOL: f64 = 1e-10;
pub const ORACLE_INSTANCES: u64 = 50;

pub struct OracleGaps {
    pub ap: f64,
    pub ap_presence_mismatch: usize,
    pub cdf: f64,
    pub box_iou: f64,
    pub seg: f64,
}

pub fn oracle_gaps(instances: u64) -> OracleGaps {
    let mut gaps = OracleGaps {
        ap: 0.0,
        ap_presence_mismatch: 0,
        cdf: 0.0,
        box_iou: 0.0,
        seg: 0.0,
    };
    let classes = 3;
    for seed in 0..instances {
        let inst = det_instance(seed, classes);
        let aps = average_precision(&inst.dets, &inst.gts, classes, 0.5, 100.0);
        for a in &aps {
            match (a.ap, ap_oracle(&inst, a.class, 0.5, 100.0)) {
                (Some(x), Some(y)) => gaps.ap = gaps.ap.max((x - y).abs()),
                (None, None) => {}
                _ => gaps.ap_presence_mismatch += 1,
            }
        }

        let mut r = rng(7_000 + seed);
        let n = r.random_range(0..40);
        let errors: Vec<f64> = (0..n)
            .map(|_| if r.random_bool(0.3) { r.random_range(0..=110) as f64 / 100.0 } else { r.random_range(0.0..1.2) })
            .collect();
        for ((x, f), (xo, fo)) in error_cdf(&errors).iter().zip(cdf_oracle(&errors)) {
            gaps.cdf = gaps.cdf.max((x - xo).abs()).max((f - fo).abs());
        }
        if error_cdf(&errors).len() != 101 {
            gaps.cdf = f64::INFINITY;
        }

        for _ in 0..20 {
            let (a, b) = (int_box(&mut r, 24), int_box(&mut r, 24));
            gaps.box_iou = gaps.box_iou.max((pixel(a).iou(&pixel(b)) - cell_iou(a, b)).abs());
        }

        let k = 5u8;
        let images = r.random_range(1..=3);
        let gt: Vec<Vec<u8>> = (0..images)
            .map(|_| (0..32 * 32).map(|_| if r.random_bool(0.05) { 255 } else { r.random_range(0..k) }).collect())
            .collect();
        let pred: Vec<Vec<u8>> = gt
            .iter()
            .map(|g| g.iter().map(|&v| if v != 255 && r.random_bool(0.6) { v } else { r.random_range(0..k) }).collect())
            .collect();
        let pr: Vec<&[u8]> = pred.iter().map(|v| v.as_slice()).collect();
        let gr: Vec<&[u8]> = gt.iter().map(|v| v.as_slice()).collect();
        let got = segmentation_scores(&pr, &gr, k as usize).expect("equal extents");
        let (ious, miou, acc) = seg_oracle(&pred, &gt, k as usize);
        for (a, b) in got.iou.iter().zip(&ious) {
            match (a, b) {
                (Some(x), Some(y)) => gaps.seg = gaps.seg.max((x - y).abs()),
                (None, None) => {}
                _ => gaps.seg = f64::INFINITY,
            }
        }
        gaps.seg = gaps.seg.max((got.mean_iou - miou).abs()).max((got.pixel_accuracy - acc).abs());
    }
    gaps
}

pub fn metric_oracles() -> Outcome {
    let g = oracle_gaps(ORACLE_INSTANCES);
    Outcome::new(
        g.ap <= ORACLE_TOL && g.ap_presence_mismatch == 0 && g.cdf <= ORACLE_TOL && g.box_iou <= ORACLE_TOL && g.seg <= ORACLE_TOL,
        format!(
            "{ORACLE_INSTANCES} instances, max |impl - oracle|: AP {:.1e}, CDF {:.1e}, box IoU {:.1e}, seg IoU/mIoU/acc {:.1e} (tol 1e-10)",
            g.ap, g.cdf, g.box_iou, g.seg
        ),
    )
}

// ---------------------------------------------------------------- overfit

pub const OVERFIT_STEPS: usize = 1000;
pub const OVERFIT_LR: f64 = 0.01;

pub fn overfit_config() -> RunConfig {
    let steps_per_epoch = 4;
    let epochs = OVERFIT_STEPS / steps_per_epoch;
    RunConfig {
        preset: Preset::Mini,
        input_size: (256, 128),
        lr: OVERFIT_LR,
        lr_milestones: vec![epochs * 6 / 10, epochs * 85 / 100],
        epochs,
        augment: false,
        seed: 0,
        max_steps: Some(OVERFIT_STEPS),
        ..RunConfig::default()
    }
}

pub fn overfit_scenes() -> Vec<Scene> {
    synth_generate(1, 8, (256, 128), CameraModel::scaled_to_width(256)).expect("valid size")
}

pub fn end_to_end_overfit() -> Outcome {
    let t = Instant::now();
    let run = || -> percept::Result<(usize, percept::evalkit::MetricsReport)> {
        let scenes = overfit_scenes();
        let cfg = overfit_config();
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(&scenes, |_| Ok(()), |_| Ok(()))?;
        let report = evaluate(&trainer.model, &trainer.store, &scenes, 2)?;
        Ok((trainer.steps_done(), report))
    };
    match run() {
        Ok((steps, r)) => {
            let elapsed = t.elapsed();
            let depth = r.mean_distance_error.unwrap_or(f64::INFINITY);
            Outcome::new(
                steps <= 2000
                    && r.map >= 0.9
                    && depth <= 0.10
                    && r.seg.pixel_accuracy >= 0.90
                    && elapsed <= Duration::from_secs(15 * 60),
                format!(
                    "{steps} steps in {:.0}s: mAP@0.5 {:.3} (>= 0.9), mean rel depth err {:.3} over {} pairs (<= 0.10), pixel acc {:.3} (>= 0.90), mIoU {:.3}",
                    secs(elapsed),
                    r.map,
                    depth,
                    r.depth_pairs,
                    r.seg.pixel_accuracy,
                    r.seg.mean_iou
                ),
            )
        }
        Err(e) => Outcome::new(false, format!("overfit run failed: {e}")),
    }
}

// ---------------------------------------------------------------- codec

pub const CODEC_TOL: f64 = 1e-6;

pub fn random_prior(r: &mut ChaCha8Rng) -> PriorBox {
    PriorBox {
        cx: r.random_range(0.0..1.0),
        cy: r.random_range(0.0..1.0),
        w: r.random_range(0.02..1.2),
        h: r.random_range(0.02..1.2),
        depth_ref: r.random_range(2.0..40.0),
    }
}

pub fn random_gt(r: &mut ChaCha8Rng) -> NormBox {
    NormBox {
        cx: r.random_range(0.0..1.0),
        cy: r.random_range(0.0..1.0),
        w: r.random_range(0.005..1.0),
        h: r.random_range(0.005..1.0),
    }
}

/// Largest roundtrip error over `n` seeded triples: box coordinates
/// absolute, depth relative.
pub fn codec_roundtrip_error(n: usize) -> percept::Result<f64> {
    let mut r = rng(0xc0dec);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let prior = random_prior(&mut r);
        let gt = random_gt(&mut r);
        let depth = r.random_range(1.0..150.0);
        let t = encode_target(&prior, &gt, Some(depth), 1)?;
        let (b, d) = decode_box(&prior, &t.regressors());
        let e = [
            (b.cx - gt.cx).abs(),
            (b.cy - gt.cy).abs(),
            (b.w - gt.w).abs(),
            (b.h - gt.h).abs(),
            ((d - depth) / depth).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn codec_roundtrip() -> Outcome {
    match codec_roundtrip_error(10_000) {
        Ok(e) => Outcome::new(e <= CODEC_TOL, format!("10000 prior/GT/depth triples, max roundtrip error {e:.1e} (tol 1e-6)")),
        Err(e) => Outcome::new(false, format!("encode failed: {e}")),
    }
}

/// Angle range used for property tests on rotation.
pub fn angle_range() -> std::ops::RangeInclusive<f64> {
    -MAX_ANGLE_DEG..=MAX_ANGLE_DEG
}
