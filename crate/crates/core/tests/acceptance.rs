//! End-to-end acceptance checks, one PASS/FAIL/SKIP line per criterion.
//!
//! Trained models and attack results are cached under the cargo target
//! directory together with the wall-clock seconds they originally took, so a
//! rerun only evaluates. Set `SANILAB_ACCEPTANCE_FRESH=1` to recompute
//! everything, `SANILAB_MNIST` and `SANILAB_GLYPHS` to point at other data.
//!
//! Criteria 1, 4 and 10 are exact properties and fail the test target when
//! they fail. The others are empirical reproduction targets: their verdict is
//! printed but does not abort the run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use sanilab::attack::{
    adversarial_accuracy, attack_suite, avg_distortion_per_example, load_results, save_results, AttackResult,
    AttackSpec, CwParams, Differentiable, IgsmParams, TargetPolicy,
};
use sanilab::autodiff::{grad_check, GradCheckConfig, GradCheckReport, Graph, NodeId, Reduction, Tensor};
use sanilab::data::{
    augment_canonical, load_glyph_dir, load_idx, save_idx_f32, DatasetManifest, IdxArray, ImageShape, LabeledDataset,
    NUM_CLASSES,
};
use sanilab::detect::{
    calibrate_threshold, combined_accuracy, detect, kl_divergence, kl_records, Calibration, CombinedAccuracy,
    GroundTruth, Verdict,
};
use sanilab::nn::{evaluate, train, ArchDescriptor, ArchName, Checkpoint, Model, TrainConfig};
use sanilab::sanitize::{sweep, SanitizeMode, Sweep};

const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_POINTS: u64 = 100;
const GRAD_BUDGET_SECS: f64 = 60.0;

const UNSANITIZED_ACCURACY: f64 = 0.985;
const UNSANITIZED_BUDGET_SECS: f64 = 30.0 * 60.0;
const CANONICAL_ACCURACY: f64 = 0.975;
const MIN_GLYPHS_PER_DIGIT: usize = 50;
const SANITIZED_ACCURACY: f64 = 0.95;
const SMALL_ALPHA: f32 = 0.02;
const IGSM_GAIN: f64 = 0.15;
const DISTORTION_RATIO: f64 = 1.1;
const CW_DETECTION: f64 = 0.90;
const IGSM_DETECTION: f64 = 0.85;
const DETECTION_BUDGET_SECS: f64 = 3600.0;
const IGSM_OVERALL: f64 = 0.90;
const NORMAL_OVERALL: f64 = 0.93;
const KL_TOLERANCE: f64 = 1e-6;
const PROPERTY_BUDGET_SECS: f64 = 300.0;

const SEED: u64 = 0;
const CANONICAL_SCALES: [usize; 3] = [20, 24, 28];
const CANONICAL_ROTATIONS: [f64; 7] = [-30.0, -20.0, -10.0, 0.0, 10.0, 20.0, 30.0];
const CANONICAL_THRESHOLDS: [f64; 6] = [0.7, 0.8, 0.9, 0.99, 0.999, 0.9999];
const SELF_THRESHOLDS: [f64; 5] = [0.999, 0.9999, 0.99999, 0.999999, 0.9999999];
const DETECTOR_THRESHOLD: f64 = 0.9999;
const TARGET_ACCEPT: f64 = 0.98;
const ATTACKED_EXAMPLES: usize = 200;
const DISTORTION_EXAMPLES: usize = 30;
const KAPPA_PAIRS: usize = 20;
const DETECTION_KAPPAS: [f32; 3] = [0.0, 1.0, 5.0];

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    criterion: u8,
    status: Status,
    detail: String,
}

fn verdict(criterion: u8, pass: bool, detail: String) -> Outcome {
    Outcome { criterion, status: if pass { Status::Pass } else { Status::Fail }, detail }
}

fn skip(criterion: u8, why: &str) -> Outcome {
    Outcome { criterion, status: Status::Skip, detail: why.to_string() }
}

fn report(v: &Outcome) {
    let tag = match v.status {
        Status::Pass => "PASS",
        Status::Fail => "FAIL",
        Status::Skip => "SKIP",
    };
    println!("criterion {:>2}: {tag}  {}", v.criterion, v.detail);
}

struct Timed<T> {
    value: T,
    secs: f64,
}

struct Cache {
    dir: PathBuf,
    fresh: bool,
}

impl Cache {
    fn new() -> Result<Self> {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        std::fs::create_dir_all(&dir)?;
        Ok(Self { dir, fresh: std::env::var_os("SANILAB_ACCEPTANCE_FRESH").is_some() })
    }

    fn key(name: &str, parts: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in parts {
            h.update(p.as_bytes());
            h.update([0]);
        }
        format!("{name}-{}", &hex::encode(h.finalize())[..16])
    }

    fn secs(path: &Path) -> Option<f64> {
        std::fs::read_to_string(path).ok()?.trim().parse().ok()
    }

    fn checkpoint(
        &self,
        name: &str,
        parts: &[&str],
        run: impl FnOnce() -> Result<Checkpoint>,
    ) -> Result<Timed<Checkpoint>> {
        let key = Self::key(name, parts);
        let (path, secs_path) = (self.dir.join(format!("{key}.ckpt")), self.dir.join(format!("{key}.secs")));
        if !self.fresh {
            if let (Ok(ckpt), Some(secs)) = (Checkpoint::load(&path), Self::secs(&secs_path)) {
                return Ok(Timed { value: ckpt, secs });
            }
        }
        eprintln!("training {name}");
        let start = Instant::now();
        let ckpt = run()?;
        let secs = start.elapsed().as_secs_f64();
        ckpt.save(&path)?;
        std::fs::write(&secs_path, secs.to_string())?;
        Ok(Timed { value: ckpt, secs })
    }

    fn attack(
        &self,
        name: &str,
        model: &Timed<Checkpoint>,
        data: &LabeledDataset,
        spec: AttackSpec,
        policy: TargetPolicy,
    ) -> Result<Timed<Vec<AttackResult>>> {
        let model_sha = model.value.sha256();
        let spec_json = serde_json::to_string(&spec)?;
        let policy_json = serde_json::to_string(&policy)?;
        let key = Self::key(name, &[&model_sha, data.sha256(), &spec_json, &policy_json]);
        let dir = self.dir.join(key);
        let secs_path = dir.join("secs");
        if !self.fresh {
            if let (Ok(stored), Some(secs)) = (load_results(&dir), Self::secs(&secs_path)) {
                return Ok(Timed { value: stored.results, secs });
            }
        }
        eprintln!("attacking: {name}");
        let net = model.value.model()?;
        let start = Instant::now();
        let results = attack_suite(&net, data, &spec, policy)?;
        let secs = start.elapsed().as_secs_f64();
        save_results(&dir, &results, data, &model_sha, policy)?;
        std::fs::write(&secs_path, secs.to_string())?;
        Ok(Timed { value: results, secs })
    }
}

// ---------------------------------------------------------------------------
// criterion 1

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn one_hot(rng: &mut ChaCha8Rng, rows: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, classes]).unwrap();
    for r in 0..rows {
        let c = rng.gen_range(0..classes);
        t.data_mut()[r * classes + c] = 1.0;
    }
    t
}

type Point = (Vec<Tensor>, Vec<(&'static str, Tensor)>);

/// One operator under test: a graph whose scalar output is `sum(op(..) * r)`
/// for a fixed random `r`, plus a generator of random points.
struct OpCase {
    name: &'static str,
    graph: Graph,
    loss: NodeId,
    point: Box<dyn Fn(&mut ChaCha8Rng) -> Point>,
}

fn scalarize(g: &mut Graph, node: NodeId) -> NodeId {
    let r = g.input("r");
    let m = g.mul(node, r);
    g.sum(m)
}

fn conv_case(name: &'static str, x: [usize; 4], k: [usize; 4], stride: usize, pad: usize) -> OpCase {
    let mut g = Graph::new();
    let (xi, kp, bp) = (g.input("x"), g.param(0), g.param(1));
    let c = g.conv2d(xi, kp, bp, stride, pad);
    let loss = scalarize(&mut g, c);
    let oh = (x[1] + 2 * pad - k[1]) / stride + 1;
    let ow = (x[2] + 2 * pad - k[2]) / stride + 1;
    let out = [x[0], oh, ow, k[0]];
    OpCase {
        name,
        graph: g,
        loss,
        point: Box::new(move |rng| {
            let params =
                vec![random_tensor(rng, &k, 0.5).with_grad(true), random_tensor(rng, &[k[0]], 0.5).with_grad(true)];
            let inputs = vec![("x", random_tensor(rng, &x, 1.0).with_grad(true)), ("r", random_tensor(rng, &out, 1.0))];
            (params, inputs)
        }),
    }
}

fn unary_case(name: &'static str, x: Vec<usize>, out: Vec<usize>, op: fn(&mut Graph, NodeId) -> NodeId) -> OpCase {
    let mut g = Graph::new();
    let xi = g.input("x");
    let y = op(&mut g, xi);
    let loss = scalarize(&mut g, y);
    OpCase {
        name,
        graph: g,
        loss,
        point: Box::new(move |rng| {
            (vec![], vec![("x", random_tensor(rng, &x, 2.0).with_grad(true)), ("r", random_tensor(rng, &out, 1.0))])
        }),
    }
}

fn linear_case(name: &'static str, x: Vec<usize>, units: usize) -> OpCase {
    let mut g = Graph::new();
    let (xi, w, b) = (g.input("x"), g.param(0), g.param(1));
    let y = g.linear(xi, w, b);
    let loss = scalarize(&mut g, y);
    let fan_in: usize = x[1..].iter().product();
    let rows = x[0];
    OpCase {
        name,
        graph: g,
        loss,
        point: Box::new(move |rng| {
            let params = vec![
                random_tensor(rng, &[units, fan_in], 1.0).with_grad(true),
                random_tensor(rng, &[units], 1.0).with_grad(true),
            ];
            (
                params,
                vec![
                    ("x", random_tensor(rng, &x, 1.0).with_grad(true)),
                    ("r", random_tensor(rng, &[rows, units], 1.0)),
                ],
            )
        }),
    }
}

fn cross_entropy_case(name: &'static str, reduction: Reduction) -> OpCase {
    let mut g = Graph::new();
    let (z, y) = (g.input("z"), g.input("y"));
    let loss = g.softmax_cross_entropy(z, y, reduction);
    OpCase {
        name,
        graph: g,
        loss,
        point: Box::new(|rng| {
            (vec![], vec![("z", random_tensor(rng, &[4, 6], 3.0).with_grad(true)), ("y", one_hot(rng, 4, 6))])
        }),
    }
}

fn operator_cases() -> Vec<OpCase> {
    let mut mul = Graph::new();
    let (a, b) = (mul.input("a"), mul.input("b"));
    let ab = mul.mul(a, b);
    let mul_loss = scalarize(&mut mul, ab);
    let mut sum = Graph::new();
    let xs = sum.input("x");
    let sum_loss = sum.sum(xs);
    vec![
        conv_case("conv2d 3x3 stride 1", [2, 5, 5, 3], [4, 3, 3, 3], 1, 0),
        conv_case("conv2d 3x3 stride 2 pad 1", [1, 6, 6, 2], [3, 3, 3, 2], 2, 1),
        conv_case("conv2d 5x5 pad 2", [1, 6, 5, 1], [2, 5, 5, 1], 1, 2),
        unary_case("max_pool2", vec![2, 4, 6, 2], vec![2, 2, 3, 2], |g, x| g.max_pool2(x)),
        unary_case("max_pool2 odd edge", vec![1, 5, 5, 1], vec![1, 2, 2, 1], |g, x| g.max_pool2(x)),
        unary_case("relu", vec![3, 7], vec![3, 7], |g, x| g.relu(x)),
        unary_case("softmax", vec![3, 6], vec![3, 6], |g, x| g.softmax(x)),
        linear_case("linear", vec![3, 5], 4),
        linear_case("linear on images", vec![2, 3, 3, 2], 3),
        cross_entropy_case("softmax_cross_entropy mean", Reduction::Mean),
        cross_entropy_case("softmax_cross_entropy sum", Reduction::Sum),
        OpCase {
            name: "mul",
            graph: mul,
            loss: mul_loss,
            point: Box::new(|rng| {
                let inputs = vec![
                    ("a", random_tensor(rng, &[3, 4], 1.0).with_grad(true)),
                    ("b", random_tensor(rng, &[3, 4], 1.0).with_grad(true)),
                    ("r", random_tensor(rng, &[3, 4], 1.0)),
                ];
                (vec![], inputs)
            }),
        },
        OpCase {
            name: "sum",
            graph: sum,
            loss: sum_loss,
            point: Box::new(|rng| (vec![], vec![("x", random_tensor(rng, &[2, 3, 4], 1.0).with_grad(true))])),
        },
    ]
}

#[derive(Default)]
struct GradSummary {
    max_rel_error: f64,
    worst: String,
    checked: usize,
    kinks: usize,
}

impl GradSummary {
    fn add(&mut self, name: &str, r: &GradCheckReport) {
        self.checked += r.checked;
        self.kinks += r.skipped_kinks;
        if r.max_rel_error >= self.max_rel_error {
            self.max_rel_error = r.max_rel_error;
            self.worst = format!("{name} {}", r.worst.clone().unwrap_or_default());
        }
    }
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let mut summary = GradSummary::default();
    let mut per_op = Vec::new();
    for case in operator_cases() {
        let mut op = GradSummary::default();
        for point in 0..GRAD_POINTS {
            let mut rng = ChaCha8Rng::seed_from_u64(point);
            let (params, inputs) = (case.point)(&mut rng);
            let bound: Vec<(&str, &Tensor)> = inputs.iter().map(|(n, t)| (*n, t)).collect();
            let config = GradCheckConfig { seed: point, ..GradCheckConfig::default() };
            let r = grad_check(&case.graph, &params, &bound, case.loss, &config)?;
            op.add(case.name, &r);
            summary.add(case.name, &r);
        }
        ensure!(op.checked > 0, "{}: every probe hit a kink", case.name);
        per_op.push(format!("{} {:.1e}", case.name, op.max_rel_error));
    }

    let mut full = GradSummary::default();
    let arch = ArchDescriptor::mnist_cnn();
    for point in 0..GRAD_POINTS {
        let model = Model::new(arch.clone(), point)?;
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let x = Tensor::new(vec![1, 28, 28, 1], (0..784).map(|_| rng.gen_range(0.0..1.0)).collect())?.with_grad(true);
        let y = one_hot(&mut rng, 1, NUM_CLASSES);
        let (graph, loss) = model.loss_graph();
        let config = GradCheckConfig { coords_per_tensor: Some(2), seed: point, ..GradCheckConfig::default() };
        let r = grad_check(graph, model.params(), &[("x", &x), ("y", &y)], loss, &config)?;
        full.add("mnist_cnn", &r);
        summary.add("mnist_cnn", &r);
    }
    let secs = start.elapsed().as_secs_f64();
    eprintln!("gradient check per operator: {}", per_op.join(", "));
    let pass = summary.max_rel_error < GRAD_TOLERANCE && full.checked > 0 && secs < GRAD_BUDGET_SECS;
    Ok(verdict(
        1,
        pass,
        format!(
            "max rel error {:.2e} (worst: {}), full mnist_cnn {:.2e}; {} coordinates at {} points per case, {} kink probes skipped; {:.1} s",
            summary.max_rel_error, summary.worst, full.max_rel_error, summary.checked, GRAD_POINTS, summary.kinks, secs
        ),
    ))
}

// ---------------------------------------------------------------------------
// data

fn data_dir(var: &str, default: &str) -> PathBuf {
    std::env::var_os(var)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(default))
}

struct Mnist {
    train: LabeledDataset,
    test: LabeledDataset,
    /// Half of the test set, for detector calibration.
    calibration: LabeledDataset,
    /// The other half: normal examples for detection and the attack pool.
    evaluation: LabeledDataset,
}

impl Mnist {
    fn load() -> Result<Option<Self>> {
        let dir = data_dir("SANILAB_MNIST", "data/mnist");
        let files =
            ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
        if files.iter().any(|f| !dir.join(f).is_file()) {
            return Ok(None);
        }
        let train = load_idx(&dir.join(files[0]), &dir.join(files[1]))?;
        let test = load_idx(&dir.join(files[2]), &dir.join(files[3]))?;
        let (calibration, evaluation) = test.split(0.5, SEED)?;
        Ok(Some(Self { train, test, calibration, evaluation }))
    }

    fn attack_pool(&self, from: usize, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (from..from + n).collect();
        self.evaluation.subset(&idx, format!("evaluation[{from}..{}]", from + n))
    }
}

/// Copy glyph files into `train/` and `held/` directories, sending every
/// fifth font face (both stroke widths) to `held/`.
fn split_glyphs_by_font(root: &Path, out: &Path) -> Result<(PathBuf, PathBuf)> {
    let face = |p: &Path| -> String {
        let stem = p.file_stem().unwrap_or_default().to_string_lossy().to_string();
        match stem.rsplit_once("-w") {
            Some((f, w)) if w.chars().all(|c| c.is_ascii_digit()) => f.to_string(),
            _ => stem,
        }
    };
    let mut files = Vec::new();
    for d in 0..10 {
        for entry in std::fs::read_dir(root.join(d.to_string()))? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == "png") {
                files.push((d, p));
            }
        }
    }
    let faces: BTreeSet<String> = files.iter().map(|(_, p)| face(p)).collect();
    let held: BTreeSet<&String> = faces.iter().enumerate().filter(|(i, _)| i % 5 == 0).map(|(_, f)| f).collect();
    let (train_dir, held_dir) = (out.join("train"), out.join("held"));
    for (d, p) in &files {
        let side = if held.contains(&face(p)) { &held_dir } else { &train_dir };
        let target = side.join(d.to_string());
        std::fs::create_dir_all(&target)?;
        std::fs::copy(p, target.join(p.file_name().unwrap()))?;
    }
    Ok((train_dir, held_dir))
}

fn desk_arch() -> ArchDescriptor {
    ArchDescriptor::two_block(ArchName::MnistCnn, [16, 32], 128)
}

fn desk_config() -> TrainConfig {
    TrainConfig { epochs: 10, ..TrainConfig::new(SEED) }
}

fn train_cached(
    cache: &Cache,
    name: &str,
    arch: &ArchDescriptor,
    config: &TrainConfig,
    data: &LabeledDataset,
    eval: &LabeledDataset,
) -> Result<Timed<Checkpoint>> {
    let arch_json = serde_json::to_string(arch)?;
    let config_json = serde_json::to_string(config)?;
    cache.checkpoint(name, &[&arch_json, &config_json, data.sha256(), eval.sha256()], || {
        Ok(train(arch, data, config, Some(eval))?)
    })
}

fn test_accuracy(ckpt: &Checkpoint) -> f64 {
    ckpt.meta.test_accuracy.unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// shared experiment state for criteria 4-9

struct Arm {
    mode: &'static str,
    sweep: Sweep,
    /// `(threshold, model)`; `None` where the threshold kept nothing.
    models: Vec<(f64, Option<Timed<Checkpoint>>)>,
}

impl Arm {
    fn top(&self) -> Option<(f64, &Timed<Checkpoint>)> {
        self.models.iter().rev().find_map(|(t, m)| m.as_ref().map(|m| (*t, m)))
    }
}

fn build_arm(
    cache: &Cache,
    mnist: &Mnist,
    mode: &'static str,
    scoring: Checkpoint,
    thresholds: &[f64],
    sanitize_mode: SanitizeMode,
) -> Result<Arm> {
    let sweep = sweep(&mnist.train, scoring, thresholds, sanitize_mode)?;
    let mut models = Vec::new();
    for r in &sweep.reports {
        let kept = mnist.train.restrict_to(&r.manifest)?;
        let model = if kept.is_empty() {
            None
        } else {
            let name = format!("desk-{mode}-{}", r.threshold);
            Some(train_cached(cache, &name, &desk_arch(), &desk_config(), &kept, &mnist.test)?)
        };
        models.push((r.threshold, model));
    }
    Ok(Arm { mode, sweep, models })
}

fn criterion_4(arms: &[&Arm], data: &LabeledDataset) -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for arm in arms {
        let reports = &arm.sweep.reports;
        let sizes: Vec<usize> = reports.iter().map(|r| r.kept).collect();
        ok &= sizes.windows(2).all(|w| w[0] >= w[1]);
        let sets: Vec<BTreeSet<u64>> = reports.iter().map(|r| r.manifest.ids.iter().copied().collect()).collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                ok &= sets[j].is_subset(&sets[i]);
            }
        }
        for r in reports {
            let expected: BTreeSet<u64> =
                arm.sweep.scores.entries.iter().filter(|e| e.confidence >= r.threshold).map(|e| e.id).collect();
            let kept: BTreeSet<u64> = r.manifest.ids.iter().copied().collect();
            ok &= expected == kept && r.kept + r.discarded == data.len();
        }
        notes.push(format!("{} sizes {:?}", arm.mode, sizes));
    }
    verdict(4, ok, format!("kept sets nested and sizes weakly decreasing: {}", notes.join("; ")))
}

fn criterion_5(arms: &[&Arm]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for arm in arms {
        let accs: Vec<String> = arm
            .models
            .iter()
            .map(|(t, m)| match m {
                Some(m) => {
                    let a = test_accuracy(&m.value);
                    ok &= a >= SANITIZED_ACCURACY;
                    format!("{t}: {:.2}%", 100.0 * a)
                }
                None => {
                    ok = false;
                    format!("{t}: empty set")
                }
            })
            .collect();
        notes.push(format!("{} [{}]", arm.mode, accs.join(", ")));
    }
    verdict(5, ok, format!("sanitized test accuracy >= {:.1}%: {}", 100.0 * SANITIZED_ACCURACY, notes.join("; ")))
}

fn igsm_spec(iterations: usize) -> AttackSpec {
    AttackSpec::Igsm(IgsmParams::new(iterations))
}

fn cw_spec(kappa: f32) -> AttackSpec {
    AttackSpec::Cw(CwParams::with_kappa(kappa))
}

fn cw_policy() -> TargetPolicy {
    TargetPolicy::RandomWrongClass { seed: SEED }
}

fn criterion_6(
    cache: &Cache,
    arms: &[&Arm],
    unsanitized: &Timed<Checkpoint>,
    pool: &LabeledDataset,
    igsm_log: &mut Vec<Vec<AttackResult>>,
) -> Result<Outcome> {
    let base = cache.attack("igsm5-unsanitized", unsanitized, pool, igsm_spec(5), TargetPolicy::Untargeted)?.value;
    let base_acc = adversarial_accuracy(&base);
    igsm_log.push(base);
    let mut ok = true;
    let mut notes = vec![format!("unsanitized {:.1}%", 100.0 * base_acc)];
    for arm in arms {
        let Some((t, top)) = arm.top() else {
            ok = false;
            notes.push(format!("{}: no sanitized model", arm.mode));
            continue;
        };
        let name = format!("igsm5-{}-{t}", arm.mode);
        let results = cache.attack(&name, top, pool, igsm_spec(5), TargetPolicy::Untargeted)?.value;
        let acc = adversarial_accuracy(&results);
        ok &= acc - base_acc >= IGSM_GAIN;
        notes.push(format!("{} {t} {:.1}% ({:+.1} pp)", arm.mode, 100.0 * acc, 100.0 * (acc - base_acc)));
        igsm_log.push(results);
    }
    let small_step = AttackSpec::Igsm(IgsmParams { alpha: SMALL_ALPHA, ..IgsmParams::new(5) });
    let mut models = vec![("unsanitized".to_string(), unsanitized)];
    models.extend(arms.iter().filter_map(|a| a.top().map(|(t, m)| (format!("{} {t}", a.mode), m))));
    let mut extra = Vec::new();
    for (label, model) in models {
        let name = format!("igsm5-a{SMALL_ALPHA}-{}", label.replace(' ', "-"));
        let results = cache.attack(&name, model, pool, small_step, TargetPolicy::Untargeted)?.value;
        extra.push(format!("{label} {:.1}%", 100.0 * adversarial_accuracy(&results)));
    }
    let detail = format!(
        "IGSM-5 accuracy on {} examples: {}; informational, alpha {SMALL_ALPHA}: {}",
        pool.len(),
        notes.join(", "),
        extra.join(", ")
    );
    Ok(verdict(6, ok, detail))
}

fn criterion_7(
    cache: &Cache,
    arms: &[&Arm],
    unsanitized: &Timed<Checkpoint>,
    pool: &LabeledDataset,
) -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    let base = cache.attack("cw0-unsanitized", unsanitized, pool, cw_spec(0.0), cw_policy())?.value;
    let base_d = avg_distortion_per_example(&base)?;
    for arm in arms {
        let mut series = vec![(0.0, base_d, base.iter().filter(|r| r.success).count())];
        for (t, model) in &arm.models {
            let Some(model) = model else { continue };
            let name = format!("cw0-{}-{t}", arm.mode);
            let results = cache.attack(&name, model, pool, cw_spec(0.0), cw_policy())?.value;
            let d = avg_distortion_per_example(&results).unwrap_or(f64::NAN);
            series.push((*t, d, results.iter().filter(|r| r.success).count()));
        }
        let increasing = series.windows(2).all(|w| w[1].1 >= w[0].1);
        let top = series.last().map(|s| s.1).unwrap_or(f64::NAN);
        let ratio = top / base_d;
        ok &= increasing && ratio >= DISTORTION_RATIO;
        let shown: Vec<String> = series.iter().map(|(t, d, n)| format!("{t}: {d:.3} ({n} ok)")).collect();
        notes.push(format!(
            "{} [{}] {}, top/unsanitized {ratio:.2}",
            arm.mode,
            shown.join(", "),
            if increasing { "weakly increasing" } else { "not monotone" }
        ));
    }
    Ok(verdict(7, ok, format!("C&W kappa=0 mean L2 on {} examples: {}", pool.len(), notes.join("; "))))
}

struct Detector {
    unsanitized: Model,
    sanitized: Model,
    calibration: Calibration,
    threshold: f64,
    secs: f64,
}

impl Detector {
    fn verdicts(&self, data: &LabeledDataset) -> Result<Vec<Verdict>> {
        Ok(kl_records(&self.unsanitized, &self.sanitized, data)?.iter().map(|r| detect(r, &self.calibration)).collect())
    }

    /// Combined accuracy over the successful adversarials in `results`.
    fn on_attack(&self, results: &[AttackResult], shape: ImageShape) -> Result<(CombinedAccuracy, usize)> {
        let ok: Vec<&AttackResult> = results.iter().filter(|r| r.success).collect();
        if ok.is_empty() {
            return Ok((CombinedAccuracy::default(), 0));
        }
        let pixels = ok.iter().flat_map(|r| r.adversarial.iter().copied()).collect();
        let data = LabeledDataset::new(
            shape,
            pixels,
            ok.iter().map(|r| r.true_label).collect(),
            ok.iter().map(|r| r.id).collect(),
            "adversarial",
        )?;
        let verdicts = self.verdicts(&data)?;
        let truth: Vec<GroundTruth> =
            ok.iter().map(|r| GroundTruth { id: r.id, is_adversarial: true, true_class: r.true_label }).collect();
        Ok((combined_accuracy(&verdicts, &truth)?, ok.len()))
    }
}

fn build_detector(
    mnist: &Mnist,
    unsanitized: &Timed<Checkpoint>,
    sanitized: &Timed<Checkpoint>,
    t: f64,
) -> Result<Detector> {
    let start = Instant::now();
    let (u, s) = (unsanitized.value.model()?, sanitized.value.model()?);
    let kls: Vec<f64> = kl_records(&u, &s, &mnist.calibration)?.iter().map(|r| r.kl).collect();
    let calibration = calibrate_threshold(&kls, TARGET_ACCEPT, mnist.calibration.sha256())?;
    Ok(Detector { unsanitized: u, sanitized: s, calibration, threshold: t, secs: start.elapsed().as_secs_f64() })
}

fn pct(r: sanilab::detect::Rate) -> String {
    r.fraction().map(|f| format!("{:.2}%", 100.0 * f)).unwrap_or_else(|| "n/a".into())
}

fn criterion_8(
    cache: &Cache,
    detector: &Detector,
    unsanitized: &Timed<Checkpoint>,
    pool: &LabeledDataset,
    igsm_log: &mut Vec<Vec<AttackResult>>,
) -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    let mut secs = detector.secs;
    for kappa in DETECTION_KAPPAS {
        let run = cache.attack(&format!("cw{kappa}-unsanitized"), unsanitized, pool, cw_spec(kappa), cw_policy())?;
        let start = Instant::now();
        let (acc, n) = detector.on_attack(&run.value, pool.shape())?;
        secs += run.secs + start.elapsed().as_secs_f64();
        ok &= acc.detector_rate.fraction().is_some_and(|f| f >= CW_DETECTION);
        notes.push(format!("C&W kappa={kappa} {} of {n}", pct(acc.detector_rate)));
    }
    let run = cache.attack("igsm15-unsanitized", unsanitized, pool, igsm_spec(15), TargetPolicy::Untargeted)?;
    let start = Instant::now();
    let (acc, n) = detector.on_attack(&run.value, pool.shape())?;
    secs += run.secs + start.elapsed().as_secs_f64();
    ok &= acc.detector_rate.fraction().is_some_and(|f| f >= IGSM_DETECTION);
    notes.push(format!("IGSM-15 {} of {n}", pct(acc.detector_rate)));
    igsm_log.push(run.value);
    ok &= secs <= DETECTION_BUDGET_SECS;
    Ok(verdict(
        8,
        ok,
        format!(
            "detection rate, detector unsanitized vs canonical {} (KL threshold {:.4}, calibration accept {:.2}%): {}; {:.0} s for {} attacked examples",
            detector.threshold,
            detector.calibration.kl_threshold,
            100.0 * detector.calibration.achieved_accept,
            notes.join(", "),
            secs,
            pool.len()
        ),
    ))
}

fn criterion_9(
    cache: &Cache,
    detector: &Detector,
    unsanitized: &Timed<Checkpoint>,
    mnist: &Mnist,
    pool: &LabeledDataset,
    igsm_log: &mut Vec<Vec<AttackResult>>,
) -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    for iterations in [5, 10, 15] {
        let results = cache
            .attack(
                &format!("igsm{iterations}-unsanitized"),
                unsanitized,
                pool,
                igsm_spec(iterations),
                TargetPolicy::Untargeted,
            )?
            .value;
        let (acc, n) = detector.on_attack(&results, pool.shape())?;
        ok &= acc.adversarial_accuracy.fraction().is_some_and(|f| f >= IGSM_OVERALL);
        notes.push(format!(
            "IGSM-{iterations} {} of {n} (detector {}, classifier {})",
            pct(acc.adversarial_accuracy),
            pct(acc.detector_rate),
            pct(acc.classifier_rate)
        ));
        igsm_log.push(results);
    }
    let verdicts = detector.verdicts(&mnist.evaluation)?;
    let truth: Vec<GroundTruth> = (0..mnist.evaluation.len())
        .map(|i| GroundTruth {
            id: mnist.evaluation.id(i),
            is_adversarial: false,
            true_class: mnist.evaluation.label(i),
        })
        .collect();
    let normal = combined_accuracy(&verdicts, &truth)?;
    ok &= normal.normal_accuracy.fraction().is_some_and(|f| f >= NORMAL_OVERALL);
    Ok(verdict(
        9,
        ok,
        format!(
            "overall accuracy: {}; normal {} of {} (accepted {})",
            notes.join(", "),
            pct(normal.normal_accuracy),
            mnist.evaluation.len(),
            pct(normal.normal_acceptance)
        ),
    ))
}

// ---------------------------------------------------------------------------
// criterion 10

fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0f64..1.0).powi(3) + 1e-6).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn kl_properties() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=NUM_CLASSES);
        let (p, q) = (random_distribution(&mut rng, n), random_distribution(&mut rng, n));
        let kl = kl_divergence(&p, &q)?;
        ensure!(kl >= 0.0, "negative KL {kl}");
        ensure!(kl_divergence(&p, &p)? == 0.0, "KL(p, p) is not zero");
        worst = worst.max((kl - kl_oracle(&p, &q)).abs());
    }
    let derived =
        [([1.0, 0.0], [0.5, 0.5], 2f64.ln()), ([0.5, 0.5], [0.25, 0.75], 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln())];
    for (p, q, expected) in derived {
        let kl = kl_divergence(&p, &q)?;
        ensure!((kl - expected).abs() < KL_TOLERANCE, "KL({p:?}, {q:?}) = {kl}, expected {expected}");
    }
    Ok(format!("KL ok on 1000 pairs (max oracle gap {worst:.1e}) and 2 derived values"))
}

fn calibration_oracle(values: &[f64], target: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut k = 1;
    while (k as f64) < target * values.len() as f64 - 1e-9 {
        k += 1;
    }
    sorted[k - 1]
}

fn calibration_properties() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..500);
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
        let target = rng.gen_range(0.01..0.99);
        let c = calibrate_threshold(&values, target, "oracle")?;
        let expected = calibration_oracle(&values, target);
        ensure!(
            c.kl_threshold == expected,
            "threshold {} != oracle {expected} (n={n}, target={target})",
            c.kl_threshold
        );
    }
    Ok("calibration matches sort oracle on 100 lists".into())
}

fn igsm_invariants(log: &[Vec<AttackResult>], pool: &LabeledDataset) -> Result<String> {
    let position: BTreeMap<u64, usize> = pool.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut count = 0;
    for results in log {
        for r in results {
            let AttackSpec::Igsm(p) = r.spec else { bail!("non-IGSM result in IGSM log") };
            let original = pool.image(*position.get(&r.id).context("IGSM result for an unknown id")?);
            for (&a, &o) in r.adversarial.iter().zip(original) {
                ensure!((0.0..=1.0).contains(&a), "id {}: pixel {a} outside [0, 1]", r.id);
                ensure!((a - o).abs() <= p.epsilon + 1e-6, "id {}: |{a} - {o}| exceeds epsilon {}", r.id, p.epsilon);
            }
            count += 1;
        }
    }
    ensure!(count > 0, "no IGSM results to check");
    Ok(format!("IGSM eps-ball and box hold for {count} adversarials"))
}

fn margin(model: &Model, image: &[f32], target: u8) -> Result<f32> {
    let z = Differentiable::logits(model, image)?;
    let other = (0..NUM_CLASSES).filter(|&j| j != target as usize).map(|j| z[j]).fold(f32::NEG_INFINITY, f32::max);
    Ok(z[target as usize] - other)
}

fn kappa_monotonicity(model: &Checkpoint, low: &[AttackResult], high: &[AttackResult]) -> Result<String> {
    let net = model.model()?;
    let mut violations = Vec::new();
    for (a, b) in low.iter().zip(high) {
        ensure!(a.id == b.id && a.target == b.target, "pairs out of step");
        let target = a.target.context("C&W result without target")?;
        for (r, kappa) in [(a, 0.0), (b, 5.0)] {
            if r.success {
                let m = margin(&net, &r.adversarial, target)?;
                ensure!(m >= kappa - 1e-4, "id {}: success with margin {m} below kappa {kappa}", r.id);
            }
        }
        let holds = !b.success || (a.success && a.l2_distortion <= b.l2_distortion + 1e-6);
        if !holds {
            violations.push(format!("id {} -> {target}: {:.4} vs {:.4}", a.id, a.l2_distortion, b.l2_distortion));
        }
    }
    ensure!(violations.is_empty(), "kappa monotonicity violated: {}", violations.join(", "));
    let both = low.iter().zip(high).filter(|(a, b)| a.success && b.success).count();
    Ok(format!("C&W kappa 0 <= kappa 5 distortion on {} pairs ({both} with both successful)", low.len()))
}

fn round_trips(model: &Checkpoint, data: &LabeledDataset) -> Result<String> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.ckpt");
    model.save(&path)?;
    let back = Checkpoint::load(&path)?;
    ensure!(back.to_bytes() == model.to_bytes(), "checkpoint bytes differ after a round trip");
    ensure!(std::fs::read(&path)? == model.to_bytes(), "saved checkpoint differs from its serialization");
    for (a, b) in back.params.iter().zip(&model.params) {
        ensure!(a.data().iter().map(|v| v.to_bits()).eq(b.data().iter().map(|v| v.to_bits())), "parameter bits differ");
    }

    let (images, labels) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    save_idx_f32(data, &images, &labels)?;
    let loaded = load_idx(&images, &labels)?;
    ensure!(
        loaded.pixels().iter().map(|v| v.to_bits()).eq(data.pixels().iter().map(|v| v.to_bits())),
        "pixel bits differ"
    );
    ensure!(loaded.labels() == data.labels(), "labels differ");
    let arr = IdxArray::read(&images)?;
    ensure!(arr.to_bytes() == std::fs::read(&images)?, "IDX bytes differ");

    let manifest_path = dir.path().join("manifest.json");
    data.manifest().save(&manifest_path)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    ensure!(&manifest == data.manifest(), "manifest differs after a round trip");
    ensure!(data.restrict_to(&manifest)?.sha256() == data.sha256(), "restored dataset hash differs");
    Ok(format!("checkpoint ({} params) and dataset ({} examples) round trips bitwise", model.params.len(), data.len()))
}

fn synthetic_pool(n: usize) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pixels = (0..n * 784).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels = (0..n).map(|i| (i % NUM_CLASSES) as u8).collect();
    LabeledDataset::new(ImageShape::new(28, 28, 1), pixels, labels, (0..n as u64).collect(), "synthetic").unwrap()
}

fn criterion_10(
    cache: &Cache,
    model: &Timed<Checkpoint>,
    igsm_log: &mut Vec<Vec<AttackResult>>,
    igsm_pool: &LabeledDataset,
    pair_pool: &LabeledDataset,
) -> Result<Outcome> {
    // attack time comes from the cache records; everything else is timed here
    let mut secs = 0.0;
    if igsm_log.is_empty() {
        let run = cache.attack("igsm-invariants", model, igsm_pool, igsm_spec(15), TargetPolicy::Untargeted)?;
        secs += run.secs;
        igsm_log.push(run.value);
    }
    let low = cache.attack("kappa-pairs-0", model, pair_pool, cw_spec(0.0), cw_policy())?;
    let high = cache.attack("kappa-pairs-5", model, pair_pool, cw_spec(5.0), cw_policy())?;
    secs += low.secs + high.secs;

    let start = Instant::now();
    let notes = [
        kl_properties()?,
        calibration_properties()?,
        igsm_invariants(igsm_log, igsm_pool)?,
        kappa_monotonicity(&model.value, &low.value, &high.value)?,
        round_trips(&model.value, igsm_pool)?,
    ];
    secs += start.elapsed().as_secs_f64();
    Ok(verdict(10, secs < PROPERTY_BUDGET_SECS, format!("{}; {secs:.0} s", notes.join("; "))))
}

// ---------------------------------------------------------------------------

fn criterion_2(cache: &Cache, mnist: &Mnist) -> Result<Outcome> {
    let config = TrainConfig { epochs: 3, ..TrainConfig::new(SEED) };
    let run = train_cached(cache, "mnist_cnn", &ArchDescriptor::mnist_cnn(), &config, &mnist.train, &mnist.test)?;
    let acc = test_accuracy(&run.value);
    let recheck = evaluate(&run.value.model()?, &mnist.test)?.fraction();
    let ok = acc >= UNSANITIZED_ACCURACY && (acc - recheck).abs() < 1e-12 && run.secs <= UNSANITIZED_BUDGET_SECS;
    Ok(verdict(
        2,
        ok,
        format!("mnist_cnn test accuracy {:.2}% after {} epochs; {:.0} s", 100.0 * acc, config.epochs, run.secs),
    ))
}

fn criterion_3(cache: &Cache, glyphs: &Path) -> Result<(Outcome, Timed<Checkpoint>)> {
    let tmp = tempfile::tempdir()?;
    let (train_dir, held_dir) = split_glyphs_by_font(glyphs, tmp.path())?;
    let (train_base, held_base) = (load_glyph_dir(&train_dir)?, load_glyph_dir(&held_dir)?);
    let per_digit = *train_base.class_counts().iter().min().unwrap();
    let train_set = augment_canonical(&train_base, &CANONICAL_SCALES, &CANONICAL_ROTATIONS)?;
    let held_set = augment_canonical(&held_base, &CANONICAL_SCALES, &CANONICAL_ROTATIONS)?;
    let config = TrainConfig { epochs: 8, ..TrainConfig::new(SEED) };
    let run = train_cached(cache, "canonical_cnn", &ArchDescriptor::canonical_cnn(), &config, &train_set, &held_set)?;
    let acc = test_accuracy(&run.value);
    let ok = acc >= CANONICAL_ACCURACY && per_digit >= MIN_GLYPHS_PER_DIGIT;
    let v = verdict(
        3,
        ok,
        format!(
            "canonical_cnn held-out-font accuracy {:.2}% on {} images ({} base glyphs, min {per_digit} per digit in training, {} scales x {} rotations); {:.0} s",
            100.0 * acc,
            held_set.len(),
            held_base.len(),
            CANONICAL_SCALES.len(),
            CANONICAL_ROTATIONS.len(),
            run.secs
        ),
    );
    Ok((v, run))
}

fn run() -> Result<bool> {
    let cache = Cache::new()?;
    let mnist = Mnist::load()?;
    let glyphs = data_dir("SANILAB_GLYPHS", "data/canonical");
    let have_glyphs = (0..10).all(|d| glyphs.join(d.to_string()).is_dir());
    let mut verdicts = Vec::new();
    let mut emit = |v: Outcome| {
        report(&v);
        verdicts.push(v);
    };

    emit(criterion_1()?);

    let Some(mnist) = mnist else {
        for c in 2..=9 {
            emit(skip(c, "MNIST not found"));
        }
        let config = TrainConfig { epochs: 1, ..TrainConfig::new(SEED) };
        let model = Timed { value: train(&desk_arch(), &synthetic_pool(200), &config, None)?, secs: 0.0 };
        let pool = synthetic_pool(KAPPA_PAIRS * 2);
        let pairs = pool.subset(&(0..KAPPA_PAIRS).collect::<Vec<_>>(), "pairs");
        emit(criterion_10(&cache, &model, &mut Vec::new(), &pool, &pairs)?);
        return Ok(finish(&verdicts));
    };

    emit(criterion_2(&cache, &mnist)?);
    let canonical = if have_glyphs {
        let (v, model) = criterion_3(&cache, &glyphs)?;
        emit(v);
        Some(model)
    } else {
        emit(skip(3, "canonical glyphs not found"));
        None
    };

    let unsanitized =
        train_cached(&cache, "desk-unsanitized", &desk_arch(), &desk_config(), &mnist.train, &mnist.test)?;
    eprintln!("desk unsanitized model: {:.2}% test accuracy", 100.0 * test_accuracy(&unsanitized.value));
    let self_arm =
        build_arm(&cache, &mnist, "self", unsanitized.value.clone(), &SELF_THRESHOLDS, SanitizeMode::SelfScored)?;
    let canonical_arm = match &canonical {
        Some(c) => Some(build_arm(
            &cache,
            &mnist,
            "canonical",
            c.value.clone(),
            &CANONICAL_THRESHOLDS,
            SanitizeMode::Canonical,
        )?),
        None => None,
    };
    let mut arms = vec![&self_arm];
    arms.extend(canonical_arm.as_ref());

    emit(criterion_4(&arms, &mnist.train));
    emit(criterion_5(&arms));

    let pool = mnist.attack_pool(0, ATTACKED_EXAMPLES);
    let mut igsm_log = Vec::new();
    emit(criterion_6(&cache, &arms, &unsanitized, &pool, &mut igsm_log)?);
    let small = mnist.attack_pool(0, DISTORTION_EXAMPLES);
    emit(criterion_7(&cache, &arms, &unsanitized, &small)?);

    let detector_model = canonical_arm
        .as_ref()
        .and_then(|arm| arm.models.iter().find(|(t, _)| *t == DETECTOR_THRESHOLD))
        .and_then(|(t, m)| m.as_ref().map(|m| (*t, m)));
    match detector_model {
        Some((t, sanitized)) => {
            let detector = build_detector(&mnist, &unsanitized, sanitized, t)?;
            emit(criterion_8(&cache, &detector, &unsanitized, &pool, &mut igsm_log)?);
            emit(criterion_9(&cache, &detector, &unsanitized, &mnist, &pool, &mut igsm_log)?);
        }
        None => {
            emit(skip(8, "no canonical sanitized model for the detector"));
            emit(skip(9, "no canonical sanitized model for the detector"));
        }
    }

    let pairs = mnist.attack_pool(ATTACKED_EXAMPLES, KAPPA_PAIRS);
    emit(criterion_10(&cache, &unsanitized, &mut igsm_log, &pool, &pairs)?);
    Ok(finish(&verdicts))
}

/// Exact-property criteria gate the exit status.
fn finish(verdicts: &[Outcome]) -> bool {
    let passed = verdicts.iter().filter(|v| v.status == Status::Pass).count();
    let failed: Vec<u8> = verdicts.iter().filter(|v| v.status == Status::Fail).map(|v| v.criterion).collect();
    let skipped = verdicts.iter().filter(|v| v.status == Status::Skip).count();
    println!("acceptance: {passed} passed, {} failed {failed:?}, {skipped} skipped", failed.len());
    !failed.iter().any(|c| [1, 4, 10].contains(c))
}

fn main() {
    match run() {
        Ok(true) => {}
        Ok(false) => {
            eprintln!("an exact-property criterion failed");
            std::process::exit(1);
        }
        Err(e) => {
            eprintln!("acceptance run failed: {e:#}");
            std::process::exit(1);
        }
    }
}
