//! Acceptance checks. Runs without the libtest harness so every check prints
//! exactly one PASS/FAIL line; the process fails if any check fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng as _;

use digitfuse::aggregate::{degree_of_certainty, VoteTally};
use digitfuse::codes::{ecoc_matrix_10x15, hamming_decode, CodeMatrix};
use digitfuse::dataset::{
    parse_idx_images, parse_idx_labels, serialize_idx_images, serialize_idx_labels, write_idx_pair, Dataset, Image,
};
use digitfuse::ensemble::{
    bootstrap_indices, pre_emphasis_raw, pre_emphasis_weights, predict_fusion, switch_labels, train_fusion, FusionNode,
    PreEmphasisParams, TrainedEnsemble,
};
use digitfuse::harness::{run_experiment, ExperimentConfig, CROSS_ENTRY};
use digitfuse::nnet::{gradient_check, Activation, ArchSpec, LayerSpec, LrSchedule, Regularizer, Shape, ToyBatch};
use digitfuse::seed;

mod common;
use common::toy_digits;

// Tolerances and limits, all in one place.
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const GRAD_TIME_LIMIT: Duration = Duration::from_secs(10);
const EMPHASIS_TOL: f64 = 1e-12;
const DECODE_TRIALS: usize = 10_000;
const DECODE_TIME_LIMIT: Duration = Duration::from_secs(5);
const CERTAINTY_MAX_SIZES: (u32, u32) = (9, 11);
const BOOTSTRAP_SEEDS: u64 = 100;
const BOOTSTRAP_N: usize = 1000;
const BOOTSTRAP_BAND: (f64, f64) = (0.60, 0.67);
const SWITCH_SEEDS: u64 = 20;
const DESK_MARGIN_PP: f64 = 0.1;
const DESK_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);

type Outcome = Result<String, String>;

fn check(cond: bool, ok: impl Into<String>, bad: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(bad.into())
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- gradients

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let lr = LrSchedule { initial: 0.1, decay: 1.0, floor: 0.0 };
    let arch = |layers| ArchSpec { layers, lr, batch_size: 5, epochs: 1 };
    let dense = |units, activation| LayerSpec::Dense { units, activation, regularizer: Regularizer::None };
    let conv = |activation| LayerSpec::Conv { filters: 2, kernel: 3, stride: 1, activation };
    let pool = LayerSpec::Maxpool { size: 2, stride: None };
    let cases: Vec<(&str, Shape, Vec<LayerSpec>)> = vec![
        ("dense/relu", Shape::image(1, 4), vec![dense(6, Activation::Relu), LayerSpec::Output]),
        ("dense/sigmoid", Shape::image(1, 4), vec![dense(6, Activation::Sigmoid), LayerSpec::Output]),
        ("softmax only", Shape::image(2, 3), vec![LayerSpec::Output]),
        ("conv/relu", Shape::image(6, 6), vec![conv(Activation::Relu), LayerSpec::Output]),
        ("conv/sigmoid", Shape::image(6, 6), vec![conv(Activation::Sigmoid), LayerSpec::Output]),
        ("conv+maxpool", Shape::image(6, 6), vec![conv(Activation::Relu), pool.clone(), LayerSpec::Output]),
        (
            "conv+maxpool+dense",
            Shape::image(6, 6),
            vec![conv(Activation::Sigmoid), pool, dense(4, Activation::Relu), LayerSpec::Output],
        ),
    ];
    let mut worst = (0.0f64, "");
    for (i, (name, shape, layers)) in cases.into_iter().enumerate() {
        let spec = arch(layers).bind(shape, 3, 100 + i as u64);
        let mut rng = seed::rng(i as u64);
        let n = 5;
        let batch = ToyBatch {
            inputs: Array2::from_shape_fn((n, shape.flat()), |_| rng.random_range(-1.0..1.0)),
            labels: (0..n).map(|k| k % 3).collect(),
            weights: (0..n).map(|k| 0.5 + 0.3 * k as f64).collect(),
        };
        let err = gradient_check(&spec, &batch).map_err(|e| format!("{name}: {e}"))?;
        if err > worst.0 {
            worst = (err, name);
        }
    }
    let t = start.elapsed();
    check(
        worst.0 < GRAD_MAX_REL_ERR && t < GRAD_TIME_LIMIT,
        format!("max rel err {:.2e} ({}) in {:.2?}", worst.0, worst.1, t),
        format!("max rel err {:.2e} ({}) in {:.2?}", worst.0, worst.1, t),
    )
}

// ---------------------------------------------------------------- emphasis

fn emphasis_oracle(t: f64, o: f64, alpha: f64, beta: f64) -> f64 {
    let err = (t - o).abs();
    let border = (1.0 - o) * (1.0 + o);
    alpha + (1.0 - alpha) * beta * err * err + (1.0 - alpha) * (1.0 - beta) * border
}

fn emphasis_exactness() -> Outcome {
    let outputs: Vec<f64> = (0..=200).map(|k| -1.0 + k as f64 / 100.0).collect();
    let mut worst = 0.0f64;
    let mut points = 0usize;
    for t in [1i8, -1] {
        let targets = vec![t; outputs.len()];
        for i in 0..=100 {
            for j in 0..=100 {
                let (alpha, beta) = (i as f64 / 100.0, j as f64 / 100.0);
                let params = PreEmphasisParams { alpha, beta };
                let raw = pre_emphasis_raw(&targets, &outputs, params).map_err(|e| e.to_string())?;
                let want: Vec<f64> = outputs.iter().map(|&o| emphasis_oracle(f64::from(t), o, alpha, beta)).collect();
                let mean = want.iter().sum::<f64>() / want.len() as f64;
                let norm = pre_emphasis_weights(&targets, &outputs, params).map_err(|e| e.to_string())?;
                for k in 0..outputs.len() {
                    worst = worst.max((raw[k] - want[k]).abs()).max((norm.as_slice()[k] - want[k] / mean).abs());
                }
                points += outputs.len();
            }
        }
    }
    if worst > EMPHASIS_TOL {
        return Err(format!("max deviation {worst:.2e} over {points} points"));
    }
    // alpha = 1 gives exact ones, alpha = 0 / beta = 1 / t = o gives exact zeros
    for t in [1i8, -1] {
        let targets = vec![t; outputs.len()];
        let ones = pre_emphasis_raw(&targets, &outputs, PreEmphasisParams { alpha: 1.0, beta: 0.3 }).unwrap();
        let normed = pre_emphasis_weights(&targets, &outputs, PreEmphasisParams { alpha: 1.0, beta: 0.7 }).unwrap();
        if ones.iter().chain(normed.as_slice()).any(|&w| w != 1.0) {
            return Err("alpha=1 is not exactly one".into());
        }
        let zero = pre_emphasis_raw(&[t], &[f64::from(t)], PreEmphasisParams { alpha: 0.0, beta: 1.0 }).unwrap();
        if zero[0] != 0.0 {
            return Err(format!("alpha=0, beta=1, t=o gave {}", zero[0]));
        }
    }
    Ok(format!("{points} points, max deviation {worst:.2e}; boundaries exact"))
}

// ---------------------------------------------------------------- decoding

fn nearest_row(code: &CodeMatrix, outputs: &[f64]) -> usize {
    let mut best = (usize::MAX, 0);
    for c in 0..code.n_classes() {
        let mut d = 0;
        for (j, &o) in outputs.iter().enumerate() {
            let bit = if o < 0.0 { -1 } else { 1 };
            if code.get(c, j) != 0 && code.get(c, j) != bit {
                d += 1;
            }
        }
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn ecoc_decoding() -> Outcome {
    let start = Instant::now();
    let code = ecoc_matrix_10x15();
    let mut rng = seed::rng(2024);
    for trial in 0..DECODE_TRIALS {
        let outputs: Vec<f64> = (0..code.n_columns()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let got = hamming_decode(&code, &outputs).map_err(|e| e.to_string())?.class;
        if got != nearest_row(&code, &outputs) {
            return Err(format!("trial {trial}: decoder and oracle disagree"));
        }
    }
    let dmin = code.min_row_distance();
    if dmin < 3 {
        return Err(format!("min row distance {dmin}"));
    }
    let mut flips = 0;
    for c in 0..code.n_classes() {
        for j in 0..code.n_columns() {
            let mut word: Vec<f64> = code.row(c).iter().map(|&b| f64::from(b)).collect();
            word[j] = -word[j];
            if hamming_decode(&code, &word).map_err(|e| e.to_string())?.class != c {
                return Err(format!("flip of class {c} bit {j} misdecoded"));
            }
            flips += 1;
        }
    }
    let t = start.elapsed();
    check(
        t < DECODE_TIME_LIMIT,
        format!("{DECODE_TRIALS} random strings match, {flips} flips corrected, dmin {dmin}, {t:.2?}"),
        format!("too slow: {t:.2?}"),
    )
}

// ---------------------------------------------------------------- certainty

fn tallies_up_to(max_size: u32) -> Vec<VoteTally> {
    let mut out = Vec::new();
    for size in 1..=max_size {
        for a in 0..=size {
            for b in 0..=size - a {
                for c in 0..=size - a - b {
                    out.push(VoteTally::new(vec![a, b, c], size).unwrap());
                }
            }
        }
    }
    out
}

fn first_max(v: &[u64]) -> usize {
    let m = *v.iter().max().unwrap();
    v.iter().position(|&x| x == m).unwrap()
}

// Errors are (0.02, 0.01): the second ensemble is the more accurate one.
fn certainty_oracle(a: &VoteTally, b: &VoteTally) -> usize {
    let va: Vec<u64> = a.votes().iter().map(|&v| u64::from(v)).collect();
    let vb: Vec<u64> = b.votes().iter().map(|&v| u64::from(v)).collect();
    let (wa, wb) = (first_max(&va), first_max(&vb));
    if wa == wb {
        return wa;
    }
    let (sa, sb) = (u64::from(a.size()), u64::from(b.size()));
    let score: Vec<u64> = (0..3).map(|c| va[c] * sb + vb[c] * sa).collect();
    let top = *score.iter().max().unwrap();
    if score[wb] == top {
        wb
    } else {
        first_max(&score)
    }
}

fn degree_of_certainty_oracle() -> Outcome {
    let errs = [0.02, 0.01];
    let left = tallies_up_to(CERTAINTY_MAX_SIZES.0);
    let right = tallies_up_to(CERTAINTY_MAX_SIZES.1);
    let mut pairs = 0usize;
    for a in &left {
        for b in &right {
            let got = degree_of_certainty(&[a.clone(), b.clone()], &errs).map_err(|e| e.to_string())?;
            if got.class != certainty_oracle(a, b) {
                return Err(format!("{:?}/{} vs {:?}/{}", a.votes(), a.size(), b.votes(), b.size()));
            }
            pairs += 1;
        }
    }
    let mut rng = seed::rng(5);
    for _ in 0..20_000 {
        let a = &left[rng.random_range(0..left.len())];
        let b = &right[rng.random_range(0..right.len())];
        let k = rng.random_range(2..=7);
        let base = degree_of_certainty(&[a.clone(), b.clone()], &errs).unwrap().class;
        if degree_of_certainty(&[a.scaled(k), b.clone()], &errs).unwrap().class != base
            || degree_of_certainty(&[a.clone(), b.scaled(k)], &errs).unwrap().class != base
        {
            return Err(format!("scaling by {k} changed the class"));
        }
    }
    for a in &left {
        for b in &right {
            let (wa, wb) = (
                first_max(&a.votes().iter().map(|&v| u64::from(v)).collect::<Vec<_>>()),
                first_max(&b.votes().iter().map(|&v| u64::from(v)).collect::<Vec<_>>()),
            );
            if wa == wb {
                let got = degree_of_certainty(&[a.clone(), b.clone()], &errs).unwrap();
                if got.class != wa || got.invoked {
                    return Err("unanimous pluralities were overridden".into());
                }
            }
        }
    }
    Ok(format!("{pairs} tally pairs match; scale invariance and unanimity hold"))
}

// ---------------------------------------------------------------- resampling

fn bootstrap_statistics() -> Outcome {
    let mut sum = 0.0;
    for s in 0..BOOTSTRAP_SEEDS {
        let idx = bootstrap_indices(BOOTSTRAP_N, 1.0, s).map_err(|e| e.to_string())?;
        if idx.len() != BOOTSTRAP_N {
            return Err(format!("seed {s}: {} indices", idx.len()));
        }
        let mut seen = vec![false; BOOTSTRAP_N];
        idx.iter().for_each(|&i| seen[i] = true);
        sum += seen.iter().filter(|&&b| b).count() as f64 / BOOTSTRAP_N as f64;
    }
    let mean = sum / BOOTSTRAP_SEEDS as f64;
    check(
        (BOOTSTRAP_BAND.0..=BOOTSTRAP_BAND.1).contains(&mean),
        format!("mean unique fraction {mean:.4}"),
        format!("mean unique fraction {mean:.4} outside band"),
    )
}

fn label_switching() -> Outcome {
    let mut cases = 0;
    for n in [10usize, 100, 1000] {
        let images: Vec<Image> =
            (0..n).map(|i| Image::from_clamped(2, 2, [i as f64 / n as f64, 0.5, 0.0, 1.0])).collect();
        let data = Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, "s").unwrap();
        for tenths in 1..=4usize {
            let rate = tenths as f64 / 10.0;
            let expected = tenths * n / 10;
            for s in 0..SWITCH_SEEDS {
                let out = switch_labels(&data, rate, s).map_err(|e| e.to_string())?;
                let changed = out.labels().iter().zip(data.labels()).filter(|(a, b)| a != b).count();
                let same_images = out.images().iter().zip(data.images()).all(|(a, b)| a == b);
                if out.len() != n || changed != expected || !same_images || out.labels().iter().any(|&l| l >= 10) {
                    return Err(format!("N={n} S={rate} seed {s}: {changed} changed, expected {expected}"));
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, exactly floor(S*N) labels moved to another class"))
}

// ---------------------------------------------------------------- structure

fn shrink_archs(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map.iter_mut() {
                if matches!(k.as_str(), "arch" | "stage1" | "member") {
                    *v = serde_json::to_value(ArchSpec::mlp(6, 0.1, 16, 2)).unwrap();
                } else {
                    shrink_archs(v);
                }
            }
            map.remove("sdae");
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(shrink_archs),
        _ => {}
    }
}

fn shipped_tree(config: &str, tree: &str) -> Result<FusionNode, String> {
    let path = repo_root().join(config);
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut json: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let mut node = json["trees"][tree].take();
    shrink_archs(&mut node);
    serde_json::from_value(node).map_err(|e| e.to_string())
}

fn structural_accounting() -> Outcome {
    let data = toy_digits(200, 1);
    let val = toy_digits(50, 2);
    let sets: BTreeMap<String, Dataset> =
        ["train", "dataset1", "dataset2"].iter().map(|k| (k.to_string(), data.clone())).collect();

    let fs1 = shipped_tree("configs/desk/fs1.json", "fs1")?;
    let mut weights: Vec<u32> = fs1.effective_weights().into_values().collect();
    weights.sort_unstable_by(|a, b| b.cmp(a));
    if fs1.nominal_size() != 9 || weights != [3, 2, 2, 1, 1] {
        return Err(format!("FS1 size {} weights {weights:?}", fs1.nominal_size()));
    }
    let trained = train_fusion(&fs1, &sets, &val, 3).map_err(|e| e.to_string())?;
    let tallies = predict_fusion(&trained, val.images()).map_err(|e| e.to_string())?;
    if tallies.iter().any(|t| t.size() != 9 || t.votes().iter().sum::<u32>() != 9) {
        return Err("FS1 tally does not hold 9 votes".into());
    }
    if trained.leaf_count() != 5 {
        return Err(format!("FS1 trained {} distinct networks", trained.leaf_count()));
    }

    let fs2 = shipped_tree("configs/desk/fs2.json", "fs2")?;
    let m = match &fs2 {
        FusionNode::EcocStage(spec) => spec.second_level.members(),
        _ => return Err("fs2 is not an ECOC stage".into()),
    };
    let trained = train_fusion(&fs2, &sets, &val, 4).map_err(|e| e.to_string())?;
    let TrainedEnsemble::Ecoc(e) = &trained else {
        return Err("fs2 did not train an ECOC stage".into());
    };
    let second: usize = e.members.iter().map(Vec::len).sum();
    let ok = e.members.len() == 15 && e.members.iter().all(|col| col.len() == m) && second == 15 * m;
    check(
        ok,
        format!("FS1 size 9, weights 3/2/2/1/1; FS2 trained {second} = 15 x {m} second-level leaves"),
        format!("FS2 trained {second} second-level leaves, expected 15 x {m}"),
    )
}

// ---------------------------------------------------------------- experiments

fn desk_end_to_end() -> Outcome {
    let path = repo_root().join("configs/desk/mnist-net10.json");
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    if !cfg.data.train_images.exists() {
        return Err(format!("MNIST files missing at {}; see README", cfg.data.train_images.display()));
    }
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    cfg.output_dir = out.path().to_path_buf();
    let start = Instant::now();
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let median = |name: &str| report.entry(name).map(|e| e.median()).ok_or(format!("no entry {name}"));
    let (single, bagged) = (median("single")?, median("bagged")?);
    let (fs1, fs2, cross) = (median("fs1")?, median("fs2")?, median(CROSS_ENTRY)?);
    let a = bagged <= single + DESK_MARGIN_PP;
    let b = cross <= fs1.min(fs2) + DESK_MARGIN_PP;
    let msg = format!(
        "{} runs in {:.1} min; median % single {single:.2} bagged {bagged:.2} (a {}), fs1 {fs1:.2} fs2 {fs2:.2} cross {cross:.2} (b {})",
        report.runs,
        t.as_secs_f64() / 60.0,
        if a { "ok" } else { "fails" },
        if b { "ok" } else { "fails" },
    );
    check(a && b && t < DESK_TIME_LIMIT, msg.clone(), msg)
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let data = toy_digits(600, 9);
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    write_idx_pair(&data, &images, &labels).unwrap();
    let json = serde_json::json!({
        "data": { "train_images": images, "train_labels": labels },
        "split": { "train": 300, "validation": 100, "test": 200 },
        "split_seed": 17,
        "augments": { "shifted": { "plan": "dataset2" } },
        "trees": {
            "single": { "node": "leaf", "dataset": "train", "arch": ArchSpec::mlp(12, 0.1, 16, 3) },
            "bagged": { "node": "bagged", "params": { "fraction": 0.8, "members": 3 },
                "child": { "node": "leaf", "dataset": "shifted", "arch": ArchSpec::mlp(12, 0.1, 16, 2) } },
            "ecoc": { "node": "ecoc_stage", "dataset": "train", "code": "ecoc",
                "pre_emphasis": { "alpha": 0.5, "beta": 0.5 },
                "stage1": ArchSpec::mlp(6, 0.1, 16, 1),
                "second_level": { "kind": "switched", "rate": 0.2, "members": 2 },
                "member": ArchSpec::mlp(6, 0.1, 16, 1) }
        },
        "evaluate": ["single"],
        "cross": { "trees": ["bagged", "ecoc"] },
        "runs": 2,
        "seed": 11,
        "output_dir": dir.join("unused")
    });
    ExperimentConfig::from_json(&json.to_string()).unwrap()
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = small_config(dir.path());
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for k in 0..2 {
        cfg.output_dir = dir.path().join(format!("out{k}"));
        reports.push(run_experiment(&cfg).map_err(|e| e.to_string())?);
        logs.push(std::fs::read(cfg.output_dir.join("run-001/decisions.csv")).map_err(|e| e.to_string())?);
    }
    let bits = |r: &digitfuse::harness::RunReport| -> Vec<Vec<u64>> {
        r.entries.iter().map(|e| e.errors.iter().map(|x| x.to_bits()).collect()).collect()
    };
    let entries = reports[0].entries.len();
    check(
        bits(&reports[0]) == bits(&reports[1]) && logs[0] == logs[1] && reports[0].seeds == reports[1].seeds,
        format!("{entries} entries x {} runs bit-identical, decision logs identical", reports[0].runs),
        "re-run differs",
    )
}

fn idx_round_trip() -> Outcome {
    let dir = repo_root().join("data/mnist");
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}; see README"));
    let (raw_images, raw_labels) = (read("t10k-images-idx3-ubyte")?, read("t10k-labels-idx1-ubyte")?);
    let images = parse_idx_images(&raw_images).map_err(|e| e.to_string())?;
    let labels = parse_idx_labels(&raw_labels).map_err(|e| e.to_string())?;
    let bytes = serialize_idx_images(&images).map_err(|e| e.to_string())?;
    let again = parse_idx_images(&bytes).map_err(|e| e.to_string())?;
    let label_bytes = serialize_idx_labels(&labels).map_err(|e| e.to_string())?;
    check(
        again == images
            && bytes == raw_images
            && label_bytes == raw_labels
            && parse_idx_labels(&label_bytes).ok() == Some(labels),
        format!("{} test images and labels round-trip byte-identically", images.len()),
        "round trip changed the data",
    )
}

fn main() {
    let checks: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", gradient_correctness),
        ("emphasis weights exactness", emphasis_exactness),
        ("ecoc decoding", ecoc_decoding),
        ("degree of certainty", degree_of_certainty_oracle),
        ("bootstrap statistics", bootstrap_statistics),
        ("label switching", label_switching),
        ("structural accounting", structural_accounting),
        ("desk end-to-end", desk_end_to_end),
        ("reproducibility", reproducibility),
        ("idx round trip", idx_round_trip),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in checks {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed += 1;
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
