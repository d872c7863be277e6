//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails. Criteria that need the DRIVE images report
//! NOT RUN unless `VESSELNET_DRIVE_ROOT` points at a converted copy.

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use vesselnet::data::Normalization;
use vesselnet::data::{load_split, sample_training_set, FundusSample, Split};
use vesselnet::ensemble::{
    predict_image, sample_hyperparams, train_ensemble, train_member, EnsembleConfig, EnsembleModel,
    HyperparamRanges, ModelHyperparams, ProbabilityMap, TrainConfig,
};
use vesselnet::eval::{max_avg_accuracy, roc, roc_scores, ConfusionMatrix, ScoredImage};
use vesselnet::gradcheck::{self, TOLERANCE};
use vesselnet::layers::{affine_forward, conv_forward, maxpool_forward, relu_forward, LayerParams};
use vesselnet::network::{Architecture, VesselNet};
use vesselnet::tensor::rng_gaussian;
use vesselnet::{Rng, Tensor};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

use Outcome::{Fail, NotRun, Pass};

type Criterion = (&'static str, fn() -> Outcome);

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn fixture_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/drive_mini")
}

fn single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(f)
}

// 1 ------------------------------------------------------------------------

fn gradient_correctness() -> Outcome {
    let options = gradcheck::Options::default();
    let started = Instant::now();
    let results = gradcheck::run_all(&options).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.worst.error).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} {}[{}]", r.check.name(), r.worst.tensor, r.worst.index))
        .collect();
    let configs_ok = results.iter().all(|r| r.configs >= 50);
    verdict(
        failed.is_empty() && configs_ok && elapsed < 60.0,
        format!(
            "{} checks x {} configs, max rel error {worst:.2e} (< {TOLERANCE:e}), {elapsed:.1}s (< 60s){}",
            results.len(),
            options.configs,
            if failed.is_empty() { String::new() } else { format!(", failing: {}", failed.join(", ")) }
        ),
    )
}

// 2 ------------------------------------------------------------------------

/// Direct six-loop cross-correlation with zero padding.
#[allow(clippy::too_many_arguments)]
fn conv_oracle(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    wt: &[f64],
    b: &[f64],
    f: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Vec<f64> {
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (w + 2 * p - k) / s + 1;
    let mut out = vec![0.0; f * oh * ow];
    for o in 0..f {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * s + ky) as isize - p as isize;
                            let ix = (xo * s + kx) as isize - p as isize;
                            let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            };
                            acc += v * wt[((o * c + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * oh + y) * ow + xo] = acc + b[o];
            }
        }
    }
    out
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 0 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn kappa_by_definition(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    let n = tp + tn + fp + fn_;
    let po = (tp + tn) / n;
    let pe = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (n * n);
    (po - pe) / (1.0 - pe)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(2);
    let mut conv_mismatch = 0;
    let mut geometries = vec![(3, 31, 31, 64, 4, 1, 2)];
    for _ in 0..40 {
        let h = 3 + rng.below(10) as usize;
        let k = 1 + rng.below(h.min(5) as u64) as usize;
        geometries.push((
            1 + rng.below(4) as usize,
            h,
            h + rng.below(3) as usize,
            1 + rng.below(5) as usize,
            k,
            1 + rng.below(3) as usize,
            rng.below(3) as usize,
        ));
    }
    for &(c, h, w, f, k, s, p) in &geometries {
        let x: Tensor<f64> = rng_gaussian(&mut rng, &[c, h, w], 0.0, 1.0);
        let wt: Tensor<f64> = rng_gaussian(&mut rng, &[f, c, k, k], 0.0, 1.0);
        let b: Tensor<f64> = rng_gaussian(&mut rng, &[f], 0.0, 1.0);
        let want = conv_oracle(x.data(), c, h, w, wt.data(), b.data(), f, k, s, p);
        let (y, _) = conv_forward(&x, &LayerParams::new(wt, b), s, p).unwrap();
        if y.data() != want.as_slice() {
            conv_mismatch += 1;
        }
    }

    let mut auc_gap: f64 = 0.0;
    for _ in 0..1000 {
        let n = 2 + rng.below(499) as usize;
        let levels = [4u64, 50, 1 << 30][rng.below(3) as usize];
        let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.below(levels) as f64 / levels as f64)
            .collect();
        let curve = roc_scores(&scores, &labels).unwrap();
        auc_gap = auc_gap.max((curve.auc - pairwise_auc(&scores, &labels)).abs());
    }

    let exact = ConfusionMatrix {
        tp: 40,
        tn: 40,
        fp: 10,
        fn_: 10,
    }
    .kappa()
    .unwrap();
    let mut kappa_gap: f64 = 0.0;
    for _ in 0..200 {
        let m = ConfusionMatrix {
            tp: 1 + rng.below(500),
            tn: 1 + rng.below(500),
            fp: rng.below(200),
            fn_: rng.below(200),
        };
        let want = kappa_by_definition(m.tp as f64, m.tn as f64, m.fp as f64, m.fn_ as f64);
        kappa_gap = kappa_gap.max((m.kappa().unwrap() - want).abs());
    }
    verdict(
        conv_mismatch == 0 && auc_gap < 1e-9 && exact == 0.6 && kappa_gap < 1e-12,
        format!(
            "conv {} / {} geometries bit-exact; AUC vs pairwise max gap {auc_gap:.1e} over 1000 instances; \
             kappa(40,40,10,10) = {exact}, max gap to definition {kappa_gap:.1e}",
            geometries.len() - conv_mismatch,
            geometries.len()
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn shape_invariants() -> Outcome {
    let mut rng = Rng::new(3);
    let mut worst_sum: f64 = 0.0;
    let mut problems = Vec::new();
    for hidden in [128, 256, 512] {
        let hyper = ModelHyperparams {
            retention_prob: 0.7,
            l2: 1e-3,
            hidden_units: hidden,
            seed: hidden as u64,
        };
        let net: VesselNet = VesselNet::build(&hyper, &mut rng).unwrap();
        let patch: Tensor = rng_gaussian(&mut rng, &[3, 31, 31], 0.4, 0.3);
        let probs = net
            .predict(&patch.reshape(&[1, 3, 31, 31]).unwrap())
            .unwrap();
        if probs.dims() != [1, 2] {
            problems.push(format!("probabilities {:?}", probs.dims()));
        }
        worst_sum =
            worst_sum.max((probs.data().iter().map(|&p| p as f64).sum::<f64>() - 1.0).abs());

        // observed shapes, stage by stage
        let [c1, c2, c3, a1, a2] = net.layers();
        let (h1, _) = conv_forward(&patch, c1, 1, 2).unwrap();
        let (h1, _) = relu_forward(h1);
        let (h2, _) = conv_forward(&h1, c2, 1, 2).unwrap();
        let (p2, _) = maxpool_forward(&relu_forward(h2.clone()).0, 2, 2).unwrap();
        let (h3, _) = conv_forward(&p2, c3, 1, 2).unwrap();
        let (p3, _) = maxpool_forward(&relu_forward(h3.clone()).0, 2, 2).unwrap();
        let (f1, _) = affine_forward(&p3, a1).unwrap();
        let (f2, _) = affine_forward(&relu_forward(f1.clone()).0, a2).unwrap();
        let observed: Vec<Vec<usize>> = [&patch, &h1, &h2, &p2, &h3, &p3, &f1, &f2]
            .iter()
            .map(|t| t.dims().to_vec())
            .collect();
        let table = vec![
            vec![3, 31, 31],
            vec![64, 32, 32],
            vec![64, 33, 33],
            vec![64, 16, 16],
            vec![64, 17, 17],
            vec![64, 8, 8],
            vec![hidden],
            vec![2],
        ];
        if observed != table {
            problems.push(format!("n={hidden}: observed {observed:?}"));
        }
        let declared: Vec<Vec<usize>> = Architecture::standard(hidden)
            .stages()
            .unwrap()
            .into_iter()
            .map(|s| s.dims)
            .collect();
        if declared.first() != Some(&table[0]) || declared.iter().all(|d| d != &table[1]) {
            problems.push(format!("n={hidden}: declared {declared:?}"));
        }
    }
    verdict(
        problems.is_empty() && worst_sum < 1e-6,
        format!(
            "conv1 64x32x32 .. affine2 2 for n in {{128,256,512}}; |sum(p) - 1| <= {worst_sum:.1e}{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn overfit_sanity() -> Outcome {
    let train = load_split(&fixture_root(), Split::Training, &Split::Training.ids()).unwrap();
    let set = sample_training_set(&train, 256, &mut Rng::new(7), false).unwrap();
    let hyper = ModelHyperparams {
        retention_prob: 0.9,
        l2: 1e-3,
        hidden_units: 128,
        seed: 11,
    };
    // capacity check: the learning rate is held at its base value
    let mut config = TrainConfig {
        epochs: 200,
        ..TrainConfig::default()
    };
    config.optimizer.anneal = 1.0;
    let started = Instant::now();
    let (_, log) = single_threaded(|| train_member(&hyper, &set, &config)).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    verdict(
        log.final_accuracy >= 0.99 && elapsed < 300.0,
        format!(
            "256 patches, 200 epochs, retention {}, l2 {:e}, n={}: training accuracy {:.4} (>= 0.99), {elapsed:.0}s (< 300s)",
            hyper.retention_prob, hyper.l2, hyper.hidden_units, log.final_accuracy
        ),
    )
}

// 5 ------------------------------------------------------------------------

struct Scale {
    k: usize,
    patches: usize,
    epochs: usize,
    train_ids: Vec<u32>,
    test_ids: Vec<u32>,
}

fn end_to_end(root: &Path, scale: &Scale, seed: u64) -> (f64, Option<f64>, f64, f64) {
    let train = load_split(root, Split::Training, &scale.train_ids).unwrap();
    let test = load_split(root, Split::Test, &scale.test_ids).unwrap();
    let config = EnsembleConfig {
        k: scale.k,
        patches_per_model: scale.patches,
        ranges: HyperparamRanges::default(),
        train: TrainConfig {
            epochs: scale.epochs,
            ..TrainConfig::default()
        },
    };
    let started = Instant::now();
    let model = train_ensemble(&train, &config, &mut Rng::new(seed), &|_, _| {}).unwrap();
    let images: Vec<ScoredImage> = test
        .iter()
        .map(|s| ScoredImage::from_map(&predict_image(&model, s, 256).unwrap(), s, false).unwrap())
        .collect();
    let sweep = max_avg_accuracy(&images).unwrap();
    let curve = roc(&images).unwrap();
    (
        sweep.mean_accuracy,
        sweep.kappa.ok(),
        curve.auc,
        started.elapsed().as_secs_f64(),
    )
}

/// Baselines recorded from one run of the pilot on the committed fixture.
const PILOT_ACCURACY: f64 = 0.772091;
const PILOT_AUC: f64 = 0.703563;

fn desk_scale() -> Outcome {
    let pilot = Scale {
        k: 2,
        patches: 2000,
        epochs: 5,
        train_ids: (21..=25).collect(),
        test_ids: vec![1, 2],
    };
    let (acc, _, auc, secs) = single_threaded(|| end_to_end(&fixture_root(), &pilot, 5));
    let pilot_line = format!("fixture pilot accuracy {acc:.4} (baseline {PILOT_ACCURACY:.4} +- 0.01), auc {auc:.4} (baseline {PILOT_AUC:.4} +- 0.01), {secs:.0}s");
    let pilot_ok = (acc - PILOT_ACCURACY).abs() <= 0.01 && (auc - PILOT_AUC).abs() <= 0.01;
    let Some(root) = std::env::var_os("VESSELNET_DRIVE_ROOT").map(PathBuf::from) else {
        return if pilot_ok {
            NotRun(format!(
                "VESSELNET_DRIVE_ROOT unset, DRIVE run skipped; {pilot_line}"
            ))
        } else {
            Fail(pilot_line)
        };
    };
    let desk = Scale {
        k: 2,
        patches: 10000,
        epochs: 10,
        train_ids: (21..=25).collect(),
        test_ids: vec![1, 2],
    };
    let (acc, kappa, auc, secs) = end_to_end(&root, &desk, 5);
    verdict(
        pilot_ok && secs < 1800.0,
        format!(
            "DRIVE k=2 10000 patches 10 epochs: accuracy {acc:.4}, kappa {}, auc {auc:.4}, {secs:.0}s (< 1800s); {pilot_line}",
            kappa.map_or("undefined".into(), |k| format!("{k:.4}"))
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn full_scale() -> Outcome {
    let (Some(root), Ok(_)) = (
        std::env::var_os("VESSELNET_DRIVE_ROOT"),
        std::env::var("VESSELNET_EXTENDED"),
    ) else {
        return NotRun("extended run; set VESSELNET_DRIVE_ROOT and VESSELNET_EXTENDED=1".into());
    };
    let full = Scale {
        k: 12,
        patches: 60000,
        epochs: TrainConfig::default().epochs,
        train_ids: Split::Training.ids(),
        test_ids: Split::Test.ids(),
    };
    let (acc, kappa, auc, secs) = end_to_end(Path::new(&root), &full, 1);
    let kappa = kappa.unwrap_or(f64::NAN);
    let inside = (acc - 0.947).abs() <= 0.010
        && (kappa - 0.703).abs() <= 0.050
        && (auc - 0.9283).abs() <= 0.010;
    // outside the bands calls for investigation rather than failing
    Pass(format!(
        "accuracy {acc:.4} (0.947 +- 0.010), kappa {kappa:.4} (0.703 +- 0.050), auc {auc:.4} (0.9283 +- 0.010), {secs:.0}s: {}",
        if inside { "within bands" } else { "OUTSIDE bands, investigate" }
    ))
}

// 7 ------------------------------------------------------------------------

fn small_test_image() -> FundusSample {
    let test = load_split(&fixture_root(), Split::Test, &[1]).unwrap();
    test[0].crop(18, 18, 24, 24).unwrap()
}

fn determinism() -> Outcome {
    let train = load_split(&fixture_root(), Split::Training, &[21, 22, 23]).unwrap();
    let config = EnsembleConfig {
        k: 2,
        patches_per_model: 120,
        ranges: HyperparamRanges::default(),
        train: TrainConfig {
            epochs: 2,
            batch_size: 40,
            mean_subtract: true,
            ..TrainConfig::default()
        },
    };
    let image = small_test_image();
    let run = || {
        single_threaded(|| {
            let model = train_ensemble(&train, &config, &mut Rng::new(7), &|_, _| {}).unwrap();
            let map = predict_image(&model, &image, 64).unwrap();
            (model.to_bytes(), map.to_bytes())
        })
    };
    let (model_a, map_a) = run();
    let (model_b, map_b) = run();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("m.vnet");
    std::fs::write(&path, &model_a).unwrap();
    let loaded = vesselnet::ensemble::load_model(&path).unwrap();
    let reloaded_map = single_threaded(|| predict_image(&loaded, &image, 64).unwrap()).to_bytes();
    let parsed = ProbabilityMap::from_bytes(&map_a).unwrap();
    verdict(
        model_a == model_b
            && map_a == map_b
            && reloaded_map == map_a
            && loaded.to_bytes() == model_a,
        format!(
            "model files {} ({} bytes), PMAP files {} ({}x{}), save-load-predict {}",
            if model_a == model_b {
                "identical"
            } else {
                "DIFFER"
            },
            model_a.len(),
            if map_a == map_b {
                "identical"
            } else {
                "DIFFER"
            },
            parsed.width(),
            parsed.height(),
            if reloaded_map == map_a {
                "bit-exact"
            } else {
                "DIFFERS"
            }
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn ensemble_law() -> Outcome {
    let mut rng = Rng::new(8);
    let members: Vec<VesselNet> = (0..4)
        .map(|_| {
            let hyper = sample_hyperparams(&mut rng, &HyperparamRanges::default());
            let mut net = VesselNet::build(&hyper, &mut rng).unwrap();
            // non-zero biases so members disagree visibly
            for layer in net.layers_mut() {
                layer.bias = rng_gaussian(&mut rng, layer.bias.dims(), 0.0, 0.05);
            }
            net
        })
        .collect();
    let model = EnsembleModel::from_members(members, Normalization::default()).unwrap();
    let image = small_test_image();
    let combined = predict_image(&model, &image, 50).unwrap();
    let singles: Vec<ProbabilityMap> = (0..model.k())
        .map(|i| predict_image(&model.subset(&[i]).unwrap(), &image, 50).unwrap())
        .collect();
    let mut worst: f64 = 0.0;
    let mut spread: f64 = 0.0;
    for p in 0..combined.values().len() {
        let vals: Vec<f64> = singles.iter().map(|m| m.values()[p] as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        worst = worst.max((combined.values()[p] as f64 - mean).abs());
        let (lo, hi) = vals
            .iter()
            .fold((1.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        spread = spread.max(hi - lo);
    }
    verdict(
        worst <= 1e-7 && spread > 1e-3,
        format!("k=4, {} pixels: max |map - mean of member maps| = {worst:.1e} (<= 1e-7), member spread {spread:.3}", combined.values().len()),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("oracle equivalence", oracle_equivalence),
        ("shape and normalization invariants", shape_invariants),
        ("overfit sanity", overfit_sanity),
        ("desk-scale end-to-end", desk_scale),
        ("full-scale reproduction", full_scale),
        ("determinism", determinism),
        ("ensemble law", ensemble_law),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !only.is_empty() && !only.iter().any(|o| o == &id || name.contains(o.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Fail(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let (tag, detail) = match outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {id} {name}: {tag}: {detail}");
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
