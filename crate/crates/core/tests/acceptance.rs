//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Run with `cargo test --test acceptance`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use editprobe::adapters::{AdapterConfig, AdapterSet, BudgetSchedule};
use editprobe::backbone::{Backbone, BackboneConfig, EditSample};
use editprobe::baseline::{baseline_report, mse_image, psnr, psnr_from_mse, ssim, Psnr, SsimConfig};
use editprobe::corr::{krcc, plcc, srcc};
use editprobe::dimension::Target;
use editprobe::image::Image;
use editprobe::io::dataset::LabeledDump;
use editprobe::io::synth::{build_benchmark, generate, generate_images, SynthConfig};
use editprobe::layers::SaliencyConfig;
use editprobe::mos::{process, MosConfig, MosLabels};
use editprobe::numerics::{adamw_step, AdamWConfig, OptimizerState, ParamStore, Tensor};
use editprobe::pipeline::{evaluate, train_probe, EvalSplit, LayerChoice};
use editprobe::probe::{finetune_end_to_end, FinetuneConfig, HeadKind, LabeledSample, TrainConfig};
use rand::Rng;
use rayon::prelude::*;

struct Check {
    pass: bool,
    detail: String,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }

    fn all(parts: Vec<Check>) -> Self {
        let pass = parts.iter().all(|c| c.pass);
        let detail = parts
            .iter()
            .map(|c| format!("{}{}", if c.pass { "" } else { "[fail] " }, c.detail))
            .collect::<Vec<_>>()
            .join("; ");
        Self { pass, detail }
    }
}

fn labeled(cfg: &SynthConfig) -> LabeledDump {
    let bench = build_benchmark(cfg).unwrap();
    LabeledDump::new(bench.data.dump, bench.manifest, None, cfg.seed).unwrap()
}

/// Test-split SRCC of a probe for `target`.
fn held_out_srcc(ds: &LabeledDump, target: Target, layer: LayerChoice, tc: &TrainConfig) -> (usize, f64) {
    let run = train_probe(ds, target, layer, tc, &SaliencyConfig::default()).unwrap();
    let report = evaluate(&[run.model], ds, EvalSplit::Test, false).unwrap();
    (run.layer, report.get(target).unwrap().srcc.unwrap())
}

fn mos_oracle() -> Check {
    let mut pipeline_time = Duration::ZERO;
    let (mut worst, mut rejected_ok, mut set_ok) = (0.0f64, 0, 0);
    for seed in 0..100 {
        let cfg = SynthConfig { n_samples: 100, n_subjects: 20, num_layers: 1, dim: 1, seed, ..SynthConfig::default() };
        let start = Instant::now();
        let data = generate(&cfg).unwrap();
        let out = process(&data.ratings, &MosConfig::default()).unwrap();
        pipeline_time += start.elapsed();

        let reference = common::mos::reference(&data.ratings, 0.05);
        if out.report.rejected_subjects == vec![data.erratic_subject.clone().unwrap()] {
            rejected_ok += 1;
        }
        let same_set = out.report.rejected_subjects.iter().eq(reference.rejected.iter())
            && out.report.n_flagged == reference.flagged
            && out.table.samples.len() == reference.mos.len();
        if same_set {
            set_ok += 1;
        }
        for (id, want) in &reference.mos {
            let got = &out.table.samples[id];
            let got = [got.quality.mos, got.alignment.mos, got.preservation.mos, got.overall];
            for (g, w) in got.iter().zip(want) {
                worst = worst.max((g - w).abs());
            }
        }
    }
    Check::all(vec![
        Check::new(worst <= 1e-9 && set_ok == 100, format!("max |MOS - oracle| = {worst:.1e}, {set_ok}/100 cohorts agree on screening")),
        Check::new(rejected_ok == 100, format!("erratic rater rejected alone in {rejected_ok}/100")),
        Check::new(pipeline_time < Duration::from_secs(10), format!("{:.2} s", pipeline_time.as_secs_f64())),
    ])
}

fn correlation_oracle() -> Check {
    let mut r = common::rng(77);
    let (mut worst, mut compared) = (0.0f64, 0);
    while compared < 200 {
        let n = r.random_range(3..100);
        let alphabet = r.random_range(2..15);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(0..alphabet) as f64).collect();
        let y: Vec<f64> = if compared % 2 == 0 {
            (0..n).map(|_| r.random_range(0..alphabet) as f64).collect()
        } else {
            common::uniform_vec(&mut r, n, -5.0, 5.0)
        };
        let (Ok(s), Ok(p), Ok(k)) = (srcc(&x, &y), plcc(&x, &y), krcc(&x, &y)) else { continue };
        worst = worst
            .max((s - common::corr::spearman(&x, &y)).abs())
            .max((p - common::corr::pearson(&x, &y)).abs())
            .max((k - common::corr::kendall_tau_b(&x, &y)).abs());
        compared += 1;
    }
    let tau = krcc(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
    Check::all(vec![
        Check::new(worst <= 1e-10, format!("200 tied vectors, max error {worst:.1e}")),
        Check::new(tau == 1.0 / 3.0, format!("tau-b([1,2,3],[1,3,2]) = {tau}")),
    ])
}

fn layer_selection() -> Check {
    let outcomes: Vec<(usize, usize, bool)> = (0..100u64)
        .into_par_iter()
        .map(|seed| {
            let planted = 3 + (seed as usize % 4);
            let cfg = SynthConfig { planted_layer: Some(planted), seed: 1000 + seed, ..SynthConfig::default() };
            let ds = labeled(&cfg);
            let stats = editprobe::pipeline::select_layer(&ds, Target::Overall, &SaliencyConfig::default()).unwrap();
            let s = stats.saliency();
            let argmax = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap() + 1;
            (planted, stats.selected, argmax != 1 && argmax != s.len())
        })
        .collect();
    let hits = outcomes.iter().filter(|(k, l, _)| k == l).count();
    let interior = outcomes.iter().filter(|(_, _, i)| *i).count();
    let misses: Vec<String> = outcomes.iter().filter(|(k, l, _)| k != l).map(|(k, l, _)| format!("{k}->{l}")).collect();
    Check::all(vec![
        Check::new(hits >= 95, format!("l* = k* in {hits}/100 (L=8, d=128, N=512, k* in 3..=6) {misses:?}")),
        Check::new(interior == 100, format!("max S(l) interior in {interior}/100")),
    ])
}

fn probe_quality() -> Check {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let start = Instant::now();
    let tc = TrainConfig { epochs: 5, batch: 8, ..TrainConfig::default() };
    let (default_min, noiseless_min) = pool.install(|| {
        let min_over = |base: SynthConfig| {
            (0..3)
                .flat_map(|seed| {
                    let ds = labeled(&SynthConfig { seed, ..base.clone() });
                    Target::ALL.map(|t| held_out_srcc(&ds, t, LayerChoice::Auto, &tc).1)
                })
                .fold(f64::INFINITY, f64::min)
        };
        (min_over(SynthConfig::default()), min_over(SynthConfig::noiseless()))
    });
    let elapsed = start.elapsed();
    Check::all(vec![
        Check::new(default_min >= 0.90, format!("default noise: min test SRCC {default_min:.4} over 3 seeds x 4 dimensions")),
        Check::new(noiseless_min >= 0.99, format!("noiseless: min {noiseless_min:.4}")),
        Check::new(elapsed < Duration::from_secs(300), format!("{:.1} s on one thread", elapsed.as_secs_f64())),
    ])
}

fn ablations() -> Check {
    let tc = TrainConfig::default();
    let layer_wins = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let ds = labeled(&SynthConfig { seed: 2000 + seed, ..SynthConfig::default() });
            let last = ds.num_layers();
            let (_, selected) = held_out_srcc(&ds, Target::Overall, LayerChoice::Auto, &tc);
            let (_, final_layer) = held_out_srcc(&ds, Target::Overall, LayerChoice::Fixed(last), &tc);
            selected >= final_layer
        })
        .count();
    let mlp_wins = (0..100u64)
        .into_par_iter()
        .filter(|&seed| {
            let ds = labeled(&SynthConfig { seed: 3000 + seed, ..SynthConfig::nonlinear() });
            let (layer, mlp) = held_out_srcc(&ds, Target::Overall, LayerChoice::Auto, &tc);
            let linear_cfg = TrainConfig { head: HeadKind::Linear, ..tc.clone() };
            let (_, linear) = held_out_srcc(&ds, Target::Overall, LayerChoice::Fixed(layer), &linear_cfg);
            mlp >= linear
        })
        .count();
    Check::all(vec![
        Check::new(layer_wins >= 80, format!("(a) selected >= final layer in {layer_wins}/100")),
        Check::new(mlp_wins >= 80, format!("(b) MLP >= linear head in {mlp_wins}/100 (nonlinear variant)")),
    ])
}

fn small_backbone() -> BackboneConfig {
    BackboneConfig { image_size: 16, patch: 8, d_vision: 16, d_model: 32, heads: 2, encoder_depth: 1, depth: 3, ..BackboneConfig::default() }
}

fn noise_sample(seed: u64) -> EditSample {
    let mut r = common::rng(seed);
    let mut img = || Image::new(16, 16, (0..16 * 16 * 3).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    EditSample { source: img(), edited: img(), instruction: format!("edit {seed}") }
}

fn adapter_contracts() -> Check {
    let backbone = Backbone::new(small_backbone()).unwrap();
    let set = AdapterSet::attach(&backbone.adaptable_projections(), AdapterConfig::default()).unwrap();
    let zero_init_exact = (0..3).all(|seed| {
        let s = noise_sample(seed);
        let (a, b) = (backbone.forward_all_layers(&s, None).unwrap(), backbone.forward_all_layers(&s, Some(&set)).unwrap());
        (1..=a.num_layers()).all(|l| a.layer(l).data() == b.layer(l).data())
    });

    let bits = |b: &Backbone| -> Vec<u32> { b.params().iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    let before = bits(&backbone);
    let data: Vec<LabeledSample> =
        (0..40).map(|i| LabeledSample { id: format!("s{i}"), sample: noise_sample(100 + i), target: (i % 5) as f64 }).collect();
    let cfg = FinetuneConfig { train: TrainConfig { epochs: 2, ..TrainConfig::default() }, ..FinetuneConfig::default() };
    let (model, report) = finetune_end_to_end(&backbone, &data[..32], &data[32..], 2, Target::Overall, &cfg).unwrap();
    let frozen = bits(&backbone) == before;
    let trained = model.adapters.as_ref().is_some_and(|a| {
        a.triplets().any(|t| a.params.get(&t.lambda_name()).unwrap().data().iter().any(|&v| v != 0.0))
    });

    let grad_err = (0..4).map(common::adapter::adapter_gradient_error).fold(0.0, f64::max);

    let schedule = BudgetSchedule { start_step: 20, end_step: 120, target_rank: 4, prune_interval: 10 };
    let mut pruned = AdapterSet::attach(
        &backbone.adaptable_projections(),
        AdapterConfig { rank: 8, budget: Some(schedule), ..AdapterConfig::default() },
    )
    .unwrap();
    common::adapter::randomize_lambdas(&mut pruned, 5);
    let names: Vec<String> = pruned.params.names().map(str::to_string).collect();
    let mut r = common::rng(6);
    let mut opt = OptimizerState::default();
    for step in 0..150 {
        for n in &names {
            let shape = pruned.params.get(n).unwrap().shape().to_vec();
            pruned.params.set_grad(n, Tensor::randn(&shape, 1.0, &mut r)).unwrap();
        }
        pruned.update_importance_and_prune(step, &mut opt).unwrap();
    }
    let schedule_rank = pruned.average_active_rank();
    let finetune_rank = report.epochs.last().and_then(|e| e.active_rank);

    Check::all(vec![
        Check::new(zero_init_exact, "zero-init forward bit-identical"),
        Check::new(frozen && trained, format!("backbone bits unchanged after finetuning: {frozen}, adapters trained: {trained}")),
        Check::new(grad_err < 1e-4, format!("adapter gradient max rel error {grad_err:.1e}")),
        Check::new(
            schedule_rank == 4.0 && finetune_rank == Some(8.0),
            format!("average rank after budget: {schedule_rank} (target 4), finetune {finetune_rank:?} (target 8)"),
        ),
    ])
}

fn numerics() -> Check {
    let errors = common::opgrad::op_gradient_errors();
    let (worst_op, worst) = errors.iter().fold(("", 0.0f64), |acc, &(n, e)| if e > acc.1 { (n, e) } else { acc });

    // Moments are f64 and must match to 1e-10. Parameters are stored as
    // f32, so the updated value must equal the f64 closed form rounded to f32.
    let cfg = AdamWConfig::default();
    let one_step = |theta: f32, g: f32, lr: f64| {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::scalar(theta), true);
        store.set_grad("p", Tensor::scalar(g)).unwrap();
        let mut opt = OptimizerState::new(cfg);
        adamw_step(&mut store, &mut opt, lr).unwrap();
        let (t, g) = (theta as f64, g as f64);
        let (m, v) = ((1.0 - cfg.beta1) * g, (1.0 - cfg.beta2) * g * g);
        let (m_hat, v_hat) = (m / (1.0 - cfg.beta1), v / (1.0 - cfg.beta2));
        let expected = t - lr * cfg.weight_decay * t - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        let moments = opt.moments("p").unwrap();
        let moment_err = (moments.first[0] - m).abs().max((moments.second[0] - v).abs());
        (store.get("p").unwrap().item(), expected, moment_err)
    };
    let mut moment_err = 0.0f64;
    let mut rounded_exact = true;
    for (theta, g, lr) in [(0.3f32, -0.7f32, 0.01), (-1.5, 2.0, 1e-3), (4.0, 1e-3, 0.1), (0.0, 1.0, 1e-3)] {
        let (got, expected, err) = one_step(theta, g, lr);
        moment_err = moment_err.max(err);
        rounded_exact &= got == expected as f32;
    }
    let (got, expected, _) = one_step(0.0, 1.0, 1e-3);
    let zero_start_err = (got as f64 - expected).abs();
    Check::all(vec![
        Check::new(worst < 1e-4 && errors.len() >= 20, format!("{} ops, worst {worst_op} {worst:.1e}", errors.len())),
        Check::new(
            moment_err <= 1e-10 && rounded_exact && zero_start_err <= 1e-10,
            format!(
                "AdamW moments err {moment_err:.1e}, parameters equal rounded closed form: {rounded_exact}, theta=0 step err {zero_start_err:.1e}"
            ),
        ),
    ])
}

fn baselines() -> Check {
    let mut r = common::rng(9);
    let x = Image::new(24, 24, (0..24 * 24 * 3).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap();
    let self_ssim = ssim(&x, &x, &SsimConfig::default()).unwrap();
    let (zeros, ones) = (Image::filled(4, 4, 0.0).unwrap(), Image::filled(4, 4, 1.0).unwrap());
    let closed = mse_image(&zeros, &ones).unwrap() == 1.0
        && psnr(&zeros, &zeros, 1.0).unwrap() == Psnr::Identical
        && psnr(&zeros, &ones, 1.0).unwrap() == Psnr::Db(0.0)
        && (psnr_from_mse(0.01, 1.0).db().unwrap() - 20.0).abs() < 1e-12;

    let mut worst = f64::INFINITY;
    for seed in 0..3 {
        let cfg = SynthConfig { n_samples: 200, seed, ..SynthConfig::default() };
        let bench = build_benchmark(&cfg).unwrap();
        let pairs: Vec<_> = generate_images(&cfg, &bench.data.latent)
            .unwrap()
            .into_iter()
            .map(|(id, s)| (id, s.source, s.edited))
            .collect();
        let mos: BTreeMap<String, MosLabels> = bench.mos.table.samples.iter().map(|(k, v)| (k.clone(), MosLabels::from(v))).collect();
        let report = baseline_report(&pairs, &mos, &SsimConfig::default()).unwrap();
        let s = report.metrics["mse"].get(Target::Preservation).unwrap().srcc.unwrap();
        worst = worst.min(s.abs());
    }
    Check::all(vec![
        Check::new(self_ssim == 1.0, format!("ssim(x, x) = {self_ssim}")),
        Check::new(closed, "MSE/PSNR closed forms"),
        Check::new(worst >= 0.9, format!("min |SRCC(MSE, MOS_p)| = {worst:.4} over 3 seeds")),
    ])
}

fn run_cli(args: &[&str]) -> bool {
    let mut argv = vec!["editprobe"];
    argv.extend_from_slice(args);
    editprobe::cli::run(argv) == 0
}

/// synth -> mos -> layers -> train -> eval; returns every written file.
fn chain(dir: &Path) -> Option<Vec<(String, Vec<u8>)>> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let data = ["--dump", &p("hidden.ephs"), "--manifest", &p("manifest.json"), "--mos", &p("mos.json")].map(String::from);
    let data: Vec<&str> = data.iter().map(String::as_str).collect();
    let ok = run_cli(&["synth", "--out", &p(""), "--seed", "7"])
        && run_cli(&["mos", "--ratings", &p("ratings.csv"), "--out", &p("mos.json")])
        && run_cli(&[&["layers"], data.as_slice(), &["--out", &p("layers.json")]].concat())
        && run_cli(&[&["train"], data.as_slice(), &["--dimension", "all", "--out", &p("models")]].concat());
    if !ok {
        return None;
    }
    let models: Vec<String> = Target::ALL.iter().map(|t| p(&format!("models/probe-{}.eppm", t.as_str()))).collect();
    let mut eval = vec!["eval"];
    for m in &models {
        eval.extend(["--model", m]);
    }
    eval.extend_from_slice(&data);
    let report = p("eval.json");
    eval.extend(["--out", &report]);
    if !run_cli(&eval) {
        return None;
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).ok()? {
            let path = e.ok()?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).ok()?.to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).ok()?));
            }
        }
    }
    files.sort();
    Some(files)
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    match (chain(a.path()), chain(b.path())) {
        (Some(x), Some(y)) => {
            let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p != q).map(|(p, _)| p.0.as_str()).collect();
            let same = x.len() == y.len() && differing.is_empty();
            let report: serde_json::Value = x
                .iter()
                .find(|(n, _)| n == "eval.json")
                .map(|(_, bytes)| serde_json::from_slice(bytes).unwrap())
                .unwrap_or_default();
            let cells = report["report"]["dimensions"]
                .as_object()
                .map_or(0, |d| d.values().flat_map(|c| ["srcc", "plcc", "krcc"].map(|k| c[k].is_f64())).filter(|&v| v).count());
            Check::all(vec![
                Check::new(same, format!("{} files byte-identical across two runs, differing: {differing:?}", x.len())),
                Check::new(cells == 12, format!("{cells}/12 correlation cells populated")),
            ])
        }
        _ => Check::new(false, "chain failed"),
    }
}

fn main() {
    std::env::remove_var(editprobe::io::repro::SEED_ENV);
    let criteria: [(&str, fn() -> Check); 9] = [
        ("MOS oracle equivalence", mos_oracle),
        ("Correlation oracle equivalence", correlation_oracle),
        ("Layer selection", layer_selection),
        ("Probe quality", probe_quality),
        ("Ablation directionality", ablations),
        ("Adapter contracts", adapter_contracts),
        ("Numerics", numerics),
        ("Baselines", baselines),
        ("Determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let check = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Check::new(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !check.pass {
            failed += 1;
        }
        println!(
            "{} {name} ({:.1} s): {}",
            if check.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            check.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
