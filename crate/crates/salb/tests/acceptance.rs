//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::time::{Duration, Instant};

use salb::formats::{decode_checkpoint, decode_dataset, encode_checkpoint, encode_dataset, sha256_hex};
use salb::results::results_csv;
use salb::Error as IoError;
use salb_core::distributions::{disentangle_negatives, label_smooth_targets, mix_targets, one_hot_targets, RowDistributions};
use salb_core::gradcheck::{check_gradients, LossSelector, DEFAULT_TOLERANCE};
use salb_core::harness::{ablation_points, ablation_suite, gamma_points, gamma_sweep, logit_profile, run_points, Direction, PointOutcome};
use salb_core::numkit::{gaussian_matrix, stable_row_softmax};
use salb_core::objectives::{
    clip_loss, mixed_guidance_loss, relation_enhanced_soft_loss, softclip_total, DistSet, Divergence, LossConfig,
};
use salb_core::synthgen::{generate, SynthDataset, SynthSpec};
use salb_core::trainer::{forward_batch, resume, TrainConfig, TrainState};
use salb_core::{EmbeddingBatch, Seed, Temperature, Temperatures};

const GRAD_TOL: f64 = DEFAULT_TOLERANCE;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const REDUCTION_TOL: f64 = 1e-9;
const MIX_TOL: f64 = 1e-15;
const DISENTANGLE_TOL: f64 = 1e-9;
/// Also bounds how far below zero KL may dip: flooring predictions under
/// 1e-12 inside the log adds up to ~1e-12 of mass on peaked rows.
const KL_ZERO_TOL: f64 = 1e-9;
const SYM_TOL: f64 = 1e-12;
const JS_SLACK: f64 = 1e-12;
const FLOOR: f64 = 1e-12;
/// Half the SoftCLIP-over-CLIP spearman gap of a calibration run (0.120 at the
/// default settings, seeds 0..3), above the 0.02 seed-to-seed spread.
const SPEARMAN_MARGIN: f64 = 0.05;
const ABLATION_BUDGET: Duration = Duration::from_secs(600);
const LINEARITY_TOL: f64 = 1e-12;
const SEEDS: [Seed; 3] = [Seed(0), Seed(1), Seed(2)];

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit_batch(n: usize, d: usize, seed: Seed) -> EmbeddingBatch {
    EmbeddingBatch::normalize(&gaussian_matrix(n, d, seed)).expect("gaussian rows are nonzero")
}

fn random_rows(n: usize, scale: f64, seed: Seed) -> salb_core::RowStochastic {
    stable_row_softmax(&gaussian_matrix(n, n, seed).scaled(scale))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let (mut runs, mut failures) = (0, Vec::new());
    for selector in LossSelector::ALL {
        for stop in [true, false] {
            let cfg = LossConfig { stop_gradient_targets: stop, gamma: 0.5, ..LossConfig::default() };
            for n in [2, 4, 8] {
                for d in [4, 16] {
                    for seed in 0..10 {
                        runs += 1;
                        let r = check_gradients(selector, Seed(seed), n, d, &cfg, GRAD_TOL);
                        if !r.pass {
                            failures.push(format!("{} stop={stop} n={n} d={d} seed={seed}: {:?}", selector.name(), r.error));
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(failures.is_empty(), || format!("{} of {runs} failed, first {}", failures.len(), failures[0]))?;
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{runs} checks, tol {GRAD_TOL:e}, {:.1}s", elapsed.as_secs_f64()))
}

fn reduction_identity() -> Outcome {
    let cfg = LossConfig { beta: 0.0, divergence: Divergence::ForwardKl, lambda_re: 0.0, mu_clip: 0.0, ..LossConfig::default() };
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        let n = 2 + (k as usize % 15);
        let d = 4 + (k as usize % 13);
        let s = Seed(k).derive(5);
        let [v, t, r, a] = [0, 1, 2, 3].map(|i| unit_batch(n, d, s.derive(i)));
        let temps = Temperatures::shared(Temperature::from_tau(0.02 + 0.01 * (k % 10) as f64));
        let total = softclip_total(&v, &t, &r, &a, &temps, &cfg).map_err(err)?.total;
        let clip = clip_loss(&v, &t, &temps).map_err(err)?;
        worst = worst.max((total - clip).abs());
    }
    ensure(worst <= REDUCTION_TOL, || format!("max difference {worst:e}"))?;
    Ok(format!("100 batches, max |total - clip| = {worst:.1e}"))
}

fn closed_form_targets() -> Outcome {
    let alpha = 0.2;
    for n in 3..=64usize {
        let t = label_smooth_targets(n, alpha).map_err(err)?;
        let off = alpha / (n as f64 - 1.0);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 - alpha } else { off };
                ensure(t.row(i)[j] == want, || format!("n={n} ({i},{j}): {} vs {want}", t.row(i)[j]))?;
            }
        }
    }
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let n = 2 + k as usize % 20;
        let g = random_rows(n, 2.0, Seed(k));
        let y = one_hot_targets(n).map_err(err)?;
        let beta = k as f64 / 49.0;
        let m = mix_targets(&y, &g, beta).map_err(err)?;
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { (1.0 - beta) + beta * g.row(i)[j] } else { beta * g.row(i)[j] };
                worst = worst.max((m.row(i)[j] - want).abs());
            }
        }
    }
    ensure(worst <= MIX_TOL, || format!("mix_targets off by {worst:e}"))?;
    Ok(format!("label smoothing exact for n=3..64; mix max error {worst:.1e}"))
}

fn disentanglement() -> Outcome {
    let (mut rows, mut worst_sum, mut worst_ratio): (usize, f64, f64) = (0, 0.0, 0.0);
    for k in 0..100u64 {
        let n = 10;
        let p = random_rows(n, 1.0 + (k % 4) as f64, Seed(k).derive(9));
        let q = disentangle_negatives(&p).map_err(err)?;
        let qm = q.as_matrix();
        for i in 0..n {
            rows += 1;
            worst_sum = worst_sum.max((qm.row(i).iter().sum::<f64>() - 1.0).abs());
            for a in 0..n - 1 {
                for b in 0..n - 1 {
                    let (ja, jb) = (salb_core::NegDisentangled::original_index(i, a), salb_core::NegDisentangled::original_index(i, b));
                    let want = p.row(i)[ja] / p.row(i)[jb];
                    let got = qm.get(i, a) / qm.get(i, b);
                    worst_ratio = worst_ratio.max((got - want).abs() / want.max(1.0));
                }
            }
        }
    }
    ensure(worst_sum <= DISENTANGLE_TOL, || format!("row sum off by {worst_sum:e}"))?;
    ensure(worst_ratio <= DISENTANGLE_TOL, || format!("ratio off by {worst_ratio:e}"))?;
    let cfg = LossConfig::default();
    for k in 0..200u64 {
        let s = Seed(k).derive(11);
        let [v, t, r, a] = [0, 1, 2, 3].map(|i| unit_batch(2, 8, s.derive(i)));
        let temps = Temperatures::shared(Temperature::from_tau(0.01 + 0.005 * (k % 20) as f64));
        let dists = DistSet::build(&v, &t, &r, &a, &temps, cfg.supervision_form).map_err(err)?;
        let re = relation_enhanced_soft_loss(&dists, &cfg).map_err(err)?;
        ensure(re == 0.0, || format!("N=2 relation term {re:e} at seed {k}"))?;
    }
    Ok(format!("{rows} rows, sum err {worst_sum:.1e}, ratio err {worst_ratio:.1e}; 200 N=2 batches give 0"))
}

fn divergence_properties() -> Outcome {
    let kl = |a: &[f64], b: &[f64]| Divergence::ForwardKl.row(a, b, FLOOR);
    let sym = |a: &[f64], b: &[f64]| Divergence::SymmetricKl.row(a, b, FLOOR);
    let js = |a: &[f64], b: &[f64]| Divergence::Js.row(a, b, FLOOR);
    let (mut min_kl, mut max_self, mut max_asym, mut max_js) = (f64::INFINITY, 0.0f64, 0.0f64, 0.0f64);
    let mut min_kl_distinct = f64::INFINITY;
    for k in 0..1000u64 {
        let n = 2 + k as usize % 30;
        let scale = [0.5, 2.0, 8.0, 40.0][k as usize % 4];
        let p = random_rows(n, scale, Seed(k).derive(1));
        let q = random_rows(n, scale, Seed(k).derive(2));
        let (a, b) = (p.row(0), q.row(0));
        min_kl = min_kl.min(kl(a, b)).min(kl(b, a));
        max_self = max_self.max(kl(a, a).abs());
        if a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-3) {
            min_kl_distinct = min_kl_distinct.min(kl(a, b));
        }
        max_asym = max_asym.max((sym(a, b) - sym(b, a)).abs());
        max_js = max_js.max(js(a, b));
    }
    ensure(min_kl >= -KL_ZERO_TOL, || format!("negative KL {min_kl:e}"))?;
    ensure(max_self <= KL_ZERO_TOL, || format!("KL(p, p) = {max_self:e}"))?;
    ensure(min_kl_distinct > KL_ZERO_TOL, || format!("distinct pair with KL {min_kl_distinct:e}"))?;
    ensure(max_asym <= SYM_TOL, || format!("symmetric KL asymmetry {max_asym:e}"))?;
    ensure(max_js <= std::f64::consts::LN_2 + JS_SLACK, || format!("JS {max_js} above ln 2"))?;
    Ok(format!("1000 pairs: min KL {min_kl:.1e}, max KL(p,p) {max_self:.1e}, sym gap {max_asym:.1e}, max JS {max_js:.4}"))
}

struct Ablation {
    dataset: SynthDataset,
    hash: String,
    base: TrainConfig,
    outcomes: Vec<PointOutcome>,
    csv: Vec<u8>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn spearman_of(a: &Ablation, variant: &str) -> f64 {
    mean(a.outcomes.iter().filter(|o| o.row.variant == variant).map(|o| o.row.spearman))
}

fn run_ablation() -> Result<(Ablation, Duration), String> {
    let start = Instant::now();
    let dataset = generate(&SynthSpec::default()).map_err(err)?;
    let hash = sha256_hex(&encode_dataset(&dataset).map_err(err)?);
    let base = TrainConfig::default();
    let outcomes = run_points(&dataset, &ablation_points(&base, &SEEDS).map_err(err)?, &hash).map_err(err)?;
    let rows: Vec<_> = outcomes.iter().map(|o| o.row.clone()).collect();
    let csv = results_csv(&rows).map_err(err)?;
    Ok((Ablation { dataset, hash, base, outcomes, csv }, start.elapsed()))
}

fn ablation_ordering(a: &Ablation, elapsed: Duration) -> Outcome {
    let (soft, clip) = (spearman_of(a, "softclip"), spearman_of(a, "clip"));
    let seeds: Vec<u64> = a.outcomes.iter().map(|o| o.row.seed).collect();
    ensure(a.outcomes.len() == 15 && seeds.iter().all(|s| SEEDS.iter().any(|t| t.0 == *s)), || "wrong row set".into())?;
    ensure(soft - clip > SPEARMAN_MARGIN, || format!("softclip {soft:.4} vs clip {clip:.4}, margin {SPEARMAN_MARGIN}"))?;
    ensure(elapsed < ABLATION_BUDGET, || format!("took {elapsed:?}"))?;
    let others: Vec<String> = ["clip_label_smoothing", "clip_soft", "clip_soft_re"]
        .iter()
        .map(|v| format!("{v} {:.4}", spearman_of(a, v)))
        .collect();
    Ok(format!(
        "spearman softclip {soft:.4} vs clip {clip:.4} (gap {:.4} > {SPEARMAN_MARGIN}); {}; {:.0}s",
        soft - clip,
        others.join(", "),
        elapsed.as_secs_f64()
    ))
}

fn logit_direction(a: &Ablation) -> Outcome {
    let (_, eval) = a.base.split(a.dataset.len()).map_err(err)?;
    let eval: Vec<usize> = eval.collect();
    let mut sums = [[0.0; 2]; 2];
    for o in a.outcomes.iter().filter(|o| o.row.variant == "clip" || o.row.variant == "softclip") {
        // Reload through the checkpoint format so the profile uses what would be on disk.
        let state = decode_checkpoint(&encode_checkpoint(&o.state).map_err(err)?).map_err(err)?;
        let p = logit_profile(&state, &a.dataset, &eval, Direction::ImageToText).map_err(err)?;
        let k = usize::from(o.row.variant == "softclip");
        sums[k][0] += p.top1 / SEEDS.len() as f64;
        sums[k][1] += p.top11_50 / SEEDS.len() as f64;
    }
    let [[clip_top1, clip_tail], [soft_top1, soft_tail]] = sums;
    ensure(soft_top1 < clip_top1, || format!("top-1 softclip {soft_top1:.4} vs clip {clip_top1:.4}"))?;
    ensure(soft_tail > clip_tail, || format!("top 11-50 softclip {soft_tail:.4} vs clip {clip_tail:.4}"))?;
    Ok(format!("top-1 {soft_top1:.4} < {clip_top1:.4}; top 11-50 mass {soft_tail:.4} > {clip_tail:.4}"))
}

fn gamma_endpoints(a: &Ablation) -> Outcome {
    let gammas = [0.0, 0.5, 1.0];
    let points = gamma_points(&a.base, &gammas).map_err(err)?;
    let batch: Vec<usize> = (0..a.base.batch_size).collect();
    let mut worst: f64 = 0.0;
    for p in points.iter().filter(|p| p.variant == "mixed") {
        let state = TrainState::init(&a.dataset, &p.config).map_err(err)?;
        let [v, t, r, s] = forward_batch(&state, &a.dataset, &batch).map_err(err)?;
        let temps = state.temperatures();
        let at = |g: f64| mixed_guidance_loss(&v, &t, &r, &s, &temps, g, &p.config.loss).map_err(err);
        for g in gammas {
            worst = worst.max((at(g)? - (g * at(1.0)? + (1.0 - g) * at(0.0)?)).abs());
        }
    }
    ensure(worst <= LINEARITY_TOL, || format!("linearity gap {worst:e}"))?;
    let rows = gamma_sweep(&a.dataset, &a.base, &gammas, &a.hash).map_err(err)?;
    ensure(rows.len() == 6, || format!("{} rows", rows.len()))?;
    ensure(rows.iter().all(|r| r.final_loss.is_finite()), || "non-finite final loss".into())?;
    let losses: Vec<String> = rows.iter().map(|r| format!("{}@{}={:.3}", r.variant, r.gamma, r.final_loss)).collect();
    Ok(format!("linearity gap {worst:.1e}; final losses {}", losses.join(" ")))
}

fn determinism_and_resume(a: &Ablation) -> Outcome {
    let rows = ablation_suite(&a.dataset, &a.base, &SEEDS, &a.hash).map_err(err)?;
    ensure(results_csv(&rows).map_err(err)? == a.csv, || "repeated ablation CSV differs".into())?;

    let full = a.outcomes.iter().find(|o| o.row.variant == "softclip" && o.row.seed == 0).ok_or("missing run")?;
    let cfg = full.state.config.clone();
    let (half, _) = resume(TrainState::init(&a.dataset, &cfg).map_err(err)?, &a.dataset, 700).map_err(err)?;
    let restored = decode_checkpoint(&encode_checkpoint(&half).map_err(err)?).map_err(err)?;
    let (resumed, _) = resume(restored, &a.dataset, cfg.steps).map_err(err)?;
    let bits = |s: &TrainState| -> Vec<u64> {
        s.params.iter().chain(&s.moments.m).chain(&s.moments.v).map(|x| x.to_bits()).collect()
    };
    ensure(bits(&resumed) == bits(&full.state) && resumed.step() == full.state.step(), || {
        "resumed parameters differ from the uninterrupted run".into()
    })?;
    Ok(format!("15-row CSV identical on rerun ({} bytes); resume at step 700 of {} is bitwise exact", a.csv.len(), cfg.steps))
}

fn format_round_trips() -> Outcome {
    let spec = SynthSpec { n_samples: 120, d_roi: 40, ..SynthSpec::default() };
    let d = generate(&spec).map_err(err)?;
    let bytes = encode_dataset(&d).map_err(err)?;
    let back = decode_dataset(&bytes).map_err(err)?;
    ensure(encode_dataset(&back).map_err(err)? == bytes && back == d, || "dataset round trip differs".into())?;

    let cfg = TrainConfig { steps: 30, batch_size: 16, holdout: 20, ..TrainConfig::default() };
    let (state, _) = salb_core::trainer::train(&d, &cfg).map_err(err)?;
    let ckpt = encode_checkpoint(&state).map_err(err)?;
    let state_back = decode_checkpoint(&ckpt).map_err(err)?;
    ensure(encode_checkpoint(&state_back).map_err(err)? == ckpt && state_back == state, || "checkpoint round trip differs".into())?;

    let patch = |b: &[u8], from: &str, to: &str| -> Vec<u8> {
        let at = b.windows(from.len()).position(|w| w == from.as_bytes()).expect("pattern present");
        let mut out = b.to_vec();
        out[at..at + to.len()].copy_from_slice(to.as_bytes());
        out
    };
    let mut huge_len = bytes.clone();
    huge_len[..4].copy_from_slice(&u32::MAX.to_le_bytes());
    let corrupted: Vec<(&str, Vec<u8>, bool)> = vec![
        ("wrong magic", patch(&bytes, "\"SALB\"", "\"SALX\""), true),
        ("future version", patch(&bytes, "\"version\":1", "\"version\":2"), true),
        ("header length past end", huge_len, true),
        ("unparsable header", patch(&bytes, "{", "["), true),
        ("truncated data", bytes[..bytes.len() - 8].to_vec(), true),
        ("checkpoint as dataset", ckpt.clone(), true),
        ("dataset as checkpoint", bytes.clone(), false),
    ];
    for (name, b, as_dataset) in corrupted {
        let r = if as_dataset { decode_dataset(&b).map(|_| ()) } else { decode_checkpoint(&b).map(|_| ()) };
        match r {
            Err(IoError::Format { version, .. }) => {
                if name == "future version" {
                    ensure(version == Some(2), || format!("version not reported: {version:?}"))?;
                }
            }
            other => return Err(format!("{name}: expected FormatError, got {other:?}")),
        }
    }
    Ok(format!("dataset {} bytes and checkpoint {} bytes round-trip bitwise; 7 corruptions rejected", bytes.len(), ckpt.len()))
}

fn report(id: usize, name: &str, outcome: Outcome, failed: &mut usize) {
    match outcome {
        Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail}"),
        Err(detail) => {
            *failed += 1;
            println!("FAIL criterion {id:>2} {name}: {detail}");
        }
    }
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failed = 0;
    report(1, "gradient fidelity", gradient_fidelity(), &mut failed);
    report(2, "reduction identity", reduction_identity(), &mut failed);
    report(3, "closed-form targets", closed_form_targets(), &mut failed);
    report(4, "disentanglement", disentanglement(), &mut failed);
    report(5, "divergence properties", divergence_properties(), &mut failed);
    match run_ablation() {
        Ok((a, elapsed)) => {
            report(6, "ablation ordering", ablation_ordering(&a, elapsed), &mut failed);
            report(7, "logit-profile direction", logit_direction(&a), &mut failed);
            report(8, "gamma-sweep endpoints", gamma_endpoints(&a), &mut failed);
            report(9, "determinism and resume", determinism_and_resume(&a), &mut failed);
        }
        Err(e) => {
            for (id, name) in [(6, "ablation ordering"), (7, "logit-profile direction"), (8, "gamma-sweep endpoints"), (9, "determinism and resume")] {
                report(id, name, Err(format!("ablation run failed: {e}")), &mut failed);
            }
        }
    }
    report(10, "format round-trips", format_round_trips(), &mut failed);
    println!("acceptance: {} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
