//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion, and exits non-zero if any failed.
//!
//! Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 9`. Set `SPARSEPRIOR_BLESS=1` to
//! rewrite the preprocessing golden files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Discrete, Hypergeometric};
use statrs::function::beta::beta_reg;

use sparseprior_core::countmodel::{nb_log_pmf, zinb_log_likelihood, zinb_log_pmf, ZinbParams};
use sparseprior_core::evalcluster::{ami, homogeneity_completeness, mutual_info, nmi, Contingency};
use sparseprior_core::model::{LibraryPrior, ModelConfig, Part, PriorKind, ScraeModel};
use sparseprior_core::ndgrad::{DiffArray, Matrix};
use sparseprior_core::neuralnet::{AdamConfig, AdamState, GradMap, Parameters};
use sparseprior_core::trainer::{
    ae_objective, critic_objective, enc_objective, gen_objective, Batch, Phase, RunConfig, Trainer,
};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(out: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    let t = format!("{:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64());
    match out {
        Ok(d) if elapsed <= budget => Ok(format!("{d}; {t}")),
        Ok(d) => Err(format!("{d}; over time: {t}")),
        Err(d) => Err(format!("{d}; {t}")),
    }
}

// ---------------------------------------------------------------- 2

fn random_widths(rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=16)).collect()
}

/// Norm-wise relative error between the analytic gradient and central
/// differences of `f`, over every parameter named in `analytic`.
fn fd_error(model: &ScraeModel, analytic: &GradMap, f: &dyn Fn(&ScraeModel) -> f64) -> f64 {
    let h = 1e-6;
    let params: HashMap<String, Matrix> = model.parameters().into_iter().collect();
    let (mut diff, mut norm) = (0.0, 0.0);
    for (name, g) in analytic {
        let p = &params[name];
        for i in 0..p.len() {
            let eval = |d: f64| {
                let mut m = model.clone();
                let mut v = p.to_vec();
                v[i] += d;
                m.set_parameter(name, Matrix::new(p.shape(), v).unwrap()).unwrap();
                f(&m)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            diff += (g.data()[i] - num).powi(2);
            norm += num * num;
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-6)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2002);
    let mut worst = [0.0f64; 4];
    for net in 0..50 {
        let genes = rng.random_range(3..=8);
        let cells = rng.random_range(3..=6);
        let prior = if net % 5 == 4 { PriorKind::Identity } else { PriorKind::Learned };
        let config = ModelConfig {
            n_z: rng.random_range(1..=3),
            encoder_hidden: random_widths(&mut rng),
            decoder_hidden: random_widths(&mut rng),
            generator_hidden: random_widths(&mut rng),
            critic_hidden: random_widths(&mut rng),
            prior,
        };
        let library = LibraryPrior {
            mu_g: rng.random_range(1.0..3.0),
            sigma_g: rng.random_range(0.3..1.0),
        };
        let model = ScraeModel::init(genes, &config, library, &mut rng).unwrap();
        let counts = Matrix::from_fn([cells, genes], |_, _| {
            if rng.random::<f64>() < 0.4 {
                0.0
            } else {
                rng.random_range(1..12) as f64
            }
        });
        // Preprocessing drops cells with no counts. An all-zero row would also put
        // zero-initialised biases exactly on a ReLU kink.
        let counts = Matrix::from_fn([cells, genes], |r, c| {
            let empty = counts.row_slice(r).iter().all(|&v| v == 0.0);
            if empty && c == r % genes { 1.0 } else { counts.get(r, c) }
        });
        let batch = Batch::new(counts.map(f64::ln_1p), counts).unwrap();
        let seed = rng.random::<u64>();
        let n_z = config.n_z;
        let z = Matrix::from_fn([cells, n_z], |_, _| rng.sample(StandardNormal));
        let z_hat = Matrix::from_fn([cells, n_z], |_, _| rng.sample::<f64, _>(StandardNormal) + 1.0);
        let noise = Matrix::from_fn([cells, n_z], |_, _| rng.sample(StandardNormal));

        let ae = |m: &ScraeModel| ae_objective(m, &batch, &mut ChaCha8Rng::seed_from_u64(seed), 1.0).unwrap();
        let critic = |m: &ScraeModel| critic_objective(m, &z, &z_hat, &mut ChaCha8Rng::seed_from_u64(seed), 10.0).unwrap();
        let errors = [
            fd_error(&model, &ae(&model).1, &|m| ae(m).0),
            fd_error(&model, &critic(&model).1, &|m| critic(m).0.loss.item()),
            if model.generator.is_some() {
                fd_error(&model, &gen_objective(&model, &noise).unwrap().1, &|m| gen_objective(m, &noise).unwrap().0)
            } else {
                0.0
            },
            fd_error(&model, &enc_objective(&model, &batch.input).unwrap().1, &|m| {
                enc_objective(m, &batch.input).unwrap().0
            }),
        ];
        if std::env::var_os("DEBUG_FD").is_some() && errors.iter().any(|&e| e > 1e-4) {
            eprintln!("net {net}: {config:?} genes {genes} cells {cells}: {errors:?}");
        }
        for (w, e) in worst.iter_mut().zip(errors) {
            *w = w.max(e);
        }
    }
    let detail = format!(
        "worst relative error over 50 networks: L_AE {:.1e}, L_Critic {:.1e}, L_Gen {:.1e}, L_Enc {:.1e}",
        worst[0], worst[1], worst[2], worst[3]
    );
    check(worst.iter().all(|&e| e < 1e-4), detail)
}

// ---------------------------------------------------------------- 3

/// Mixture pmf from the NB product recurrence, without gamma functions.
fn mixture_pmf(x: u64, mu: f64, alpha: f64, logit: f64) -> f64 {
    let theta = 1.0 / alpha;
    let q = mu / (theta + mu);
    let mut p = (theta / (theta + mu)).powf(theta);
    for k in 0..x {
        p *= (k as f64 + theta) / (k as f64 + 1.0) * q;
    }
    let pi = 1.0 / (1.0 + (-logit).exp());
    if x == 0 {
        pi + (1.0 - pi) * p
    } else {
        (1.0 - pi) * p
    }
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    let mut points = 0;
    for &mu in &[0.1, 1.0, 10.0] {
        for &alpha in &[0.1, 1.0, 5.0] {
            for &logit in &[-3.0, 0.0, 3.0] {
                for x in 0..20u64 {
                    let want = mixture_pmf(x, mu, alpha, logit).ln();
                    let scalar = zinb_log_pmf(x, mu, alpha, logit).unwrap();
                    let c = |v: f64| DiffArray::constant(Matrix::scalar(v));
                    let params = ZinbParams::new(&c(mu), &c(alpha), &c(logit)).unwrap();
                    let array = zinb_log_likelihood(&Matrix::scalar(x as f64), &params).unwrap().item();
                    worst = worst.max((scalar - want).abs()).max((array - want).abs());
                    points += 1;
                }
            }
        }
    }
    let mut norm_err = 0.0f64;
    for &mu in &[0.1, 1.0, 10.0] {
        for &alpha in &[0.1, 0.5, 2.0] {
            let total: f64 = (0..=500).map(|x| nb_log_pmf(x, mu, alpha).unwrap().exp()).sum();
            norm_err = norm_err.max((total - 1.0).abs());
        }
    }
    // At μ = 10, α = 5 the mass beyond 500 is about 1.6e-6, so the truncated
    // sum must fall short of 1 by exactly that tail: P(X > 500) = I_q(501, θ).
    let (mu, alpha) = (10.0, 5.0);
    let theta = 1.0 / alpha;
    let tail = beta_reg(501.0, theta, mu / (theta + mu));
    let total: f64 = (0..=500).map(|x| nb_log_pmf(x, mu, alpha).unwrap().exp()).sum();
    let tail_err = (1.0 - total - tail).abs();
    let detail = format!(
        "{points} grid points, max |Δ log pmf| {worst:.1e}; 9 pairs normalize within {norm_err:.1e}; heavy-tail pair deficit {:.3e} vs tail {tail:.3e}",
        1.0 - total
    );
    check(points == 540 && worst < 1e-9 && norm_err < 1e-6 && tail_err < 1e-9, detail)
}

// ---------------------------------------------------------------- 4

/// Direct-from-definition scores over hash-map contingency counts.
struct Brute {
    nmi: f64,
    ami: f64,
    h: f64,
    c: f64,
    mi: f64,
    emi: f64,
    mean_h: f64,
}

fn brute(t: &[usize], p: &[usize]) -> Brute {
    let n = t.len() as f64;
    let mut joint: HashMap<(usize, usize), u64> = HashMap::new();
    let mut a: HashMap<usize, u64> = HashMap::new();
    let mut b: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in t.iter().zip(p) {
        *joint.entry((x, y)).or_default() += 1;
        *a.entry(x).or_default() += 1;
        *b.entry(y).or_default() += 1;
    }
    let ent = |m: &mut dyn Iterator<Item = u64>| -> f64 {
        m.map(|c| {
            let q = c as f64 / n;
            -q * q.ln()
        })
        .sum()
    };
    let ht = ent(&mut a.values().copied());
    let hp = ent(&mut b.values().copied());
    let hj = ent(&mut joint.values().copied());
    let mi = ht + hp - hj;
    // H(T|P) = −Σ n_tp/N ln(n_tp / n_p)
    let h_t_given_p: f64 = joint.iter().map(|(&(_, y), &c)| -(c as f64 / n) * (c as f64 / b[&y] as f64).ln()).sum();
    let h_p_given_t: f64 = joint.iter().map(|(&(x, _), &c)| -(c as f64 / n) * (c as f64 / a[&x] as f64).ln()).sum();
    let h = if ht == 0.0 { 1.0 } else { 1.0 - h_t_given_p / ht };
    let c = if hp == 0.0 { 1.0 } else { 1.0 - h_p_given_t / hp };
    let total = t.len() as u64;
    let mut emi = 0.0;
    for &ai in a.values() {
        for &bj in b.values() {
            let dist = Hypergeometric::new(total, ai, bj).unwrap();
            for nij in (ai + bj).saturating_sub(total).max(1)..=ai.min(bj) {
                let x = nij as f64;
                emi += dist.pmf(nij) * x / n * (n * x / (ai as f64 * bj as f64)).ln();
            }
        }
    }
    let degenerate = |value: f64| match (ht == 0.0, hp == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => value,
    };
    let mean_h = 0.5 * (ht + hp);
    Brute {
        nmi: degenerate(mi / (ht * hp).sqrt()),
        ami: degenerate(if (mean_h - emi).abs() < 1e-15 { 1.0 } else { (mi - emi) / (mean_h - emi) }),
        h,
        c,
        mi,
        emi,
        mean_h,
    }
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4004);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(2..=120);
        let (kt, kp) = (rng.random_range(1..=6), rng.random_range(1..=7));
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt) * 3 + 1).collect();
        let p: Vec<usize> = if case % 10 == 0 {
            t.clone()
        } else {
            (0..n).map(|_| rng.random_range(0..kp) * 5).collect()
        };
        let o = brute(&t, &p);
        let (h, c) = homogeneity_completeness(&t, &p).unwrap();
        for (got, want) in [(nmi(&t, &p).unwrap(), o.nmi), (ami(&t, &p).unwrap(), o.ami), (h, o.h), (c, o.c)] {
            worst = worst.max((got - want).abs());
        }
    }
    let mut mc = Vec::new();
    let mut mc_ok = true;
    for (case, &(n, kt, kp)) in [(40, 2, 3), (60, 3, 4), (80, 4, 4), (100, 5, 3), (50, 2, 6)].iter().enumerate() {
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
        // Partly informative predictions so MI is well above its null mean.
        let p: Vec<usize> = t.iter().map(|&x| if rng.random::<f64>() < 0.5 { x % kp } else { rng.random_range(0..kp) }).collect();
        let exact = ami(&t, &p).unwrap();
        let base = brute(&t, &p);
        let mut shuffled = p.clone();
        let draws = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            shuffled.shuffle(&mut rng);
            let v = mutual_info(&Contingency::new(&t, &shuffled).unwrap());
            sum += v;
            sq += v * v;
        }
        let mean = sum / draws as f64;
        let se_e = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let estimate = (base.mi - mean) / (base.mean_h - mean);
        // Delta method for the AMI estimate as a function of E[MI].
        let se = (base.mi - base.mean_h).abs() / (base.mean_h - mean).powi(2) * se_e;
        let ok = (exact - estimate).abs() <= 3.0 * se && (base.emi - mean).abs() <= 3.0 * se_e;
        mc_ok &= ok;
        mc.push(format!("case {case}: {:.2} se", (exact - estimate).abs() / se));
    }
    let detail = format!("100 pairs, max deviation {worst:.1e}; permutation check [{}]", mc.join(", "));
    check(worst < 1e-12 && mc_ok, detail)
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let config = ModelConfig {
        prior: PriorKind::Identity,
        ..ModelConfig::new(1)
    };
    let library = LibraryPrior { mu_g: 1.0, sigma_g: 1.0 };
    let mut rng = ChaCha8Rng::seed_from_u64(5005);
    let mut model = ScraeModel::init(2, &config, library, &mut rng).unwrap();
    let run = RunConfig::default();
    let beta = run.beta;
    // Ten times the training default: a fixed target lets the critic converge rather than track a moving prior.
    let mut opt = AdamState::new(AdamConfig::new(1e-3, 0.0, 0.9));
    let batch = 256;
    let steps = 3000;
    let mut penalties = Vec::new();
    for _ in 0..steps {
        let z = Matrix::from_fn([batch, 1], |_, _| rng.sample(StandardNormal));
        let z_hat = Matrix::from_fn([batch, 1], |_, _| rng.sample::<f64, _>(StandardNormal) + 2.0);
        let (out, g) = critic_objective(&model, &z, &z_hat, &mut rng, beta).unwrap();
        penalties.push(out.penalty);
        opt.step(&mut model.view(&[Part::Critic]), &g).unwrap();
    }
    let n = 20_000;
    let z = Matrix::from_fn([n, 1], |_, _| rng.sample(StandardNormal));
    let z_hat = Matrix::from_fn([n, 1], |_, _| rng.sample::<f64, _>(StandardNormal) + 2.0);
    let frozen = model.frozen();
    let score = |m: Matrix| frozen.critic_score(&DiffArray::constant(m)).unwrap().value().data().iter().sum::<f64>() / n as f64;
    let w = score(z) - score(z_hat);
    let tail = &penalties[steps - 100..];
    let penalty = tail.iter().sum::<f64>() / tail.len() as f64;
    let detail = format!("W estimate {w:.3} after {steps} critic steps; mean penalty over last 100 steps {penalty:.3} (limit {})", 5.0 * beta);
    check((1.5..=2.5).contains(&w) && penalty <= 5.0 * beta, detail)
}

// ---------------------------------------------------------------- 8

fn checksum(model: &ScraeModel, prefix: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (name, m) in model.parameters() {
        if name.starts_with(prefix) {
            for v in m.data() {
                h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
            }
        }
    }
    h
}

fn criterion_8() -> Outcome {
    let mut cfg = RunConfig {
        steps: 100,
        batch_size: 16,
        seed: 8,
        ..RunConfig::default()
    };
    cfg.model = ModelConfig {
        n_z: 2,
        encoder_hidden: vec![12],
        decoder_hidden: vec![12],
        generator_hidden: vec![8],
        critic_hidden: vec![8],
        prior: PriorKind::Learned,
    };
    let genes = 10;
    let lib = LibraryPrior { mu_g: 3.0, sigma_g: 0.5 };
    let model = ScraeModel::init(genes, &cfg.model, lib, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let ratio = cfg.disc_training_ratio;
    let mut trainer = Trainer::new(model, cfg).unwrap();
    let counts = Matrix::from_fn([40, genes], |r, c| ((r * 7 + c * 3) % 11) as f64 * ((r + c) % 3).min(1) as f64);
    let data = Batch::new(counts.map(f64::ln_1p), counts).unwrap();
    let parts = ["encoder.", "decoder.", "generator.", "critic."];
    let sums = |m: &ScraeModel| parts.map(|p| checksum(m, p));
    let mut violations = Vec::new();
    let mut changes = [0usize; 4];
    for i in 1..=100u64 {
        let mut before = sums(&trainer.model);
        let mut phases = Vec::new();
        trainer
            .step_with_observer(&data, |phase, m| {
                let after = sums(m);
                let changed = [0, 1, 2, 3].map(|k| after[k] != before[k]);
                let expected = match phase {
                    Phase::Ae => [true, true, false, false],
                    Phase::Gen => [false, false, true, false],
                    Phase::Enc => [true, false, false, false],
                    Phase::Critic => [false, false, false, true],
                };
                if changed != expected {
                    violations.push(format!("step {i} {phase:?}: changed {changed:?}"));
                }
                for k in 0..4 {
                    changes[k] += usize::from(changed[k]);
                }
                phases.push(phase);
                before = after;
            })
            .unwrap();
        let expected = if i % ratio == 0 {
            vec![Phase::Ae, Phase::Gen, Phase::Enc]
        } else {
            vec![Phase::Ae, Phase::Critic]
        };
        if phases != expected {
            violations.push(format!("step {i}: phases {phases:?}"));
        }
    }
    let detail = format!(
        "updates seen: encoder {}, decoder {}, generator {}, critic {}; {} violations{}",
        changes[0],
        changes[1],
        changes[2],
        changes[3],
        violations.len(),
        violations.first().map(|v| format!(" (first: {v})")).unwrap_or_default()
    );
    check(violations.is_empty() && changes == [120, 100, 20, 80], detail)
}

// ---------------------------------------------------------------- CLI helpers

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparseprior"))
}

fn sp(args: &[&str]) -> Result<(), String> {
    let o = bin().args(args).output().map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr).trim()))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

// ---------------------------------------------------------------- 9

const GOLDEN_FILES: [&str; 5] = ["train_input.csv", "train_counts.csv", "test_input.csv", "test_counts.csv", "report.json"];

fn read_csv(path: &Path) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let cols: Vec<String> = lines.next().unwrap().split(',').skip(1).map(String::from).collect();
    let (mut ids, mut rows) = (Vec::new(), Vec::new());
    for l in lines {
        let mut f = l.split(',');
        ids.push(f.next().unwrap().to_string());
        rows.push(f.map(|v| v.parse().unwrap()).collect());
    }
    (ids, cols, rows)
}

/// Recomputes the toy's filter, exclusion, normalization and gene ranking
/// from the raw counts and the reported split.
fn toy_oracle(out: &Path) -> Result<(), String> {
    let (cells, genes, raw) = read_csv(&golden_dir().join("toy.csv"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let names = |v: &serde_json::Value| -> Vec<String> {
        v.as_array().unwrap().iter().map(|x| x.as_str().unwrap().to_string()).collect()
    };

    let keep: Vec<usize> = (0..genes.len()).filter(|&g| raw.iter().filter(|r| r[g] > 0.0).count() >= 10).collect();
    let removed: Vec<String> = (0..genes.len()).filter(|g| !keep.contains(g)).map(|g| genes[g].clone()).collect();
    if names(&report["filter"]["genes_removed"]) != removed || removed != ["rare"] {
        return Err(format!("removed genes {:?}", report["filter"]["genes_removed"]));
    }
    let train = names(&report["train_cells"]);
    let test = names(&report["test_cells"]);
    if (train.len(), test.len()) != (32, 8) {
        return Err(format!("split {}/{}", train.len(), test.len()));
    }
    let row = |id: &str| &raw[cells.iter().position(|c| c == id).unwrap()];
    let total = |r: &[f64]| keep.iter().map(|&g| r[g]).sum::<f64>();
    let excluded: Vec<usize> = keep
        .iter()
        .copied()
        .filter(|&g| train.iter().any(|c| row(c)[g] > 0.05 * total(row(c))))
        .collect();
    let ex_names: Vec<String> = excluded.iter().map(|&g| genes[g].clone()).collect();
    if names(&report["excluded_genes"]) != ex_names || !ex_names.contains(&"dominant".to_string()) {
        return Err(format!("excluded genes {:?}, expected {ex_names:?}", report["excluded_genes"]));
    }
    let retained = |r: &[f64]| keep.iter().filter(|g| !excluded.contains(g)).map(|&g| r[g]).sum::<f64>();
    let mut sums: Vec<f64> = train.iter().map(|c| retained(row(c))).collect();
    sums.sort_by(f64::total_cmp);
    let median = 0.5 * (sums[15] + sums[16]);
    let factor = |c: &str| retained(row(c)) / median;

    // Dispersion ranking on normalized training values.
    let k = 6;
    let stats: Vec<(f64, f64)> = keep
        .iter()
        .map(|&g| {
            let v: Vec<f64> = train.iter().map(|c| row(c)[g] / factor(c)).collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / m)
        })
        .collect();
    let loc: Vec<f64> = stats.iter().map(|s| s.0.ln_1p()).collect();
    let (lo, hi) = loc.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
    let n_bins = 3;
    let bin: Vec<usize> = loc.iter().map(|&x| (((x - lo) / ((hi - lo) / n_bins as f64)) as usize).min(n_bins - 1)).collect();
    let z: Vec<f64> = (0..keep.len())
        .map(|j| {
            let peers: Vec<f64> = (0..keep.len()).filter(|&i| bin[i] == bin[j]).map(|i| stats[i].1).collect();
            let m = peers.iter().sum::<f64>() / peers.len() as f64;
            let sd = if peers.len() > 1 {
                (peers.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (peers.len() - 1) as f64).sqrt()
            } else {
                0.0
            };
            if sd > 0.0 {
                (stats[j].1 - m) / sd
            } else {
                0.0
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..keep.len()).collect();
    order.sort_by(|&a, &b| z[b].total_cmp(&z[a]).then(genes[keep[a]].cmp(&genes[keep[b]])));
    let want: Vec<String> = order[..k].iter().map(|&j| genes[keep[j]].clone()).collect();
    let got: Vec<String> = report["selected_genes"].as_array().unwrap().iter().map(|g| g["gene"].as_str().unwrap().to_string()).collect();
    if got != want {
        return Err(format!("selected {got:?}, expected {want:?}"));
    }

    let (ids, cols, values) = read_csv(&out.join("train_input.csv"));
    if ids != train || cols != want {
        return Err("train_input rows or columns differ from the report".into());
    }
    let mut worst = 0.0f64;
    for (c, r) in ids.iter().zip(&values) {
        for (gname, v) in cols.iter().zip(r) {
            let g = genes.iter().position(|x| x == gname).unwrap();
            worst = worst.max((v - (row(c)[g] / factor(c)).ln_1p()).abs());
        }
    }
    if worst > 1e-12 {
        return Err(format!("log1p values off by {worst:.1e}"));
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let input = golden_dir().join("toy.csv");
    let cfg = golden_dir().join("toy_config.json");
    let runs = [tmp.path().join("a"), tmp.path().join("b")];
    for out in &runs {
        sp(&["preprocess", "--input", s(&input), "--config", s(&cfg), "--seed", "7", "--out", s(out)])?;
    }
    toy_oracle(&runs[0])?;
    let expected = golden_dir().join("expected");
    if std::env::var_os("SPARSEPRIOR_BLESS").is_some() {
        std::fs::create_dir_all(&expected).unwrap();
        for f in GOLDEN_FILES {
            std::fs::copy(runs[0].join(f), expected.join(f)).unwrap();
        }
    }
    let mut mismatched = Vec::new();
    for f in GOLDEN_FILES {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        if a != std::fs::read(runs[1].join(f)).unwrap() || Some(a) != std::fs::read(expected.join(f)).ok() {
            mismatched.push(f);
        }
    }
    check(
        mismatched.is_empty(),
        format!("oracle checks passed; {} golden files, mismatched: {mismatched:?}", GOLDEN_FILES.len()),
    )
}

// ---------------------------------------------------------------- 6, 7, 10

struct PipelineRun {
    nmi: f64,
    elapsed: Duration,
    dir: PathBuf,
}

const SYNTH_SPEC: &str = r#"{
  "clusters": 3,
  "cells_per_cluster": [667, 667, 666],
  "genes": 200,
  "markers_per_cluster": 30,
  "marker_fold": 10.0,
  "dropout_logit": -0.4054651081081644
}"#;

fn run_config(prior: &str) -> String {
    format!(
        r#"{{"lambda": 1.0, "beta": 10.0, "disc_training_ratio": 5, "steps": 10000, "report_every": 1,
  "model": {{"n_z": 2, "prior": "{prior}"}}}}"#
    )
}

/// synth → preprocess → train → embed (test split) → evaluate with k = 3.
fn pipeline(root: &Path, name: &str, prior: &str) -> Result<PipelineRun, String> {
    let start = Instant::now();
    let dir = root.join(name);
    std::fs::create_dir_all(&dir).unwrap();
    let spec = dir.join("spec.json");
    std::fs::write(&spec, SYNTH_SPEC).unwrap();
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, run_config(prior)).unwrap();
    let (syn, pp, tr, emb, ev) = (dir.join("synth"), dir.join("pp"), dir.join("train"), dir.join("embed"), dir.join("eval"));
    sp(&["synth", "--config", s(&spec), "--seed", "606", "--out", s(&syn)])?;
    sp(&["preprocess", "--input", s(&syn.join("counts.csv")), "--seed", "606", "--out", s(&pp)])?;
    sp(&["train", "--config", s(&cfg), "--data", s(&pp), "--seed", "606", "--out", s(&tr)])?;
    sp(&["embed", "--checkpoint", s(&tr.join("model.ckpt")), "--matrix", s(&pp.join("test_input.csv")), "--out", s(&emb)])?;
    sp(&[
        "evaluate", "--embeddings", s(&emb.join("embeddings.csv")), "--labels", s(&syn.join("labels.csv")), "--k", "3",
        "--seed", "606", "--out", s(&ev),
    ])?;
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    Ok(PipelineRun {
        nmi: metrics["nmi"].as_f64().unwrap(),
        elapsed: start.elapsed(),
        dir,
    })
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    matches!((std::fs::read(a), std::fs::read(b)), (Ok(x), Ok(y)) if x == y)
}

// ---------------------------------------------------------------- main

fn timed(budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let out = f();
    match budget {
        Some(b) => within_budget(out, start.elapsed(), b),
        None => out,
    }
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| only.is_empty() || only.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, out: Outcome| {
        let (tag, detail) = match &out {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
        results.push((n, name, out));
    };

    if wanted(1) {
        println!(
        "criterion  1 N/A  real-data benchmark averages: need the original corpora and long training; substituted by criteria 6, 7 and 10"
        );
    }
    if wanted(2) {
        report(2, "gradient correctness", timed(Some(Duration::from_secs(60)), criterion_2));
    }
    if wanted(3) {
        report(3, "likelihood oracle", timed(Some(Duration::from_secs(5)), criterion_3));
    }
    if wanted(4) {
        report(4, "metrics oracle", timed(Some(Duration::from_secs(120)), criterion_4));
    }
    if wanted(5) {
        report(5, "Wasserstein sanity", timed(Some(Duration::from_secs(120)), criterion_5));
    }
    if wanted(8) {
        report(8, "schedule conformance", timed(None, criterion_8));
    }
    if wanted(9) {
        report(9, "preprocessing golden files", timed(None, criterion_9));
    }

    if [6, 7, 10].into_iter().any(wanted) {
        pipeline_criteria(&wanted, &mut report);
    }

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed {:?}", results.len() - failed.len(), failed.len(), failed);
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

fn pipeline_criteria(wanted: &dyn Fn(u32) -> bool, report: &mut dyn FnMut(u32, &'static str, Outcome)) {
    let root = tempfile::tempdir().expect("temp dir");
    let first = pipeline(root.path(), "learned_a", "learned");
    let identity = if wanted(7) { Some(pipeline(root.path(), "identity", "identity")) } else { None };
    let second = if wanted(10) { Some(pipeline(root.path(), "learned_b", "learned")) } else { None };

    let c6 = match &first {
        Ok(r) => within_budget(
            check(r.nmi >= 0.80, format!("test-split NMI {:.4} (threshold 0.80)", r.nmi)),
            r.elapsed,
            Duration::from_secs(15 * 60),
        ),
        Err(e) => Err(e.clone()),
    };
    if wanted(6) {
        report(6, "end-to-end synthetic clustering", c6);
    }
    if let Some(identity) = identity {
        let c7 = match (&first, &identity) {
            (Ok(a), Ok(b)) => check(
                a.nmi >= b.nmi - 0.05,
                format!("learned prior NMI {:.4}, identity prior NMI {:.4}", a.nmi, b.nmi),
            ),
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        };
        report(7, "ablation consistency", c7);
    }
    if let Some(second) = second {
        let c10 = match (&first, &second) {
            (Ok(a), Ok(b)) => {
                let files = ["train/losses.jsonl", "embed/embeddings.csv", "eval/metrics.json", "train/model.ckpt"];
                let differing: Vec<&str> =
                    files.iter().copied().filter(|f| !same_bytes(&a.dir.join(f), &b.dir.join(f))).collect();
                check(differing.is_empty(), format!("compared {files:?}; differing: {differing:?}"))
            }
            (Err(e), _) | (_, Err(e)) => Err(e.clone()),
        };
        report(10, "determinism", c10);
    }
}
