//! Brute-force reference implementations and fixture helpers shared by the
//! integration tests. Everything here works on plain nested vectors and the
//! textbook formulas, with no shared code from the crate's loss module.

#![allow(dead_code)]

use std::path::PathBuf;

pub mod lexicon_oracle;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cmkt::objectives::{
    ans_loss, cmcl_total, hinge_loss, mlm_loss, nst_loss, tcl_loss, voken_loss, ContrastiveConfig, EmbeddingBatch,
    HardNegatives, Modality,
};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian3(rng: &mut impl Rng, n: usize, m: usize, d: usize) -> Array3<f64> {
    Array3::from_shape_fn((n, m, d), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Random probability rows.
pub fn distributions(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        for j in 0..cols {
            out[[i, j]] = w[j] / s;
        }
    }
    out
}

pub fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// `-log( exp(pos/τ) / Σ exp(all/τ) )` where `all` includes `pos`.
fn nce_term(pos: f64, all: &[f64], tau: f64) -> f64 {
    let denom: f64 = all.iter().map(|s| (s / tau).exp()).sum();
    -((pos / tau).exp() / denom).ln()
}

/// Image→text InfoNCE for item `i`, with extra negatives for that item.
fn v2l(v: &[Vec<f64>], l: &[Vec<f64>], extra: &[Vec<f64>], i: usize, tau: f64) -> f64 {
    let mut all: Vec<f64> = l.iter().map(|lj| cos(&v[i], lj)).collect();
    all.extend(extra.iter().map(|n| cos(&v[i], n)));
    nce_term(cos(&v[i], &l[i]), &all, tau)
}

fn l2v(v: &[Vec<f64>], l: &[Vec<f64>], i: usize, tau: f64) -> f64 {
    let all: Vec<f64> = v.iter().map(|vj| cos(&l[i], vj)).collect();
    nce_term(cos(&l[i], &v[i]), &all, tau)
}

pub fn oracle_cmcl(v: &Array2<f64>, l: &Array2<f64>, tau: f64) -> f64 {
    let (v, l) = (rows(v), rows(l));
    let n = v.len();
    (0..n).map(|i| v2l(&v, &l, &[], i, tau) + l2v(&v, &l, i, tau)).sum::<f64>() / n as f64
}

pub fn oracle_ans(v: &Array2<f64>, l: &Array2<f64>, neg: &Array3<f64>, valid: &[usize], tau: f64) -> f64 {
    let (vr, lr) = (rows(v), rows(l));
    let n = vr.len();
    let mut total = 0.0;
    for i in 0..n {
        let extra: Vec<Vec<f64>> = (0..valid[i]).map(|k| neg.slice(ndarray::s![i, k, ..]).to_vec()).collect();
        total += v2l(&vr, &lr, &extra, i, tau) + l2v(&vr, &lr, i, tau);
    }
    total / n as f64
}

pub fn oracle_tcl(h: &Array2<f64>, hp: &Array2<f64>, tau: f64) -> f64 {
    let (h, hp) = (rows(h), rows(hp));
    let n = h.len();
    (0..n)
        .map(|i| {
            let all: Vec<f64> = hp.iter().map(|p| cos(&h[i], p)).collect();
            nce_term(cos(&h[i], &hp[i]), &all, tau)
        })
        .sum::<f64>()
        / n as f64
}

pub fn oracle_hinge(v: &Array2<f64>, l: &Array2<f64>, nv: &Array2<f64>, nl: &Array2<f64>, alpha: f64) -> f64 {
    let (v, l, nv, nl) = (rows(v), rows(l), rows(nv), rows(nl));
    (0..v.len())
        .map(|i| {
            let pos = cos(&v[i], &l[i]);
            (alpha - pos + cos(&nv[i], &l[i])).max(0.0) + (alpha - pos + cos(&v[i], &nl[i])).max(0.0)
        })
        .sum()
}

pub fn oracle_mlm(p: &Array2<f64>, targets: &[usize]) -> f64 {
    let n = targets.len();
    targets.iter().enumerate().map(|(i, &t)| -p[[i, t]].ln()).sum::<f64>() / n as f64
}

pub fn oracle_voken(p: &Array2<f64>, targets: &[Option<usize>]) -> f64 {
    let kept: Vec<(usize, usize)> = targets.iter().enumerate().filter_map(|(i, t)| t.map(|t| (i, t))).collect();
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().map(|&(i, t)| -p[[i, t]].ln()).sum::<f64>() / kept.len() as f64
}

/// Squared MMD with kernel `(x̂ᵀŷ)²`, written as the three kernel means.
pub fn oracle_nst(t: &Array2<f64>, s: &Array2<f64>) -> f64 {
    let (t, s) = (rows(t), rows(s));
    let k = |a: &[f64], b: &[f64]| cos(a, b).powi(2);
    let mean = |xs: &[Vec<f64>], ys: &[Vec<f64>]| {
        let mut acc = 0.0;
        for x in xs {
            for y in ys {
                acc += k(x, y);
            }
        }
        acc / (xs.len() * ys.len()) as f64
    };
    mean(&t, &t) + mean(&s, &s) - 2.0 * mean(&t, &s)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|x| x * x).sum().sqrt();
    let scale = a.mapv(|x| x * x).sum().sqrt().max(b.mapv(|x| x * x).sum().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub fn batch(x: Array2<f64>, modality: Modality) -> EmbeddingBatch {
    EmbeddingBatch::sequential(x, modality).unwrap()
}

/// Worst relative deviation of one loss from its oracle over a case sweep.
#[derive(Debug)]
pub struct OracleReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn sweep(name: &'static str, cases: usize, seed: u64, mut case: impl FnMut(&mut ChaCha8Rng) -> (f64, f64)) -> OracleReport {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (got, want) = case(&mut r);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    OracleReport { name, cases, worst }
}

fn temperature(r: &mut ChaCha8Rng) -> f64 {
    [0.05, 0.1, 0.5, 1.0][r.random_range(0..4)]
}

/// Every loss against its brute-force oracle, `cases` fixed-seed cases each,
/// with N <= 8, M <= 4, d <= 16.
pub fn loss_oracle_suite(cases: usize) -> Vec<OracleReport> {
    vec![
        sweep("cmcl_total", cases, 1, |r| {
            let (n, d, tau) = (r.random_range(1..=8), r.random_range(1..=16), temperature(r));
            let (v, l) = (gaussian(r, n, d), gaussian(r, n, d));
            let cfg = ContrastiveConfig { temperature: tau, ..Default::default() };
            let got = cmcl_total(&batch(v.clone(), Modality::Image), &batch(l.clone(), Modality::Text), &cfg).unwrap();
            (got.total, oracle_cmcl(&v, &l, tau))
        }),
        sweep("tcl_loss", cases, 2, |r| {
            let (n, d, tau) = (r.random_range(1..=8), r.random_range(1..=16), temperature(r));
            let (h, hp) = (gaussian(r, n, d), gaussian(r, n, d));
            let got = tcl_loss(&batch(h.clone(), Modality::Text), &batch(hp.clone(), Modality::Text), tau).unwrap();
            (got.total, oracle_tcl(&h, &hp, tau))
        }),
        sweep("ans_loss", cases, 3, |r| {
            let (n, m, d, tau) = (r.random_range(1..=8), r.random_range(0..=4), r.random_range(1..=16), temperature(r));
            let (v, l, neg) = (gaussian(r, n, d), gaussian(r, n, d), gaussian3(r, n, m, d));
            let valid: Vec<usize> = (0..n).map(|_| r.random_range(0..=m)).collect();
            let cfg = ContrastiveConfig { temperature: tau, hard_negative_count: m, ..Default::default() };
            let hn = HardNegatives::ragged(neg.clone(), valid.clone()).unwrap();
            let got = ans_loss(&batch(v.clone(), Modality::Image), &batch(l.clone(), Modality::Text), &hn, &cfg).unwrap();
            (got.total, oracle_ans(&v, &l, &neg, &valid, tau))
        }),
        sweep("hinge_loss", cases, 4, |r| {
            let (n, d, alpha) = (r.random_range(1..=8), r.random_range(1..=16), r.random_range(0.0..2.0));
            let (v, l, nv, nl) = (gaussian(r, n, d), gaussian(r, n, d), gaussian(r, n, d), gaussian(r, n, d));
            let got = hinge_loss(
                &batch(v.clone(), Modality::Image),
                &batch(l.clone(), Modality::Text),
                &batch(nv.clone(), Modality::Image),
                &batch(nl.clone(), Modality::Text),
                alpha,
            )
            .unwrap();
            (got.total, oracle_hinge(&v, &l, &nv, &nl, alpha))
        }),
        sweep("mlm_loss", cases, 5, |r| {
            let (n, vocab) = (r.random_range(1..=8), r.random_range(2..=16));
            let p = distributions(r, n, vocab);
            let t: Vec<usize> = (0..n).map(|_| r.random_range(0..vocab)).collect();
            (mlm_loss(&p, &t).unwrap().total, oracle_mlm(&p, &t))
        }),
        sweep("voken_loss", cases, 6, |r| {
            let (n, k) = (r.random_range(1..=8), r.random_range(1..=16));
            let p = distributions(r, n, k);
            let t: Vec<Option<usize>> = (0..n).map(|_| r.random_bool(0.8).then(|| r.random_range(0..k))).collect();
            (voken_loss(&p, &t).unwrap().total, oracle_voken(&p, &t))
        }),
        sweep("nst_loss", cases, 7, |r| {
            let (nt, ns, d) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=16));
            let (t, s) = (gaussian(r, nt, d), gaussian(r, ns, d));
            (nst_loss(&t, &s).unwrap(), oracle_nst(&t, &s))
        }),
    ]
}

/// Largest relative error between analytic and central-difference gradients
/// of one contrastive loss, over every differentiable input.
#[derive(Debug)]
pub struct GradientReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
}

fn max_error(analytic: &[Array2<f64>], inputs: &[Array2<f64>], f: impl Fn(&[Array2<f64>]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let fd = finite_difference(x, 1e-5, |probe| {
            let mut args = inputs.to_vec();
            args[k] = probe.clone();
            f(&args)
        });
        worst = worst.max(relative_error(&analytic[k], &fd));
    }
    worst
}

/// Analytic vs central-difference gradients (step 1e-5) on N=4, d=8 batches.
pub fn gradient_suite(cases: usize) -> Vec<GradientReport> {
    const N: usize = 4;
    const D: usize = 8;
    let mut out = Vec::new();
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let tau = [0.05, 0.1, 0.5][r.random_range(0..3)];
        let cfg = ContrastiveConfig { temperature: tau, ..Default::default() };
        let xs = vec![gaussian(&mut r, N, D), gaussian(&mut r, N, D)];
        let f = |a: &[Array2<f64>]| {
            cmcl_total(&batch(a[0].clone(), Modality::Image), &batch(a[1].clone(), Modality::Text), &cfg).unwrap()
        };
        let g = f(&xs).gradients.unwrap();
        worst = worst.max(max_error(&g, &xs, |a| f(a).total));
    }
    out.push(GradientReport { name: "cmcl_total", cases, worst });

    worst = 0.0;
    for _ in 0..cases {
        let tau = [0.05, 0.1, 0.5][r.random_range(0..3)];
        let xs = vec![gaussian(&mut r, N, D), gaussian(&mut r, N, D)];
        let f = |a: &[Array2<f64>]| tcl_loss(&batch(a[0].clone(), Modality::Text), &batch(a[1].clone(), Modality::Text), tau).unwrap();
        let g = f(&xs).gradients.unwrap();
        worst = worst.max(max_error(&g, &xs, |a| f(a).total));
    }
    out.push(GradientReport { name: "tcl_loss", cases, worst });

    worst = 0.0;
    for _ in 0..cases {
        let tau = [0.05, 0.1, 0.5][r.random_range(0..3)];
        let m = 3;
        let cfg = ContrastiveConfig { temperature: tau, hard_negative_count: m, ..Default::default() };
        let valid: Vec<usize> = (0..N).map(|_| r.random_range(0..=m)).collect();
        let xs = vec![gaussian(&mut r, N, D), gaussian(&mut r, N, D), gaussian(&mut r, N * m, D)];
        let f = |a: &[Array2<f64>]| {
            let neg = a[2].clone().into_shape_with_order((N, m, D)).unwrap();
            let hn = HardNegatives::ragged(neg, valid.clone()).unwrap();
            ans_loss(&batch(a[0].clone(), Modality::Image), &batch(a[1].clone(), Modality::Text), &hn, &cfg).unwrap()
        };
        let g = f(&xs).gradients.unwrap();
        worst = worst.max(max_error(&g, &xs, |a| f(a).total));
    }
    out.push(GradientReport { name: "ans_loss", cases, worst });

    worst = 0.0;
    let mut done = 0;
    while done < cases {
        let alpha = r.random_range(0.2..1.5);
        let xs: Vec<Array2<f64>> = (0..4).map(|_| gaussian(&mut r, N, D)).collect();
        let rr = rows(&xs[0]);
        let lr = rows(&xs[1]);
        let nvr = rows(&xs[2]);
        let nlr = rows(&xs[3]);
        let near_kink = (0..N).any(|i| {
            let pos = cos(&rr[i], &lr[i]);
            (alpha - pos + cos(&nvr[i], &lr[i])).abs() < 1e-3 || (alpha - pos + cos(&rr[i], &nlr[i])).abs() < 1e-3
        });
        if near_kink {
            continue;
        }
        let f = |a: &[Array2<f64>]| {
            hinge_loss(
                &batch(a[0].clone(), Modality::Image),
                &batch(a[1].clone(), Modality::Text),
                &batch(a[2].clone(), Modality::Image),
                &batch(a[3].clone(), Modality::Text),
                alpha,
            )
            .unwrap()
        };
        let g = f(&xs).gradients.unwrap();
        worst = worst.max(max_error(&g, &xs, |a| f(a).total));
        done += 1;
    }
    out.push(GradientReport { name: "hinge_loss", cases, worst });
    out
}

/// Selection rate and (mask, keep, replace) fractions of dynamic masking
/// over `sequences` sequences of 20 tokens.
pub fn masking_statistics(sequences: usize, seed: u64) -> (f64, (f64, f64, f64)) {
    use cmkt::corpus::{plan_dynamic_masking, MaskAction, MaskingConfig};
    let cfg = MaskingConfig::default();
    let tokens: Vec<u32> = (3..23).collect();
    let mut r = rng(seed);
    let (mut total, mut selected, mut mask, mut keep, mut replace) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for _ in 0..sequences {
        let plan = plan_dynamic_masking(&tokens, &cfg, 50, &mut r).unwrap();
        total += tokens.len();
        for (_, action) in &plan.actions {
            selected += 1;
            match action {
                MaskAction::Mask => mask += 1,
                MaskAction::Keep => keep += 1,
                MaskAction::RandomReplace(_) => replace += 1,
            }
        }
    }
    let s = selected as f64;
    (s / total as f64, (mask as f64 / s, keep as f64 / s, replace as f64 / s))
}

pub fn cmkt(args: &[&str], data_dir: Option<&std::path::Path>) -> std::process::Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_cmkt"));
    cmd.args(args);
    match data_dir {
        Some(d) => cmd.env("CMKT_DATA_DIR", d),
        None => cmd.env_remove("CMKT_DATA_DIR"),
    };
    cmd.output().expect("spawn cmkt")
}

fn ok(args: &[&str]) {
    let out = cmkt(args, None);
    assert!(
        out.status.success(),
        "cmkt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Run every pipeline command with seed `seed` into `root`.
pub fn run_pipeline(root: &std::path::Path, seed: &str) {
    let p = |s: &str| root.join(s).display().to_string();
    let cfg = p("config.toml");
    std::fs::create_dir_all(root).unwrap();
    std::fs::write(
        &cfg,
        "[pretrain]\nbatch_size = 16\ndim = 16\ndepth = 1\nepochs = 1\n\n[finetune]\nlr_grid = [1e-3, 3e-3]\nmax_epochs_low_resource = 1\nmax_epochs_full = 1\nn_subsamples = 2\nn_seeds = 2\n",
    )
    .unwrap();
    let g = |out: &str| vec!["--seed".to_string(), seed.to_string(), "--config".to_string(), cfg.clone(), "--out".to_string(), p(out)];
    let run = |out: &str, rest: &[&str]| {
        let mut args = g(out);
        args.extend(rest.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&refs);
    };
    let w = |f: &str| p(&format!("world/{f}"));
    run("world", &["synth", "--pairs", "96", "--heldout", "8", "--mcqa-train", "80", "--mcqa-dev", "16", "--mcqa-test", "16", "--similarity", "20"]);
    run("perturb", &["perturb", "--pairs", &w("pairs.tsv"), "--lexicon", &w("lexicon.tsv"), "--pos", &w("pos.tsv"), "--oracle", &w("oracle.tsv")]);
    let pert = p("perturb/perturbations.tsv");
    run(
        "pretrain",
        &["pretrain", "--method", "CMCL+PSA+ANS", "--vocab", &w("vocab.txt"), "--pairs", &w("pairs.tsv"), "--features", &w("features.bin"), "--perturbations", &pert, "--heldout", &w("similarity.tsv"), "--epochs", "2"],
    );
    run("teacher", &["teacher", "--objective", "hinge", "--vocab", &w("vocab.txt"), "--pairs", &w("pairs.tsv"), "--features", &w("features.bin")]);
    run("distill", &["distill", "--teacher", &p("teacher/teacher.ckpt.json"), "--vocab", &w("vocab.txt"), "--captions", &w("captions.txt")]);
    run("finetune", &["finetune", "--checkpoint", &p("pretrain/final.ckpt.json"), "--vocab", &w("vocab.txt"), "--dataset", &w("mcqa.jsonl"), "--size", "32", "--epochs", "1"]);
    run("eval-a", &["eval", "--checkpoint", &p("pretrain/best.ckpt.json"), "--vocab", &w("vocab.txt"), "--dataset", &w("mcqa.jsonl"), "--protocol", "low64"]);
    run("eval-b", &["eval", "--checkpoint", &p("distill/student.ckpt.json"), "--vocab", &w("vocab.txt"), "--dataset", &w("mcqa.jsonl"), "--protocol", "low64"]);
    run("report", &["report", "--svg", &p("eval-a/eval_run.json"), &p("eval-b/eval_run.json")]);
}

/// Relative paths and contents of every file under `root` except manifests
/// and the config written by [`run_pipeline`].
pub fn output_files(root: &std::path::Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "manifest.json" && n != "config.toml") {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
