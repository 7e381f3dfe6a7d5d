//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Run with `cargo test --test acceptance -- --nocapture` to see them.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use cmkt::checkpoint::ModelState;
use cmkt::corpus::{Split, Vocab};
use cmkt::distillation::{distill, train_teacher, DistillSpec, TeacherObjective, TeacherSpec};
use cmkt::encoders::TextEncoder;
use cmkt::evaluation::*;
use cmkt::objectives::*;
use cmkt::params::OptimizerKind;
use cmkt::perturbation::*;
use cmkt::seed;
use cmkt::synth::{SynthConfig, SynthCorpus, SynthWorld};
use cmkt::training::{pretrain, Method, PretrainConfig, PretrainInputs};
use common::lexicon_oracle::load_fixture;
use common::*;
use ndarray::array;

fn verdict(n: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {n} ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

#[test]
fn criterion_1_loss_oracles() {
    let start = Instant::now();
    let reports = loss_oracle_suite(120);
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let cases = reports.iter().map(|r| r.cases).min().unwrap_or(0);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    verdict(
        1,
        "loss oracles",
        reports.len() == 7 && cases >= 100 && worst <= 1e-10 && elapsed < Duration::from_secs(10),
        format!("{names:?}, {cases} cases each, worst {worst:.1e}, {elapsed:.1?}"),
    );
}

#[test]
fn criterion_2_gradient_checks() {
    let start = Instant::now();
    let reports = gradient_suite(10);
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let names: Vec<&str> = reports.iter().map(|r| r.name).collect();
    verdict(
        2,
        "gradient checks",
        reports.len() == 4 && worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("{names:?}, worst relative error {worst:.1e}, {elapsed:.1?}"),
    );
}

fn ans_equals_cmcl() -> bool {
    let mut r = rng(100);
    (0..20).all(|_| {
        let v = gaussian(&mut r, 6, 5);
        let l = gaussian(&mut r, 6, 5);
        let cfg = ContrastiveConfig::default();
        let plain = cmcl_total(&batch(v.clone(), Modality::Image), &batch(l.clone(), Modality::Text), &cfg).unwrap();
        let ans = ans_loss(&batch(v, Modality::Image), &batch(l, Modality::Text), &HardNegatives::empty(6, 5), &cfg).unwrap();
        let (pg, ag) = (plain.gradients.unwrap(), ans.gradients.unwrap());
        plain.total == ans.total && plain.per_item == ans.per_item && pg[0] == ag[0] && pg[1] == ag[1]
    })
}

fn distill_without_nst_is_mlm() -> bool {
    let world = SynthWorld::new(SynthConfig {
        train_pairs: 40,
        heldout_pairs: 8,
        ..Default::default()
    });
    let corpus = world.pair_corpus();
    let config = PretrainConfig {
        batch_size: 8,
        epochs: 1,
        dim: 16,
        depth: 2,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let pairs = PretrainInputs::from_pairs(world.vocab(), corpus.split(Split::Train), Some(corpus.bank.clone()));
    let teacher = train_teacher(
        &TeacherSpec {
            objective: TeacherObjective::Cmcl,
            config: config.clone(),
        },
        &pairs,
    )
    .unwrap()
    .model;
    let mut inputs = PretrainInputs::new(world.vocab());
    inputs.captions = corpus.split(Split::Train).into_iter().map(|p| p.caption).collect();
    let mlm = pretrain(Method::Mlm.spec(), &inputs, config.clone()).unwrap();
    inputs.teacher = Some(teacher);
    let kd = distill(
        &DistillSpec {
            mlm_weight: 1.0,
            nst_weight: 0.0,
            config,
        },
        &inputs,
    )
    .unwrap();
    kd.log.column("total") == mlm.log.column("total") && kd.model.text.params() == mlm.model.text.params()
}

fn hinge_zero_when_margins_hold() -> bool {
    let v = array![[1.0, 0.0], [0.0, 1.0]];
    let nv = array![[-1.0, 0.0], [0.0, -1.0]];
    let r = hinge_loss(
        &batch(v.clone(), Modality::Image),
        &batch(v, Modality::Text),
        &batch(nv.clone(), Modality::Image),
        &batch(nv, Modality::Text),
        1.0,
    )
    .unwrap();
    r.total == 0.0
}

fn single_pair_is_zero() -> bool {
    let mut r = rng(101);
    (0..10).all(|_| {
        let v = gaussian(&mut r, 1, 7);
        let l = gaussian(&mut r, 1, 7);
        let c = cmcl_total(&batch(v.clone(), Modality::Image), &batch(l.clone(), Modality::Text), &ContrastiveConfig::default()).unwrap();
        let t = tcl_loss(&batch(v, Modality::Text), &batch(l, Modality::Text), 0.05).unwrap();
        c.total == 0.0 && t.total == 0.0
    })
}

#[test]
fn criterion_3_reduction_identities() {
    let checks = [
        ("ans(M=0)=cmcl", ans_equals_cmcl()),
        ("distill(nst=0)=mlm", distill_without_nst_is_mlm()),
        ("hinge=0 with margins", hinge_zero_when_margins_hold()),
        ("N=1 infonce=0", single_pair_is_zero()),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    verdict(3, "reduction identities", failed.is_empty(), format!("{} identities, failed: {failed:?}", checks.len()));
}

#[test]
fn criterion_4_masking_statistics() {
    let (rate, (mask, keep, replace)) = masking_statistics(5000, 42);
    let pass = (rate - 0.15).abs() <= 0.005
        && (mask - 0.8).abs() <= 0.01
        && (keep - 0.1).abs() <= 0.01
        && (replace - 0.1).abs() <= 0.01;
    verdict(
        4,
        "masking statistics",
        pass,
        format!("100000 tokens, rate {rate:.4}, split ({mask:.3}, {keep:.3}, {replace:.3})"),
    );
}

#[test]
fn criterion_5_perturbation_pipeline() {
    let fx = load_fixture();
    let lexicon = Lexicon::load(&fixture("mini_lexicon.tsv")).unwrap();
    let tagger = PosTagger::load(&fixture("pos.tsv")).unwrap();
    let oracle = TableOracle::load(&fixture("mock_oracle.tsv")).unwrap();
    let captions = [
        "a girl puts an apple in her bag",
        "a dog sits on the table",
        "a cat sits in a bag",
        "the girl runs",
    ];
    let p = Perturber {
        oracle: &oracle,
        lexicon: &lexicon,
        tagger: &tagger,
        config: PerturbConfig::default(),
    };
    let mut checked = 0;
    let mut problems = Vec::new();
    for caption in captions {
        for seed in 0..25 {
            let records = p.perturb(caption, seed).unwrap();
            let got: Vec<(usize, String, bool)> = records
                .iter()
                .map(|r| (r.position, r.replacement.clone(), r.verdict == Verdict::EquivalentPositive))
                .collect();
            if !fx.enumerate(caption, 3, 5).contains(&got) {
                problems.push(format!("enumeration {caption}/{seed}"));
            }
            if records.len() > 15 {
                problems.push(format!("count {caption}/{seed}"));
            }
            let ans = p.generate_ans(caption, seed).unwrap();
            let psa = p.generate_psa(caption, seed).unwrap();
            if ans.len() + psa.len() != records.len() {
                problems.push(format!("partition {caption}/{seed}"));
            }
            let original = caption_words(caption);
            for out in ans.iter().chain(&psa) {
                let w = caption_words(out);
                if w.len() != original.len() || w.iter().zip(&original).filter(|(a, b)| a != b).count() != 1 {
                    problems.push(format!("single edit {out}"));
                }
            }
            checked += 1;
        }
    }
    let vocab = fx.vocabulary();
    for w in &vocab {
        let related = fx.closure(w);
        for c in vocab.iter().filter(|c| *c != w) {
            let positive = filter_candidate(w, c, &lexicon) == Verdict::EquivalentPositive;
            if positive != related.contains(c) {
                problems.push(format!("filter {w}->{c}"));
            }
        }
    }
    verdict(
        5,
        "perturbation pipeline",
        problems.is_empty(),
        format!("{checked} caption/seed runs, {} word pairs, problems: {problems:?}", vocab.len() * (vocab.len() - 1)),
    );
}

struct Synthetic {
    world: SynthWorld,
    corpus: SynthCorpus,
    vocab: Vocab,
    config: PretrainConfig,
    cmcl: ModelState,
    cmcl_time: Duration,
}

fn desk_config() -> PretrainConfig {
    PretrainConfig {
        learning_rate: 1e-3,
        epochs: 20,
        optimizer: OptimizerKind::adam(),
        ..Default::default()
    }
}

fn synthetic() -> &'static Synthetic {
    static CELL: OnceLock<Synthetic> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = SynthWorld::new(SynthConfig::default());
        let corpus = world.pair_corpus();
        let vocab = world.vocab();
        let config = desk_config();
        let inputs = PretrainInputs::from_pairs(vocab.clone(), corpus.split(Split::Train), Some(corpus.bank.clone()));
        let start = Instant::now();
        let cmcl = pretrain(Method::Cmcl.spec(), &inputs, config.clone()).unwrap().model;
        Synthetic {
            cmcl_time: start.elapsed(),
            world,
            corpus,
            vocab,
            config,
            cmcl,
        }
    })
}

#[test]
fn criterion_6_synthetic_retrieval() {
    let s = synthetic();
    let heldout = s.corpus.split(Split::Dev);
    let train = s.corpus.split(Split::Train);
    let mut inputs = PretrainInputs::from_pairs(s.vocab.clone(), train.clone(), Some(s.corpus.bank.clone()));
    let untrained = cmkt::training::Trainer::new(Method::Cmcl.spec(), s.config.clone(), &inputs).unwrap();
    let (before_i2t, before_t2i) = retrieval_recall_at_1(untrained.model(), &s.vocab, &s.corpus.bank, &heldout).unwrap();
    let (i2t, t2i) = retrieval_recall_at_1(&s.cmcl, &s.vocab, &s.corpus.bank, &heldout).unwrap();

    let (oracle, lexicon, tagger) = (s.world.oracle(), s.world.lexicon(), s.world.tagger());
    let perturber = Perturber {
        oracle: &oracle,
        lexicon: &lexicon,
        tagger: &tagger,
        config: PerturbConfig::default(),
    };
    let records = perturber.perturb_corpus(train.iter().map(|p| p.caption.as_str()), 0).unwrap();
    inputs.perturbations = Some(PerturbationIndex::new(&records));
    let start = Instant::now();
    let ans = pretrain(Method::CmclAns.spec(), &inputs, s.config.clone()).unwrap().model;
    let ans_time = start.elapsed();
    let (ans_i2t, ans_t2i) = retrieval_recall_at_1(&ans, &s.vocab, &s.corpus.bank, &heldout).unwrap();

    let recall = i2t.min(t2i);
    let ans_recall = ans_i2t.min(ans_t2i);
    let pass = recall >= 0.8 && ans_recall >= recall - 0.02 && s.cmcl_time < Duration::from_secs(300);
    verdict(
        6,
        "synthetic retrieval",
        pass,
        format!(
            "{} held-out pairs, recall@1 (i2t, t2i) untrained ({before_i2t:.3}, {before_t2i:.3}), CMCL ({i2t:.3}, {t2i:.3}) in {:.1?}, CMCL+ANS ({ans_i2t:.3}, {ans_t2i:.3}) in {ans_time:.1?}",
            heldout.len(),
            s.cmcl_time
        ),
    );
}

#[test]
fn criterion_7_synthetic_transfer() {
    let s = synthetic();
    let dataset = s.world.mcqa(400, 200, 1000, 4);
    let random = TextEncoder::new(
        s.config.encoder_config(s.vocab.len()),
        seed::derive(s.config.seed, &[seed::stream::INIT]),
    )
    .unwrap();
    let ft = FinetuneConfig::default();
    let mean = |name: &str, enc: &TextEncoder| {
        let res = low_resource_protocol(name, enc, &s.vocab, &dataset, &[64], &ft).unwrap();
        assert_eq!(res.runs[0].accuracies.len(), 5);
        res.runs[0].mean
    };
    let base = mean("random-init", &random);
    let cmcl = mean("CMCL", &s.cmcl.text);
    let gap = 100.0 * (cmcl - base);
    verdict(
        7,
        "synthetic transfer",
        gap >= 10.0,
        format!("64 examples x 5 subsamples, random-init {:.1}, CMCL {:.1}, gap {gap:.1} points", 100.0 * base, 100.0 * cmcl),
    );
}

#[test]
fn criterion_8_protocol_fidelity() {
    let world = SynthWorld::new(SynthConfig::default());
    let vocab = world.vocab();
    let data = world.mcqa(200, 20, 40, 4);
    let cfg = PretrainConfig {
        dim: 16,
        depth: 1,
        ..Default::default()
    };
    let enc = TextEncoder::new(cfg.encoder_config(vocab.len()), 5).unwrap();
    let ft = FinetuneConfig {
        lr_grid: vec![1e-3],
        learning_rate: 1e-3,
        max_epochs_low_resource: 2,
        max_epochs_full: 1,
        grid_search: false,
        ..Default::default()
    };
    let low = low_resource_protocol("MLM", &enc, &vocab, &data, &[64, 128], &ft).unwrap();
    let full = supervised_protocol("MLM", &enc, &vocab, &data, &ft).unwrap();
    let low_ok = low.runs.len() == 2 && low.runs.iter().all(|r| r.accuracies.len() == 5);
    let full_ok = full.runs.len() == 1 && full.runs[0].accuracies.len() == 3;

    let mut runs = low.runs.clone();
    let mut r = rng(8);
    for method in ["CMCL", "BERT-base"] {
        for dataset in ["PIQA", "VP"] {
            for size in [64, 128] {
                let accs: Vec<f64> = (0..5).map(|_| rand::Rng::random_range(&mut r, 0.3..0.7)).collect();
                runs.push(EvalRun::new(method, dataset, TrainSize::Low(size), (0..5).collect(), accs).unwrap());
            }
        }
    }
    let runs: Vec<EvalRun> = runs
        .into_iter()
        .map(|mut run| {
            if run.method == "MLM" {
                run.dataset = "PIQA".into();
            }
            run
        })
        .collect();
    let mut all = runs.clone();
    for size in [64, 128] {
        let mlm = runs.iter().find(|r| r.method == "MLM" && r.train_size == TrainSize::Low(size)).unwrap();
        all.push(EvalRun { dataset: "VP".into(), ..mlm.clone() });
    }
    let rep = report(&all, Layout::LowResource).unwrap();
    let key = |r: &EvalRun| (r.method.clone(), r.dataset.clone(), r.train_size.to_string());
    let mut back = parse_report_csv(&rep.csv).unwrap();
    back.sort_by_key(key);
    all.sort_by_key(key);
    let round_trip = back == all;
    let layout = rep.text.contains("Average-64") && rep.text.contains("Average-128");

    let fixture_runs = parse_report_csv(&std::fs::read_to_string(fixture("report_bert_base_piqa64.csv")).unwrap()).unwrap();
    let cell = fixture_runs[0].cell();
    let rendered = report(&fixture_runs, Layout::LowResource).unwrap().text.contains("52.6±0.9");
    verdict(
        8,
        "protocol fidelity",
        low_ok && full_ok && round_trip && layout && cell == "52.6±0.9" && rendered,
        format!("low-resource 5/size {low_ok}, full 3 seeds {full_ok}, csv round-trip {round_trip}, layout {layout}, fixture cell {cell}"),
    );
}

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    run_pipeline(&dir.path().join("a"), "9");
    run_pipeline(&dir.path().join("b"), "9");
    let a = output_files(&dir.path().join("a"));
    let b = output_files(&dir.path().join("b"));
    let differing: Vec<&String> = a.keys().filter(|k| b.get(*k) != a.get(*k)).collect();
    let same_keys = a.keys().eq(b.keys());
    let commands: std::collections::BTreeSet<&str> = a.keys().filter_map(|k| k.split('/').next()).collect();
    verdict(
        9,
        "determinism",
        same_keys && differing.is_empty() && commands.len() == 9,
        format!("{} files from {commands:?}, differing: {differing:?}", a.len()),
    );
}
