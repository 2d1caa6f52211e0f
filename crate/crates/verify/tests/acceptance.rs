//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::io::Write;
use std::time::{Duration, Instant};

use vlt_core::data::{generate_dataset, read_dataset, split, write_dataset, DataConfig, Sample, Vocabulary};
use vlt_core::model::{end_to_end_check, language_gate, ForwardOptions, QuerySource, VltConfig, VltParams};
use vlt_core::nn::{ParamSet, Session};
use vlt_core::parallel::Execution;
use vlt_core::tensor::{op_suite, Prng, Tensor};
use vlt_core::train::{
    evaluate, initialise, iou, precision_at, run_ablation, train, AblationGrid, Checkpoint, EvalReport, Metrics,
    TrainConfig, Variant, THRESHOLDS,
};

const SEED: u64 = 20_240_601;

struct Ledger {
    failures: usize,
    reports: Vec<Metrics>,
}

impl Ledger {
    fn record(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        std::io::stdout().flush().unwrap();
    }

    fn keep(&mut self, r: &EvalReport) {
        self.reports.push(r.metrics);
    }
}

fn gradients(l: &mut Ledger) {
    let start = Instant::now();
    let ops = op_suite(100, SEED).unwrap();
    let (worst_op, op_err) = ops
        .iter()
        .map(|o| (o.op, o.max_rel_error))
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let checks = end_to_end_check(&VltConfig::micro(), 100, 20, SEED, Execution::Sequential).unwrap();
    let e2e = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let pass = op_err < 1e-4 && e2e < 1e-3 && elapsed < Duration::from_secs(120) && checks.len() == 2000;
    l.record(
        "1",
        "gradient correctness",
        pass,
        format!(
            "{} ops x 100 trials, worst {worst_op} {op_err:.2e} (< 1e-4); end-to-end micro 100 trials x 20 weights, \
             worst {e2e:.2e} (< 1e-3); {:.1}s (< 120s)",
            ops.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn random_input(cfg: &VltConfig, p: &mut Prng) -> (Tensor, Vec<usize>) {
    let image = p.uniform(0.0, 1.0, &[3, cfg.image_height, cfg.image_width]).unwrap();
    let len = 1 + p.below(cfg.max_words);
    (image, (0..len).map(|_| 1 + p.below(cfg.vocab_size - 1)).collect())
}

/// `relu(F_t·W + b)` by scalar loops.
fn projected_words(set: &ParamSet, model: &VltParams, words: &Tensor) -> Vec<Vec<f64>> {
    let (w, b) = (set.get(model.qgm.project.weight), set.get(model.qgm.project.bias));
    let (rows, c) = (words.shape()[0], words.shape()[1]);
    (0..rows)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let mut acc = 0.0;
                    for k in 0..c {
                        acc += words.at(&[i, k]) * w.at(&[k, j]);
                    }
                    (acc + b.at(&[j])).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Forward pass assembled stage by stage with the balance step left out.
fn pipeline_without_balance(
    model: &VltParams,
    set: &ParamSet,
    cfg: &VltConfig,
    image: &Tensor,
    tokens: &[usize],
) -> Tensor {
    let mut s = Session::inference(set);
    let iv = s.constant(image.clone());
    let raw = model.vision_backbone(&mut s, iv).unwrap();
    let lang = model.language_encode(&mut s, tokens).unwrap();
    let flat = s.graph.reshape(raw, &[cfg.channels, cfg.positions()]).unwrap();
    let fv = s.graph.transpose(flat).unwrap();
    let gated = language_gate(&mut s, fv, lang.final_state).unwrap();
    let (q, _, _) = model.make_queries(&mut s, raw, &lang).unwrap();
    let (mem, _) = model.transformer_encode(&mut s, gated, false).unwrap();
    let r = model.transformer_decode(&mut s, q, mem).unwrap();
    let logits = model.fuse_and_mask_decode(&mut s, r, mem).unwrap();
    s.value(logits).clone()
}

fn structure(l: &mut Ledger) {
    let cfg = VltConfig::micro();
    let learned_cfg = VltConfig {
        query_source: QuerySource::LearnedFixed,
        ..cfg.clone()
    };
    let off_cfg = VltConfig {
        use_qbm: false,
        ..cfg.clone()
    };
    let mut worst_row = 0.0f64;
    let mut pad_mass = 0.0f64;
    let mut hull_violation = 0.0f64;
    let (mut conf_lo, mut conf_hi) = (1.0f64, 0.0f64);
    let (mut hook_equal, mut learned_fixed) = (true, true);
    let passes = 1000;
    for i in 0..passes {
        let mut p = Prng::derive(SEED, i);
        let (model, set) = VltParams::init(&cfg, &mut p).unwrap();
        let (image, tokens) = random_input(&cfg, &mut p);
        let t = model.trace(&set, &image, &tokens, ForwardOptions::default()).unwrap();
        let a = t.word_attention.as_ref().unwrap();
        let nl = cfg.max_words;
        let projected = projected_words(&set, &model, &t.language);
        for n in 0..cfg.queries {
            let row = &a.data()[n * nl..(n + 1) * nl];
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            pad_mass = pad_mass.max(row[tokens.len()..].iter().map(|v| v.abs()).fold(0.0, f64::max));
            for c in 0..cfg.channels {
                let vals = projected[..tokens.len()].iter().map(|r| r[c]);
                let lo = vals.clone().fold(f64::INFINITY, f64::min);
                let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                let q = t.queries.at(&[n, c]);
                hull_violation = hull_violation.max(lo - q).max(q - hi);
            }
        }
        for &c in t.confidence.data() {
            conf_lo = conf_lo.min(c);
            conf_hi = conf_hi.max(c);
        }
        let hooked = model
            .trace(
                &set,
                &image,
                &tokens,
                ForwardOptions {
                    unit_confidence: true,
                    ..Default::default()
                },
            )
            .unwrap();
        let (off_model, _) = VltParams::layout(&off_cfg).unwrap();
        let removed = off_model
            .trace(&set, &image, &tokens, ForwardOptions::default())
            .unwrap();
        hook_equal &= hooked.logits.bitwise_eq(&removed.logits)
            && hooked
                .logits
                .bitwise_eq(&pipeline_without_balance(&model, &set, &cfg, &image, &tokens));

        let (learned, lset) = VltParams::init(&learned_cfg, &mut Prng::derive(SEED ^ 1, i)).unwrap();
        let (image2, tokens2) = random_input(&cfg, &mut p);
        let q1 = learned
            .trace(&lset, &image, &tokens, ForwardOptions::default())
            .unwrap()
            .queries;
        let q2 = learned
            .trace(&lset, &image2, &tokens2, ForwardOptions::default())
            .unwrap()
            .queries;
        learned_fixed &= q1.bitwise_eq(&q2);
    }
    let pass = worst_row <= 1e-9
        && pad_mass == 0.0
        && hull_violation <= 1e-12
        && conf_lo > 0.0
        && conf_hi < 1.0
        && hook_equal
        && learned_fixed;
    l.record(
        "2",
        "structural invariants",
        pass,
        format!(
            "{passes} passes: |row sum - 1| <= {worst_row:.1e}, padding mass {pad_mass:e}, hull excess {hull_violation:.1e}, \
             C_q in [{conf_lo:.4}, {conf_hi:.4}], unit hook bitwise {hook_equal}, learned queries fixed {learned_fixed}"
        ),
    );
}

fn metrics(l: &mut Ledger) {
    let mut p = Prng::new(SEED);
    let mut exact = true;
    let mut ious = Vec::new();
    for _ in 0..1000 {
        let n = 1 + p.below(400);
        let density = p.next_f64();
        let a: Vec<bool> = (0..n).map(|_| p.next_f64() < density).collect();
        let b: Vec<bool> = (0..n).map(|_| p.next_f64() < density).collect();
        let (mut inter, mut union) = (0u32, 0u32);
        for k in 0..n {
            inter += (a[k] && b[k]) as u32;
            union += (a[k] || b[k]) as u32;
        }
        let oracle = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        let got = iou(&a, &b).unwrap();
        exact &= got == oracle;
        ious.push(got);
    }
    for x in THRESHOLDS {
        let count = ious.iter().filter(|&&v| v >= x).count();
        exact &= precision_at(&ious, x).unwrap() == count as f64 / ious.len() as f64;
    }
    let square = |lo: usize, hi: usize| -> Vec<bool> { (0..64).map(|i| (lo..hi).contains(&i)).collect() };
    let hand = iou(&square(0, 16), &square(0, 16)).unwrap() == 1.0
        && iou(&square(0, 16), &square(16, 32)).unwrap() == 0.0
        && iou(&square(0, 16), &square(8, 24)).unwrap() == 1.0 / 3.0;
    l.record(
        "3",
        "metric oracle equivalence",
        exact && hand,
        format!("1000 random pairs exact {exact}; identical 1, disjoint 0, half-overlap 1/3: {hand}"),
    );
}

fn fifths(samples: Vec<Sample>, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let s = split(samples, [5.0 / 6.0, 1.0 / 6.0, 0.0], seed).unwrap();
    (s.train, s.val)
}

fn learnability(l: &mut Ledger) -> Checkpoint {
    let samples = generate_dataset(&DataConfig::default(), 1200, SEED, Execution::Sequential).unwrap();
    let (train_set, val_set) = fifths(samples, SEED);
    let cfg = TrainConfig {
        seed: SEED,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let (model, mut params, mut adam) = initialise(&cfg).unwrap();
    let history = train(
        &cfg,
        &model,
        &mut params,
        &mut adam,
        &train_set,
        &val_set,
        Execution::Sequential,
        |r| {
            if let Some(v) = &r.val {
                eprintln!(
                    "  epoch {:2} loss {:.4} val IoU {:.4}",
                    r.epoch + 1,
                    r.train_loss,
                    v.metrics.iou
                );
            }
        },
    )
    .unwrap();
    let elapsed = start.elapsed();
    let report = history.last().unwrap().val.clone().unwrap();
    l.keep(&report);
    for r in history.iter().filter_map(|r| r.val.as_ref()) {
        l.keep(r);
    }
    let m = report.metrics;
    let pass = m.iou >= 0.70 && m.precision[0] >= 0.75 && elapsed <= Duration::from_secs(30 * 60);
    l.record(
        "4",
        "desk-scale learnability",
        pass,
        format!(
            "{} train / {} val, 64x64, N_q=16, 20 epochs: val IoU {:.4} (>= 0.70), Pr@0.5 {:.4} (>= 0.75), \
             {:.1} min single-threaded (<= 30)",
            train_set.len(),
            val_set.len(),
            m.iou,
            m.precision[0],
            elapsed.as_secs_f64() / 60.0
        ),
    );
    Checkpoint {
        config: cfg.model,
        params,
        step: adam.step,
        optimizer: Some(adam),
    }
}

/// Reduced ablation scale: 32x32 images, `C = 32`, 16 queries.
fn ablation_base() -> (TrainConfig, Vec<Sample>, Vec<Sample>) {
    let data_cfg = DataConfig {
        image_size: 32,
        ..DataConfig::default()
    };
    let samples = generate_dataset(&data_cfg, 1200, SEED + 5, Execution::Sequential).unwrap();
    let (train_set, val_set) = fifths(samples, SEED);
    let model = VltConfig {
        channels: 32,
        heads: 4,
        queries: 16,
        backbone: [16, 32, 32, 32, 32],
        ..VltConfig::small()
    };
    (
        TrainConfig {
            model,
            ..TrainConfig::default()
        },
        train_set,
        val_set,
    )
}

fn ablations(l: &mut Ledger) {
    let (base, train_set, val_set) = ablation_base();
    let seeds = [1, 2, 3];
    let start = Instant::now();
    let grids = [
        "source=qgm,learned;nq=16;qbm=on,off",
        "source=qgm;nq=1",
        "source=words;nq=8",
    ];
    let mut rows = Vec::new();
    for g in grids {
        let grid = AblationGrid::parse(g, base.model.queries).unwrap();
        let report = run_ablation(
            &grid,
            &base,
            &train_set,
            &val_set,
            &seeds,
            Execution::Sequential,
            |v, s, m| eprintln!("  {v} seed {s}: IoU {:.4}", m.iou),
        )
        .unwrap();
        rows.extend(report.rows);
    }
    for r in &rows {
        l.reports.extend(r.runs.iter().map(|(_, m)| *m));
    }
    let mean = |source, queries, qbm| {
        100.0
            * rows
                .iter()
                .find(|r| r.variant == Variant { source, queries, qbm })
                .unwrap()
                .mean()
                .iou
    };
    let qgm = mean(QuerySource::Qgm, 16, true);
    let learned = mean(QuerySource::LearnedFixed, 16, true);
    let words = mean(QuerySource::WordsAsQueries, 8, true);
    let one = mean(QuerySource::Qgm, 1, true);
    let off = mean(QuerySource::Qgm, 16, false);
    let scale = format!(
        "3 seeds, {} train / {} val at 32x32, C=32, {} epochs, {:.1} min",
        train_set.len(),
        val_set.len(),
        base.epochs,
        start.elapsed().as_secs_f64() / 60.0
    );
    l.record(
        "5a",
        "QGM beats learned queries by >= 1.5",
        qgm - learned >= 1.5,
        format!("{qgm:.2} vs {learned:.2}; {scale}"),
    );
    l.record(
        "5b",
        "QGM beats words as queries",
        qgm > words,
        format!("{qgm:.2} vs {words:.2}"),
    );
    l.record(
        "5c",
        "16 queries beat 1 by >= 1.0",
        qgm - one >= 1.0,
        format!("{qgm:.2} vs {one:.2}"),
    );
    l.record(
        "5d",
        "QBM on >= QBM off - 0.3",
        qgm >= off - 0.3,
        format!("{qgm:.2} vs {off:.2}"),
    );
}

fn determinism(l: &mut Ledger) {
    let (mut base, train_set, val_set) = ablation_base();
    base.seed = 7;
    let run = |exec| {
        let (model, mut params, mut adam) = initialise(&base).unwrap();
        let history = train(
            &base,
            &model,
            &mut params,
            &mut adam,
            &train_set,
            &val_set,
            exec,
            |_| {},
        )
        .unwrap();
        let report = evaluate(&model, &params, &val_set, exec).unwrap();
        let ckpt = Checkpoint {
            config: base.model.clone(),
            params,
            step: adam.step,
            optimizer: Some(adam),
        };
        (ckpt.to_bytes(), report, history)
    };
    let (a, ra, ha) = run(Execution::Sequential);
    let (b, rb, hb) = run(Execution::Parallel);
    l.keep(&ra);
    let pass = a == b && ra == rb && ha == hb && ra.to_tsv() == rb.to_tsv();
    l.record(
        "6",
        "determinism",
        pass,
        format!(
            "two {}-epoch runs (sequential, parallel): checkpoints of {} bytes identical {}, reports identical {}",
            base.epochs,
            a.len(),
            a == b,
            ra == rb
        ),
    );
}

fn persistence(l: &mut Ledger, ckpt: &Checkpoint) {
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.vltc"), dir.path().join("b.vltc"));
    ckpt.save(&p1).unwrap();
    Checkpoint::load(&p1).unwrap().save(&p2).unwrap();
    let ckpt_same = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    let samples = generate_dataset(&DataConfig::default(), 200, SEED, Execution::Sequential).unwrap();
    let data_dir = dir.path().join("data");
    write_dataset(&samples, &data_dir).unwrap();
    let back = read_dataset(&data_dir, &Vocabulary::grammar()).unwrap();
    let masks_exact = back.len() == samples.len()
        && samples
            .iter()
            .zip(&back)
            .all(|(a, b)| a.target_mask.bitwise_eq(&b.target_mask) && a.tokens == b.tokens);
    let quantised = samples
        .iter()
        .zip(&back)
        .all(|(a, b)| a.image.max_abs_diff(&b.image) <= 0.5 / 255.0);
    l.record(
        "7",
        "persistence",
        ckpt_same && masks_exact && quantised,
        format!("checkpoint save-load-save identical {ckpt_same}; 200-sample dataset masks exact {masks_exact}, images within 8-bit quantisation {quantised}"),
    );
}

fn main() {
    let mut l = Ledger {
        failures: 0,
        reports: Vec::new(),
    };
    gradients(&mut l);
    structure(&mut l);
    metrics(&mut l);
    let ckpt = learnability(&mut l);
    ablations(&mut l);
    determinism(&mut l);
    persistence(&mut l, &ckpt);
    let monotone = l.reports.iter().all(Metrics::precision_monotone);
    l.record(
        "8",
        "precision monotonicity",
        monotone,
        format!("{} evaluation reports checked", l.reports.len()),
    );
    println!("acceptance: {} failing", l.failures);
    if l.failures > 0 {
        std::process::exit(1);
    }
}
