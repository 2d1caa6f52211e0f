use std::fmt;

use super::metrics::{Metrics, METRIC_HEADER};
use super::run::{evaluate, initialise, train, EpochRecord, TrainConfig};
use super::TrainError;
use crate::data::Sample;
use crate::model::QuerySource;
use crate::parallel::Execution;

/// One model variant of an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Variant {
    pub source: QuerySource,
    pub queries: usize,
    pub qbm: bool,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let qbm = if self.qbm { "on" } else { "off" };
        write!(f, "source={} nq={} qbm={qbm}", self.source.tag(), self.queries)
    }
}

/// Cartesian grid of variants, written `source=qgm,learned;nq=1,16;qbm=on,off`.
/// Omitted keys default to `source=qgm`, the base query count and
/// `qbm=on`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AblationGrid {
    pub sources: Vec<QuerySource>,
    pub queries: Vec<usize>,
    pub qbm: Vec<bool>,
}

impl AblationGrid {
    pub fn parse(spec: &str, base_queries: usize) -> Result<Self, TrainError> {
        let bad = |m: String| TrainError::Grid(m);
        let mut grid = Self {
            sources: vec![QuerySource::Qgm],
            queries: vec![base_queries],
            qbm: vec![true],
        };
        let mut seen = Vec::new();
        for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=values, found {part:?}")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(bad(format!("key {key:?} given twice")));
            }
            seen.push(key);
            let values: Vec<&str> = values.split(',').map(str::trim).collect();
            if values.iter().any(|v| v.is_empty()) {
                return Err(bad(format!("empty value in {part:?}")));
            }
            match key {
                "source" => {
                    grid.sources = values
                        .iter()
                        .map(|v| QuerySource::from_tag(v).ok_or_else(|| bad(format!("unknown source {v:?}"))))
                        .collect::<Result<_, _>>()?
                }
                "nq" => {
                    grid.queries = values
                        .iter()
                        .map(|v| match v.parse::<usize>() {
                            Ok(n) if n > 0 => Ok(n),
                            _ => Err(bad(format!("bad query count {v:?}"))),
                        })
                        .collect::<Result<_, _>>()?
                }
                "qbm" => {
                    grid.qbm = values
                        .iter()
                        .map(|v| match *v {
                            "on" => Ok(true),
                            "off" => Ok(false),
                            _ => Err(bad(format!("qbm takes on/off, found {v:?}"))),
                        })
                        .collect::<Result<_, _>>()?
                }
                other => return Err(bad(format!("unknown grid key {other:?}"))),
            }
        }
        Ok(grid)
    }

    pub fn variants(&self) -> Vec<Variant> {
        let mut out = Vec::new();
        for &source in &self.sources {
            for &queries in &self.queries {
                for &qbm in &self.qbm {
                    out.push(Variant { source, queries, qbm });
                }
            }
        }
        out
    }

    /// Every variant must be buildable from `base`.
    pub fn validate(&self, base: &TrainConfig) -> Result<(), TrainError> {
        for v in self.variants() {
            variant_config(base, v, base.seed)?.validate()?;
        }
        Ok(())
    }
}

fn variant_config(base: &TrainConfig, v: Variant, seed: u64) -> Result<TrainConfig, TrainError> {
    if v.source == QuerySource::WordsAsQueries && v.queries != base.model.max_words {
        return Err(TrainError::Grid(format!(
            "{v}: word queries need nq equal to max_words ({})",
            base.model.max_words
        )));
    }
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model.query_source = v.source;
    cfg.model.queries = v.queries;
    cfg.model.use_qbm = v.qbm;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// `(seed, final validation metrics)` in seed order.
    pub runs: Vec<(u64, Metrics)>,
}

impl AblationRow {
    pub fn mean(&self) -> Metrics {
        let n = self.runs.len() as f64;
        let mut acc = [0.0; 6];
        for (_, m) in &self.runs {
            for (a, v) in acc.iter_mut().zip(m.values()) {
                *a += v;
            }
        }
        Metrics::from_values(acc.map(|a| a / n))
    }

    /// Population standard deviation across seeds.
    pub fn spread(&self) -> Metrics {
        let n = self.runs.len() as f64;
        let mean = self.mean().values();
        let mut acc = [0.0; 6];
        for (_, m) in &self.runs {
            for ((a, v), mu) in acc.iter_mut().zip(m.values()).zip(mean) {
                *a += (v - mu) * (v - mu);
            }
        }
        Metrics::from_values(acc.map(|a| (a / n).sqrt()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

const KEY_COLUMNS: [&str; 4] = ["source", "nq", "qbm", "stat"];

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// One line per seed, then `mean` and `spread`, for every variant.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\t{}\n", KEY_COLUMNS.join("\t"), METRIC_HEADER.join("\t"));
        let mut line = |v: &Variant, stat: String, m: Metrics| {
            let values: Vec<String> = m.values().iter().map(f64::to_string).collect();
            let qbm = if v.qbm { "on" } else { "off" };
            out.push_str(&format!(
                "{}\t{}\t{qbm}\t{stat}\t{}\n",
                v.source.tag(),
                v.queries,
                values.join("\t")
            ));
        };
        for row in &self.rows {
            for (seed, m) in &row.runs {
                line(&row.variant, format!("seed={seed}"), *m);
            }
            line(&row.variant, "mean".into(), row.mean());
            line(&row.variant, "spread".into(), row.spread());
        }
        out
    }

    /// Inverse of [`AblationReport::to_tsv`]; derived lines are checked
    /// against the seed lines.
    pub fn parse_tsv(text: &str) -> Result<Self, TrainError> {
        let bad = |line: usize, m: String| TrainError::Report(format!("line {}: {m}", line + 1));
        let mut lines = text.lines().enumerate();
        let header = format!("{}\t{}", KEY_COLUMNS.join("\t"), METRIC_HEADER.join("\t"));
        match lines.next() {
            Some((_, h)) if h == header => {}
            _ => return Err(bad(0, "missing header".into())),
        }
        let mut rows: Vec<AblationRow> = Vec::new();
        let mut derived: Vec<(usize, Variant, String, Metrics)> = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(bad(i, format!("expected 10 fields, found {}", f.len())));
            }
            let source = QuerySource::from_tag(f[0]).ok_or_else(|| bad(i, format!("unknown source {:?}", f[0])))?;
            let queries = f[1].parse().map_err(|_| bad(i, format!("bad nq {:?}", f[1])))?;
            let qbm = match f[2] {
                "on" => true,
                "off" => false,
                other => return Err(bad(i, format!("bad qbm {other:?}"))),
            };
            let variant = Variant { source, queries, qbm };
            let mut values = [0.0; 6];
            for (v, s) in values.iter_mut().zip(&f[4..]) {
                *v = s.parse().map_err(|_| bad(i, format!("bad number {s:?}")))?;
            }
            let metrics = Metrics::from_values(values);
            if let Some(seed) = f[3].strip_prefix("seed=") {
                let seed = seed.parse().map_err(|_| bad(i, format!("bad seed {seed:?}")))?;
                match rows.last_mut() {
                    Some(r) if r.variant == variant => r.runs.push((seed, metrics)),
                    _ => rows.push(AblationRow {
                        variant,
                        runs: vec![(seed, metrics)],
                    }),
                }
            } else if f[3] == "mean" || f[3] == "spread" {
                derived.push((i, variant, f[3].to_string(), metrics));
            } else {
                return Err(bad(i, format!("bad stat {:?}", f[3])));
            }
        }
        let report = Self { rows };
        for (i, v, stat, m) in derived {
            let row = report
                .row(v)
                .ok_or_else(|| bad(i, format!("{stat} for {v} without seed lines")))?;
            let expect = if stat == "mean" { row.mean() } else { row.spread() };
            if expect != m {
                return Err(bad(i, format!("{stat} of {v} disagrees with its seed lines")));
            }
        }
        Ok(report)
    }
}

/// Train and evaluate every variant of `grid` once per seed. All variants
/// see the same data; the seed drives initialisation and shuffling.
/// `observe` receives each finished run.
pub fn run_ablation(
    grid: &AblationGrid,
    base: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    seeds: &[u64],
    exec: Execution,
    mut observe: impl FnMut(Variant, u64, &Metrics),
) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(
            "ablation needs at least one seed and a validation split".into(),
        ));
    }
    grid.validate(base)?;
    let mut rows = Vec::new();
    for variant in grid.variants() {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = variant_config(base, variant, seed)?;
            let (model, mut params, mut adam) = initialise(&cfg)?;
            train(
                &cfg,
                &model,
                &mut params,
                &mut adam,
                train_set,
                &[],
                exec,
                |_: &EpochRecord| {},
            )?;
            let report = evaluate(&model, &params, val_set, exec)?;
            observe(variant, seed, &report.metrics);
            runs.push((seed, report.metrics));
        }
        rows.push(AblationRow { variant, runs });
    }
    Ok(AblationReport { rows })
}
