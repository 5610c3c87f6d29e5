//! Toy ablations: one trained model per (variant, seed), medians across seeds,
//! deltas against the first variant of the axis.

use std::fmt::Write as _;

use super::{evaluate, generate_dataset, median, mine, recipe, train_from_scratch, Evaluation, Split};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricRow;
use crate::model::Trainer;
use crate::textspace::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    SaaLayers,
    Lambda,
    Queries,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "saa-layers" => Ok(AblationAxis::SaaLayers),
            "lambda" => Ok(AblationAxis::Lambda),
            "queries" => Ok(AblationAxis::Queries),
            _ => Err(Error::InvalidArgument(format!(
                "unknown ablation axis `{s}` (components|saa-layers|lambda|queries)"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::SaaLayers => "saa-layers",
            AblationAxis::Lambda => "lambda",
            AblationAxis::Queries => "queries",
        }
    }

    /// The grid of the axis, baseline first.
    pub fn variants(self) -> Vec<Variant> {
        let v = |name: &str, sets: &[(&str, String)]| Variant {
            name: name.to_string(),
            overrides: sets.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        };
        match self {
            AblationAxis::Components => vec![
                v("A", &[("prompt.queries", "single".into()), ("saa.enabled", "false".into())]),
                v("A+B", &[("prompt.queries", "prompts".into()), ("saa.enabled", "false".into())]),
                v("A+B+C", &[("prompt.queries", "prompts".into()), ("saa.enabled", "true".into())]),
            ],
            AblationAxis::SaaLayers => ["first", "last", "first,last"]
                .iter()
                .map(|l| {
                    let name = if *l == "first,last" { "both" } else { l };
                    v(name, &[("saa.enabled", "true".into()), ("saa.layers", l.to_string())])
                })
                .collect(),
            AblationAxis::Lambda => ["1", "0.1", "0.01"]
                .iter()
                .map(|l| v(&format!("lambda={l}"), &[("saa.enabled", "true".into()), ("saa.lambda", l.to_string())]))
                .collect(),
            AblationAxis::Queries => [1usize, 25, 50, 75]
                .iter()
                .map(|&n| {
                    v(
                        &format!("queries={n}"),
                        &[
                            ("mine.n", n.to_string()),
                            ("mine.m", n.max(50).to_string()),
                            ("mine.binning", "equal-count".into()),
                        ],
                    )
                })
                .collect(),
        }
    }
}

/// A named set of config overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

impl Variant {
    pub fn config(&self, base: &RunConfig, seed: u64) -> Result<RunConfig> {
        let mut cfg = base.clone();
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.set("seed", &seed.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// One row per seed, in seed order.
    pub per_seed: Vec<MetricRow>,
    pub median: MetricRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn median_row(rows: &[MetricRow]) -> MetricRow {
    let col = |i: usize| median(&rows.iter().map(|r| r.values()[i]).collect::<Vec<_>>());
    MetricRow { auprc: col(0), fpr95: col(1), auiou: col(2), iou: col(3), mean_f1: col(4) }
}

impl AblationTable {
    pub fn baseline(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == name)
    }

    /// 1-based rank of each row for metric column `col`, best first; ties share the better rank.
    pub fn ranks(&self, col: usize) -> Vec<usize> {
        let higher = MetricRow::HIGHER_IS_BETTER[col];
        let vals: Vec<f64> = self.rows.iter().map(|r| r.median.values()[col]).collect();
        vals.iter()
            .map(|&v| 1 + vals.iter().filter(|&&o| if higher { o > v } else { o < v }).count())
            .collect()
    }

    /// Medians in percent, deltas against the baseline and per-metric ranks.
    pub fn render(&self, hash: &str) -> String {
        let mut s = format!("# config_hash={hash}\n# axis={} seeds={:?} (medians, %)\n", self.axis.name(), self.seeds);
        let name_w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(4).max(7);
        let _ = write!(s, "{:<name_w$}", "variant");
        for h in MetricRow::HEADERS {
            let _ = write!(s, " {h:>8} {:>7} {:>4}", "delta", "rank");
        }
        s.push('\n');
        let base = self.baseline().median.values();
        let ranks: Vec<Vec<usize>> = (0..5).map(|c| self.ranks(c)).collect();
        for (i, r) in self.rows.iter().enumerate() {
            let _ = write!(s, "{:<name_w$}", r.variant);
            for (c, v) in r.median.values().iter().enumerate() {
                let _ = write!(s, " {:>8.2} {:>+7.2} {:>4}", 100.0 * v, 100.0 * (v - base[c]), ranks[c][i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self, hash: &str) -> String {
        let mut s = format!("# config_hash={hash}\nvariant,seed,");
        s.push_str(&MetricRow::HEADERS.join(","));
        s.push('\n');
        for r in &self.rows {
            for (seed, m) in self.seeds.iter().map(u64::to_string).chain(["median".to_string()]).zip(r.per_seed.iter().chain([&r.median])) {
                let vals: Vec<String> = m.values().iter().map(f64::to_string).collect();
                let _ = writeln!(s, "{},{seed},{}", r.variant, vals.join(","));
            }
        }
        s
    }
}

/// Trains and evaluates every variant of `axis` for every seed. The scene sets
/// come from the base config and are shared by all runs. `on_run` sees each
/// finished run.
pub fn ablate(
    base: &RunConfig,
    corpus: &Corpus,
    axis: AblationAxis,
    seeds: &[u64],
    mut on_run: impl FnMut(&Variant, u64, &Trainer, &Evaluation) -> Result<()>,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let train = generate_dataset(base, &recipe(base, Split::Train), base.data.train_n)?;
    let eval = generate_dataset(base, &recipe(base, Split::Eval), base.data.eval_n)?;
    let mut rows = Vec::new();
    for variant in axis.variants() {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = variant.config(base, seed)?;
            let mined = mine(&cfg, corpus)?;
            let (trainer, _) = train_from_scratch(&cfg, corpus, &mined, &train.scenes)?;
            let ev = evaluate(&trainer.model, &eval, &cfg, "eval")?;
            on_run(&variant, seed, &trainer, &ev)?;
            per_seed.push(ev.row);
        }
        rows.push(AblationRow { variant: variant.name.clone(), median: median_row(&per_seed), per_seed });
    }
    Ok(AblationTable { axis, seeds: seeds.to_vec(), rows })
}
