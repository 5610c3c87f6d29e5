use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::space::EmbeddingSpace;
use crate::diffcore::kernels::dot;
use crate::error::{Error, Result};

pub const DEFAULT_FILTER_QUANTILE: f64 = 0.05;

/// Mined outlier labels, ascending by similarity to the ID set.
#[derive(Clone, Debug, PartialEq)]
pub struct OODLabelSet {
    pub labels: Vec<String>,
    /// Max cosine similarity of each label to any ID label.
    pub similarities: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

impl OODLabelSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("embedding widths {} and {} differ", a.len(), b.len())));
    }
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        return Err(Error::InvalidArgument("zero embedding".into()));
    }
    Ok(dot(a, b) / n)
}

/// Candidate positions in ascending similarity after dropping the
/// `ceil(quantile·n)` least similar; ties keep input order.
pub fn order_statistic_selection(similarities: &[f64], m: usize, quantile: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&quantile) {
        return Err(Error::InvalidArgument(format!("filter quantile {quantile} outside [0,1)")));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    let n = similarities.len();
    let cut = (quantile * n as f64).ceil() as usize;
    let available = n.saturating_sub(cut);
    if available < m {
        return Err(Error::Capacity(format!(
            "asked for M = {m} labels but only {available} candidates remain \
             ({n} after removing ID labels, {cut} filtered as outliers)"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| similarities[a].total_cmp(&similarities[b]));
    Ok(order[cut..cut + m].to_vec())
}

/// Selects `m` outlier labels from explicit embeddings. Candidates named like an
/// ID label (or repeated) are dropped before scoring.
pub fn neg_mine_embeddings(
    id: &[(String, Vec<f64>)],
    candidates: &[(String, Vec<f64>)],
    m: usize,
    quantile: f64,
) -> Result<OODLabelSet> {
    if id.is_empty() {
        return Err(Error::InvalidArgument("no ID labels".into()));
    }
    let id_names: HashSet<&str> = id.iter().map(|(n, _)| n.as_str()).collect();
    let mut seen = HashSet::new();
    let pool: Vec<&(String, Vec<f64>)> = candidates
        .iter()
        .filter(|(n, _)| !id_names.contains(n.as_str()) && seen.insert(n.as_str()))
        .collect();
    let sims = pool
        .iter()
        .map(|(_, e)| {
            id.iter()
                .map(|(_, x)| cosine(e, x))
                .try_fold(f64::NEG_INFINITY, |acc, s| s.map(|s| acc.max(s)))
        })
        .collect::<Result<Vec<f64>>>()?;
    let chosen = order_statistic_selection(&sims, m, quantile)?;
    Ok(OODLabelSet {
        labels: chosen.iter().map(|&i| pool[i].0.clone()).collect(),
        similarities: chosen.iter().map(|&i| sims[i]).collect(),
        embeddings: chosen.iter().map(|&i| pool[i].1.clone()).collect(),
    })
}

/// Mines against the frozen text encoder.
pub fn neg_mine(
    space: &EmbeddingSpace,
    id_labels: &[&str],
    corpus: &[&str],
    m: usize,
    quantile: f64,
) -> Result<OODLabelSet> {
    let embed = |tokens: &[&str]| -> Result<Vec<(String, Vec<f64>)>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let t = space.encode_many(tokens, true)?;
        Ok(tokens.iter().enumerate().map(|(i, s)| (s.to_string(), t.row(i).to_vec())).collect())
    };
    let ids: HashSet<&str> = id_labels.iter().copied().collect();
    let rest: Vec<&str> = corpus.iter().copied().filter(|t| !ids.contains(t)).collect();
    neg_mine_embeddings(&embed(id_labels)?, &embed(&rest)?, m, quantile)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Binning {
    /// Equal-width similarity bins; empty bins vanish, so fewer groups may result.
    #[default]
    EqualWidth,
    /// Contiguous runs of near-equal size in similarity order; always `n` groups.
    EqualCount,
}

impl std::str::FromStr for Binning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal-width" => Ok(Binning::EqualWidth),
            "equal-count" => Ok(Binning::EqualCount),
            _ => Err(Error::Config(format!("unknown binning `{s}` (equal-width|equal-count)"))),
        }
    }
}

/// Splits label positions into distance bands, nearest band last.
pub fn group_by_distance(ood: &OODLabelSet, n: usize, binning: Binning) -> Result<Vec<Vec<usize>>> {
    let len = ood.len();
    if n == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if n > len {
        return Err(Error::InvalidArgument(format!("N = {n} groups for {len} labels")));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.sort_by(|&a, &b| ood.similarities[a].total_cmp(&ood.similarities[b]));
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n];
    match binning {
        Binning::EqualWidth => {
            let lo = ood.similarities[order[0]];
            let hi = ood.similarities[order[len - 1]];
            for &i in &order {
                let b = if hi > lo {
                    (((ood.similarities[i] - lo) / (hi - lo)) * n as f64).floor() as usize
                } else {
                    0
                };
                bins[b.min(n - 1)].push(i);
            }
        }
        Binning::EqualCount => {
            let (base, extra) = (len / n, len % n);
            let mut it = order.into_iter();
            for (b, bin) in bins.iter_mut().enumerate() {
                bin.extend(it.by_ref().take(base + usize::from(b < extra)));
            }
        }
    }
    bins.retain(|b| !b.is_empty());
    Ok(bins)
}

/// Mean of member rows, renormalized.
pub fn group_mean(ood: &OODLabelSet, members: &[usize]) -> Result<Vec<f64>> {
    let d = ood.embeddings.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for &i in members {
        for (a, b) in m.iter_mut().zip(&ood.embeddings[i]) {
            *a += b;
        }
    }
    let n = dot(&m, &m).sqrt();
    if n == 0.0 {
        return Err(Error::InvalidState("group members cancel to a zero mean".into()));
    }
    Ok(m.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(v: &[(&str, [f64; 2])]) -> Vec<(String, Vec<f64>)> {
        v.iter().map(|(n, e)| (n.to_string(), e.to_vec())).collect()
    }

    #[test]
    fn three_candidate_example() {
        let id = named(&[("road", [1.0, 0.0])]);
        let cands = named(&[("near", [1.0, 1e-3]), ("ortho", [0.0, 1.0]), ("anti", [-1.0, 0.0])]);
        let got = neg_mine_embeddings(&id, &cands, 1, 0.05).unwrap();
        assert_eq!(got.labels, vec!["ortho"]);
        assert_eq!(got.similarities, vec![0.0]);
    }

    #[test]
    fn exhaustive_selection_and_id_removal() {
        let id = named(&[("road", [1.0, 0.0])]);
        let cands = named(&[("a", [0.3, 1.0]), ("road", [1.0, 0.0]), ("b", [-1.0, 0.2]), ("c", [0.9, 0.1])]);
        let got = neg_mine_embeddings(&id, &cands, 2, 0.05).unwrap();
        assert!(!got.labels.iter().any(|l| l == "road"));
        assert_eq!(got.labels, vec!["a", "c"]);
        assert!(got.similarities.windows(2).all(|w| w[0] <= w[1]));
        let err = neg_mine_embeddings(&id, &cands, 3, 0.05).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Capacity(_)) && msg.contains('3') && msg.contains('2'), "{msg}");
    }

    fn set(sims: &[f64]) -> OODLabelSet {
        OODLabelSet {
            labels: (0..sims.len()).map(|i| format!("l{i}")).collect(),
            similarities: sims.to_vec(),
            embeddings: (0..sims.len()).map(|i| vec![1.0, i as f64]).collect(),
        }
    }

    #[test]
    fn grouping_examples() {
        let one = group_by_distance(&set(&[0.1, 0.2, 0.4]), 1, Binning::EqualWidth).unwrap();
        assert_eq!(one, vec![vec![0, 1, 2]]);
        let two = group_by_distance(&set(&[0.0, 1.0]), 2, Binning::EqualWidth).unwrap();
        assert_eq!(two, vec![vec![0], vec![1]]);
        let six = group_by_distance(&set(&[0.0, 0.1, 0.2, 0.8, 0.9, 1.0]), 2, Binning::EqualWidth).unwrap();
        assert_eq!(six, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert!(matches!(group_by_distance(&set(&[0.0]), 2, Binning::EqualWidth), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn empty_bins_vanish_but_equal_count_is_exact() {
        let s = set(&[0.0, 0.01, 0.02, 1.0]);
        assert_eq!(group_by_distance(&s, 3, Binning::EqualWidth).unwrap().len(), 2);
        let g = group_by_distance(&s, 3, Binning::EqualCount).unwrap();
        assert_eq!(g, vec![vec![0, 1], vec![2], vec![3]]);
    }
}
