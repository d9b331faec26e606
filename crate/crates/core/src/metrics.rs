//! Correlation metrics between subjective and predicted quality scores,
//! plus the per-dataset method ranking used for comparison tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subjective scores (MOS/DMOS) paired with model predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedScores {
    subjective: Vec<f64>,
    predicted: Vec<f64>,
}

impl PairedScores {
    pub fn new(subjective: Vec<f64>, predicted: Vec<f64>) -> Result<Self> {
        if subjective.len() != predicted.len() {
            return Err(Error::shape(format!(
                "paired scores differ in length: {} vs {}",
                subjective.len(),
                predicted.len()
            )));
        }
        if subjective.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "correlation needs at least 2 pairs, got {}",
                subjective.len()
            )));
        }
        if subjective.iter().chain(&predicted).any(|v| !v.is_finite()) {
            return Err(Error::OutOfRange("paired scores must be finite".into()));
        }
        Ok(Self { subjective, predicted })
    }

    pub fn subjective(&self) -> &[f64] {
        &self.subjective
    }

    pub fn predicted(&self) -> &[f64] {
        &self.predicted
    }

    pub fn len(&self) -> usize {
        self.subjective.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjective.is_empty()
    }
}

/// Fractional ranks (1-based); tied values receive the mean of the ranks they span.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the score vectors has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation: Pearson correlation of the fractional ranks.
pub fn srcc(pairs: &PairedScores) -> Result<f64> {
    let rs = fractional_ranks(&pairs.subjective);
    let rp = fractional_ranks(&pairs.predicted);
    pearson(&rs, &rp)
}

/// Closed form `1 - 6 Σd² / (n(n² - 1))`. Exact only when neither vector has ties.
pub fn srcc_closed_form(pairs: &PairedScores) -> Result<f64> {
    let rs = fractional_ranks(&pairs.subjective);
    let rp = fractional_ranks(&pairs.predicted);
    let n = pairs.len() as f64;
    let d2: f64 = rs.iter().zip(&rp).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - 6.0 * d2 / (n * (n * n - 1.0)))
}

/// Pearson linear correlation of the raw values.
pub fn plcc(pairs: &PairedScores) -> Result<f64> {
    pearson(&pairs.subjective, &pairs.predicted)
}

/// SRCC and PLCC for one dataset column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub srcc: f64,
    pub plcc: f64,
}

impl Correlation {
    pub fn evaluate(pairs: &PairedScores) -> Result<Self> {
        Ok(Self { srcc: srcc(pairs)?, plcc: plcc(pairs)? })
    }
}

/// method → dataset → (SRCC, PLCC); a missing dataset entry means "not reported".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MethodResultTable {
    pub rows: BTreeMap<String, BTreeMap<String, Correlation>>,
}

impl MethodResultTable {
    pub fn insert(&mut self, method: &str, dataset: &str, srcc: f64, plcc: f64) -> Result<()> {
        for v in [srcc, plcc] {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange(format!(
                    "{method}/{dataset}: correlation {v} outside [-1, 1]"
                )));
            }
        }
        self.rows
            .entry(method.to_string())
            .or_default()
            .insert(dataset.to_string(), Correlation { srcc, plcc });
        Ok(())
    }

    /// Reads `method,dataset,srcc,plcc` rows. Empty or `-` values are skipped.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut table = Self::default();
        for record in rdr.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let (method, dataset) = (field(0), field(1));
            let parse = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() || s == "-" {
                    return Ok(None);
                }
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::config(format!("{method}/{dataset}: bad value {s:?}")))
            };
            if let (Some(s), Some(p)) = (parse(field(2))?, parse(field(3))?) {
                table.insert(method, dataset, s, p)?;
            }
        }
        Ok(table)
    }

    pub fn datasets(&self) -> Vec<String> {
        let mut names: Vec<String> =
            self.rows.values().flat_map(|cols| cols.keys().cloned()).collect();
        names.sort();
        names.dedup();
        names
    }
}

/// Per-column ranks and their averages for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRank {
    pub method: String,
    pub srcc_ranks: BTreeMap<String, usize>,
    pub plcc_ranks: BTreeMap<String, usize>,
    pub avg_srcc_rank: f64,
    pub avg_plcc_rank: f64,
    /// Competition rank of `avg_srcc_rank` among all methods (lower average is better).
    pub overall_srcc: usize,
    pub overall_plcc: usize,
}

/// Competition ("min") ranks: ties share the best rank, the next rank skips.
fn competition_ranks(values: &[f64], higher_is_better: bool) -> Vec<usize> {
    values
        .iter()
        .map(|&v| {
            1 + values
                .iter()
                .filter(|&&o| if higher_is_better { o > v } else { o < v })
                .count()
        })
        .collect()
}

/// Ranks every method within each dataset column (1 = largest correlation) and
/// averages over the columns the method reports.
pub fn rank_methods(table: &MethodResultTable) -> Result<Vec<MethodRank>> {
    if table.rows.is_empty() {
        return Err(Error::Empty("method result table has no rows".into()));
    }
    let methods: Vec<&String> = table.rows.keys().collect();
    let mut srcc_ranks: BTreeMap<&String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut plcc_ranks: BTreeMap<&String, BTreeMap<String, usize>> = BTreeMap::new();
    for dataset in table.datasets() {
        let present: Vec<(&String, Correlation)> = methods
            .iter()
            .filter_map(|m| table.rows[*m].get(&dataset).map(|c| (*m, *c)))
            .collect();
        let s: Vec<f64> = present.iter().map(|(_, c)| c.srcc).collect();
        let p: Vec<f64> = present.iter().map(|(_, c)| c.plcc).collect();
        let rs = competition_ranks(&s, true);
        let rp = competition_ranks(&p, true);
        for (i, (m, _)) in present.iter().enumerate() {
            srcc_ranks.entry(m).or_default().insert(dataset.clone(), rs[i]);
            plcc_ranks.entry(m).or_default().insert(dataset.clone(), rp[i]);
        }
    }
    let mean = |ranks: &BTreeMap<String, usize>| {
        ranks.values().sum::<usize>() as f64 / ranks.len().max(1) as f64
    };
    let mut out: Vec<MethodRank> = methods
        .iter()
        .map(|m| {
            let sr = srcc_ranks.remove(*m).unwrap_or_default();
            let pr = plcc_ranks.remove(*m).unwrap_or_default();
            MethodRank {
                method: (*m).clone(),
                avg_srcc_rank: mean(&sr),
                avg_plcc_rank: mean(&pr),
                srcc_ranks: sr,
                plcc_ranks: pr,
                overall_srcc: 0,
                overall_plcc: 0,
            }
        })
        .collect();
    let avg_s: Vec<f64> = out.iter().map(|r| r.avg_srcc_rank).collect();
    let avg_p: Vec<f64> = out.iter().map(|r| r.avg_plcc_rank).collect();
    for (r, (os, op)) in out
        .iter_mut()
        .zip(competition_ranks(&avg_s, false).into_iter().zip(competition_ranks(&avg_p, false)))
    {
        r.overall_srcc = os;
        r.overall_plcc = op;
    }
    Ok(out)
}

/// Lower median: for an even count, the smaller of the two middle values.
pub fn lower_median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("median of no values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[(sorted.len() - 1) / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pairs(a: &[f64], b: &[f64]) -> PairedScores {
        PairedScores::new(a.to_vec(), b.to_vec()).unwrap()
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 20.0, 5.0]), vec![2.0, 3.5, 3.5, 1.0]);
    }

    #[test]
    fn srcc_identity_and_reverse() {
        let s = [1.0, 4.0, 2.0, 8.0, 5.0];
        assert_abs_diff_eq!(srcc(&pairs(&s, &s)).unwrap(), 1.0, epsilon = 1e-15);
        let rev: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(srcc(&pairs(&s, &rev)).unwrap(), -1.0, epsilon = 1e-15);
    }

    #[test]
    fn srcc_hand_evaluated_example() {
        // ranks (1,2,3,4) vs (2,1,4,3): Σd² = 4 → 1 - 24/60
        let p = pairs(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]);
        assert_abs_diff_eq!(srcc_closed_form(&p).unwrap(), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(srcc(&p).unwrap(), 0.6, epsilon = 1e-12);
    }

    #[test]
    fn plcc_examples() {
        let s = [1.0, 2.0, 3.0];
        let aff: Vec<f64> = s.iter().map(|v| 2.0 * v + 3.0).collect();
        assert_abs_diff_eq!(plcc(&pairs(&s, &aff)).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(plcc(&pairs(&s, &neg)).unwrap(), -1.0, epsilon = 1e-15);
        // Σ(q−q̄)(q̂−q̂̄) = 3, Σ(q−q̄)² = 2, Σ(q̂−q̂̄)² = 14/3 → 3/√(28/3)
        let expected = 3.0 / (28.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(plcc(&pairs(&s, &[1.0, 2.0, 4.0])).unwrap(), expected, epsilon = 1e-14);
        assert_abs_diff_eq!(expected, 0.981_980_506_061_965_7, epsilon = 1e-15);
    }

    #[test]
    fn constant_vector_is_undefined() {
        let p = pairs(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]);
        assert!(matches!(srcc(&p), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(plcc(&p), Err(Error::UndefinedCorrelation(_))));
    }

    #[test]
    fn paired_scores_validation() {
        assert!(PairedScores::new(vec![1.0], vec![1.0]).is_err());
        assert!(PairedScores::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(PairedScores::new(vec![1.0, f64::NAN], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn competition_ranking_shares_best_rank() {
        assert_eq!(competition_ranks(&[0.959, 0.955, 0.959, 0.951], true), vec![1, 3, 1, 4]);
    }

    #[test]
    fn best_everywhere_ranks_one() {
        let mut t = MethodResultTable::default();
        t.insert("a", "x", 0.9, 0.9).unwrap();
        t.insert("a", "y", 0.8, 0.8).unwrap();
        t.insert("b", "x", 0.5, 0.5).unwrap();
        t.insert("b", "y", 0.4, 0.4).unwrap();
        let ranks = rank_methods(&t).unwrap();
        let a = ranks.iter().find(|r| r.method == "a").unwrap();
        assert_eq!(a.avg_srcc_rank, 1.0);
        assert_eq!(a.avg_plcc_rank, 1.0);
        assert_eq!(a.overall_srcc, 1);
    }

    #[test]
    fn empty_table_is_an_error() {
        assert!(rank_methods(&MethodResultTable::default()).is_err());
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lower_median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.0);
        assert_eq!(lower_median(&[0.7]).unwrap(), 0.7);
    }
}
