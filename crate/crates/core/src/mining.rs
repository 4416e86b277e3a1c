//! Rareness and hardness scores and the percentile subsets built from them.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::flow::FlowModel;

/// Log-densities of every example under the history and course flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub c_x: Vec<f64>,
    pub c_z: Vec<f64>,
    pub c_yx: Vec<f64>,
    pub lambda: f64,
}

impl ScoreTable {
    /// Builds a table from the two rareness columns.
    pub fn from_columns(c_x: Vec<f64>, c_z: Vec<f64>, lambda: f64) -> Result<Self> {
        if c_x.len() != c_z.len() {
            return Err(Error::Config(format!("{} history scores vs {} course scores", c_x.len(), c_z.len())));
        }
        if let Some(i) = c_x.iter().chain(&c_z).position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite score at position {i}")));
        }
        let c_yx = hardness(&c_x, &c_z, lambda);
        Ok(ScoreTable { c_x, c_z, c_yx, lambda })
    }

    pub fn len(&self) -> usize {
        self.c_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_x.is_empty()
    }

    /// Same rareness scores, hardness recomputed for another `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> ScoreTable {
        ScoreTable { c_x: self.c_x.clone(), c_z: self.c_z.clone(), c_yx: hardness(&self.c_x, &self.c_z, lambda), lambda }
    }
}

pub fn hardness(c_x: &[f64], c_z: &[f64], lambda: f64) -> Vec<f64> {
    c_x.iter().zip(c_z).map(|(x, z)| z - lambda * x).collect()
}

/// Scores index-aligned feature sets under the two trained flows.
pub fn score_examples(
    model_x: &FlowModel,
    model_z: &FlowModel,
    features_x: &[FeatureVector],
    features_z: &[FeatureVector],
    lambda: f64,
) -> Result<ScoreTable> {
    if features_x.len() != features_z.len() {
        return Err(Error::Config(format!(
            "{} history feature vectors vs {} course feature vectors",
            features_x.len(),
            features_z.len()
        )));
    }
    let c_x = score_column(model_x, features_x, "history")?;
    let c_z = score_column(model_z, features_z, "course")?;
    ScoreTable::from_columns(c_x, c_z, lambda)
}

fn score_column(model: &FlowModel, features: &[FeatureVector], what: &str) -> Result<Vec<f64>> {
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            if f.dim() != model.dim {
                return Err(Error::Config(format!(
                    "{what} example {i}: feature dimension {} but model expects {}",
                    f.dim(),
                    model.dim
                )));
            }
            model.score(f)
        })
        .collect()
}

/// Size of an `r`-percentile subset of `n` examples.
pub fn subset_size(n: usize, r: f64) -> Result<usize> {
    check_ratio(r)?;
    // absorbs products such as 0.29 * 100 = 28.999...
    Ok(((r * n as f64) + 1e-9).floor().min(n as f64) as usize)
}

pub fn check_ratio(r: f64) -> Result<()> {
    if r > 0.0 && r <= 1.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("mining ratio must lie in (0, 1], got {r}")))
    }
}

/// Positions ordered by ascending score, ties by ascending position.
pub fn ascending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// The `floor(r N)` lowest scores. Returns the threshold (the next score up,
/// `None` when everything is selected) and the sorted indices.
pub fn mine(scores: &[f64], r: f64) -> Result<(Option<f64>, Vec<usize>)> {
    if scores.is_empty() {
        return Err(Error::Argument("cannot mine an empty score column".into()));
    }
    let k = subset_size(scores.len(), r)?;
    let order = ascending_order(scores);
    let delta = order.get(k).map(|&i| scores[i]);
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok((delta, picked))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSubsets {
    pub r: f64,
    pub lambda: f64,
    pub delta_x: Option<f64>,
    pub delta_z: Option<f64>,
    pub delta_yx: Option<f64>,
    pub d_x: Vec<usize>,
    pub d_z: Vec<usize>,
    pub d_yx: Vec<usize>,
}

pub fn mine_all(table: &ScoreTable, r: f64) -> Result<MinedSubsets> {
    let (delta_x, d_x) = mine(&table.c_x, r)?;
    let (delta_z, d_z) = mine(&table.c_z, r)?;
    let (delta_yx, d_yx) = mine(&table.c_yx, r)?;
    Ok(MinedSubsets { r, lambda: table.lambda, delta_x, delta_z, delta_yx, d_x, d_z, d_yx })
}

fn membership(n: usize, set: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in set {
        m[i] = true;
    }
    m
}

/// Per-example scores with subset membership flags.
pub fn write_scores_csv<W: Write>(out: W, table: &ScoreTable, subsets: Option<&MinedSubsets>) -> Result<()> {
    let n = table.len();
    let flags = subsets.map(|s| (membership(n, &s.d_x), membership(n, &s.d_z), membership(n, &s.d_yx)));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["example_index", "C_x", "C_z", "C_yx", "in_dx", "in_dz", "in_dyx"])?;
    for i in 0..n {
        let (a, b, c) = match &flags {
            Some((a, b, c)) => (a[i] as u8, b[i] as u8, c[i] as u8),
            None => (0, 0, 0),
        };
        w.write_record(&[
            i.to_string(),
            table.c_x[i].to_string(),
            table.c_z[i].to_string(),
            table.c_yx[i].to_string(),
            a.to_string(),
            b.to_string(),
            c.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<scores>", e))?;
    Ok(())
}

#[derive(Deserialize)]
struct ScoreRow {
    example_index: usize,
    #[serde(rename = "C_x")]
    c_x: f64,
    #[serde(rename = "C_z")]
    c_z: f64,
}

/// Reads the rareness columns back; hardness is recomputed for `lambda`.
pub fn read_scores_csv<R: std::io::Read>(input: R, lambda: f64) -> Result<ScoreTable> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut c_x = Vec::new();
    let mut c_z = Vec::new();
    for (i, row) in r.deserialize::<ScoreRow>().enumerate() {
        let row = row?;
        if row.example_index != i {
            return Err(Error::Schema(format!("score row {i} has example_index {}", row.example_index)));
        }
        c_x.push(row.c_x);
        c_z.push(row.c_z);
    }
    ScoreTable::from_columns(c_x, c_z, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedSummary {
    pub r: f64,
    pub lambda: f64,
    pub delta_x: Option<f64>,
    pub delta_z: Option<f64>,
    pub delta_yx: Option<f64>,
    pub size: usize,
    pub n: usize,
}

impl MinedSubsets {
    pub fn summary(&self, n: usize) -> MinedSummary {
        MinedSummary {
            r: self.r,
            lambda: self.lambda,
            delta_x: self.delta_x,
            delta_z: self.delta_z,
            delta_yx: self.delta_yx,
            size: self.d_yx.len(),
            n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Scope;
    use crate::flow::{FlowConfig, LN_2PI};

    fn brute_force(scores: &[f64], k: usize) -> Vec<usize> {
        // selection by repeated minimum
        let mut taken = vec![false; scores.len()];
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..scores.len() {
                if !taken[i] && best.is_none_or(|b| scores[i] < scores[b]) {
                    best = Some(i);
                }
            }
            taken[best.unwrap()] = true;
            out.push(best.unwrap());
        }
        out.sort_unstable();
        out
    }

    #[test]
    fn mine_small_example() {
        let (delta, idx) = mine(&[5.0, 1.0, 4.0, 2.0, 3.0], 0.4).unwrap();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(delta, Some(3.0));
        assert_eq!(idx, brute_force(&[5.0, 1.0, 4.0, 2.0, 3.0], 2));
    }

    #[test]
    fn full_ratio_selects_everything() {
        let (delta, idx) = mine(&[2.0, 1.0, 3.0], 1.0).unwrap();
        assert_eq!(idx, vec![0, 1, 2]);
        assert_eq!(delta, None);
    }

    #[test]
    fn cardinality_for_2000() {
        let scores: Vec<f64> = (0..2000).map(|i| ((i * 7919) % 2000) as f64).collect();
        assert_eq!(mine(&scores, 0.05).unwrap().1.len(), 100);
        assert_eq!(subset_size(100, 0.29).unwrap(), 29);
        assert_eq!(subset_size(2000, 0.15).unwrap(), 300);
    }

    #[test]
    fn bad_ratios() {
        for r in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(matches!(mine(&[1.0], r), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn ties_pick_first_indices() {
        let t = ScoreTable::from_columns(vec![1.0; 10], vec![1.0; 10], 0.5).unwrap();
        let m = mine_all(&t, 0.3).unwrap();
        assert_eq!(m.d_x, vec![0, 1, 2]);
        assert_eq!(m.d_z, vec![0, 1, 2]);
        assert_eq!(m.d_yx, vec![0, 1, 2]);
    }

    #[test]
    fn hardness_arithmetic() {
        let t = ScoreTable::from_columns(vec![-2.0], vec![-10.0], 0.5).unwrap();
        assert_eq!(t.c_yx, vec![-9.0]);
        let t = ScoreTable::from_columns(vec![-2.0, 3.0], vec![-10.0, 1.0], 0.0).unwrap();
        assert_eq!(t.c_yx, t.c_z);
        assert_eq!(mine_all(&t, 0.5).unwrap().d_yx, mine_all(&t, 0.5).unwrap().d_z);
    }

    #[test]
    fn identity_flow_zero_vectors() {
        let m = FlowModel::identity(130, &FlowConfig::default()).unwrap();
        let f = vec![FeatureVector { scope: Scope::X, values: vec![0.0; 130], mask: vec![true; 130] }; 3];
        let t = score_examples(&m, &m, &f, &f, 0.5).unwrap();
        for s in t.c_x.iter().chain(&t.c_z) {
            assert!((s + 65.0 * LN_2PI).abs() < 1e-9);
            assert!((s + 119.462).abs() < 1e-3);
        }
        let short = vec![FeatureVector { scope: Scope::X, values: vec![0.0; 26], mask: vec![true; 26] }; 3];
        assert!(matches!(score_examples(&m, &m, &short, &f, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let t = ScoreTable::from_columns(vec![-1.5, -2.25, 0.125], vec![-3.0, -1.0, -7.5], 0.5).unwrap();
        let m = mine_all(&t, 0.34).unwrap();
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &t, Some(&m)).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("example_index,C_x,C_z,C_yx,in_dx,in_dz,in_dyx\n"));
        let back = read_scores_csv(buf.as_slice(), 0.5).unwrap();
        assert_eq!(back, t);
    }
}
