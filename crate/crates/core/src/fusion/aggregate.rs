use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AspectScoreMatrix, FusionError};

/// Lower clamp applied to scores before geometric and harmonic means.
pub const SCORE_FLOOR: f64 = 1e-9;

/// How per-aspect results are combined into one item ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    AMean,
    GMean,
    HMean,
    Min,
    Borda,
    #[serde(rename = "rr", alias = "roundrobin", alias = "round-robin")]
    RoundRobin,
}

impl Aggregator {
    pub const ALL: [Aggregator; 6] = [
        Aggregator::AMean,
        Aggregator::GMean,
        Aggregator::HMean,
        Aggregator::Min,
        Aggregator::Borda,
        Aggregator::RoundRobin,
    ];

    pub fn is_score_based(self) -> bool {
        matches!(
            self,
            Aggregator::AMean | Aggregator::GMean | Aggregator::HMean | Aggregator::Min
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::AMean => "amean",
            Aggregator::GMean => "gmean",
            Aggregator::HMean => "hmean",
            Aggregator::Min => "min",
            Aggregator::Borda => "borda",
            Aggregator::RoundRobin => "rr",
        }
    }

    /// Column label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Aggregator::AMean => "AMean",
            Aggregator::GMean => "GMean",
            Aggregator::HMean => "HMean",
            Aggregator::Min => "Min",
            Aggregator::Borda => "Borda",
            Aggregator::RoundRobin => "R-R",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown aggregator `{0}` (expected amean, gmean, hmean, min, borda or rr)")]
pub struct ParseAggregatorError(String);

impl FromStr for Aggregator {
    type Err = ParseAggregatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "amean" => Ok(Aggregator::AMean),
            "gmean" => Ok(Aggregator::GMean),
            "hmean" => Ok(Aggregator::HMean),
            "min" => Ok(Aggregator::Min),
            "borda" => Ok(Aggregator::Borda),
            "rr" | "roundrobin" | "round-robin" | "r-r" => Ok(Aggregator::RoundRobin),
            _ => Err(ParseAggregatorError(s.to_string())),
        }
    }
}

/// Combines one item's aspect scores with a score-based aggregator.
pub fn aggregate_row(row: &[f64], method: Aggregator) -> Result<f64, FusionError> {
    if row.is_empty() {
        return Err(FusionError::EmptyMatrix);
    }
    let n = row.len() as f64;
    let value = match method {
        Aggregator::GMean | Aggregator::HMean if row.len() == 1 => row[0].max(SCORE_FLOOR),
        Aggregator::AMean => row.iter().sum::<f64>() / n,
        // Log space keeps long rows of small scores from underflowing.
        Aggregator::GMean => (row.iter().map(|s| s.max(SCORE_FLOOR).ln()).sum::<f64>() / n).exp(),
        Aggregator::HMean => n / row.iter().map(|s| 1.0 / s.max(SCORE_FLOOR)).sum::<f64>(),
        Aggregator::Min => row.iter().copied().fold(f64::INFINITY, f64::min),
        Aggregator::Borda | Aggregator::RoundRobin => {
            return Err(FusionError::NotScoreBased(method))
        }
    };
    Ok(value)
}

/// Aggregates every item column of `matrix`.
pub fn aggregate_scores(
    matrix: &AspectScoreMatrix,
    method: Aggregator,
) -> Result<BTreeMap<String, f64>, FusionError> {
    if !method.is_score_based() {
        return Err(FusionError::NotScoreBased(method));
    }
    if matrix.scores.is_empty() || matrix.item_ids.is_empty() {
        return Err(FusionError::EmptyMatrix);
    }
    matrix
        .item_ids
        .iter()
        .enumerate()
        .map(|(i, id)| Ok((id.clone(), aggregate_row(&matrix.column(i), method)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn closed_forms_on_four_and_one() {
        let row = [4.0, 1.0];
        assert!(close(aggregate_row(&row, Aggregator::AMean).unwrap(), 2.5));
        assert!(close(aggregate_row(&row, Aggregator::GMean).unwrap(), 2.0));
        assert!(close(aggregate_row(&row, Aggregator::HMean).unwrap(), 1.6));
        assert_eq!(aggregate_row(&row, Aggregator::Min).unwrap(), 1.0);
    }

    #[test]
    fn single_aspect_is_identity() {
        for s in [0.37, 2.5, 1e-3] {
            for m in &Aggregator::ALL[..4] {
                assert!(close(aggregate_row(&[s], *m).unwrap(), s), "{m}");
            }
        }
    }

    #[test]
    fn non_positive_scores_are_clamped() {
        let g = aggregate_row(&[0.9, -0.2], Aggregator::GMean).unwrap();
        assert!(close(g, (0.9f64 * 1e-9).sqrt()));
        assert!((g - 3e-5).abs() < 1e-6);
        let h = aggregate_row(&[0.9, 0.0], Aggregator::HMean).unwrap();
        assert!(h < 3e-9);
        assert_eq!(aggregate_row(&[0.9, -0.2], Aggregator::Min).unwrap(), -0.2);
    }

    #[test]
    fn rank_methods_and_empty_rows_are_rejected() {
        assert!(matches!(
            aggregate_row(&[1.0], Aggregator::Borda),
            Err(FusionError::NotScoreBased(Aggregator::Borda))
        ));
        assert!(matches!(
            aggregate_row(&[], Aggregator::AMean),
            Err(FusionError::EmptyMatrix)
        ));
        let empty = AspectScoreMatrix {
            aspect_ids: vec![],
            item_ids: vec![],
            scores: vec![],
        };
        assert!(matches!(
            aggregate_scores(&empty, Aggregator::Min),
            Err(FusionError::EmptyMatrix)
        ));
    }

    #[test]
    fn matrix_columns_are_aggregated_per_item() {
        let m = AspectScoreMatrix {
            aspect_ids: vec!["a0".into(), "a1".into()],
            item_ids: vec!["x".into(), "y".into()],
            scores: vec![vec![4.0, 0.5], vec![1.0, 0.5]],
        };
        let out = aggregate_scores(&m, Aggregator::AMean).unwrap();
        assert_eq!(out["x"], 2.5);
        assert_eq!(out["y"], 0.5);
    }

    #[test]
    fn parse_and_display_round_trip() {
        for m in Aggregator::ALL {
            assert_eq!(m.to_string().parse::<Aggregator>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Aggregator>(&json).unwrap(), m);
        }
        assert_eq!(
            "Round-Robin".parse::<Aggregator>().unwrap(),
            Aggregator::RoundRobin
        );
        assert!("median".parse::<Aggregator>().is_err());
    }

    proptest! {
        #[test]
        fn mean_chain_holds(row in prop::collection::vec(1e-3f64..1e3, 1..8)) {
            let a = aggregate_row(&row, Aggregator::AMean).unwrap();
            let g = aggregate_row(&row, Aggregator::GMean).unwrap();
            let h = aggregate_row(&row, Aggregator::HMean).unwrap();
            let m = aggregate_row(&row, Aggregator::Min).unwrap();
            let tol = 1e-12 * a;
            prop_assert!(h <= g + tol && g <= a + tol);
            prop_assert!(m <= h + tol);
        }

        #[test]
        fn constant_rows_collapse_the_chain(c in 1e-3f64..1e3, n in 1usize..8) {
            let row = vec![c; n];
            for m in &Aggregator::ALL[..4] {
                prop_assert!(close(aggregate_row(&row, *m).unwrap(), c));
            }
        }
    }
}
