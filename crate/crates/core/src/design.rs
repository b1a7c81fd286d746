//! A/B/A_Bi design construction on the unit cube.
//!
//! Each `2m`-dimensional Sobol' point is split into an `A` row (first `m`
//! coordinates) and a `B` row (last `m`). Hybrid rows `A_Bi` take `A` with
//! coordinate `i` replaced from `B`, giving `m + 2` evaluations per row.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::regional::CumulativeCurve;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRow {
    /// Global 1-based row index.
    pub k: u64,
    pub batch: u64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// Which design matrix a request belongs to. `AB(i)` is 0-based here and
/// rendered 1-based (`"AB:3"`) on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixTag {
    A,
    B,
    AB(usize),
}

impl fmt::Display for MatrixTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatrixTag::A => f.write_str("A"),
            MatrixTag::B => f.write_str("B"),
            MatrixTag::AB(i) => write!(f, "AB:{}", i + 1),
        }
    }
}

impl FromStr for MatrixTag {
    type Err = SensaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" => Ok(MatrixTag::A),
            "B" => Ok(MatrixTag::B),
            _ => s
                .strip_prefix("AB:")
                .and_then(|i| i.parse::<usize>().ok())
                .filter(|&i| i >= 1)
                .map(|i| MatrixTag::AB(i - 1))
                .ok_or_else(|| SensaError::Validation(format!("unknown matrix tag {s:?}"))),
        }
    }
}

impl Serialize for MatrixTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MatrixTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRequest {
    pub k: u64,
    pub tag: MatrixTag,
    pub x: Vec<f64>,
}

/// Splits `2m`-dimensional points into design rows numbered from `first_k`.
pub fn build_design_rows(
    points: &[Vec<f64>],
    m: usize,
    first_k: u64,
    batch: u64,
) -> Result<Vec<DesignRow>> {
    points
        .iter()
        .zip(first_k..)
        .map(|(p, k)| {
            if p.len() != 2 * m {
                return Err(SensaError::MalformedPoint {
                    expected: 2 * m,
                    actual: p.len(),
                });
            }
            let (a, b) = p.split_at(m);
            Ok(DesignRow {
                k,
                batch,
                a: a.to_vec(),
                b: b.to_vec(),
            })
        })
        .collect()
}

/// `a` with coordinate `i` taken from `b`.
pub fn hybrid_point(a: &[f64], b: &[f64], i: usize) -> Result<Vec<f64>> {
    if i >= a.len() || a.len() != b.len() {
        return Err(SensaError::IndexOutOfRange { index: i, m: a.len() });
    }
    let mut x = a.to_vec();
    x[i] = b[i];
    Ok(x)
}

/// All `m + 2` requests per row, ordered by row then `A, B, AB(1)..AB(m)`.
pub fn evaluation_plan(rows: &[DesignRow]) -> Vec<EvaluationRequest> {
    let mut plan = Vec::with_capacity(rows.iter().map(|r| r.a.len() + 2).sum());
    for row in rows {
        plan.push(EvaluationRequest {
            k: row.k,
            tag: MatrixTag::A,
            x: row.a.clone(),
        });
        plan.push(EvaluationRequest {
            k: row.k,
            tag: MatrixTag::B,
            x: row.b.clone(),
        });
        for i in 0..row.a.len() {
            let mut x = row.a.clone();
            x[i] = row.b[i];
            plan.push(EvaluationRequest {
                k: row.k,
                tag: MatrixTag::AB(i),
                x,
            });
        }
    }
    plan
}

/// Maps coordinate `l` of each `2m`-dimensional point through the inverse
/// of `curves[l % m]`, clamping into `[0, 1]`.
pub fn transform_points(points: &[Vec<f64>], curves: &[CumulativeCurve]) -> Vec<Vec<f64>> {
    let m = curves.len();
    points
        .iter()
        .map(|p| {
            p.iter()
                .enumerate()
                .map(|(l, &s)| curves[l % m].inverse(s).clamp(0.0, 1.0))
                .collect()
        })
        .collect()
}

/// Affine map between the unit interval and a physical input range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputRange {
    pub lo: f64,
    pub hi: f64,
}

impl Default for InputRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

impl InputRange {
    pub fn to_physical(&self, u: f64) -> f64 {
        self.lo + u * (self.hi - self.lo)
    }

    pub fn to_unit(&self, x: f64) -> f64 {
        (x - self.lo) / (self.hi - self.lo)
    }

    pub fn is_identity(&self) -> bool {
        self.lo == 0.0 && self.hi == 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rows_split_points() {
        let rows = build_design_rows(&[vec![1., 2., 3., 4., 5., 6.]], 3, 1, 1).unwrap();
        assert_eq!(rows[0].a, vec![1., 2., 3.]);
        assert_eq!(rows[0].b, vec![4., 5., 6.]);
        assert!(build_design_rows(&[], 3, 1, 1).unwrap().is_empty());

        let rows = build_design_rows(&[vec![0.1, 0.9], vec![0.2, 0.8]], 1, 5, 2).unwrap();
        assert_eq!(rows.iter().map(|r| r.a[0]).collect::<Vec<_>>(), vec![0.1, 0.2]);
        assert_eq!(rows.iter().map(|r| r.b[0]).collect::<Vec<_>>(), vec![0.9, 0.8]);
        assert_eq!(rows.iter().map(|r| r.k).collect::<Vec<_>>(), vec![5, 6]);
    }

    #[test]
    fn malformed_point() {
        let err = build_design_rows(&[vec![0.1; 5]], 3, 1, 1).unwrap_err();
        assert!(matches!(err, SensaError::MalformedPoint { expected: 6, actual: 5 }));
    }

    #[test]
    fn hybrid() {
        let h = hybrid_point(&[0.1, 0.2, 0.3], &[0.9, 0.8, 0.7], 1).unwrap();
        assert_eq!(h, vec![0.1, 0.8, 0.3]);
        assert_eq!(hybrid_point(&[0.4, 0.5], &[0.4, 0.5], 0).unwrap(), vec![0.4, 0.5]);
        assert_eq!(hybrid_point(&[0.4], &[0.6], 0).unwrap(), vec![0.6]);
        assert!(matches!(
            hybrid_point(&[0.1, 0.2], &[0.3, 0.4], 2),
            Err(SensaError::IndexOutOfRange { index: 2, m: 2 })
        ));
    }

    #[test]
    fn plan_cardinality_and_order() {
        let row = |k, m| DesignRow {
            k,
            batch: 1,
            a: vec![0.25; m],
            b: vec![0.75; m],
        };
        let plan = evaluation_plan(&[row(1, 3)]);
        assert_eq!(plan.len(), 5);
        let tags: Vec<String> = plan.iter().map(|r| r.tag.to_string()).collect();
        assert_eq!(tags, ["A", "B", "AB:1", "AB:2", "AB:3"]);
        assert_eq!(plan[3].x, vec![0.25, 0.75, 0.25]);
        assert!(evaluation_plan(&[]).is_empty());
        let rows: Vec<DesignRow> = (1..=10).map(|k| row(k, 84)).collect();
        assert_eq!(evaluation_plan(&rows).len(), 860);
    }

    #[test]
    fn tag_wire_format() {
        for tag in [MatrixTag::A, MatrixTag::B, MatrixTag::AB(0), MatrixTag::AB(83)] {
            let s = serde_json::to_string(&tag).unwrap();
            assert_eq!(serde_json::from_str::<MatrixTag>(&s).unwrap(), tag);
        }
        assert_eq!(serde_json::to_string(&MatrixTag::AB(2)).unwrap(), "\"AB:3\"");
        assert!("AB:0".parse::<MatrixTag>().is_err());
        assert!("C".parse::<MatrixTag>().is_err());
    }

    #[test]
    fn identity_curves_leave_points_unchanged() {
        let curves = vec![CumulativeCurve::identity(); 2];
        let pts = vec![vec![0.5, 0.25, 0.75, 0.125], vec![0.0, 1.0, 0.3, 0.7]];
        assert_eq!(transform_points(&pts, &curves), pts);
    }

    #[test]
    fn transform_through_uniform_upper_half() {
        // CDF of density 2 on [0.5, 1].
        let curve = CumulativeCurve::new(vec![0.5, 1.0], vec![0.0, 1.0]).unwrap();
        let out = transform_points(&[vec![0.5, 0.5]], &[curve]);
        assert_eq!(out, vec![vec![0.75, 0.75]]);
    }

    #[test]
    fn coordinate_three_uses_first_curve() {
        let upper = CumulativeCurve::new(vec![0.5, 1.0], vec![0.0, 1.0]).unwrap();
        let curves = vec![upper, CumulativeCurve::identity()];
        let out = transform_points(&[vec![0.5, 0.5, 0.5, 0.5]], &curves);
        assert_eq!(out, vec![vec![0.75, 0.5, 0.75, 0.5]]);
    }

    proptest! {
        #[test]
        fn hybrid_is_an_involution(
            a in prop::collection::vec(0.0..1.0f64, 1..8),
            seed in prop::collection::vec(0.0..1.0f64, 8),
            i in 0usize..8,
        ) {
            let b: Vec<f64> = seed[..a.len()].to_vec();
            let i = i % a.len();
            let h = hybrid_point(&a, &b, i).unwrap();
            prop_assert_eq!(hybrid_point(&h, &a, i).unwrap(), a);
        }

        #[test]
        fn plan_has_n_times_m_plus_two(n in 0usize..20, m in 1usize..10) {
            let rows: Vec<DesignRow> = (0..n)
                .map(|k| DesignRow { k: k as u64 + 1, batch: 1, a: vec![0.1; m], b: vec![0.9; m] })
                .collect();
            prop_assert_eq!(evaluation_plan(&rows).len(), n * (m + 2));
        }

        #[test]
        fn identity_transform_is_exact(
            points in prop::collection::vec(prop::collection::vec(0.0..=1.0f64, 6), 0..20),
        ) {
            let curves = vec![CumulativeCurve::identity(); 3];
            let out = transform_points(&points, &curves);
            prop_assert_eq!(out, points);
        }
    }
}
