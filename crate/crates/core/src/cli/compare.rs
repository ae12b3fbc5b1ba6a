//! Comparison of two `(t, x, value)` grids from run directories.

use std::path::Path;

use serde::Serialize;

use crate::output::{write_json, Table};
use crate::stats::linear_fit;

use super::CliError;

/// One time slice of a grid, sorted in `x`.
#[derive(Clone, Debug, PartialEq)]
struct Slice {
    t: f64,
    xs: Vec<f64>,
    vs: Vec<f64>,
}

impl Slice {
    fn interpolate(&self, x: f64) -> Option<f64> {
        let n = self.xs.len();
        if n == 0 || x < self.xs[0] || x > self.xs[n - 1] {
            return None;
        }
        if n == 1 {
            return Some(self.vs[0]);
        }
        let k = (self.xs.partition_point(|&s| s <= x).max(1) - 1).min(n - 2);
        let w = (x - self.xs[k]) / (self.xs[k + 1] - self.xs[k]);
        Some(self.vs[k] + w * (self.vs[k + 1] - self.vs[k]))
    }
}

/// A scattered `(t, x, v)` field grouped by time.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrid {
    slices: Vec<Slice>,
}

impl FieldGrid {
    pub fn from_rows(rows: impl IntoIterator<Item = (f64, f64, f64)>) -> Self {
        let mut rows: Vec<(f64, f64, f64)> = rows.into_iter().collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut slices: Vec<Slice> = Vec::new();
        for (t, x, v) in rows {
            match slices.last_mut() {
                Some(s) if s.t == t => {
                    s.xs.push(x);
                    s.vs.push(v);
                }
                _ => slices.push(Slice { t, xs: vec![x], vs: vec![v] }),
            }
        }
        Self { slices }
    }

    /// Read the first column other than `t` and `x` of a CSV grid.
    pub fn read(path: &Path) -> Result<(Self, String), CliError> {
        let tab = Table::read(path)?;
        let t = tab.require("t", path)?;
        let x = tab.require("x", path)?;
        let name = tab
            .header
            .iter()
            .find(|h| *h != "t" && *h != "x")
            .cloned()
            .ok_or_else(|| CliError::Compare(format!("{} has no value column", path.display())))?;
        let v = tab.require(&name, path)?;
        Ok((Self::from_rows(t.into_iter().zip(x).zip(v).map(|((t, x), v)| (t, x, v))), name))
    }

    pub fn times(&self) -> Vec<f64> {
        self.slices.iter().map(|s| s.t).collect()
    }

    /// Linear in `x` within the two bracketing slices, then linear in `t`.
    /// `None` outside the covered region.
    pub fn interpolate(&self, t: f64, x: f64) -> Option<f64> {
        let n = self.slices.len();
        let tol = 1e-12 * (1.0 + t.abs());
        if n == 0 || t < self.slices[0].t - tol || t > self.slices[n - 1].t + tol {
            return None;
        }
        let k = self.slices.partition_point(|s| s.t <= t + tol);
        let lower = &self.slices[k.max(1) - 1];
        if (lower.t - t).abs() <= tol || k >= n {
            return lower.interpolate(x);
        }
        let upper = &self.slices[k];
        let w = (t - lower.t) / (upper.t - lower.t);
        Some((1.0 - w) * lower.interpolate(x)? + w * upper.interpolate(x)?)
    }
}

/// Errors and fits at one time of the first grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SliceComparison {
    pub t: f64,
    pub points: usize,
    pub sup: f64,
    /// Root mean square difference over the shared points.
    pub l2: f64,
    pub slope_a: f64,
    pub slope_b: f64,
    pub r2_a: f64,
    pub r2_b: f64,
    pub slope_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub field: String,
    pub sup: f64,
    pub l2: f64,
    pub max_slope_rel_err: f64,
    pub slices: Vec<SliceComparison>,
    #[serde(skip)]
    pub points: Vec<[f64; 5]>,
}

/// Compare `a` with `b` on the points of `a` that `b` covers.
pub fn compare_grids(a: &FieldGrid, b: &FieldGrid, field: &str) -> Result<Comparison, CliError> {
    let mut slices = Vec::new();
    let mut points = Vec::new();
    for s in &a.slices {
        let (mut xs, mut va, mut vb) = (Vec::new(), Vec::new(), Vec::new());
        for (&x, &v) in s.xs.iter().zip(&s.vs) {
            if let Some(w) = b.interpolate(s.t, x) {
                xs.push(x);
                va.push(v);
                vb.push(w);
                points.push([s.t, x, v, w, v - w]);
            }
        }
        if xs.is_empty() {
            continue;
        }
        let d: Vec<f64> = va.iter().zip(&vb).map(|(p, q)| p - q).collect();
        let sup = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let l2 = (d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt();
        let (fa, fb) = (linear_fit(&xs, &va), linear_fit(&xs, &vb));
        let slope_rel_err = if fa.slope == fb.slope {
            0.0
        } else {
            (fa.slope - fb.slope).abs() / fb.slope.abs()
        };
        slices.push(SliceComparison {
            t: s.t,
            points: xs.len(),
            sup,
            l2,
            slope_a: fa.slope,
            slope_b: fb.slope,
            r2_a: fa.r2,
            r2_b: fb.r2,
            slope_rel_err,
        });
    }
    if slices.is_empty() {
        return Err(CliError::Compare("the two grids share no points: disjoint domains".into()));
    }
    let n: usize = slices.iter().map(|s| s.points).sum();
    Ok(Comparison {
        field: field.to_string(),
        sup: slices.iter().fold(0.0, |m, s| m.max(s.sup)),
        l2: (slices.iter().map(|s| s.l2 * s.l2 * s.points as f64).sum::<f64>() / n as f64).sqrt(),
        max_slope_rel_err: slices.iter().fold(0.0, |m, s| m.max(s.slope_rel_err)),
        slices,
        points,
    })
}

/// Compare `<field>_grid.csv` of two run directories and write
/// `compare_points.csv`, `compare_summary.csv` and `compare_summary.json`
/// to `out`.
pub fn compare_runs(a: &Path, b: &Path, field: &str, out: &Path) -> Result<Comparison, CliError> {
    let file = format!("{}_grid.csv", field);
    let (ga, name) = FieldGrid::read(&a.join(&file))?;
    let (gb, _) = FieldGrid::read(&b.join(&file))?;
    let cmp = compare_grids(&ga, &gb, &name)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.display().to_string(), e))?;
    let mut pts = Table::new(&["t", "x", "a", "b", "diff"]);
    for p in &cmp.points {
        pts.push(p.to_vec());
    }
    pts.write(&out.join("compare_points.csv"))?;
    let mut sum = Table::new(&["t", "points", "sup", "l2", "slope_a", "slope_b", "r2_a", "r2_b", "slope_rel_err"])
        .with_int_columns(&["points"]);
    for s in &cmp.slices {
        sum.push(vec![s.t, s.points as f64, s.sup, s.l2, s.slope_a, s.slope_b, s.r2_a, s.r2_b, s.slope_rel_err]);
    }
    sum.write(&out.join("compare_summary.csv"))?;
    write_json(&out.join("compare_summary.json"), &cmp)?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(a: f64, b: f64, times: &[f64], xs: &[f64]) -> FieldGrid {
        FieldGrid::from_rows(times.iter().flat_map(|&t| xs.iter().map(move |&x| (t, x, a * x + b * t))))
    }

    #[test]
    fn interpolation_is_exact_on_linear_fields() {
        let g = linear(2.0, -1.0, &[0.0, 0.5, 1.0], &[-1.0, 0.0, 2.0]);
        for (t, x) in [(0.25, 0.3), (0.5, -1.0), (1.0, 2.0), (0.9, 1.7)] {
            let v = g.interpolate(t, x).unwrap();
            assert!((v - (2.0 * x - t)).abs() < 1e-12, "{} {} {}", t, x, v);
        }
        assert_eq!(g.interpolate(1.5, 0.0), None);
        assert_eq!(g.interpolate(0.5, 2.5), None);
    }

    #[test]
    fn identical_grids_have_zero_error() {
        let g = linear(-0.7, 0.3, &[0.0, 0.5, 1.0], &[0.0, 0.5, 1.0, 1.5]);
        let c = compare_grids(&g, &g, "alpha").unwrap();
        assert_eq!((c.sup, c.l2, c.max_slope_rel_err), (0.0, 0.0, 0.0));
        assert_eq!(c.slices.len(), 3);
        assert!(c.slices.iter().all(|s| (s.slope_a + 0.7).abs() < 1e-12 && s.r2_a > 1.0 - 1e-12));
    }

    #[test]
    fn mismatched_axes_are_interpolated() {
        let a = linear(1.0, 0.0, &[0.0, 0.3], &[0.1, 0.45, 0.8]);
        let b = linear(1.1, 0.0, &[0.0, 0.2, 0.4], &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let c = compare_grids(&a, &b, "alpha").unwrap();
        assert!((c.max_slope_rel_err - 0.1 / 1.1).abs() < 1e-12);
        assert!((c.sup - 0.08).abs() < 1e-12);
    }

    #[test]
    fn disjoint_domains_are_an_error() {
        let a = linear(1.0, 0.0, &[0.0, 1.0], &[0.0, 1.0]);
        let b = linear(1.0, 0.0, &[0.0, 1.0], &[2.0, 3.0]);
        assert!(matches!(compare_grids(&a, &b, "alpha"), Err(CliError::Compare(_))));
        let c = linear(1.0, 0.0, &[2.0, 3.0], &[0.0, 1.0]);
        assert!(compare_grids(&a, &c, "alpha").is_err());
    }
}
