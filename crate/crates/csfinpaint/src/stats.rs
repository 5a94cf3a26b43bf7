//! Cortical-thickness-change error statistics: per-region means, paired
//! two-sided t-tests between methods, and Bonferroni-corrected significance.
//!
//! Thickness measurements come from an external surface pipeline as CSV
//! (`subject,region,method,induced_mm,measured_mm`); this module only does
//! the statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtChangeRecord {
    pub subject: String,
    pub region: String,
    pub method: String,
    pub induced_mm: f64,
    pub measured_mm: f64,
}

impl CtChangeRecord {
    /// Absolute difference between induced and measured change.
    pub fn error_mm(&self) -> f64 {
        (self.induced_mm - self.measured_mm).abs()
    }
}

/// Parse the thickness CSV (`subject,region,method,induced_mm,measured_mm`,
/// header required).
pub fn read_thickness_csv(path: &Path) -> Result<Vec<CtChangeRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .map(|(_, l)| l.trim())
        .unwrap_or_default()
        .to_ascii_lowercase();
    if header.replace(' ', "") != "subject,region,method,induced_mm,measured_mm" {
        return Err(Error::InvalidArgument(format!(
            "thickness CSV header must be subject,region,method,induced_mm,measured_mm (got {header:?})"
        )));
    }
    let mut out = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::InvalidArgument(format!(
                "thickness CSV line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::InvalidArgument(format!(
                    "thickness CSV line {}: bad {what} value {s:?}",
                    lineno + 1
                ))
            })
        };
        out.push(CtChangeRecord {
            subject: fields[0].to_string(),
            region: fields[1].to_string(),
            method: fields[2].to_string(),
            induced_mm: parse(fields[3], "induced_mm")?,
            measured_mm: parse(fields[4], "measured_mm")?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedTTest {
    pub t: f64,
    pub dof: usize,
    pub p: f64,
    /// Zero-variance differences: the t statistic is not defined; `p` is set
    /// to 1 for identical vectors and 0 for a constant nonzero shift.
    pub degenerate: bool,
}

/// Two-sided paired t-test on equally long samples.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired t-test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "paired t-test needs at least 2 paired samples (unpaired/insufficient data)".into(),
        ));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);
    let dof = n - 1;
    if var == 0.0 {
        return Ok(PairedTTest {
            t: if mean == 0.0 { 0.0 } else { f64::INFINITY * mean.signum() },
            dof,
            p: if mean == 0.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(PairedTTest {
        t,
        dof,
        p: p.clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionComparison {
    pub method_a: String,
    pub method_b: String,
    pub test: PairedTTest,
    pub significant_raw: bool,
    pub significant_bonferroni: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionStats {
    pub region: String,
    pub n_subjects: usize,
    pub mean_error_mm: BTreeMap<String, f64>,
    pub comparisons: Vec<RegionComparison>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtStats {
    pub regions: Vec<RegionStats>,
    pub alpha: f64,
    pub bonferroni_n: usize,
    pub bonferroni_threshold: f64,
}

/// Per-region mean errors per method plus paired t-tests between every
/// method pair.
///
/// Subjects must be paired: within a region, every method needs the same
/// subject set. `bonferroni_n` defaults to regions x method-pairs.
pub fn ct_change_error(
    records: &[CtChangeRecord],
    alpha: f64,
    bonferroni_n: Option<usize>,
) -> Result<CtStats> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no thickness records".into()));
    }
    // region -> method -> subject -> error
    let mut by_region: BTreeMap<String, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for r in records {
        by_region
            .entry(r.region.clone())
            .or_default()
            .entry(r.method.clone())
            .or_default()
            .insert(r.subject.clone(), r.error_mm());
    }

    let mut methods: BTreeSet<String> = BTreeSet::new();
    for region in by_region.values() {
        methods.extend(region.keys().cloned());
    }
    let methods: Vec<String> = methods.into_iter().collect();
    let pairs_per_region = methods.len() * methods.len().saturating_sub(1) / 2;
    let n_default = by_region.len() * pairs_per_region.max(1);
    let bonferroni_n = bonferroni_n.unwrap_or(n_default).max(1);
    let bonferroni_threshold = alpha / bonferroni_n as f64;

    let mut regions = Vec::new();
    for (region, map) in &by_region {
        let mut subjects: Option<BTreeSet<String>> = None;
        for (method, per_subject) in map {
            let s: BTreeSet<String> = per_subject.keys().cloned().collect();
            match &subjects {
                None => subjects = Some(s),
                Some(prev) if *prev == s => {}
                Some(prev) => {
                    return Err(Error::InvalidArgument(format!(
                        "unpaired data in region {region}: method {method} covers {:?}, expected {:?}",
                        s, prev
                    )));
                }
            }
        }
        let subjects = subjects.expect("region has at least one method");
        if subjects.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "unpaired/insufficient data in region {region}: need >= 2 paired subjects, got {}",
                subjects.len()
            )));
        }

        let mut mean_error_mm = BTreeMap::new();
        for (method, per_subject) in map {
            let mean = per_subject.values().sum::<f64>() / per_subject.len() as f64;
            mean_error_mm.insert(method.clone(), mean);
        }

        let mut comparisons = Vec::new();
        let present: Vec<&String> = map.keys().collect();
        for i in 0..present.len() {
            for j in i + 1..present.len() {
                let (ma, mb) = (present[i], present[j]);
                let a: Vec<f64> = subjects.iter().map(|s| map[ma][s]).collect();
                let b: Vec<f64> = subjects.iter().map(|s| map[mb][s]).collect();
                let test = paired_ttest(&a, &b)?;
                comparisons.push(RegionComparison {
                    method_a: ma.clone(),
                    method_b: mb.clone(),
                    significant_raw: test.p < alpha,
                    significant_bonferroni: test.p < bonferroni_threshold,
                    test,
                });
            }
        }
        regions.push(RegionStats {
            region: region.clone(),
            n_subjects: subjects.len(),
            mean_error_mm,
            comparisons,
        });
    }

    Ok(CtStats {
        regions,
        alpha,
        bonferroni_n,
        bonferroni_threshold,
    })
}
