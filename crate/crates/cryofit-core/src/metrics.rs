//! Evaluation metrics: C-alpha precision/recall, AA-type precision, RMSD,
//! and TM-score with iterative rigid superposition.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structio::{AminoAcid, Structure};

pub const CA_MATCH_CUTOFF: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    /// One-to-one (detected, truth) index pairs, ascending distance.
    pub match_pairs: Vec<(usize, usize)>,
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Greedy one-to-one matching by ascending pair distance; pairs beyond the
/// cutoff stay unmatched.
pub fn ca_precision_recall(
    detected: &[[f64; 3]],
    truth: &[[f64; 3]],
    cutoff: f64,
) -> Result<MatchReport> {
    if !(cutoff > 0.0) {
        return Err(Error::InvalidArgument("cutoff must be > 0".into()));
    }
    if truth.is_empty() {
        return Err(Error::Degenerate(
            "recall undefined for an empty truth set".into(),
        ));
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, d) in detected.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            let dd = dist(*d, *t);
            if dd <= cutoff {
                pairs.push((dd, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_d = vec![false; detected.len()];
    let mut used_t = vec![false; truth.len()];
    let mut match_pairs = Vec::new();
    for (_, i, j) in pairs {
        if !used_d[i] && !used_t[j] {
            used_d[i] = true;
            used_t[j] = true;
            match_pairs.push((i, j));
        }
    }
    let tp = match_pairs.len();
    let fp = detected.len() - tp;
    let fne = truth.len() - tp;
    Ok(MatchReport {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fne,
        precision: if detected.is_empty() {
            0.0
        } else {
            tp as f64 / detected.len() as f64
        },
        recall: tp as f64 / truth.len() as f64,
        match_pairs,
    })
}

/// Fraction of position-matched residues whose assigned AA type equals the
/// truth type. `assignments` pairs a CA position with its assigned type.
pub fn aa_precision(
    assignments: &[([f64; 3], AminoAcid)],
    truth: &Structure,
) -> Result<f64> {
    let truth_entries: Vec<([f64; 3], AminoAcid)> = truth
        .chains
        .iter()
        .flat_map(|c| c.residues.iter())
        .filter_map(|r| r.ca().map(|a| (a.position, r.aa_type)))
        .collect();
    if truth_entries.is_empty() {
        return Err(Error::Degenerate("truth structure has no CA atoms".into()));
    }
    let detected: Vec<[f64; 3]> = assignments.iter().map(|(p, _)| *p).collect();
    let truth_pos: Vec<[f64; 3]> = truth_entries.iter().map(|(p, _)| *p).collect();
    let report = ca_precision_recall(&detected, &truth_pos, CA_MATCH_CUTOFF)?;
    if report.match_pairs.is_empty() {
        return Err(Error::Degenerate(
            "no residues matched within the cutoff".into(),
        ));
    }
    let correct = report
        .match_pairs
        .iter()
        .filter(|&&(i, j)| assignments[i].1 == truth_entries[j].1)
        .count();
    Ok(correct as f64 / report.match_pairs.len() as f64)
}

/// Root-mean-square distance without superposition (map-frame convention).
pub fn rmsd(a: &[[f64; 3]], b: &[[f64; 3]]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::InvalidArgument(
            "rmsd needs equal nonempty position sets".into(),
        ));
    }
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| (0..3).map(|i| (p[i] - q[i]).powi(2)).sum::<f64>())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

/// Least-squares rigid transform (rotation + translation) mapping `mobile`
/// onto `target`.
pub fn kabsch(mobile: &[[f64; 3]], target: &[[f64; 3]]) -> Result<(Rotation3<f64>, Vector3<f64>)> {
    if mobile.len() != target.len() || mobile.len() < 3 {
        return Err(Error::InvalidArgument(
            "superposition needs >= 3 paired points".into(),
        ));
    }
    let n = mobile.len() as f64;
    let cm: Vector3<f64> = mobile
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .sum::<Vector3<f64>>()
        / n;
    let ct: Vector3<f64> = target
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .sum::<Vector3<f64>>()
        / n;
    let mut h = Matrix3::zeros();
    for (p, q) in mobile.iter().zip(target) {
        let pm = Vector3::new(p[0], p[1], p[2]) - cm;
        let qm = Vector3::new(q[0], q[1], q[2]) - ct;
        h += qm * pm.transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Numerical("SVD failed".into()))?;
    let d = (u * v_t).determinant().signum();
    let correction = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let r = u * correction * v_t;
    let rot = Rotation3::from_matrix_unchecked(r);
    let t = ct - rot * cm;
    Ok((rot, t))
}

fn apply(rot: &Rotation3<f64>, t: &Vector3<f64>, p: [f64; 3]) -> [f64; 3] {
    let v = rot * Vector3::new(p[0], p[1], p[2]) + t;
    [v.x, v.y, v.z]
}

/// TM-score normalization length scale.
pub fn tm_d0(l_ref: usize) -> f64 {
    let d0 = 1.24 * ((l_ref as f64 - 15.0).cbrt()) - 1.8;
    d0.max(0.5)
}

fn tm_from_superposition(
    rot: &Rotation3<f64>,
    t: &Vector3<f64>,
    model: &[[f64; 3]],
    reference: &[[f64; 3]],
    d0: f64,
    l_ref: usize,
) -> f64 {
    model
        .iter()
        .zip(reference)
        .map(|(m, r)| {
            let d = dist(apply(rot, t, *m), *r);
            1.0 / (1.0 + (d / d0).powi(2))
        })
        .sum::<f64>()
        / l_ref as f64
}

/// TM-score of `model` against `reference`, CA-only, residues paired by
/// chain id and residue index.
///
/// Standard protocol: sliding seed fragments of lengths {L, L/2, L/4},
/// rigid superposition per seed, then iterative refinement of the inclusion
/// set (pairs within d0) to a fixed point; the best score over all seeds
/// wins.
pub fn tm_score(model: &Structure, reference: &Structure) -> Result<f64> {
    let mut model_pts = Vec::new();
    let mut ref_pts = Vec::new();
    for rc in &reference.chains {
        let Some(mc) = model.chain(rc.id) else {
            continue;
        };
        for rr in &rc.residues {
            let Some(mr) = mc.residues.iter().find(|r| r.index == rr.index) else {
                continue;
            };
            if let (Some(ra), Some(ma)) = (rr.ca(), mr.ca()) {
                ref_pts.push(ra.position);
                model_pts.push(ma.position);
            }
        }
    }
    let l_ref: usize = reference
        .chains
        .iter()
        .map(|c| c.residues.iter().filter(|r| r.ca().is_some()).count())
        .sum();
    let n = model_pts.len();
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "need >= 3 common residues for TM-score, found {n}"
        )));
    }
    let d0 = tm_d0(l_ref);

    let mut best = 0.0f64;
    let mut seed_lens: Vec<usize> = vec![n, n / 2, n / 4];
    seed_lens.retain(|&l| l >= 3);
    seed_lens.dedup();
    for &len in &seed_lens {
        let step = (len / 2).max(1);
        let mut start = 0;
        loop {
            let seed: Vec<usize> = (start..start + len).collect();
            let mut selection = seed;
            let mut last_score = f64::NEG_INFINITY;
            for _ in 0..30 {
                let mob: Vec<[f64; 3]> = selection.iter().map(|&i| model_pts[i]).collect();
                let tgt: Vec<[f64; 3]> = selection.iter().map(|&i| ref_pts[i]).collect();
                let Ok((rot, t)) = kabsch(&mob, &tgt) else {
                    break;
                };
                let score = tm_from_superposition(&rot, &t, &model_pts, &ref_pts, d0, l_ref);
                if score > best {
                    best = score;
                }
                // next inclusion set: pairs within d0 of the reference
                let mut dists: Vec<(f64, usize)> = (0..n)
                    .map(|i| (dist(apply(&rot, &t, model_pts[i]), ref_pts[i]), i))
                    .collect();
                dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut next: Vec<usize> = dists
                    .iter()
                    .filter(|(d, _)| *d < d0)
                    .map(|&(_, i)| i)
                    .collect();
                if next.len() < 3 {
                    next = dists.iter().take(3).map(|&(_, i)| i).collect();
                }
                next.sort_unstable();
                if next == selection || (score - last_score).abs() < 1e-12 {
                    break;
                }
                last_score = score;
                selection = next;
            }
            if start + len >= n {
                break;
            }
            start = (start + step).min(n - len);
        }
    }
    Ok(best)
}
