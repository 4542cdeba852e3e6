//! C-alpha candidate extraction and fragment tracing.
//!
//! Candidates are coarse cells whose detection probability clears a
//! threshold; two candidates q and p are consecutive when the predicted
//! pseudo-peptide vector of q lands within `sqrt(epsilon_sq)` of p. Tracing
//! keeps only mutual-best links, which makes the successor relation a
//! partial matching, and emits maximal chains as fragments.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureGrids, LabelGridSpec};
use crate::structio::{AminoAcid, Atom, Chain, Residue, Structure};

/// Sanity bounds on a consecutive C-alpha distance, in angstroms.
pub const CA_DIST_MIN: f64 = 2.0;
pub const CA_DIST_MAX: f64 = 4.5;

/// Neighborhood searched around the PPV endpoint, in coarse cells
/// (Chebyshev distance).
const SEARCH_CELLS: i64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaCandidate {
    pub cell: (usize, usize, usize),
    /// Global position: cell corner plus predicted offset.
    pub position: [f64; 3],
    pub ppv: [f64; 3],
    pub aa_dist: Vec<f64>,
    /// Detection probability.
    pub score: f64,
}

impl CaCandidate {
    pub fn aa_argmax(&self) -> AminoAcid {
        let mut best = 0;
        for j in 1..20 {
            if self.aa_dist[j] > self.aa_dist[best] {
                best = j;
            }
        }
        AminoAcid::from_index(best).unwrap()
    }
}

/// Ordered run of candidates, N-to-C by construction (the PPV points to
/// the consecutive residue).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub residues: Vec<CaCandidate>,
}

impl Fragment {
    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.residues.iter().map(|r| r.position).collect()
    }
}

/// One candidate per coarse cell with detection probability at or above
/// the threshold.
pub fn extract_candidates(grids: &FeatureGrids, threshold: f64) -> Result<Vec<CaCandidate>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "detection threshold must be in (0, 1), got {threshold}"
        )));
    }
    let (cx, cy, cz) = grids.coarse_dims();
    let mut out = Vec::new();
    for iz in 0..cz {
        for iy in 0..cy {
            for ix in 0..cx {
                let idx = grids.ca_prob.index(ix, iy, iz);
                let p = grids.ca_prob.values()[idx] as f64;
                if p < threshold {
                    continue;
                }
                let corner = grids.cell_corner(ix, iy, iz);
                let position: [f64; 3] =
                    std::array::from_fn(|a| corner[a] + grids.ca_offset[a].values()[idx] as f64);
                let ppv: [f64; 3] =
                    std::array::from_fn(|a| grids.ppv[a].values()[idx] as f64);
                out.push(CaCandidate {
                    cell: (ix, iy, iz),
                    position,
                    ppv,
                    aa_dist: grids.aa_dist_at(idx).to_vec(),
                    score: p,
                });
            }
        }
    }
    Ok(out)
}

fn dist_sq(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Connect candidates into fragments with the PPV criterion.
///
/// Each candidate keeps at most one successor (smallest residual) and one
/// predecessor (smallest residual); ties break on the smaller cell index.
/// Cycles are broken at their largest-residual edge. The result does not
/// depend on candidate input order.
pub fn trace_fragments(
    candidates: &[CaCandidate],
    epsilon_sq: f64,
    spec: &LabelGridSpec,
) -> Result<Vec<Fragment>> {
    if !(epsilon_sq > 0.0) {
        return Err(Error::InvalidArgument("epsilon_sq must be > 0".into()));
    }
    let cs = spec.coarse_spacing();
    let n = candidates.len();

    // canonical processing order: ascending cell index (z, y, x)
    let mut order: Vec<usize> = (0..n).collect();
    let key = |i: usize| {
        let c = candidates[i].cell;
        (c.2, c.1, c.0)
    };
    order.sort_by_key(|&i| key(i));

    let mut cell_map: HashMap<(i64, i64, i64), usize> = HashMap::with_capacity(n);
    for &i in &order {
        let c = candidates[i].cell;
        if cell_map
            .insert((c.0 as i64, c.1 as i64, c.2 as i64), i)
            .is_some()
        {
            return Err(Error::InvalidArgument(format!(
                "duplicate candidate cell {c:?}"
            )));
        }
    }

    // best successor per candidate
    let mut succ: Vec<Option<(usize, f64)>> = vec![None; n];
    for &q in &order {
        let cand = &candidates[q];
        let target: [f64; 3] = std::array::from_fn(|a| cand.position[a] + cand.ppv[a]);
        let tcell: [i64; 3] =
            std::array::from_fn(|a| ((target[a] - spec.origin[a]) / cs).floor() as i64);
        let mut best: Option<(usize, f64)> = None;
        for dz in -SEARCH_CELLS..=SEARCH_CELLS {
            for dy in -SEARCH_CELLS..=SEARCH_CELLS {
                for dx in -SEARCH_CELLS..=SEARCH_CELLS {
                    let cell = (tcell[0] + dx, tcell[1] + dy, tcell[2] + dz);
                    let Some(&p) = cell_map.get(&cell) else {
                        continue;
                    };
                    if p == q {
                        continue;
                    }
                    let step = dist_sq(cand.position, candidates[p].position).sqrt();
                    if step <= CA_DIST_MIN || step >= CA_DIST_MAX {
                        continue;
                    }
                    let residual = dist_sq(target, candidates[p].position);
                    if residual > epsilon_sq {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bp, br)) => {
                            residual < br || (residual == br && key(p) < key(bp))
                        }
                    };
                    if better {
                        best = Some((p, residual));
                    }
                }
            }
        }
        succ[q] = best;
    }

    // best predecessor per candidate; drop non-mutual links
    let mut pred: Vec<Option<(usize, f64)>> = vec![None; n];
    for &q in &order {
        if let Some((p, r)) = succ[q] {
            let better = match pred[p] {
                None => true,
                Some((bq, br)) => r < br || (r == br && key(q) < key(bq)),
            };
            if better {
                pred[p] = Some((q, r));
            }
        }
    }
    let mut next: Vec<Option<usize>> = vec![None; n];
    let mut prev: Vec<Option<usize>> = vec![None; n];
    for &q in &order {
        if let Some((p, _)) = succ[q] {
            if pred[p].map(|(bq, _)| bq) == Some(q) {
                next[q] = Some(p);
                prev[p] = Some(q);
            }
        }
    }

    let mut visited = vec![false; n];
    let mut fragments = Vec::new();
    let mut emit = |start: usize, visited: &mut Vec<bool>, next: &[Option<usize>]| {
        let mut residues = Vec::new();
        let mut cur = start;
        loop {
            visited[cur] = true;
            residues.push(candidates[cur].clone());
            match next[cur] {
                Some(nx) if !visited[nx] => cur = nx,
                _ => break,
            }
        }
        fragments.push(Fragment { residues });
    };

    // chains first
    for &i in &order {
        if !visited[i] && prev[i].is_none() {
            emit(i, &mut visited, &next);
        }
    }
    // remaining nodes are cycles: cut each at its largest-residual edge
    for &i in &order {
        if visited[i] {
            continue;
        }
        let mut cycle = vec![i];
        let mut cur = next[i].expect("cycle node has a successor");
        while cur != i {
            cycle.push(cur);
            cur = next[cur].expect("cycle node has a successor");
        }
        let mut worst = 0usize;
        let mut worst_r = f64::NEG_INFINITY;
        for (k, &q) in cycle.iter().enumerate() {
            let r = succ[q].expect("cycle edge").1;
            if r > worst_r || (r == worst_r && key(q) < key(cycle[worst])) {
                worst_r = r;
                worst = k;
            }
        }
        // the fragment starts after the removed edge
        let start = cycle[(worst + 1) % cycle.len()];
        emit(start, &mut visited, &next);
    }
    Ok(fragments)
}

/// Remove fragments shorter than `min_len` residues.
pub fn prune_fragments(fragments: Vec<Fragment>, min_len: usize) -> Result<Vec<Fragment>> {
    if min_len < 1 {
        return Err(Error::InvalidArgument("min_len must be >= 1".into()));
    }
    Ok(fragments.into_iter().filter(|f| f.len() >= min_len).collect())
}

const CHAIN_IDS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

/// CA-only structure with one chain per fragment; residue types are the
/// per-cell argmax. Chain ids cycle through A-Z, a-z, 0-9.
pub fn fragments_to_structure(fragments: &[Fragment]) -> Structure {
    let chains = fragments
        .iter()
        .enumerate()
        .map(|(fi, frag)| Chain {
            id: CHAIN_IDS[fi % CHAIN_IDS.len()] as char,
            residues: frag
                .residues
                .iter()
                .enumerate()
                .map(|(ri, c)| Residue {
                    index: ri as i32 + 1,
                    aa_type: c.aa_argmax(),
                    atoms: vec![Atom {
                        name: "CA".into(),
                        element: "C".into(),
                        position: c.position,
                    }],
                })
                .collect(),
        })
        .collect();
    Structure { chains }
}
