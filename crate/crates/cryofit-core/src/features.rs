//! Recognition feature grids: label generation from structures, controlled
//! noise injection, the training losses as reference oracles, and the
//! feature-directory serialization contract.
//!
//! Five channels make up the recognition output: a backbone probability map
//! on the fine (1 A) lattice, and C-alpha probability, C-alpha offsets,
//! pseudo-peptide vectors, and AA-type distributions on a coarse lattice
//! with twice the fine spacing. Coarse cell `(i,j,k)` has its lower corner
//! at `origin + coarse_spacing * (i,j,k)` and aggregates the 2x2x2 fine
//! voxels anchored there.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapio::{self, VoxelGrid};
use crate::structio::Structure;

pub const PPV_RANGE: f64 = 4.0;
pub const BACKBONE_LABEL_RADIUS: f64 = 1.2;
const PROB_FLOOR: f64 = 1e-9;
const DICE_SMOOTHING: f64 = 1e-7;

/// Lattice layout for a set of feature grids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelGridSpec {
    pub origin: [f64; 3],
    pub coarse_dims: (usize, usize, usize),
    /// Fine (backbone) spacing in angstroms; the coarse spacing is twice this.
    pub bb_spacing: f64,
}

impl LabelGridSpec {
    pub fn coarse_spacing(&self) -> f64 {
        2.0 * self.bb_spacing
    }

    /// Dimensions of the fine (backbone-probability) lattice.
    pub fn bb_dims(&self) -> (usize, usize, usize) {
        (
            self.coarse_dims.0 * 2,
            self.coarse_dims.1 * 2,
            self.coarse_dims.2 * 2,
        )
    }

    /// Smallest spec whose coarse lattice covers every atom of the
    /// structure with `margin` angstroms to spare.
    pub fn covering(structure: &Structure, bb_spacing: f64, margin: f64) -> Result<Self> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for atom in structure.atoms() {
            for a in 0..3 {
                lo[a] = lo[a].min(atom.position[a]);
                hi[a] = hi[a].max(atom.position[a]);
            }
        }
        if lo.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("structure has no atoms".into()));
        }
        let cs = 2.0 * bb_spacing;
        let origin = [lo[0] - margin, lo[1] - margin, lo[2] - margin];
        let dims = std::array::from_fn::<usize, 3, _>(|a| {
            ((hi[a] + margin - origin[a]) / cs).ceil().max(1.0) as usize
        });
        Ok(Self {
            origin,
            coarse_dims: (dims[0], dims[1], dims[2]),
            bb_spacing,
        })
    }
}

/// The five recognition channels plus the label-side masks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrids {
    pub bb_prob: VoxelGrid,
    pub ca_prob: VoxelGrid,
    pub ca_offset: [VoxelGrid; 3],
    pub ppv: [VoxelGrid; 3],
    pub aa_dist: Vec<VoxelGrid>,
    /// Coarse cells that carry a C-alpha label.
    pub ca_mask: Vec<bool>,
    /// Coarse cells whose PPV points at an existing consecutive residue.
    pub ppv_mask: Vec<bool>,
}

impl FeatureGrids {
    pub fn spec(&self) -> LabelGridSpec {
        LabelGridSpec {
            origin: self.ca_prob.origin(),
            coarse_dims: self.ca_prob.dims(),
            bb_spacing: self.ca_prob.spacing()[0] / 2.0,
        }
    }

    pub fn coarse_dims(&self) -> (usize, usize, usize) {
        self.ca_prob.dims()
    }

    pub fn coarse_cell_count(&self) -> usize {
        self.ca_prob.len()
    }

    /// Physical lower corner of a coarse cell.
    pub fn cell_corner(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        let cs = self.ca_prob.spacing();
        let org = self.ca_prob.origin();
        [
            org[0] + ix as f64 * cs[0],
            org[1] + iy as f64 * cs[1],
            org[2] + iz as f64 * cs[2],
        ]
    }

    pub fn aa_dist_at(&self, idx: usize) -> [f64; 20] {
        std::array::from_fn(|j| self.aa_dist[j].values()[idx] as f64)
    }

    fn empty(spec: &LabelGridSpec) -> Self {
        let (cx, cy, cz) = spec.coarse_dims;
        let cs = spec.coarse_spacing();
        let coarse =
            || VoxelGrid::zeros((cx, cy, cz), [cs; 3], spec.origin);
        Self {
            bb_prob: VoxelGrid::zeros(
                (2 * cx, 2 * cy, 2 * cz),
                [spec.bb_spacing; 3],
                spec.origin,
            ),
            ca_prob: coarse(),
            ca_offset: [coarse(), coarse(), coarse()],
            ppv: [coarse(), coarse(), coarse()],
            aa_dist: (0..20).map(|_| coarse()).collect(),
            ca_mask: vec![false; cx * cy * cz],
            ppv_mask: vec![false; cx * cy * cz],
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.coarse_cell_count();
        for idx in 0..n {
            if self.ca_mask[idx] {
                let dist = self.aa_dist_at(idx);
                let sum: f64 = dist.iter().sum();
                if dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "aa distribution at cell {idx} is not a probability distribution"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth feature grids for a structure: the oracle standing in for
/// the recognition network.
pub fn generate_labels(structure: &Structure, spec: &LabelGridSpec) -> Result<FeatureGrids> {
    let mut grids = FeatureGrids::empty(spec);
    let cs = spec.coarse_spacing();
    let (cx, cy, cz) = spec.coarse_dims;

    for chain in &structure.chains {
        for (ri, res) in chain.residues.iter().enumerate() {
            let ca = res.ca().ok_or_else(|| {
                Error::Structure(format!(
                    "chain {} residue {} has no CA atom",
                    chain.id, res.index
                ))
            })?;
            let mut cell = [0usize; 3];
            for a in 0..3 {
                let u = ((ca.position[a] - spec.origin[a]) / cs).floor();
                let max = [cx, cy, cz][a];
                if u < 0.0 || u as usize >= max {
                    return Err(Error::Structure(format!(
                        "CA of chain {} residue {} lies outside the label grid",
                        chain.id, res.index
                    )));
                }
                cell[a] = u as usize;
            }
            let idx = grids.ca_prob.index(cell[0], cell[1], cell[2]);
            if grids.ca_mask[idx] {
                return Err(Error::Structure(format!(
                    "two CA atoms fall in one coarse cell at {cell:?}"
                )));
            }
            grids.ca_mask[idx] = true;
            grids.ca_prob.set(cell[0], cell[1], cell[2], 1.0);
            let corner = grids.cell_corner(cell[0], cell[1], cell[2]);
            for a in 0..3 {
                grids.ca_offset[a].set(
                    cell[0],
                    cell[1],
                    cell[2],
                    (ca.position[a] - corner[a]) as f32,
                );
            }
            grids.aa_dist[res.aa_type.index()].set(cell[0], cell[1], cell[2], 1.0);

            // PPV to the consecutive residue; chain breaks and out-of-range
            // vectors stay masked instead of erroring.
            if let Some(next) = chain.residues.get(ri + 1) {
                if next.index == res.index + 1 {
                    if let Some(next_ca) = next.ca() {
                        let v: [f64; 3] =
                            std::array::from_fn(|a| next_ca.position[a] - ca.position[a]);
                        if v.iter().all(|c| c.abs() <= PPV_RANGE) {
                            for a in 0..3 {
                                grids.ppv[a].set(cell[0], cell[1], cell[2], v[a] as f32);
                            }
                            grids.ppv_mask[idx] = true;
                        }
                    }
                }
            }
        }
    }

    // Backbone probability: fine voxels within the label radius of any
    // backbone heavy atom.
    let (bx, by, bz) = grids.bb_prob.dims();
    let bs = spec.bb_spacing;
    let r = BACKBONE_LABEL_RADIUS;
    for chain in &structure.chains {
        for res in &chain.residues {
            for atom in &res.atoms {
                if !matches!(atom.name.as_str(), "N" | "CA" | "C" | "O") {
                    continue;
                }
                let p = atom.position;
                let lo: [isize; 3] =
                    std::array::from_fn(|a| ((p[a] - r - spec.origin[a]) / bs).ceil() as isize);
                let hi: [isize; 3] =
                    std::array::from_fn(|a| ((p[a] + r - spec.origin[a]) / bs).floor() as isize);
                let dims = [bx as isize, by as isize, bz as isize];
                for iz in lo[2].max(0)..=hi[2].min(dims[2] - 1) {
                    for iy in lo[1].max(0)..=hi[1].min(dims[1] - 1) {
                        for ix in lo[0].max(0)..=hi[0].min(dims[0] - 1) {
                            let c = [
                                spec.origin[0] + ix as f64 * bs,
                                spec.origin[1] + iy as f64 * bs,
                                spec.origin[2] + iz as f64 * bs,
                            ];
                            let d2: f64 = (0..3).map(|a| (c[a] - p[a]).powi(2)).sum();
                            if d2 <= r * r {
                                grids.bb_prob.set(ix as usize, iy as usize, iz as usize, 1.0);
                            }
                        }
                    }
                }
            }
        }
    }

    grids.validate()?;
    Ok(grids)
}

/// Controlled corruption of oracle labels, deterministic under `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Probability of deleting a true C-alpha cell.
    pub ca_dropout: f64,
    /// Expected false-positive C-alpha cells per 1000 empty cells.
    pub fp_rate: f64,
    pub offset_jitter_sigma: f64,
    pub ppv_jitter_sigma: f64,
    /// Dirichlet concentration for smoothing AA distributions; 0 disables.
    pub aa_dirichlet_alpha: f64,
    pub bb_noise_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            ca_dropout: 0.0,
            fp_rate: 0.0,
            offset_jitter_sigma: 0.0,
            ppv_jitter_sigma: 0.0,
            aa_dirichlet_alpha: 0.0,
            bb_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ca_dropout) {
            return Err(Error::InvalidArgument("ca_dropout must be in [0,1]".into()));
        }
        if self.fp_rate < 0.0 || self.fp_rate > 1000.0 {
            return Err(Error::InvalidArgument("fp_rate must be in [0,1000]".into()));
        }
        for (name, v) in [
            ("offset_jitter_sigma", self.offset_jitter_sigma),
            ("ppv_jitter_sigma", self.ppv_jitter_sigma),
            ("aa_dirichlet_alpha", self.aa_dirichlet_alpha),
            ("bb_noise_sigma", self.bb_noise_sigma),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Bookkeeping from a noise run, for count oracles in evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub true_cells: usize,
    pub kept_true_cells: usize,
    pub false_positive_cells: usize,
}

fn dirichlet_smooth(rng: &mut ChaCha8Rng, base: &[f64; 20], alpha: f64) -> [f64; 20] {
    let conc: [f64; 20] = std::array::from_fn(|j| alpha + base[j]);
    let dir = Dirichlet::new(conc).expect("valid concentration");
    dir.sample(rng)
}

/// Corrupt oracle labels per the noise settings; identical seeds give bit-identical
/// output.
pub fn inject_noise(
    labels: &FeatureGrids,
    spec: &NoiseSpec,
) -> Result<(FeatureGrids, NoiseReport)> {
    spec.validate()?;
    let mut out = labels.clone();
    let mut report = NoiseReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (cx, cy, cz) = labels.coarse_dims();
    let cs = labels.ca_prob.spacing()[0];
    let fp_prob = spec.fp_rate / 1000.0;

    for iz in 0..cz {
        for iy in 0..cy {
            for ix in 0..cx {
                let idx = labels.ca_prob.index(ix, iy, iz);
                if labels.ca_mask[idx] {
                    report.true_cells += 1;
                    let dropped =
                        spec.ca_dropout > 0.0 && rng.random::<f64>() < spec.ca_dropout;
                    if dropped {
                        out.ca_mask[idx] = false;
                        out.ppv_mask[idx] = false;
                        out.ca_prob.set(ix, iy, iz, 0.0);
                        for a in 0..3 {
                            out.ca_offset[a].set(ix, iy, iz, 0.0);
                            out.ppv[a].set(ix, iy, iz, 0.0);
                        }
                        for j in 0..20 {
                            out.aa_dist[j].set(ix, iy, iz, 0.0);
                        }
                        continue;
                    }
                    report.kept_true_cells += 1;
                    if spec.offset_jitter_sigma > 0.0 {
                        let n = Normal::new(0.0, spec.offset_jitter_sigma).unwrap();
                        for a in 0..3 {
                            let v = out.ca_offset[a].get(ix, iy, iz) as f64 + n.sample(&mut rng);
                            out.ca_offset[a].set(ix, iy, iz, v.clamp(0.0, cs - 1e-6) as f32);
                        }
                    }
                    if spec.ppv_jitter_sigma > 0.0 && labels.ppv_mask[idx] {
                        let n = Normal::new(0.0, spec.ppv_jitter_sigma).unwrap();
                        for a in 0..3 {
                            let v = out.ppv[a].get(ix, iy, iz) as f64 + n.sample(&mut rng);
                            out.ppv[a].set(ix, iy, iz, v.clamp(-PPV_RANGE, PPV_RANGE) as f32);
                        }
                    }
                    if spec.aa_dirichlet_alpha > 0.0 {
                        let base = labels.aa_dist_at(idx);
                        let smoothed =
                            dirichlet_smooth(&mut rng, &base, spec.aa_dirichlet_alpha);
                        for j in 0..20 {
                            out.aa_dist[j].set(ix, iy, iz, smoothed[j] as f32);
                        }
                    }
                } else if fp_prob > 0.0 && rng.random::<f64>() < fp_prob {
                    report.false_positive_cells += 1;
                    out.ca_mask[idx] = true;
                    out.ppv_mask[idx] = true;
                    out.ca_prob.set(ix, iy, iz, rng.random_range(0.55..1.0));
                    for a in 0..3 {
                        out.ca_offset[a].set(ix, iy, iz, rng.random_range(0.0..cs) as f32);
                    }
                    // short random PPV with a plausible length
                    let dir: [f64; 3] = loop {
                        let v: [f64; 3] =
                            std::array::from_fn(|_| rng.random_range(-1.0f64..1.0));
                        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
                        if norm > 1e-3 {
                            break std::array::from_fn(|a| v[a] / norm);
                        }
                    };
                    let len = rng.random_range(1.0..4.0);
                    for a in 0..3 {
                        out.ppv[a].set(
                            ix,
                            iy,
                            iz,
                            (dir[a] * len).clamp(-PPV_RANGE, PPV_RANGE) as f32,
                        );
                    }
                    let aa = if spec.aa_dirichlet_alpha > 0.0 {
                        dirichlet_smooth(&mut rng, &[0.0; 20], spec.aa_dirichlet_alpha)
                    } else {
                        [1.0 / 20.0; 20]
                    };
                    for j in 0..20 {
                        out.aa_dist[j].set(ix, iy, iz, aa[j] as f32);
                    }
                }
            }
        }
    }

    if spec.bb_noise_sigma > 0.0 {
        let n = Normal::new(0.0, spec.bb_noise_sigma).unwrap();
        let noisy: Vec<f32> = out
            .bb_prob
            .values()
            .iter()
            .map(|&v| (v as f64 + n.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect();
        out.bb_prob = VoxelGrid::new(
            out.bb_prob.dims(),
            out.bb_prob.spacing(),
            out.bb_prob.origin(),
            noisy,
        )?;
    }
    Ok((out, report))
}

/// Dice loss `1 - 2|X o Y| / (|X^2| + |Y^2|)` with smoothing so that an
/// empty-vs-empty pair scores 0.
pub fn dice_loss(pred: &VoxelGrid, label: &VoxelGrid) -> Result<f64> {
    if !pred.same_lattice(label) {
        return Err(Error::GridMismatch("dice loss lattice mismatch".into()));
    }
    let mut inter = 0.0f64;
    let mut sq = 0.0f64;
    for (&x, &y) in pred.values().iter().zip(label.values()) {
        let (x, y) = (x as f64, y as f64);
        inter += x * y;
        sq += x * x + y * y;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTHING) / (sq + DICE_SMOOTHING))
}

/// Backbone segmentation loss (Dice).
pub fn loss_backbone(pred: &VoxelGrid, label: &VoxelGrid) -> Result<f64> {
    dice_loss(pred, label)
}

/// Class-balance weight `beta = 1 - |label| / S^3`.
pub fn bce_beta(label: &VoxelGrid) -> f64 {
    1.0 - label.values().iter().map(|&v| v as f64).sum::<f64>() / label.len() as f64
}

/// C-alpha detection loss: Dice plus class-weighted binary cross entropy.
pub fn loss_ca_detection(pred: &VoxelGrid, label: &VoxelGrid) -> Result<f64> {
    if !pred.same_lattice(label) {
        return Err(Error::GridMismatch("detection loss lattice mismatch".into()));
    }
    let dice = dice_loss(pred, label)?;
    let beta = bce_beta(label);
    let n = pred.len() as f64;
    let mut bce = 0.0f64;
    for (&x, &y) in pred.values().iter().zip(label.values()) {
        let x = (x as f64).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        let y = y as f64;
        bce += beta * y * x.ln() + (1.0 - beta) * (1.0 - y) * (1.0 - x).ln();
    }
    Ok(dice - bce / n)
}

fn masked_mse(
    pred: &[VoxelGrid; 3],
    label: &[VoxelGrid; 3],
    mask: &[bool],
    what: &str,
) -> Result<f64> {
    let n_cells = pred[0].len();
    for a in 0..3 {
        if !pred[a].same_lattice(&label[a]) || pred[a].len() != n_cells {
            return Err(Error::GridMismatch(format!("{what} loss lattice mismatch")));
        }
    }
    if mask.len() != n_cells {
        return Err(Error::GridMismatch(format!("{what} mask length mismatch")));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for idx in 0..n_cells {
        if !mask[idx] {
            continue;
        }
        count += 1;
        for a in 0..3 {
            let d = pred[a].values()[idx] as f64 - label[a].values()[idx] as f64;
            sum += d * d;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("{what} loss over an empty mask")));
    }
    Ok(sum / count as f64)
}

/// Mean squared C-alpha offset error over labeled cells.
pub fn loss_ca_location(
    pred: &[VoxelGrid; 3],
    label: &[VoxelGrid; 3],
    mask: &[bool],
) -> Result<f64> {
    masked_mse(pred, label, mask, "location")
}

/// Mean squared pseudo-peptide-vector error over labeled cells.
pub fn loss_ppv(pred: &[VoxelGrid; 3], label: &[VoxelGrid; 3], mask: &[bool]) -> Result<f64> {
    masked_mse(pred, label, mask, "ppv")
}

/// Mean cross entropy of AA-type distributions over labeled cells.
pub fn loss_aa(pred: &[VoxelGrid], label: &[VoxelGrid], mask: &[bool]) -> Result<f64> {
    if pred.len() != 20 || label.len() != 20 {
        return Err(Error::InvalidArgument("aa loss needs 20 channels".into()));
    }
    let n_cells = pred[0].len();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for idx in 0..n_cells {
        if !mask[idx] {
            continue;
        }
        count += 1;
        for j in 0..20 {
            let z = label[j].values()[idx] as f64;
            if z > 0.0 {
                let p = (pred[j].values()[idx] as f64).max(PROB_FLOOR);
                sum -= z * p.ln();
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("aa loss over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_loc: f64,
    pub lambda_aa: f64,
    pub lambda_ppv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_loc: 1.0,
            lambda_aa: 1.0,
            lambda_ppv: 0.05,
        }
    }
}

/// Weighted sum of the five component losses.
pub fn loss_total(bb: f64, rec: f64, loc: f64, aa: f64, ppv: f64, w: &LossWeights) -> f64 {
    bb + w.lambda_rec * rec + w.lambda_loc * loc + w.lambda_aa * aa + w.lambda_ppv * ppv
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    bb_spacing: f64,
    coarse_spacing: f64,
    coarse_dims: [usize; 3],
    origin: [f64; 3],
    files: Vec<String>,
}

fn channel_files() -> Vec<String> {
    let mut files = vec![
        "bb_prob.mrc".to_string(),
        "ca_prob.mrc".to_string(),
        "offset_x.mrc".to_string(),
        "offset_y.mrc".to_string(),
        "offset_z.mrc".to_string(),
        "ppv_x.mrc".to_string(),
        "ppv_y.mrc".to_string(),
        "ppv_z.mrc".to_string(),
    ];
    for j in 0..20 {
        files.push(format!("aa_{j:02}.mrc"));
    }
    files
}

/// Write the feature-directory layout: one MRC per channel plus
/// `manifest.toml`. Label-side masks are written alongside.
pub fn write_feature_dir(dir: &Path, grids: &FeatureGrids) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let spec = grids.spec();
    let manifest = Manifest {
        bb_spacing: spec.bb_spacing,
        coarse_spacing: spec.coarse_spacing(),
        coarse_dims: [spec.coarse_dims.0, spec.coarse_dims.1, spec.coarse_dims.2],
        origin: spec.origin,
        files: channel_files(),
    };
    let toml = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Serialize(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), toml)?;

    let write = |name: &str, grid: &VoxelGrid| -> Result<()> {
        std::fs::write(dir.join(name), mapio::write_mrc(grid))?;
        Ok(())
    };
    write("bb_prob.mrc", &grids.bb_prob)?;
    write("ca_prob.mrc", &grids.ca_prob)?;
    for (a, axis) in ["x", "y", "z"].iter().enumerate() {
        write(&format!("offset_{axis}.mrc"), &grids.ca_offset[a])?;
        write(&format!("ppv_{axis}.mrc"), &grids.ppv[a])?;
    }
    for j in 0..20 {
        write(&format!("aa_{j:02}.mrc"), &grids.aa_dist[j])?;
    }
    let mask_grid = |mask: &[bool]| {
        VoxelGrid::new(
            grids.ca_prob.dims(),
            grids.ca_prob.spacing(),
            grids.ca_prob.origin(),
            mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask grid")
    };
    write("ca_mask.mrc", &mask_grid(&grids.ca_mask))?;
    write("ppv_mask.mrc", &mask_grid(&grids.ppv_mask))?;
    Ok(())
}

/// Read a feature directory written by [`write_feature_dir`] or produced by
/// a real recognition network. When mask files are absent, the C-alpha mask
/// is derived from `ca_prob >= 0.5` and the PPV mask from nonzero vectors.
pub fn read_feature_dir(dir: &Path) -> Result<FeatureGrids> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.toml"))?;
    let manifest: Manifest =
        toml::from_str(&manifest_text).map_err(|e| Error::Serialize(e.to_string()))?;
    let read = |name: &str| -> Result<VoxelGrid> {
        let bytes = std::fs::read(dir.join(name))?;
        mapio::parse_mrc(&bytes)
    };
    let bb_prob = read("bb_prob.mrc")?;
    let ca_prob = read("ca_prob.mrc")?;
    if ca_prob.dims()
        != (
            manifest.coarse_dims[0],
            manifest.coarse_dims[1],
            manifest.coarse_dims[2],
        )
    {
        return Err(Error::GridMismatch(
            "ca_prob dims disagree with manifest".into(),
        ));
    }
    let ca_offset = [read("offset_x.mrc")?, read("offset_y.mrc")?, read("offset_z.mrc")?];
    let ppv = [read("ppv_x.mrc")?, read("ppv_y.mrc")?, read("ppv_z.mrc")?];
    let mut aa_dist = Vec::with_capacity(20);
    for j in 0..20 {
        aa_dist.push(read(&format!("aa_{j:02}.mrc"))?);
    }
    let ca_mask = match read("ca_mask.mrc") {
        Ok(g) => g.values().iter().map(|&v| v > 0.5).collect(),
        Err(_) => ca_prob.values().iter().map(|&v| v >= 0.5).collect(),
    };
    let ppv_mask = match read("ppv_mask.mrc") {
        Ok(g) => g.values().iter().map(|&v| v > 0.5).collect(),
        Err(_) => (0..ppv[0].len())
            .map(|i| (0..3).any(|a| ppv[a].values()[i] != 0.0))
            .collect(),
    };
    Ok(FeatureGrids {
        bb_prob,
        ca_prob,
        ca_offset,
        ppv,
        aa_dist,
        ca_mask,
        ppv_mask,
    })
}


#[cfg(test)]
mod tests {
    use super::test_fixtures::*;
    use super::*;
    use crate::structio::AminoAcid;

    fn spec_for(structure: &Structure) -> LabelGridSpec {
        LabelGridSpec::covering(structure, 1.0, 6.0).unwrap()
    }

    #[test]
    fn single_residue_at_corner() {
        let spec = LabelGridSpec {
            origin: [0.0; 3],
            coarse_dims: (4, 4, 4),
            bb_spacing: 1.0,
        };
        let s = ca_chain(&[[2.0, 2.0, 2.0]], None);
        let g = generate_labels(&s, &spec).unwrap();
        let idx = g.ca_prob.index(1, 1, 1);
        assert!(g.ca_mask[idx]);
        assert!(!g.ppv_mask[idx]); // terminal residue
        for a in 0..3 {
            assert_eq!(g.ca_offset[a].values()[idx], 0.0);
        }
    }

    #[test]
    fn consecutive_cas_ppv() {
        let s = ca_chain(&[[0.3, 0.3, 0.3], [4.1, 0.3, 0.3]], None);
        let spec = spec_for(&s);
        let g = generate_labels(&s, &spec).unwrap();
        let masked: Vec<usize> = (0..g.coarse_cell_count())
            .filter(|&i| g.ppv_mask[i])
            .collect();
        assert_eq!(masked.len(), 1);
        let idx = masked[0];
        assert!((g.ppv[0].values()[idx] - 3.8).abs() < 1e-6);
        assert_eq!(g.ppv[1].values()[idx], 0.0);
        assert_eq!(g.ppv[2].values()[idx], 0.0);
    }

    #[test]
    fn ten_residue_counts() {
        let s = straight_chain(10, [1.0, 1.0, 1.0]);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        assert_eq!(g.ca_mask.iter().filter(|&&m| m).count(), 10);
        assert_eq!(g.ppv_mask.iter().filter(|&&m| m).count(), 9);
        assert_eq!(
            g.ca_prob.values().iter().filter(|&&v| v == 1.0).count(),
            10
        );
    }

    #[test]
    fn two_cas_in_one_cell_rejected() {
        let s = ca_chain(&[[1.0, 1.0, 1.0], [1.5, 1.2, 1.1]], None);
        assert!(generate_labels(&s, &spec_for(&s)).is_err());
    }

    #[test]
    fn long_gap_masks_ppv() {
        let s = ca_chain(&[[1.0, 1.0, 1.0], [8.0, 1.0, 1.0]], None);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        assert_eq!(g.ppv_mask.iter().filter(|&&m| m).count(), 0);
        assert_eq!(g.ca_mask.iter().filter(|&&m| m).count(), 2);
    }

    #[test]
    fn labels_translate_with_structure() {
        let s = straight_chain(5, [2.1, 3.2, 4.3]);
        let spec = LabelGridSpec {
            origin: [-4.0; 3],
            coarse_dims: (16, 8, 8),
            bb_spacing: 1.0,
        };
        let g1 = generate_labels(&s, &spec).unwrap();
        // translate by one coarse cell along y
        let mut s2 = s.clone();
        for chain in &mut s2.chains {
            for res in &mut chain.residues {
                for atom in &mut res.atoms {
                    atom.position[1] += 2.0;
                }
            }
        }
        let g2 = generate_labels(&s2, &spec).unwrap();
        let (cx, cy, cz) = g1.coarse_dims();
        for iz in 0..cz {
            for iy in 0..cy - 1 {
                for ix in 0..cx {
                    let a = g1.ca_prob.index(ix, iy, iz);
                    let b = g1.ca_prob.index(ix, iy + 1, iz);
                    assert_eq!(g1.ca_mask[a], g2.ca_mask[b]);
                    if g1.ca_mask[a] {
                        for ax in 0..3 {
                            assert!(
                                (g1.ca_offset[ax].values()[a] - g2.ca_offset[ax].values()[b])
                                    .abs()
                                    < 1e-5
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn noise_identity_when_zeroed() {
        let s = straight_chain(8, [1.0, 1.0, 1.0]);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        let (noisy, report) = inject_noise(&g, &NoiseSpec::default()).unwrap();
        assert_eq!(noisy, g);
        assert_eq!(report.kept_true_cells, 8);
        assert_eq!(report.false_positive_cells, 0);
    }

    #[test]
    fn noise_full_dropout() {
        let s = straight_chain(8, [1.0, 1.0, 1.0]);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        let spec = NoiseSpec {
            ca_dropout: 1.0,
            ..NoiseSpec::default()
        };
        let (noisy, report) = inject_noise(&g, &spec).unwrap();
        assert_eq!(report.kept_true_cells, 0);
        assert!(noisy.ca_mask.iter().all(|&m| !m));
        assert!(noisy.ca_prob.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_deterministic_under_seed() {
        let s = straight_chain(12, [1.0, 1.0, 1.0]);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        let spec = NoiseSpec {
            ca_dropout: 0.2,
            fp_rate: 10.0,
            offset_jitter_sigma: 0.3,
            ppv_jitter_sigma: 0.3,
            aa_dirichlet_alpha: 0.5,
            bb_noise_sigma: 0.05,
            seed: 99,
        };
        let a = inject_noise(&g, &spec).unwrap();
        let b = inject_noise(&g, &spec).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn noise_fp_rate_statistics() {
        // false-positive count over many seeds stays within 3 sigma of the
        // binomial mean
        let s = straight_chain(10, [1.0, 1.0, 1.0]);
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        let empty = g.coarse_cell_count() - 10;
        let rate = 20.0;
        let p = rate / 1000.0;
        let seeds = 100;
        let mut total_fp = 0usize;
        for seed in 0..seeds {
            let spec = NoiseSpec {
                fp_rate: rate,
                seed,
                ..NoiseSpec::default()
            };
            total_fp += inject_noise(&g, &spec).unwrap().1.false_positive_cells;
        }
        let n = (seeds as usize * empty) as f64;
        let mean = n * p;
        let sd = (n * p * (1.0 - p)).sqrt();
        let observed = total_fp as f64;
        assert!(
            (observed - mean).abs() < 3.0 * sd,
            "observed {observed}, expected {mean} +- {sd}"
        );
    }

    fn random_prob_grid(seed: u64, dims: (usize, usize, usize)) -> VoxelGrid {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        VoxelGrid::new(dims, [1.0; 3], [0.0; 3], values).unwrap()
    }

    // independent scalar-loop oracle for the dice loss
    fn dice_oracle(x: &[f32], y: &[f32]) -> f64 {
        let mut inter = 0.0;
        let mut sq = 0.0;
        for i in 0..x.len() {
            inter += x[i] as f64 * y[i] as f64;
            sq += (x[i] as f64).powi(2) + (y[i] as f64).powi(2);
        }
        1.0 - (2.0 * inter + 1e-7) / (sq + 1e-7)
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let g = random_prob_grid(1, (8, 8, 8));
        assert!(dice_loss(&g, &g).unwrap().abs() < 1e-6);
        let mut a = VoxelGrid::zeros((4, 4, 4), [1.0; 3], [0.0; 3]);
        let mut b = a.clone();
        a.set(0, 0, 0, 1.0);
        b.set(1, 0, 0, 1.0);
        assert!((dice_loss(&a, &b).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_matches_loop_oracle() {
        for seed in 0..20 {
            let p = random_prob_grid(seed, (8, 8, 8));
            let l = random_prob_grid(seed + 1000, (8, 8, 8));
            let got = dice_loss(&p, &l).unwrap();
            let want = dice_oracle(p.values(), l.values());
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_loss_beta_and_oracle() {
        // beta for a 4^3 grid with 4 positives
        let mut label = VoxelGrid::zeros((4, 4, 4), [1.0; 3], [0.0; 3]);
        for i in 0..4 {
            label.set(i, 0, 0, 1.0);
        }
        assert!((bce_beta(&label) - 0.9375).abs() < 1e-12);

        // all-empty label, pred = 0.5 everywhere, against the loop oracle
        let empty = VoxelGrid::zeros((4, 4, 4), [1.0; 3], [0.0; 3]);
        let half = empty.map_values(|_| 0.5).unwrap();
        let got = loss_ca_detection(&half, &empty).unwrap();
        let beta = 1.0;
        let n = 64.0;
        let dice = dice_oracle(half.values(), empty.values());
        let bce = -((1.0 - beta) * 64.0 * 0.5f64.ln()) / n;
        assert!((got - (dice + bce)).abs() < 1e-9);

        for seed in 0..20 {
            let p = random_prob_grid(seed, (4, 4, 4));
            let l = random_prob_grid(seed + 77, (4, 4, 4))
                .map_values(|v| if v > 0.5 { 1.0 } else { 0.0 })
                .unwrap();
            let got = loss_ca_detection(&p, &l).unwrap();
            // loop oracle
            let beta = 1.0 - l.values().iter().map(|&v| v as f64).sum::<f64>() / 64.0;
            let mut bce = 0.0;
            for i in 0..64 {
                let x = (p.values()[i] as f64).clamp(1e-9, 1.0 - 1e-9);
                let y = l.values()[i] as f64;
                bce += beta * y * x.ln() + (1.0 - beta) * (1.0 - y) * (1.0 - x).ln();
            }
            let want = dice_oracle(p.values(), l.values()) - bce / 64.0;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn location_loss_cases() {
        let zero = VoxelGrid::zeros((2, 2, 2), [2.0; 3], [0.0; 3]);
        let pred = [zero.clone(), zero.clone(), zero.clone()];
        let mut l0 = zero.clone();
        l0.set(0, 0, 0, 1.0);
        let mut l1 = zero.clone();
        l1.set(0, 0, 0, 2.0);
        let mut l2 = zero.clone();
        l2.set(0, 0, 0, 2.0);
        let label = [l0, l1, l2];
        let mut mask = vec![false; 8];
        mask[0] = true;
        // error vector (1,2,2) -> 9.0
        assert!((loss_ca_location(&pred, &label, &mask).unwrap() - 9.0).abs() < 1e-9);
        // identical -> 0
        assert_eq!(loss_ca_location(&label, &label, &mask).unwrap(), 0.0);
        // empty mask -> error
        assert!(loss_ca_location(&pred, &label, &vec![false; 8]).is_err());
    }

    #[test]
    fn ppv_loss_single_cell() {
        let zero = VoxelGrid::zeros((2, 2, 2), [2.0; 3], [0.0; 3]);
        let pred = [zero.clone(), zero.clone(), zero.clone()];
        let mut lx = zero.clone();
        lx.set(0, 0, 0, 3.8);
        let label = [lx, zero.clone(), zero.clone()];
        let mut mask = vec![false; 8];
        mask[0] = true;
        let got = loss_ppv(&pred, &label, &mask).unwrap();
        assert!((got - 14.44).abs() < 1e-5);
    }

    #[test]
    fn aa_loss_uniform_is_log20() {
        let zero = VoxelGrid::zeros((2, 2, 2), [2.0; 3], [0.0; 3]);
        let pred: Vec<VoxelGrid> = (0..20)
            .map(|_| zero.map_values(|_| 0.05).unwrap())
            .collect();
        let mut label: Vec<VoxelGrid> = (0..20).map(|_| zero.clone()).collect();
        label[7].set(0, 0, 0, 1.0);
        let mask = {
            let mut m = vec![false; 8];
            m[0] = true;
            m
        };
        let got = loss_aa(&pred, &label, &mask).unwrap();
        assert!((got - 20.0f64.ln()).abs() < 1e-6);
        // perfect one-hot prediction -> ~0
        assert!(loss_aa(&label, &label, &mask).unwrap().abs() < 1e-9);
    }

    #[test]
    fn masked_losses_match_loop_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let dims = (4, 4, 4);
            let n = 64;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let vals: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                VoxelGrid::new(dims, [2.0; 3], [0.0; 3], vals).unwrap()
            };
            let pred = [mk(&mut rng), mk(&mut rng), mk(&mut rng)];
            let label = [mk(&mut rng), mk(&mut rng), mk(&mut rng)];
            let mask: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.4).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let got = loss_ca_location(&pred, &label, &mask).unwrap();
            let mut sum = 0.0;
            let mut cnt = 0;
            for i in 0..n {
                if mask[i] {
                    cnt += 1;
                    for a in 0..3 {
                        sum += (pred[a].values()[i] as f64 - label[a].values()[i] as f64).powi(2);
                    }
                }
            }
            assert!((got - sum / cnt as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, 0.0, &w), 0.0);
        assert!((loss_total(1.0, 1.0, 1.0, 1.0, 1.0, &w) - 4.05).abs() < 1e-12);
        let custom = LossWeights {
            lambda_rec: 0.5,
            lambda_loc: 2.0,
            lambda_aa: 0.1,
            lambda_ppv: 1.5,
        };
        let got = loss_total(0.3, 0.7, 1.1, 0.2, 0.9, &custom);
        let want = 0.3 + 0.5 * 0.7 + 2.0 * 1.1 + 0.1 * 0.2 + 1.5 * 0.9;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn feature_dir_roundtrip() {
        let s = ca_chain(
            &[[1.0, 1.0, 1.0], [4.8, 1.0, 1.0], [8.6, 1.0, 1.0]],
            Some(&[
                AminoAcid::from_one_letter('M').unwrap(),
                AminoAcid::from_one_letter('K').unwrap(),
                AminoAcid::from_one_letter('W').unwrap(),
            ]),
        );
        let g = generate_labels(&s, &spec_for(&s)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_feature_dir(dir.path(), &g).unwrap();
        let back = read_feature_dir(dir.path()).unwrap();
        assert_eq!(back.ca_prob.values(), g.ca_prob.values());
        assert_eq!(back.ca_mask, g.ca_mask);
        assert_eq!(back.ppv_mask, g.ppv_mask);
        for a in 0..3 {
            assert_eq!(back.ca_offset[a].values(), g.ca_offset[a].values());
            assert_eq!(back.ppv[a].values(), g.ppv[a].values());
        }
        for j in 0..20 {
            assert_eq!(back.aa_dist[j].values(), g.aa_dist[j].values());
        }
        assert_eq!(back.bb_prob.values(), g.bb_prob.values());
    }
}
