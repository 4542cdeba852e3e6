//! Flexible fitting of a CA-level model into map-derived potentials:
//! targeted pulling toward recognized fragment positions, density-gradient
//! forces, and cross-correlation-driven forces, integrated with damped
//! velocity-Verlet dynamics over minimal chain physics (bonds, angles,
//! excluded volume).

use serde::{Deserialize, Serialize};

use crate::density::SimulationSpec;
use crate::error::{Error, Result};
use crate::mapio::VoxelGrid;
use crate::structio::Structure;

/// Hard cap on per-atom displacement per integration step, in angstroms.
pub const DEFAULT_MAX_DISPLACEMENT: f64 = 0.1;
/// Total energy above this magnitude aborts a run as divergent.
pub const DIVERGENCE_ENERGY: f64 = 1e8;

// ---------------------------------------------------------------------------
// Topology
// ---------------------------------------------------------------------------

/// Force-field constants for the coarse chain model. One particle per
/// residue, placed at the CA atom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologyParams {
    pub k_bond: f64,
    pub bond_rest: f64,
    pub k_angle: f64,
    pub k_rep: f64,
    /// Particle radius for excluded volume; repulsion acts below twice this.
    pub repulsion_radius: f64,
    /// Same-chain pairs within this many bonds are exempt from repulsion,
    /// so short-range backbone contacts (helical turns) are not penalized.
    pub exclusion_separation: usize,
}

impl Default for TopologyParams {
    fn default() -> Self {
        Self {
            k_bond: 40.0,
            bond_rest: 3.8,
            k_angle: 10.0,
            k_rep: 20.0,
            repulsion_radius: 3.0,
            exclusion_separation: 3,
        }
    }
}

/// Bonded terms derived from a structure: consecutive-residue bonds,
/// consecutive-triple angles with rest values captured from the input
/// geometry, and the chain bookkeeping needed for repulsion exclusions.
#[derive(Debug, Clone)]
pub struct Topology {
    pub n_particles: usize,
    /// (i, j, rest length)
    pub bonds: Vec<(usize, usize, f64)>,
    /// (i, j, k, rest angle at j, radians)
    pub angles: Vec<(usize, usize, usize, f64)>,
    /// Chain ordinal per particle.
    pub chain_of: Vec<usize>,
    /// Position within the chain per particle.
    pub seq_pos: Vec<usize>,
    pub params: TopologyParams,
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy(y: &mut [f64; 3], a: f64, x: [f64; 3]) {
    for k in 0..3 {
        y[k] += a * x[k];
    }
}

impl Topology {
    /// One particle per residue at its CA. Errors if any residue lacks a CA.
    pub fn from_structure(structure: &Structure, params: TopologyParams) -> Result<Self> {
        let mut chain_of = Vec::new();
        let mut seq_pos = Vec::new();
        let mut coords: Vec<[f64; 3]> = Vec::new();
        for (ci, chain) in structure.chains.iter().enumerate() {
            for (ri, res) in chain.residues.iter().enumerate() {
                let ca = res.ca().ok_or_else(|| {
                    Error::Structure(format!(
                        "residue {} in chain {} has no CA atom",
                        res.index, chain.id
                    ))
                })?;
                chain_of.push(ci);
                seq_pos.push(ri);
                coords.push(ca.position);
            }
        }
        let n = coords.len();
        if n == 0 {
            return Err(Error::Structure("structure has no residues".into()));
        }
        let mut bonds = Vec::new();
        let mut angles = Vec::new();
        for i in 0..n.saturating_sub(1) {
            if chain_of[i] == chain_of[i + 1] {
                bonds.push((i, i + 1, params.bond_rest));
            }
        }
        for i in 0..n.saturating_sub(2) {
            if chain_of[i] == chain_of[i + 2] {
                let u = sub(coords[i], coords[i + 1]);
                let v = sub(coords[i + 2], coords[i + 1]);
                let c = (dot(u, v) / (norm(u) * norm(v))).clamp(-1.0, 1.0);
                angles.push((i, i + 1, i + 2, c.acos()));
            }
        }
        Ok(Self {
            n_particles: n,
            bonds,
            angles,
            chain_of,
            seq_pos,
            params,
        })
    }

    fn repulsion_excluded(&self, i: usize, j: usize) -> bool {
        self.chain_of[i] == self.chain_of[j]
            && self.seq_pos[i].abs_diff(self.seq_pos[j]) <= self.params.exclusion_separation
    }
}

/// Per-component energies of the chain-physics term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BondedBreakdown {
    pub bond: f64,
    pub angle: f64,
    pub repulsion: f64,
}

impl BondedBreakdown {
    pub fn total(&self) -> f64 {
        self.bond + self.angle + self.repulsion
    }
}

/// Harmonic bonds `1/2 k (d - rest)^2`, harmonic angles
/// `1/2 k (theta - rest)^2`, and soft-core repulsion
/// `1/2 k (2R - d)^2` for non-excluded pairs closer than `2R`.
pub fn bonded_energy_forces(
    coords: &[[f64; 3]],
    topo: &Topology,
) -> Result<(BondedBreakdown, Vec<[f64; 3]>)> {
    if coords.len() != topo.n_particles {
        return Err(Error::InvalidArgument(format!(
            "coordinate count {} does not match topology ({})",
            coords.len(),
            topo.n_particles
        )));
    }
    let mut e = BondedBreakdown::default();
    let mut forces = vec![[0.0f64; 3]; coords.len()];
    let p = &topo.params;

    for &(i, j, rest) in &topo.bonds {
        let d = sub(coords[i], coords[j]);
        let r = norm(d);
        if r < 1e-12 {
            continue;
        }
        let dx = r - rest;
        e.bond += 0.5 * p.k_bond * dx * dx;
        let f = -p.k_bond * dx / r;
        axpy(&mut forces[i], f, d);
        axpy(&mut forces[j], -f, d);
    }

    for &(i, j, k, rest) in &topo.angles {
        let u = sub(coords[i], coords[j]);
        let v = sub(coords[k], coords[j]);
        let ru = norm(u);
        let rv = norm(v);
        if ru < 1e-12 || rv < 1e-12 {
            continue;
        }
        let c = (dot(u, v) / (ru * rv)).clamp(-1.0, 1.0);
        let theta = c.acos();
        let dtheta = theta - rest;
        e.angle += 0.5 * p.k_angle * dtheta * dtheta;
        let s = (1.0 - c * c).sqrt();
        if s < 1e-8 {
            // collinear triple: direction of the angle gradient is
            // undefined; energy is retained, force skipped
            continue;
        }
        // dU/dtheta * dtheta/dr, with dtheta/dcos = -1/sin
        let coeff = p.k_angle * dtheta / s;
        for k_ax in 0..3 {
            let du = (v[k_ax] / (ru * rv)) - c * u[k_ax] / (ru * ru);
            let dv = (u[k_ax] / (ru * rv)) - c * v[k_ax] / (rv * rv);
            forces[i][k_ax] += coeff * du;
            forces[k][k_ax] += coeff * dv;
            forces[j][k_ax] -= coeff * (du + dv);
        }
    }

    let cutoff = 2.0 * p.repulsion_radius;
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            if topo.repulsion_excluded(i, j) {
                continue;
            }
            let d = sub(coords[i], coords[j]);
            let r = norm(d);
            if r >= cutoff || r < 1e-12 {
                continue;
            }
            let pen = cutoff - r;
            e.repulsion += 0.5 * p.k_rep * pen * pen;
            let f = p.k_rep * pen / r;
            axpy(&mut forces[i], f, d);
            axpy(&mut forces[j], -f, d);
        }
    }
    Ok((e, forces))
}

// ---------------------------------------------------------------------------
// Targeted pulling
// ---------------------------------------------------------------------------

/// Harmonic schedule pulling a subset of particles toward fixed target
/// positions in the map frame (no rigid superposition).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TmdRestraint {
    pub atom_ids: Vec<usize>,
    pub targets: Vec<[f64; 3]>,
    /// Force constant applied to the collective distance.
    pub h: f64,
    /// Schedule length in steps; the target collective distance shrinks
    /// linearly from its initial value to zero over this many steps.
    pub t_total: usize,
    /// Collective distance at construction time.
    pub d0: f64,
}

fn collective_distance(coords: &[[f64; 3]], atom_ids: &[usize], targets: &[[f64; 3]]) -> f64 {
    atom_ids
        .iter()
        .zip(targets)
        .map(|(&i, t)| {
            let d = sub(coords[i], *t);
            dot(d, d)
        })
        .sum::<f64>()
        .sqrt()
}

impl TmdRestraint {
    pub fn new(
        atom_ids: Vec<usize>,
        targets: Vec<[f64; 3]>,
        h: f64,
        t_total: usize,
        initial_coords: &[[f64; 3]],
    ) -> Result<Self> {
        if atom_ids.is_empty() || atom_ids.len() != targets.len() {
            return Err(Error::InvalidArgument(
                "restraint needs equal nonempty atom and target lists".into(),
            ));
        }
        let mut sorted = atom_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != atom_ids.len() {
            return Err(Error::InvalidArgument("duplicate restrained atom".into()));
        }
        if let Some(&max) = sorted.last() {
            if max >= initial_coords.len() {
                return Err(Error::InvalidArgument(format!(
                    "restrained atom {max} out of range"
                )));
            }
        }
        if !(h > 0.0) || t_total == 0 {
            return Err(Error::InvalidArgument(
                "force constant and schedule length must be positive".into(),
            ));
        }
        let d0 = collective_distance(initial_coords, &atom_ids, &targets);
        Ok(Self {
            atom_ids,
            targets,
            h,
            t_total,
            d0,
        })
    }

    /// RMSD of the restrained atoms to their targets.
    pub fn rmsd_to_target(&self, coords: &[[f64; 3]]) -> f64 {
        collective_distance(coords, &self.atom_ids, &self.targets)
            / (self.atom_ids.len() as f64).sqrt()
    }
}

/// Schedule factor: 1 at step 0, 0 at `t_total`, linear in between.
pub fn gamma(t: usize, t_total: usize) -> f64 {
    1.0 - (t as f64 / t_total as f64)
}

/// `U = 1/2 h (D(t) - gamma(t) D0)^2` with
/// `D(t) = sqrt(sum |r_i - target_i|^2)` over restrained atoms.
/// At `D(t) = 0` the force direction is undefined and defined as zero.
pub fn tmd_energy_forces(
    coords: &[[f64; 3]],
    restraint: &TmdRestraint,
    t: usize,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if t > restraint.t_total {
        return Err(Error::InvalidArgument(format!(
            "step {t} beyond schedule length {}",
            restraint.t_total
        )));
    }
    if restraint.atom_ids.is_empty() {
        return Err(Error::InvalidArgument("empty restraint".into()));
    }
    let d = collective_distance(coords, &restraint.atom_ids, &restraint.targets);
    let lag = d - gamma(t, restraint.t_total) * restraint.d0;
    let energy = 0.5 * restraint.h * lag * lag;
    let mut forces = vec![[0.0f64; 3]; coords.len()];
    if d > 1e-12 {
        let coeff = -restraint.h * lag / d;
        for (&i, target) in restraint.atom_ids.iter().zip(&restraint.targets) {
            axpy(&mut forces[i], coeff, sub(coords[i], *target));
        }
    }
    Ok((energy, forces))
}

// ---------------------------------------------------------------------------
// Density-derived potentials
// ---------------------------------------------------------------------------

/// Map potential `U = sum_i k (1 - rho(r_i) / rho_max)` over the selected
/// atoms, with trilinear density interpolation. Atoms outside the map
/// extent contribute `k` with zero force.
pub fn mdff_energy_forces(
    coords: &[[f64; 3]],
    map: &VoxelGrid,
    k: f64,
    atom_ids: Option<&[usize]>,
) -> Result<(f64, Vec<[f64; 3]>)> {
    let rho_max = map.max_value() as f64;
    if !(rho_max > 0.0) {
        return Err(Error::Degenerate(
            "map maximum must be positive for a density potential".into(),
        ));
    }
    let mut energy = 0.0;
    let mut forces = vec![[0.0f64; 3]; coords.len()];
    let all: Vec<usize>;
    let ids: &[usize] = match atom_ids {
        Some(ids) => ids,
        None => {
            all = (0..coords.len()).collect();
            &all
        }
    };
    for &i in ids {
        if i >= coords.len() {
            return Err(Error::InvalidArgument(format!("atom {i} out of range")));
        }
        let (rho, grad) = crate::density::interpolate(map, coords[i]);
        energy += k * (1.0 - rho / rho_max);
        axpy(&mut forces[i], k / rho_max, grad);
    }
    Ok((energy, forces))
}

/// Correlation potential `U = k (1 - ccc(exp, sim(coords)))` where the
/// simulated map uses the same truncated-Gaussian kernel as
/// [`crate::density::simulate_density_points`] but accumulated in f64 so
/// the energy is a smooth function of the coordinates. Returns
/// `(energy, ccc, forces)` with analytic chain-rule forces.
pub fn cdmd_energy_forces(
    coords: &[[f64; 3]],
    exp_map: &VoxelGrid,
    k: f64,
    sim: &SimulationSpec,
) -> Result<(f64, f64, Vec<[f64; 3]>)> {
    let (nx, ny, nz) = sim.grid.dims;
    if (nx, ny, nz) != exp_map.dims()
        || sim.grid.spacing != exp_map.spacing()
        || sim.grid.origin != exp_map.origin()
    {
        return Err(Error::GridMismatch(
            "simulation lattice must match the experimental map".into(),
        ));
    }
    let sigma = sim.kernel_sigma();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let inv_sigma_sq = 1.0 / (sigma * sigma);
    let cut = 4.0 * sigma;
    let cut_sq = cut * cut;
    let sp = sim.grid.spacing;
    let org = sim.grid.origin;
    let w = sim.atom_weight;

    // voxel ranges touched by one atom
    let ranges = |p: &[f64; 3]| -> Option<[(usize, usize); 3]> {
        let dims = [nx, ny, nz];
        let mut out = [(0usize, 0usize); 3];
        for a in 0..3 {
            let lo = ((p[a] - cut - org[a]) / sp[a]).ceil().max(0.0) as usize;
            let hi = ((p[a] + cut - org[a]) / sp[a]).floor();
            if hi < 0.0 || lo >= dims[a] {
                return None;
            }
            out[a] = (lo, (hi as usize).min(dims[a] - 1));
        }
        Some(out)
    };

    let mut rho_s = vec![0.0f64; nx * ny * nz];
    for p in coords {
        let Some([(x0, x1), (y0, y1), (z0, z1)]) = ranges(p) else {
            continue;
        };
        for iz in z0..=z1 {
            let dz = org[2] + iz as f64 * sp[2] - p[2];
            for iy in y0..=y1 {
                let dy = org[1] + iy as f64 * sp[1] - p[1];
                for ix in x0..=x1 {
                    let dx = org[0] + ix as f64 * sp[0] - p[0];
                    let r_sq = dx * dx + dy * dy + dz * dz;
                    if r_sq <= cut_sq {
                        rho_s[ix + nx * (iy + ny * iz)] += w
                            * ((-r_sq * inv_two_sigma_sq).exp()
                                - crate::density::KERNEL_FLOOR);
                    }
                }
            }
        }
    }

    let exp_vals = exp_map.values();
    let mut a_sum = 0.0f64; // sum rho_e * rho_s
    let mut b_sum = 0.0f64; // sum rho_s^2
    let mut c_sum = 0.0f64; // sum rho_e^2
    for (v, &e) in rho_s.iter().zip(exp_vals) {
        let e = e as f64;
        a_sum += e * v;
        b_sum += v * v;
        c_sum += e * e;
    }
    if c_sum == 0.0 {
        return Err(Error::Degenerate("experimental map is all zero".into()));
    }
    if b_sum == 0.0 {
        return Err(Error::Degenerate(
            "simulated map is all zero (atoms outside grid)".into(),
        ));
    }
    let ccc = a_sum / (b_sum * c_sum).sqrt();
    let energy = k * (1.0 - ccc);

    // d ccc / d rho_s(v), shared across atoms
    let inv_sqrt_bc = 1.0 / (b_sum * c_sum).sqrt();
    let coeff_b = a_sum / (b_sum.powf(1.5) * c_sum.sqrt());
    let mut forces = vec![[0.0f64; 3]; coords.len()];
    for (i, p) in coords.iter().enumerate() {
        let Some([(x0, x1), (y0, y1), (z0, z1)]) = ranges(p) else {
            continue;
        };
        let mut f = [0.0f64; 3];
        for iz in z0..=z1 {
            let dz = org[2] + iz as f64 * sp[2] - p[2];
            for iy in y0..=y1 {
                let dy = org[1] + iy as f64 * sp[1] - p[1];
                for ix in x0..=x1 {
                    let dx = org[0] + ix as f64 * sp[0] - p[0];
                    let r_sq = dx * dx + dy * dy + dz * dz;
                    if r_sq > cut_sq {
                        continue;
                    }
                    let idx = ix + nx * (iy + ny * iz);
                    let g = exp_vals[idx] as f64 * inv_sqrt_bc - coeff_b * rho_s[idx];
                    let kern = w * (-r_sq * inv_two_sigma_sq).exp() * inv_sigma_sq;
                    // d rho_s(v)/d r_i = kern * (x_v - r_i)
                    f[0] += g * kern * dx;
                    f[1] += g * kern * dy;
                    f[2] += g * kern * dz;
                }
            }
        }
        for ax in 0..3 {
            forces[i][ax] = k * f[ax];
        }
    }
    Ok((energy, ccc, forces))
}

/// Harmonic tether `1/2 k |r_i - ref_i|^2` for each selected atom.
pub fn positional_restraints(
    coords: &[[f64; 3]],
    ref_coords: &[[f64; 3]],
    atom_ids: &[usize],
    k_pos: f64,
) -> Result<(f64, Vec<[f64; 3]>)> {
    if ref_coords.len() != coords.len() {
        return Err(Error::InvalidArgument(
            "reference coordinates must match particle count".into(),
        ));
    }
    let mut energy = 0.0;
    let mut forces = vec![[0.0f64; 3]; coords.len()];
    for &i in atom_ids {
        if i >= coords.len() {
            return Err(Error::InvalidArgument(format!("atom {i} out of range")));
        }
        let d = sub(coords[i], ref_coords[i]);
        energy += 0.5 * k_pos * dot(d, d);
        axpy(&mut forces[i], -k_pos, d);
    }
    Ok((energy, forces))
}

// ---------------------------------------------------------------------------
// Staged runs
// ---------------------------------------------------------------------------

/// One potential active during a stage. Multiple terms in one stage run
/// simultaneously as a summed potential.
#[derive(Debug, Clone)]
pub enum StageTerm<'a> {
    Tmd(TmdRestraint),
    Mdff {
        map: &'a VoxelGrid,
        k: f64,
        atom_ids: Option<Vec<usize>>,
    },
    Cdmd {
        map: &'a VoxelGrid,
        k: f64,
        sim: SimulationSpec,
    },
}

/// Integration and termination settings for one fitting stage.
#[derive(Debug, Clone)]
pub struct StageSpec<'a> {
    pub name: String,
    pub terms: Vec<StageTerm<'a>>,
    /// Atoms tethered to their stage-entry positions.
    pub restrained_atoms: Vec<usize>,
    pub k_pos: f64,
    pub max_steps: usize,
    /// Stop once the largest per-atom force norm falls below this
    /// (for pulling schedules, only after the schedule has finished).
    pub force_tolerance: f64,
    /// Stop once the correlation of a correlation-driven term reaches this.
    pub ccc_target: Option<f64>,
    pub dt: f64,
    /// Fraction of velocity removed per step; 1.0 is steepest descent.
    pub friction: f64,
    pub max_displacement: f64,
    pub sample_interval: usize,
}

impl<'a> StageSpec<'a> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            terms: Vec::new(),
            restrained_atoms: Vec::new(),
            k_pos: 10.0,
            max_steps: 500,
            force_tolerance: 1e-3,
            ccc_target: None,
            dt: 0.1,
            friction: 0.9,
            max_displacement: DEFAULT_MAX_DISPLACEMENT,
            sample_interval: 10,
        }
    }
}

/// Dynamic state of a fitting run.
#[derive(Debug, Clone)]
pub struct FitState {
    pub coords: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
    pub t: usize,
}

/// One sampled point of a trajectory log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub stage: String,
    pub step: usize,
    pub bond: f64,
    pub angle: f64,
    pub repulsion: f64,
    pub pulling: f64,
    pub density: f64,
    pub correlation: f64,
    pub positional: f64,
    pub total: f64,
    pub rmsd_to_target: Option<f64>,
    pub ccc: Option<f64>,
    pub max_force: f64,
}

struct Evaluation {
    record: TrajectoryRecord,
    forces: Vec<[f64; 3]>,
}

fn evaluate(
    stage: &StageSpec,
    topo: &Topology,
    coords: &[[f64; 3]],
    stage_ref: &[[f64; 3]],
    t: usize,
    step: usize,
) -> Result<Evaluation> {
    let (bonded, mut forces) = bonded_energy_forces(coords, topo)?;
    let mut rec = TrajectoryRecord {
        stage: stage.name.clone(),
        step,
        bond: bonded.bond,
        angle: bonded.angle,
        repulsion: bonded.repulsion,
        pulling: 0.0,
        density: 0.0,
        correlation: 0.0,
        positional: 0.0,
        total: 0.0,
        rmsd_to_target: None,
        ccc: None,
        max_force: 0.0,
    };
    for term in &stage.terms {
        match term {
            StageTerm::Tmd(r) => {
                let (e, f) = tmd_energy_forces(coords, r, t.min(r.t_total))?;
                rec.pulling += e;
                rec.rmsd_to_target = Some(r.rmsd_to_target(coords));
                for (dst, src) in forces.iter_mut().zip(f) {
                    axpy(dst, 1.0, src);
                }
            }
            StageTerm::Mdff { map, k, atom_ids } => {
                let (e, f) = mdff_energy_forces(coords, map, *k, atom_ids.as_deref())?;
                rec.density += e;
                for (dst, src) in forces.iter_mut().zip(f) {
                    axpy(dst, 1.0, src);
                }
            }
            StageTerm::Cdmd { map, k, sim } => {
                let (e, ccc, f) = cdmd_energy_forces(coords, map, *k, sim)?;
                rec.correlation += e;
                rec.ccc = Some(ccc);
                for (dst, src) in forces.iter_mut().zip(f) {
                    axpy(dst, 1.0, src);
                }
            }
        }
    }
    if !stage.restrained_atoms.is_empty() {
        let (e, f) =
            positional_restraints(coords, stage_ref, &stage.restrained_atoms, stage.k_pos)?;
        rec.positional += e;
        for (dst, src) in forces.iter_mut().zip(f) {
            axpy(dst, 1.0, src);
        }
    }
    rec.total = rec.bond
        + rec.angle
        + rec.repulsion
        + rec.pulling
        + rec.density
        + rec.correlation
        + rec.positional;
    rec.max_force = forces.iter().map(|f| norm(*f)).fold(0.0, f64::max);
    Ok(Evaluation {
        record: rec,
        forces,
    })
}

/// Run the staged fitting protocol. Returns the fitted structure (CA
/// positions updated; any sibling atoms in a residue are translated with
/// their CA) and the sampled trajectory log.
///
/// Integration is damped velocity-Verlet with unit mass: a position update
/// capped at `max_displacement` per atom per step, then a velocity update
/// scaled by `1 - friction`. With friction 1 and zero initial velocity the
/// scheme reduces to steepest descent. No randomness is used anywhere, so
/// runs are deterministic for a given input.
pub fn run_fitting(
    initial: &Structure,
    stages: &[StageSpec],
    params: &TopologyParams,
) -> Result<(Structure, Vec<TrajectoryRecord>)> {
    let topo = Topology::from_structure(initial, params.clone())?;
    let mut coords: Vec<[f64; 3]> = initial
        .chains
        .iter()
        .flat_map(|c| c.residues.iter())
        .map(|r| r.ca().expect("validated above").position)
        .collect();
    let mut log = Vec::new();

    for stage in stages {
        let stage_ref = coords.clone();
        let mut velocities = vec![[0.0f64; 3]; coords.len()];
        // the pulling schedule must run to completion before the force
        // tolerance may end the stage, unless it is vacuous from the start
        let schedule_len = stage
            .terms
            .iter()
            .filter_map(|term| match term {
                StageTerm::Tmd(r) if r.d0 > 1e-9 => Some(r.t_total),
                _ => None,
            })
            .max()
            .unwrap_or(0);

        let mut step = 0usize;
        let mut eval = evaluate(stage, &topo, &coords, &stage_ref, 0, 0)?;
        loop {
            if !eval.record.total.is_finite() || eval.record.total.abs() > DIVERGENCE_ENERGY {
                return Err(Error::Numerical(format!(
                    "energy diverged in stage '{}' at step {step}: {}",
                    stage.name, eval.record.total
                )));
            }
            let sampled = step % stage.sample_interval == 0;
            if sampled {
                log.push(eval.record.clone());
            }
            let schedule_done = step >= schedule_len;
            let converged = schedule_done && eval.record.max_force <= stage.force_tolerance;
            let ccc_reached = match (stage.ccc_target, eval.record.ccc) {
                (Some(target), Some(ccc)) => ccc >= target,
                _ => false,
            };
            if converged || ccc_reached || step >= stage.max_steps {
                if !sampled {
                    log.push(eval.record.clone());
                }
                break;
            }

            // drift with displacement cap
            for i in 0..coords.len() {
                let mut dx = [0.0f64; 3];
                for ax in 0..3 {
                    dx[ax] = velocities[i][ax] * stage.dt
                        + 0.5 * eval.forces[i][ax] * stage.dt * stage.dt;
                }
                let d = norm(dx);
                if d > stage.max_displacement {
                    let scale = stage.max_displacement / d;
                    for ax in 0..3 {
                        dx[ax] *= scale;
                    }
                }
                for ax in 0..3 {
                    coords[i][ax] += dx[ax];
                }
            }
            step += 1;
            let next = evaluate(stage, &topo, &coords, &stage_ref, step, step)?;
            let damp = 1.0 - stage.friction;
            for i in 0..coords.len() {
                for ax in 0..3 {
                    velocities[i][ax] = (velocities[i][ax]
                        + 0.5 * (eval.forces[i][ax] + next.forces[i][ax]) * stage.dt)
                        * damp;
                }
            }
            eval = next;
        }
    }

    let mut fitted = initial.clone();
    let mut idx = 0usize;
    for chain in &mut fitted.chains {
        for res in &mut chain.residues {
            let old = res.ca().expect("validated above").position;
            let delta = sub(coords[idx], old);
            for atom in &mut res.atoms {
                for ax in 0..3 {
                    atom.position[ax] += delta[ax];
                }
            }
            idx += 1;
        }
    }
    Ok((fitted, log))
}
