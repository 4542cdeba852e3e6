//! Simulated density maps, continuous map interpolation, and the
//! cross-correlation coefficient between maps on a shared lattice.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mapio::VoxelGrid;
use crate::structio::Structure;

/// Target lattice for a simulated map.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dims: (usize, usize, usize),
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridSpec {
    pub fn of(grid: &VoxelGrid) -> Self {
        Self {
            dims: grid.dims(),
            spacing: grid.spacing(),
            origin: grid.origin(),
        }
    }
}

/// Gaussian-kernel map simulation parameters.
///
/// The resolution is treated as the kernel FWHM, so
/// `sigma = resolution / (2 sqrt(2 ln 2))`. The kernel is truncated at
/// 4 sigma and shifted by its cutoff value `exp(-8)` so the density is a
/// continuous function of the atom positions (required for well-defined
/// map-derived forces); no renormalization is applied.
#[derive(Debug, Clone)]
pub struct SimulationSpec {
    pub resolution: f64,
    pub grid: GridSpec,
    pub atom_weight: f64,
}

impl SimulationSpec {
    pub fn new(resolution: f64, grid: GridSpec) -> Result<Self> {
        if !(resolution > 0.0) {
            return Err(Error::InvalidArgument("resolution must be > 0".into()));
        }
        if grid.spacing.iter().any(|&s| s > resolution) {
            return Err(Error::InvalidArgument(format!(
                "grid spacing {:?} exceeds resolution {resolution} (undersampled)",
                grid.spacing
            )));
        }
        Ok(Self {
            resolution,
            grid,
            atom_weight: 1.0,
        })
    }

    pub fn kernel_sigma(&self) -> f64 {
        self.resolution / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
    }
}

const TRUNCATION_SIGMAS: f64 = 4.0;
/// Kernel value at the truncation radius, subtracted so the truncated
/// kernel is continuous.
pub(crate) const KERNEL_FLOOR: f64 = 3.354_626_279_025_118_4e-4; // exp(-8)

/// Sum of truncated Gaussians centered at `points`, evaluated at voxel
/// centers of the requested lattice.
pub fn simulate_density_points(points: &[[f64; 3]], spec: &SimulationSpec) -> Result<VoxelGrid> {
    if points.is_empty() {
        return Err(Error::Degenerate("no atoms to simulate".into()));
    }
    let sigma = spec.kernel_sigma();
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let cut = TRUNCATION_SIGMAS * sigma;
    let cut_sq = cut * cut;
    let (nx, ny, nz) = spec.grid.dims;
    let sp = spec.grid.spacing;
    let org = spec.grid.origin;
    let w = spec.atom_weight;

    // Parallel over z-slices; atom order inside a slice is fixed, so the
    // result is identical for any thread count.
    let slices: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|iz| {
            let z = org[2] + iz as f64 * sp[2];
            let mut slice = vec![0.0f32; nx * ny];
            for p in points {
                let dz = z - p[2];
                if dz.abs() > cut {
                    continue;
                }
                let x_lo = (((p[0] - cut - org[0]) / sp[0]).ceil().max(0.0)) as usize;
                let x_hi = ((p[0] + cut - org[0]) / sp[0]).floor();
                if x_hi < 0.0 {
                    continue;
                }
                let x_hi = (x_hi as usize).min(nx.saturating_sub(1));
                let y_lo = (((p[1] - cut - org[1]) / sp[1]).ceil().max(0.0)) as usize;
                let y_hi = ((p[1] + cut - org[1]) / sp[1]).floor();
                if y_hi < 0.0 {
                    continue;
                }
                let y_hi = (y_hi as usize).min(ny.saturating_sub(1));
                for iy in y_lo..=y_hi {
                    let dy = org[1] + iy as f64 * sp[1] - p[1];
                    for ix in x_lo..=x_hi {
                        let dx = org[0] + ix as f64 * sp[0] - p[0];
                        let r_sq = dx * dx + dy * dy + dz * dz;
                        if r_sq <= cut_sq {
                            slice[ix + nx * iy] +=
                                (w * ((-r_sq * inv_two_sigma_sq).exp() - KERNEL_FLOOR)) as f32;
                        }
                    }
                }
            }
            slice
        })
        .collect();
    let mut values = Vec::with_capacity(nx * ny * nz);
    for slice in slices {
        values.extend_from_slice(&slice);
    }
    VoxelGrid::new((nx, ny, nz), sp, org, values)
}

/// Simulate a map from every atom of a structure.
pub fn simulate_density(structure: &Structure, spec: &SimulationSpec) -> Result<VoxelGrid> {
    let points: Vec<[f64; 3]> = structure.atoms().map(|a| a.position).collect();
    simulate_density_points(&points, spec)
}

/// Trilinear value and its analytic gradient at a point in angstroms.
///
/// Points outside the voxel-center hull return value 0 and zero gradient.
pub fn interpolate(grid: &VoxelGrid, point: [f64; 3]) -> (f64, [f64; 3]) {
    let (nx, ny, nz) = grid.dims();
    let dims = [nx, ny, nz];
    let sp = grid.spacing();
    let org = grid.origin();
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let u = (point[a] - org[a]) / sp[a];
        if u < -1e-12 || u > (dims[a] - 1) as f64 + 1e-12 {
            return (0.0, [0.0; 3]);
        }
        if dims[a] == 1 {
            continue;
        }
        let f = u.floor().clamp(0.0, (dims[a] - 2) as f64);
        i0[a] = f as usize;
        frac[a] = (u - f).clamp(0.0, 1.0);
    }
    let mut value = 0.0;
    let mut grad = [0.0f64; 3];
    for dz in 0..2usize {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let ix = (i0[0] + dx).min(nx - 1);
                let iy = (i0[1] + dy).min(ny - 1);
                let iz = (i0[2] + dz).min(nz - 1);
                let v = grid.get(ix, iy, iz) as f64;
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                let sx = if dx == 0 { -1.0 } else { 1.0 };
                let sy = if dy == 0 { -1.0 } else { 1.0 };
                let sz = if dz == 0 { -1.0 } else { 1.0 };
                value += v * wx * wy * wz;
                if nx > 1 {
                    grad[0] += v * sx * wy * wz / sp[0];
                }
                if ny > 1 {
                    grad[1] += v * wx * sy * wz / sp[1];
                }
                if nz > 1 {
                    grad[2] += v * wx * wy * sz / sp[2];
                }
            }
        }
    }
    (value, grad)
}

/// Cross-correlation coefficient between two maps on an identical lattice:
/// `sum(a*b) / sqrt(sum(a^2) * sum(b^2))`, with no mean subtraction.
///
/// The optional mean-centered variant subtracts each map's mean first.
pub fn ccc(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    ccc_impl(a, b, false)
}

pub fn ccc_mean_centered(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    ccc_impl(a, b, true)
}

fn ccc_impl(a: &VoxelGrid, b: &VoxelGrid, center: bool) -> Result<f64> {
    if !a.same_lattice(b) {
        return Err(Error::GridMismatch(
            "ccc requires identical dims, spacing, and origin".into(),
        ));
    }
    let (ma, mb) = if center {
        let n = a.len() as f64;
        (
            a.values().iter().map(|&v| v as f64).sum::<f64>() / n,
            b.values().iter().map(|&v| v as f64).sum::<f64>() / n,
        )
    } else {
        (0.0, 0.0)
    };
    let mut num = 0.0f64;
    let mut den_a = 0.0f64;
    let mut den_b = 0.0f64;
    for (&va, &vb) in a.values().iter().zip(b.values()) {
        let va = va as f64 - ma;
        let vb = vb as f64 - mb;
        num += va * vb;
        den_a += va * va;
        den_b += vb * vb;
    }
    if den_a == 0.0 || den_b == 0.0 {
        return Err(Error::Degenerate(
            "ccc undefined for an all-zero map".into(),
        ));
    }
    Ok(num / (den_a * den_b).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    fn spec(dims: (usize, usize, usize), spacing: f64, origin: [f64; 3]) -> SimulationSpec {
        SimulationSpec::new(
            2.0,
            GridSpec {
                dims,
                spacing: [spacing; 3],
                origin,
            },
        )
        .unwrap()
    }

    fn random_grid(seed: u64, dims: (usize, usize, usize)) -> VoxelGrid {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..dims.0 * dims.1 * dims.2)
            .map(|_| rng.random_range(0.0f32..1.0))
            .collect();
        VoxelGrid::new(dims, [1.0; 3], [0.0; 3], values).unwrap()
    }

    #[test]
    fn single_atom_peak_and_symmetry() {
        let mut s = spec((9, 9, 9), 1.0, [-4.0; 3]);
        s.resolution = 1.0 * 2.0 * (2.0 * std::f64::consts::LN_2).sqrt(); // sigma = 1
        let g = simulate_density_points(&[[0.0, 0.0, 0.0]], &s).unwrap();
        assert!((g.get(4, 4, 4) - (1.0 - KERNEL_FLOOR) as f32).abs() < 1e-6);
        let off = ((-0.5f64).exp() - KERNEL_FLOOR) as f32;
        for (ix, iy, iz) in [(5, 4, 4), (3, 4, 4), (4, 5, 4), (4, 4, 3), (4, 4, 5)] {
            assert!((g.get(ix, iy, iz) - off).abs() < 1e-6);
        }
    }

    #[test]
    fn two_far_atoms_superpose() {
        let s = spec((24, 8, 8), 1.0, [0.0; 3]);
        let a = simulate_density_points(&[[4.0, 3.5, 3.5]], &s).unwrap();
        let b = simulate_density_points(&[[19.0, 3.5, 3.5]], &s).unwrap();
        let both = simulate_density_points(&[[4.0, 3.5, 3.5], [19.0, 3.5, 3.5]], &s).unwrap();
        for i in 0..both.len() {
            assert!((both.values()[i] - (a.values()[i] + b.values()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn gaussian_mass_normalization() {
        // integral over the map approximates w * (2 pi sigma^2)^{3/2} per atom
        let s = spec((31, 31, 31), 1.0, [0.0; 3]);
        let sigma = s.kernel_sigma();
        let points = [[15.0, 15.0, 15.0], [12.0, 16.0, 14.0]];
        let g = simulate_density_points(&points, &s).unwrap();
        let total: f64 = g.values().iter().map(|&v| v as f64).sum();
        let cut = 4.0 * sigma;
        let floor_mass = KERNEL_FLOOR * (4.0 / 3.0) * std::f64::consts::PI * cut.powi(3);
        let expected = points.len() as f64
            * ((2.0 * std::f64::consts::PI * sigma * sigma).powf(1.5) - floor_mass);
        assert!(
            (total - expected).abs() / expected < 0.01,
            "total {total} vs {expected}"
        );
    }

    #[test]
    fn translation_equivariance() {
        let s = spec((16, 16, 16), 1.0, [0.0; 3]);
        let a = simulate_density_points(&[[6.2, 7.1, 8.3]], &s).unwrap();
        let b = simulate_density_points(&[[8.2, 7.1, 8.3]], &s).unwrap();
        for iz in 0..16 {
            for iy in 0..16 {
                for ix in 0..14 {
                    assert!((a.get(ix, iy, iz) - b.get(ix + 2, iy, iz)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn interpolate_at_center_and_constant() {
        let g = random_grid(3, (6, 6, 6));
        let (v, _) = interpolate(&g, [2.0, 3.0, 4.0]);
        assert!((v - g.get(2, 3, 4) as f64).abs() < 1e-9);

        let c = VoxelGrid::new((5, 5, 5), [1.0; 3], [0.0; 3], vec![2.5; 125]).unwrap();
        let (v, grad) = interpolate(&c, [1.7, 2.2, 3.9]);
        assert!((v - 2.5).abs() < 1e-9);
        assert!(grad.iter().all(|&d| d.abs() < 1e-9));
    }

    #[test]
    fn interpolate_center_gradient_on_linear_field() {
        // on a linear field, the analytic trilinear gradient at a lattice
        // point equals the central difference of the stored neighbors
        let dims = (5, 5, 5);
        let mut values = Vec::new();
        for iz in 0..5 {
            for iy in 0..5 {
                for ix in 0..5 {
                    values.push((1.5 * ix as f64 - 0.5 * iy as f64 + 2.0 * iz as f64) as f32);
                }
            }
        }
        let g = VoxelGrid::new(dims, [1.0; 3], [0.0; 3], values).unwrap();
        let (_, grad) = interpolate(&g, [2.0, 2.0, 2.0]);
        let central = |a: f32, b: f32| (a as f64 - b as f64) / 2.0;
        assert!((grad[0] - central(g.get(3, 2, 2), g.get(1, 2, 2))).abs() < 1e-9);
        assert!((grad[1] - central(g.get(2, 3, 2), g.get(2, 1, 2))).abs() < 1e-9);
        assert!((grad[2] - central(g.get(2, 2, 3), g.get(2, 2, 1))).abs() < 1e-9);
    }

    #[test]
    fn interpolate_outside_is_zero() {
        let g = random_grid(4, (4, 4, 4));
        let (v, grad) = interpolate(&g, [-1.0, 2.0, 2.0]);
        assert_eq!(v, 0.0);
        assert_eq!(grad, [0.0; 3]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = random_grid(11, (8, 8, 8));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let h = 1e-4;
        for _ in 0..50 {
            // interior points away from cell faces so FD stays in one cell
            let p: [f64; 3] = std::array::from_fn(|_| {
                let cell = rng.random_range(1..6) as f64;
                cell + rng.random_range(0.1..0.9)
            });
            let (_, grad) = interpolate(&g, p);
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fd = (interpolate(&g, pp).0 - interpolate(&g, pm).0) / (2.0 * h);
                let denom = grad[a].abs().max(1e-6);
                assert!(
                    (grad[a] - fd).abs() / denom < 1e-5,
                    "axis {a}: analytic {} vs fd {fd}",
                    grad[a]
                );
            }
        }
    }

    #[test]
    fn interpolated_peak_matches_closed_form() {
        let mut s = spec((41, 41, 41), 0.5, [0.0; 3]);
        s.resolution = 4.0;
        let sigma = s.kernel_sigma();
        let points = [[10.3, 9.8, 10.6], [12.9, 11.1, 9.4]];
        let g = simulate_density_points(&points, &s).unwrap();
        for p in &points {
            let (v, _) = interpolate(&g, *p);
            let exact: f64 = points
                .iter()
                .map(|q| {
                    let d2: f64 = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum();
                    (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum();
            assert!((v - exact).abs() / exact < 0.05, "{v} vs {exact}");
        }
    }

    #[test]
    fn ccc_identity_and_scale() {
        let g = random_grid(7, (5, 5, 5));
        assert!((ccc(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        let scaled = g.map_values(|v| 3.7 * v).unwrap();
        assert!((ccc(&g, &scaled).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ccc_disjoint_supports_zero() {
        let mut a = VoxelGrid::zeros((4, 4, 4), [1.0; 3], [0.0; 3]);
        let mut b = a.clone();
        a.set(0, 0, 0, 1.0);
        b.set(3, 3, 3, 1.0);
        assert_eq!(ccc(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn ccc_errors() {
        let g = random_grid(8, (4, 4, 4));
        let z = VoxelGrid::zeros((4, 4, 4), [1.0; 3], [0.0; 3]);
        assert!(ccc(&g, &z).is_err());
        let other = VoxelGrid::zeros((4, 4, 5), [1.0; 3], [0.0; 3]);
        assert!(ccc(&g, &other).is_err());
    }

    #[test]
    fn ccc_symmetric() {
        let a = random_grid(1, (4, 4, 4));
        let b = random_grid(2, (4, 4, 4));
        assert!((ccc(&a, &b).unwrap() - ccc(&b, &a).unwrap()).abs() < 1e-15);
    }
}
