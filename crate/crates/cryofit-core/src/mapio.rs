//! MRC2014 density map I/O, resampling, and chunking.
//!
//! Only MODE 2 (little-endian float32) maps are supported; axis order is
//! normalized to x-fastest at parse time so every downstream consumer sees
//! the same layout.

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};

const HEADER_LEN: usize = 1024;

/// Scalar field on a regular 3-D lattice with a physical origin and spacing.
///
/// Voxel `(ix, iy, iz)` has physical center `origin + (ix*sx, iy*sy, iz*sz)`.
/// Values are stored x-fastest: `idx = ix + nx*(iy + ny*iz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: (usize, usize, usize),
    spacing: [f64; 3],
    origin: [f64; 3],
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: [f64; 3],
        origin: [f64; 3],
        values: Vec<f32>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidArgument("grid dims must be positive".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("grid spacing must be > 0".into()));
        }
        if values.len() != nx * ny * nz {
            return Err(Error::InvalidArgument(format!(
                "value count {} != {}x{}x{}",
                values.len(),
                nx,
                ny,
                nz
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite voxel value".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
        })
    }

    /// All-zero grid with the given geometry.
    pub fn zeros(dims: (usize, usize, usize), spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Self::new(dims, spacing, origin, vec![0.0; dims.0 * dims.1 * dims.2])
            .expect("valid zero grid")
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims.0 && iy < self.dims.1 && iz < self.dims.2);
        ix + self.dims.0 * (iy + self.dims.1 * iz)
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.values[self.index(ix, iy, iz)]
    }

    pub fn set(&mut self, ix: usize, iy: usize, iz: usize, v: f32) {
        let i = self.index(ix, iy, iz);
        self.values[i] = v;
    }

    /// Physical center of voxel `(ix, iy, iz)`.
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + ix as f64 * self.spacing[0],
            self.origin[1] + iy as f64 * self.spacing[1],
            self.origin[2] + iz as f64 * self.spacing[2],
        ]
    }

    /// Same grid with every value replaced by `f(v)`.
    pub fn map_values(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.dims,
            self.spacing,
            self.origin,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn same_lattice(&self, other: &VoxelGrid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() < 1e-9)
            && self
                .origin
                .iter()
                .zip(&other.origin)
                .all(|(a, b)| (a - b).abs() < 1e-9)
    }
}

fn header_i32(bytes: &[u8], word: usize) -> i32 {
    LittleEndian::read_i32(&bytes[(word - 1) * 4..word * 4])
}

fn header_f32(bytes: &[u8], word: usize) -> f32 {
    LittleEndian::read_f32(&bytes[(word - 1) * 4..word * 4])
}

/// Parse an MRC2014 MODE-2 map.
///
/// Axis order is normalized to x-fastest regardless of MAPC/MAPR/MAPS.
/// ORIGIN is honored when nonzero, else the legacy NXSTART convention
/// (start index times spacing) is used.
pub fn parse_mrc(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::MrcParse(format!(
            "truncated header: {} bytes, need {}",
            bytes.len(),
            HEADER_LEN
        )));
    }
    let nc = header_i32(bytes, 1);
    let nr = header_i32(bytes, 2);
    let ns = header_i32(bytes, 3);
    let mode = header_i32(bytes, 4);
    if mode != 2 {
        return Err(Error::MrcParse(format!(
            "unsupported MODE {mode}: only MODE 2 (float32) is supported"
        )));
    }
    if nc <= 0 || nr <= 0 || ns <= 0 {
        return Err(Error::MrcParse(format!(
            "non-positive dims ({nc}, {nr}, {ns})"
        )));
    }
    let (nc, nr, ns) = (nc as usize, nr as usize, ns as usize);
    let nstart = [
        header_i32(bytes, 5),
        header_i32(bytes, 6),
        header_i32(bytes, 7),
    ];
    let cella = [
        header_f32(bytes, 11) as f64,
        header_f32(bytes, 12) as f64,
        header_f32(bytes, 13) as f64,
    ];
    if cella.iter().any(|&c| !(c > 0.0)) {
        return Err(Error::MrcParse(format!(
            "non-positive cell dimensions {cella:?}"
        )));
    }
    let mapc = header_i32(bytes, 17);
    let mapr = header_i32(bytes, 18);
    let maps = header_i32(bytes, 19);
    let mut axis_of = [0usize; 3]; // axis_of[slot] = physical axis of storage slot
    {
        let mut seen = [false; 3];
        for (slot, &m) in [mapc, mapr, maps].iter().enumerate() {
            if !(1..=3).contains(&m) || seen[(m - 1) as usize] {
                return Err(Error::MrcParse(format!(
                    "invalid MAPC/MAPR/MAPS ({mapc}, {mapr}, {maps})"
                )));
            }
            seen[(m - 1) as usize] = true;
            axis_of[slot] = (m - 1) as usize;
        }
    }
    let nsymbt = header_i32(bytes, 24);
    if nsymbt < 0 {
        return Err(Error::MrcParse(format!("negative NSYMBT {nsymbt}")));
    }
    let n_values = nc * nr * ns;
    let data_start = HEADER_LEN + nsymbt as usize;
    let needed = data_start + n_values * 4;
    if bytes.len() < needed {
        return Err(Error::MrcParse(format!(
            "payload too short: {} bytes, need {needed}",
            bytes.len()
        )));
    }

    // Permute storage (col, row, sec) into physical (x, y, z), x-fastest.
    let slot_dims = [nc, nr, ns];
    let mut dims_axis = [0usize; 3];
    let mut nstart_axis = [0i32; 3];
    for slot in 0..3 {
        dims_axis[axis_of[slot]] = slot_dims[slot];
        nstart_axis[axis_of[slot]] = nstart[slot];
    }
    let spacing = [
        cella[0] / dims_axis[0] as f64,
        cella[1] / dims_axis[1] as f64,
        cella[2] / dims_axis[2] as f64,
    ];
    let origin_words = [
        header_f32(bytes, 50) as f64,
        header_f32(bytes, 51) as f64,
        header_f32(bytes, 52) as f64,
    ];
    let origin = if origin_words.iter().any(|&o| o != 0.0) {
        origin_words
    } else {
        [
            nstart_axis[0] as f64 * spacing[0],
            nstart_axis[1] as f64 * spacing[1],
            nstart_axis[2] as f64 * spacing[2],
        ]
    };

    let data = &bytes[data_start..needed];
    let mut values = vec![0.0f32; n_values];
    let (nxa, nya) = (dims_axis[0], dims_axis[1]);
    let mut pos = [0usize; 3];
    let mut offset = 0;
    for sec in 0..ns {
        for row in 0..nr {
            for col in 0..nc {
                let v = LittleEndian::read_f32(&data[offset..offset + 4]);
                offset += 4;
                if !v.is_finite() {
                    return Err(Error::MrcParse(format!(
                        "non-finite value at storage index ({col}, {row}, {sec})"
                    )));
                }
                pos[axis_of[0]] = col;
                pos[axis_of[1]] = row;
                pos[axis_of[2]] = sec;
                values[pos[0] + nxa * (pos[1] + nya * pos[2])] = v;
            }
        }
    }
    VoxelGrid::new((dims_axis[0], dims_axis[1], dims_axis[2]), spacing, origin, values)
}

/// Serialize a grid as MRC2014 MODE 2, x-fastest, MAPC/MAPR/MAPS = (1,2,3).
pub fn write_mrc(grid: &VoxelGrid) -> Vec<u8> {
    let (nx, ny, nz) = grid.dims();
    let spacing = grid.spacing();
    let origin = grid.origin();
    let n = grid.len();

    let mut dmin = f64::INFINITY;
    let mut dmax = f64::NEG_INFINITY;
    let mut sum = 0.0f64;
    for &v in grid.values() {
        let v = v as f64;
        dmin = dmin.min(v);
        dmax = dmax.max(v);
        sum += v;
    }
    let dmean = sum / n as f64;
    let mut var = 0.0f64;
    for &v in grid.values() {
        let d = v as f64 - dmean;
        var += d * d;
    }
    let rms = (var / n as f64).sqrt();

    let mut out = vec![0u8; HEADER_LEN + n * 4];
    let put_i32 = |out: &mut [u8], word: usize, v: i32| {
        LittleEndian::write_i32(&mut out[(word - 1) * 4..word * 4], v)
    };
    let put_f32 = |out: &mut [u8], word: usize, v: f32| {
        LittleEndian::write_f32(&mut out[(word - 1) * 4..word * 4], v)
    };
    put_i32(&mut out, 1, nx as i32);
    put_i32(&mut out, 2, ny as i32);
    put_i32(&mut out, 3, nz as i32);
    put_i32(&mut out, 4, 2); // MODE 2
    // NXSTART..NZSTART stay 0; ORIGIN carries the offset.
    put_i32(&mut out, 8, nx as i32); // MX
    put_i32(&mut out, 9, ny as i32);
    put_i32(&mut out, 10, nz as i32);
    put_f32(&mut out, 11, (nx as f64 * spacing[0]) as f32); // CELLA
    put_f32(&mut out, 12, (ny as f64 * spacing[1]) as f32);
    put_f32(&mut out, 13, (nz as f64 * spacing[2]) as f32);
    put_f32(&mut out, 14, 90.0); // CELLB
    put_f32(&mut out, 15, 90.0);
    put_f32(&mut out, 16, 90.0);
    put_i32(&mut out, 17, 1); // MAPC
    put_i32(&mut out, 18, 2); // MAPR
    put_i32(&mut out, 19, 3); // MAPS
    put_f32(&mut out, 20, dmin as f32);
    put_f32(&mut out, 21, dmax as f32);
    put_f32(&mut out, 22, dmean as f32);
    put_i32(&mut out, 23, 1); // ISPG: 3-D volume
    put_i32(&mut out, 24, 0); // NSYMBT
    put_f32(&mut out, 50, origin[0] as f32);
    put_f32(&mut out, 51, origin[1] as f32);
    put_f32(&mut out, 52, origin[2] as f32);
    out[208..212].copy_from_slice(b"MAP "); // word 53
    out[212..216].copy_from_slice(&[0x44, 0x44, 0x00, 0x00]); // MACHST little-endian
    put_f32(&mut out, 55, rms as f32);
    put_i32(&mut out, 56, 0); // NLABL

    for (i, &v) in grid.values().iter().enumerate() {
        LittleEndian::write_f32(&mut out[HEADER_LEN + i * 4..HEADER_LEN + i * 4 + 4], v);
    }
    out
}

/// Trilinear sample with clamped (constant) extrapolation at the borders.
fn sample_clamped(grid: &VoxelGrid, p: [f64; 3]) -> f64 {
    let (nx, ny, nz) = grid.dims();
    let dims = [nx, ny, nz];
    let mut i0 = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        if dims[a] == 1 {
            continue;
        }
        let u = (p[a] - grid.origin()[a]) / grid.spacing()[a];
        let f = u.floor().clamp(0.0, (dims[a] - 2) as f64);
        i0[a] = f as usize;
        frac[a] = (u - f).clamp(0.0, 1.0);
    }
    let mut acc = 0.0;
    for dz in 0..2usize {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let ix = (i0[0] + dx).min(nx - 1);
                let iy = (i0[1] + dy).min(ny - 1);
                let iz = (i0[2] + dz).min(nz - 1);
                let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
                acc += wx * wy * wz * grid.get(ix, iy, iz) as f64;
            }
        }
    }
    acc
}

/// Resample onto a new lattice with the requested spacing.
///
/// The new lattice keeps the origin and covers the same physical extent
/// (voxel-center hull); values come from trilinear interpolation.
pub fn resample(grid: &VoxelGrid, target_spacing: [f64; 3]) -> Result<VoxelGrid> {
    if target_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument("target spacing must be > 0".into()));
    }
    let (nx, ny, nz) = grid.dims();
    let old_dims = [nx, ny, nz];
    let mut new_dims = [0usize; 3];
    for a in 0..3 {
        let extent = (old_dims[a] - 1) as f64 * grid.spacing()[a];
        // cover the extent: last center at or beyond the old last center
        let steps = (extent / target_spacing[a] - 1e-9).ceil().max(0.0) as usize;
        new_dims[a] = steps + 1;
    }
    let mut values = vec![0.0f32; new_dims[0] * new_dims[1] * new_dims[2]];
    let origin = grid.origin();
    for iz in 0..new_dims[2] {
        for iy in 0..new_dims[1] {
            for ix in 0..new_dims[0] {
                let p = [
                    origin[0] + ix as f64 * target_spacing[0],
                    origin[1] + iy as f64 * target_spacing[1],
                    origin[2] + iz as f64 * target_spacing[2],
                ];
                values[ix + new_dims[0] * (iy + new_dims[1] * iz)] =
                    sample_clamped(grid, p) as f32;
            }
        }
    }
    VoxelGrid::new(
        (new_dims[0], new_dims[1], new_dims[2]),
        target_spacing,
        origin,
        values,
    )
}

/// Cut the grid into cubic chunks of edge `chunk_dim` placed every `stride`
/// voxels, zero-padded at the boundary so every parent voxel is covered.
///
/// Each chunk is returned with the corner index locating it in parent
/// index space.
pub fn crop_chunks(
    grid: &VoxelGrid,
    chunk_dim: usize,
    stride: usize,
) -> Result<Vec<(VoxelGrid, (usize, usize, usize))>> {
    if chunk_dim < 1 || stride < 1 {
        return Err(Error::InvalidArgument(
            "chunk_dim and stride must be >= 1".into(),
        ));
    }
    let (nx, ny, nz) = grid.dims();
    let count = |n: usize| {
        if n <= chunk_dim {
            1
        } else {
            (n - chunk_dim).div_ceil(stride) + 1
        }
    };
    let (cx, cy, cz) = (count(nx), count(ny), count(nz));
    let mut chunks = Vec::with_capacity(cx * cy * cz);
    for kz in 0..cz {
        for ky in 0..cy {
            for kx in 0..cx {
                let corner = (kx * stride, ky * stride, kz * stride);
                let mut values = vec![0.0f32; chunk_dim * chunk_dim * chunk_dim];
                for dz in 0..chunk_dim {
                    let iz = corner.2 + dz;
                    if iz >= nz {
                        break;
                    }
                    for dy in 0..chunk_dim {
                        let iy = corner.1 + dy;
                        if iy >= ny {
                            break;
                        }
                        for dx in 0..chunk_dim {
                            let ix = corner.0 + dx;
                            if ix >= nx {
                                break;
                            }
                            values[dx + chunk_dim * (dy + chunk_dim * dz)] =
                                grid.get(ix, iy, iz);
                        }
                    }
                }
                let chunk_origin = [
                    grid.origin()[0] + corner.0 as f64 * grid.spacing()[0],
                    grid.origin()[1] + corner.1 as f64 * grid.spacing()[1],
                    grid.origin()[2] + corner.2 as f64 * grid.spacing()[2],
                ];
                let chunk = VoxelGrid::new(
                    (chunk_dim, chunk_dim, chunk_dim),
                    grid.spacing(),
                    chunk_origin,
                    values,
                )?;
                chunks.push((chunk, corner));
            }
        }
    }
    Ok(chunks)
}
