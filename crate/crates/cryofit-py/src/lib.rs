//! Python bindings for the structure-building pipeline: density maps,
//! structures, oracle feature grids, fragment tracing, sequence labeling,
//! flexible fitting, and evaluation metrics.
//!
//! Build with `cargo build -p cryofit-py`; the resulting cdylib imports
//! as the `cryofit_py` module (see `python/smoke_test.py`).

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cryofit_core::density::{simulate_density, GridSpec, SimulationSpec};
use cryofit_core::features::{
    generate_labels, inject_noise, read_feature_dir, write_feature_dir, FeatureGrids,
    LabelGridSpec, NoiseSpec,
};
use cryofit_core::fitting::{run_fitting, StageSpec, StageTerm, TmdRestraint, TopologyParams};
use cryofit_core::mapio::{parse_mrc, write_mrc, VoxelGrid};
use cryofit_core::seqalign::{label_fragments, LabelOutcome};
use cryofit_core::structio::{
    parse_structure, write_structure, AminoAcid, Atom, Chain, Residue, Sequence, Structure,
};
use cryofit_core::tracing::{
    extract_candidates, prune_fragments, trace_fragments, Fragment as CoreFragment,
};

fn err(e: cryofit_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_sequence(text: &str) -> PyResult<Sequence> {
    let residues: Option<Vec<AminoAcid>> =
        text.chars().map(AminoAcid::from_one_letter).collect();
    let residues =
        residues.ok_or_else(|| PyValueError::new_err(format!("invalid sequence {text:?}")))?;
    Sequence::new(residues).map_err(err)
}

type Triple = (f64, f64, f64);

fn to_triple(p: [f64; 3]) -> Triple {
    (p[0], p[1], p[2])
}

fn from_triple(p: Triple) -> [f64; 3] {
    [p.0, p.1, p.2]
}

// ---------------------------------------------------------------------------
// Density maps
// ---------------------------------------------------------------------------

/// A voxel grid of 32-bit densities with x varying fastest.
#[pyclass(name = "Map", skip_from_py_object)]
#[derive(Clone)]
pub struct PyMap {
    inner: VoxelGrid,
}

#[pymethods]
impl PyMap {
    /// Parse a binary map file.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self {
            inner: parse_mrc(&bytes).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(path, write_mrc(&self.inner))?;
        Ok(())
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> Triple {
        to_triple(self.inner.spacing())
    }

    #[getter]
    fn origin(&self) -> Triple {
        to_triple(self.inner.origin())
    }

    /// All voxel values in storage order (x fastest).
    fn values(&self) -> Vec<f32> {
        self.inner.values().to_vec()
    }

    fn value_at(&self, ix: usize, iy: usize, iz: usize) -> f32 {
        self.inner.get(ix, iy, iz)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Cross-correlation coefficient of two maps on the same lattice.
#[pyfunction]
fn ccc(a: &PyMap, b: &PyMap) -> PyResult<f64> {
    cryofit_core::density::ccc(&a.inner, &b.inner).map_err(err)
}

// ---------------------------------------------------------------------------
// Structures
// ---------------------------------------------------------------------------

/// An atomic model: chains of residues with at least a CA atom each.
#[pyclass(name = "Structure", skip_from_py_object)]
#[derive(Clone)]
pub struct PyStructure {
    inner: Structure,
}

#[pymethods]
impl PyStructure {
    #[staticmethod]
    fn from_pdb(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_pdb_text(&text)
    }

    #[staticmethod]
    fn from_pdb_text(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: parse_structure(text).map_err(err)?,
        })
    }

    /// Build a CA-only chain from positions and a one-letter sequence.
    #[staticmethod]
    fn from_ca_chain(chain_id: char, positions: Vec<Triple>, sequence: &str) -> PyResult<Self> {
        let seq = parse_sequence(sequence)?;
        if seq.len() != positions.len() {
            return Err(PyValueError::new_err(format!(
                "{} positions but {} sequence letters",
                positions.len(),
                seq.len()
            )));
        }
        let residues = positions
            .into_iter()
            .zip(seq.residues())
            .enumerate()
            .map(|(i, (p, &aa))| Residue {
                index: i as i32 + 1,
                aa_type: aa,
                atoms: vec![Atom {
                    name: "CA".into(),
                    element: "C".into(),
                    position: from_triple(p),
                }],
            })
            .collect();
        Ok(Self {
            inner: Structure {
                chains: vec![Chain {
                    id: chain_id,
                    residues,
                }],
            },
        })
    }

    fn to_pdb_text(&self) -> PyResult<String> {
        write_structure(&self.inner).map_err(err)
    }

    fn write_pdb(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(path, self.to_pdb_text()?)?;
        Ok(())
    }

    #[getter]
    fn chain_ids(&self) -> Vec<char> {
        self.inner.chains.iter().map(|c| c.id).collect()
    }

    fn residue_count(&self) -> usize {
        self.inner.residue_count()
    }

    fn ca_positions(&self) -> Vec<Triple> {
        self.inner.ca_positions().into_iter().map(to_triple).collect()
    }

    fn chain_sequence(&self, chain_id: char) -> PyResult<String> {
        self.inner
            .chain_sequence(chain_id)
            .map(|s| s.to_string_one_letter())
            .ok_or_else(|| PyValueError::new_err(format!("no chain {chain_id}")))
    }

    /// Copy with every atom of residue `i` (flat order) translated by the
    /// `i`-th displacement.
    fn displaced(&self, displacements: Vec<Triple>) -> PyResult<Self> {
        if displacements.len() != self.inner.residue_count() {
            return Err(PyValueError::new_err(
                "one displacement per residue required",
            ));
        }
        let mut out = self.inner.clone();
        let mut flat = 0usize;
        for chain in out.chains.iter_mut() {
            for residue in chain.residues.iter_mut() {
                let d = from_triple(displacements[flat]);
                for atom in residue.atoms.iter_mut() {
                    for axis in 0..3 {
                        atom.position[axis] += d[axis];
                    }
                }
                flat += 1;
            }
        }
        Ok(Self { inner: out })
    }
}

/// Simulate a density map from a structure at the given resolution on a
/// cubic lattice covering the structure plus `margin` angstroms.
#[pyfunction]
#[pyo3(signature = (structure, resolution=4.0, spacing=1.0, margin=8.0))]
fn simulate_map(
    structure: &PyStructure,
    resolution: f64,
    spacing: f64,
    margin: f64,
) -> PyResult<PyMap> {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for atom in structure.inner.atoms() {
        for axis in 0..3 {
            lo[axis] = lo[axis].min(atom.position[axis]);
            hi[axis] = hi[axis].max(atom.position[axis]);
        }
    }
    if lo.iter().any(|v| !v.is_finite()) {
        return Err(PyValueError::new_err("structure has no atoms"));
    }
    let origin = [lo[0] - margin, lo[1] - margin, lo[2] - margin];
    let dims = (
        ((hi[0] - lo[0] + 2.0 * margin) / spacing).ceil() as usize + 1,
        ((hi[1] - lo[1] + 2.0 * margin) / spacing).ceil() as usize + 1,
        ((hi[2] - lo[2] + 2.0 * margin) / spacing).ceil() as usize + 1,
    );
    let spec = SimulationSpec::new(
        resolution,
        GridSpec {
            dims,
            spacing: [spacing; 3],
            origin,
        },
    )
    .map_err(err)?;
    Ok(PyMap {
        inner: simulate_density(&structure.inner, &spec).map_err(err)?,
    })
}

// ---------------------------------------------------------------------------
// Feature grids, tracing, labeling
// ---------------------------------------------------------------------------

/// Recognition-style feature grids: backbone probability, CA detection,
/// offsets, pseudo-peptide vectors, and AA-type distributions.
#[pyclass(name = "FeatureSet")]
pub struct PyFeatureSet {
    inner: FeatureGrids,
}

#[pymethods]
impl PyFeatureSet {
    #[staticmethod]
    fn read_dir(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_feature_dir(&path).map_err(err)?,
        })
    }

    fn write_dir(&self, path: PathBuf) -> PyResult<()> {
        write_feature_dir(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn coarse_dims(&self) -> (usize, usize, usize) {
        self.inner.coarse_dims()
    }
}

/// Generate oracle feature grids from a known structure.
#[pyfunction]
#[pyo3(signature = (structure, bb_spacing=1.0, margin=8.0))]
fn generate_features(
    structure: &PyStructure,
    bb_spacing: f64,
    margin: f64,
) -> PyResult<PyFeatureSet> {
    let spec = LabelGridSpec::covering(&structure.inner, bb_spacing, margin).map_err(err)?;
    Ok(PyFeatureSet {
        inner: generate_labels(&structure.inner, &spec).map_err(err)?,
    })
}

/// Corrupt feature grids deterministically (dropout, false positives,
/// Dirichlet smoothing of AA distributions).
#[pyfunction]
#[pyo3(signature = (features, ca_dropout=0.0, fp_rate=0.0, aa_dirichlet_alpha=0.0, seed=0))]
fn add_noise(
    features: &PyFeatureSet,
    ca_dropout: f64,
    fp_rate: f64,
    aa_dirichlet_alpha: f64,
    seed: u64,
) -> PyResult<PyFeatureSet> {
    let spec = NoiseSpec {
        ca_dropout,
        fp_rate,
        aa_dirichlet_alpha,
        seed,
        ..NoiseSpec::default()
    };
    let (noisy, _) = inject_noise(&features.inner, &spec).map_err(err)?;
    Ok(PyFeatureSet { inner: noisy })
}

/// A traced run of CA candidates, N-to-C.
#[pyclass(name = "Fragment", from_py_object)]
#[derive(Clone)]
pub struct PyFragment {
    inner: CoreFragment,
}

#[pymethods]
impl PyFragment {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn positions(&self) -> Vec<Triple> {
        self.inner.positions().into_iter().map(to_triple).collect()
    }

    /// Per-residue argmax AA types as one-letter codes.
    fn aa_argmax(&self) -> String {
        self.inner
            .residues
            .iter()
            .map(|r| r.aa_argmax().one_letter())
            .collect()
    }
}

/// Trace CA fragments from feature grids.
#[pyfunction]
#[pyo3(signature = (features, detection=0.5, epsilon_sq=1.0, min_len=3))]
fn trace(
    features: &PyFeatureSet,
    detection: f64,
    epsilon_sq: f64,
    min_len: usize,
) -> PyResult<Vec<PyFragment>> {
    let candidates = extract_candidates(&features.inner, detection).map_err(err)?;
    let fragments =
        trace_fragments(&candidates, epsilon_sq, &features.inner.spec()).map_err(err)?;
    let fragments = prune_fragments(fragments, min_len).map_err(err)?;
    Ok(fragments
        .into_iter()
        .map(|inner| PyFragment { inner })
        .collect())
}

/// Label fragments against one-letter target sequences. Returns one dict
/// per fragment with keys `accepted`, `fragment_index`, `confidence`, and
/// for accepted fragments `sequence_index`, `start_index`, `assignment`.
#[pyfunction]
#[pyo3(signature = (fragments, sequences, confidence_threshold=3.4))]
fn label(
    py: Python<'_>,
    fragments: Vec<PyFragment>,
    sequences: Vec<String>,
    confidence_threshold: f64,
) -> PyResult<Vec<Py<pyo3::types::PyDict>>> {
    use pyo3::types::PyDict;
    let core_fragments: Vec<CoreFragment> =
        fragments.iter().map(|f| f.inner.clone()).collect();
    let seqs: Vec<Sequence> = sequences
        .iter()
        .map(|s| parse_sequence(s))
        .collect::<PyResult<_>>()?;
    let outcomes =
        label_fragments(&core_fragments, &seqs, confidence_threshold).map_err(err)?;
    let mut out = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let dict = PyDict::new(py);
        match outcome {
            LabelOutcome::Accepted(l) => {
                dict.set_item("accepted", true)?;
                dict.set_item("fragment_index", l.fragment_index)?;
                dict.set_item("sequence_index", l.sequence_index)?;
                dict.set_item("start_index", l.start_index)?;
                dict.set_item("confidence", l.confidence)?;
                dict.set_item("assignment", l.aa_assignment.iter().collect::<String>())?;
            }
            LabelOutcome::Rejected {
                fragment_index,
                confidence,
                reason,
            } => {
                dict.set_item("accepted", false)?;
                dict.set_item("fragment_index", fragment_index)?;
                dict.set_item("confidence", confidence)?;
                dict.set_item("reason", reason)?;
            }
        }
        out.push(dict.unbind());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fitting and metrics
// ---------------------------------------------------------------------------

/// Pull selected residues of a structure onto target positions with a
/// scheduled collective restraint over chain physics, then relax.
/// `atom_ids` index residues in flat chain order. Returns the fitted
/// structure.
#[pyfunction]
#[pyo3(signature = (structure, atom_ids, targets, h_total=50.0, t_total=400, max_steps=1200))]
fn fit_to_targets(
    structure: &PyStructure,
    atom_ids: Vec<usize>,
    targets: Vec<Triple>,
    h_total: f64,
    t_total: usize,
    max_steps: usize,
) -> PyResult<PyStructure> {
    if atom_ids.is_empty() {
        return Err(PyValueError::new_err("no target correspondences"));
    }
    let initial_coords = structure.inner.ca_positions();
    let h = h_total / atom_ids.len() as f64;
    let restraint = TmdRestraint::new(
        atom_ids,
        targets.into_iter().map(from_triple).collect(),
        h,
        t_total,
        &initial_coords,
    )
    .map_err(err)?;
    let mut stage = StageSpec::new("pull-to-targets");
    stage.terms.push(StageTerm::Tmd(restraint));
    stage.max_steps = max_steps;
    let (fitted, _) =
        run_fitting(&structure.inner, &[stage], &TopologyParams::default()).map_err(err)?;
    Ok(PyStructure { inner: fitted })
}

/// Greedy one-to-one CA matching; returns `(precision, recall)`.
#[pyfunction]
#[pyo3(signature = (model, truth, cutoff=1.5))]
fn ca_precision_recall(
    model: Vec<Triple>,
    truth: Vec<Triple>,
    cutoff: f64,
) -> PyResult<(f64, f64)> {
    let model: Vec<[f64; 3]> = model.into_iter().map(from_triple).collect();
    let truth: Vec<[f64; 3]> = truth.into_iter().map(from_triple).collect();
    let report =
        cryofit_core::metrics::ca_precision_recall(&model, &truth, cutoff).map_err(err)?;
    Ok((report.precision, report.recall))
}

/// Coordinate RMSD without superposition.
#[pyfunction]
fn rmsd(a: Vec<Triple>, b: Vec<Triple>) -> PyResult<f64> {
    let a: Vec<[f64; 3]> = a.into_iter().map(from_triple).collect();
    let b: Vec<[f64; 3]> = b.into_iter().map(from_triple).collect();
    cryofit_core::metrics::rmsd(&a, &b).map_err(err)
}

/// Length-normalized fold similarity in (0, 1].
#[pyfunction]
fn tm_score(model: &PyStructure, reference: &PyStructure) -> PyResult<f64> {
    cryofit_core::metrics::tm_score(&model.inner, &reference.inner).map_err(err)
}

#[pymodule]
fn cryofit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMap>()?;
    m.add_class::<PyStructure>()?;
    m.add_class::<PyFeatureSet>()?;
    m.add_class::<PyFragment>()?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate_features, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(trace, m)?)?;
    m.add_function(wrap_pyfunction!(label, m)?)?;
    m.add_function(wrap_pyfunction!(fit_to_targets, m)?)?;
    m.add_function(wrap_pyfunction!(ca_precision_recall, m)?)?;
    m.add_function(wrap_pyfunction!(rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(tm_score, m)?)?;
    Ok(())
}
