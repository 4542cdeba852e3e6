//! Subcommand implementations. Each stage reads and writes files named
//! under the configured paths, so stages can be re-run or replaced
//! independently (feature directories are the extension point where real
//! recognition-network outputs can be substituted).

use std::fs;
use std::path::{Path, PathBuf};

use cryofit_core::density::{simulate_density, GridSpec, SimulationSpec};
use cryofit_core::features::{
    generate_labels, inject_noise, read_feature_dir, write_feature_dir, LabelGridSpec,
};
use cryofit_core::fitting::{run_fitting, StageSpec, StageTerm, TmdRestraint};
use cryofit_core::mapio::{parse_mrc, write_mrc, VoxelGrid};
use cryofit_core::metrics::{aa_precision, ca_precision_recall, rmsd, tm_score};
use cryofit_core::seqalign::{label_fragments, LabelOutcome};
use cryofit_core::structio::{
    parse_fasta_all, parse_structure, write_structure, Sequence, Structure,
};
use cryofit_core::tracing::{
    extract_candidates, fragments_to_structure, prune_fragments, trace_fragments, Fragment,
};
use cryofit_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;

fn read_structure_file(path: &Path, chain: Option<char>) -> Result<Structure> {
    let text = fs::read_to_string(path)?;
    let mut s = parse_structure(&text)?;
    if let Some(id) = chain {
        s.chains.retain(|c| c.id == id);
        if s.chains.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "chain {id} not present in {}",
                path.display()
            )));
        }
    }
    Ok(s)
}

fn read_sequences(path: &Path) -> Result<Vec<Sequence>> {
    let text = fs::read_to_string(path)?;
    Ok(parse_fasta_all(&text)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text =
        serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

fn ensure_output_dir(config: &PipelineConfig) -> Result<PathBuf> {
    let dir = config.paths.output_dir.clone();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Generate oracle feature grids from the ground-truth structure, apply
/// the configured corruption, and write the feature directory.
pub fn cmd_oracle(config: &PipelineConfig, chain: Option<char>) -> Result<()> {
    let structure = read_structure_file(&config.paths.structure, chain)?;
    let spec = LabelGridSpec::covering(
        &structure,
        config.labels.bb_spacing,
        config.labels.margin,
    )?;
    let labels = generate_labels(&structure, &spec)?;
    let mut noise = config.noise.clone();
    noise.seed = config.seed;
    let (noisy, report) = inject_noise(&labels, &noise)?;
    write_feature_dir(&config.paths.feature_dir, &noisy)?;
    log::info!(
        "feature grids written to {}: {} true cells, {} kept, {} false positives",
        config.paths.feature_dir.display(),
        report.true_cells,
        report.kept_true_cells,
        report.false_positive_cells
    );
    // simulated map alongside the features, for map-driven fitting stages
    if let Some(map_path) = &config.paths.map {
        if !map_path.exists() {
            let grid_spec = GridSpec {
                dims: spec.bb_dims(),
                spacing: [config.labels.bb_spacing; 3],
                origin: spec.origin,
            };
            let sim = SimulationSpec::new(config.fitting.resolution, grid_spec)?;
            let map = simulate_density(&structure, &sim)?;
            fs::write(map_path, write_mrc(&map))?;
            log::info!("simulated map written to {}", map_path.display());
        }
    }
    Ok(())
}

/// Extract CA candidates and connect them into fragments.
pub fn cmd_trace(config: &PipelineConfig, no_prune: bool) -> Result<usize> {
    let grids = read_feature_dir(&config.paths.feature_dir)?;
    let candidates = extract_candidates(&grids, config.thresholds.detection)?;
    let fragments = trace_fragments(&candidates, config.thresholds.epsilon_sq, &grids.spec())?;
    let fragments = if no_prune {
        fragments
    } else {
        prune_fragments(fragments, config.thresholds.min_len)?
    };
    let dir = ensure_output_dir(config)?;
    write_json(&dir.join("fragments.json"), &fragments)?;
    if !fragments.is_empty() {
        let structure = fragments_to_structure(&fragments);
        fs::write(dir.join("fragments.pdb"), write_structure(&structure)?)?;
    }
    log::info!(
        "{} candidates -> {} fragments ({} residues)",
        candidates.len(),
        fragments.len(),
        fragments.iter().map(|f| f.residues.len()).sum::<usize>()
    );
    if fragments.is_empty() {
        return Err(Error::Degenerate("no fragments traced".into()));
    }
    Ok(fragments.len())
}

fn read_fragments(config: &PipelineConfig) -> Result<Vec<Fragment>> {
    let path = config.paths.output_dir.join("fragments.json");
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}

/// Label fragments against the target sequences and write acceptance
/// decisions.
pub fn cmd_align(config: &PipelineConfig) -> Result<Vec<LabelOutcome>> {
    let fragments = read_fragments(config)?;
    let sequences = read_sequences(&config.paths.sequence)?;
    let outcomes = label_fragments(&fragments, &sequences, config.thresholds.confidence)?;
    let dir = ensure_output_dir(config)?;
    write_json(&dir.join("alignment.json"), &outcomes)?;
    // per-fragment confidences, most confident first
    let mut rows: Vec<(usize, f64, &'static str)> = outcomes
        .iter()
        .map(|o| match o {
            LabelOutcome::Accepted(l) => (l.fragment_index, l.confidence, "accepted"),
            LabelOutcome::Rejected {
                fragment_index,
                confidence,
                ..
            } => (*fragment_index, *confidence, "rejected"),
        })
        .collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (idx, conf, status) in &rows {
        log::info!("fragment {idx}: confidence {conf:.3} {status}");
    }
    Ok(outcomes)
}

/// Pair each accepted fragment residue with a particle of the initial
/// structure: sequence `s`, position `p` maps to the `p`-th residue of the
/// `s`-th chain.
fn fragment_correspondences(
    initial: &Structure,
    fragments: &[Fragment],
    outcomes: &[LabelOutcome],
) -> Result<(Vec<usize>, Vec<[f64; 3]>)> {
    let mut chain_offsets = Vec::new();
    let mut offset = 0;
    for chain in &initial.chains {
        chain_offsets.push(offset);
        offset += chain.residues.len();
    }
    let mut atom_ids = Vec::new();
    let mut targets = Vec::new();
    for outcome in outcomes {
        let LabelOutcome::Accepted(label) = outcome else {
            continue;
        };
        let chain = initial.chains.get(label.sequence_index).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "accepted fragment targets sequence {} but the structure has {} chains",
                label.sequence_index,
                initial.chains.len()
            ))
        })?;
        let fragment = &fragments[label.fragment_index];
        for (k, residue) in fragment.residues.iter().enumerate() {
            let pos = label.start_index + k;
            if pos >= chain.residues.len() {
                return Err(Error::InvalidArgument(format!(
                    "fragment {} extends past chain {} ({} residues)",
                    label.fragment_index,
                    chain.id,
                    chain.residues.len()
                )));
            }
            atom_ids.push(chain_offsets[label.sequence_index] + pos);
            targets.push(residue.position);
        }
    }
    if atom_ids.is_empty() {
        return Err(Error::Degenerate(
            "no accepted fragment correspondences to fit against".into(),
        ));
    }
    // a residue claimed by two fragments keeps its first claim
    let mut seen = vec![false; offset];
    let mut ids = Vec::new();
    let mut tgts = Vec::new();
    for (id, t) in atom_ids.into_iter().zip(targets) {
        if !seen[id] {
            seen[id] = true;
            ids.push(id);
            tgts.push(t);
        }
    }
    Ok((ids, tgts))
}

fn load_map(path: &Path) -> Result<VoxelGrid> {
    parse_mrc(&fs::read(path)?)
}

/// Run the staged fitting protocol and write the fitted structure and the
/// trajectory log.
pub fn cmd_fit(config: &PipelineConfig) -> Result<()> {
    let initial = read_structure_file(&config.paths.structure, None)?;
    let fragments = read_fragments(config)?;
    let outcomes_text =
        fs::read_to_string(config.paths.output_dir.join("alignment.json"))?;
    let outcomes: Vec<LabelOutcome> = serde_json::from_str(&outcomes_text)
        .map_err(|e| Error::Serialize(format!("alignment.json: {e}")))?;
    let (atom_ids, targets) = fragment_correspondences(&initial, &fragments, &outcomes)?;

    let initial_coords: Vec<[f64; 3]> = initial
        .chains
        .iter()
        .flat_map(|c| c.residues.iter())
        .map(|r| {
            r.ca()
                .map(|a| a.position)
                .ok_or_else(|| Error::Structure("residue without CA".into()))
        })
        .collect::<Result<_>>()?;

    let fit = &config.fitting;
    let h = fit.h / atom_ids.len() as f64;
    let restraint = TmdRestraint::new(
        atom_ids.clone(),
        targets,
        h,
        fit.t_total,
        &initial_coords,
    )?;

    // maps outlive the stage list that borrows them
    let bb_map;
    let exp_map;
    let mut need_bb = false;
    let mut need_exp = false;
    for name in &fit.stages {
        match name.as_str() {
            "backbone" => need_bb = true,
            "experimental" | "correlation" => need_exp = true,
            _ => {}
        }
    }
    bb_map = if need_bb {
        Some(read_feature_dir(&config.paths.feature_dir)?.bb_prob)
    } else {
        None
    };
    exp_map = if need_exp {
        let path = config.paths.map.as_ref().ok_or_else(|| {
            Error::InvalidArgument("experimental stage requires paths.map".into())
        })?;
        Some(load_map(path)?)
    } else {
        None
    };

    let mut stages: Vec<StageSpec> = Vec::new();
    for name in &fit.stages {
        let mut stage = StageSpec::new(name.clone());
        stage.max_steps = fit.max_steps;
        stage.force_tolerance = fit.force_tolerance;
        stage.friction = fit.friction;
        stage.dt = fit.dt;
        stage.k_pos = fit.k_pos;
        stage.sample_interval = fit.sample_interval;
        match name.as_str() {
            "tmd" => {
                stage.terms.push(StageTerm::Tmd(restraint.clone()));
            }
            "backbone" => {
                stage.terms.push(StageTerm::Mdff {
                    map: bb_map.as_ref().expect("loaded above"),
                    k: fit.backbone_map_k,
                    atom_ids: None,
                });
                stage.restrained_atoms = atom_ids.clone();
            }
            "experimental" => {
                stage.terms.push(StageTerm::Mdff {
                    map: exp_map.as_ref().expect("loaded above"),
                    k: fit.experimental_map_k,
                    atom_ids: None,
                });
                stage.restrained_atoms = atom_ids.clone();
            }
            "correlation" => {
                let map = exp_map.as_ref().expect("loaded above");
                let sim = SimulationSpec::new(fit.resolution, GridSpec::of(map))?;
                stage.terms.push(StageTerm::Cdmd {
                    map,
                    k: fit.correlation_k,
                    sim,
                });
                stage.ccc_target = fit.ccc_target;
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown fitting stage {other:?}"
                )))
            }
        }
        stages.push(stage);
    }

    let (fitted, log_records) = run_fitting(&initial, &stages, &config.topology)?;
    let dir = ensure_output_dir(config)?;
    fs::write(dir.join("fitted.pdb"), write_structure(&fitted)?)?;
    let mut trajectory = String::new();
    for record in &log_records {
        trajectory.push_str(
            &serde_json::to_string(record).map_err(|e| Error::Serialize(e.to_string()))?,
        );
        trajectory.push('\n');
    }
    fs::write(dir.join("trajectory.jsonl"), trajectory)?;
    if let Some(last) = log_records.last() {
        log::info!(
            "fitting finished: total energy {:.4}, rmsd to targets {:?}",
            last.total,
            last.rmsd_to_target
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub ca_precision: f64,
    pub ca_recall: f64,
    pub aa_precision: f64,
    pub rmsd_common: f64,
    pub tm_score: f64,
    pub common_residues: usize,
}

/// Compare a model against the ground-truth structure.
pub fn cmd_eval(config: &PipelineConfig, model_path: Option<&Path>) -> Result<EvalReport> {
    let truth = read_structure_file(&config.paths.structure, None)?;
    let default_model = config.paths.output_dir.join("fitted.pdb");
    let model = read_structure_file(model_path.unwrap_or(&default_model), None)?;

    let model_cas = model.ca_positions();
    let truth_cas = truth.ca_positions();
    let report = ca_precision_recall(&model_cas, &truth_cas, 1.5)?;

    let assignments: Vec<([f64; 3], _)> = model
        .chains
        .iter()
        .flat_map(|c| c.residues.iter())
        .filter_map(|r| r.ca().map(|a| (a.position, r.aa_type)))
        .collect();
    let aa = aa_precision(&assignments, &truth)?;

    // common residues by chain id and residue index, for map-frame RMSD
    let mut a = Vec::new();
    let mut b = Vec::new();
    for tc in &truth.chains {
        if let Some(mc) = model.chain(tc.id) {
            for tr in &tc.residues {
                if let Some(mr) = mc.residues.iter().find(|r| r.index == tr.index) {
                    if let (Some(ta), Some(ma)) = (tr.ca(), mr.ca()) {
                        a.push(ma.position);
                        b.push(ta.position);
                    }
                }
            }
        }
    }
    let rmsd_common = rmsd(&a, &b)?;
    let tm = tm_score(&model, &truth)?;

    let eval = EvalReport {
        ca_precision: report.precision,
        ca_recall: report.recall,
        aa_precision: aa,
        rmsd_common,
        tm_score: tm,
        common_residues: a.len(),
    };
    let dir = ensure_output_dir(config)?;
    write_json(&dir.join("eval.json"), &eval)?;
    log::info!(
        "precision {:.4} recall {:.4} aa {:.4} rmsd {:.4} tm {:.4}",
        eval.ca_precision,
        eval.ca_recall,
        eval.aa_precision,
        eval.rmsd_common,
        eval.tm_score
    );
    Ok(eval)
}

// ---------------------------------------------------------------------------
// Ablation sweeps
// ---------------------------------------------------------------------------

/// One row of the pruning sweep: detection-stage precision/recall averaged
/// over seeds, at one minimum fragment length.
#[derive(Debug, Serialize)]
pub struct PruningRow {
    pub min_len: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Sweep the fragment pruning threshold over a seeded noisy ensemble and
/// report mean CA precision/recall per threshold.
///
/// Pruning discards fragments that are both shorter than `min_len` and
/// below the alignment confidence threshold; a short fragment whose AA
/// profile aligns confidently against some target sequence is kept.
pub fn cmd_ablate_pruning(
    config: &PipelineConfig,
    seeds: u64,
    min_lens: &[usize],
) -> Result<Vec<PruningRow>> {
    use cryofit_core::seqalign::{alignment_scores, confidence};

    let structure = read_structure_file(&config.paths.structure, None)?;
    let spec = LabelGridSpec::covering(
        &structure,
        config.labels.bb_spacing,
        config.labels.margin,
    )?;
    let labels = generate_labels(&structure, &spec)?;
    let truth_cas = structure.ca_positions();
    let sequences: Vec<Sequence> = structure
        .chains
        .iter()
        .filter_map(|c| structure.chain_sequence(c.id))
        .collect();

    let best_confidence = |fragment: &Fragment| -> f64 {
        sequences
            .iter()
            .filter_map(|seq| {
                let scores = alignment_scores(fragment, seq).ok()?;
                confidence(&scores).ok()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let mut rows = Vec::new();
    for &min_len in min_lens {
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        for seed in 0..seeds {
            let mut noise = config.noise.clone();
            noise.seed = config.seed.wrapping_add(seed);
            let (noisy, _) = inject_noise(&labels, &noise)?;
            let candidates = extract_candidates(&noisy, config.thresholds.detection)?;
            let fragments =
                trace_fragments(&candidates, config.thresholds.epsilon_sq, &spec)?;
            let kept: Vec<&Fragment> = fragments
                .iter()
                .filter(|f| {
                    f.residues.len() >= min_len
                        || best_confidence(f) >= config.thresholds.confidence
                })
                .collect();
            let detected: Vec<[f64; 3]> = kept
                .iter()
                .flat_map(|f| f.residues.iter().map(|r| r.position))
                .collect();
            let m = ca_precision_recall(&detected, &truth_cas, 1.5)?;
            p_sum += m.precision;
            r_sum += m.recall;
        }
        rows.push(PruningRow {
            min_len,
            precision: p_sum / seeds as f64,
            recall: r_sum / seeds as f64,
        });
    }
    let dir = ensure_output_dir(config)?;
    let mut tsv = String::from("min_len\tprecision\trecall\n");
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            row.min_len, row.precision, row.recall
        ));
    }
    fs::write(dir.join("ablation_pruning.tsv"), tsv)?;
    Ok(rows)
}

/// Joint (windowed alignment) vs individual (per-residue argmax) AA-type
/// precision over a seeded noisy ensemble.
#[derive(Debug, Serialize)]
pub struct AaRow {
    pub seed: u64,
    pub individual: f64,
    pub joint: f64,
}

pub fn cmd_ablate_aa(config: &PipelineConfig, seeds: u64) -> Result<Vec<AaRow>> {
    use cryofit_core::structio::AminoAcid;

    let structure = read_structure_file(&config.paths.structure, None)?;
    let spec = LabelGridSpec::covering(
        &structure,
        config.labels.bb_spacing,
        config.labels.margin,
    )?;
    let labels = generate_labels(&structure, &spec)?;
    let sequences: Vec<Sequence> = structure
        .chains
        .iter()
        .filter_map(|c| structure.chain_sequence(c.id))
        .collect();

    let mut rows = Vec::new();
    for seed in 0..seeds {
        let mut noise = config.noise.clone();
        noise.seed = config.seed.wrapping_add(seed);
        let (noisy, _) = inject_noise(&labels, &noise)?;
        let candidates = extract_candidates(&noisy, config.thresholds.detection)?;
        let fragments = trace_fragments(&candidates, config.thresholds.epsilon_sq, &spec)?;
        let fragments = prune_fragments(fragments, 5)?;
        if fragments.is_empty() {
            continue;
        }

        // individual: per-residue argmax of the AA distribution
        let individual_assignments: Vec<([f64; 3], AminoAcid)> = fragments
            .iter()
            .flat_map(|f| f.residues.iter())
            .map(|r| (r.position, r.aa_argmax()))
            .collect();
        let individual = aa_precision(&individual_assignments, &structure)?;

        // joint: windowed alignment against the true sequences
        let outcomes = label_fragments(&fragments, &sequences, config.thresholds.confidence)?;
        let mut joint_assignments: Vec<([f64; 3], AminoAcid)> = Vec::new();
        for outcome in &outcomes {
            let LabelOutcome::Accepted(label) = outcome else {
                continue;
            };
            let fragment = &fragments[label.fragment_index];
            let seq = &sequences[label.sequence_index];
            for (k, residue) in fragment.residues.iter().enumerate() {
                joint_assignments
                    .push((residue.position, seq.residues()[label.start_index + k]));
            }
        }
        if joint_assignments.is_empty() {
            continue;
        }
        let joint = aa_precision(&joint_assignments, &structure)?;
        rows.push(AaRow {
            seed,
            individual,
            joint,
        });
    }
    let dir = ensure_output_dir(config)?;
    let mut tsv = String::from("seed\tindividual\tjoint\n");
    for row in &rows {
        tsv.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            row.seed, row.individual, row.joint
        ));
    }
    fs::write(dir.join("ablation_aa.tsv"), tsv)?;
    Ok(rows)
}
