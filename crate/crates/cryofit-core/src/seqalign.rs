//! Fragment-to-sequence alignment: windowed log-probability scoring,
//! score standardization, and greedy conflict-free labeling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structio::{AminoAcid, Sequence};
use crate::tracing::Fragment;

const PROB_FLOOR: f64 = 1e-9;
const STD_REGULARIZER: f64 = 1e-6;

/// Default confidence threshold for accepting an alignment.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 3.4;

/// A fragment assigned to a sequence window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFragment {
    pub fragment_index: usize,
    /// Index into the sequence list the fragment was aligned against.
    pub sequence_index: usize,
    /// 0-based position of the first fragment residue in that sequence.
    pub start_index: usize,
    pub aa_assignment: Vec<char>,
    pub confidence: f64,
    pub best_score: f64,
    /// Argmax ties were present (reported, smallest index kept).
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelOutcome {
    Accepted(LabeledFragment),
    Rejected {
        fragment_index: usize,
        confidence: f64,
        reason: String,
    },
}

/// Mean log-probability of each sequence window under the fragment's
/// AA-type distributions: `s(i) = (1/N) * sum_k log p_k(seq[i+k])`.
/// Every score is <= 0; a perfect one-hot match scores 0.
pub fn alignment_scores(fragment: &Fragment, sequence: &Sequence) -> Result<Vec<f64>> {
    let n = fragment.len();
    let l = sequence.len();
    if n == 0 {
        return Err(Error::Degenerate("empty fragment".into()));
    }
    if n > l {
        return Err(Error::InvalidArgument(format!(
            "fragment length {n} exceeds sequence length {l}"
        )));
    }
    let residues = sequence.residues();
    let mut scores = Vec::with_capacity(l - n + 1);
    for i in 0..=l - n {
        let mut sum = 0.0;
        for (k, cand) in fragment.residues.iter().enumerate() {
            let p = cand.aa_dist[residues[i + k].index()].max(PROB_FLOOR);
            sum += p.ln();
        }
        scores.push(sum / n as f64);
    }
    Ok(scores)
}

/// Standardized peak height `(max(s) - mean(s)) / (pop_std(s) + 1e-6)`.
pub fn confidence(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Degenerate("empty score vector".into()));
    }
    let n = scores.len() as f64;
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    Ok((max - mean) / (var.sqrt() + STD_REGULARIZER))
}

fn best_window(scores: &[f64]) -> (usize, f64, bool) {
    let mut best = 0;
    let mut ties = false;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
            ties = false;
        } else if scores[i] == scores[best] {
            ties = true;
        }
    }
    (best, scores[best], ties)
}

/// Label one fragment against one sequence. `assigned` marks sequence
/// positions already claimed by higher-confidence fragments; an overlap
/// is a rejection, not an error.
pub fn label_fragment(
    fragment_index: usize,
    fragment: &Fragment,
    sequence: &Sequence,
    conf_threshold: f64,
    assigned: &[bool],
) -> Result<LabelOutcome> {
    let scores = alignment_scores(fragment, sequence)?;
    let conf = confidence(&scores)?;
    let (start, best_score, ambiguous) = best_window(&scores);
    if conf < conf_threshold {
        return Ok(LabelOutcome::Rejected {
            fragment_index,
            confidence: conf,
            reason: format!("confidence {conf:.3} below threshold {conf_threshold}"),
        });
    }
    let n = fragment.len();
    if assigned[start..start + n].iter().any(|&a| a) {
        return Ok(LabelOutcome::Rejected {
            fragment_index,
            confidence: conf,
            reason: "window overlaps a higher-confidence assignment".into(),
        });
    }
    Ok(LabelOutcome::Accepted(LabeledFragment {
        fragment_index,
        sequence_index: 0,
        start_index: start,
        aa_assignment: sequence.residues()[start..start + n]
            .iter()
            .map(|aa| aa.one_letter())
            .collect(),
        confidence: conf,
        best_score,
        ambiguous,
    }))
}

/// Label all fragments against one or more chain sequences.
///
/// Each fragment is scored against every sequence; scores are pooled for
/// standardization and the global best window wins. Fragments are then
/// processed in descending confidence and later overlapping claims are
/// rejected, so accepted windows never overlap within a sequence.
pub fn label_fragments(
    fragments: &[Fragment],
    sequences: &[Sequence],
    conf_threshold: f64,
) -> Result<Vec<LabelOutcome>> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("no sequences given".into()));
    }
    struct Scored {
        fragment_index: usize,
        sequence_index: usize,
        start: usize,
        best_score: f64,
        confidence: f64,
        ambiguous: bool,
    }
    let mut scored = Vec::with_capacity(fragments.len());
    for (fi, frag) in fragments.iter().enumerate() {
        let mut pooled = Vec::new();
        let mut per_seq: Vec<(usize, Vec<f64>)> = Vec::new();
        for (si, seq) in sequences.iter().enumerate() {
            if frag.len() > seq.len() {
                continue;
            }
            let s = alignment_scores(frag, seq)?;
            pooled.extend_from_slice(&s);
            per_seq.push((si, s));
        }
        if pooled.is_empty() {
            scored.push(Scored {
                fragment_index: fi,
                sequence_index: 0,
                start: 0,
                best_score: f64::NEG_INFINITY,
                confidence: f64::NEG_INFINITY,
                ambiguous: false,
            });
            continue;
        }
        let conf = confidence(&pooled)?;
        let mut best: Option<(usize, usize, f64, bool)> = None;
        for (si, s) in &per_seq {
            let (start, sc, amb) = best_window(s);
            let better = match best {
                None => true,
                Some((_, _, bs, _)) => sc > bs,
            };
            let tie = matches!(best, Some((_, _, bs, _)) if sc == bs);
            if better {
                best = Some((*si, start, sc, amb));
            } else if tie {
                if let Some(b) = best.as_mut() {
                    b.3 = true;
                }
            }
        }
        let (si, start, sc, amb) = best.unwrap();
        scored.push(Scored {
            fragment_index: fi,
            sequence_index: si,
            start,
            best_score: sc,
            confidence: conf,
            ambiguous: amb,
        });
    }

    // greedy conflict resolution in descending confidence
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .confidence
            .total_cmp(&scored[a].confidence)
            .then(scored[a].fragment_index.cmp(&scored[b].fragment_index))
    });
    let mut assigned: Vec<Vec<bool>> = sequences.iter().map(|s| vec![false; s.len()]).collect();
    let mut outcomes: Vec<Option<LabelOutcome>> = (0..scored.len()).map(|_| None).collect();
    for &k in &order {
        let s = &scored[k];
        let fi = s.fragment_index;
        let n = fragments[fi].len();
        if !s.confidence.is_finite() {
            outcomes[k] = Some(LabelOutcome::Rejected {
                fragment_index: fi,
                confidence: s.confidence,
                reason: "fragment longer than every sequence".into(),
            });
            continue;
        }
        if s.confidence < conf_threshold {
            outcomes[k] = Some(LabelOutcome::Rejected {
                fragment_index: fi,
                confidence: s.confidence,
                reason: format!(
                    "confidence {:.3} below threshold {conf_threshold}",
                    s.confidence
                ),
            });
            continue;
        }
        let window = &assigned[s.sequence_index][s.start..s.start + n];
        if window.iter().any(|&a| a) {
            outcomes[k] = Some(LabelOutcome::Rejected {
                fragment_index: fi,
                confidence: s.confidence,
                reason: "window overlaps a higher-confidence assignment".into(),
            });
            continue;
        }
        for slot in &mut assigned[s.sequence_index][s.start..s.start + n] {
            *slot = true;
        }
        outcomes[k] = Some(LabelOutcome::Accepted(LabeledFragment {
            fragment_index: fi,
            sequence_index: s.sequence_index,
            start_index: s.start,
            aa_assignment: sequences[s.sequence_index].residues()[s.start..s.start + n]
                .iter()
                .map(|aa: &AminoAcid| aa.one_letter())
                .collect(),
            confidence: s.confidence,
            best_score: s.best_score,
            ambiguous: s.ambiguous,
        }));
    }
    Ok(outcomes.into_iter().map(|o| o.unwrap()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structio::parse_fasta;
    use crate::tracing::CaCandidate;

    fn one_hot_fragment(seq: &str) -> Fragment {
        let residues = seq
            .chars()
            .enumerate()
            .map(|(i, c)| {
                let aa = AminoAcid::from_one_letter(c).unwrap();
                let mut dist = vec![0.0; 20];
                dist[aa.index()] = 1.0;
                CaCandidate {
                    cell: (i, 0, 0),
                    position: [i as f64 * 3.8, 0.0, 0.0],
                    ppv: [3.8, 0.0, 0.0],
                    aa_dist: dist,
                    score: 1.0,
                }
            })
            .collect();
        Fragment { residues }
    }

    fn uniform_fragment(n: usize) -> Fragment {
        let residues = (0..n)
            .map(|i| CaCandidate {
                cell: (i, 0, 0),
                position: [i as f64 * 3.8, 0.0, 0.0],
                ppv: [3.8, 0.0, 0.0],
                aa_dist: vec![0.05; 20],
                score: 1.0,
            })
            .collect();
        Fragment { residues }
    }

    #[test]
    fn one_hot_match_scores_zero() {
        let seq = parse_fasta(">x\nMKWVTFISLL\n").unwrap();
        let frag = one_hot_fragment("VTF");
        let s = alignment_scores(&frag, &seq).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s[3], 0.0);
        assert!(s.iter().all(|&v| v <= 0.0));
        assert!(s.iter().enumerate().all(|(i, &v)| i == 3 || v < 0.0));
    }

    #[test]
    fn uniform_scores_are_log20() {
        let seq = parse_fasta(">x\nMKWVTFISLL\n").unwrap();
        let frag = uniform_fragment(4);
        let s = alignment_scores(&frag, &seq).unwrap();
        for v in s {
            assert!((v + 20.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_match_double_loop_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let letters: String = (0..30)
            .map(|_| {
                AminoAcid::from_index(rng.random_range(0..20))
                    .unwrap()
                    .one_letter()
            })
            .collect();
        let seq = parse_fasta(&format!(">x\n{letters}\n")).unwrap();
        let mut frag = uniform_fragment(5);
        for r in &mut frag.residues {
            let mut dist: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|d| *d /= sum);
            r.aa_dist = dist;
        }
        let got = alignment_scores(&frag, &seq).unwrap();
        for i in 0..=25 {
            let mut sum = 0.0;
            for k in 0..5 {
                sum += frag.residues[k].aa_dist[seq.residues()[i + k].index()]
                    .max(1e-9)
                    .ln();
            }
            assert!((got[i] - sum / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fragment_longer_than_sequence_is_error() {
        let seq = parse_fasta(">x\nMK\n").unwrap();
        assert!(alignment_scores(&uniform_fragment(3), &seq).is_err());
    }

    #[test]
    fn confidence_arithmetic() {
        assert_eq!(confidence(&[-1.0, -1.0, -1.0]).unwrap(), 0.0);
        assert_eq!(confidence(&[0.5]).unwrap(), 0.0);
        let c = confidence(&[0.0, -1.0, -1.0, -1.0, -1.0]).unwrap();
        assert!((c - 0.8 / (0.4 + 1e-6)).abs() < 1e-9);
        assert!((c - 2.0).abs() < 1e-4);
        assert!(confidence(&[]).is_err());
    }

    #[test]
    fn confidence_affine_invariance() {
        let s = vec![-2.0, -0.5, -3.0, -1.1, -0.2];
        let c1 = confidence(&s).unwrap();
        let scaled: Vec<f64> = s.iter().map(|v| 3.0 * v - 7.0).collect();
        let c2 = confidence(&scaled).unwrap();
        assert!((c1 - c2).abs() < 1e-4);
    }

    #[test]
    fn unique_motif_accepted() {
        let seq = parse_fasta(">x\nMKWVTFISLLACDEGH\n").unwrap();
        let frag = one_hot_fragment("FISL");
        let out = label_fragment(0, &frag, &seq, 1.5, &vec![false; 16]).unwrap();
        match out {
            LabelOutcome::Accepted(l) => {
                assert_eq!(l.start_index, 5);
                assert_eq!(l.aa_assignment, vec!['F', 'I', 'S', 'L']);
                assert!(!l.ambiguous);
            }
            other => panic!("expected acceptance, got {other:?}"),
        }
    }

    #[test]
    fn repeated_motif_rejected() {
        let seq = parse_fasta(">x\nAAAAAAAAAA\n").unwrap();
        let frag = one_hot_fragment("AAA");
        let out =
            label_fragment(0, &frag, &seq, DEFAULT_CONFIDENCE_THRESHOLD, &vec![false; 10])
                .unwrap();
        match out {
            LabelOutcome::Rejected { confidence, .. } => assert_eq!(confidence, 0.0),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn uniform_fragment_rejected() {
        let seq = parse_fasta(">x\nMKWVTFISLLACDEGH\n").unwrap();
        let out = label_fragments(
            &[uniform_fragment(4)],
            &[seq],
            DEFAULT_CONFIDENCE_THRESHOLD,
        )
        .unwrap();
        assert!(matches!(&out[0], LabelOutcome::Rejected { .. }));
    }

    #[test]
    fn overlapping_claims_resolved_by_confidence() {
        let seq = parse_fasta(">x\nMKWVTFISLL\n").unwrap();
        // both fragments want the same window; the longer one (higher
        // confidence via sharper peak) must win
        let strong = one_hot_fragment("KWVTF");
        let weak = one_hot_fragment("WVT");
        let out = label_fragments(&[weak, strong], &[seq], 0.5).unwrap();
        // exactly one claim survives, and it sits at its true motif position
        let accepted: Vec<&LabeledFragment> = out
            .iter()
            .filter_map(|o| match o {
                LabelOutcome::Accepted(l) => Some(l),
                _ => None,
            })
            .collect();
        assert_eq!(accepted.len(), 1);
        let l = accepted[0];
        let expected_start = if l.fragment_index == 0 { 2 } else { 1 };
        assert_eq!(l.start_index, expected_start);
        let rejected = out
            .iter()
            .find(|o| matches!(o, LabelOutcome::Rejected { .. }))
            .unwrap();
        if let LabelOutcome::Rejected { reason, .. } = rejected {
            assert!(reason.contains("overlap"));
        }
    }

    #[test]
    fn multi_chain_best_window() {
        let seq_a = parse_fasta(">a\nAAAAAAA\n").unwrap();
        let seq_b = parse_fasta(">b\nMKWVTFI\n").unwrap();
        let frag = one_hot_fragment("WVT");
        let out = label_fragments(&[frag], &[seq_a, seq_b], 1.0).unwrap();
        match &out[0] {
            LabelOutcome::Accepted(l) => {
                assert_eq!(l.sequence_index, 1);
                assert_eq!(l.start_index, 2);
            }
            other => panic!("expected acceptance, got {other:?}"),
        }
    }

    #[test]
    fn aa_axis_permutation_invariance() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let seq = parse_fasta(">x\nMKWVTFISLLACDEGH\n").unwrap();
        let mut frag = uniform_fragment(4);
        for r in &mut frag.residues {
            let mut dist: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = dist.iter().sum();
            dist.iter_mut().for_each(|d| *d /= sum);
            r.aa_dist = dist;
        }
        let base = alignment_scores(&frag, &seq).unwrap();

        // permute the AA axes jointly in the distributions and the sequence
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let mut frag_p = frag.clone();
        for r in &mut frag_p.residues {
            let mut dist = vec![0.0; 20];
            for j in 0..20 {
                dist[perm[j]] = r.aa_dist[j];
            }
            r.aa_dist = dist;
        }
        let seq_p = Sequence::new(
            seq.residues()
                .iter()
                .map(|aa| AminoAcid::from_index(perm[aa.index()]).unwrap())
                .collect(),
        )
        .unwrap();
        let permuted = alignment_scores(&frag_p, &seq_p).unwrap();
        for (a, b) in base.iter().zip(&permuted) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
