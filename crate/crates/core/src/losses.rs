//! Training objectives: SI-SDR, the contrastive contextual loss, hybrid weighting and
//! permutation-invariant assignment.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{si_sdr_value, Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::signal::Waveform;
use crate::teacher::TeacherKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfoNceConfig {
    pub temperature: f64,
    pub num_negatives: usize,
    pub seed: u64,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            num_negatives: 31,
            seed: 0,
        }
    }
}

impl InfoNceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("infonce temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Group-stage supervision targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Signal,
    Mel,
    Phoneme,
    Word,
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Signal, Target::Mel, Target::Phoneme, Target::Word];

    pub fn teacher_kind(self) -> Option<TeacherKind> {
        match self {
            Target::Signal => None,
            Target::Mel => Some(TeacherKind::Mel),
            Target::Phoneme => Some(TeacherKind::Phoneme),
            Target::Word => Some(TeacherKind::Word),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Signal => "signal",
            Target::Mel => "mel",
            Target::Phoneme => "phoneme",
            Target::Word => "word",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownKind(s.to_string()))
    }
}

/// Positive teacher frame plus its negative distractors.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub positive: Vec<f32>,
    pub negatives: Vec<Vec<f32>>,
    /// Set when the utterance was too short and negatives were drawn with replacement.
    pub with_replacement: bool,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        1 + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positive first, then negatives.
    pub fn vectors<T: Scalar>(&self) -> Vec<Vec<T>> {
        std::iter::once(&self.positive)
            .chain(&self.negatives)
            .map(|v| v.iter().map(|&x| T::lit(x as f64)).collect())
            .collect()
    }
}

/// Candidates for `speaker`'s frame `frame`: the other speakers' vectors at the same frame come
/// first, the rest are drawn (seeded, without replacement) from every other frame of every
/// speaker in the utterance. `targets` holds one frame-aligned matrix per speaker.
pub fn build_candidates(
    targets: &[&FeatureMatrix],
    speaker: usize,
    frame: usize,
    num_negatives: usize,
    seed: u64,
) -> Result<CandidateSet> {
    let own = targets
        .get(speaker)
        .ok_or_else(|| Error::InvalidArgument(format!("speaker {speaker} out of range")))?;
    if frame >= own.frames {
        return Err(Error::InvalidArgument(format!(
            "frame {frame} out of range"
        )));
    }
    let frames = targets.iter().map(|m| m.frames).min().unwrap();
    if targets.iter().any(|m| m.dim != own.dim) {
        return Err(Error::Shape("teacher dims differ between speakers".into()));
    }
    let mut negatives: Vec<Vec<f32>> = targets
        .iter()
        .enumerate()
        .filter(|&(j, m)| j != speaker && frame < m.frames)
        .map(|(_, m)| m.row(frame).to_vec())
        .take(num_negatives)
        .collect();
    let remaining = num_negatives - negatives.len();
    let mut with_replacement = false;
    if remaining > 0 {
        let pool: Vec<(usize, usize)> = (0..targets.len())
            .flat_map(|j| (0..frames).map(move |t| (j, t)))
            .filter(|&(_, t)| t != frame)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((speaker as u64) << 32) | frame as u64);
        if pool.len() >= remaining {
            for i in rand::seq::index::sample(&mut rng, pool.len(), remaining) {
                let (j, t) = pool[i];
                negatives.push(targets[j].row(t).to_vec());
            }
        } else {
            with_replacement = true;
            for _ in 0..remaining {
                if pool.is_empty() {
                    // Nothing else to draw from: reuse same-frame vectors of other speakers.
                    let j = (speaker + 1) % targets.len();
                    negatives.push(targets[j].row(frame).to_vec());
                } else {
                    let (j, t) = pool[rng.random_range(0..pool.len())];
                    negatives.push(targets[j].row(t).to_vec());
                }
            }
        }
    }
    Ok(CandidateSet {
        positive: own.row(frame).to_vec(),
        negatives,
        with_replacement,
    })
}

/// Candidate vectors for every frame of `speaker`, ready for [`Graph::info_nce`].
pub fn frame_candidates<T: Scalar>(
    targets: &[&FeatureMatrix],
    speaker: usize,
    cfg: &InfoNceConfig,
    seed: u64,
) -> Result<Vec<Vec<Vec<T>>>> {
    let frames = targets.iter().map(|m| m.frames).min().unwrap_or(0);
    (0..frames)
        .map(|t| {
            build_candidates(targets, speaker, t, cfg.num_negatives, seed).map(|c| c.vectors())
        })
        .collect()
}

/// Contrastive loss of predicted frames `pred` (`dim × t`) against per-frame candidate sets.
pub fn infonce<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    candidates: &[Vec<Vec<T>>],
    temperature: f64,
) -> Result<Var> {
    g.info_nce(pred, candidates, T::lit(temperature))
}

/// Zero-mean SI-SDR in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_with(&to_f64(&est.samples), &to_f64(&reference.samples), true)
}

pub fn si_sdr_with(est: &[f64], reference: &[f64], zero_mean: bool) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::LengthMismatch(est.len(), reference.len()));
    }
    if reference.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidArgument("zero reference".into()));
    }
    Ok(si_sdr_value(est, reference, zero_mean))
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `-si_sdr(est, reference)` as a differentiable node.
pub fn si_sdr_loss<T: Scalar>(g: &mut Graph<T>, est: Var, reference: &[T]) -> Result<Var> {
    if reference.iter().all(|&v| v == T::zero()) {
        return Err(Error::InvalidArgument("zero reference".into()));
    }
    g.neg_si_sdr(est, reference, true)
}

/// Weighted sum of named loss terms; missing weights default to 1.
pub fn hybrid_loss<T: Scalar>(
    g: &mut Graph<T>,
    components: &BTreeMap<Target, Var>,
    weights: &BTreeMap<Target, f64>,
) -> Result<Var> {
    if components.is_empty() {
        return Err(Error::InvalidArgument(
            "hybrid loss needs at least one component".into(),
        ));
    }
    if let Some(t) = weights.keys().find(|t| !components.contains_key(t)) {
        return Err(Error::UnknownKind(format!("no loss component named {t}")));
    }
    let terms: Vec<(Var, T)> = components
        .iter()
        .map(|(t, &v)| (v, T::lit(weights.get(t).copied().unwrap_or(1.0))))
        .collect();
    g.weighted_sum(&terms)
}

/// Assignment of output `i` to reference `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Permutation(pub Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0
            .iter()
            .all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }
}

pub const PIT_MAX_SPEAKERS: usize = 6;

/// Advances `p` to the next permutation in lexicographic order; false after the last one.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Exhaustive permutation search minimising `Σ_i loss[i][π(i)]`; ties go to the
/// lexicographically smallest mapping.
pub fn pit(loss: &[Vec<f64>]) -> Result<(Permutation, f64)> {
    let s = loss.len();
    if s == 0 || loss.iter().any(|row| row.len() != s) {
        return Err(Error::Shape(format!(
            "pit needs a non-empty square matrix, got {s} rows"
        )));
    }
    if s > PIT_MAX_SPEAKERS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive pit supports at most {PIT_MAX_SPEAKERS} speakers"
        )));
    }
    let mut p: Vec<usize> = (0..s).collect();
    let mut best = (p.clone(), f64::INFINITY);
    loop {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| loss[i][j]).sum();
        if total < best.1 {
            best = (p.clone(), total);
        }
        if !next_permutation(&mut p) {
            break;
        }
    }
    Ok((Permutation(best.0), best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pit_examples() {
        let (p, t) = pit(&[vec![0.0, 10.0], vec![10.0, 0.0]]).unwrap();
        assert_eq!((p.0, t), (vec![0, 1], 0.0));
        let (p, t) = pit(&[vec![5.0, 1.0], vec![2.0, 8.0]]).unwrap();
        assert_eq!((p.0, t), (vec![1, 0], 3.0));
        let (p, _) = pit(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(p.0, vec![0, 1]);
        assert!(pit(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn next_permutation_enumerates_all() {
        let mut p = vec![0, 1, 2, 3];
        let mut n = 1;
        while next_permutation(&mut p) {
            n += 1;
        }
        assert_eq!(n, 24);
        assert_eq!(p, vec![3, 2, 1, 0]);
    }

    #[test]
    fn si_sdr_cases() {
        let v = si_sdr_with(&[0.5, 0.5, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], false).unwrap();
        assert!(v.abs() < 1e-6);
        let s = [3.0, -2.0, 9.0, 1.0, -4.0];
        let scaled: Vec<f64> = s.iter().map(|v| v * 2.5).collect();
        assert!(si_sdr_with(&s, &s, true).unwrap() >= 80.0);
        assert!(si_sdr_with(&scaled, &s, true).unwrap() >= 80.0);
        let orth = si_sdr_with(&[0.0, 1.0, 0.0, -1.0], &[1.0, 0.0, -1.0, 0.0], true).unwrap();
        assert!(orth <= -80.0);
        assert!(si_sdr_with(&[1.0], &[0.0], true).is_err());
        assert!(si_sdr_with(&[1.0, 2.0], &[1.0], true).is_err());
    }

    #[test]
    fn si_sdr_loss_node() {
        let reference = [3.0, -2.0, 9.0, 1.0, -4.0];
        let mut g = Graph::<f64>::new();
        let e = g.constant(vec![1, 5], reference.to_vec());
        let l = si_sdr_loss(&mut g, e, &reference).unwrap();
        assert!(g.scalar(l) <= -80.0);
        let est = [1.0, 4.0, 5.0, -3.0, 2.0];
        let e1 = g.constant(vec![1, 5], est.to_vec());
        let e2 = g.constant(vec![1, 5], est.iter().map(|v| v * 2.0).collect());
        let l1 = si_sdr_loss(&mut g, e1, &reference).unwrap();
        let l2 = si_sdr_loss(&mut g, e2, &reference).unwrap();
        assert!((g.scalar(l1) - g.scalar(l2)).abs() < 1e-6);
        assert!(si_sdr_loss(&mut g, e1, &[0.0; 5]).is_err());
    }

    fn fm(frames: usize, dim: usize, offset: f32) -> FeatureMatrix {
        let v = (0..frames * dim).map(|i| i as f32 + offset).collect();
        FeatureMatrix::new(frames, dim, v, 50.0).unwrap()
    }

    #[test]
    fn candidate_rules() {
        let a = fm(10, 3, 0.0);
        let b = fm(10, 3, 1000.0);
        let t = [&a, &b];
        let c = build_candidates(&t, 0, 4, 1, 9).unwrap();
        assert_eq!(c.positive, a.row(4));
        assert_eq!(c.negatives, vec![b.row(4).to_vec()]);

        let c0 = build_candidates(&t, 0, 4, 0, 9).unwrap();
        assert_eq!(c0.len(), 1);

        let x = build_candidates(&t, 1, 7, 12, 3).unwrap();
        let y = build_candidates(&t, 1, 7, 12, 3).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.len(), 13);
        assert!(!x.with_replacement);
        assert!(!x.negatives.contains(&b.row(7).to_vec()));
        let mut uniq = x.negatives.clone();
        uniq.sort_by(|p, q| p.partial_cmp(q).unwrap());
        uniq.dedup();
        assert_eq!(uniq.len(), 12);

        let short = build_candidates(&[&fm(2, 3, 0.0), &fm(2, 3, 5.0)], 0, 0, 31, 1).unwrap();
        assert!(short.with_replacement);
        assert_eq!(short.len(), 32);
    }

    #[test]
    fn hybrid_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(vec![1], vec![2.0]);
        let b = g.constant(vec![1], vec![3.0]);
        let comps: BTreeMap<_, _> = [(Target::Mel, a), (Target::Word, b)].into();
        let l = hybrid_loss(&mut g, &comps, &BTreeMap::new()).unwrap();
        assert_eq!(g.scalar(l), 5.0);
        let single: BTreeMap<_, _> = [(Target::Mel, a)].into();
        let l = hybrid_loss(&mut g, &single, &[(Target::Mel, 1.0)].into()).unwrap();
        assert_eq!(g.scalar(l), 2.0);
        let err = hybrid_loss(&mut g, &single, &[(Target::Signal, 1.0)].into());
        assert!(err.is_err());
        assert!(hybrid_loss(&mut g, &BTreeMap::new(), &BTreeMap::new()).is_err());
    }

    #[test]
    fn infonce_monotone_in_positive_similarity() {
        let neg = vec![0.0, 1.0];
        let mut prev = f64::INFINITY;
        for angle in [1.2f64, 0.9, 0.6, 0.3, 0.0] {
            let mut g = Graph::<f64>::new();
            let pred = g.constant(vec![2, 1], vec![1.0, 0.0]);
            let pos = vec![angle.cos(), angle.sin()];
            let l = infonce(&mut g, pred, &[vec![pos, neg.clone()]], 0.1).unwrap();
            let v = g.scalar(l);
            assert!(v < prev && v >= 0.0);
            prev = v;
        }
    }

    proptest! {
        #[test]
        fn pit_shift_invariance(vals in prop::collection::vec(-5.0f64..5.0, 9), c in -3.0f64..3.0) {
            let m: Vec<Vec<f64>> = vals.chunks(3).map(|r| r.to_vec()).collect();
            let shifted: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
            let (p1, t1) = pit(&m).unwrap();
            let (p2, t2) = pit(&shifted).unwrap();
            prop_assume!({
                // skip near-ties, where rounding of the shifted sums can flip the argmin
                let mut totals = vec![];
                let mut p = vec![0, 1, 2];
                loop {
                    totals.push(p.iter().enumerate().map(|(i, &j)| m[i][j]).sum::<f64>());
                    if !next_permutation(&mut p) { break; }
                }
                totals.sort_by(f64::total_cmp);
                totals[1] - totals[0] > 1e-9
            });
            prop_assert_eq!(p1, p2);
            prop_assert!((t2 - t1 - 3.0 * c).abs() < 1e-9);
        }

        #[test]
        fn infonce_nonnegative(
            p in prop::collection::vec(-1.0f64..1.0, 4),
            cands in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..6),
            temp in 0.05f64..2.0,
        ) {
            let mut g = Graph::<f64>::new();
            let pred = g.constant(vec![4, 1], p);
            let l = infonce(&mut g, pred, std::slice::from_ref(&cands), temp).unwrap();
            prop_assert!(g.scalar(l) >= -1e-12);
            if cands.len() == 1 {
                prop_assert!(g.scalar(l).abs() < 1e-12);
            }
        }

        #[test]
        fn si_sdr_scale_and_offset_invariance(
            s in prop::collection::vec(-1.0f64..1.0, 32),
            e in prop::collection::vec(-1.0f64..1.0, 32),
            c in 0.1f64..10.0,
            off in -1.0f64..1.0,
        ) {
            let energy = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            };
            prop_assume!(energy(&s) > 1.0 && energy(&e) > 1.0);
            let ms = s.iter().sum::<f64>() / 32.0;
            let me = e.iter().sum::<f64>() / 32.0;
            let dot: f64 = s.iter().zip(&e).map(|(a, b)| (a - ms) * (b - me)).sum();
            let target = dot * dot / energy(&s);
            let noise = energy(&e) - target;
            prop_assume!(target > 1e-3 && noise > 1e-3);
            let base = si_sdr_with(&e, &s, true).unwrap();
            // scaling moves the result only through the epsilon terms
            let tol = 1e-9 + 10.0 * std::f64::consts::LOG10_E * 3e-8 / (c.min(1.0).powi(2) * target.min(noise));
            let scaled: Vec<f64> = e.iter().map(|v| v * c).collect();
            let shifted: Vec<f64> = e.iter().map(|v| v + off).collect();
            prop_assert!((si_sdr_with(&scaled, &s, true).unwrap() - base).abs() < tol);
            prop_assert!((si_sdr_with(&shifted, &s, true).unwrap() - base).abs() < 1e-6);
        }
    }
}
