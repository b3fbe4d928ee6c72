//! Lossless verification of a draft tree against the target model.
//!
//! Each position's siblings are tested in draw order with the usual
//! speculative-sampling rule: accept `x` with probability
//! `min(1, p(x) / q(x))`, otherwise replace `p` by the normalized residual
//! `max(0, p - q)` and move on to the next sibling, whose `q` is renormalized
//! without the rejected tokens. When every sibling is rejected the bonus token
//! comes from the final residual.
//!
//! Random draws happen in a fixed order: one uniform per sibling test, then
//! one uniform for the bonus token.

use rand::Rng;
use thiserror::Error;

use crate::drafter::{DraftMode, DraftTree};
use crate::model::{sample_index, DenseDistribution, ModelError, TargetModel};
use crate::tree::{NodeId, TreeTopology};
use crate::TokenId;

/// Residual mass below this is treated as zero.
pub const RESIDUAL_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("drafted token {token} has zero draft probability")]
    ZeroDraftProbability { token: TokenId },
    #[error("draft was built for a different context")]
    ContextMismatch,
    #[error("draft has {draft} nodes but the topology has {topology}")]
    TopologyMismatch { draft: usize, topology: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One drafted sibling and the distribution it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SiblingDraft {
    pub token: TokenId,
    /// Sparse draft distribution; renormalized here without earlier rejected siblings.
    pub q: Vec<(TokenId, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PositionOutcome {
    /// Sibling `index` (in draw order) was accepted.
    Accept { index: usize, token: TokenId },
    /// All siblings were rejected; the bonus is drawn from `residual`.
    RejectAll { residual: DenseDistribution },
}

/// Runs sequential rejection over `siblings` at a position with target `p`.
pub fn verify_position<R: Rng + ?Sized>(
    p: &DenseDistribution,
    siblings: &[SiblingDraft],
    rng: &mut R,
) -> Result<PositionOutcome, VerifyError> {
    let mut current: Option<Vec<f64>> = None;
    let mut rejected: Vec<TokenId> = Vec::with_capacity(siblings.len());
    for (index, sibling) in siblings.iter().enumerate() {
        let q_total: f64 = sibling.q.iter().filter(|(t, _)| !rejected.contains(t)).map(|(_, q)| *q).sum();
        let q_raw = sibling.q.iter().find(|(t, _)| *t == sibling.token).map_or(0.0, |(_, q)| *q);
        if q_total <= 0.0 || q_raw <= 0.0 || rejected.contains(&sibling.token) {
            return Err(VerifyError::ZeroDraftProbability { token: sibling.token });
        }
        let qx = q_raw / q_total;
        let px = current.as_ref().map_or_else(|| p.prob(sibling.token), |c| c[sibling.token as usize]);
        let u: f64 = rng.random();
        if u < (px / qx).min(1.0) {
            return Ok(PositionOutcome::Accept { index, token: sibling.token });
        }
        let cur = current.get_or_insert_with(|| p.probs().to_vec());
        for &(t, q) in &sibling.q {
            if !rejected.contains(&t) {
                let slot = &mut cur[t as usize];
                *slot = (*slot - q / q_total).max(0.0);
            }
        }
        cur[sibling.token as usize] = 0.0;
        rejected.push(sibling.token);
        let mass: f64 = cur.iter().sum();
        if mass < RESIDUAL_EPS {
            // q covered p exactly: fall back to p without the rejected tokens.
            cur.copy_from_slice(p.probs());
            for &t in &rejected {
                cur[t as usize] = 0.0;
            }
            let mass: f64 = cur.iter().sum();
            if mass < RESIDUAL_EPS {
                cur.copy_from_slice(p.probs());
            } else {
                cur.iter_mut().for_each(|v| *v /= mass);
            }
        } else {
            cur.iter_mut().for_each(|v| *v /= mass);
        }
    }
    let residual = match current {
        Some(c) => DenseDistribution::from_normalized(c),
        None => p.clone(),
    };
    Ok(PositionOutcome::RejectAll { residual })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeVerdict {
    pub node: NodeId,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct VerificationOutcome {
    /// Root-down path of accepted draft nodes.
    pub accepted_nodes: Vec<NodeId>,
    pub accepted_tokens: Vec<TokenId>,
    /// Token sampled at the first position without an accepted child.
    pub bonus: TokenId,
    /// Target distributions at the positions preceding each emitted token
    /// (`accepted_len()` entries).
    pub distributions: Vec<DenseDistribution>,
    /// Positions a tree-parallel target pass would evaluate: filled nodes + 1.
    pub target_positions: usize,
    /// Target calls actually made (the accepted path plus the bonus position).
    pub target_evaluations: usize,
    /// Every sibling test in the order it happened.
    pub trace: Vec<NodeVerdict>,
}

impl VerificationOutcome {
    /// Tokens emitted this round, bonus included.
    pub fn accepted_len(&self) -> usize {
        self.accepted_tokens.len() + 1
    }

    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out = self.accepted_tokens.clone();
        out.push(self.bonus);
        out
    }
}

fn siblings_under(draft: &DraftTree, parent: Option<NodeId>) -> Vec<(NodeId, SiblingDraft)> {
    let Some(group) = draft.group_under(parent) else {
        return Vec::new();
    };
    group
        .drawn
        .iter()
        .map(|&id| {
            let token = draft.node(id).expect("drawn nodes are filled").token;
            let q = match draft.mode() {
                DraftMode::Deterministic => vec![(token, 1.0)],
                // Elder siblings are removed by the sequential test itself.
                DraftMode::Stochastic => group.candidates.clone(),
            };
            (id, SiblingDraft { token, q })
        })
        .collect()
}

/// Verifies `draft` (built for `context` on `topology`) against `target`.
///
/// Target distributions are requested only along the path actually walked,
/// but `target_positions` counts every position a batched tree pass would
/// score, which is what the metrics report.
pub fn verify_tree<M: TargetModel + ?Sized, R: Rng + ?Sized>(
    context: &[TokenId],
    draft: &DraftTree,
    topology: &TreeTopology,
    target: &M,
    rng: &mut R,
) -> Result<VerificationOutcome, VerifyError> {
    if draft.len() != topology.len() {
        return Err(VerifyError::TopologyMismatch { draft: draft.len(), topology: topology.len() });
    }
    if !draft.matches_context(context) {
        return Err(VerifyError::ContextMismatch);
    }
    let mut ctx = context.to_vec();
    let mut outcome = VerificationOutcome {
        accepted_nodes: Vec::new(),
        accepted_tokens: Vec::new(),
        bonus: 0,
        distributions: Vec::new(),
        target_positions: draft.filled_count() + 1,
        target_evaluations: 0,
        trace: Vec::new(),
    };
    let mut parent = None;
    loop {
        let p = target.next_distribution(&ctx)?;
        outcome.target_evaluations += 1;
        let siblings = siblings_under(draft, parent);
        let drafts: Vec<SiblingDraft> = siblings.iter().map(|(_, s)| s.clone()).collect();
        let result = if drafts.is_empty() {
            PositionOutcome::RejectAll { residual: p.clone() }
        } else {
            verify_position(&p, &drafts, rng)?
        };
        outcome.distributions.push(p);
        match result {
            PositionOutcome::Accept { index, token } => {
                outcome.trace.extend(siblings[..index].iter().map(|(n, _)| NodeVerdict { node: *n, accepted: false }));
                let node = siblings[index].0;
                outcome.trace.push(NodeVerdict { node, accepted: true });
                outcome.accepted_nodes.push(node);
                outcome.accepted_tokens.push(token);
                ctx.push(token);
                parent = Some(node);
            }
            PositionOutcome::RejectAll { residual } => {
                outcome.trace.extend(siblings.iter().map(|(n, _)| NodeVerdict { node: *n, accepted: false }));
                outcome.bonus = sample_index(residual.probs(), rng.random::<f64>()) as TokenId;
                return Ok(outcome);
            }
        }
    }
}

/// Target positions per emitted token over a set of rounds.
pub fn count_target_calls<'a, I: IntoIterator<Item = &'a VerificationOutcome>>(outcomes: I) -> f64 {
    let (positions, tokens) =
        outcomes.into_iter().fold((0usize, 0usize), |(p, t), o| (p + o.target_positions, t + o.accepted_len()));
    if tokens == 0 {
        0.0
    } else {
        positions as f64 / tokens as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drafter::build_draft;
    use crate::gumbel::ZeroNoise;
    use crate::store::{CompressedDistribution, NGramKey, NGramStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(p: &[f64]) -> DenseDistribution {
        DenseDistribution::new(p.to_vec()).unwrap()
    }

    /// Scripted uniforms, to force accept/reject branches.
    struct Script(Vec<f64>, usize);

    impl rand::RngCore for Script {
        fn next_u32(&mut self) -> u32 {
            (self.next_u64() >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            let u = self.0[self.1];
            self.1 += 1;
            // rand's f64 sampling takes the top 53 bits.
            ((u * (1u64 << 53) as f64) as u64) << 11
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            rand::rand_core::impls::fill_bytes_via_next(self, dst)
        }
    }

    #[test]
    fn residual_after_rejection() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let sib = [SiblingDraft { token: 0, q: vec![(0, 0.8), (1, 0.1), (2, 0.1)] }];
        let accept = verify_position(&p, &sib, &mut Script(vec![0.6], 0)).unwrap();
        assert_eq!(accept, PositionOutcome::Accept { index: 0, token: 0 });
        match verify_position(&p, &sib, &mut Script(vec![0.63], 0)).unwrap() {
            PositionOutcome::RejectAll { residual } => {
                let r = residual.probs();
                assert!(r[0] == 0.0 && (r[1] - 2.0 / 3.0).abs() < 1e-12 && (r[2] - 1.0 / 3.0).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn acceptance_rate_is_p_over_q() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let sib = [SiblingDraft { token: 0, q: vec![(0, 0.8), (1, 0.1), (2, 0.1)] }];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let acc = (0..n)
            .filter(|_| matches!(verify_position(&p, &sib, &mut rng).unwrap(), PositionOutcome::Accept { .. }))
            .count();
        assert!((acc as f64 / n as f64 - 0.625).abs() < 0.01);
    }

    #[test]
    fn q_equal_to_p_always_accepts() {
        let p = dist(&[0.25, 0.75]);
        let sib = [SiblingDraft { token: 1, q: vec![(0, 0.25), (1, 0.75)] }];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            assert!(matches!(verify_position(&p, &sib, &mut rng).unwrap(), PositionOutcome::Accept { .. }));
        }
    }

    #[test]
    fn zero_q_is_a_contract_violation() {
        let p = dist(&[0.5, 0.5]);
        let sib = [SiblingDraft { token: 1, q: vec![(0, 1.0)] }];
        assert!(matches!(
            verify_position(&p, &sib, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(VerifyError::ZeroDraftProbability { token: 1 })
        ));
    }

    #[test]
    fn token_without_target_mass_is_always_rejected() {
        let p = dist(&[0.5, 0.5, 0.0]);
        let sib = [SiblingDraft { token: 2, q: vec![(0, 0.5), (2, 0.5)] }];
        match verify_position(&p, &sib, &mut Script(vec![0.0], 0)).unwrap() {
            PositionOutcome::RejectAll { residual } => assert_eq!(residual.probs(), &[0.0, 1.0, 0.0]),
            other => panic!("{other:?}"),
        }
    }

    /// Exact distribution of the emitted token at one position, by
    /// enumerating the sequential-rejection tree.
    fn exact_first_token(p: &[f64], cands: &[(TokenId, f64)], k: usize) -> Vec<f64> {
        fn rec(p: &[f64], cands: &[(TokenId, f64)], k: usize, taken: &[TokenId], weight: f64, out: &mut [f64]) {
            let rest: Vec<(TokenId, f64)> = cands.iter().copied().filter(|(t, _)| !taken.contains(t)).collect();
            let total: f64 = rest.iter().map(|(_, q)| q).sum();
            if k == 0 || rest.is_empty() || total <= 0.0 {
                for (i, v) in p.iter().enumerate() {
                    out[i] += weight * v;
                }
                return;
            }
            for &(x, qx) in &rest {
                let qx = qx / total;
                let draw_w = weight * qx;
                let acc = (p[x as usize] / qx).min(1.0);
                out[x as usize] += draw_w * acc;
                let mut r: Vec<f64> = p.to_vec();
                for &(t, q) in &rest {
                    r[t as usize] = (r[t as usize] - q / total).max(0.0);
                }
                r[x as usize] = 0.0;
                let m: f64 = r.iter().sum();
                if m > RESIDUAL_EPS {
                    r.iter_mut().for_each(|v| *v /= m);
                    let mut next = taken.to_vec();
                    next.push(x);
                    rec(&r, cands, k - 1, &next, draw_w * (1.0 - acc), out);
                }
            }
        }
        let mut out = vec![0.0; p.len()];
        rec(p, cands, k, &[], 1.0, &mut out);
        out
    }

    #[test]
    fn sequential_rejection_is_exactly_lossless() {
        let p = [0.35, 0.05, 0.25, 0.2, 0.15];
        let cands = [(0, 0.1), (1, 0.4), (2, 0.3), (4, 0.2)];
        for k in 1..=4 {
            let emitted = exact_first_token(&p, &cands, k);
            for (a, b) in emitted.iter().zip(&p) {
                assert!((a - b).abs() < 1e-12, "k={k}: {emitted:?}");
            }
        }
    }

    #[test]
    fn empty_draft_is_one_call_and_a_bonus() {
        struct Fixed;
        impl TargetModel for Fixed {
            fn vocab_size(&self) -> usize {
                4
            }
            fn next_distribution(&self, _: &[TokenId]) -> Result<DenseDistribution, ModelError> {
                Ok(DenseDistribution::one_hot(4, 3))
            }
        }
        let store = NGramStore::new(4);
        let topo = TreeTopology::chain(3);
        let draft = build_draft(&[1], &topo, &store, &mut ZeroNoise, DraftMode::Stochastic);
        let out = verify_tree(&[1], &draft, &topo, &Fixed, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((out.accepted_len(), out.bonus, out.target_positions), (1, 3, 1));
        assert_eq!(count_target_calls([&out]), 1.0);
        assert!(matches!(
            verify_tree(&[2], &draft, &topo, &Fixed, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(VerifyError::ContextMismatch)
        ));
    }

    #[test]
    fn matching_chain_on_deterministic_target_accepts_everything() {
        struct Cycle;
        impl TargetModel for Cycle {
            fn vocab_size(&self) -> usize {
                5
            }
            fn next_distribution(&self, ctx: &[TokenId]) -> Result<DenseDistribution, ModelError> {
                Ok(DenseDistribution::one_hot(5, (ctx.last().unwrap() + 1) % 5))
            }
        }
        let mut store = NGramStore::new(5);
        for t in 0..5 {
            store.insert(NGramKey::new(&[t]).unwrap(), CompressedDistribution::from_parts(vec![((t + 1) % 5, 1.0)], 1).unwrap());
        }
        for mode in [DraftMode::Stochastic, DraftMode::Deterministic] {
            let topo = TreeTopology::chain(4);
            let draft = build_draft(&[2], &topo, &store, &mut ZeroNoise, mode);
            let out = verify_tree(&[2], &draft, &topo, &Cycle, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(out.emitted(), vec![3, 4, 0, 1, 2]);
            assert_eq!(out.target_positions, 5);
            assert_eq!(out.distributions.len(), 5);
        }
    }
}
