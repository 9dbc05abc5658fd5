//! Multi-similarity loss with online pair mining.
//!
//! Works on a `[B, B]` cosine-similarity matrix of unit-norm descriptors.
//! Mining keeps, per anchor, the informative pairs only: negatives harder
//! than the hardest positive minus a margin, positives harder than the
//! hardest negative plus the margin. The loss then weights kept pairs with
//! log-sum-exp terms controlled by `alpha` (positives), `beta` (negatives)
//! and the similarity threshold `lambda`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct MsLossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl Default for MsLossConfig {
    fn default() -> Self {
        MsLossConfig {
            alpha: 2.0,
            beta: 50.0,
            lambda: 0.5,
            epsilon: 0.1,
        }
    }
}

impl MsLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.lambda) || self.lambda == 0.0 {
            return Err(Error::Config(format!(
                "lambda {} must lie in (0,1)",
                self.lambda
            )));
        }
        if self.epsilon < 0.0 {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

/// Cosine similarity matrix of unit-norm descriptor rows: `[B,D] -> [B,B]`.
pub fn pairwise_cosine<T: Scalar>(descriptors: &Tensor<T>) -> Result<Tensor<T>> {
    if descriptors.rank() != 2 {
        return Err(Error::Shape(format!(
            "pairwise_cosine wants [B,D], got {:?}",
            descriptors.shape()
        )));
    }
    let (b, d) = (descriptors.shape()[0], descriptors.shape()[1]);
    for bi in 0..b {
        let norm: f64 = descriptors.data()[bi * d..(bi + 1) * d]
            .iter()
            .map(|v| v.tof() * v.tof())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Numeric(format!(
                "descriptor row {bi} has norm {norm}, expected unit"
            )));
        }
    }
    let mut sim = Tensor::zeros(&[b, b]);
    for i in 0..b {
        let ri = &descriptors.data()[i * d..(i + 1) * d];
        for j in 0..b {
            let rj = &descriptors.data()[j * d..(j + 1) * d];
            let mut acc = T::zero();
            for (a, c) in ri.iter().zip(rj) {
                acc += *a * *c;
            }
            sim.data_mut()[i * b + j] = acc;
        }
    }
    Ok(sim)
}

/// Backward of [`pairwise_cosine`]: maps `dL/dS` to `dL/dD`.
pub fn pairwise_cosine_backward<T: Scalar>(
    descriptors: &Tensor<T>,
    d_sim: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (b, d) = (descriptors.shape()[0], descriptors.shape()[1]);
    if d_sim.shape() != [b, b] {
        return Err(Error::Shape(format!(
            "d_sim {:?}, expected [{b}, {b}]",
            d_sim.shape()
        )));
    }
    let mut d_desc = Tensor::zeros(descriptors.shape());
    for i in 0..b {
        for j in 0..b {
            let g = d_sim.data()[i * b + j];
            if g == T::zero() {
                continue;
            }
            // S_ij = d_i . d_j
            for k in 0..d {
                d_desc.data_mut()[i * d + k] += g * descriptors.data()[j * d + k];
                d_desc.data_mut()[j * d + k] += g * descriptors.data()[i * d + k];
            }
        }
    }
    Ok(d_desc)
}

/// Kept pairs per anchor, after online mining.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MinedPairs {
    /// Kept positive column indices per anchor row.
    pub positives: Vec<Vec<usize>>,
    /// Kept negative column indices per anchor row.
    pub negatives: Vec<Vec<usize>>,
    /// Anchors with no positive partner in the batch (skipped entirely).
    pub skipped: Vec<usize>,
}

impl MinedPairs {
    pub fn kept_pos(&self) -> usize {
        self.positives.iter().map(Vec::len).sum()
    }

    pub fn kept_neg(&self) -> usize {
        self.negatives.iter().map(Vec::len).sum()
    }
}

/// Online pair mining. Per anchor `i`: keep negative `j` when
/// `s_ij > min_p s_ip - epsilon`, keep positive `p` when
/// `s_ip < max_n s_in + epsilon`; self-pairs excluded. Anchors without any
/// positive partner are recorded in `skipped`.
pub fn mine_pairs<T: Scalar>(
    sim: &Tensor<T>,
    labels: &[u64],
    epsilon: f64,
) -> Result<MinedPairs> {
    let b = labels.len();
    if sim.shape() != [b, b] {
        return Err(Error::Shape(format!(
            "similarity {:?} does not match {b} labels",
            sim.shape()
        )));
    }
    {
        let mut distinct = labels.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() < 2 {
            return Err(Error::Data(
                "mining needs at least 2 distinct labels in the batch".into(),
            ));
        }
    }
    let mut mined = MinedPairs::default();
    for i in 0..b {
        let row = &sim.data()[i * b..(i + 1) * b];
        let pos: Vec<usize> = (0..b)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        let neg: Vec<usize> = (0..b).filter(|&j| labels[j] != labels[i]).collect();
        if pos.is_empty() {
            mined.skipped.push(i);
            mined.positives.push(Vec::new());
            mined.negatives.push(Vec::new());
            continue;
        }
        let min_pos = pos
            .iter()
            .map(|&p| row[p].tof())
            .fold(f64::INFINITY, f64::min);
        let max_neg = neg
            .iter()
            .map(|&n| row[n].tof())
            .fold(f64::NEG_INFINITY, f64::max);
        let kept_neg: Vec<usize> = neg
            .iter()
            .copied()
            .filter(|&j| row[j].tof() > min_pos - epsilon)
            .collect();
        let kept_pos: Vec<usize> = pos
            .iter()
            .copied()
            .filter(|&p| row[p].tof() < max_neg + epsilon)
            .collect();
        mined.positives.push(kept_pos);
        mined.negatives.push(kept_neg);
    }
    Ok(mined)
}

/// Loss statistics reported alongside the value.
#[derive(Clone, Copy, Debug, Default)]
pub struct MsLossStats {
    pub kept_pos: usize,
    pub kept_neg: usize,
    pub active_anchors: usize,
    /// True when every anchor was skipped or mined empty (loss 0).
    pub all_skipped: bool,
}

/// Multi-similarity loss over mined pairs. Returns the scalar loss, the
/// gradient with respect to the similarity matrix, and statistics.
///
/// Per anchor with kept pairs:
/// `(1/alpha) log(1 + sum_pos e^{-alpha (s - lambda)})
///  + (1/beta) log(1 + sum_neg e^{beta (s - lambda)})`,
/// averaged over anchors with at least one kept pair.
pub fn ms_loss<T: Scalar>(
    sim: &Tensor<T>,
    mined: &MinedPairs,
    cfg: &MsLossConfig,
) -> Result<(f64, Tensor<T>, MsLossStats)> {
    cfg.validate()?;
    let b = mined.positives.len();
    if sim.shape() != [b, b] {
        return Err(Error::Shape(format!(
            "similarity {:?} does not match {b} mined anchors",
            sim.shape()
        )));
    }
    let active: Vec<usize> = (0..b)
        .filter(|&i| !mined.positives[i].is_empty() || !mined.negatives[i].is_empty())
        .collect();
    let stats = MsLossStats {
        kept_pos: mined.kept_pos(),
        kept_neg: mined.kept_neg(),
        active_anchors: active.len(),
        all_skipped: active.is_empty(),
    };
    let mut d_sim = Tensor::zeros(&[b, b]);
    if active.is_empty() {
        return Ok((0.0, d_sim, stats));
    }
    let inv_a = 1.0 / active.len() as f64;
    let mut loss = 0.0;
    for &i in &active {
        let row = &sim.data()[i * b..(i + 1) * b];
        let mut pos_sum = 0.0;
        let mut pos_terms: Vec<(usize, f64)> = Vec::new();
        for &p in &mined.positives[i] {
            let e = (-cfg.alpha * (row[p].tof() - cfg.lambda)).exp();
            pos_sum += e;
            pos_terms.push((p, e));
        }
        let mut neg_sum = 0.0;
        let mut neg_terms: Vec<(usize, f64)> = Vec::new();
        for &n in &mined.negatives[i] {
            let e = (cfg.beta * (row[n].tof() - cfg.lambda)).exp();
            neg_sum += e;
            neg_terms.push((n, e));
        }
        loss += (1.0 + pos_sum).ln() / cfg.alpha + (1.0 + neg_sum).ln() / cfg.beta;
        for (p, e) in pos_terms {
            let g = -e / (1.0 + pos_sum) * inv_a;
            d_sim.data_mut()[i * b + p] = T::fromf(g);
        }
        for (n, e) in neg_terms {
            let g = e / (1.0 + neg_sum) * inv_a;
            d_sim.data_mut()[i * b + n] = T::fromf(g);
        }
    }
    loss *= inv_a;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("multi-similarity loss is {loss}")));
    }
    Ok((loss, d_sim, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::l2_normalize;
    use crate::gradcheck::grad_check;
    use crate::rng::Rng;

    fn unit_rows(b: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let mut out = Tensor::zeros(&[b, d]);
        for i in 0..b {
            let v = l2_normalize(&Tensor::<f64>::random_normal(&[d], 1.0, &mut rng)).unwrap();
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(v.data());
        }
        out
    }

    #[test]
    fn identical_rows_give_all_ones() {
        let one = l2_normalize(&Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let mut d = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            d.data_mut()[i * 3..(i + 1) * 3].copy_from_slice(one.data());
        }
        let sim = pairwise_cosine(&d).unwrap();
        for &v in sim.data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_rows_give_identity() {
        let mut d = Tensor::<f64>::zeros(&[3, 3]);
        for i in 0..3 {
            d.data_mut()[i * 3 + i] = 1.0;
        }
        let sim = pairwise_cosine(&d).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(sim.at(&[i, j]), expect);
            }
        }
    }

    #[test]
    fn matches_dot_product_oracle_and_is_symmetric() {
        let d = unit_rows(5, 7, 1);
        let sim = pairwise_cosine(&d).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let mut acc = 0.0;
                for k in 0..7 {
                    acc += d.at(&[i, k]) * d.at(&[j, k]);
                }
                assert!((sim.at(&[i, j]) - acc).abs() < 1e-12);
                assert_eq!(sim.at(&[i, j]), sim.at(&[j, i]));
            }
            assert!((sim.at(&[i, i]) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_non_unit_rows() {
        let mut d = unit_rows(3, 4, 2);
        for v in &mut d.data_mut()[0..4] {
            *v *= 1.5;
        }
        assert!(pairwise_cosine(&d).is_err());
    }

    fn sim_from(vals: &[f64], b: usize) -> Tensor<f64> {
        Tensor::from_vec(&[b, b], vals.to_vec()).unwrap()
    }

    #[test]
    fn separated_batch_mines_nothing() {
        // two places, all positive sims 0.9, all negative sims 0.1
        let sim = sim_from(
            &[
                1.0, 0.9, 0.1, 0.1, //
                0.9, 1.0, 0.1, 0.1, //
                0.1, 0.1, 1.0, 0.9, //
                0.1, 0.1, 0.9, 1.0,
            ],
            4,
        );
        let labels = [0u64, 0, 1, 1];
        let mined = mine_pairs(&sim, &labels, 0.1).unwrap();
        assert_eq!(mined.kept_pos(), 0);
        assert_eq!(mined.kept_neg(), 0);
        let (loss, d_sim, stats) = ms_loss(&sim, &mined, &MsLossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(d_sim.max_abs(), 0.0);
        assert!(stats.all_skipped);
    }

    #[test]
    fn huge_epsilon_keeps_every_pair() {
        let d = unit_rows(6, 5, 3);
        let sim = pairwise_cosine(&d).unwrap();
        let labels = [0u64, 0, 1, 1, 2, 2];
        let mined = mine_pairs(&sim, &labels, 2.5).unwrap();
        for i in 0..6 {
            assert_eq!(mined.positives[i].len(), 1, "anchor {i} keeps its positive");
            assert_eq!(mined.negatives[i].len(), 4, "anchor {i} keeps all negatives");
        }
    }

    #[test]
    fn hard_negative_above_easiest_positive_is_kept() {
        // anchor 0: positive 1 at 0.6; negatives 2 at 0.75 (hard), 3 at 0.2
        let sim = sim_from(
            &[
                1.0, 0.6, 0.75, 0.2, //
                0.6, 1.0, 0.3, 0.25, //
                0.75, 0.3, 1.0, 0.5, //
                0.2, 0.25, 0.5, 1.0,
            ],
            4,
        );
        let labels = [0u64, 0, 1, 1];
        let mined = mine_pairs(&sim, &labels, 0.1).unwrap();
        assert_eq!(mined.negatives[0], vec![2], "only the hard negative is kept");
        // positive 1 (0.6) < max_neg (0.75) + eps, so it is kept too
        assert_eq!(mined.positives[0], vec![1]);
        // enumeration oracle over every anchor
        for i in 0..4 {
            let row: Vec<f64> = (0..4).map(|j| sim.at(&[i, j])).collect();
            let pos: Vec<usize> = (0..4)
                .filter(|&j| j != i && labels[j] == labels[i])
                .collect();
            let neg: Vec<usize> = (0..4).filter(|&j| labels[j] != labels[i]).collect();
            let min_pos = pos.iter().map(|&p| row[p]).fold(f64::INFINITY, f64::min);
            let max_neg = neg.iter().map(|&n| row[n]).fold(f64::NEG_INFINITY, f64::max);
            let expect_neg: Vec<usize> = neg
                .iter()
                .copied()
                .filter(|&j| row[j] > min_pos - 0.1)
                .collect();
            let expect_pos: Vec<usize> = pos
                .iter()
                .copied()
                .filter(|&j| row[j] < max_neg + 0.1)
                .collect();
            assert_eq!(mined.negatives[i], expect_neg);
            assert_eq!(mined.positives[i], expect_pos);
        }
    }

    #[test]
    fn mining_excludes_self_and_requires_two_labels() {
        let d = unit_rows(4, 5, 4);
        let sim = pairwise_cosine(&d).unwrap();
        assert!(mine_pairs(&sim, &[7, 7, 7, 7], 0.1).is_err());
        let mined = mine_pairs(&sim, &[0, 0, 1, 1], 3.0).unwrap();
        for i in 0..4 {
            assert!(!mined.positives[i].contains(&i));
            assert!(!mined.negatives[i].contains(&i));
        }
    }

    #[test]
    fn anchor_without_positive_is_skipped() {
        let d = unit_rows(3, 5, 5);
        let sim = pairwise_cosine(&d).unwrap();
        let mined = mine_pairs(&sim, &[0, 1, 1], 2.0).unwrap();
        assert_eq!(mined.skipped, vec![0]);
        assert!(mined.positives[0].is_empty());
        assert!(mined.negatives[0].is_empty());
    }

    #[test]
    fn single_positive_at_lambda_gives_closed_form() {
        let cfg = MsLossConfig::default();
        // both anchors keep exactly one positive at s = lambda, no negatives
        let sim = sim_from(
            &[
                1.0, cfg.lambda, 0.0, //
                cfg.lambda, 1.0, 0.0, //
                0.0, 0.0, 1.0,
            ],
            3,
        );
        let mined = MinedPairs {
            positives: vec![vec![1], vec![0], vec![]],
            negatives: vec![vec![], vec![], vec![]],
            skipped: vec![2],
        };
        let (loss, _, stats) = ms_loss(&sim, &mined, &cfg).unwrap();
        let expect = (1.0 + 1.0f64).ln() / cfg.alpha;
        assert!((loss - expect).abs() < 1e-12, "loss {loss} vs {expect}");
        assert_eq!(stats.active_anchors, 2);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(6);
        let b = 8;
        let labels: Vec<u64> = (0..b as u64).map(|i| i / 2).collect();
        // random similarities in a plausible range, symmetrized
        let mut sim = Tensor::<f64>::zeros(&[b, b]);
        for i in 0..b {
            sim.data_mut()[i * b + i] = 1.0;
            for j in (i + 1)..b {
                let v = rng.uniform(-0.4, 0.9);
                sim.data_mut()[i * b + j] = v;
                sim.data_mut()[j * b + i] = v;
            }
        }
        let cfg = MsLossConfig::default();
        let mined = mine_pairs(&sim, &labels, cfg.epsilon).unwrap();
        let (_, d_sim, _) = ms_loss(&sim, &mined, &cfg).unwrap();
        // mined sets held fixed while probing, as in the training step
        let r = grad_check(
            |probe| ms_loss(probe, &mined, &cfg).unwrap().0,
            &sim,
            &d_sim,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "rel err {}", r.max_rel_error);
    }

    #[test]
    fn loss_is_permutation_equivariant() {
        let mut rng = Rng::new(7);
        let b = 6;
        let labels = [0u64, 0, 1, 1, 2, 2];
        let d = unit_rows(b, 8, 8);
        let sim = pairwise_cosine(&d).unwrap();
        let cfg = MsLossConfig::default();
        let mined = mine_pairs(&sim, &labels, cfg.epsilon).unwrap();
        let (loss, _, _) = ms_loss(&sim, &mined, &cfg).unwrap();

        let mut perm: Vec<usize> = (0..b).collect();
        rng.shuffle(&mut perm);
        let mut d2 = Tensor::<f64>::zeros(&[b, 8]);
        let mut labels2 = vec![0u64; b];
        for (new, &old) in perm.iter().enumerate() {
            labels2[new] = labels[old];
            d2.data_mut()[new * 8..(new + 1) * 8]
                .copy_from_slice(&d.data()[old * 8..(old + 1) * 8]);
        }
        let sim2 = pairwise_cosine(&d2).unwrap();
        let mined2 = mine_pairs(&sim2, &labels2, cfg.epsilon).unwrap();
        let (loss2, _, _) = ms_loss(&sim2, &mined2, &cfg).unwrap();
        assert!(
            (loss - loss2).abs() < 1e-12,
            "permuted batch changed loss: {loss} vs {loss2}"
        );
    }

    #[test]
    fn pairwise_backward_matches_finite_differences() {
        let d = unit_rows(4, 6, 9);
        let mut rng = Rng::new(10);
        let d_sim = Tensor::<f64>::random_normal(&[4, 4], 1.0, &mut rng);
        let d_desc = pairwise_cosine_backward(&d, &d_sim).unwrap();
        // objective: sum_ij d_sim_ij * S_ij, with S rebuilt from raw rows
        let r = grad_check(
            |probe| {
                let (b, dim) = (4, 6);
                let mut acc = 0.0;
                for i in 0..b {
                    for j in 0..b {
                        let mut s = 0.0;
                        for k in 0..dim {
                            s += probe.data()[i * dim + k] * probe.data()[j * dim + k];
                        }
                        acc += d_sim.at(&[i, j]) * s;
                    }
                }
                acc
            },
            &d,
            &d_desc,
            1e-6,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "rel err {}", r.max_rel_error);
    }
}
