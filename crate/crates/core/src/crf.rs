//! Linear-chain CRF with explicit START and STOP states.
//!
//! A tag path `y_1..y_n` over `K` tags scores
//!
//! ```text
//! T[START, y_1] + sum_t e_t[y_t] + sum_{t>1} T[y_{t-1}, y_t] + T[y_n, STOP]
//! ```
//!
//! where `e` are per-position emission scores and `T` is a
//! `(K+2) x (K+2)` transition matrix whose row `K` is START and column
//! `K+1` is STOP. Transitions into START and out of STOP are never on a
//! valid path and are read as `-inf` regardless of the stored value.

use rand::Rng;

use crate::autodiff::{log_sum_exp, CustomOp, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{valid_len, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    num_tags: usize,
    /// `(K+2) x (K+2)`
    pub transitions: Tensor,
    /// Optional hard constraint mask over the same grid; `false` entries
    /// are treated as `-inf`.
    pub allowed: Option<Vec<bool>>,
}

impl CrfParams {
    pub fn new(num_tags: usize, transitions: Tensor) -> Result<Self> {
        let k2 = num_tags + 2;
        if num_tags == 0 || transitions.shape() != [k2, k2] {
            return Err(Error::Dimension {
                op: "crf",
                lhs: vec![k2, k2],
                rhs: transitions.shape().to_vec(),
            });
        }
        Ok(CrfParams {
            num_tags,
            transitions,
            allowed: None,
        })
    }

    pub fn zeros(num_tags: usize) -> Self {
        CrfParams::new(num_tags, Tensor::zeros(num_tags + 2, num_tags + 2)).unwrap()
    }

    pub fn random<R: Rng>(num_tags: usize, scale: f64, rng: &mut R) -> Self {
        let k2 = num_tags + 2;
        let data = (0..k2 * k2).map(|_| rng.random_range(-scale..=scale)).collect();
        CrfParams::new(num_tags, Tensor::matrix(k2, k2, data).unwrap()).unwrap()
    }

    pub fn with_constraints(mut self, allowed: Vec<bool>) -> Result<Self> {
        let k2 = self.num_tags + 2;
        if allowed.len() != k2 * k2 {
            return Err(Error::contract(format!(
                "constraint mask has {} entries, expected {}",
                allowed.len(),
                k2 * k2
            )));
        }
        self.allowed = Some(allowed);
        Ok(self)
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn start(&self) -> usize {
        self.num_tags
    }

    pub fn stop(&self) -> usize {
        self.num_tags + 1
    }

    fn potentials(&self) -> Potentials<'_> {
        Potentials {
            k: self.num_tags,
            trans: self.transitions.data(),
            allowed: self.allowed.as_deref(),
        }
    }

    pub fn transition(&self, from: usize, to: usize) -> f64 {
        self.potentials().t(from, to)
    }

    fn check(&self, emissions: &Tensor, mask: &[bool]) -> Result<usize> {
        check_emissions(self.num_tags, emissions, mask)
    }

    fn check_tags(&self, tags: &[usize], len: usize) -> Result<()> {
        check_tags(self.num_tags, tags, len)
    }

    /// Unnormalized log-potential of `tags` over the valid positions.
    pub fn score_sequence(&self, emissions: &Tensor, tags: &[usize], mask: &[bool]) -> Result<f64> {
        let len = self.check(emissions, mask)?;
        self.check_tags(tags, len)?;
        Ok(self.potentials().score(emissions, &tags[..len]))
    }

    /// `ln Z` by the forward algorithm in log space, `O(n K^2)`.
    pub fn log_partition(&self, emissions: &Tensor, mask: &[bool]) -> Result<f64> {
        let len = self.check(emissions, mask)?;
        Ok(self.potentials().forward(emissions, len).1)
    }

    /// `ln Z - score(tags)`, non-negative.
    pub fn nll(&self, emissions: &Tensor, tags: &[usize], mask: &[bool]) -> Result<f64> {
        let len = self.check(emissions, mask)?;
        self.check_tags(tags, len)?;
        let p = self.potentials();
        let (_, log_z) = p.forward(emissions, len);
        Ok(log_z - p.score(emissions, &tags[..len]))
    }

    /// Highest-scoring path and its log-potential. Ties go to the lowest
    /// tag index, both at the final position and along backpointers.
    /// The returned path covers the valid positions only.
    pub fn viterbi(&self, emissions: &Tensor, mask: &[bool]) -> Result<(Vec<usize>, f64)> {
        let len = self.check(emissions, mask)?;
        let p = self.potentials();
        let k = self.num_tags;
        let mut delta: Vec<f64> = (0..k).map(|j| p.t(k, j) + emissions.get(0, j)).collect();
        let mut back = vec![vec![0usize; k]; len];
        for t in 1..len {
            let mut next = vec![f64::NEG_INFINITY; k];
            for j in 0..k {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for (i, &d) in delta.iter().enumerate() {
                    let s = d + p.t(i, j);
                    if s > best {
                        best = s;
                        arg = i;
                    }
                }
                next[j] = best + emissions.get(t, j);
                back[t][j] = arg;
            }
            delta = next;
        }
        let mut best = f64::NEG_INFINITY;
        let mut last = 0;
        for (j, &d) in delta.iter().enumerate() {
            let s = d + p.t(j, k + 1);
            if s > best {
                best = s;
                last = j;
            }
        }
        let mut path = vec![0; len];
        path[len - 1] = last;
        for t in (1..len).rev() {
            path[t - 1] = back[t][path[t]];
        }
        Ok((path, best))
    }

    /// `Pr(tags | x) = exp(score - ln Z)`, clamped to `[0, 1]`.
    pub fn sequence_probability(&self, emissions: &Tensor, tags: &[usize], mask: &[bool]) -> Result<f64> {
        let nll = self.nll(emissions, tags, mask)?;
        Ok((-nll).exp().clamp(0.0, 1.0))
    }

    /// Per-position tag marginals `Pr(y_t = j | x)` over the valid prefix,
    /// `len x K`.
    pub fn marginals(&self, emissions: &Tensor, mask: &[bool]) -> Result<Tensor> {
        let len = self.check(emissions, mask)?;
        let p = self.potentials();
        let (alpha, log_z) = p.forward(emissions, len);
        let beta = p.backward(emissions, len);
        let k = self.num_tags;
        let data = (0..len * k).map(|i| (alpha[i] + beta[i] - log_z).exp()).collect();
        Tensor::matrix(len, k, data)
    }
}

fn check_emissions(k: usize, emissions: &Tensor, mask: &[bool]) -> Result<usize> {
    if emissions.cols() != k {
        return Err(Error::Dimension {
            op: "crf",
            lhs: emissions.shape().to_vec(),
            rhs: vec![emissions.rows(), k],
        });
    }
    if mask.len() != emissions.rows() {
        return Err(Error::contract(format!(
            "mask length {} for {} positions",
            mask.len(),
            emissions.rows()
        )));
    }
    let len = valid_len(mask)?;
    if len == 0 {
        return Err(Error::contract("CRF needs at least one valid position"));
    }
    Ok(len)
}

fn check_tags(k: usize, tags: &[usize], len: usize) -> Result<()> {
    if tags.len() < len {
        return Err(Error::contract(format!("{} tags for {len} positions", tags.len())));
    }
    if let Some(&bad) = tags[..len].iter().find(|&&t| t >= k) {
        return Err(Error::contract(format!("tag index {bad} out of range for {k} tags")));
    }
    Ok(())
}

struct Potentials<'a> {
    k: usize,
    trans: &'a [f64],
    allowed: Option<&'a [bool]>,
}

impl Potentials<'_> {
    #[inline]
    fn t(&self, from: usize, to: usize) -> f64 {
        let k = self.k;
        if to == k || from == k + 1 {
            return f64::NEG_INFINITY;
        }
        let idx = from * (k + 2) + to;
        match self.allowed {
            Some(a) if !a[idx] => f64::NEG_INFINITY,
            _ => self.trans[idx],
        }
    }

    fn score(&self, emissions: &Tensor, tags: &[usize]) -> f64 {
        let k = self.k;
        let mut s = self.t(k, tags[0]);
        for (t, &y) in tags.iter().enumerate() {
            s += emissions.get(t, y);
            if t > 0 {
                s += self.t(tags[t - 1], y);
            }
        }
        s + self.t(tags[tags.len() - 1], k + 1)
    }

    /// Log forward variables (`len x K`, row-major, including the emission
    /// at each position) and `ln Z`.
    fn forward(&self, emissions: &Tensor, len: usize) -> (Vec<f64>, f64) {
        let k = self.k;
        let mut alpha = vec![0.0; len * k];
        for j in 0..k {
            alpha[j] = self.t(k, j) + emissions.get(0, j);
        }
        let mut buf = vec![0.0; k];
        for t in 1..len {
            for j in 0..k {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = alpha[(t - 1) * k + i] + self.t(i, j);
                }
                alpha[t * k + j] = log_sum_exp(&buf) + emissions.get(t, j);
            }
        }
        for (j, b) in buf.iter_mut().enumerate() {
            *b = alpha[(len - 1) * k + j] + self.t(j, k + 1);
        }
        let log_z = log_sum_exp(&buf);
        (alpha, log_z)
    }

    /// Log backward variables (`len x K`), excluding the emission at the
    /// position itself.
    fn backward(&self, emissions: &Tensor, len: usize) -> Vec<f64> {
        let k = self.k;
        let mut beta = vec![0.0; len * k];
        for i in 0..k {
            beta[(len - 1) * k + i] = self.t(i, k + 1);
        }
        let mut buf = vec![0.0; k];
        for t in (0..len - 1).rev() {
            for i in 0..k {
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = self.t(i, j) + emissions.get(t + 1, j) + beta[(t + 1) * k + j];
                }
                beta[t * k + i] = log_sum_exp(&buf);
            }
        }
        beta
    }
}

/// Graph op computing `ln Z - score(tags)` from emissions and the full
/// transition matrix, differentiated by forward-backward: the emission
/// gradient is marginals minus gold one-hots, the transition gradient is
/// expected minus gold transition counts.
pub struct CrfNll {
    tags: Vec<usize>,
    len: usize,
    allowed: Option<Vec<bool>>,
}

impl CrfNll {
    fn potentials<'a>(&'a self, trans: &'a Tensor) -> Potentials<'a> {
        Potentials {
            k: trans.rows() - 2,
            trans: trans.data(),
            allowed: self.allowed.as_deref(),
        }
    }
}

impl CustomOp for CrfNll {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (e, trans) = (inputs[0], inputs[1]);
        let p = self.potentials(trans);
        let (_, log_z) = p.forward(e, self.len);
        Ok(Tensor::scalar(log_z - p.score(e, &self.tags)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (e, trans) = (inputs[0], inputs[1]);
        let go = grad_output.item();
        let p = self.potentials(trans);
        let k = p.k;
        let k2 = k + 2;
        let len = self.len;
        let (alpha, log_z) = p.forward(e, len);
        let beta = p.backward(e, len);

        let mut de = Tensor::zeros(e.rows(), k);
        let mut dt = Tensor::zeros(k2, k2);
        for t in 0..len {
            for j in 0..k {
                let m = (alpha[t * k + j] + beta[t * k + j] - log_z).exp();
                de.set(t, j, m);
                if t == 0 {
                    dt.data_mut()[k * k2 + j] += m;
                }
                if t == len - 1 {
                    dt.data_mut()[j * k2 + k + 1] += m;
                }
            }
            if t > 0 {
                for i in 0..k {
                    for j in 0..k {
                        let tr = p.t(i, j);
                        if tr == f64::NEG_INFINITY {
                            continue;
                        }
                        let m = (alpha[(t - 1) * k + i] + tr + e.get(t, j) + beta[t * k + j] - log_z).exp();
                        dt.data_mut()[i * k2 + j] += m;
                    }
                }
            }
        }
        // subtract gold counts
        for (t, &y) in self.tags.iter().enumerate() {
            de.set(t, y, de.get(t, y) - 1.0);
            if t == 0 {
                dt.data_mut()[k * k2 + y] -= 1.0;
            } else {
                dt.data_mut()[self.tags[t - 1] * k2 + y] -= 1.0;
            }
        }
        dt.data_mut()[self.tags[len - 1] * k2 + k + 1] -= 1.0;
        de.scale_in_place(go);
        dt.scale_in_place(go);
        Ok(vec![Some(de), Some(dt)])
    }
}

/// Differentiable negative log-likelihood of `tags` on the graph.
pub fn nll_graph(
    g: &mut Graph,
    emissions: Var,
    transitions: Var,
    tags: &[usize],
    mask: &[bool],
    allowed: Option<&[bool]>,
) -> Result<Var> {
    let e = g.value(emissions);
    let tr = g.value(transitions);
    let k = e.cols();
    if tr.shape() != [k + 2, k + 2] {
        return Err(Error::Dimension {
            op: "crf_nll",
            lhs: e.shape().to_vec(),
            rhs: tr.shape().to_vec(),
        });
    }
    let len = check_emissions(k, e, mask)?;
    check_tags(k, tags, len)?;
    if let Some(a) = allowed {
        if a.len() != (k + 2) * (k + 2) {
            return Err(Error::contract("constraint mask does not match the transition grid"));
        }
    }
    let op = CrfNll {
        tags: tags[..len].to_vec(),
        len,
        allowed: allowed.map(<[bool]>::to_vec),
    };
    g.custom(Box::new(op), &[emissions, transitions])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_emissions(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::matrix(n, k, (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn zero_model_scores_zero() {
        let crf = CrfParams::zeros(4);
        let e = Tensor::zeros(3, 4);
        assert_eq!(crf.score_sequence(&e, &[1, 3, 0], &[true; 3]).unwrap(), 0.0);
    }

    #[test]
    fn single_position_score_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let crf = CrfParams::random(4, 1.0, &mut rng);
        let e = rand_emissions(1, 4, &mut rng);
        let s = crf.score_sequence(&e, &[2], &[true]).unwrap();
        let expect = crf.transitions.get(4, 2) + e.get(0, 2) + crf.transitions.get(2, 5);
        assert!((s - expect).abs() < 1e-15);
    }

    #[test]
    fn uniform_partition_and_nll() {
        let crf = CrfParams::zeros(4);
        let z = crf.log_partition(&Tensor::zeros(1, 4), &[true]).unwrap();
        assert!((z - 4f64.ln()).abs() < 1e-15);
        let nll = crf.nll(&Tensor::zeros(2, 4), &[0, 3], &[true, true]).unwrap();
        assert!((nll - 2.0 * 4f64.ln()).abs() < 1e-14);
        let p = crf.sequence_probability(&Tensor::zeros(1, 4), &[1], &[true]).unwrap();
        assert!((p - 0.25).abs() < 1e-15);
    }

    #[test]
    fn emission_shift_adds_n_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let crf = CrfParams::random(3, 1.0, &mut rng);
        let e = rand_emissions(4, 3, &mut rng);
        let shifted = e.map(|x| x + 0.75);
        let z0 = crf.log_partition(&e, &[true; 4]).unwrap();
        let z1 = crf.log_partition(&shifted, &[true; 4]).unwrap();
        assert!((z1 - z0 - 4.0 * 0.75).abs() < 1e-12);
    }

    #[test]
    fn viterbi_dominant_emissions() {
        let crf = CrfParams::zeros(4);
        let mut e = Tensor::zeros(3, 4);
        e.set(0, 2, 5.0);
        e.set(1, 0, 5.0);
        e.set(2, 3, 5.0);
        assert_eq!(crf.viterbi(&e, &[true; 3]).unwrap().0, vec![2, 0, 3]);
    }

    #[test]
    fn viterbi_ties_prefer_lowest_index() {
        let crf = CrfParams::zeros(4);
        assert_eq!(crf.viterbi(&Tensor::zeros(5, 4), &[true; 5]).unwrap().0, vec![0; 5]);
    }

    #[test]
    fn masked_suffix_is_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let crf = CrfParams::random(3, 1.0, &mut rng);
        let e = rand_emissions(5, 3, &mut rng);
        let mut e2 = e.clone();
        e2.row_mut(3).fill(40.0);
        e2.row_mut(4).fill(-40.0);
        let mask = [true, true, true, false, false];
        assert_eq!(crf.log_partition(&e, &mask).unwrap(), crf.log_partition(&e2, &mask).unwrap());
        assert_eq!(crf.viterbi(&e, &mask).unwrap(), crf.viterbi(&e2, &mask).unwrap());
        let tags = [0, 2, 1, 9, 9];
        assert_eq!(crf.nll(&e, &tags, &mask).unwrap(), crf.nll(&e2, &tags, &mask).unwrap());
    }

    #[test]
    fn out_of_range_tag_is_contract_error() {
        let crf = CrfParams::zeros(3);
        assert!(matches!(
            crf.score_sequence(&Tensor::zeros(2, 3), &[0, 3], &[true, true]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn nll_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let crf = CrfParams::random(4, 3.0, &mut rng);
            let e = rand_emissions(4, 4, &mut rng);
            let tags: Vec<usize> = (0..4).map(|_| rng.random_range(0..4)).collect();
            assert!(crf.nll(&e, &tags, &[true; 4]).unwrap() >= 0.0);
        }
    }

    #[test]
    fn marginals_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let crf = CrfParams::random(5, 1.0, &mut rng);
        let m = crf.marginals(&rand_emissions(4, 5, &mut rng), &[true; 4]).unwrap();
        for r in 0..4 {
            assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constraints_forbid_transitions() {
        let mut allowed = vec![true; 16];
        // forbid 0 -> 1
        allowed[1] = false;
        let crf = CrfParams::zeros(2).with_constraints(allowed).unwrap();
        let mut e = Tensor::zeros(2, 2);
        e.set(0, 0, 3.0);
        e.set(1, 1, 3.0);
        let (path, _) = crf.viterbi(&e, &[true, true]).unwrap();
        assert_ne!(path, vec![0, 1]);
        assert_eq!(crf.sequence_probability(&e, &[0, 1], &[true, true]).unwrap(), 0.0);
    }
}
