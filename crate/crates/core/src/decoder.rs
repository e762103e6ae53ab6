//! Attribute-conditioned CRF decoder.
//!
//! The emission layer `(W, b)` is produced from the attribute embedding `r`
//! by an affine hypernetwork, and the transition matrix is a softmax-gated
//! mixture of `k` expert matrices. Scoring, normalization and decoding live
//! in [`crate::crf`].

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::crf;
use crate::error::{Error, Result};
use crate::tagging::Tag;

/// Number of labels in the BIOE tag set.
pub const LABELS: usize = Tag::COUNT;

/// Hypernetwork producing the emission layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    /// `[4 * d_h, d_r]`
    pub weight_w: Tensor,
    /// `[4 * d_h]`
    pub weight_b: Tensor,
    /// `[4, d_r]`
    pub bias_w: Tensor,
    /// `[4]`
    pub bias_b: Tensor,
}

impl HyperParams {
    pub fn zeros(d_h: usize, d_r: usize) -> Self {
        HyperParams {
            weight_w: Tensor::zeros(&[LABELS * d_h, d_r]),
            weight_b: Tensor::zeros(&[LABELS * d_h]),
            bias_w: Tensor::zeros(&[LABELS, d_r]),
            bias_b: Tensor::zeros(&[LABELS]),
        }
    }

    /// Uniform(-s, s) with `s = 1/sqrt(d_r)`.
    pub fn uniform<R: Rng + ?Sized>(d_h: usize, d_r: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d_r as f64).sqrt();
        HyperParams {
            weight_w: Tensor::uniform(&[LABELS * d_h, d_r], s, rng),
            weight_b: Tensor::uniform(&[LABELS * d_h], s, rng),
            bias_w: Tensor::uniform(&[LABELS, d_r], s, rng),
            bias_b: Tensor::uniform(&[LABELS], s, rng),
        }
    }

    pub fn d_h(&self) -> usize {
        self.weight_b.len() / LABELS
    }

    pub fn d_r(&self) -> usize {
        self.weight_w.shape()[1]
    }

    pub fn bind_const<'p>(&'p self, g: &mut Graph<'p>) -> HyperVars {
        HyperVars {
            weight_w: g.constant_ref(&self.weight_w),
            weight_b: g.constant_ref(&self.weight_b),
            bias_w: g.constant_ref(&self.bias_w),
            bias_b: g.constant_ref(&self.bias_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HyperVars {
    pub weight_w: Var,
    pub weight_b: Var,
    pub bias_w: Var,
    pub bias_b: Var,
}

/// Gating network and expert transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// `[k, d_r]`
    pub gate_w: Tensor,
    /// `[k]`
    pub gate_b: Tensor,
    /// `[k, 4, 4]`
    pub experts: Tensor,
}

impl MoeParams {
    pub fn zeros(k: usize, d_r: usize) -> Self {
        MoeParams {
            gate_w: Tensor::zeros(&[k, d_r]),
            gate_b: Tensor::zeros(&[k]),
            experts: Tensor::zeros(&[k, LABELS, LABELS]),
        }
    }

    /// Gate weights uniform(-s, s) with `s = 1/sqrt(d_r)`; experts with `s = 1/2`.
    pub fn uniform<R: Rng + ?Sized>(k: usize, d_r: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d_r as f64).sqrt();
        MoeParams {
            gate_w: Tensor::uniform(&[k, d_r], s, rng),
            gate_b: Tensor::uniform(&[k], s, rng),
            experts: Tensor::uniform(&[k, LABELS, LABELS], 1.0 / (LABELS as f64).sqrt(), rng),
        }
    }

    pub fn experts(&self) -> usize {
        self.gate_b.len()
    }

    pub fn bind_const<'p>(&'p self, g: &mut Graph<'p>) -> MoeVars {
        MoeVars {
            gate_w: g.constant_ref(&self.gate_w),
            gate_b: g.constant_ref(&self.gate_b),
            experts: g.constant_ref(&self.experts),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MoeVars {
    pub gate_w: Var,
    pub gate_b: Var,
    pub experts: Var,
}

/// `W = reshape(W_w r + b_w)` (row-major, `[4, d_h]`) and `b = B_w r + b_b`.
pub fn generate_linear_graph(g: &mut Graph<'_>, hyper: &HyperVars, r: Var) -> Result<(Var, Var)> {
    let flat = g.matmul(hyper.weight_w, r)?;
    let flat = g.add(flat, hyper.weight_b)?;
    let d_h = g.value(flat).len() / LABELS;
    let weight = g.reshape(flat, &[LABELS, d_h])?;
    let bias = g.matmul(hyper.bias_w, r)?;
    let bias = g.add(bias, hyper.bias_b)?;
    Ok((weight, bias))
}

/// Expert weights `softmax(G r + g)`.
pub fn gate_graph(g: &mut Graph<'_>, moe: &MoeVars, r: Var) -> Result<Var> {
    let logits = g.matmul(moe.gate_w, r)?;
    let logits = g.add(logits, moe.gate_b)?;
    g.softmax(logits)
}

/// `Σ_i λ_i T_i` for experts stored as `[k, L, L]`.
pub fn mix_transition_graph(g: &mut Graph<'_>, experts: Var, weights: Var) -> Result<Var> {
    let shape = g.value(experts).shape().to_vec();
    let k = g.value(weights).len();
    if shape.len() != 3 || shape[0] != k || shape[1] != shape[2] {
        return Err(Error::shape("mix_transition", &shape, &[k]));
    }
    let labels = shape[1];
    let row = g.reshape(weights, &[1, k])?;
    let stacked = g.reshape(experts, &[k, labels * labels])?;
    let mixed = g.matmul(row, stacked)?;
    g.reshape(mixed, &[labels, labels])
}

/// Token-major emission matrix: row `i` is `W h_i + b`.
pub fn emissions_graph(g: &mut Graph<'_>, hs: &[Var], weight: Var, bias: Var) -> Result<Var> {
    if hs.is_empty() {
        return Err(Error::Data("cannot score an empty token sequence".into()));
    }
    let labels = g.value(bias).len();
    let rows = hs
        .iter()
        .map(|&h| {
            let wh = g.matmul(weight, h)?;
            g.add(wh, bias)
        })
        .collect::<Result<Vec<_>>>()?;
    let flat = g.concat(&rows)?;
    g.reshape(flat, &[hs.len(), labels])
}

/// Generated emission layer and transition matrix for one attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderInstance {
    /// `[L, d_h]`
    pub weight: Tensor,
    /// `[L]`
    pub bias: Tensor,
    /// `[L, L]`
    pub transitions: Tensor,
}

impl DecoderInstance {
    pub fn generate(hyper: &HyperParams, moe: &MoeParams, r: &Tensor) -> Result<Self> {
        let (weight, bias) = generate_linear(hyper, r)?;
        let transitions = mix_transition(&moe.experts, &gate(moe, r)?)?;
        Ok(DecoderInstance {
            weight,
            bias,
            transitions,
        })
    }

    pub fn labels(&self) -> usize {
        self.bias.len()
    }

    pub fn emissions(&self, hidden: &Tensor) -> Result<Tensor> {
        emissions(hidden, &self.weight, &self.bias)
    }

    /// Best label sequence for encoded tokens `[n, d_h]`.
    pub fn decode(&self, hidden: &Tensor) -> Result<(Vec<usize>, f64)> {
        crf::viterbi(&self.emissions(hidden)?, &self.transitions)
    }
}

pub fn generate_linear(hyper: &HyperParams, r: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let vars = hyper.bind_const(&mut g);
    let r = g.constant_ref(r);
    let (w, b) = generate_linear_graph(&mut g, &vars, r)?;
    Ok((g.value(w).clone(), g.value(b).clone()))
}

pub fn gate(moe: &MoeParams, r: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = moe.bind_const(&mut g);
    let r = g.constant_ref(r);
    let lambda = gate_graph(&mut g, &vars, r)?;
    Ok(g.value(lambda).clone())
}

pub fn mix_transition(experts: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (e, w) = (g.constant_ref(experts), g.constant_ref(weights));
    let t = mix_transition_graph(&mut g, e, w)?;
    Ok(g.value(t).clone())
}

pub fn emissions(hidden: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if hidden.rank() != 2 {
        return Err(Error::shape("emissions", hidden.shape(), weight.shape()));
    }
    let mut g = Graph::new();
    let h = g.constant_ref(hidden);
    let (w, b) = (g.constant_ref(weight), g.constant_ref(bias));
    let rows = (0..hidden.shape()[0])
        .map(|i| g.row(h, i))
        .collect::<Result<Vec<_>>>()?;
    let e = emissions_graph(&mut g, &rows, w, b)?;
    Ok(g.value(e).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, log_sum_exp};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_sequences(n: usize, labels: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..n {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..labels).map(move |v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn brute_score(e: &Tensor, t: &Tensor, z: &[usize]) -> f64 {
        let mut s = e.at(0, z[0]);
        for i in 1..z.len() {
            s += t.at(z[i - 1], z[i]);
            s += e.at(i, z[i]);
        }
        s
    }

    #[test]
    fn zero_embedding_yields_hypernetwork_biases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hyper = HyperParams::uniform(3, 5, &mut rng);
        let (w, b) = generate_linear(&hyper, &Tensor::zeros(&[5])).unwrap();
        assert_eq!(w.shape(), &[4, 3]);
        assert_eq!(w.data(), hyper.weight_b.data());
        assert_eq!(b, hyper.bias_b);
        let r = Tensor::uniform(&[5], 1.0, &mut rng);
        assert_eq!(
            generate_linear(&hyper, &r).unwrap(),
            generate_linear(&hyper, &r).unwrap()
        );
        assert!(generate_linear(&hyper, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn generated_layer_matches_direct_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hyper = HyperParams::uniform(2, 3, &mut rng);
        let r = Tensor::uniform(&[3], 1.0, &mut rng);
        let (w, b) = generate_linear(&hyper, &r).unwrap();
        for row in 0..4 {
            for col in 0..2 {
                let flat = row * 2 + col;
                let mut s = hyper.weight_b.data()[flat];
                for m in 0..3 {
                    s += hyper.weight_w.at(flat, m) * r.data()[m];
                }
                assert!((w.at(row, col) - s).abs() < 1e-12);
            }
            let mut s = hyper.bias_b.data()[row];
            for m in 0..3 {
                s += hyper.bias_w.at(row, m) * r.data()[m];
            }
            assert!((b.data()[row] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_cases() {
        let r = Tensor::vector(vec![0.3, -2.0]);
        let uniform = gate(&MoeParams::zeros(4, 2), &r).unwrap();
        assert!(uniform.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let single = MoeParams::uniform(1, 2, &mut rng);
        assert_eq!(gate(&single, &r).unwrap().data(), &[1.0]);

        let mut moe = MoeParams::zeros(2, 2);
        moe.gate_b = Tensor::vector(vec![3f64.ln(), 0.0]);
        let l = gate(&moe, &r).unwrap();
        assert!((l.data()[0] - 0.75).abs() < 1e-15);
        assert!((l.data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mixture_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let experts = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let t = mix_transition(&experts, &Tensor::vector(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(t.data(), &experts.data()[..16]);

        let mut two = vec![0.0; 16];
        two.extend(vec![1.0; 16]);
        let two = Tensor::new(vec![2, 4, 4], two).unwrap();
        let t = mix_transition(&two, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.5));

        let single = MoeParams::uniform(1, 3, &mut rng);
        for _ in 0..5 {
            let r = Tensor::uniform(&[3], 5.0, &mut rng);
            let inst = DecoderInstance::generate(&HyperParams::zeros(2, 3), &single, &r).unwrap();
            assert_eq!(inst.transitions.data(), single.experts.data());
        }
    }

    #[test]
    fn emission_cases() {
        let h = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        let b = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let e = emissions(&h, &Tensor::zeros(&[4, 3]), &b).unwrap();
        assert_eq!(e.row(0), b.data());
        assert_eq!(e.row(1), b.data());

        let w = Tensor::matrix(4, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 1., 1., 1.]).unwrap();
        let h1 = Tensor::matrix(1, 3, vec![2.0, -1.0, 0.5]).unwrap();
        let e = emissions(&h1, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(e.data(), &[2.0, -1.0, 0.5, 1.5]);

        let e = emissions(&Tensor::zeros(&[1, 3]), &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(e.data(), &[0.0; 4]);
    }

    #[test]
    fn crf_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..200 {
            let n = 1 + seed % 6;
            let e = Tensor::uniform(&[n, 4], 3.0, &mut rng);
            let t = Tensor::uniform(&[4, 4], 3.0, &mut rng);
            let seqs = all_sequences(n, 4);
            let scores: Vec<f64> = seqs.iter().map(|z| brute_score(&e, &t, z)).collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let (path, vs) = crf::viterbi(&e, &t).unwrap();
            assert_eq!(vs, best);
            assert_eq!(crf::score(&e, &t, &path).unwrap(), best);
            let lz = crf::log_partition(&e, &t).unwrap();
            assert!((lz - log_sum_exp(&scores)).abs() < 1e-9);
            if n == 3 {
                let z = &seqs[seed % seqs.len()];
                assert_eq!(crf::score(&e, &t, z).unwrap(), brute_score(&e, &t, z));
            }
            if n == 4 {
                let z = &seqs[(seed * 7) % seqs.len()];
                let p = (brute_score(&e, &t, z) - log_sum_exp(&scores)).exp();
                assert!(((-crf::nll(&e, &t, z).unwrap()).exp() - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decoder_nll_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (d_h, d_r, k) = (4, 6, 3);
        let hyper = HyperParams::uniform(d_h, d_r, &mut rng);
        let moe = MoeParams::uniform(k, d_r, &mut rng);
        let params = vec![
            hyper.weight_w,
            hyper.weight_b,
            hyper.bias_w,
            hyper.bias_b,
            moe.gate_w,
            moe.gate_b,
            moe.experts,
            Tensor::uniform(&[3, d_h], 1.0, &mut rng),
            Tensor::uniform(&[d_r], 1.0, &mut rng),
        ];
        let tags = [0, 3, 2];
        let report = grad_check(
            |g, p| {
                let hv = HyperVars {
                    weight_w: p[0],
                    weight_b: p[1],
                    bias_w: p[2],
                    bias_b: p[3],
                };
                let mv = MoeVars {
                    gate_w: p[4],
                    gate_b: p[5],
                    experts: p[6],
                };
                let (w, b) = generate_linear_graph(g, &hv, p[8])?;
                let lambda = gate_graph(g, &mv, p[8])?;
                let t = mix_transition_graph(g, mv.experts, lambda)?;
                let hs = (0..3).map(|i| g.row(p[7], i)).collect::<Result<Vec<_>>>()?;
                let e = emissions_graph(g, &hs, w, b)?;
                crf::nll_op(g, e, t, &tags)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    fn instance_strategy(max_n: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
        (1..=max_n).prop_flat_map(|n| {
            (
                proptest::collection::vec(-5.0..5.0f64, n * 4),
                proptest::collection::vec(-5.0..5.0f64, 16),
            )
                .prop_map(move |(e, t)| {
                    (
                        Tensor::matrix(n, 4, e).unwrap(),
                        Tensor::matrix(4, 4, t).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn score_bounded_by_viterbi_and_partition((e, t) in instance_strategy(6), pick in 0usize..4096) {
            let n = e.shape()[0];
            let z: Vec<usize> = (0..n).map(|i| (pick >> (2 * i)) % 4).collect();
            let s = crf::score(&e, &t, &z).unwrap();
            let (_, v) = crf::viterbi(&e, &t).unwrap();
            let lz = crf::log_partition(&e, &t).unwrap();
            prop_assert!(s <= v);
            prop_assert!(v <= lz + 1e-12);
            prop_assert!(crf::nll(&e, &t, &z).unwrap() >= 0.0);
        }

        #[test]
        fn probabilities_sum_to_one((e, t) in instance_strategy(4)) {
            let n = e.shape()[0];
            let total: f64 = all_sequences(n, 4)
                .iter()
                .map(|z| (-crf::nll(&e, &t, z).unwrap()).exp())
                .sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }

        #[test]
        fn shifting_one_position_shifts_everything((e, t) in instance_strategy(6), c in -10.0..10.0f64, col in 0usize..6) {
            let n = e.shape()[0];
            let col = col % n;
            let mut shifted = e.clone();
            for v in 0..4 {
                shifted.data_mut()[col * 4 + v] += c;
            }
            let lz = crf::log_partition(&e, &t).unwrap();
            let lz2 = crf::log_partition(&shifted, &t).unwrap();
            prop_assert!((lz2 - lz - c).abs() < 1e-9);
            let (p1, s1) = crf::viterbi(&e, &t).unwrap();
            let (p2, s2) = crf::viterbi(&shifted, &t).unwrap();
            prop_assert!((s2 - s1 - c).abs() < 1e-9);
            // same path, unless rounding reorders two paths that were tied to 1e-9
            let gap = (crf::score(&shifted, &t, &p1).unwrap() - s2).abs();
            prop_assert!(p1 == p2 || gap < 1e-9);
            let d = crf::score(&shifted, &t, &p1).unwrap() - crf::score(&e, &t, &p1).unwrap();
            prop_assert!((d - c).abs() < 1e-9);
        }

        #[test]
        fn gate_is_a_distribution_and_mixture_stays_in_hull(
            seed in 0u64..1000, k in 1usize..8, scale in 0.1..20.0f64
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let moe = MoeParams::uniform(k, 5, &mut rng);
            let r = Tensor::uniform(&[5], scale, &mut rng);
            let l = gate(&moe, &r).unwrap();
            prop_assert!((l.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(l.data().iter().all(|&x| x >= 0.0));
            let t = mix_transition(&moe.experts, &l).unwrap();
            for j in 0..16 {
                let vals: Vec<f64> = (0..k).map(|e| moe.experts.data()[e * 16 + j]).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(t.data()[j] >= lo - 1e-12 && t.data()[j] <= hi + 1e-12);
            }
            let again = DecoderInstance::generate(&HyperParams::uniform(2, 5, &mut ChaCha8Rng::seed_from_u64(seed)), &moe, &r).unwrap();
            let twice = DecoderInstance::generate(&HyperParams::uniform(2, 5, &mut ChaCha8Rng::seed_from_u64(seed)), &moe, &r).unwrap();
            prop_assert_eq!(again, twice);
        }
    }
}
