//! Data-aware adversarial augmentation: a partly weight-sharing conv network
//! perturbs both source modalities, trained to raise the task model's
//! cross-entropy while keeping the generated patches smooth.

use crate::error::{Error, Result};
use crate::ops::{clamp01, clamp_min, conv2d, leaky_relu, Conv2DParams, Padding};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Adversary weights. The `shared` layers are a single parameter set used by
/// both domain paths — aliasing, not copies — so gradients from either path
/// accumulate into the same tensors.
pub struct AdversaryParams {
    /// Independent layers per domain, applied before the shared block.
    pub pre1: Vec<Conv2DParams>,
    pub pre2: Vec<Conv2DParams>,
    pub shared: Vec<Conv2DParams>,
    /// Independent residual output layer per domain.
    pub out1: Conv2DParams,
    pub out2: Conv2DParams,
    pub layer_count: usize,
    pub width: usize,
}

/// Augmented patch pair; every value lies in [0, 1] after the output clamp.
pub struct AugmentedPair {
    pub xhat1: Tensor,
    pub xhat2: Tensor,
}

/// Layer schedule: the input layer and the last layer are always independent,
/// and of the remaining middle layers the final `min(2, L-2)` are shared.
/// L=5 gives independent e=1,2, shared e=3,4, residual output e=5; L=2 has no
/// shared block; L=3 shares exactly one layer.
pub fn build_adversary(
    layers: usize,
    n1: usize,
    n2: usize,
    width: usize,
    rng: &mut SeededRng,
) -> Result<AdversaryParams> {
    if !(2..=6).contains(&layers) {
        return Err(Error::LayerCount { got: layers });
    }
    let middles = layers - 2;
    let shared_count = middles.min(2);
    let independent_mid = middles - shared_count;

    let mut build_pre = |n_in: usize, rng: &mut SeededRng| {
        let mut pre = vec![Conv2DParams::init(width, n_in, 3, Padding::Same, rng)];
        for _ in 0..independent_mid {
            pre.push(Conv2DParams::init(width, width, 3, Padding::Same, rng));
        }
        pre
    };
    let pre1 = build_pre(n1, rng);
    let pre2 = build_pre(n2, rng);
    let shared: Vec<Conv2DParams> = (0..shared_count)
        .map(|_| Conv2DParams::init(width, width, 3, Padding::Same, rng))
        .collect();
    let out1 = Conv2DParams::init(n1, width, 3, Padding::Same, rng);
    let out2 = Conv2DParams::init(n2, width, 3, Padding::Same, rng);
    Ok(AdversaryParams {
        pre1,
        pre2,
        shared,
        out1,
        out2,
        layer_count: layers,
        width,
    })
}

impl AdversaryParams {
    /// All learnable tensors with stable names, shared block listed once.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push_conv = |name: String, c: &Conv2DParams, out: &mut Vec<(String, Tensor)>| {
            out.push((format!("{name}.kernel"), c.kernel.clone()));
            out.push((format!("{name}.bias"), c.bias.clone()));
        };
        for (i, c) in self.pre1.iter().enumerate() {
            push_conv(format!("adv.pre1.{i}"), c, &mut out);
        }
        for (i, c) in self.pre2.iter().enumerate() {
            push_conv(format!("adv.pre2.{i}"), c, &mut out);
        }
        for (i, c) in self.shared.iter().enumerate() {
            push_conv(format!("adv.shared.{i}"), c, &mut out);
        }
        push_conv("adv.out1".into(), &self.out1, &mut out);
        push_conv("adv.out2".into(), &self.out2, &mut out);
        out
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    fn domain_path(&self, x: &Tensor, domain: usize) -> Result<Tensor> {
        let (pre, out) = match domain {
            0 => (&self.pre1, &self.out1),
            _ => (&self.pre2, &self.out2),
        };
        let mut h = x.clone();
        for layer in pre {
            h = leaky_relu(&conv2d(&h, layer)?);
        }
        for layer in &self.shared {
            h = leaky_relu(&conv2d(&h, layer)?);
        }
        let delta = conv2d(&h, out)?;
        Ok(clamp01(&x.add(&delta)?))
    }
}

/// Run both domain paths on a patch pair. Deterministic in (params, inputs).
pub fn augment(g: &AdversaryParams, x1: &Tensor, x2: &Tensor) -> Result<AugmentedPair> {
    if x1.rank() != 3 || x2.rank() != 3 {
        return Err(Error::InvalidShape {
            reason: "augment expects [m,m,c] patches".into(),
        });
    }
    if x1.shape()[2] != g.pre1[0].in_channels() {
        return Err(Error::ChannelMismatch {
            op: "augment",
            expected: g.pre1[0].in_channels(),
            got: x1.shape()[2],
        });
    }
    if x2.shape()[2] != g.pre2[0].in_channels() {
        return Err(Error::ChannelMismatch {
            op: "augment",
            expected: g.pre2[0].in_channels(),
            got: x2.shape()[2],
        });
    }
    Ok(AugmentedPair {
        xhat1: g.domain_path(x1, 0)?,
        xhat2: g.domain_path(x2, 1)?,
    })
}

/// Total variation of an `[m, m, c]` patch: squared horizontal and vertical
/// neighbor differences summed over channels, boundary terms omitted.
pub fn tv_loss(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::InvalidShape {
            reason: format!("tv_loss expects [m,m,c], got {:?}", x.shape()),
        });
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let idx = |y: usize, xc: usize, ch: usize| (y * w + xc) * c + ch;
    let mut total = 0.0;
    {
        let d = x.data();
        for y in 0..h {
            for xc in 0..w {
                for ch in 0..c {
                    let v = d[idx(y, xc, ch)];
                    if xc + 1 < w {
                        let dlt = d[idx(y, xc + 1, ch)] - v;
                        total += dlt * dlt;
                    }
                    if y + 1 < h {
                        let dlt = d[idx(y + 1, xc, ch)] - v;
                        total += dlt * dlt;
                    }
                }
            }
        }
    }
    if !x.tracks() {
        return Tensor::from_vec(vec![total], &[]);
    }
    let input = x.clone();
    Ok(Tensor::from_op(
        vec![total],
        vec![],
        vec![x.clone()],
        Box::new(move |g| {
            let gv = g[0];
            let d = input.data();
            let mut dx = vec![0.0; d.len()];
            for y in 0..h {
                for xc in 0..w {
                    for ch in 0..c {
                        let v = d[idx(y, xc, ch)];
                        if xc + 1 < w {
                            let dlt = d[idx(y, xc + 1, ch)] - v;
                            dx[idx(y, xc + 1, ch)] += 2.0 * dlt * gv;
                            dx[idx(y, xc, ch)] -= 2.0 * dlt * gv;
                        }
                        if y + 1 < h {
                            let dlt = d[idx(y + 1, xc, ch)] - v;
                            dx[idx(y + 1, xc, ch)] += 2.0 * dlt * gv;
                            dx[idx(y, xc, ch)] -= 2.0 * dlt * gv;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Adversarial objective: `mean(y . log p_g) + mean_n tv(xhat1_n) +
/// mean_n tv(xhat2_n)`. Minimizing it raises the model's cross-entropy on the
/// augmented batch while smoothing the generated patches. TV is averaged over
/// the batch. Probabilities are floored at 1e-12 before the log; rows must
/// already be normalized within 1e-6.
pub fn adv_loss(p_g: &Tensor, y: &Tensor, xhat1: &[Tensor], xhat2: &[Tensor]) -> Result<Tensor> {
    if p_g.rank() != 2 || p_g.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "adv_loss",
            lhs: p_g.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (b, c) = (p_g.shape()[0], p_g.shape()[1]);
    {
        let pd = p_g.data();
        for row in 0..b {
            let sum: f64 = pd[row * c..(row + 1) * c].iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::RowNotNormalized { row, sum });
            }
        }
    }
    let logp = clamp_min(p_g, 1e-12).log()?;
    let ce = y.mul(&logp)?.sum_all()?.scale(1.0 / b as f64);
    let mut loss = ce;
    let nb = xhat1.len() as f64;
    let mut tv_sum: Option<Tensor> = None;
    for xh in xhat1.iter().chain(xhat2.iter()) {
        let t = tv_loss(xh)?;
        tv_sum = Some(match tv_sum {
            Some(acc) => acc.add(&t)?,
            None => t,
        });
    }
    if let Some(tv) = tv_sum {
        loss = loss.add(&tv.scale(1.0 / nb))?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, finite_diff_check, stack_rows};

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn rand_patch(rng: &mut SeededRng, m: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::from_vec((0..m * m * c).map(|_| rng.uniform(lo, hi)).collect(), &[m, m, c])
            .unwrap()
    }

    fn zero_adversary(layers: usize, n1: usize, n2: usize, width: usize) -> AdversaryParams {
        let g = build_adversary(layers, n1, n2, width, &mut SeededRng::new(0)).unwrap();
        for t in g.tensors() {
            t.set_data(&vec![0.0; t.numel()]);
        }
        g
    }

    #[test]
    fn layer_schedule_matches_description() {
        let mut rng = SeededRng::new(1);
        // L=5: e=1,2 independent, e=3,4 shared, e=5 output
        let g5 = build_adversary(5, 4, 2, 8, &mut rng).unwrap();
        assert_eq!(g5.pre1.len(), 2);
        assert_eq!(g5.shared.len(), 2);
        // L=2: no shared block
        let g2 = build_adversary(2, 4, 2, 8, &mut rng).unwrap();
        assert_eq!(g2.pre1.len(), 1);
        assert_eq!(g2.shared.len(), 0);
        // L=3: exactly one shared layer
        let g3 = build_adversary(3, 4, 2, 8, &mut rng).unwrap();
        assert_eq!(g3.pre1.len(), 1);
        assert_eq!(g3.shared.len(), 1);
        // L=4: one independent input, two shared
        let g4 = build_adversary(4, 4, 2, 8, &mut rng).unwrap();
        assert_eq!(g4.pre1.len(), 1);
        assert_eq!(g4.shared.len(), 2);
        // L=6: two independent middles before the shared pair
        let g6 = build_adversary(6, 4, 2, 8, &mut rng).unwrap();
        assert_eq!(g6.pre1.len(), 3);
        assert_eq!(g6.shared.len(), 2);

        assert!(matches!(
            build_adversary(1, 4, 2, 8, &mut rng),
            Err(Error::LayerCount { got: 1 })
        ));
        assert!(matches!(
            build_adversary(7, 4, 2, 8, &mut rng),
            Err(Error::LayerCount { got: 7 })
        ));
    }

    #[test]
    fn zero_weights_pass_inputs_through() {
        let mut rng = SeededRng::new(3);
        let g = zero_adversary(5, 3, 2, 8);
        // in-range inputs come back exactly
        let x1 = rand_patch(&mut rng, 5, 3, 0.0, 1.0);
        let x2 = rand_patch(&mut rng, 5, 2, 0.0, 1.0);
        let aug = augment(&g, &x1, &x2).unwrap();
        assert_eq!(aug.xhat1.to_vec(), x1.to_vec());
        assert_eq!(aug.xhat2.to_vec(), x2.to_vec());
        // out-of-range inputs are clamped
        let xw = Tensor::from_vec(vec![-0.5, 0.5, 1.5], &[1, 1, 3]).unwrap();
        let x2w = Tensor::from_vec(vec![0.2, 0.8], &[1, 1, 2]).unwrap();
        let aug = augment(&g, &xw, &x2w).unwrap();
        assert_eq!(aug.xhat1.to_vec(), vec![0.0, 0.5, 1.0]);
    }

    #[test]
    fn augmented_values_stay_in_unit_range() {
        let mut rng = SeededRng::new(7);
        for seed in 0..10 {
            let g = build_adversary(2 + seed % 5, 4, 2, 6, &mut rng).unwrap();
            let x1 = rand_patch(&mut rng, 5, 4, 0.0, 1.0);
            let x2 = rand_patch(&mut rng, 5, 2, 0.0, 1.0);
            let aug = augment(&g, &x1, &x2).unwrap();
            for v in aug.xhat1.to_vec().iter().chain(aug.xhat2.to_vec().iter()) {
                assert!((0.0..=1.0).contains(v), "value {v} escaped [0,1]");
            }
        }
    }

    #[test]
    fn augment_is_deterministic() {
        let mut rng = SeededRng::new(11);
        let g = build_adversary(5, 3, 2, 8, &mut rng).unwrap();
        let x1 = rand_patch(&mut rng, 5, 3, 0.0, 1.0);
        let x2 = rand_patch(&mut rng, 5, 2, 0.0, 1.0);
        let a = augment(&g, &x1, &x2).unwrap();
        let b = augment(&g, &x1, &x2).unwrap();
        assert!(a
            .xhat1
            .to_vec()
            .iter()
            .zip(b.xhat1.to_vec().iter())
            .all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn shared_layers_receive_summed_gradients() {
        // gradient into the shared kernel from a two-domain loss equals the
        // sum of the gradients from each domain path alone
        let mut rng = SeededRng::new(13);
        let g = build_adversary(4, 3, 2, 4, &mut rng).unwrap();
        let x1 = rand_patch(&mut rng, 4, 3, 0.2, 0.8);
        let x2 = rand_patch(&mut rng, 4, 2, 0.2, 0.8);

        let both = {
            let aug = augment(&g, &x1, &x2).unwrap();
            let loss = aug
                .xhat1
                .square()
                .sum_all()
                .unwrap()
                .add(&aug.xhat2.square().sum_all().unwrap())
                .unwrap();
            backward(&loss).unwrap()
        };
        let only1 = {
            let aug = augment(&g, &x1, &x2).unwrap();
            let loss = aug.xhat1.square().sum_all().unwrap();
            backward(&loss).unwrap()
        };
        let only2 = {
            let aug = augment(&g, &x1, &x2).unwrap();
            let loss = aug.xhat2.square().sum_all().unwrap();
            backward(&loss).unwrap()
        };
        let k = &g.shared[0].kernel;
        let gb = both.get(k).unwrap().to_vec();
        let g1 = only1.get(k).unwrap().to_vec();
        let g2 = only2.get(k).unwrap().to_vec();
        for i in 0..gb.len() {
            assert_close(gb[i], g1[i] + g2[i], 1e-10);
        }
    }

    #[test]
    fn tv_loss_hand_cases() {
        assert_close(tv_loss(&Tensor::full(&[4, 4, 2], 0.37)).unwrap().item(), 0.0, 1e-15);
        let img = Tensor::from_vec(vec![0.0, 1.0, 0.0, 1.0], &[2, 2, 1]).unwrap();
        assert_close(tv_loss(&img).unwrap().item(), 2.0, 1e-15);
        assert_close(
            tv_loss(&Tensor::from_vec(vec![0.9], &[1, 1, 1]).unwrap()).unwrap().item(),
            0.0,
            1e-15,
        );
    }

    #[test]
    fn tv_loss_gradcheck() {
        let mut rng = SeededRng::new(17);
        for _ in 0..20 {
            let x = Tensor::param(
                (0..3 * 3 * 2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                &[3, 3, 2],
            )
            .unwrap();
            let err = finite_diff_check(|ps| tv_loss(&ps[0]), &[x], 1e-5).unwrap();
            assert!(err < 1e-4, "tv gradcheck {err}");
        }
    }

    #[test]
    fn adv_loss_zero_case_and_uniform() {
        // perfect prediction and constant images: both terms vanish
        let p = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let y = p.detach();
        let flat = vec![Tensor::full(&[3, 3, 1], 0.5), Tensor::full(&[3, 3, 1], 0.5)];
        let loss = adv_loss(&p, &y, &flat, &flat).unwrap();
        assert_close(loss.item(), 0.0, 1e-9);

        // uniform prediction over 7 classes
        let c = 7;
        let p = Tensor::full(&[3, c], 1.0 / c as f64);
        let mut yv = vec![0.0; 3 * c];
        for (row, cls) in [(0usize, 2usize), (1, 0), (2, 6)] {
            yv[row * c + cls] = 1.0;
        }
        let y = Tensor::from_vec(yv, &[3, c]).unwrap();
        let flat: Vec<Tensor> = (0..3).map(|_| Tensor::full(&[3, 3, 1], 0.5)).collect();
        let loss = adv_loss(&p, &y, &flat, &flat).unwrap();
        assert_close(loss.item(), (1.0 / 7.0_f64).ln(), 1e-12);
    }

    #[test]
    fn adv_loss_rejects_unnormalized_rows() {
        let p = Tensor::from_vec(vec![0.7, 0.7], &[1, 2]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        assert!(matches!(
            adv_loss(&p, &y, &[], &[]),
            Err(Error::RowNotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn adv_loss_gradcheck_through_augment() {
        // gradient wrt adversary weights, with a simple differentiable
        // readout standing in for the frozen task model
        let mut rng = SeededRng::new(19);
        let g = build_adversary(3, 2, 1, 3, &mut rng).unwrap();
        // shrink weights so pre-clamp values stay strictly inside (0,1)
        for t in g.tensors() {
            let v: Vec<f64> = t.data().iter().map(|x| x * 0.05).collect();
            t.set_data(&v);
        }
        let x1 = rand_patch(&mut rng, 3, 2, 0.3, 0.7);
        let x2 = rand_patch(&mut rng, 3, 1, 0.3, 0.7);
        let y = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();

        let params = g.tensors();
        let err = finite_diff_check(
            |_| {
                let aug = augment(&g, &x1, &x2)?;
                // readout: softmax over channel means of the first modality
                let means = aug.xhat1.mean_axes(&[0, 1], false)?;
                let p_row = crate::ops::softmax(&means.reshape(&[1, 2])?, 1)?;
                let p = stack_rows(&[p_row.reshape(&[2])?])?;
                adv_loss(&p, &y, &[aug.xhat1.clone()], &[aug.xhat2.clone()])
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "adv_loss gradcheck {err}");
    }
}
