//! Multi-modal factorized bilinear pooling and attention read-out.
//!
//! The factor tensors `U ∈ R^{d_x×l×k}` and `V ∈ R^{d_y×l×k}` are stored
//! transposed and flattened as `[k·l × d_x]` / `[k·l × d_y]`: rows
//! `i·l..(i+1)·l` hold `Uᵢᵀ`. One matvec then yields every `Uᵢᵀx` at once and
//! [`Graph::sum_blocks`] sums the `k` Hadamard products.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

/// Norm clamp for the L2 step; keeps the all-zero fusion at zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct MfbParams {
    pub u: ParamId,
    pub v: ParamId,
    pub x_dim: usize,
    pub y_dim: usize,
    pub factors: usize,
    pub hidden: usize,
}

impl MfbParams {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        x_dim: usize,
        y_dim: usize,
        factors: usize,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if factors == 0 || hidden == 0 {
            return Err(Error::Config(format!(
                "{prefix}: MFB needs k >= 1 and l >= 1 (k = {factors}, l = {hidden})"
            )));
        }
        let rows = factors * hidden;
        Ok(Self {
            u: store.insert_uniform(&format!("{prefix}.u"), &[rows, x_dim], scale, rng),
            v: store.insert_uniform(&format!("{prefix}.v"), &[rows, y_dim], scale, rng),
            x_dim,
            y_dim,
            factors,
            hidden,
        })
    }

    fn check_x<T: Scalar>(&self, g: &Graph<'_, T>, x: NodeId, op: &'static str) -> Result<()> {
        if g.shape(x) != [self.x_dim] {
            return Err(Error::ShapeMismatch {
                op,
                left: g.shape(x).to_vec(),
                right: vec![self.x_dim],
            });
        }
        Ok(())
    }
}

/// `Σᵢ Uᵢᵀx ∘ Vᵢᵀy` before any normalization, `[l]`.
pub fn mfb_raw<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, y: NodeId, p: &MfbParams) -> Result<NodeId> {
    p.check_x(g, x, "mfb_fuse")?;
    if g.shape(y) != [p.y_dim] {
        return Err(Error::ShapeMismatch {
            op: "mfb_fuse",
            left: g.shape(y).to_vec(),
            right: vec![p.y_dim],
        });
    }
    let u = g.param(p.u);
    let v = g.param(p.v);
    let ux = g.matvec(u, x)?;
    let vy = g.matvec(v, y)?;
    let h = g.mul(ux, vy)?;
    g.sum_blocks(h, p.factors)
}

/// MFB fusion of two vectors followed by power and L2 normalization, `[l]`.
pub fn mfb_fuse<T: Scalar>(g: &mut Graph<'_, T>, x: NodeId, y: NodeId, p: &MfbParams) -> Result<NodeId> {
    let z = mfb_raw(g, x, y, p)?;
    g.normalize_power_l2(z, 0, T::of(NORM_EPS))
}

/// `Σᵢ (Uᵢᵀx·𝟙ᵀ) ∘ VᵢᵀY` for `Y` with `φ` channels as columns, before normalization.
pub fn mfb_raw_multi<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    y: NodeId,
    p: &MfbParams,
) -> Result<NodeId> {
    p.check_x(g, x, "mfb_fuse_multi")?;
    let ys = g.shape(y);
    if ys.len() != 2 || ys[0] != p.y_dim {
        return Err(Error::ShapeMismatch {
            op: "mfb_fuse_multi",
            left: ys.to_vec(),
            right: vec![p.y_dim],
        });
    }
    let u = g.param(p.u);
    let v = g.param(p.v);
    let ux = g.matvec(u, x)?;
    let vy = g.matmul(v, y)?;
    let h = g.mul_column(vy, ux)?;
    g.sum_blocks(h, p.factors)
}

/// Multi-channel MFB, `[l × φ]`, normalized column by column.
pub fn mfb_fuse_multi<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    y: NodeId,
    p: &MfbParams,
) -> Result<NodeId> {
    let z = mfb_raw_multi(g, x, y, p)?;
    g.normalize_power_l2(z, 0, T::of(NORM_EPS))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    /// Scoring vector `w_α`, length `l`.
    pub w: ParamId,
    pub hidden: usize,
}

impl AttentionParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        hidden: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.insert_uniform(name, &[hidden], scale, rng),
            hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// Softmax weights over channels, `[φ]`.
    pub weights: NodeId,
    /// Convex combination of the feature columns, `[d]`.
    pub vector: NodeId,
}

/// `α = softmax(w_αᵀ z)`, `m = features · α`.
pub fn attend<T: Scalar>(
    g: &mut Graph<'_, T>,
    z: NodeId,
    features: NodeId,
    p: &AttentionParams,
) -> Result<Attended> {
    let (zs, fs) = (g.shape(z).to_vec(), g.shape(features).to_vec());
    if zs.len() != 2 || fs.len() != 2 || zs[1] != fs[1] || zs[0] != p.hidden {
        return Err(Error::ShapeMismatch {
            op: "attend",
            left: zs,
            right: fs,
        });
    }
    let w = g.param(p.w);
    let w_row = g.reshape(w, &[1, p.hidden])?;
    let logits = g.matmul(w_row, z)?;
    let logits = g.reshape(logits, &[zs[1]])?;
    let weights = g.softmax(logits, 0)?;
    let vector = g.matvec(features, weights)?;
    Ok(Attended { weights, vector })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, FiniteDiff};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mfb(seed: u64, dx: usize, dy: usize, k: usize, l: usize) -> (ParamStore<f64>, MfbParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MfbParams::register(&mut store, "mfb", dx, dy, k, l, 1.0, &mut rng).unwrap();
        (store, p)
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn hand_example_normalizes_to_one() {
        let mut store = ParamStore::new();
        let u = store.insert("u", Tensor::full(&[1, 2], 1.0));
        let v = store.insert("v", Tensor::full(&[1, 2], 1.0));
        let p = MfbParams {
            u,
            v,
            x_dim: 2,
            y_dim: 2,
            factors: 1,
            hidden: 1,
        };
        let mut g = Graph::with_params(&store);
        let x = g.constant_vec(vec![1.0, 2.0]);
        let y = g.constant_vec(vec![3.0, 4.0]);
        let raw = mfb_raw(&mut g, x, y, &p).unwrap();
        assert_eq!(g.value(raw), &[21.0]);
        let z = mfb_fuse(&mut g, x, y, &p).unwrap();
        assert_eq!(g.value(z), &[1.0]);
    }

    #[test]
    fn zero_input_fuses_to_zero() {
        let (store, p) = random_mfb(1, 3, 4, 2, 5);
        let mut g = Graph::with_params(&store);
        let x = g.constant_vec(vec![0.0; 3]);
        let y = g.constant_vec(vec![0.5; 4]);
        let raw = mfb_raw(&mut g, x, y, &p).unwrap();
        let z = mfb_fuse(&mut g, x, y, &p).unwrap();
        assert!(g.value(raw).iter().all(|&v| v == 0.0));
        assert!(g.value(z).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(z), &[5]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (store, p) = random_mfb(1, 3, 4, 2, 5);
        let mut g = Graph::with_params(&store);
        let x = g.constant_vec(vec![0.0; 4]);
        let y = g.constant_vec(vec![0.5; 4]);
        assert!(matches!(mfb_fuse(&mut g, x, y, &p), Err(Error::ShapeMismatch { .. })));
        let x = g.constant_vec(vec![0.0; 3]);
        let y3 = g.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(mfb_fuse_multi(&mut g, x, y3, &p).is_err());
    }

    #[test]
    fn multi_channel_matches_per_channel_loop() {
        let (store, p) = random_mfb(3, 3, 4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs = random_vec(&mut rng, 3);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 4)).collect();
        let mut g = Graph::with_params(&store);
        let x = g.constant_vec(xs);
        let col_ids: Vec<NodeId> = cols.iter().map(|c| g.constant_vec(c.clone())).collect();
        let y = g.stack_columns(&col_ids).unwrap();
        let multi = mfb_fuse_multi(&mut g, x, y, &p).unwrap();
        assert_eq!(g.shape(multi), &[5, 3]);
        let multi = g.to_tensor(multi);
        for (j, &c) in col_ids.iter().enumerate() {
            let single = mfb_fuse(&mut g, x, c, &p).unwrap();
            for (a, b) in multi.column(j).iter().zip(g.value(single)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // φ = 1 degenerates to the single-channel form.
        let one = g.stack_columns(&col_ids[..1]).unwrap();
        let m1 = mfb_fuse_multi(&mut g, x, one, &p).unwrap();
        let s1 = mfb_fuse(&mut g, x, col_ids[0], &p).unwrap();
        assert_eq!(g.value(m1), g.value(s1));
    }

    #[test]
    fn attention_examples() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert("w", Tensor::vector(vec![1.0, 0.0]));
        let p = AttentionParams { w, hidden: 2 };
        let mut g = Graph::with_params(&store);
        let feats = g
            .constant(&[2, 2], vec![1.0, 3.0, -2.0, 4.0])
            .unwrap();
        // Constant logits: uniform weights, mean of the columns.
        let z = g.constant(&[2, 2], vec![0.7, 0.7, 0.1, -0.4]).unwrap();
        let a = attend(&mut g, z, feats, &p).unwrap();
        assert_eq!(g.value(a.weights), &[0.5, 0.5]);
        assert_eq!(g.value(a.vector), &[2.0, 1.0]);
        // Logits [10, -10]: attended is essentially column 0.
        let z = g.constant(&[2, 2], vec![10.0, -10.0, 0.0, 0.0]).unwrap();
        let a = attend(&mut g, z, feats, &p).unwrap();
        let v = g.value(a.vector);
        assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 2.0).abs() < 1e-4);
        // Channel mismatch.
        let z3 = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(attend(&mut g, z3, feats, &p).is_err());
    }

    #[test]
    fn mfb_and_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = MfbParams::register(&mut store, "mfb", 3, 4, 2, 3, 1.0, &mut rng).unwrap();
        let att = AttentionParams::register(&mut store, "att", 3, 1.0, &mut rng);
        let xs = random_vec(&mut rng, 3);
        let ys = random_vec(&mut rng, 12);
        let feats = random_vec(&mut rng, 10);
        let probe = random_vec(&mut rng, 5);
        let report = check_params(
            &store,
            |g| {
                let x = g.constant_vec(xs.clone());
                let y = g.constant(&[4, 3], ys.clone())?;
                let y0 = g.constant_vec(ys[..4].to_vec());
                let single = mfb_fuse(g, x, y0, &p)?;
                let z = mfb_fuse_multi(g, x, y, &p)?;
                let f = g.constant(&[5, 3], feats.iter().chain(&feats[..5]).copied().collect())?;
                let a = attend(g, z, f, &att)?;
                let w = g.constant_vec(probe.clone());
                let s1 = g.dot(a.vector, w)?;
                let s2 = g.sum(single)?;
                g.add(s1, s2)
            },
            FiniteDiff::four_point(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest! {
        #[test]
        fn raw_fusion_is_linear_in_x(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let (store, p) = random_mfb(seed, 3, 4, 2, 4);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let xs = random_vec(&mut rng, 3);
            let ys = random_vec(&mut rng, 4);
            let mut g = Graph::with_params(&store);
            let x = g.constant_vec(xs.clone());
            let ax = g.constant_vec(xs.iter().map(|v| v * alpha).collect());
            let y = g.constant_vec(ys);
            let r = mfb_raw(&mut g, x, y, &p).unwrap();
            let ra = mfb_raw(&mut g, ax, y, &p).unwrap();
            for (a, b) in g.value(ra).iter().zip(g.value(r)) {
                prop_assert!((a - alpha * b).abs() < 1e-12);
            }
            if alpha > 0.0 {
                let z = mfb_fuse(&mut g, x, y, &p).unwrap();
                let za = mfb_fuse(&mut g, ax, y, &p).unwrap();
                for (a, b) in g.value(za).iter().zip(g.value(z)) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn fused_output_has_unit_norm(seed in 0u64..1000) {
            let (store, p) = random_mfb(seed, 3, 4, 2, 6);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
            let mut g = Graph::with_params(&store);
            let x = g.constant_vec(random_vec(&mut rng, 3));
            let y = g.constant_vec(random_vec(&mut rng, 4));
            let z = mfb_fuse(&mut g, x, y, &p).unwrap();
            let norm: f64 = g.value(z).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }

        #[test]
        fn attended_vector_is_in_convex_hull(seed in 0u64..1000, channels in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let att = AttentionParams::register(&mut store, "att", 3, 2.0, &mut rng);
            let mut g = Graph::with_params(&store);
            let z = g.constant(&[3, channels], random_vec(&mut rng, 3 * channels)).unwrap();
            let f = Tensor::new(vec![2, channels], random_vec(&mut rng, 2 * channels)).unwrap();
            let fid = g.input(&f);
            let a = attend(&mut g, z, fid, &att).unwrap();
            let w = g.value(a.weights);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x > 0.0 && x <= 1.0));
            for r in 0..2 {
                let row: Vec<f64> = (0..channels).map(|j| f.at2(r, j)).collect();
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = g.value(a.vector)[r];
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
