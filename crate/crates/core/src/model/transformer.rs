//! Multi-head attention and the encoder block.
//!
//! Heads are column slices of the projected queries, keys and values and are
//! concatenated back without an output projection, so `heads = 1` is exactly
//! `softmax((Q Wq)(K Wk)ᵀ / √d) (V Wv)`.

use crate::config::AttnMode;
use crate::graph::{Graph, Var};
use crate::params::{init_uniform, ParamId, ParamStore};
use crate::tensor::Real;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl AttnParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, name: &str, d: usize) -> Self {
        let mut w = |s: &str| store.add(format!("{name}.{s}"), init_uniform(rng, &[d, d], d, 1.0));
        AttnParams { wq: w("wq"), wk: w("wk"), wv: w("wv") }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    /// Present in cross mode only.
    pub cross: Option<AttnParams>,
    pub attn: AttnParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl BlockParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d: usize,
        d_ff: usize,
        mode: AttnMode,
    ) -> Self {
        let cross = (mode == AttnMode::Cross).then(|| AttnParams::new(store, rng, &format!("{name}.cross"), d));
        let attn = AttnParams::new(store, rng, &format!("{name}.self"), d);
        BlockParams {
            cross,
            attn,
            w1: store.add(format!("{name}.ff.w1"), init_uniform(rng, &[d, d_ff], d, 1.0)),
            b1: store.add(format!("{name}.ff.b1"), crate::tensor::Tensor::zeros(&[d_ff])),
            w2: store.add(format!("{name}.ff.w2"), init_uniform(rng, &[d_ff, d], d_ff, 1.0)),
            b2: store.add(format!("{name}.ff.b2"), crate::tensor::Tensor::zeros(&[d])),
            ln_gamma: store.add(format!("{name}.ln.gamma"), crate::tensor::Tensor::full(&[d], F::one())),
            ln_beta: store.add(format!("{name}.ln.beta"), crate::tensor::Tensor::zeros(&[d])),
        }
    }
}

/// Multi-head attention of queries `q` (`a x d`) over keys/values `kv` (`b x d`).
pub fn attention<F: Real>(g: &mut Graph<F>, p: &AttnParams, q: Var, kv: Var, heads: usize) -> Var {
    let d = g.shape(q)[1];
    let dh = d / heads;
    let (wq, wk, wv) = (g.param(p.wq), g.param(p.wk), g.param(p.wv));
    let qp = g.matmul(q, wq);
    let kp = g.matmul(kv, wk);
    let vp = g.matmul(kv, wv);
    let scale = F::c(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (qp, kp, vp)
        } else {
            (
                g.slice_cols(qp, h * dh, (h + 1) * dh),
                g.slice_cols(kp, h * dh, (h + 1) * dh),
                g.slice_cols(vp, h * dh, (h + 1) * dh),
            )
        };
        let logits = g.matmul_opt(qh, kh, true);
        let logits = g.scale(logits, scale);
        let a = g.softmax(logits);
        outs.push(g.matmul(a, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

fn feed_forward<F: Real>(g: &mut Graph<F>, p: &BlockParams, x: Var) -> Var {
    let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let h = g.matmul(h, w2);
    g.add_row(h, b2)
}

/// One encoder block over current tokens `x` (`m x d`) with context `ctx`.
///
/// Cross mode: `x1 = x + CA(x, ctx)`, `x2 = x1 + SA(x1)`,
/// `out = LN(x2 + FFN(x2))`. Self mode: `x1 = x + A(x, [ctx; x])`,
/// `out = LN(x1 + FFN(x1))`.
pub fn encoder_block<F: Real>(g: &mut Graph<F>, p: &BlockParams, x: Var, ctx: Var, heads: usize) -> Var {
    let x2 = match &p.cross {
        Some(cross) => {
            let ca = attention(g, cross, x, ctx, heads);
            let x1 = g.add(x, ca);
            let sa = attention(g, &p.attn, x1, x1, heads);
            g.add(x1, sa)
        }
        None => {
            let all = g.concat(&[ctx, x]);
            let sa = attention(g, &p.attn, x, all, heads);
            g.add(x, sa)
        }
    };
    let ff = feed_forward(g, p, x2);
    let y = g.add(x2, ff);
    let (gm, bt) = (g.param(p.ln_gamma), g.param(p.ln_beta));
    g.layer_norm(y, gm, bt, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn setup(mode: AttnMode) -> (ParamStore<f64>, BlockParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = BlockParams::new(&mut store, &mut rng, "b", 8, 16, mode);
        (store, p)
    }

    fn rand_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Tensor<f64> {
        crate::params::init_normal(rng, &[m, d], 1.0)
    }

    #[test]
    fn single_key_returns_its_value() {
        let (store, p) = setup(AttnMode::Cross);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new(&store);
        let q = g.constant(rand_rows(&mut rng, 3, 8));
        let kv_t = rand_rows(&mut rng, 1, 8);
        let kv = g.constant(kv_t.clone());
        let out = attention(&mut g, &p.attn, q, kv, 1);
        let v = kv_t.matmul(false, store.get(p.attn.wv), false);
        for row in g.value(out).data().chunks(8) {
            for (a, b) in row.iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_order_and_multiplicity_do_not_matter() {
        for mode in [AttnMode::Cross, AttnMode::SelfOnly] {
            let (store, p) = setup(mode);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let x = rand_rows(&mut rng, 4, 8);
            let c = rand_rows(&mut rng, 5, 8);
            let mut perm = Tensor::zeros(&[5, 8]);
            for (dst, src) in [4, 2, 0, 1, 3].iter().enumerate() {
                perm.data_mut()[dst * 8..dst * 8 + 8].copy_from_slice(c.row(*src));
            }
            let run = |ctx: Tensor<f64>| {
                let mut g = Graph::new(&store);
                let (xv, cv) = (g.constant(x.clone()), g.constant(ctx));
                let out = encoder_block(&mut g, &p, xv, cv, 2);
                g.value(out).clone()
            };
            let base = run(c.clone());
            let shuffled = run(perm);
            assert!(base.data().iter().zip(shuffled.data()).all(|(a, b)| (a - b).abs() < 1e-9));
        }
        let (store, p) = setup(AttnMode::Cross);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_rows(&mut rng, 2, 8);
        let one = rand_rows(&mut rng, 1, 8);
        let three = Tensor::new(&[3, 8], one.data().repeat(3));
        let ca = |ctx: Tensor<f64>| {
            let mut g = Graph::new(&store);
            let (xv, cv) = (g.constant(x.clone()), g.constant(ctx));
            let out = attention(&mut g, p.cross.as_ref().unwrap(), xv, cv, 2);
            g.value(out).clone()
        };
        let (a, b) = (ca(one), ca(three));
        assert!(a.data().iter().zip(b.data()).all(|(u, v)| (u - v).abs() < 1e-12));
    }
}
