//! Action prediction: position heatmaps decoded over the point cloud, the
//! task/step offset, and the rotation/gripper regressor.

use rand_chacha::ChaCha8Rng;

use super::visual::ConvParams;
use crate::config::{HeatmapNorm, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub blocks: Vec<ConvParams>,
    pub out: ConvParams,
}

impl DecoderParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cin: usize) -> Self {
        let c = FEATURE_CHANNELS;
        let blocks = vec![
            ConvParams::new(store, rng, "dec.1", cin, c, false),
            ConvParams::new(store, rng, "dec.2", 2 * c, c, false),
            ConvParams::new(store, rng, "dec.3", 2 * c, c, false),
            ConvParams::new(store, rng, "dec.4", 2 * c, c, false),
        ];
        let out = ConvParams::new(store, rng, "dec.out", 2 * c, 1, false);
        DecoderParams { blocks, out }
    }
}

/// Decodes one camera's `[C, Hv, Wv]` input into `[1, H*W]` logits. `skips`
/// are the six encoder activations of that camera.
pub fn decode_logits<F: Real>(
    g: &mut Graph<F>,
    p: &DecoderParams,
    input: Var,
    skips: &[Var],
    slope: f64,
) -> Result<Var> {
    if skips.len() != 6 {
        return Err(Error::MissingSkips);
    }
    let mut y = p.blocks[0].apply(g, input, 1, 1, slope);
    y = g.upsample2x(y);
    for (block, &skip) in p.blocks[1..].iter().zip(&[skips[4], skips[3], skips[2]]) {
        let x = g.concat(&[y, skip]);
        y = block.apply(g, x, 1, 1, slope);
        y = g.upsample2x(y);
    }
    let x = g.concat(&[y, skips[1]]);
    let (w, b) = (g.param(p.out.w), g.param(p.out.b));
    let logits = g.conv3x3(x, w, b, 1);
    let (_, h, wd) = g.value(logits).dims3();
    Ok(g.reshape(logits, &[1, h * wd]))
}

/// Normalizes per-camera logits into one distribution over all cameras.
pub fn normalize_heatmaps<F: Real>(g: &mut Graph<F>, logits: &[Var], norm: HeatmapNorm) -> Var {
    match norm {
        HeatmapNorm::Joint => {
            let all = g.concat_cols(logits);
            g.softmax(all)
        }
        HeatmapNorm::PerCamera => {
            let inv = F::c(1.0 / logits.len() as f64);
            let parts: Vec<Var> = logits
                .iter()
                .map(|&l| {
                    let s = g.softmax(l);
                    g.scale(s, inv)
                })
                .collect();
            g.concat_cols(&parts)
        }
    }
}

/// `Σ B[i] pcd[i]` for `B` of shape `[1, N]` and a constant `N x 3` point cloud.
pub fn expected_position<F: Real>(g: &mut Graph<F>, heatmap: Var, pcd: Tensor<F>) -> Var {
    let p = g.constant(pcd);
    g.matmul(heatmap, p)
}

#[derive(Clone, Debug)]
pub struct RotationParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub w: ParamId,
    pub b: ParamId,
}

impl RotationParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cin: usize, ch: usize) -> Self {
        RotationParams {
            conv1: ConvParams::new(store, rng, "rot.1", cin, ch, true),
            conv2: ConvParams::new(store, rng, "rot.2", ch, ch, true),
            w: store.add("rot.out.w", init_uniform(rng, &[ch, 5], ch, 1.0)),
            b: store.add("rot.out.b", Tensor::zeros(&[5])),
        }
    }
}

/// Returns the raw `[1, 5]` output (quaternion, open) and the pooled `[1, C]`
/// features it was computed from.
pub fn rotation_head<F: Real>(
    g: &mut Graph<F>,
    p: &RotationParams,
    input: Var,
    groups: usize,
    slope: f64,
) -> (Var, Var) {
    let y = p.conv1.apply(g, input, 2, groups, slope);
    let y = p.conv2.apply(g, y, 2, groups, slope);
    let (c, h, w) = g.value(y).dims3();
    let flat = g.reshape(y, &[c, h * w]);
    let pooled = g.mean_cols(flat);
    let pooled = g.transpose(pooled);
    let (w, b) = (g.param(p.w), g.param(p.b));
    let out = g.matmul(pooled, w);
    (g.add_row(out, b), pooled)
}

#[derive(Clone, Debug)]
pub struct TaskParams {
    /// `[d_text, N_tasks]`
    pub classifier: ParamId,
    /// `[N_tasks, T_max * 3]`
    pub offsets: ParamId,
    /// Offset regressor on pooled rotation features, when the instruction
    /// path is disabled.
    pub feature_offset: Option<(ParamId, ParamId)>,
}

impl TaskParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        text_dim: usize,
        tasks: usize,
        max_steps: usize,
        feature_offset_from: Option<usize>,
    ) -> Self {
        TaskParams {
            classifier: store.add("task.classifier", init_normal(rng, &[text_dim, tasks], 0.01)),
            offsets: store.add("task.offsets", Tensor::zeros(&[tasks, max_steps * 3])),
            feature_offset: feature_offset_from.map(|c| {
                (
                    store.add("task.feature_offset.w", Tensor::zeros(&[c, 3])),
                    store.add("task.feature_offset.b", Tensor::zeros(&[3])),
                )
            }),
        }
    }
}

/// Task logits `[1, N]` from the mean raw instruction embedding.
pub fn task_logits<F: Real>(g: &mut Graph<F>, p: &TaskParams, mean_embed: &[f64]) -> Var {
    let x = g.constant(Tensor::from_f64(&[1, mean_embed.len()], mean_embed));
    let w = g.param(p.classifier);
    g.matmul(x, w)
}

/// `Σ_m Pr(m) E_O[m, t, :]` as `[1, 3]`.
pub fn predict_offset<F: Real>(
    g: &mut Graph<F>,
    p: &TaskParams,
    probs: Var,
    step: usize,
    max_steps: usize,
) -> Result<Var> {
    if step >= max_steps {
        return Err(Error::StepOutOfRange { step, max: max_steps - 1 });
    }
    let table = g.param(p.offsets);
    let all = g.matmul(probs, table);
    Ok(g.slice_cols(all, step * 3, step * 3 + 3))
}
