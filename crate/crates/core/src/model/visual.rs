//! Per-camera convolutional encoder, point-cloud pooling and visual tokens.

use rand_chacha::ChaCha8Rng;

use crate::config::{PolicyConfig, TokenMode, ENCODER_STRIDE, FEATURE_CHANNELS, FUSED_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::block_mean_hwc;
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub norm: Option<(ParamId, ParamId)>,
}

impl ConvParams {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        norm: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, &[cout, cin * 9], cin * 9, 2f64.sqrt()));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        let norm = norm.then(|| {
            (
                store.add(format!("{name}.gn.gamma"), Tensor::full(&[cout], F::one())),
                store.add(format!("{name}.gn.beta"), Tensor::zeros(&[cout])),
            )
        });
        ConvParams { w, b, norm }
    }

    /// conv → (GroupNorm) → LeakyReLU
    pub fn apply<F: Real>(&self, g: &mut Graph<F>, x: Var, stride: usize, groups: usize, slope: f64) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let mut y = g.conv3x3(x, w, b, stride);
        if let Some((gm, bt)) = self.norm {
            let (gm, bt) = (g.param(gm), g.param(bt));
            y = g.group_norm(y, groups, gm, bt, 1e-5);
        }
        g.leaky_relu(y, F::c(slope))
    }
}

/// Layers 1-2: stride 1 with 8 and 16 channels; layers 3-6: stride 2, 16
/// channels, GroupNorm.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub layers: Vec<ConvParams>,
}

impl EncoderParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = vec![
            ConvParams::new(store, rng, "enc.1", 4, 8, false),
            ConvParams::new(store, rng, "enc.2", 8, FEATURE_CHANNELS, false),
        ];
        for i in 3..=6 {
            layers.push(ConvParams::new(store, rng, &format!("enc.{i}"), FEATURE_CHANNELS, FEATURE_CHANNELS, true));
        }
        EncoderParams { layers }
    }
}

/// Channel-first `[4, H, W]` encoder input from channel-last RGB and the
/// gripper map.
pub fn encoder_input<F: Real>(rgb: &[f32], gripper: &[f32], h: usize, w: usize) -> Result<Tensor<F>> {
    if rgb.len() != h * w * 3 || gripper.len() != h * w {
        return Err(Error::Shape(format!(
            "rgb has {} values and gripper map {}, expected {h}x{w}",
            rgb.len(),
            gripper.len()
        )));
    }
    let n = h * w;
    let mut data = vec![F::zero(); 4 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = F::c(f64::from(rgb[i * 3 + c]));
        }
        data[3 * n + i] = F::c(f64::from(gripper[i]));
    }
    Ok(Tensor::new(&[4, h, w], data))
}

/// Runs the encoder on a `[4, H, W]` input. Returns the activations of all
/// six layers; the last one is the `[16, H/16, W/16]` feature map.
pub fn unet_encode<F: Real>(
    g: &mut Graph<F>,
    p: &EncoderParams,
    x: Var,
    groups: usize,
    slope: f64,
) -> Result<Vec<Var>> {
    let (_, h, w) = g.value(x).dims3();
    if h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 || h == 0 || w == 0 {
        return Err(Error::ImageSize(h, w));
    }
    let mut acts = Vec::with_capacity(6);
    let mut y = x;
    for (i, layer) in p.layers.iter().enumerate() {
        y = layer.apply(g, y, if i < 2 { 1 } else { 2 }, groups, slope);
        acts.push(y);
    }
    Ok(acts)
}

/// 16x16 block means of a channel-last `H x W x 3` point cloud, as a
/// channel-first `[3, H/16, W/16]` tensor.
pub fn pooled_pointcloud<F: Real>(pcd: &[f32], h: usize, w: usize) -> Tensor<F> {
    let means = block_mean_hwc(pcd, h, w, 3, ENCODER_STRIDE);
    Tensor::new(&[3, h / ENCODER_STRIDE, w / ENCODER_STRIDE], means.iter().map(|&v| F::c(v)).collect())
}

/// Channel concatenation of the feature map with the pooled point cloud.
pub fn fuse_pointcloud<F: Real>(g: &mut Graph<F>, fmap: Var, pooled: Tensor<F>) -> Result<Var> {
    let (_, h, w) = g.value(fmap).dims3();
    let (_, ph, pw) = pooled.dims3();
    if (h, w) != (ph, pw) {
        return Err(Error::Shape(format!("feature map is {h}x{w} but pooled point cloud is {ph}x{pw}")));
    }
    let p = g.constant(pooled);
    Ok(g.concat(&[fmap, p]))
}

#[derive(Clone, Debug)]
pub struct TokenParams {
    /// `[19, d]` in patch mode, `[Hv*Wv, d]` in channel mode.
    pub proj: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub camera: ParamId,
    pub step: ParamId,
    /// Patch mode only.
    pub location: Option<ParamId>,
    pub kind: ParamId,
}

impl TokenParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut ChaCha8Rng, cfg: &PolicyConfig) -> Self {
        let d = cfg.d_model;
        let cells = cfg.grid() * cfg.grid();
        let fan_in = match cfg.token_mode {
            TokenMode::Patch => FUSED_CHANNELS,
            TokenMode::Channel => cells,
        };
        let std = cfg.embed_std;
        TokenParams {
            proj: store.add("tok.proj", init_uniform(rng, &[fan_in, d], fan_in, 1.0)),
            ln_gamma: store.add("tok.ln.gamma", Tensor::full(&[d], F::one())),
            ln_beta: store.add("tok.ln.beta", Tensor::zeros(&[d])),
            camera: store.add("tok.camera", init_normal(rng, &[cfg.num_cameras(), d], std)),
            step: store.add("tok.step", init_normal(rng, &[cfg.max_steps, d], std)),
            location: (cfg.token_mode == TokenMode::Patch)
                .then(|| store.add("tok.location", init_normal(rng, &[cells, d], std))),
            kind: store.add("tok.type", init_normal(rng, &[d], std)),
        }
    }
}

/// Visual tokens of one step from the fused `[19, Hv, Wv]` maps of every
/// camera. Patch mode rows are ordered `(k, h, w)`; channel mode rows `(k, c)`.
pub fn tokenize<F: Real>(
    g: &mut Graph<F>,
    p: &TokenParams,
    fused: &[Var],
    step: usize,
    max_steps: usize,
    mode: TokenMode,
) -> Result<Var> {
    if step >= max_steps {
        return Err(Error::StepOutOfRange { step, max: max_steps - 1 });
    }
    let (c, h, w) = g.value(fused[0]).dims3();
    let cells = h * w;
    let rows: Vec<Var> = fused
        .iter()
        .map(|&f| {
            let flat = g.reshape(f, &[c, cells]);
            match mode {
                TokenMode::Patch => g.transpose(flat),
                TokenMode::Channel => flat,
            }
        })
        .collect();
    let x = g.concat(&rows);
    let per_cam = match mode {
        TokenMode::Patch => cells,
        TokenMode::Channel => c,
    };
    let proj = g.param(p.proj);
    let x = g.matmul(x, proj);
    let (gm, bt) = (g.param(p.ln_gamma), g.param(p.ln_beta));
    let mut x = g.layer_norm(x, gm, bt, 1e-5);
    let cams: Vec<usize> = (0..fused.len()).flat_map(|k| std::iter::repeat_n(k, per_cam)).collect();
    let table = g.param(p.camera);
    let e_c = g.index_rows(table, &cams);
    x = g.add(x, e_c);
    if let (TokenMode::Patch, Some(loc)) = (mode, p.location) {
        let cells_idx: Vec<usize> = (0..fused.len()).flat_map(|_| 0..cells).collect();
        let table = g.param(loc);
        let e_l = g.index_rows(table, &cells_idx);
        x = g.add(x, e_l);
    }
    let table = g.param(p.step);
    let e_s = g.index_rows(table, &[step]);
    x = g.add_row(x, e_s);
    let e_t = g.param(p.kind);
    Ok(g.add_row(x, e_t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn encoder_output_is_sixteen_times_smaller() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::new(&mut store, &mut rng);
        for size in [32, 64] {
            let mut g = Graph::new(&store);
            let x = g.constant(init_normal(&mut rng, &[4, size, size], 1.0));
            let acts = unet_encode(&mut g, &p, x, 4, 0.02).unwrap();
            assert_eq!(g.shape(acts[5]), &[16, size / 16, size / 16]);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[4, 24, 32]));
        assert!(matches!(unet_encode(&mut g, &p, x, 4, 0.02), Err(Error::ImageSize(24, 32))));
    }

    #[test]
    fn zero_input_gives_zero_features() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = EncoderParams::new(&mut store, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros(&[4, 32, 32]));
        let acts = unet_encode(&mut g, &p, x, 4, 0.02).unwrap();
        assert!(g.value(acts[5]).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tokens_reduce_to_type_embedding() {
        let cfg = PolicyConfig { d_model: 8, heads: 2, ..PolicyConfig::default() };
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = TokenParams::new(&mut store, &mut rng, &cfg);
        for id in [p.proj, p.camera, p.step, p.location.unwrap()] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let u = store.get(p.kind).clone();
        let mut g = Graph::new(&store);
        let fused: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(&[19, 2, 2]))).collect();
        let tok = tokenize(&mut g, &p, &fused, 1, 6, TokenMode::Patch).unwrap();
        assert_eq!(g.shape(tok), &[12, 8]);
        for row in g.value(tok).data().chunks(8) {
            assert_eq!(row, u.data());
        }
        assert!(tokenize(&mut g, &p, &fused, 6, 6, TokenMode::Patch).is_err());
    }
}
