//! The policy network: instruction and visual tokens, the multimodal
//! transformer and the action heads, composed over an episode prefix.

pub mod head;
pub mod transformer;
pub mod visual;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PolicyConfig, TokenMode, FUSED_CHANNELS};
use crate::episode::{Action, Observation, IDENTITY_QUAT};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::instruction::{mean_language_embedding, EncoderSpec, TextEncoder};
use crate::params::{init_normal, init_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

use head::{DecoderParams, RotationParams, TaskParams};
use transformer::BlockParams;
use visual::{EncoderParams, TokenParams};

#[derive(Clone, Debug)]
pub struct TextParams {
    pub proj: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub kind: ParamId,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub text: TextParams,
    pub encoder: EncoderParams,
    /// Absent when the transformer is disabled.
    pub tokens: Option<TokenParams>,
    pub blocks: Vec<BlockParams>,
    /// Channel mode: maps each token back onto the `Hv x Wv` grid.
    pub back_proj: Option<ParamId>,
    pub decoder: DecoderParams,
    pub rotation: RotationParams,
    pub task: TaskParams,
}

impl Layout {
    fn new<F: Real>(store: &mut ParamStore<F>, cfg: &PolicyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.d_model;
        let text = TextParams {
            proj: store.add("text.proj", init_uniform(&mut rng, &[cfg.text_dim, d], cfg.text_dim, 1.0)),
            ln_gamma: store.add("text.ln.gamma", Tensor::full(&[d], F::one())),
            ln_beta: store.add("text.ln.beta", Tensor::zeros(&[d])),
            kind: store.add("text.type", init_normal(&mut rng, &[d], cfg.embed_std)),
        };
        let encoder = EncoderParams::new(store, &mut rng);
        let use_tf = cfg.layers > 0;
        let tokens = use_tf.then(|| TokenParams::new(store, &mut rng, cfg));
        let blocks = (0..cfg.layers)
            .map(|i| BlockParams::new(store, &mut rng, &format!("block.{i}"), d, d * cfg.ff_mult, cfg.attn_mode))
            .collect();
        let cells = cfg.grid() * cfg.grid();
        let back_proj = (use_tf && cfg.token_mode == TokenMode::Channel)
            .then(|| store.add("tok.back_proj", init_uniform(&mut rng, &[d, cells], d, 1.0)));
        let decoder = DecoderParams::new(store, &mut rng, cfg.decoder_channels());
        let rotation =
            RotationParams::new(store, &mut rng, cfg.num_cameras() * cfg.decoder_channels(), cfg.rot_channels);
        let feature_offset = (!cfg.instruction_offset).then_some(cfg.rot_channels);
        let task = TaskParams::new(store, &mut rng, cfg.text_dim, cfg.num_tasks, cfg.max_steps, feature_offset);
        Layout { text, encoder, tokens, blocks, back_proj, decoder, rotation, task }
    }
}

/// Network outputs for one predicted step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub step: usize,
    /// `[1, 8]`: position, raw quaternion, open.
    pub action: Var,
    /// `[1, K*H*W]`
    pub heatmap: Var,
    pub expected: Var,
    pub offset: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// `[1, N_tasks]`
    pub task_logits: Var,
    pub steps: Vec<StepVars>,
}

/// Policy inputs shared by every step of an episode.
pub struct EncodedInstruction {
    pub raw: Tensor<f64>,
    pub mean: Vec<f64>,
}

#[derive(Clone)]
pub struct Policy<F: Real> {
    pub config: PolicyConfig,
    pub params: ParamStore<F>,
    pub layout: Layout,
    pub encoder_spec: EncoderSpec,
    encoder: Arc<dyn TextEncoder>,
}

impl<F: Real> std::fmt::Debug for Policy<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Policy").field("config", &self.config).field("params", &self.params.num_scalars()).finish()
    }
}

/// Raw and executable forms of one predicted action.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub raw: [f32; 8],
    pub action: Action,
    /// Set when the raw quaternion was too small to normalize.
    pub degenerate_rotation: bool,
}

/// Unit, sign-canonical quaternion and thresholded gripper state.
pub fn finalize_action(raw: [f32; 8]) -> Prediction {
    let q = [raw[3], raw[4], raw[5], raw[6]];
    let n = q.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
    let (quaternion, degenerate) = if n < 1e-8 || !n.is_finite() {
        (IDENTITY_QUAT, true)
    } else {
        let s = if q[0] < 0.0 { -1.0 } else { 1.0 };
        (q.map(|v| (f64::from(v) * s / n) as f32), false)
    };
    let open = if raw[7] >= 0.5 { 1.0 } else { 0.0 };
    Prediction {
        raw,
        action: Action { position: [raw[0], raw[1], raw[2]], quaternion, open },
        degenerate_rotation: degenerate,
    }
}

impl<F: Real> Policy<F> {
    pub fn new(config: PolicyConfig, encoder_spec: EncoderSpec) -> Result<Self> {
        config.validate()?;
        if encoder_spec.dim() != config.text_dim {
            return Err(Error::config("text_dim", format!("encoder emits {} dims", encoder_spec.dim())));
        }
        let encoder: Arc<dyn TextEncoder> = Arc::from(encoder_spec.build()?);
        let mut params = ParamStore::new();
        let layout = Layout::new(&mut params, &config);
        Ok(Policy { config, params, layout, encoder_spec, encoder })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<G: Real>(&self) -> Policy<G> {
        Policy {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
            encoder_spec: self.encoder_spec.clone(),
            encoder: self.encoder.clone(),
        }
    }

    pub fn text_encoder(&self) -> &dyn TextEncoder {
        self.encoder.as_ref()
    }

    pub fn encode_text(&self, instruction: &str) -> Result<EncodedInstruction> {
        let raw = self.encoder.encode(instruction)?;
        let mean = mean_language_embedding(&raw);
        Ok(EncodedInstruction { raw, mean })
    }

    /// Projected instruction tokens `LN(x̃ W_x) + E_T`.
    pub fn instruction_tokens(&self, g: &mut Graph<F>, raw: &Tensor<f64>) -> Var {
        let p = &self.layout.text;
        let x = g.constant(raw.cast());
        let w = g.param(p.proj);
        let x = g.matmul(x, w);
        let (gm, bt) = (g.param(p.ln_gamma), g.param(p.ln_beta));
        let x = g.layer_norm(x, gm, bt, 1e-5);
        let t = g.param(p.kind);
        g.add_row(x, t)
    }

    /// Step index used for the step embedding and the offset table. Without
    /// history the policy is stateless and always sees step 0.
    pub fn step_index(&self, t: usize) -> usize {
        if self.config.use_history {
            t
        } else {
            0
        }
    }

    /// Builds the graph for predictions at `predict` steps of an episode
    /// prefix. `observations` hold every rig camera; the configured subset is
    /// selected here. `masks[i]` lists current-step token rows to zero for
    /// `predict[i]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        text: &EncodedInstruction,
        observations: &[Observation],
        predict: &[usize],
        masks: &[Vec<usize>],
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        let last = *predict.iter().max().ok_or_else(|| Error::Shape("no steps to predict".into()))?;
        if last >= observations.len() {
            return Err(Error::StepOutOfRange { step: last, max: observations.len().saturating_sub(1) });
        }
        if last >= cfg.max_steps {
            return Err(Error::StepOutOfRange { step: last, max: cfg.max_steps - 1 });
        }
        let slope = cfg.leaky_slope;
        let task_logits = head::task_logits(g, &self.layout.task, &text.mean);
        let probs = g.softmax(task_logits);
        let instr = self.instruction_tokens(g, &text.raw);

        // Encode every needed observation once.
        let history = cfg.use_history && cfg.layers > 0;
        let mut enc: Vec<Option<EncodedObservation<F>>> = (0..=last).map(|_| None).collect();
        for t in 0..=last {
            if !history && !predict.contains(&t) {
                continue;
            }
            let obs = observations[t].select_cameras(&cfg.cameras);
            if obs.height != cfg.image_size || obs.width != cfg.image_size {
                return Err(Error::ImageSize(obs.height, obs.width).at_step(t));
            }
            enc[t] = Some(self.encode_observation(g, &obs).map_err(|e| e.at_step(t))?);
        }
        let enc: Vec<EncodedObservation<F>> = enc.into_iter().map(|e| e.unwrap_or_default()).collect();

        let mut tokens: Vec<Option<Var>> = vec![None; enc.len()];
        let mut steps = Vec::with_capacity(predict.len());
        for (pi, &t) in predict.iter().enumerate() {
            let ts = self.step_index(t);
            let token_map = if let Some(tp) = &self.layout.tokens {
                if cfg.use_history {
                    for s in 0..t {
                        if tokens[s].is_none() {
                            tokens[s] = Some(visual::tokenize(g, tp, &enc[s].fused, s, cfg.max_steps, cfg.token_mode)?);
                        }
                    }
                }
                let mut cur = visual::tokenize(g, tp, &enc[t].fused, ts, cfg.max_steps, cfg.token_mode)
                    .map_err(|e| e.at_step(t))?;
                if let Some(m) = masks.get(pi).filter(|m| !m.is_empty()) {
                    let (rows, d) = g.value(cur).dims2();
                    let mut keep = vec![F::one(); rows * d];
                    for &r in m.iter().filter(|&&r| r < rows) {
                        keep[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = F::zero());
                    }
                    cur = g.mul_const(cur, keep);
                }
                let mut ctx_parts = vec![instr];
                if cfg.use_history {
                    ctx_parts.extend((0..t).map(|s| tokens[s].expect("history tokens built above")));
                }
                let ctx = if ctx_parts.len() == 1 { instr } else { g.concat(&ctx_parts) };
                let mut x = cur;
                for block in &self.layout.blocks {
                    x = transformer::encoder_block(g, block, x, ctx, cfg.heads);
                }
                self.token_maps(g, x)
            } else {
                let mean = g.mean_rows(instr);
                let col = g.transpose(mean);
                let cells = cfg.grid() * cfg.grid();
                let ones = g.constant(Tensor::full(&[1, cells], F::one()));
                let tiled = g.matmul(col, ones);
                let tiled = g.reshape(tiled, &[cfg.d_model, cfg.grid(), cfg.grid()]);
                vec![tiled; cfg.num_cameras()]
            };

            let mut logits = Vec::with_capacity(cfg.num_cameras());
            let mut dec_inputs = Vec::with_capacity(cfg.num_cameras());
            for (k, &tm) in token_map.iter().enumerate() {
                let e = &enc[t];
                let input = g.concat(&[tm, e.acts[k * 6 + 5]]);
                dec_inputs.push(input);
                logits.push(head::decode_logits(g, &self.layout.decoder, input, &e.acts[k * 6..k * 6 + 6], slope)?);
            }
            let heatmap = head::normalize_heatmaps(g, &logits, cfg.heatmap_norm);
            let expected = head::expected_position(g, heatmap, enc[t].pcd.clone());
            let rot_in = g.concat(&dec_inputs);
            let (rot, pooled) = head::rotation_head(g, &self.layout.rotation, rot_in, cfg.groups, slope);
            let offset = match self.layout.task.feature_offset {
                Some((w, b)) => {
                    let (w, b) = (g.param(w), g.param(b));
                    let o = g.matmul(pooled, w);
                    g.add_row(o, b)
                }
                None => head::predict_offset(g, &self.layout.task, probs, ts, cfg.max_steps)?,
            };
            let position = g.add(expected, offset);
            let action = g.concat_cols(&[position, rot]);
            steps.push(StepVars { step: t, action, heatmap, expected, offset });
        }
        Ok(ForwardVars { task_logits, steps })
    }

    /// Transformer outputs laid back onto per-camera `[C, Hv, Wv]` grids.
    fn token_maps(&self, g: &mut Graph<F>, x: Var) -> Vec<Var> {
        let cfg = &self.config;
        let (gh, cells) = (cfg.grid(), cfg.grid() * cfg.grid());
        (0..cfg.num_cameras())
            .map(|k| match cfg.token_mode {
                TokenMode::Patch => {
                    let rows = g.slice_rows(x, k * cells, (k + 1) * cells);
                    let t = g.transpose(rows);
                    g.reshape(t, &[cfg.d_model, gh, gh])
                }
                TokenMode::Channel => {
                    let rows = g.slice_rows(x, k * FUSED_CHANNELS, (k + 1) * FUSED_CHANNELS);
                    let back = g.param(self.layout.back_proj.expect("channel mode has a back projection"));
                    let m = g.matmul(rows, back);
                    g.reshape(m, &[FUSED_CHANNELS, gh, gh])
                }
            })
            .collect()
    }

    fn encode_observation(&self, g: &mut Graph<F>, obs: &Observation) -> Result<EncodedObservation<F>> {
        let cfg = &self.config;
        let (h, w) = (obs.height, obs.width);
        let zeros = vec![0.0f32; h * w];
        let mut acts = Vec::with_capacity(6 * obs.cameras);
        let mut fused = Vec::with_capacity(obs.cameras);
        let mut pcd = Vec::with_capacity(obs.cameras * h * w * 3);
        for k in 0..obs.cameras {
            let grip = if cfg.use_gripper_map { obs.gripper_map_of(k) } else { &zeros };
            let x = g.constant(visual::encoder_input(obs.rgb_of(k), grip, h, w)?);
            let a = visual::unet_encode(g, &self.layout.encoder, x, cfg.groups, cfg.leaky_slope)?;
            let pooled = if cfg.use_pointcloud {
                visual::pooled_pointcloud(obs.pcd_of(k), h, w)
            } else {
                Tensor::zeros(&[3, h / 16, w / 16])
            };
            fused.push(visual::fuse_pointcloud(g, a[5], pooled)?);
            acts.extend(a);
            pcd.extend(obs.pcd_of(k).iter().map(|&v| F::c(f64::from(v))));
        }
        Ok(EncodedObservation { acts, fused, pcd: Tensor::new(&[obs.cameras * h * w, 3], pcd) })
    }

    /// Action for the last observation of an episode prefix.
    pub fn predict(&self, text: &EncodedInstruction, observations: &[Observation]) -> Result<Prediction> {
        let t = observations.len().checked_sub(1).ok_or_else(|| Error::Shape("empty episode prefix".into()))?;
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, text, observations, &[t], &[])?;
        let v = g.value(out.steps[0].action).data();
        let mut raw = [0f32; 8];
        for (r, x) in raw.iter_mut().zip(v) {
            *r = x.f64() as f32;
        }
        Ok(finalize_action(raw))
    }
}

/// Per-camera encoder activations (six per camera, camera-major), fused
/// maps and the stacked point cloud of one observation.
struct EncodedObservation<F: Real> {
    acts: Vec<Var>,
    fused: Vec<Var>,
    pcd: Tensor<F>,
}

impl<F: Real> Default for EncodedObservation<F> {
    fn default() -> Self {
        EncodedObservation { acts: Vec::new(), fused: Vec::new(), pcd: Tensor::zeros(&[0, 3]) }
    }
}
