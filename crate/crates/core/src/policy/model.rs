use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::grad::{GradVector, Layout, NodeId, ParamVector, SegmentId, SegmentKind, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    /// History length `K`.
    pub context: usize,
    /// Prompt length `K*`.
    pub prompt_len: usize,
    pub dropout: f64,
    /// Multiplier applied to returns-to-go before embedding.
    pub rtg_scale: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            state_dim: 4,
            action_dim: 2,
            embed: 64,
            layers: 2,
            heads: 2,
            context: 20,
            prompt_len: 5,
            dropout: 0.1,
            rtg_scale: 0.1,
        }
    }
}

impl DtConfig {
    /// Triplet slots per sequence, `K* + K`.
    pub fn slots(&self) -> usize {
        self.prompt_len + self.context
    }

    /// Tokens per sequence, `3(K* + K)`.
    pub fn tokens(&self) -> usize {
        3 * self.slots()
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.action_dim == 0 {
            return Err(Error::config("state and action dimensions must be positive"));
        }
        if self.embed == 0 || self.heads == 0 || self.embed % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding width {} must be a positive multiple of heads {}",
                self.embed, self.heads
            )));
        }
        if self.context == 0 {
            return Err(Error::config("context length must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.rtg_scale.is_finite() {
            return Err(Error::config("rtg scale must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Affine {
    w: SegmentId,
    b: SegmentId,
}

#[derive(Debug, Clone)]
struct Norm {
    g: SegmentId,
    b: SegmentId,
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln2: Norm,
    fc: Affine,
    proj: Affine,
}

/// Prompt-conditioned decision transformer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct DtModel {
    pub config: DtConfig,
    layout: Layout,
    emb_rtg: Affine,
    emb_state: Affine,
    emb_action: Affine,
    pos: SegmentId,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Affine,
}

fn affine(l: &mut Layout, name: &str, fan_in: usize, fan_out: usize) -> Affine {
    Affine {
        w: l.push(format!("{name}.w"), fan_in, fan_out, SegmentKind::LinearWeight),
        b: l.push(format!("{name}.b"), 1, fan_out, SegmentKind::Bias),
    }
}

fn norm(l: &mut Layout, name: &str, d: usize) -> Norm {
    Norm {
        g: l.push(format!("{name}.g"), 1, d, SegmentKind::NormScale),
        b: l.push(format!("{name}.b"), 1, d, SegmentKind::Bias),
    }
}

impl DtModel {
    pub fn new(config: DtConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed;
        let mut l = Layout::new();
        let emb_rtg = affine(&mut l, "embed.rtg", 1, d);
        let emb_state = affine(&mut l, "embed.state", config.state_dim, d);
        let emb_action = affine(&mut l, "embed.action", config.action_dim, d);
        let pos = l.push("embed.pos", config.tokens(), d, SegmentKind::Embedding);
        let blocks = (0..config.layers)
            .map(|i| Block {
                ln1: norm(&mut l, &format!("block{i}.ln1"), d),
                q: affine(&mut l, &format!("block{i}.attn.q"), d, d),
                k: affine(&mut l, &format!("block{i}.attn.k"), d, d),
                v: affine(&mut l, &format!("block{i}.attn.v"), d, d),
                o: affine(&mut l, &format!("block{i}.attn.o"), d, d),
                ln2: norm(&mut l, &format!("block{i}.ln2"), d),
                fc: affine(&mut l, &format!("block{i}.mlp.fc"), d, 4 * d),
                proj: affine(&mut l, &format!("block{i}.mlp.proj"), 4 * d, d),
            })
            .collect();
        let ln_f = norm(&mut l, "ln_f", d);
        let head = affine(&mut l, "head.action", d, config.action_dim);
        Ok(Self {
            config,
            layout: l,
            emb_rtg,
            emb_state,
            emb_action,
            pos,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len()
    }

    /// Weights uniform in `±1/√fan_in`, positions in `±0.02`, norm scales 1,
    /// biases 0.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamVector::zeros(self.layout.clone());
        for seg in self.layout.segments() {
            let vals = &mut p.values_mut()[seg.range()];
            match seg.kind {
                SegmentKind::LinearWeight => {
                    let a = 1.0 / (seg.fan_in as f64).sqrt();
                    vals.iter_mut().for_each(|v| *v = rng.gen_range(-a..a));
                }
                SegmentKind::Embedding => {
                    vals.iter_mut().for_each(|v| *v = rng.gen_range(-0.02..0.02));
                }
                SegmentKind::NormScale => vals.iter_mut().for_each(|v| *v = 1.0),
                SegmentKind::Bias => {}
            }
        }
        p
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.layout() != &self.layout {
            return Err(Error::config("parameter layout does not match the model"));
        }
        Ok(())
    }

    fn node(&self, tape: &mut Tape, p: &ParamVector, id: SegmentId) -> Result<NodeId> {
        tape.param(p, self.layout.segment(id))
    }

    fn apply_affine(&self, tape: &mut Tape, p: &ParamVector, x: NodeId, a: &Affine) -> Result<NodeId> {
        let w = self.node(tape, p, a.w)?;
        let b = self.node(tape, p, a.b)?;
        tape.affine(x, w, b)
    }

    fn apply_norm(&self, tape: &mut Tape, p: &ParamVector, x: NodeId, n: &Norm) -> Result<NodeId> {
        let g = self.node(tape, p, n.g)?;
        let b = self.node(tape, p, n.b)?;
        tape.layer_norm(x, g, b)
    }

    /// Predicted actions `[batch·K, action_dim]`, read from the state token of
    /// each history slot.
    pub fn forward(&self, tape: &mut Tape, params: &ParamVector, batch: &TrajectoryBatch) -> Result<NodeId> {
        self.check(params)?;
        let cfg = &self.config;
        let (n, slots, t) = (batch.len(), cfg.slots(), cfg.tokens());
        if n == 0 {
            return Err(Error::config("empty batch"));
        }
        let rows = n * slots;
        let rtg = tape.input(Tensor::new(rows, 1, batch.rtg.clone())?);
        let states = tape.input(Tensor::new(rows, cfg.state_dim, batch.states.clone())?);
        let actions = tape.input(Tensor::new(rows, cfg.action_dim, batch.actions.clone())?);
        let r = self.apply_affine(tape, params, rtg, &self.emb_rtg)?;
        let s = self.apply_affine(tape, params, states, &self.emb_state)?;
        let a = self.apply_affine(tape, params, actions, &self.emb_action)?;
        let x = tape.interleave_rows(&[r, s, a])?;
        let pos = self.node(tape, params, self.pos)?;
        let x = tape.add_positional(x, pos)?;
        let mut x = tape.dropout(x, cfg.dropout);

        let key_valid: Vec<bool> = batch.valid.iter().flat_map(|&v| [v, v, v]).collect();
        for blk in &self.blocks {
            let h = self.apply_norm(tape, params, x, &blk.ln1)?;
            let q = self.apply_affine(tape, params, h, &blk.q)?;
            let k = self.apply_affine(tape, params, h, &blk.k)?;
            let v = self.apply_affine(tape, params, h, &blk.v)?;
            let att = tape.causal_attention(q, k, v, n, t, cfg.heads, key_valid.clone())?;
            let o = self.apply_affine(tape, params, att, &blk.o)?;
            let o = tape.dropout(o, cfg.dropout);
            x = tape.add(x, o)?;
            let h = self.apply_norm(tape, params, x, &blk.ln2)?;
            let f = self.apply_affine(tape, params, h, &blk.fc)?;
            let f = tape.relu(f);
            let f = self.apply_affine(tape, params, f, &blk.proj)?;
            let f = tape.dropout(f, cfg.dropout);
            x = tape.add(x, f)?;
        }
        let x = self.apply_norm(tape, params, x, &self.ln_f)?;
        let state_rows = (0..n)
            .flat_map(|b| (0..cfg.context).map(move |p| b * t + 3 * (cfg.prompt_len + p) + 1))
            .collect();
        let h = tape.gather_rows(x, state_rows)?;
        let y = self.apply_affine(tape, params, h, &self.head)?;
        Ok(tape.tanh(y))
    }

    /// Squared action error summed over action dimensions and averaged over
    /// unpadded history positions of the batch, evaluated at `θ ⊙ M`.
    pub fn dt_loss(&self, tape: &mut Tape, params: &ParamVector, mask: &[bool], batch: &TrajectoryBatch) -> Result<NodeId> {
        let masked = params.masked(mask)?;
        let pred = self.forward(tape, &masked, batch)?;
        let target = Tensor::new(batch.len() * self.config.context, self.config.action_dim, batch.targets.clone())?;
        tape.mse(pred, &target, &batch.weights)
    }

    /// Loss and `∇L(θ ⊙ M) ⊙ M`. `dropout_seed` of `None` runs without dropout.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        mask: &[bool],
        batch: &TrajectoryBatch,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, GradVector)> {
        let mut tape = match dropout_seed {
            Some(s) if self.config.dropout > 0.0 => Tape::new(s),
            _ => Tape::eval(),
        };
        let loss = self.dt_loss(&mut tape, params, mask, batch)?;
        let mut grad = tape.backward(loss)?;
        grad.apply_mask(mask);
        Ok((tape.scalar(loss), grad))
    }

    /// Action predictions for every history slot, without dropout.
    pub fn predict(&self, params: &ParamVector, batch: &TrajectoryBatch) -> Result<Tensor> {
        let mut tape = Tape::eval();
        let y = self.forward(&mut tape, params, batch)?;
        Ok(tape.value(y).clone())
    }
}
