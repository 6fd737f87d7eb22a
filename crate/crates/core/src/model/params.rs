//! Parameter trees, generic over the leaf type so the same layout holds
//! plain tensors, tape variables, gradients, or optimizer moments.

use crate::error::Result;
use crate::lsm::{GateSet, GateShape, Instance};
use crate::moe::MoeLayer;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::{LayerKind, ModelConfig};

/// Multi-head LSM token mixer.
#[derive(Clone, Debug)]
pub struct LsmMixer<T> {
    /// `hidden × hidden` each; head `h` owns columns `h·d..(h+1)·d`.
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    /// `hidden × hidden`; head `h` owns rows `h·d..(h+1)·d`.
    pub w_o: T,
    /// Per-token gate projections, `hidden × (heads·width)`.
    pub gate_w: GateSet<T>,
    /// Matching `1 × (heads·width)` biases.
    pub gate_b: GateSet<T>,
    /// Time-invariant gates, one tensor per head.
    pub statics: GateSet<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct AttentionMixer<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub w_o: T,
}

#[derive(Clone, Debug)]
pub enum Mixer<T> {
    Lsm(LsmMixer<T>),
    Attention(AttentionMixer<T>),
}

/// Pre-norm → mixer → residual → pre-norm → MoE → residual.
#[derive(Clone, Debug)]
pub struct Block<T> {
    /// `1 × hidden` RMS-norm gain.
    pub norm_mixer: T,
    pub mixer: Mixer<T>,
    pub norm_moe: T,
    pub moe: MoeLayer<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    /// `vocab × hidden`.
    pub embed: T,
    pub blocks: Vec<Block<T>>,
    pub norm_final: T,
    /// `hidden × vocab`; `None` when the head is tied to `embed`.
    pub head: Option<T>,
}

fn visit_gates<'a, T>(g: &'a GateSet<T>, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
    for (name, t) in g.fields() {
        if let Some(t) = t {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

impl<T> LsmMixer<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        visit_gates(&self.gate_w, &format!("{prefix}.gate_w"), f);
        visit_gates(&self.gate_b, &format!("{prefix}.gate_b"), f);
        for (name, heads) in self.statics.fields() {
            for (h, t) in heads.into_iter().flatten().enumerate() {
                f(format!("{prefix}.static.{name}.{h}"), t);
            }
        }
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<LsmMixer<U>> {
        Ok(LsmMixer {
            w_q: f(&self.w_q)?,
            w_k: f(&self.w_k)?,
            w_v: f(&self.w_v)?,
            w_o: f(&self.w_o)?,
            gate_w: self.gate_w.map(&mut *f)?,
            gate_b: self.gate_b.map(&mut *f)?,
            statics: self.statics.map(|v| v.iter().map(&mut *f).collect::<Result<Vec<_>>>())?,
        })
    }
}

impl<T> AttentionMixer<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<AttentionMixer<U>> {
        Ok(AttentionMixer { w_q: f(&self.w_q)?, w_k: f(&self.w_k)?, w_v: f(&self.w_v)?, w_o: f(&self.w_o)? })
    }
}

impl<T> Block<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.norm_mixer"), &self.norm_mixer);
        match &self.mixer {
            Mixer::Lsm(m) => m.visit(&format!("{prefix}.lsm"), f),
            Mixer::Attention(m) => m.visit(&format!("{prefix}.attn"), f),
        }
        f(format!("{prefix}.norm_moe"), &self.norm_moe);
        self.moe.visit(&format!("{prefix}.moe"), f);
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<Block<U>> {
        Ok(Block {
            norm_mixer: f(&self.norm_mixer)?,
            mixer: match &self.mixer {
                Mixer::Lsm(m) => Mixer::Lsm(m.try_map(f)?),
                Mixer::Attention(m) => Mixer::Attention(m.try_map(f)?),
            },
            norm_moe: f(&self.norm_moe)?,
            moe: self.moe.try_map(f)?,
        })
    }
}

impl<T> Model<T> {
    /// Visits every parameter with a stable dotted name, in the same order
    /// as [`try_map`](Self::try_map).
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("embed".into(), &self.embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("norm_final".into(), &self.norm_final);
        if let Some(h) = &self.head {
            f("head".into(), h);
        }
    }

    pub fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<Model<U>> {
        Ok(Model {
            embed: f(&self.embed)?,
            blocks: self.blocks.iter().map(|b| b.try_map(f)).collect::<Result<_>>()?,
            norm_final: f(&self.norm_final)?,
            head: self.head.as_ref().map(&mut *f).transpose()?,
        })
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

impl Model<Tensor> {
    pub fn num_params(&self) -> usize {
        self.leaves().iter().map(|t| t.numel()).sum()
    }

    /// Parameters under `blocks.*.moe`.
    pub fn expert_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if name.contains(".moe.") {
                n += t.numel();
            }
        });
        n
    }

    /// Rebuilds a model with the same layout from tensors in visit order.
    pub fn with_leaves(&self, leaves: Vec<Tensor>) -> Result<Self> {
        let mut it = leaves.into_iter();
        let out = self.try_map(&mut |old| {
            let t = it.next().ok_or_else(|| crate::Error::Format("too few tensors".into()))?;
            if t.shape() != old.shape() {
                return Err(crate::Error::shape("with_leaves", old.shape(), t.shape()));
            }
            Ok(t)
        })?;
        if it.next().is_some() {
            return Err(crate::Error::Format("too many tensors".into()));
        }
        Ok(out)
    }
}

/// Pre-activation bias that puts each gate in a sensible starting regime:
/// decays near 0.95, SSM steps near 0.13, rates at 0.5.
fn gate_bias(instance: Instance, field: &str) -> f64 {
    match (instance, field) {
        (Instance::Rwkv6 | Instance::Rwkv7, "decay") => -3.0,
        (Instance::Mamba, "decay") | (Instance::Mamba2, "rate") => -2.0,
        (_, "decay") | (_, "decay_col") => 3.0,
        _ => 0.0,
    }
}

fn init_lsm(cfg: &ModelConfig, rng: &mut Rng) -> LsmMixer<Tensor> {
    let (h, heads) = (cfg.hidden, cfg.num_heads);
    let s = 1.0 / (h as f64).sqrt();
    let w = |rng: &mut Rng| Tensor::randn(&[h, h], s, rng);
    let (w_q, w_k, w_v, w_o) = (w(rng), w(rng), w(rng), w(rng));
    let layout = cfg.lsm.gate_layout();
    let shapes = [layout.decay, layout.decay_col, layout.rate, layout.step, layout.input, layout.transition];
    let names = ["decay", "decay_col", "rate", "step", "input", "transition"];
    let mut gw: [Option<Tensor>; 6] = Default::default();
    let mut gb: [Option<Tensor>; 6] = Default::default();
    let mut st: [Option<Vec<Tensor>>; 6] = Default::default();
    for i in 0..6 {
        match shapes[i] {
            Some(GateShape::PerToken(width)) => {
                gw[i] = Some(Tensor::randn(&[h, heads * width], 0.1 * s, rng));
                gb[i] = Some(Tensor::full(&[1, heads * width], gate_bias(cfg.lsm.instance, names[i])));
            }
            Some(GateShape::Static(r, c)) => {
                let per_head = (0..heads)
                    .map(|_| match names[i] {
                        "step" => Tensor::uniform(&[r, c], -2.5, -1.5, rng),
                        "input" => Tensor::randn(&[r, c], 1.0, rng),
                        _ => Tensor::uniform(&[r, c], -0.5, 0.5, rng),
                    })
                    .collect();
                st[i] = Some(per_head);
            }
            None => {}
        }
    }
    let set = |a: [Option<Tensor>; 6]| {
        let [decay, decay_col, rate, step, input, transition] = a;
        GateSet { decay, decay_col, rate, step, input, transition }
    };
    let [decay, decay_col, rate, step, input, transition] = st;
    LsmMixer {
        w_q,
        w_k,
        w_v,
        w_o,
        gate_w: set(gw),
        gate_b: set(gb),
        statics: GateSet { decay, decay_col, rate, step, input, transition },
    }
}

/// Random initialization for `cfg`, deterministic in `rng`.
pub fn build_model(cfg: &ModelConfig, rng: &mut Rng) -> Result<Model<Tensor>> {
    cfg.validate()?;
    let h = cfg.hidden;
    let s = 1.0 / (h as f64).sqrt();
    let embed = Tensor::randn(&[cfg.vocab_size, h], s, rng);
    let moe_cfg = cfg.moe();
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for kind in cfg.pattern.layers() {
        let mixer = match kind {
            LayerKind::Lsm => Mixer::Lsm(init_lsm(cfg, rng)),
            LayerKind::Attention => Mixer::Attention(AttentionMixer {
                w_q: Tensor::randn(&[h, h], s, rng),
                w_k: Tensor::randn(&[h, h], s, rng),
                w_v: Tensor::randn(&[h, h], s, rng),
                w_o: Tensor::randn(&[h, h], s, rng),
            }),
        };
        blocks.push(Block {
            norm_mixer: Tensor::ones(&[1, h]),
            mixer,
            norm_moe: Tensor::ones(&[1, h]),
            moe: MoeLayer::init(&moe_cfg, rng)?,
        });
    }
    let head = (!cfg.tie_embeddings).then(|| Tensor::randn(&[h, cfg.vocab_size], s, rng));
    Ok(Model { embed, blocks, norm_final: Tensor::ones(&[1, h]), head })
}
