//! Token-by-token evaluation in plain `f64`: the reference every other form
//! is checked against.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softplus, L2_FLOOR};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::spec::{feature_map, GateSet, GateShape, Instance, LsmSpec};

/// Normalizer denominators smaller than this in magnitude are rejected.
pub const NORMALIZER_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    /// `d_k × d_v`.
    pub m: Tensor,
    /// Length `d_k`, present when the spec uses the normalizer.
    pub z: Option<Vec<f64>>,
    pub step: usize,
}

impl MemoryState {
    pub fn new(spec: &LsmSpec) -> Self {
        Self {
            m: Tensor::zeros(&[spec.d_k, spec.d_v]),
            z: spec.use_normalizer.then(|| vec![0.0; spec.d_k]),
            step: 0,
        }
    }

    /// State elements held between tokens, independent of sequence length.
    pub fn elements(&self) -> usize {
        self.m.numel() + self.z.as_ref().map_or(0, Vec::len)
    }

    /// `[M | z]` as one `d_k × (d_v + 1)` matrix, or `M` alone.
    pub fn augmented(&self) -> Tensor {
        match &self.z {
            None => self.m.clone(),
            Some(z) => Tensor::concat_cols(&[self.m.clone(), Tensor::new(&[z.len(), 1], z.clone()).expect("column")])
                .expect("matching rows"),
        }
    }

    pub fn from_augmented(aug: &Tensor, spec: &LsmSpec, step: usize) -> Result<Self> {
        let (r, c) = aug.dims2()?;
        let want = spec.d_v + usize::from(spec.use_normalizer);
        if r != spec.d_k || c != want {
            return Err(Error::shape("from_augmented", aug.shape(), &[spec.d_k, want]));
        }
        Ok(Self {
            m: aug.slice_cols(0, spec.d_v)?,
            z: spec.use_normalizer.then(|| aug.slice_cols(spec.d_v, c).expect("in range").into_data()),
            step,
        })
    }
}

/// Inputs of a single token.
#[derive(Clone, Debug)]
pub struct StepInputs {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Row `s` of each per-token gate and the whole of each static one.
    pub gates: GateSet<Vec<f64>>,
}

/// Inputs of one head over a sequence: `q, k` are `N×d_k`, `v` is `N×d_v`,
/// gate shapes follow [`LsmSpec::gate_layout`].
#[derive(Clone, Debug)]
pub struct LsmInputs {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub gates: GateSet<Tensor>,
}

impl LsmInputs {
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws every input uniformly from `[−1, 1]`.
    pub fn random(spec: &LsmSpec, n: usize, rng: &mut Rng) -> Self {
        let mut u = |r, c| Tensor::uniform(&[r, c], -1.0, 1.0, rng);
        let q = u(n, spec.d_k);
        let k = u(n, spec.d_k);
        let v = u(n, spec.d_v);
        let layout = spec.gate_layout();
        let mut draw = |s: Option<GateShape>| {
            s.map(|s| match s {
                GateShape::PerToken(w) => u(n, w),
                GateShape::Static(r, c) => u(r, c),
            })
        };
        let gates = GateSet {
            decay: draw(layout.decay),
            decay_col: draw(layout.decay_col),
            rate: draw(layout.rate),
            step: draw(layout.step),
            input: draw(layout.input),
            transition: draw(layout.transition),
        };
        Self { q, k, v, gates }
    }

    pub fn validate(&self, spec: &LsmSpec) -> Result<()> {
        spec.validate()?;
        let n = self.q.rows();
        if n == 0 {
            return Err(Error::invalid("lsm_forward", "empty sequence"));
        }
        for (name, t, w) in [("q", &self.q, spec.d_k), ("k", &self.k, spec.d_k), ("v", &self.v, spec.d_v)] {
            if t.dims2()? != (n, w) {
                return Err(Error::invalid("lsm_forward", format!("{name} has shape {:?}, expected [{n}, {w}]", t.shape())));
            }
        }
        let layout = spec.gate_layout();
        let expected = [layout.decay, layout.decay_col, layout.rate, layout.step, layout.input, layout.transition];
        for ((name, got), want) in self.gates.fields().into_iter().zip(expected) {
            match (got, want) {
                (None, None) => {}
                (Some(t), Some(shape)) => {
                    let dims = match shape {
                        GateShape::PerToken(w) => (n, w),
                        GateShape::Static(r, c) => (r, c),
                    };
                    if t.dims2()? != dims {
                        return Err(Error::invalid(
                            "lsm_forward",
                            format!("{}: gate `{name}` has shape {:?}, expected {dims:?}", spec.instance, t.shape()),
                        ));
                    }
                }
                (Some(_), None) => {
                    return Err(Error::invalid("lsm_forward", format!("{}: unexpected gate `{name}`", spec.instance)))
                }
                (None, Some(_)) => {
                    return Err(Error::invalid("lsm_forward", format!("{}: missing gate `{name}`", spec.instance)))
                }
            }
        }
        Ok(())
    }

    pub fn step(&self, s: usize, spec: &LsmSpec) -> StepInputs {
        let layout = spec.gate_layout();
        let pick = |t: &Option<Tensor>, shape: Option<GateShape>| {
            t.as_ref().map(|t| match shape {
                Some(GateShape::PerToken(_)) => t.row_slice(s).to_vec(),
                _ => t.data().to_vec(),
            })
        };
        StepInputs {
            q: self.q.row_slice(s).to_vec(),
            k: self.k.row_slice(s).to_vec(),
            v: self.v.row_slice(s).to_vec(),
            gates: GateSet {
                decay: pick(&self.gates.decay, layout.decay),
                decay_col: pick(&self.gates.decay_col, layout.decay_col),
                rate: pick(&self.gates.rate, layout.rate),
                step: pick(&self.gates.step, layout.step),
                input: pick(&self.gates.input, layout.input),
                transition: pick(&self.gates.transition, layout.transition),
            },
        }
    }

    /// Rows `start..end` of every per-token tensor; static gates are shared.
    pub fn slice(&self, start: usize, end: usize, spec: &LsmSpec) -> Result<Self> {
        let layout = spec.gate_layout();
        let cut = |t: &Option<Tensor>, shape: Option<GateShape>| -> Result<Option<Tensor>> {
            match (t, shape) {
                (Some(t), Some(GateShape::PerToken(_))) => Ok(Some(t.slice_rows(start, end)?)),
                (t, _) => Ok(t.clone()),
            }
        };
        Ok(Self {
            q: self.q.slice_rows(start, end)?,
            k: self.k.slice_rows(start, end)?,
            v: self.v.slice_rows(start, end)?,
            gates: GateSet {
                decay: cut(&self.gates.decay, layout.decay)?,
                decay_col: cut(&self.gates.decay_col, layout.decay_col)?,
                rate: cut(&self.gates.rate, layout.rate)?,
                step: cut(&self.gates.step, layout.step)?,
                input: cut(&self.gates.input, layout.input)?,
                transition: cut(&self.gates.transition, layout.transition)?,
            },
        })
    }
}

fn gate<'a>(g: &'a Option<Vec<f64>>, name: &str, inst: Instance) -> Result<&'a [f64]> {
    g.as_deref()
        .ok_or_else(|| Error::invalid("recurrent_step", format!("{inst}: missing gate `{name}`")))
}

fn l2_normalize(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_FLOOR);
    x.iter().map(|v| v / n).collect()
}

fn neg_exp_exp(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| (-v.exp()).exp()).collect()
}

/// Advances one token and returns the new state with `o_s`.
pub fn recurrent_step(state: &MemoryState, inp: &StepInputs, spec: &LsmSpec) -> Result<(MemoryState, Vec<f64>)> {
    let inst = spec.instance;
    let (dk, dv) = (spec.d_k, spec.d_v);
    if state.m.dims2()? != (dk, dv) || inp.q.len() != dk || inp.k.len() != dk || inp.v.len() != dv {
        return Err(Error::invalid("recurrent_step", format!("{inst}: input dims do not match d_k={dk}, d_v={dv}")));
    }
    if state.z.is_some() != spec.use_normalizer {
        return Err(Error::invalid("recurrent_step", format!("{inst}: state normalizer does not match spec")));
    }
    spec.validate()?;
    let g = &inp.gates;
    let w = dv + usize::from(spec.use_normalizer);
    // Work on [M | z] with value row [v | 1] so z follows M's decay exactly.
    let mut m = vec![0.0; dk * w];
    for i in 0..dk {
        m[i * w..i * w + dv].copy_from_slice(state.m.row_slice(i));
        if let Some(z) = &state.z {
            m[i * w + dv] = z[i];
        }
    }
    let mut val = inp.v.clone();
    if spec.use_normalizer {
        val.push(1.0);
    }
    let phi_q = feature_map(&inp.q, spec.feature_map);
    let phi_k = feature_map(&inp.k, spec.feature_map);

    let decay_rows = |m: &mut [f64], a: &[f64]| {
        for i in 0..dk {
            for x in &mut m[i * w..(i + 1) * w] {
                *x *= a[i];
            }
        }
    };
    let add_outer = |m: &mut [f64], key: &[f64], row: &[f64], c: f64| {
        for i in 0..dk {
            for j in 0..w {
                m[i * w + j] += c * key[i] * row[j];
            }
        }
    };
    // M ← M − c·k̂ᵀ(k̂·M_prev) + c_w·k̂ᵀv, with the erase read off `prev`.
    let projection = |m: &mut [f64], prev: &[f64], khat: &[f64], erase: f64, write: f64| {
        let mut km = vec![0.0; w];
        for i in 0..dk {
            for j in 0..w {
                km[j] += khat[i] * prev[i * w + j];
            }
        }
        add_outer(m, khat, &km, -erase);
        add_outer(m, khat, &val, write);
    };

    match inst {
        Instance::Bla | Instance::Rebased => add_outer(&mut m, &phi_k, &val, 1.0),
        Instance::ScalarDecay(_) => {
            let a = spec.scalar_decay.unwrap_or(1.0);
            m.iter_mut().for_each(|x| *x *= a);
            add_outer(&mut m, &phi_k, &val, 1.0);
        }
        Instance::Gla | Instance::Rwkv6 => {
            let x = gate(&g.decay, "decay", inst)?;
            let a: Vec<f64> = if inst == Instance::Gla { x.iter().map(|&v| sigmoid(v)).collect() } else { neg_exp_exp(x) };
            decay_rows(&mut m, &a);
            add_outer(&mut m, &phi_k, &val, 1.0);
        }
        Instance::Hgrn2 => {
            let a: Vec<f64> = gate(&g.decay, "decay", inst)?.iter().map(|&v| sigmoid(v)).collect();
            decay_rows(&mut m, &a);
            let key: Vec<f64> = a.iter().map(|x| 1.0 - x).collect();
            add_outer(&mut m, &key, &val, 1.0);
        }
        Instance::Mamba2 => {
            let delta = softplus(gate(&g.rate, "rate", inst)?[0]);
            let a = gate(&g.transition, "transition", inst)?[0].exp();
            let decay = (-a * delta).exp();
            m.iter_mut().for_each(|x| *x *= decay);
            add_outer(&mut m, &phi_k, &val, delta);
        }
        Instance::OuterGate(_) => {
            let alpha: Vec<f64> = gate(&g.decay, "decay", inst)?.iter().map(|&v| sigmoid(v)).collect();
            let beta: Vec<f64> = gate(&g.decay_col, "decay_col", inst)?.iter().map(|&v| sigmoid(v)).collect();
            for i in 0..dk {
                for j in 0..dv {
                    m[i * w + j] *= alpha[i] * beta[j];
                }
            }
            add_outer(&mut m, &phi_k, &val, 1.0);
        }
        Instance::S4 | Instance::Mamba => {
            let (delta, key): (Vec<f64>, Vec<f64>) = if inst == Instance::S4 {
                let d: Vec<f64> = gate(&g.step, "step", inst)?.iter().map(|&v| softplus(v)).collect();
                let b = gate(&g.input, "input", inst)?;
                let key = d.iter().zip(b).map(|(d, b)| d * b).collect();
                (d, key)
            } else {
                let d: Vec<f64> = gate(&g.decay, "decay", inst)?.iter().map(|&v| softplus(v)).collect();
                let key = d.iter().zip(&phi_k).map(|(d, k)| d * k).collect();
                (d, key)
            };
            let a = gate(&g.transition, "transition", inst)?;
            for i in 0..dk {
                for j in 0..dv {
                    m[i * w + j] *= (-delta[i] * a[i * dv + j].exp()).exp();
                }
            }
            add_outer(&mut m, &key, &val, 1.0);
        }
        Instance::DeltaNet | Instance::GatedDeltaNet | Instance::Ttt | Instance::Titans | Instance::Rwkv7 => {
            let khat = l2_normalize(&phi_k);
            let prev = m.clone();
            let rate = sigmoid(gate(&g.rate, "rate", inst)?[0]);
            let (erase, write) = match inst {
                Instance::DeltaNet => (sigmoid(gate(&g.decay, "decay", inst)?[0]), rate),
                Instance::GatedDeltaNet => {
                    let a = sigmoid(gate(&g.decay, "decay", inst)?[0]);
                    m.iter_mut().for_each(|x| *x *= a);
                    (a, rate)
                }
                Instance::Titans => {
                    let a = sigmoid(gate(&g.decay, "decay", inst)?[0]);
                    m.iter_mut().for_each(|x| *x *= a);
                    (rate, rate)
                }
                Instance::Rwkv7 => {
                    decay_rows(&mut m, &neg_exp_exp(gate(&g.decay, "decay", inst)?));
                    (rate, rate)
                }
                _ => (rate, rate),
            };
            projection(&mut m, &prev, &khat, erase, write);
        }
    }

    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState { instance: inst.name().into() });
    }
    let mut out = vec![0.0; w];
    for i in 0..dk {
        for j in 0..w {
            out[j] += phi_q[i] * m[i * w + j];
        }
    }
    if spec.use_normalizer {
        let den = out[dv];
        if den.abs() < NORMALIZER_FLOOR {
            return Err(Error::DegenerateNormalizer { instance: inst.name().into(), value: den });
        }
        out.truncate(dv);
        out.iter_mut().for_each(|x| *x /= den);
    }
    let aug = Tensor::new(&[dk, w], m)?;
    Ok((MemoryState::from_augmented(&aug, spec, state.step + 1)?, out))
}

/// Folds [`recurrent_step`] from `init` over every token.
pub fn lsm_forward_sequential_from(inputs: &LsmInputs, spec: &LsmSpec, init: MemoryState) -> Result<(Tensor, MemoryState)> {
    inputs.validate(spec)?;
    let mut state = init;
    let mut out = Vec::with_capacity(inputs.len() * spec.d_v);
    for s in 0..inputs.len() {
        let (next, o) = recurrent_step(&state, &inputs.step(s, spec), spec)?;
        state = next;
        out.extend(o);
    }
    Ok((Tensor::new(&[inputs.len(), spec.d_v], out)?, state))
}

/// `N × d_v` outputs from the zero state.
pub fn lsm_forward_sequential(inputs: &LsmInputs, spec: &LsmSpec) -> Result<Tensor> {
    Ok(lsm_forward_sequential_from(inputs, spec, MemoryState::new(spec))?.0)
}
