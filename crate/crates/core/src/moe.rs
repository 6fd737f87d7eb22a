//! Sparse mixture-of-experts feed-forward layer.
//!
//! Routing takes the `top_k` largest router logits per token (ties go to the
//! lower expert id) and renormalizes a softmax over just those logits. No
//! token is ever dropped.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub aux_loss_weight: f64,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("moe: dims must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "moe: top_k must lie in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if !self.aux_loss_weight.is_finite() || self.aux_loss_weight < 0.0 {
            return Err(Error::Config("moe: aux_loss_weight must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// SwiGLU expert: `down(silu(x·gate) ⊙ (x·up))`.
#[derive(Clone, Debug)]
pub struct Expert<T> {
    /// `hidden × ffn_dim`.
    pub gate: T,
    /// `hidden × ffn_dim`.
    pub up: T,
    /// `ffn_dim × hidden`.
    pub down: T,
}

#[derive(Clone, Debug)]
pub struct MoeLayer<T> {
    /// `hidden × num_experts`.
    pub router: T,
    pub experts: Vec<Expert<T>>,
}

impl MoeLayer<Tensor> {
    pub fn init(cfg: &MoeConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (h, f) = (cfg.hidden, cfg.ffn_dim);
        let sh = 1.0 / (h as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let router = Tensor::randn(&[h, cfg.num_experts], sh, rng);
        let experts = (0..cfg.num_experts)
            .map(|_| Expert {
                gate: Tensor::randn(&[h, f], sh, rng),
                up: Tensor::randn(&[h, f], sh, rng),
                down: Tensor::randn(&[f, h], sf, rng),
            })
            .collect();
        Ok(Self { router, experts })
    }
}

impl<T> MoeLayer<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.router"), &self.router);
        for (e, x) in self.experts.iter().enumerate() {
            f(format!("{prefix}.experts.{e}.gate"), &x.gate);
            f(format!("{prefix}.experts.{e}.up"), &x.up);
            f(format!("{prefix}.experts.{e}.down"), &x.down);
        }
    }

    /// Same traversal order as [`visit`](Self::visit).
    pub fn try_map<U>(&self, f: &mut dyn FnMut(&T) -> Result<U>) -> Result<MoeLayer<U>> {
        let router = f(&self.router)?;
        let experts = self
            .experts
            .iter()
            .map(|x| Ok(Expert { gate: f(&x.gate)?, up: f(&x.up)?, down: f(&x.down)? }))
            .collect::<Result<_>>()?;
        Ok(MoeLayer { router, experts })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    /// `top_k` distinct expert ids per token, best first.
    pub experts: Vec<Vec<usize>>,
    /// Matching renormalized gate weights.
    pub gates: Vec<Vec<f64>>,
}

impl RoutingDecision {
    /// Fraction of all token slots assigned to each expert.
    pub fn fractions(&self, num_experts: usize) -> Vec<f64> {
        let mut f = vec![0.0; num_experts];
        let slots: usize = self.experts.iter().map(Vec::len).sum();
        for ids in &self.experts {
            for &e in ids {
                f[e] += 1.0;
            }
        }
        f.iter_mut().for_each(|x| *x /= slots.max(1) as f64);
        f
    }
}

/// Routes from precomputed `T × E` router logits.
pub fn route_logits(logits: &Tensor, top_k: usize) -> Result<RoutingDecision> {
    let (t, e) = logits.dims2()?;
    if top_k == 0 || top_k > e {
        return Err(Error::invalid("route", format!("top_k {top_k} outside 1..={e}")));
    }
    let mut experts = Vec::with_capacity(t);
    let mut gates = Vec::with_capacity(t);
    for i in 0..t {
        let row = logits.row_slice(i);
        let mut order: Vec<usize> = (0..e).collect();
        // Stable sort keeps the lower id first among equal logits.
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        order.truncate(top_k);
        let max = row[order[0]];
        let w: Vec<f64> = order.iter().map(|&j| (row[j] - max).exp()).collect();
        let total: f64 = w.iter().sum();
        gates.push(w.iter().map(|x| x / total).collect());
        experts.push(order);
    }
    Ok(RoutingDecision { experts, gates })
}

pub fn route(x: &Tensor, router: &Tensor, top_k: usize) -> Result<RoutingDecision> {
    route_logits(&x.matmul(router)?, top_k)
}

/// `E · Σ_e f_e · P_e` with `f` the slot fractions and `P` the mean router
/// probabilities (`router_probs` is `T × E`, rows summing to 1).
pub fn load_balance_loss(decision: &RoutingDecision, router_probs: &Tensor) -> Result<f64> {
    let (t, e) = router_probs.dims2()?;
    if decision.experts.len() != t {
        return Err(Error::shape("load_balance_loss", &[decision.experts.len()], router_probs.shape()));
    }
    let f = decision.fractions(e);
    let mut p = vec![0.0; e];
    for i in 0..t {
        for (pj, x) in p.iter_mut().zip(router_probs.row_slice(i)) {
            *pj += x / t as f64;
        }
    }
    Ok(e as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

pub fn expert_forward<'t>(x: Var<'t>, e: &Expert<Var<'t>>) -> Result<Var<'t>> {
    let g = x.matmul(e.gate)?.silu()?;
    g.mul(x.matmul(e.up)?)?.matmul(e.down)
}

/// Output of one MoE layer on the tape.
pub struct MoeOutput<'t> {
    pub y: Var<'t>,
    pub aux_loss: Var<'t>,
    pub decision: RoutingDecision,
}

/// Sparse dropless forward: each expert sees only the tokens routed to it.
pub fn moe_forward_var<'t>(tape: &'t Tape, x: Var<'t>, layer: &MoeLayer<Var<'t>>, cfg: &MoeConfig) -> Result<MoeOutput<'t>> {
    let (t, h) = x.value().dims2()?;
    if h != cfg.hidden || layer.experts.len() != cfg.num_experts {
        return Err(Error::shape("moe_forward", &[t, h], &[cfg.num_experts, cfg.hidden]));
    }
    let k = cfg.top_k;
    let logits = x.matmul(layer.router)?;
    let decision = route_logits(&logits.value(), k)?;
    let flat: Vec<usize> = decision.experts.iter().flatten().copied().collect();
    let gates = logits.gather_cols(&flat, k)?.softmax_rows()?.reshape(&[t * k, 1])?;

    let mut y: Option<Var<'t>> = None;
    for (e, expert) in layer.experts.iter().enumerate() {
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for (i, ids) in decision.experts.iter().enumerate() {
            if let Some(s) = ids.iter().position(|&j| j == e) {
                tokens.push(i);
                slots.push(i * k + s);
            }
        }
        if tokens.is_empty() {
            continue;
        }
        let out = expert_forward(x.gather_rows(&tokens)?, expert)?;
        let out = out.scale_rows(gates.gather_rows(&slots)?)?.scatter_add_rows(&tokens, t)?;
        y = Some(match y {
            None => out,
            Some(acc) => acc.add(out)?,
        });
    }
    let y = y.expect("every token reaches at least one expert");

    let probs = logits.softmax_rows()?;
    let mean_p = probs.sum_rows()?.scale(1.0 / t as f64)?;
    let f = tape.constant(Tensor::row(&decision.fractions(cfg.num_experts)));
    let aux_loss = mean_p.mul(f)?.sum()?.scale(cfg.num_experts as f64)?;
    Ok(MoeOutput { y, aux_loss, decision })
}

/// Plain-tensor wrapper around [`moe_forward_var`]: returns `(Y, aux_loss)`.
pub fn moe_forward(x: &Tensor, layer: &MoeLayer<Tensor>, cfg: &MoeConfig) -> Result<(Tensor, f64)> {
    cfg.validate()?;
    let tape = Tape::new();
    let bound = layer.try_map(&mut |w| Ok(tape.constant(w.clone())))?;
    let out = moe_forward_var(&tape, tape.constant(x.clone()), &bound, cfg)?;
    let y = (*out.y.value()).clone();
    Ok((y, out.aux_loss.item()?))
}

/// Dense reference: every expert runs on every token and is weighted by
/// its gate, zero when unselected.
pub fn moe_forward_dense(x: &Tensor, layer: &MoeLayer<Tensor>, top_k: usize) -> Result<Tensor> {
    let d = route(x, &layer.router, top_k)?;
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let (t, h) = x.dims2()?;
    let mut y = Tensor::zeros(&[t, h]);
    for (e, ex) in layer.experts.iter().enumerate() {
        let ex = bind_expert(&tape, ex);
        let all = expert_forward(xv, &ex)?.value();
        for i in 0..t {
            let w = d.experts[i].iter().position(|&j| j == e).map_or(0.0, |s| d.gates[i][s]);
            for c in 0..h {
                y.data_mut()[i * h + c] += w * all.at(i, c);
            }
        }
    }
    Ok(y)
}

fn bind_expert<'t>(tape: &'t Tape, ex: &Expert<Tensor>) -> Expert<Var<'t>> {
    Expert { gate: tape.constant(ex.gate.clone()), up: tape.constant(ex.up.clone()), down: tape.constant(ex.down.clone()) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;

    fn cfg(e: usize, k: usize) -> MoeConfig {
        MoeConfig { num_experts: e, top_k: k, hidden: 4, ffn_dim: 3, aux_loss_weight: 0.01 }
    }

    #[test]
    fn route_examples() {
        let d = route_logits(&Tensor::row(&[2.0, 1.0, 0.5, -1.0]), 2).unwrap();
        assert_eq!(d.experts[0], vec![0, 1]);
        assert!((d.gates[0][0] - 0.7311).abs() < 1e-4 && (d.gates[0][1] - 0.2689).abs() < 1e-4);

        let d = route_logits(&Tensor::row(&[0.3; 4]), 4).unwrap();
        assert_eq!(d.experts[0], vec![0, 1, 2, 3]);
        assert!(d.gates[0].iter().all(|g| (g - 0.25).abs() < 1e-15));

        let d = route_logits(&Tensor::row(&[0.1, 0.9, 0.9, -3.0]), 1).unwrap();
        assert_eq!(d.experts[0], vec![1]);
        assert_eq!(d.gates[0], vec![1.0]);
    }

    #[test]
    fn load_balance_examples() {
        let uniform = RoutingDecision { experts: vec![vec![0], vec![1], vec![2], vec![3]], gates: vec![vec![1.0]; 4] };
        let l = load_balance_loss(&uniform, &Tensor::full(&[4, 4], 0.25)).unwrap();
        assert!((l - 1.0).abs() < 1e-15);

        let one = RoutingDecision { experts: vec![vec![0]; 4], gates: vec![vec![1.0]; 4] };
        let mut p = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            p.data_mut()[i * 4] = 1.0 - 3e-9;
            for j in 1..4 {
                p.data_mut()[i * 4 + j] = 1e-9;
            }
        }
        assert!((load_balance_loss(&one, &p).unwrap() - 4.0).abs() < 1e-7);

        let single = RoutingDecision { experts: vec![vec![0]; 3], gates: vec![vec![1.0]; 3] };
        assert_eq!(load_balance_loss(&single, &Tensor::ones(&[3, 1])).unwrap(), 1.0);
    }

    /// The loss can fall below 1 when routing and probabilities disagree.
    #[test]
    fn load_balance_can_drop_below_one() {
        let d = RoutingDecision { experts: vec![vec![0], vec![0], vec![1]], gates: vec![vec![1.0]; 3] };
        let p = Tensor::from_rows(&[&[0.55, 0.45], &[0.55, 0.45], &[0.0, 1.0]]).unwrap();
        let l = load_balance_loss(&d, &p).unwrap();
        assert!((l - 0.9111111111111111).abs() < 1e-12 && l < 1.0);
    }

    #[test]
    fn load_balance_at_least_one_when_fractions_follow_probabilities() {
        let mut rng = Rng::seed(44);
        for _ in 0..50 {
            let e = 1 + rng.below(6);
            let x = Tensor::uniform(&[1, e], 0.0, 1.0, &mut rng);
            let total = x.sum();
            let p: Vec<f64> = x.data().iter().map(|v| v / total).collect();
            let loss = e as f64 * p.iter().map(|v| v * v).sum::<f64>();
            assert!(loss >= 1.0 - 1e-12);
        }
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let mut rng = Rng::seed(7);
        for e in [1, 4, 8] {
            for k in [1, 2, e] {
                if k > e {
                    continue;
                }
                let c = cfg(e, k);
                let layer = MoeLayer::init(&c, &mut rng).unwrap();
                let x = Tensor::uniform(&[16, 4], -1.0, 1.0, &mut rng);
                let (y, aux) = moe_forward(&x, &layer, &c).unwrap();
                assert!(y.max_abs_diff(&moe_forward_dense(&x, &layer, k).unwrap()).unwrap() < 1e-10, "E={e} k={k}");
                assert!(aux.is_finite());
                let d = route(&x, &layer.router, k).unwrap();
                for (ids, g) in d.experts.iter().zip(&d.gates) {
                    let mut sorted = ids.clone();
                    sorted.sort();
                    sorted.dedup();
                    assert_eq!(sorted.len(), k);
                    assert!(g.iter().all(|&w| w > 0.0));
                    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_expert_is_plain_ffn() {
        let mut rng = Rng::seed(3);
        let c = cfg(1, 1);
        let layer = MoeLayer::init(&c, &mut rng).unwrap();
        let x = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut rng);
        let (y, aux) = moe_forward(&x, &layer, &c).unwrap();
        assert!(y.max_abs_diff(&moe_forward_dense(&x, &layer, 1).unwrap()).unwrap() < 1e-12);
        assert!((aux - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_router_with_all_experts_averages() {
        let mut rng = Rng::seed(9);
        let c = cfg(4, 4);
        let mut layer = MoeLayer::init(&c, &mut rng).unwrap();
        layer.router = Tensor::zeros(&[4, 4]);
        let x = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let (y, aux) = moe_forward(&x, &layer, &c).unwrap();
        let mut mean = Tensor::zeros(&[6, 4]);
        for e in 0..4 {
            let mut one = layer.clone();
            one.experts = vec![layer.experts[e].clone()];
            one.router = Tensor::zeros(&[4, 1]);
            let (ye, _) = moe_forward(&x, &one, &cfg(1, 1)).unwrap();
            mean = mean.add(&ye.scale(0.25)).unwrap();
        }
        assert!(y.max_abs_diff(&mean).unwrap() < 1e-12);
        assert!((aux - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let mut rng = Rng::seed(10);
        let c = cfg(4, 2);
        let layer = MoeLayer::init(&c, &mut rng).unwrap();
        let x = Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..8).collect();
        rng.shuffle(&mut perm);
        let rows: Vec<&[f64]> = perm.iter().map(|&i| x.row_slice(i)).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let (y, _) = moe_forward(&x, &layer, &c).unwrap();
        let (yp, _) = moe_forward(&xp, &layer, &c).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(yp.row_slice(dst), y.row_slice(src));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seed(12);
        let c = cfg(4, 2);
        let layer = MoeLayer::init(&c, &mut rng).unwrap();
        let mut inputs = vec![Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng)];
        layer.visit("moe", &mut |_, t| inputs.push(t.clone()));
        let w = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let report = check_gradients(&inputs, 1e-6, |tape, v| {
            let mut it = v[1..].iter().copied();
            let l = layer.try_map(&mut |_| Ok(it.next().expect("param")))?;
            let out = moe_forward_var(tape, v[0], &l, &c)?;
            out.y.mul(tape.constant(w.clone()))?.sum()?.add(out.aux_loss)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(cfg(4, 5).validate().is_err());
        assert!(cfg(4, 0).validate().is_err());
    }
}
