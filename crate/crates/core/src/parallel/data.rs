use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{bind_model, Model, ModelConfig, PackedBatch};
use crate::tensor::{Precision, Tensor};

use super::group::{CommKind, CommRecord, RankGroup, Schedule};
use super::hybrid::hybrid_sp_forward;

/// Parallel layout of a run. Pipeline and expert parallelism are accepted
/// only at size 1; nothing executes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParallelConfig {
    pub dp: usize,
    pub sp: usize,
    pub tp: usize,
    pub pp: usize,
    pub ep: usize,
    pub schedule: Schedule,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self { dp: 1, sp: 1, tp: 1, pp: 1, ep: 1, schedule: Schedule::InOrder }
    }
}

impl ParallelConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.dp, self.sp, self.tp, self.pp, self.ep].contains(&0) {
            return Err(Error::Config("parallel sizes must be at least 1".into()));
        }
        if self.pp != 1 || self.ep != 1 {
            return Err(Error::Config("pipeline and expert parallelism are configuration stubs; set pp = ep = 1".into()));
        }
        if self.tp != 1 {
            return Err(Error::Config("tensor parallelism is verified by `verify --only tp`, not used in training".into()));
        }
        Ok(())
    }

    pub fn world(&self) -> usize {
        self.dp * self.sp * self.tp * self.pp * self.ep
    }
}

/// Result of one data × sequence parallel step.
pub struct GridStep {
    /// Mean over data shards of each shard's loss.
    pub loss: f64,
    pub ce: f64,
    /// Gradients averaged over data shards.
    pub grads: Model<Tensor>,
    /// Communication of each sequence group followed by the data group.
    pub comm: Vec<CommRecord>,
}

fn flatten(grads: &[Tensor]) -> Tensor {
    let data: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
    let n = data.len();
    Tensor::new(&[1, n], data).expect("row shape")
}

fn unflatten(flat: &Tensor, like: &Model<Tensor>) -> Result<Model<Tensor>> {
    let mut at = 0;
    let data = flat.data();
    like.try_map(&mut |t| {
        let n = t.numel();
        let out = Tensor::new(t.shape(), data[at..at + n].to_vec());
        at += n;
        out
    })
}

/// Loss of one packed batch under SP: summed per-rank cross-entropy
/// all-reduced and divided by the labelled count, plus the weighted mean of
/// the per-rank load-balancing losses.
pub fn sp_loss<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    model: &Model<Var<'t>>,
    cfg: &ModelConfig,
    packed: &PackedBatch,
) -> Result<(Var<'t>, Var<'t>)> {
    let (seq, outs) = hybrid_sp_forward(group, tape, model, cfg, packed)?;
    let count = packed.labels.iter().filter(|l| l.is_some()).count();
    if count == 0 {
        return Err(Error::invalid("sp_loss", "no labelled positions"));
    }
    let local = group.run(|r| {
        let labels = &packed.labels[seq.ranges[r].clone()];
        let (rows, targets): (Vec<usize>, Vec<usize>) =
            labels.iter().enumerate().filter_map(|(i, l)| l.map(|t| (i, t))).unzip();
        let ce_sum = if rows.is_empty() {
            tape.constant(Tensor::zeros(&[1, 1]))
        } else {
            outs[r].logits.gather_rows(&rows)?.log_softmax_rows()?.gather_cols(&targets, 1)?.sum()?.neg()?.reshape(&[1, 1])?
        };
        let mut aux = tape.constant(Tensor::zeros(&[1, 1]));
        for a in &outs[r].aux_losses {
            aux = aux.add(a.reshape(&[1, 1])?)?;
        }
        let aux_mean = aux.scale(1.0 / (outs[r].aux_losses.len().max(1) * group.size()) as f64)?;
        tape.concat_cols(&[ce_sum, aux_mean])
    })?;
    let mut mb = group.mailbox(CommKind::AllReduce, "loss", None);
    for r in group.order() {
        mb.post(r, local[r])?;
    }
    let total = group.all_reduce(tape, mb)?;
    let ce = total.slice_cols(0, 1)?.scale(1.0 / count as f64)?.reshape(&[])?;
    let aux = total.slice_cols(1, 2)?.reshape(&[])?;
    let loss = if cfg.aux_loss_weight != 0.0 { ce.add(aux.scale(cfg.aux_loss_weight)?)? } else { ce };
    Ok((loss, ce))
}

/// One gradient computation on a `dp × sp` grid: each data shard runs its
/// own sequence group, then gradients are averaged with one all-reduce.
pub fn data_sequence_step(
    model: &Model<Tensor>,
    cfg: &ModelConfig,
    shards: &[PackedBatch],
    sp: usize,
    schedule: Schedule,
    precision: Precision,
) -> Result<GridStep> {
    let dp = shards.len();
    if dp == 0 {
        return Err(Error::invalid("data_sequence_step", "no data shards"));
    }
    let mut comm = Vec::new();
    let mut flats = Vec::with_capacity(dp);
    let (mut loss_sum, mut ce_sum) = (0.0, 0.0);
    for batch in shards {
        let tape = Tape::with_precision(precision);
        let bound = bind_model(&tape, model, true)?;
        let mut group = RankGroup::new(sp)?.with_schedule(schedule).with_precision(precision);
        let (loss, ce) = sp_loss(&mut group, &tape, &bound, cfg, batch)?;
        loss_sum += loss.item()?;
        ce_sum += ce.item()?;
        let g = tape.backward(loss)?;
        let leaves = bound.leaves().into_iter().map(|v| g.get(v).cloned()).collect::<Result<Vec<_>>>()?;
        flats.push(flatten(&leaves));
        comm.extend(group.take_log());
    }
    let tape = Tape::new();
    let mut data_group = RankGroup::new(dp)?.with_schedule(schedule).with_precision(precision);
    let mut mb = data_group.mailbox(CommKind::AllReduce, "dp.grads", None);
    for r in data_group.order() {
        mb.post(r, tape.constant(flats[r].clone()))?;
    }
    let summed = data_group.all_reduce(&tape, mb)?.value().scale(1.0 / dp as f64);
    comm.extend(data_group.take_log());
    Ok(GridStep {
        loss: loss_sum / dp as f64,
        ce: ce_sum / dp as f64,
        grads: unflatten(&summed, model)?,
        comm,
    })
}
