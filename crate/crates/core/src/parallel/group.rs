use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Precision;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommKind {
    AllGather,
    ReduceScatter,
    AllReduce,
}

impl CommKind {
    pub fn name(self) -> &'static str {
        match self {
            CommKind::AllGather => "all_gather",
            CommKind::ReduceScatter => "reduce_scatter",
            CommKind::AllReduce => "all_reduce",
        }
    }
}

/// One completed collective.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    /// Call-site sequence number within the group.
    pub seq: u64,
    /// Free-form call-site label, e.g. `layer1.lsm.state`.
    pub site: String,
    pub layer: Option<usize>,
    pub kind: CommKind,
    /// Elements entering the collective, summed over ranks.
    pub elements: usize,
    /// Elements each rank receives from the others.
    pub received: usize,
    /// `elements` at the group's declared precision.
    pub bytes: usize,
}

/// Order in which rank bodies run between collectives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "order", content = "seed")]
pub enum Schedule {
    #[default]
    InOrder,
    Reversed,
    Shuffled(u64),
}

/// `T` simulated ranks sharing one process.
///
/// Rank bodies run cooperatively in [`order`](Self::order); collectives are
/// full barriers that take one contribution per rank and hand results back
/// in rank order, so results never depend on the schedule.
#[derive(Debug)]
pub struct RankGroup {
    size: usize,
    schedule: Schedule,
    precision: Precision,
    seq: u64,
    log: Vec<CommRecord>,
}

impl RankGroup {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("rank group needs at least one rank".into()));
        }
        Ok(Self { size, schedule: Schedule::InOrder, precision: Precision::F64, seq: 0, log: Vec::new() })
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    /// Precision used for byte accounting.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn comm_log(&self) -> &[CommRecord] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<CommRecord> {
        std::mem::take(&mut self.log)
    }

    /// Rank indices in scheduling order.
    pub fn order(&self) -> Vec<usize> {
        let mut ranks: Vec<usize> = (0..self.size).collect();
        match self.schedule {
            Schedule::InOrder => {}
            Schedule::Reversed => ranks.reverse(),
            Schedule::Shuffled(seed) => Rng::seed(seed).shuffle(&mut ranks),
        }
        ranks
    }

    /// Runs `body` once per rank in scheduling order; results by rank.
    pub fn run<T>(&self, mut body: impl FnMut(usize) -> Result<T>) -> Result<Vec<T>> {
        let mut out: Vec<Option<T>> = (0..self.size).map(|_| None).collect();
        for r in self.order() {
            out[r] = Some(body(r)?);
        }
        Ok(out.into_iter().map(|x| x.expect("every rank ran")).collect())
    }

    /// Opens a barrier for one collective call site.
    pub fn mailbox<'t>(&self, kind: CommKind, site: impl Into<String>, layer: Option<usize>) -> Mailbox<'t> {
        Mailbox { kind, site: site.into(), layer, slots: vec![None; self.size] }
    }

    fn close<'t>(&mut self, mb: Mailbox<'t>, expect: CommKind) -> Result<(String, Option<usize>, Vec<Var<'t>>)> {
        let err = |msg: String| Error::Comm { kind: mb.kind.name(), site: mb.site.clone(), msg };
        if mb.kind != expect {
            return Err(err(format!("mailbox opened for {} completed as {}", mb.kind.name(), expect.name())));
        }
        if let Some(r) = mb.slots.iter().position(Option::is_none) {
            return Err(err(format!("rank {r} never entered the collective")));
        }
        let parts: Vec<Var<'t>> = mb.slots.iter().map(|s| s.expect("checked")).collect();
        let shape = parts[0].shape();
        if let Some(r) = parts.iter().position(|p| p.shape() != shape) {
            return Err(err(format!("rank {r} sent shape {:?}, rank 0 sent {shape:?}", parts[r].shape())));
        }
        Ok((mb.site, mb.layer, parts))
    }

    fn record(&mut self, site: String, layer: Option<usize>, kind: CommKind, elements: usize, received: usize) {
        self.log.push(CommRecord {
            seq: self.seq,
            site,
            layer,
            kind,
            elements,
            received,
            bytes: elements * self.precision.bytes(),
        });
        self.seq += 1;
    }

    /// Every rank receives every contribution, in rank order.
    pub fn all_gather<'t>(&mut self, mb: Mailbox<'t>) -> Result<Vec<Var<'t>>> {
        let (site, layer, parts) = self.close(mb, CommKind::AllGather)?;
        let size = parts[0].value().numel();
        self.record(site, layer, CommKind::AllGather, self.size * size, (self.size - 1) * size);
        Ok(parts)
    }

    /// Rank `t` receives shard `t` of the elementwise sum. Contributions
    /// must be `1 × L` rows with `L` divisible by the group size.
    pub fn reduce_scatter<'t>(&mut self, tape: &'t Tape, mb: Mailbox<'t>) -> Result<Vec<Var<'t>>> {
        let kind = mb.kind.name();
        let (site, layer, parts) = self.close(mb, CommKind::ReduceScatter)?;
        let (r, len) = parts[0].value().dims2()?;
        if r != 1 || len % self.size != 0 {
            return Err(Error::Comm {
                kind,
                site,
                msg: format!("length {len} (rows {r}) is not a single row divisible by {}", self.size),
            });
        }
        let sum = sum_vars(tape, &parts)?;
        let shard = len / self.size;
        self.record(site, layer, CommKind::ReduceScatter, self.size * len, (self.size - 1) * shard);
        (0..self.size).map(|t| sum.slice_cols(t * shard, (t + 1) * shard)).collect()
    }

    /// Every rank receives the elementwise sum.
    pub fn all_reduce<'t>(&mut self, tape: &'t Tape, mb: Mailbox<'t>) -> Result<Var<'t>> {
        let (site, layer, parts) = self.close(mb, CommKind::AllReduce)?;
        let size = parts[0].value().numel();
        self.record(site, layer, CommKind::AllReduce, self.size * size, (self.size - 1) * size);
        sum_vars(tape, &parts)
    }

    /// Gathers one contribution per rank produced by `body`, run in
    /// scheduling order.
    pub fn all_gather_with<'t>(
        &mut self,
        site: impl Into<String>,
        layer: Option<usize>,
        mut body: impl FnMut(usize) -> Result<Var<'t>>,
    ) -> Result<Vec<Var<'t>>> {
        let mut mb = self.mailbox(CommKind::AllGather, site, layer);
        for r in self.order() {
            mb.post(r, body(r)?)?;
        }
        self.all_gather(mb)
    }
}

fn sum_vars<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = tape.constant(crate::tensor::Tensor::zeros(&parts[0].shape()));
    for p in parts {
        acc = acc.add(*p)?;
    }
    Ok(acc)
}

/// Staging buffer for one collective: each rank posts exactly once.
#[derive(Debug)]
pub struct Mailbox<'t> {
    kind: CommKind,
    site: String,
    layer: Option<usize>,
    slots: Vec<Option<Var<'t>>>,
}

impl<'t> Mailbox<'t> {
    pub fn post(&mut self, rank: usize, value: Var<'t>) -> Result<()> {
        let kind = self.kind.name();
        let slot = self.slots.get_mut(rank).ok_or_else(|| Error::Comm {
            kind,
            site: self.site.clone(),
            msg: format!("rank {rank} outside the group"),
        })?;
        if slot.is_some() {
            return Err(Error::Comm { kind, site: self.site.clone(), msg: format!("rank {rank} entered twice") });
        }
        *slot = Some(value);
        Ok(())
    }
}

/// One JSON object per record.
pub fn write_comm_trace(w: &mut impl Write, log: &[CommRecord]) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_comm_trace(text: &str) -> Result<Vec<CommRecord>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
