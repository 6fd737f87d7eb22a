use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub aux_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens_per_sec: f64,
    /// Recurrent state plus KV cache elements held by one forward.
    pub peak_state_elements: usize,
    pub comm_bytes: usize,
}

impl MetricsRecord {
    pub fn is_finite(&self) -> bool {
        [self.loss, self.ce, self.aux_loss, self.lr, self.grad_norm, self.tokens_per_sec].iter().all(|x| x.is_finite())
    }
}

pub fn write_metrics(w: &mut impl Write, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses line-delimited records, rejecting non-increasing steps.
pub fn read_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out: Vec<MetricsRecord> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: MetricsRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("metrics line {}: {e}", i + 1)))?;
        if out.last().is_some_and(|p| p.step >= r.step) {
            return Err(Error::Format(format!("metrics line {}: step {} is not increasing", i + 1, r.step)));
        }
        out.push(r);
    }
    Ok(out)
}

/// Two tab-separated columns, `step` and `loss`, with a header row.
pub fn write_loss_curve(w: &mut impl Write, points: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "step\tloss")?;
    for (s, l) in points {
        writeln!(w, "{s}\t{l}")?;
    }
    Ok(())
}

pub fn read_loss_curve(text: &str) -> Result<Vec<(usize, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, v) = l.split_once('\t').ok_or_else(|| Error::Format(format!("bad curve row `{l}`")))?;
            let s = s.parse().map_err(|_| Error::Format(format!("bad step `{s}`")))?;
            let v = v.parse().map_err(|_| Error::Format(format!("bad loss `{v}`")))?;
            Ok((s, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, loss: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            loss,
            ce: loss * 0.9,
            aux_loss: 1.0 / 3.0,
            lr: 1e-4,
            grad_norm: 0.1 + step as f64,
            tokens_per_sec: 1234.5678,
            peak_state_elements: 640,
            comm_bytes: 8192,
        }
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let rs: Vec<_> = (0..5).map(|s| record(s * 10, 3.0 / (s as f64 + 1.0))).collect();
        let mut buf = Vec::new();
        write_metrics(&mut buf, &rs).unwrap();
        assert_eq!(read_metrics(std::str::from_utf8(&buf).unwrap()).unwrap(), rs);
    }

    #[test]
    fn out_of_order_steps_are_rejected() {
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[record(5, 1.0), record(5, 1.0)]).unwrap();
        assert!(read_metrics(std::str::from_utf8(&buf).unwrap()).is_err());
        assert!(read_metrics("{\"step\": 1}").is_err());
    }

    #[test]
    fn curve_round_trip() {
        let pts = vec![(0, 3.4657359027997265), (10, 0.1 + 0.2)];
        let mut buf = Vec::new();
        write_loss_curve(&mut buf, &pts).unwrap();
        assert_eq!(read_loss_curve(std::str::from_utf8(&buf).unwrap()).unwrap(), pts);
    }
}
