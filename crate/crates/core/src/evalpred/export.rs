//! CSV writers for metrics, envelopes, states and usage tables.

use std::io::Write;

use super::{ClassUsage, PredictionEnvelope};
use crate::diffmath::Matrix;
use crate::error::Result;

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// `metric,value` rows.
pub fn write_metrics_csv<W: Write>(rows: &[(String, f64)], out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["metric", "value"])?;
    for (name, v) in rows {
        w.write_record([name.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `horizon,start,dim,mean,std` rows, starts 0-based.
pub fn write_envelope_csv<W: Write>(env: &PredictionEnvelope, out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["horizon", "start", "dim", "mean", "std"])?;
    for h in 0..env.horizon {
        let (mean, std) = (&env.mean[h], &env.std[h]);
        for t in 0..mean.rows() {
            for j in 0..mean.cols() {
                w.write_record([
                    (h + 1).to_string(),
                    t.to_string(),
                    j.to_string(),
                    mean[(t, j)].to_string(),
                    std[(t, j)].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `t,z_0,...,z_{K-1}` rows.
pub fn write_states_csv<W: Write>(z: &Matrix, out: W) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["t".to_string()];
    header.extend((0..z.cols()).map(|k| format!("z_{k}")));
    w.write_record(&header)?;
    for t in 0..z.rows() {
        let mut rec = vec![t.to_string()];
        rec.extend(z.row(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `true,predicted,count` rows.
pub fn write_confusion_csv<W: Write>(confusion: &[Vec<usize>], out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["true", "predicted", "count"])?;
    for (i, row) in confusion.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            w.write_record([i.to_string(), j.to_string(), c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `class,rank,state,ratio` rows.
pub fn write_usage_csv<W: Write>(usage: &[ClassUsage], out: W) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["class", "rank", "state", "ratio"])?;
    for u in usage {
        for (rank, (s, r)) in u.states.iter().enumerate() {
            w.write_record([u.class.to_string(), (rank + 1).to_string(), s.to_string(), r.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
