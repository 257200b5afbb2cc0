use std::io::Write;

use crate::error::{Error, Result};
use crate::harness::fmt_sig6;
use crate::numerics::Tensor;

/// One conversation's representation table with its labels, for export.
pub struct HTableRows<'a> {
    pub id: &'a str,
    pub labels: &'a [usize],
    pub h: &'a Tensor,
}

/// CSV with columns `conversation_id, turn, label, h_0 .. h_{D-1}`.
pub fn write_h_csv<W: Write>(out: W, tables: &[HTableRows<'_>]) -> Result<()> {
    let dim = tables.first().map_or(0, |t| t.h.cols());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["conversation_id".to_string(), "turn".into(), "label".into()];
    header.extend((0..dim).map(|i| format!("h_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for t in tables {
        if t.h.cols() != dim || t.h.rows() != t.labels.len() {
            return Err(Error::shape("h export", &[t.labels.len(), dim], t.h.shape()));
        }
        for (turn, &label) in t.labels.iter().enumerate() {
            let mut rec = vec![t.id.to_string(), turn.to_string(), label.to_string()];
            rec.extend(t.h.row_slice(turn).iter().map(|&v| fmt_sig6(v)));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}
