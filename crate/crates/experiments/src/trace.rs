//! Per-iteration records of an outer optimization loop.

use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Smallest tightness ratio among the inner solves of this iteration.
    pub tightness_ratio: f64,
    pub params: Vec<f64>,
    /// Experiment-specific solution summary, e.g. `(x*, y*)`.
    pub solution: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BilevelTrace {
    pub records: Vec<TraceRecord>,
    pub converged: bool,
    /// Iterations at which the inner solution moved to a different basin.
    pub jumps: Vec<usize>,
    pub abort: Option<String>,
}

impl BilevelTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn final_params(&self) -> Option<&[f64]> {
        self.records.last().map(|r| r.params.as_slice())
    }

    /// Writes `trial,iteration,loss,grad_norm,tightness_ratio,param_0..,sol_0..`.
    pub fn write_csv<W: Write>(traces: &[(usize, &BilevelTrace)], out: W) -> csv::Result<()> {
        let (np, ns) = traces
            .iter()
            .flat_map(|(_, t)| t.records.first())
            .map(|r| (r.params.len(), r.solution.len()))
            .next()
            .unwrap_or((0, 0));
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["trial", "iteration", "loss", "grad_norm", "tightness_ratio"].iter().map(|s| s.to_string()).collect();
        header.extend((0..np).map(|i| format!("param_{i}")));
        header.extend((0..ns).map(|i| format!("sol_{i}")));
        w.write_record(&header)?;
        for (trial, trace) in traces {
            for r in &trace.records {
                let mut row = vec![
                    trial.to_string(),
                    r.iteration.to_string(),
                    format!("{:e}", r.loss),
                    format!("{:e}", r.grad_norm),
                    format!("{:e}", r.tightness_ratio),
                ];
                row.extend(r.params.iter().map(|v| format!("{v:e}")));
                row.extend(r.solution.iter().map(|v| format!("{v:e}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let trace = BilevelTrace {
            records: vec![TraceRecord {
                iteration: 0,
                loss: 0.5,
                grad_norm: 1.0,
                tightness_ratio: 1e9,
                params: vec![0.24],
                solution: vec![1.0, 2.0],
            }],
            ..BilevelTrace::default()
        };
        let mut buf = Vec::new();
        BilevelTrace::write_csv(&[(3, &trace)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "trial,iteration,loss,grad_norm,tightness_ratio,param_0,sol_0,sol_1\n3,0,5e-1,1e0,1e9,2.4e-1,1e0,2e0\n"
        );
    }
}
