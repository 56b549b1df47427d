//! Measured datasets and the Hankel matrices built from them.
//!
//! A [`Dataset`] is a bounded window of synchronized `(u, w, y)` samples.
//! Sample `k` holds the input applied over interval `k`, the measured
//! disturbance acting over the same interval, and the output measured at the
//! end of it. With that alignment every predicted output depends on the
//! inputs of the same and earlier samples, so the whole prediction window can
//! be steered.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{self, numerical_rank};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub u: DVector<f64>,
    pub w: DVector<f64>,
    pub y: DVector<f64>,
}

/// Sliding window of measurements with fixed capacity `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_u: usize,
    n_w: usize,
    n_y: usize,
    capacity: usize,
    samples: VecDeque<Sample>,
}

impl Dataset {
    pub fn new(n_u: usize, n_w: usize, n_y: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Parameter("dataset capacity must be positive".into()));
        }
        if n_u == 0 || n_y == 0 {
            return Err(Error::Parameter(
                "dataset needs at least one input and one output channel".into(),
            ));
        }
        Ok(Self {
            n_u,
            n_w,
            n_y,
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }
    pub fn n_w(&self) -> usize {
        self.n_w
    }
    pub fn n_y(&self) -> usize {
        self.n_y
    }
    pub fn capacity(&self) -> usize {
        self.capacity
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = &Sample> + '_ {
        self.samples.iter()
    }

    pub fn sample(&self, i: usize) -> Option<&Sample> {
        self.samples.get(i)
    }

    /// Append a sample, dropping the oldest one when at capacity.
    pub fn push(&mut self, u: DVector<f64>, w: DVector<f64>, y: DVector<f64>) -> Result<()> {
        if u.len() != self.n_u {
            return Err(Error::dim("dataset input", self.n_u, u.len()));
        }
        if w.len() != self.n_w {
            return Err(Error::dim("dataset disturbance", self.n_w, w.len()));
        }
        if y.len() != self.n_y {
            return Err(Error::dim("dataset output", self.n_y, y.len()));
        }
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(Sample { u, w, y });
        Ok(())
    }

    /// Value-returning variant of [`Dataset::push`].
    pub fn push_sample(&self, u: DVector<f64>, w: DVector<f64>, y: DVector<f64>) -> Result<Self> {
        let mut next = self.clone();
        next.push(u, w, y)?;
        Ok(next)
    }

    pub fn inputs(&self) -> Vec<DVector<f64>> {
        self.samples.iter().map(|s| s.u.clone()).collect()
    }
    pub fn disturbances(&self) -> Vec<DVector<f64>> {
        self.samples.iter().map(|s| s.w.clone()).collect()
    }
    pub fn outputs(&self) -> Vec<DVector<f64>> {
        self.samples.iter().map(|s| s.y.clone()).collect()
    }

    /// The most recent `n` samples, flattened per signal as `(u, w, y)`.
    pub fn tail(&self, n: usize) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if n > self.len() {
            return Err(Error::InsufficientData(format!(
                "need {n} recent samples, dataset holds {}",
                self.len()
            )));
        }
        let start = self.len() - n;
        let part: Vec<&Sample> = self.samples.range(start..).collect();
        let u: Vec<DVector<f64>> = part.iter().map(|s| s.u.clone()).collect();
        let w: Vec<DVector<f64>> = part.iter().map(|s| s.w.clone()).collect();
        let y: Vec<DVector<f64>> = part.iter().map(|s| s.y.clone()).collect();
        Ok((linalg::flatten(&u), linalg::flatten(&w), linalg::flatten(&y)))
    }

    /// CSV with header `t,u_1..,w_1..,y_1..`, one sample per line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n_u).map(|i| format!("u_{i}")));
        header.extend((1..=self.n_w).map(|i| format!("w_{i}")));
        header.extend((1..=self.n_y).map(|i| format!("y_{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (t, s) in self.samples.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(s.u.iter().map(|v| v.to_string()));
            rec.extend(s.w.iter().map(|v| v.to_string()));
            rec.extend(s.y.iter().map(|v| v.to_string()));
            wtr.write_record(&rec).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`Dataset::write_csv`]. Channel counts
    /// come from the header; capacity defaults to the number of rows.
    pub fn read_csv<R: Read>(input: R, capacity: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Parse("dataset CSV must start with column `t`".into()));
        }
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let (n_u, n_w, n_y) = (count("u_"), count("w_"), count("y_"));
        if 1 + n_u + n_w + n_y != header.len() {
            return Err(Error::Parse(format!("unrecognized dataset header: {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let vals: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("{f:?}: {e}"))))
                .collect::<Result<_>>()?;
            if vals.len() != n_u + n_w + n_y {
                return Err(Error::Parse("ragged dataset row".into()));
            }
            rows.push(vals);
        }
        let cap = capacity.unwrap_or(rows.len().max(1));
        let mut ds = Dataset::new(n_u, n_w, n_y, cap)?;
        for v in rows {
            ds.push(
                DVector::from_column_slice(&v[..n_u]),
                DVector::from_column_slice(&v[n_u..n_u + n_w]),
                DVector::from_column_slice(&v[n_u + n_w..]),
            )?;
        }
        Ok(ds)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Block Hankel matrix of the given depth: block `(i, j)` is `signal[i + j]`.
pub fn build_hankel(signal: &[DVector<f64>], depth: usize) -> Result<DMatrix<f64>> {
    if depth == 0 {
        return Err(Error::Parameter("Hankel depth must be positive".into()));
    }
    if signal.len() < depth {
        return Err(Error::InsufficientData(format!(
            "Hankel depth {depth} exceeds signal length {}",
            signal.len()
        )));
    }
    let n_s = signal[0].len();
    if let Some(bad) = signal.iter().find(|s| s.len() != n_s) {
        return Err(Error::dim("Hankel signal sample", n_s, bad.len()));
    }
    let n_c = signal.len() - depth + 1;
    let mut h = DMatrix::zeros(depth * n_s, n_c);
    for j in 0..n_c {
        for i in 0..depth {
            h.view_mut((i * n_s, j), (n_s, 1)).copy_from(&signal[i + j]);
        }
    }
    Ok(h)
}

/// The six Hankel blocks used by the predictor, split at depth `t_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelStack {
    pub y_init: DMatrix<f64>,
    pub u_init: DMatrix<f64>,
    pub w_init: DMatrix<f64>,
    pub u_pred: DMatrix<f64>,
    pub w_pred: DMatrix<f64>,
    pub y_pred: DMatrix<f64>,
    pub t_init: usize,
    pub n_h: usize,
    pub n_c: usize,
    pub n_u: usize,
    pub n_w: usize,
    pub n_y: usize,
}

impl HankelStack {
    pub fn depth(&self) -> usize {
        self.t_init + self.n_h
    }

    /// Equality-constraint matrix of the lower level: the input and
    /// disturbance blocks stacked as `[u_init; w_init; u_pred; w_pred]`.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.u_init, &self.w_init, &self.u_pred, &self.w_pred])
    }

    /// Re-stacked output blocks, equal to the depth-`L` output Hankel matrix.
    pub fn y_full(&self) -> DMatrix<f64> {
        linalg::vstack(&[&self.y_init, &self.y_pred])
    }
}

fn split_rows(h: DMatrix<f64>, top: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let bottom = h.nrows() - top;
    let a = h.rows(0, top).into_owned();
    let b = h.rows(top, bottom).into_owned();
    (a, b)
}

pub fn build_stack(ds: &Dataset, t_init: usize, n_h: usize) -> Result<HankelStack> {
    if t_init == 0 || n_h == 0 {
        return Err(Error::Parameter("t_init and n_h must be positive".into()));
    }
    let depth = t_init + n_h;
    if ds.len() < depth {
        return Err(Error::InsufficientData(format!(
            "stack depth {depth} needs at least {depth} samples, dataset holds {}",
            ds.len()
        )));
    }
    let n_c = ds.len() - depth + 1;
    let hy = build_hankel(&ds.outputs(), depth)?;
    let hu = build_hankel(&ds.inputs(), depth)?;
    let (y_init, y_pred) = split_rows(hy, t_init * ds.n_y());
    let (u_init, u_pred) = split_rows(hu, t_init * ds.n_u());
    let (w_init, w_pred) = if ds.n_w() > 0 {
        split_rows(build_hankel(&ds.disturbances(), depth)?, t_init * ds.n_w())
    } else {
        (DMatrix::zeros(0, n_c), DMatrix::zeros(0, n_c))
    };
    Ok(HankelStack {
        y_init,
        u_init,
        w_init,
        u_pred,
        w_pred,
        y_pred,
        t_init,
        n_h,
        n_c,
        n_u: ds.n_u(),
        n_w: ds.n_w(),
        n_y: ds.n_y(),
    })
}

/// True iff the depth-`order` Hankel matrix of `signal` has full row rank.
pub fn is_persistently_exciting(signal: &[DVector<f64>], order: usize) -> bool {
    if order == 0 || signal.len() < order {
        return false;
    }
    match build_hankel(signal, order) {
        Ok(h) => h.nrows() <= h.ncols() && numerical_rank(&h) == h.nrows(),
        Err(_) => false,
    }
}

/// Zero-input heuristic: returns `true` ("excitation needed") when the
/// nominal input sequence is within `tol` of zero in max-norm.
pub fn pe_heuristic(u_nominal: &DVector<f64>, tol: f64) -> bool {
    linalg::max_abs_vec(u_nominal) <= tol
}

/// Exact test on the recorded inputs followed by the planned nominal inputs,
/// keeping the most recent `window` samples.
pub fn concatenated_pe(
    recorded: &[DVector<f64>],
    planned: &DVector<f64>,
    n_u: usize,
    window: usize,
    order: usize,
) -> bool {
    let mut seq: Vec<DVector<f64>> = recorded.to_vec();
    for k in 0..planned.len() / n_u {
        seq.push(planned.rows(k * n_u, n_u).into_owned());
    }
    let start = seq.len().saturating_sub(window);
    is_persistently_exciting(&seq[start..], order)
}
