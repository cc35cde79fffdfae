//! Grid sweeps over separate CNN / Transformer targets with a Pareto
//! frontier over (MACs, accuracy).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::controller::Target;
use crate::error::{Error, Result};
use crate::pipeline::{run_pipeline, PruneRunConfig};
use crate::sparsity::RegimeKind;

pub const DEFAULT_MAX_CELLS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub t_cnn: Vec<f64>,
    pub t_trans: Vec<f64>,
}

impl Grid {
    /// Parses `t_cnn=0.2,0.4,t_trans=0.3,0.5`: a value list continues until
    /// the next `key=`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (mut t_cnn, mut t_trans) = (None::<Vec<f64>>, None::<Vec<f64>>);
        let mut current: Option<&mut Vec<f64>> = None;
        for token in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let value = match token.split_once('=') {
                Some((key, value)) => {
                    let slot = match key.trim() {
                        "t_cnn" => &mut t_cnn,
                        "t_trans" => &mut t_trans,
                        other => return Err(Error::Config(format!("unknown grid key {other:?} (expected t_cnn or t_trans)"))),
                    };
                    if slot.is_some() {
                        return Err(Error::Config(format!("grid key {key} given twice")));
                    }
                    current = Some(slot.insert(Vec::new()));
                    value
                }
                None => token,
            };
            let list = current.as_deref_mut().ok_or_else(|| Error::Config(format!("grid value {value:?} before any key")))?;
            let v: f64 = value.trim().parse().map_err(|_| Error::Config(format!("grid value {value:?} is not a number")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("grid target {v} outside [0, 1]")));
            }
            list.push(v);
        }
        match (t_cnn, t_trans) {
            (Some(c), Some(t)) if !c.is_empty() && !t.is_empty() => Ok(Grid { t_cnn: c, t_trans: t }),
            _ => Err(Error::Config("grid needs non-empty t_cnn and t_trans lists".into())),
        }
    }

    pub fn len(&self) -> usize {
        self.t_cnn.len() * self.t_trans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells in row-major order (`t_cnn` outer).
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.t_cnn.iter().flat_map(|&c| self.t_trans.iter().map(move |&t| (c, t))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub cell: usize,
    pub seed: u64,
    pub t_cnn: f64,
    pub t_trans: f64,
    pub sparsity_cnn: f64,
    pub sparsity_trans: f64,
    pub macs: u64,
    pub params: u64,
    pub metric: f64,
    pub met: bool,
    pub frontier: bool,
}

/// `true` for points no other point dominates, where lower `cost` and
/// higher `metric` are better.
pub fn pareto_flags(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(c, m)| !points.iter().any(|&(c2, m2)| c2 <= c && m2 >= m && (c2 < c || m2 > m)))
        .collect()
}

/// Runs the full pipeline once per cell; cell `i` uses seed `base + i`.
/// Cells run in parallel and the result is ordered by cell index, so the
/// output does not depend on scheduling.
pub fn run_sweep(config: &PruneRunConfig, grid: &Grid, max_cells: usize, out_dir: Option<&Path>) -> Result<Vec<SweepCell>> {
    if config.regime != RegimeKind::SizeSeparate {
        return Err(Error::Config(format!("sweep needs the size_separate regime, got {}", config.regime.name())));
    }
    if grid.len() > max_cells {
        return Err(Error::Config(format!("grid has {} cells, more than the cap of {max_cells}", grid.len())));
    }
    let mut cells: Vec<SweepCell> = grid
        .cells()
        .into_par_iter()
        .enumerate()
        .map(|(i, (t_cnn, t_trans))| {
            let mut cfg = config.clone();
            cfg.seed = config.seed + i as u64;
            cfg.schedule.final_target = Target::Separate { cnn: t_cnn, trans: t_trans };
            cfg.validate()?;
            let dir = out_dir.map(|d| d.join(format!("cell_{i}")));
            let outcome = run_pipeline(&cfg, dir.as_deref())?;
            Ok(SweepCell {
                cell: i,
                seed: cfg.seed,
                t_cnn,
                t_trans,
                sparsity_cnn: outcome.prune.terminal.cnn,
                sparsity_trans: outcome.prune.terminal.trans,
                macs: outcome.prune.extracted_macs,
                params: outcome.prune.extracted_params,
                metric: outcome.final_accuracy,
                met: outcome.prune.met,
                frontier: false,
            })
        })
        .collect::<Result<_>>()?;
    mark_frontier(&mut cells);
    Ok(cells)
}

pub fn mark_frontier(cells: &mut [SweepCell]) {
    let points: Vec<(f64, f64)> = cells.iter().map(|c| (c.macs as f64, c.metric)).collect();
    for (c, f) in cells.iter_mut().zip(pareto_flags(&points)) {
        c.frontier = f;
    }
}

pub fn write_sweep_csv<W: Write>(cells: &[SweepCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}
