//! Sparse-parameter accounting over scale grids, with an optional training
//! sweep at desk scale.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{run_training, Dataset};
use crate::config::{ModelConfig, TrainConfig};
use crate::engram::{allocate, EngramMemory, EngramSpec, MemoryKind};
use crate::representation::memory_spec;
use crate::error::{Error, Result};
use crate::tape::ParamStore;

pub const INTER_GRID: [f64; 8] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0];
pub const INTRA_GRID: [f64; 5] = [0.125, 0.25, 0.5, 0.75, 1.0];
/// Points above this many sparse parameters are never materialized.
pub const MATERIALIZE_LIMIT: u64 = 50_000_000;
pub const HEADER: &str = "scale,kind,level,order,head,base,target,prime,buckets,params_total";

/// One table of one grid point. `prime` is the chosen bucket count and
/// `buckets` the rows actually allocated for the table (the same number).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingRow {
    pub scale: f64,
    pub kind: MemoryKind,
    pub level: usize,
    pub order: usize,
    pub head: usize,
    pub base: f64,
    pub target: u64,
    pub prime: u64,
    pub buckets: u64,
    pub params_total: u64,
}

impl ScalingRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.scale,
            self.kind.name(),
            self.level,
            self.order,
            self.head,
            self.base,
            self.target,
            self.prime,
            self.buckets,
            self.params_total
        )
    }
}

/// Allocation-only rows for every table at every grid point.
pub fn report(grid: &[f64], spec_at: impl Fn(f64) -> EngramSpec) -> Result<Vec<ScalingRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("scale grid is empty".into()));
    }
    let mut rows = Vec::new();
    for &s in grid {
        let spec = spec_at(s);
        let alloc = allocate(&spec)?;
        let total = alloc.param_count();
        for t in &alloc.tables {
            rows.push(ScalingRow {
                scale: s,
                kind: spec.kind,
                level: t.level,
                order: t.order,
                head: t.head,
                base: spec.base(t.level),
                target: t.target,
                prime: t.buckets,
                buckets: t.buckets,
                params_total: total,
            });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[ScalingRow]) -> String {
    let mut s = format!("{HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

/// Distinct `(scale, params_total)` pairs in grid order.
pub fn totals(rows: &[ScalingRow]) -> Vec<(f64, u64)> {
    let mut out: Vec<(f64, u64)> = Vec::new();
    for r in rows {
        if out.last().is_none_or(|&(s, _)| s != r.scale) {
            out.push((r.scale, r.params_total));
        }
    }
    out
}

/// Builds the tables for real and counts their scalars; `None` above the limit.
pub fn materialized_count(spec: &EngramSpec) -> Result<Option<u64>> {
    let alloc = allocate(spec)?;
    if alloc.param_count() > MATERIALIZE_LIMIT {
        return Ok(None);
    }
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mem = EngramMemory::build(alloc, 1, &mut store, "m", &mut rng);
    let ids = mem.table_params();
    Ok(Some(ids.iter().map(|&id| store.get(id).data.len() as u64).sum()))
}

/// Memory spec of a desk-scale model at one scale of the varied kind.
pub fn desk_spec(cfg: &ModelConfig, kind: MemoryKind, scale: f64) -> EngramSpec {
    let cfg = match kind {
        MemoryKind::Intra => ModelConfig { intra_scale: scale, ..cfg.clone() },
        MemoryKind::Inter => ModelConfig { inter_scale: scale, ..cfg.clone() },
    };
    memory_spec(&cfg, kind)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub scale: f64,
    pub params_total: u64,
    pub hit5: f64,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "scale,kind,params_total,H@5,seed";

/// Trains one model per grid point with the other memory at its default scale.
pub fn sweep(
    ds: &Dataset,
    base: &ModelConfig,
    train: &TrainConfig,
    kind: MemoryKind,
    grid: &[f64],
    seed: u64,
    mut on_point: impl FnMut(&ScalingPoint),
) -> Result<Vec<ScalingPoint>> {
    let base = ds.configure(base);
    grid.iter()
        .map(|&s| {
            let cfg = match kind {
                MemoryKind::Intra => ModelConfig { intra_scale: s, ..base.clone() },
                MemoryKind::Inter => ModelConfig { inter_scale: s, ..base.clone() },
            };
            let params_total = allocate(&desk_spec(&cfg, kind, s))?.param_count();
            let r = run_training(ds, &cfg, train, seed, |_| {})?;
            let p = ScalingPoint { scale: s, params_total, hit5: r.metrics.hit5, seed };
            on_point(&p);
            Ok(p)
        })
        .collect()
}

/// Number of consecutive grid steps along which H@5 does not decrease.
pub fn non_decreasing_steps(points: &[ScalingPoint]) -> usize {
    points.windows(2).filter(|w| w[1].hit5 >= w[0].hit5).count()
}
