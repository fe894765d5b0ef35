//! Hashed n-gram conditional memory: keying, hashing, table sizing and the
//! gated read.

mod hash;
mod memory;
mod primes;

pub use hash::{encode_unit, hash_key, multipliers, splitmix64, suffix_key};
pub use memory::{EngramMemory, GatedRead, ReadOptions};
pub use primes::{is_prime, nearest_primes};

use crate::error::{Error, Result};

pub const FULL_SIZE_H_MAX: u64 = 20_000_000;
pub const FULL_SIZE_D_MAX: u64 = 2_097_152;
pub const FULL_SIZE_ADDR_DIM: usize = 256;
pub const FULL_SIZE_CODEBOOK: usize = 128;
pub const INTER_BASE: f64 = 16.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemoryKind {
    Intra,
    Inter,
}

impl MemoryKind {
    pub fn name(self) -> &'static str {
        match self {
            MemoryKind::Intra => "intra",
            MemoryKind::Inter => "inter",
        }
    }

    fn tag(self) -> u64 {
        match self {
            MemoryKind::Intra => 0x5354_5241,
            MemoryKind::Inter => 0x5452_414e,
        }
    }
}

/// Shape and capacity of one memory instance. Levels are 1-based.
#[derive(Clone, Debug, PartialEq)]
pub struct EngramSpec {
    pub kind: MemoryKind,
    pub levels: usize,
    pub codebook_size: usize,
    pub addr_dim: usize,
    pub heads: usize,
    pub scale: f64,
    pub h_max: u64,
    pub d_max: u64,
    /// `orders[l - 1]` lists the n-gram orders used at level `l`; empty means inactive.
    pub orders: Vec<Vec<usize>>,
    pub seed: u64,
}

pub fn default_orders(kind: MemoryKind, levels: usize) -> Vec<Vec<usize>> {
    (1..=levels)
        .map(|l| match kind {
            MemoryKind::Intra if l < 2 => vec![],
            MemoryKind::Intra => (1..=l.min(3)).collect(),
            MemoryKind::Inter => (1..=4usize.saturating_sub(l).max(1)).collect(),
        })
        .collect()
}

impl EngramSpec {
    pub fn new(kind: MemoryKind, levels: usize, codebook_size: usize, scale: f64) -> Self {
        Self {
            kind,
            levels,
            codebook_size,
            addr_dim: FULL_SIZE_ADDR_DIM,
            heads: match kind {
                MemoryKind::Intra => 2,
                MemoryKind::Inter => 4,
            },
            scale,
            h_max: FULL_SIZE_H_MAX,
            d_max: FULL_SIZE_D_MAX,
            orders: default_orders(kind, levels),
            seed: 42,
        }
    }

    /// Full-size configuration: L = 3, C = 128, d_m = 256.
    pub fn full_size(kind: MemoryKind, scale: f64) -> Self {
        Self::new(kind, 3, FULL_SIZE_CODEBOOK, scale)
    }

    pub fn with_addr_dim(mut self, addr_dim: usize) -> Self {
        self.addr_dim = addr_dim;
        self
    }

    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads;
        self
    }

    pub fn with_h_max(mut self, h_max: u64) -> Self {
        self.h_max = h_max;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.levels == 0 || self.codebook_size == 0 {
            return bad("levels and codebook size must be positive".into());
        }
        if self.heads == 0 || self.addr_dim % self.heads != 0 {
            return bad(format!("address dim {} not divisible by {} heads", self.addr_dim, self.heads));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.orders.len() != self.levels {
            return bad("one order set per level required".into());
        }
        if self.orders.iter().flatten().any(|&o| o == 0) {
            return bad("orders start at 1".into());
        }
        if self.h_max < 2 || self.d_max < 1 {
            return bad("h_max must be at least 2 and d_max at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.addr_dim / self.heads
    }

    pub fn orders_at(&self, level: usize) -> &[usize] {
        level.checked_sub(1).and_then(|i| self.orders.get(i)).map_or(&[], Vec::as_slice)
    }

    pub fn is_active(&self, level: usize) -> bool {
        !self.orders_at(level).is_empty()
    }

    pub fn active_levels(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.levels).filter(|&l| self.is_active(l))
    }

    /// Longest order at a level, used as the inter pattern length.
    pub fn max_order(&self, level: usize) -> usize {
        self.orders_at(level).iter().copied().max().unwrap_or(0)
    }

    /// Scaled base before the order power: `C * s` (intra) or `(16 s)^l` (inter).
    pub fn base(&self, level: usize) -> f64 {
        match self.kind {
            MemoryKind::Intra => self.codebook_size as f64 * self.scale,
            MemoryKind::Inter => (INTER_BASE * self.scale).powi(level as i32),
        }
    }

    /// Exact discrete domain of an order-`o` key at `level`.
    pub fn key_domain(&self, level: usize, order: usize) -> f64 {
        let c = self.codebook_size as f64;
        match self.kind {
            MemoryKind::Intra => c.powi(order as i32),
            MemoryKind::Inter => c.powi((level * order) as i32),
        }
    }

    pub fn target_buckets(&self, level: usize, order: usize) -> Result<u64> {
        if !self.orders_at(level).contains(&order) {
            return Err(Error::InactiveOrder { level, order });
        }
        let raw = self.base(level).powi(order as i32);
        // Nudge so exact integer powers survive rounding in powi.
        let floored = (raw * (1.0 + 1e-12)).floor();
        let t = floored.min(self.key_domain(level, order)).min(self.h_max as f64);
        Ok((t as u64).max(2))
    }

    /// Sparse parameter count with every table sized at its raw target.
    pub fn raw_param_count(&self) -> u64 {
        self.tables()
            .map(|(l, o)| self.target_buckets(l, o).unwrap() * self.heads as u64 * self.head_dim() as u64)
            .sum()
    }

    /// Active (level, order) pairs in a fixed order.
    pub fn tables(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.active_levels().flat_map(move |l| self.orders_at(l).iter().map(move |&o| (l, o)))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableLayout {
    pub level: usize,
    pub order: usize,
    pub head: usize,
    pub target: u64,
    pub buckets: u64,
    pub multipliers: Vec<u64>,
}

/// Prime-sized tables and hash multipliers for one spec; a pure function of it.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub spec: EngramSpec,
    pub tables: Vec<TableLayout>,
}

impl Allocation {
    pub fn param_count(&self) -> u64 {
        self.tables.iter().map(|t| t.buckets).sum::<u64>() * self.spec.head_dim() as u64
    }

    pub fn table(&self, level: usize, order: usize, head: usize) -> Option<&TableLayout> {
        self.tables.iter().find(|t| t.level == level && t.order == order && t.head == head)
    }

    pub fn heads_for(&self, level: usize, order: usize) -> impl Iterator<Item = &TableLayout> {
        self.tables.iter().filter(move |t| t.level == level && t.order == order)
    }

    /// Bucket of `key` in every head of one (level, order), in head order.
    pub fn buckets_of(&self, level: usize, order: usize, key: &[u64]) -> Vec<u64> {
        self.heads_for(level, order).map(|t| hash_key(key, &t.multipliers, t.buckets)).collect()
    }
}

pub fn allocate(spec: &EngramSpec) -> Result<Allocation> {
    spec.validate()?;
    let mut tables = Vec::new();
    for (level, order) in spec.tables() {
        let target = spec.target_buckets(level, order)?;
        let primes = nearest_primes(target, spec.heads, spec.h_max);
        for (head, buckets) in primes.into_iter().enumerate() {
            tables.push(TableLayout {
                level,
                order,
                head,
                target,
                buckets,
                multipliers: multipliers(spec.seed, spec.kind.tag(), level, order, head, order),
            });
        }
    }
    Ok(Allocation { spec: spec.clone(), tables })
}
