//! Residual quantization of item feature vectors into fixed-length semantic IDs.

mod kmeans;
mod rqvae;

use std::collections::BTreeMap;
use std::fmt;

pub use kmeans::{fit_rq_kmeans, kmeans, KMeansFit};
pub use rqvae::{rqvae_loss, rqvae_loss_on_tape, train_rqvae, RqVae, RqVaeConfig, StopGradValues};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ItemFeatures {
    pub item_id: String,
    pub vector: Vec<f64>,
}

impl ItemFeatures {
    pub fn new(item_id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self { item_id: item_id.into(), vector }
    }
}

/// Checks the shared-dimension and finiteness invariants of a feature set.
pub fn validate_features(features: &[ItemFeatures]) -> Result<usize> {
    let first = features.first().ok_or(Error::NoItems)?;
    let dim = first.vector.len();
    for f in features {
        if f.vector.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: f.vector.len() });
        }
        if f.vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument(format!("item `{}` has a non-finite feature", f.item_id)));
        }
    }
    Ok(dim)
}

/// Ordered tuple of discrete codes, one per quantization layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sid(pub Vec<u32>);

impl Sid {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn prefix(&self, len: usize) -> &[u32] {
        &self.0[..len]
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

/// One codebook per layer; `layers[l][j]` is centroid `j` of layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodebookStack {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl CodebookStack {
    pub fn new(layers: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let stack = Self { layers };
        stack.validate()?;
        Ok(stack)
    }

    pub fn validate(&self) -> Result<usize> {
        let mut dim = None;
        for (l, book) in self.layers.iter().enumerate() {
            if book.is_empty() {
                return Err(Error::EmptyCodebook { layer: l });
            }
            for c in book {
                match dim {
                    None => dim = Some(c.len()),
                    Some(d) if d != c.len() => return Err(Error::DimensionMismatch { expected: d, got: c.len() }),
                    _ => {}
                }
            }
        }
        dim.ok_or_else(|| Error::InvalidArgument("codebook stack has no layers".into()))
    }

    pub fn levels(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().flatten().next().map_or(0, Vec::len)
    }

    pub fn size(&self, layer: usize) -> usize {
        self.layers[layer].len()
    }

    pub fn centroid(&self, layer: usize, code: u32) -> &[f64] {
        &self.layers[layer][code as usize]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub sid: Sid,
    /// `residuals[l]` is the residual left after layer `l` (r_1 ..= r_L).
    pub residuals: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid, ties resolved to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn assign_residual(z: &[f64], books: &CodebookStack) -> Result<Assignment> {
    let mut residual = z.to_vec();
    let mut reconstruction = vec![0.0; z.len()];
    let mut codes = Vec::with_capacity(books.levels());
    let mut residuals = Vec::with_capacity(books.levels());
    for (l, book) in books.layers.iter().enumerate() {
        if book.is_empty() {
            return Err(Error::EmptyCodebook { layer: l });
        }
        for c in book {
            if c.len() != z.len() {
                return Err(Error::DimensionMismatch { expected: c.len(), got: z.len() });
            }
        }
        let (j, _) = nearest(&residual, book);
        let b = &book[j];
        for ((r, rec), bb) in residual.iter_mut().zip(reconstruction.iter_mut()).zip(b) {
            *r -= bb;
            *rec += bb;
        }
        codes.push(j as u32);
        residuals.push(residual.clone());
    }
    Ok(Assignment { sid: Sid(codes), residuals, reconstruction })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantizedCatalog {
    pub sids: Vec<(String, Sid)>,
    /// Groups of two or more items sharing one Sid, ordered by Sid then item id.
    pub collisions: Vec<(Sid, Vec<String>)>,
}

impl QuantizedCatalog {
    pub fn sid_of(&self, item_id: &str) -> Option<&Sid> {
        self.sids.iter().find(|(id, _)| id == item_id).map(|(_, s)| s)
    }
}

pub fn collision_groups(sids: &[(String, Sid)]) -> Vec<(Sid, Vec<String>)> {
    let mut groups: BTreeMap<&Sid, Vec<String>> = BTreeMap::new();
    for (id, sid) in sids {
        groups.entry(sid).or_default().push(id.clone());
    }
    groups
        .into_iter()
        .filter(|(_, ids)| ids.len() > 1)
        .map(|(sid, mut ids)| {
            ids.sort();
            (sid.clone(), ids)
        })
        .collect()
}

/// Assigns every item a Sid from pre-computed latent vectors.
pub fn quantize_catalog(features: &[ItemFeatures], books: &CodebookStack) -> Result<QuantizedCatalog> {
    let sids = features
        .iter()
        .map(|f| Ok((f.item_id.clone(), assign_residual(&f.vector, books)?.sid)))
        .collect::<Result<Vec<_>>>()?;
    let collisions = collision_groups(&sids);
    Ok(QuantizedCatalog { sids, collisions })
}

/// Either codebook flavour, exposed through one latent mapping.
#[derive(Clone, Debug)]
pub enum Quantizer {
    KMeans(CodebookStack),
    Vae(RqVae),
}

impl Quantizer {
    pub fn books(&self) -> CodebookStack {
        match self {
            Quantizer::KMeans(b) => b.clone(),
            Quantizer::Vae(v) => v.codebooks(),
        }
    }

    pub fn latent(&self, m: &[f64]) -> Vec<f64> {
        match self {
            Quantizer::KMeans(_) => m.to_vec(),
            Quantizer::Vae(v) => v.encode(m),
        }
    }

    pub fn quantize(&self, features: &[ItemFeatures]) -> Result<QuantizedCatalog> {
        let books = self.books();
        let latents: Vec<ItemFeatures> =
            features.iter().map(|f| ItemFeatures::new(f.item_id.clone(), self.latent(&f.vector))).collect();
        quantize_catalog(&latents, &books)
    }
}
