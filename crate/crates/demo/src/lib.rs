//! WebAssembly bindings for the static demo page. Every export takes plain
//! numbers or strings and returns a JSON document.

use comeir::catalog::{Catalog, CatalogItem};
use comeir::decoder::{beam_search, exhaustive, Scorer};
use comeir::engram::{allocate, EngramSpec, MemoryKind};
use comeir::quantizer::{fit_rq_kmeans, quantize_catalog, CodebookStack, ItemFeatures};
use comeir::{Error, Result};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn parse_kind(kind: &str) -> Result<MemoryKind> {
    match kind {
        "intra" => Ok(MemoryKind::Intra),
        "inter" => Ok(MemoryKind::Inter),
        _ => Err(Error::InvalidArgument(format!("unknown memory kind `{kind}`"))),
    }
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::InvalidArgument(format!("`{s}` is not a number"))))
        .collect()
}

/// Per-level bases, table sizes and totals of the full-size memory layout.
pub fn scaling_rows(kind: &str, scales: &str) -> Result<Value> {
    let kind = parse_kind(kind)?;
    let grid = parse_list(scales)?;
    if grid.is_empty() {
        return Err(Error::InvalidArgument("scale grid is empty".into()));
    }
    let rows = grid
        .iter()
        .map(|&s| {
            let spec = EngramSpec::full_size(kind, s);
            let alloc = allocate(&spec)?;
            let levels: Vec<Value> = spec
                .active_levels()
                .map(|l| {
                    let rows: u64 = alloc.tables.iter().filter(|t| t.level == l).map(|t| t.buckets).sum();
                    json!({ "level": l, "base": spec.base(l), "orders": spec.orders_at(l), "buckets": rows })
                })
                .collect();
            Ok(json!({ "scale": s, "levels": levels, "raw": spec.raw_param_count(), "params": alloc.param_count() }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(json!({ "kind": kind.name(), "rows": rows }))
}

fn parse_points(text: &str) -> Result<Vec<ItemFeatures>> {
    let v = parse_list(text)?;
    if v.len() % 2 != 0 {
        return Err(Error::InvalidArgument("points must be x,y pairs".into()));
    }
    Ok(v.chunks(2).enumerate().map(|(i, p)| ItemFeatures::new(format!("p{i:03}"), p.to_vec())).collect())
}

fn fit(points: &[ItemFeatures], levels: usize, size: usize, seed: u64) -> Result<CodebookStack> {
    if levels == 0 || levels > 4 || size == 0 || size > 16 {
        return Err(Error::InvalidArgument("levels must be 1..=4 and codebook size 1..=16".into()));
    }
    fit_rq_kmeans(points, levels, size.min(points.len()), 20, seed)
}

/// Residual k-means on 2-D points: codebooks, Sids and reconstructions.
pub fn quantize_points(points: &str, levels: usize, size: usize, seed: u64) -> Result<Value> {
    let items = parse_points(points)?;
    let books = fit(&items, levels, size, seed)?;
    let q = quantize_catalog(&items, &books)?;
    let recon = |codes: &[u32]| {
        let mut r = [0.0; 2];
        for (l, &c) in codes.iter().enumerate() {
            let v = books.centroid(l, c);
            r[0] += v[0];
            r[1] += v[1];
        }
        r
    };
    let assigned: Vec<Value> = items
        .iter()
        .zip(&q.sids)
        .map(|(it, (_, sid))| json!({ "id": it.item_id, "point": it.vector, "sid": sid.codes(), "recon": recon(sid.codes()) }))
        .collect();
    Ok(json!({ "codebooks": books.layers, "items": assigned, "collisions": q.collisions.len() }))
}

/// Scores a child code by how close the query lies to the prefix's reconstruction.
struct NearestScorer<'a> {
    books: &'a CodebookStack,
    query: [f64; 2],
    sharpness: f64,
}

impl Scorer for NearestScorer<'_> {
    type State = [f64; 2];

    fn root(&mut self) -> Result<[f64; 2]> {
        Ok([0.0; 2])
    }

    fn log_probs(&mut self, level: usize, state: &[f64; 2], _prefix: &[u32], codes: &[u32]) -> Result<Vec<f64>> {
        let logits: Vec<f64> = codes
            .iter()
            .map(|&c| {
                let v = self.books.centroid(level - 1, c);
                let (dx, dy) = (self.query[0] - state[0] - v[0], self.query[1] - state[1] - v[1]);
                -self.sharpness * (dx * dx + dy * dy)
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        Ok(logits.iter().map(|l| l - z).collect())
    }

    fn advance(&mut self, level: usize, state: &[f64; 2], prefix: &[u32]) -> Result<[f64; 2]> {
        let v = self.books.centroid(level - 1, prefix[level - 1]);
        Ok([state[0] + v[0], state[1] + v[1]])
    }
}

/// Trie-constrained beam search toward a query point, next to the exhaustive ranking.
pub fn beam_points(points: &str, levels: usize, size: usize, seed: u64, qx: f64, qy: f64, beam: usize, sharpness: f64) -> Result<Value> {
    let items = parse_points(points)?;
    let books = fit(&items, levels, size, seed)?;
    let q = quantize_catalog(&items, &books)?;
    let catalog = Catalog::new(
        levels,
        size,
        items
            .iter()
            .zip(&q.sids)
            .map(|(it, (_, sid))| CatalogItem { id: it.item_id.clone(), features: it.vector.clone(), sid: sid.clone() })
            .collect(),
    )?;
    let mut scorer = NearestScorer { books: &books, query: [qx, qy], sharpness };
    let beamed = beam_search(&mut scorer, &catalog, beam)?;
    let full = exhaustive(&mut scorer, &catalog)?;
    let show = |r: &[comeir::decoder::RankedItem]| -> Vec<Value> {
        r.iter().map(|x| json!({ "id": catalog.items[x.item].id, "sid": x.sid, "score": x.score })).collect()
    };
    let agree = beamed.iter().zip(&full).take_while(|(a, b)| a.item == b.item).count();
    Ok(json!({ "beam": show(&beamed), "exhaustive": show(&full[..full.len().min(beamed.len().max(10))]), "agreeing_prefix": agree }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn scaling_table(kind: &str, scales: &str) -> std::result::Result<String, JsError> {
    to_js(scaling_rows(kind, scales))
}

#[wasm_bindgen]
pub fn quantize(points: &str, levels: usize, codebook_size: usize, seed: u64) -> std::result::Result<String, JsError> {
    to_js(quantize_points(points, levels, codebook_size, seed))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn search(
    points: &str,
    levels: usize,
    codebook_size: usize,
    seed: u64,
    x: f64,
    y: f64,
    beam: usize,
    sharpness: f64,
) -> std::result::Result<String, JsError> {
    to_js(beam_points(points, levels, codebook_size, seed, x, y, beam, sharpness))
}
