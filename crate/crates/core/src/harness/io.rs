//! Readers and writers for the pipeline's text files.
//!
//! Every TSV starts with a `#`-prefixed schema line naming its version and
//! columns; readers skip `#` lines. CSV files start with a fixed header row.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::catalog::{Catalog, CatalogItem};
use crate::decoder::Metrics;
use crate::error::{Error, Result};
use crate::quantizer::{CodebookStack, ItemFeatures, QuantizedCatalog, Sid};

pub const ITEMS_SCHEMA: &str = "#comeir-items v1\titem_id\tfeatures";
pub const INTERACTIONS_SCHEMA: &str = "#comeir-interactions v1\tuser_id\titem_id\tposition";
pub const SIDS_SCHEMA: &str = "#comeir-sids v1\titem_id\tcodes";
pub const COLLISIONS_SCHEMA: &str = "#comeir-collisions v1\tsid\titem_ids";
pub const CODEBOOKS_SCHEMA: &str = "#comeir-codebooks v1\tlayer\tcode\tvector";
pub const EVAL_HEADER: &str = "user_id,target_item,rank";

fn floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str, line: usize) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| Error::Parse { line, msg: format!("bad float `{t}`") }))
        .collect()
}

/// Non-comment lines with their 1-based numbers, split on tabs.
fn rows(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| (i + 1, l.split('\t').collect()))
}

fn expect_cols(cols: &[&str], n: usize, line: usize) -> Result<()> {
    if cols.len() != n {
        return Err(Error::Parse { line, msg: format!("expected {n} tab-separated columns, found {}", cols.len()) });
    }
    Ok(())
}

pub fn format_items(items: &[ItemFeatures]) -> String {
    let mut s = format!("{ITEMS_SCHEMA}\n");
    for it in items {
        let _ = writeln!(s, "{}\t{}", it.item_id, floats(&it.vector));
    }
    s
}

pub fn parse_items(text: &str) -> Result<Vec<ItemFeatures>> {
    let items = rows(text)
        .map(|(line, cols)| {
            expect_cols(&cols, 2, line)?;
            Ok(ItemFeatures::new(cols[0], parse_floats(cols[1], line)?))
        })
        .collect::<Result<Vec<_>>>()?;
    crate::quantizer::validate_features(&items)?;
    Ok(items)
}

pub fn format_interactions(users: &[(String, Vec<String>)]) -> String {
    let mut s = format!("{INTERACTIONS_SCHEMA}\n");
    for (u, seq) in users {
        for (t, item) in seq.iter().enumerate() {
            let _ = writeln!(s, "{u}\t{item}\t{t}");
        }
    }
    s
}

/// Users in order of first appearance with their items sorted by position.
pub fn parse_interactions(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut order: Vec<String> = Vec::new();
    let mut seqs: HashMap<String, Vec<(u64, String)>> = HashMap::new();
    for (line, cols) in rows(text) {
        expect_cols(&cols, 3, line)?;
        let pos: u64 = cols[2].trim().parse().map_err(|_| Error::Parse { line, msg: format!("bad position `{}`", cols[2]) })?;
        let entry = seqs.entry(cols[0].to_string()).or_insert_with(|| {
            order.push(cols[0].to_string());
            Vec::new()
        });
        if entry.iter().any(|(p, _)| *p == pos) {
            return Err(Error::Parse { line, msg: format!("duplicate position {pos} for user `{}`", cols[0]) });
        }
        entry.push((pos, cols[1].to_string()));
    }
    Ok(order
        .into_iter()
        .map(|u| {
            let mut v = seqs.remove(&u).unwrap();
            v.sort_by_key(|(p, _)| *p);
            (u, v.into_iter().map(|(_, i)| i).collect())
        })
        .collect())
}

pub fn format_sids(q: &QuantizedCatalog) -> String {
    let mut s = format!("{SIDS_SCHEMA}\n");
    for (id, sid) in &q.sids {
        let _ = writeln!(s, "{id}\t{sid}");
    }
    s
}

pub fn parse_sids(text: &str) -> Result<Vec<(String, Sid)>> {
    rows(text)
        .map(|(line, cols)| {
            expect_cols(&cols, 2, line)?;
            let codes = cols[1]
                .split_whitespace()
                .map(|c| c.parse::<u32>().map_err(|_| Error::Parse { line, msg: format!("bad code `{c}`") }))
                .collect::<Result<Vec<_>>>()?;
            if codes.is_empty() {
                return Err(Error::Parse { line, msg: "empty Sid".into() });
            }
            Ok((cols[0].to_string(), Sid(codes)))
        })
        .collect()
}

pub fn format_collisions(q: &QuantizedCatalog) -> String {
    let mut s = format!("{COLLISIONS_SCHEMA}\n");
    for (sid, ids) in &q.collisions {
        let _ = writeln!(s, "{sid}\t{}", ids.join(","));
    }
    s
}

pub fn format_codebooks(books: &CodebookStack) -> String {
    let mut s = format!("{CODEBOOKS_SCHEMA}\n");
    for (l, layer) in books.layers.iter().enumerate() {
        for (c, v) in layer.iter().enumerate() {
            let _ = writeln!(s, "{l}\t{c}\t{}", floats(v));
        }
    }
    s
}

pub fn parse_codebooks(text: &str) -> Result<CodebookStack> {
    let mut layers: Vec<Vec<Vec<f64>>> = Vec::new();
    for (line, cols) in rows(text) {
        expect_cols(&cols, 3, line)?;
        let bad = |m: &str| Error::Parse { line, msg: m.to_string() };
        let l: usize = cols[0].parse().map_err(|_| bad("bad layer"))?;
        let c: usize = cols[1].parse().map_err(|_| bad("bad code"))?;
        if l > layers.len() || (l == layers.len() && c != 0) {
            return Err(bad("layers must be listed in order"));
        }
        if l == layers.len() {
            layers.push(Vec::new());
        }
        if c != layers[l].len() {
            return Err(bad("codes must be listed in order"));
        }
        layers[l].push(parse_floats(cols[2], line)?);
    }
    CodebookStack::new(layers)
}

/// Joins features and Sids by item id into a catalog (feature order wins).
pub fn build_catalog(items: &[ItemFeatures], sids: &[(String, Sid)], codebook_size: usize) -> Result<Catalog> {
    let by_id: HashMap<&str, &Sid> = sids.iter().map(|(i, s)| (i.as_str(), s)).collect();
    let levels = sids.first().map(|(_, s)| s.len()).ok_or(Error::EmptyCatalog)?;
    let rows = items
        .iter()
        .map(|it| {
            let sid = by_id.get(it.item_id.as_str()).ok_or_else(|| Error::UnknownItem(it.item_id.clone()))?;
            Ok(CatalogItem { id: it.item_id.clone(), features: it.vector.clone(), sid: (*sid).clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Catalog::new(levels, codebook_size, rows)
}

/// Interaction sequences as catalog indices; unknown items are an error.
pub fn index_sequences(catalog: &Catalog, users: &[(String, Vec<String>)]) -> Result<Vec<Vec<usize>>> {
    users.iter().map(|(_, seq)| seq.iter().map(|i| catalog.index_of(i)).collect()).collect()
}

/// Per-user ranks plus a closing summary row. A target outside the returned
/// list has an empty rank.
pub fn format_eval(rows: &[(String, String, Option<usize>)], m: &Metrics) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for (u, t, r) in rows {
        let r = r.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{u},{t},{r}");
    }
    let _ = writeln!(
        s,
        "summary,H@5={:.6};H@10={:.6};N@5={:.6};N@10={:.6},{}",
        m.hit5, m.hit10, m.ndcg5, m.ndcg10, m.users
    );
    s
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::collision_groups;

    #[test]
    fn items_round_trip_exactly() {
        let items = vec![
            ItemFeatures::new("a", vec![0.1, -2.5e-7, 1.0 / 3.0]),
            ItemFeatures::new("b", vec![f64::MIN_POSITIVE, 4.0, -0.0]),
        ];
        let text = format_items(&items);
        assert!(text.starts_with(ITEMS_SCHEMA));
        let back = parse_items(&text).unwrap();
        for (x, y) in items.iter().zip(&back) {
            assert_eq!(x.item_id, y.item_id);
            assert!(x.vector.iter().zip(&y.vector).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn interactions_are_chronological_and_grouped() {
        let text = "#x\nu2\tb\t1\nu1\ta\t0\nu2\tc\t0\n";
        let users = parse_interactions(text).unwrap();
        assert_eq!(users, vec![("u2".into(), vec!["c".into(), "b".into()]), ("u1".into(), vec!["a".into()])]);
        let again = parse_interactions(&format_interactions(&users)).unwrap();
        assert_eq!(again, users);
        assert!(parse_interactions("u\ta\t0\nu\tb\t0\n").is_err());
        assert!(matches!(parse_interactions("u\ta\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn sids_and_collisions_formats() {
        let sids = vec![("a".to_string(), Sid(vec![1, 2, 3])), ("b".to_string(), Sid(vec![1, 2, 3])), ("c".to_string(), Sid(vec![0, 0, 1]))];
        let q = QuantizedCatalog { collisions: collision_groups(&sids), sids };
        let text = format_sids(&q);
        assert!(text.contains("a\t1 2 3\n"));
        assert_eq!(parse_sids(&text).unwrap(), q.sids);
        assert_eq!(format_collisions(&q), format!("{COLLISIONS_SCHEMA}\n1 2 3\ta,b\n"));
        assert!(parse_sids("a\t1 x\n").is_err());
    }

    #[test]
    fn codebooks_round_trip() {
        let books = CodebookStack::new(vec![vec![vec![1.0, 2.0], vec![0.5, -1.0]], vec![vec![0.25, 0.0]]]).unwrap();
        assert_eq!(parse_codebooks(&format_codebooks(&books)).unwrap(), books);
        assert!(parse_codebooks("0\t1\t1.0,2.0\n").is_err());
    }

    #[test]
    fn catalog_join_and_unknown_items() {
        let items = vec![ItemFeatures::new("a", vec![1.0]), ItemFeatures::new("b", vec![2.0])];
        let sids = vec![("b".to_string(), Sid(vec![1, 0])), ("a".to_string(), Sid(vec![0, 1]))];
        let cat = build_catalog(&items, &sids, 2).unwrap();
        assert_eq!(cat.sid(0), &Sid(vec![0, 1]));
        let seqs = index_sequences(&cat, &[("u".into(), vec!["b".into(), "a".into()])]).unwrap();
        assert_eq!(seqs, vec![vec![1, 0]]);
        assert!(index_sequences(&cat, &[("u".into(), vec!["zz".into()])]).is_err());
        assert!(build_catalog(&items, &sids[..1], 2).is_err());
    }

    #[test]
    fn eval_csv_layout() {
        let m = Metrics { hit5: 0.5, hit10: 0.5, ndcg5: 0.25, ndcg10: 0.25, users: 2 };
        let s = format_eval(&[("u1".into(), "a".into(), Some(3)), ("u2".into(), "b".into(), None)], &m);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], EVAL_HEADER);
        assert_eq!(lines[1], "u1,a,3");
        assert_eq!(lines[2], "u2,b,");
        assert_eq!(lines[3], "summary,H@5=0.500000;H@10=0.500000;N@5=0.250000;N@10=0.250000,2");
    }
}
