//! Items with their features and Sids, plus the prefix tree over all Sids.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::quantizer::Sid;

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogItem {
    pub id: String,
    pub features: Vec<f64>,
    pub sid: Sid,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct TrieNode {
    children: BTreeMap<u32, usize>,
    items: Vec<usize>,
}

/// Trie over catalog Sids; leaves list the item indices sharing a Sid.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixTree {
    levels: usize,
    nodes: Vec<TrieNode>,
}

impl PrefixTree {
    pub fn new(levels: usize) -> Self {
        Self { levels, nodes: vec![TrieNode::default()] }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn insert(&mut self, sid: &Sid, item: usize) {
        assert_eq!(sid.len(), self.levels, "sid length");
        let mut node = 0;
        for &c in sid.codes() {
            node = match self.nodes[node].children.get(&c) {
                Some(&n) => n,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].children.insert(c, n);
                    n
                }
            };
        }
        self.nodes[node].items.push(item);
    }

    fn find(&self, prefix: &[u32]) -> Option<usize> {
        let mut node = 0;
        for c in prefix {
            node = *self.nodes[node].children.get(c)?;
        }
        Some(node)
    }

    pub fn contains_prefix(&self, prefix: &[u32]) -> bool {
        prefix.len() <= self.levels && self.find(prefix).is_some()
    }

    /// Children of `prefix` in ascending code order.
    pub fn valid_codes(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        if prefix.len() >= self.levels {
            return Err(Error::InvalidArgument(format!("prefix length {} must be below {}", prefix.len(), self.levels)));
        }
        let node = self.find(prefix).ok_or_else(|| Error::PrefixNotInTree(prefix.to_vec()))?;
        Ok(self.nodes[node].children.keys().copied().collect())
    }

    /// Items whose Sid equals `sid` (empty when absent).
    pub fn items(&self, sid: &[u32]) -> &[usize] {
        match self.find(sid) {
            Some(n) if sid.len() == self.levels => &self.nodes[n].items,
            _ => &[],
        }
    }

    /// Every complete Sid in lexicographic order.
    pub fn sids(&self) -> Vec<Vec<u32>> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, prefix)) = stack.pop() {
            if prefix.len() == self.levels {
                out.push(prefix);
                continue;
            }
            for (&c, &child) in self.nodes[node].children.iter().rev() {
                let mut p = prefix.clone();
                p.push(c);
                stack.push((child, p));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub levels: usize,
    pub codebook_size: usize,
    pub items: Vec<CatalogItem>,
    index: HashMap<String, usize>,
    pub tree: PrefixTree,
}

impl Catalog {
    pub fn new(levels: usize, codebook_size: usize, items: Vec<CatalogItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let dim = items[0].features.len();
        let mut index = HashMap::with_capacity(items.len());
        let mut tree = PrefixTree::new(levels);
        for (i, item) in items.iter().enumerate() {
            if item.sid.len() != levels {
                return Err(Error::DimensionMismatch { expected: levels, got: item.sid.len() });
            }
            if let Some(&c) = item.sid.codes().iter().find(|&&c| c as usize >= codebook_size) {
                return Err(Error::InvalidArgument(format!("code {c} out of range for item `{}`", item.id)));
            }
            if item.features.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: item.features.len() });
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate item id `{}`", item.id)));
            }
            tree.insert(&item.sid, i);
        }
        Ok(Self { levels, codebook_size, items, index, tree })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.items[0].features.len()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index.get(id).copied().ok_or_else(|| Error::UnknownItem(id.to_string()))
    }

    pub fn sid(&self, item: usize) -> &Sid {
        &self.items[item].sid
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog(sids: &[[u32; 3]]) -> Catalog {
        let items = sids
            .iter()
            .enumerate()
            .map(|(i, s)| CatalogItem { id: format!("i{i}"), features: vec![0.0], sid: Sid(s.to_vec()) })
            .collect();
        Catalog::new(3, 8, items).unwrap()
    }

    #[test]
    fn valid_code_examples() {
        let c = catalog(&[[1, 2, 3], [1, 2, 4], [2, 1, 1]]);
        assert_eq!(c.tree.valid_codes(&[]).unwrap(), vec![1, 2]);
        assert_eq!(c.tree.valid_codes(&[1, 2]).unwrap(), vec![3, 4]);
        assert!(matches!(c.tree.valid_codes(&[3]), Err(Error::PrefixNotInTree(_))));
        assert!(c.tree.valid_codes(&[1, 2, 3]).is_err());
    }

    #[test]
    fn single_item_has_singleton_children() {
        let c = catalog(&[[5, 0, 7]]);
        assert_eq!(c.tree.valid_codes(&[]).unwrap(), vec![5]);
        assert_eq!(c.tree.valid_codes(&[5]).unwrap(), vec![0]);
        assert_eq!(c.tree.valid_codes(&[5, 0]).unwrap(), vec![7]);
    }

    #[test]
    fn collisions_share_a_leaf() {
        let c = catalog(&[[1, 1, 1], [0, 0, 0], [1, 1, 1]]);
        assert_eq!(c.tree.items(&[1, 1, 1]), &[0, 2]);
        assert_eq!(c.tree.sids(), vec![vec![0, 0, 0], vec![1, 1, 1]]);
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(Catalog::new(3, 8, vec![]), Err(Error::EmptyCatalog)));
        let bad = vec![CatalogItem { id: "a".into(), features: vec![], sid: Sid(vec![9, 0, 0]) }];
        assert!(Catalog::new(3, 8, bad).is_err());
        let c = catalog(&[[0, 0, 0]]);
        assert!(matches!(c.index_of("zz"), Err(Error::UnknownItem(_))));
    }
}
