//! Static R-tree bulk-loaded with Sort-Tile-Recursive packing.
//!
//! Entries are `(position, bbox)` pairs where `position` is whatever the
//! caller uses to address its own item slice. The tree is immutable once
//! built, so it can be shared across threads for read-only queries.

use super::{BBox, GeometryError, Polygon};

const NODE_CAPACITY: usize = 16;

#[derive(Debug, Clone, Copy)]
struct Node {
    bbox: BBox,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone)]
pub struct SpatialIndex {
    items: Vec<(BBox, usize)>,
    /// `levels[0]` nodes address `items`; `levels[l]` nodes address `levels[l - 1]`.
    levels: Vec<Vec<Node>>,
}

impl SpatialIndex {
    pub fn build(entries: impl IntoIterator<Item = (usize, BBox)>) -> Result<Self, GeometryError> {
        let mut items: Vec<(BBox, usize)> = entries.into_iter().map(|(id, b)| (b, id)).collect();
        if items.is_empty() {
            return Err(GeometryError::EmptyIndex);
        }
        str_sort(&mut items, |e| e.0);
        let mut nodes = pack(&items, |e| e.0);
        let mut levels = Vec::new();
        while nodes.len() > 1 {
            str_sort(&mut nodes, |n| n.bbox);
            let parents = pack(&nodes, |n| n.bbox);
            levels.push(nodes);
            nodes = parents;
        }
        levels.push(nodes);
        Ok(Self { items, levels })
    }

    /// Indexes polygons by their position in `items`.
    pub fn from_polygons<'a>(
        items: impl IntoIterator<Item = &'a Polygon>,
    ) -> Result<Self, GeometryError> {
        Self::build(items.into_iter().enumerate().map(|(i, p)| (i, p.bbox())))
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Positions of every entry whose box intersects `query`, ascending.
    pub fn query(&self, query: &BBox) -> Vec<usize> {
        let mut out = Vec::new();
        let top = self.levels.len() - 1;
        let mut stack: Vec<(usize, usize)> =
            (0..self.levels[top].len()).map(|i| (top, i)).collect();
        while let Some((level, idx)) = stack.pop() {
            let node = &self.levels[level][idx];
            if !node.bbox.intersects(query) {
                continue;
            }
            if level == 0 {
                out.extend(
                    self.items[node.start..node.end]
                        .iter()
                        .filter(|(b, _)| b.intersects(query))
                        .map(|&(_, id)| id),
                );
            } else {
                stack.extend((node.start..node.end).map(|c| (level - 1, c)));
            }
        }
        out.sort_unstable();
        out
    }

    /// Candidate positions for an exact-geometry refinement against `p`.
    pub fn query_candidates(&self, p: &Polygon) -> Vec<usize> {
        self.query(&p.bbox())
    }
}

fn str_sort<T>(entries: &mut [T], bbox: impl Fn(&T) -> BBox) {
    let key_x = |e: &T| {
        let b = bbox(e);
        b.min_lon + b.max_lon
    };
    let key_y = |e: &T| {
        let b = bbox(e);
        b.min_lat + b.max_lat
    };
    let n_leaves = entries.len().div_ceil(NODE_CAPACITY);
    let n_strips = (n_leaves as f64).sqrt().ceil().max(1.0) as usize;
    let strip_len = n_strips * NODE_CAPACITY;
    entries.sort_by(|a, b| key_x(a).total_cmp(&key_x(b)));
    for strip in entries.chunks_mut(strip_len) {
        strip.sort_by(|a, b| key_y(a).total_cmp(&key_y(b)));
    }
}

fn pack<T>(entries: &[T], bbox: impl Fn(&T) -> BBox) -> Vec<Node> {
    entries
        .chunks(NODE_CAPACITY)
        .enumerate()
        .map(|(i, chunk)| {
            let b = chunk
                .iter()
                .skip(1)
                .fold(bbox(&chunk[0]), |acc, e| acc.union(&bbox(e)));
            let start = i * NODE_CAPACITY;
            Node {
                bbox: b,
                start,
                end: start + chunk.len(),
            }
        })
        .collect()
}
