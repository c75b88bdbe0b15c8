//! Fixed balanced s-ary tree indexing shared by every encoded computation
//! graph of a given (fan-out, depth). Positions are 0-indexed in BFS order:
//! the root is position 0 and `parent(t) = (t - 1) / s`.

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct TreeShape {
    /// Neighbor sampling number s.
    pub fanout: usize,
    /// Depth L (number of hops from the root).
    pub depth: usize,
}

impl TreeShape {
    pub fn new(fanout: usize, depth: usize) -> Result<Self> {
        if fanout == 0 || depth == 0 {
            return Err(Error::Invalid(format!(
                "tree shape requires fanout >= 1 and depth >= 1, got s={fanout}, L={depth}"
            )));
        }
        let shape = TreeShape { fanout, depth };
        // Guard against shapes whose node count overflows practical sizes.
        if shape.checked_node_count().is_none() {
            return Err(Error::Invalid(format!(
                "tree shape s={fanout}, L={depth} is too large"
            )));
        }
        Ok(shape)
    }

    fn checked_node_count(&self) -> Option<usize> {
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 0..=self.depth {
            total = total.checked_add(level)?;
            level = level.checked_mul(self.fanout)?;
            if total > (1 << 30) {
                return None;
            }
        }
        Some(total)
    }

    /// Total node count T = (s^(L+1) - 1) / (s - 1), or L + 1 when s = 1.
    pub fn node_count(&self) -> usize {
        self.checked_node_count().expect("validated at construction")
    }

    /// Number of nodes in layer `l` (s^l).
    pub fn layer_width(&self, layer: usize) -> usize {
        self.fanout.pow(layer as u32)
    }

    /// First BFS position of layer `l`.
    pub fn layer_start(&self, layer: usize) -> usize {
        let mut start = 0;
        for l in 0..layer {
            start += self.layer_width(l);
        }
        start
    }

    /// Layer (distance from the root) of BFS position `t`.
    pub fn layer_of(&self, t: usize) -> usize {
        debug_assert!(t < self.node_count());
        let mut start = 0;
        for l in 0..=self.depth {
            let width = self.layer_width(l);
            if t < start + width {
                return l;
            }
            start += width;
        }
        unreachable!("position out of range")
    }

    pub fn parent(&self, t: usize) -> Option<usize> {
        if t == 0 {
            None
        } else {
            Some((t - 1) / self.fanout)
        }
    }

    /// Children positions of `t`, empty for leaf-layer positions.
    pub fn children(&self, t: usize) -> std::ops::Range<usize> {
        let first = t * self.fanout + 1;
        if first >= self.node_count() {
            0..0
        } else {
            first..first + self.fanout
        }
    }

    /// Ancestor chain of `t` ordered root -> parent. Empty for the root.
    pub fn ancestors(&self, t: usize) -> Vec<usize> {
        let mut chain = Vec::with_capacity(self.layer_of(t));
        let mut cur = t;
        while let Some(p) = self.parent(cur) {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    /// BFS positions of the leaf layer.
    pub fn leaves(&self) -> std::ops::Range<usize> {
        self.layer_start(self.depth)..self.node_count()
    }

    /// Root-to-leaf position chain (length L + 1) for the given leaf.
    pub fn path_to(&self, leaf: usize) -> Vec<usize> {
        let mut path = self.ancestors(leaf);
        path.push(leaf);
        path
    }

    /// All root-to-leaf paths in leaf order (s^L paths of length L + 1).
    pub fn all_paths(&self) -> Vec<Vec<usize>> {
        self.leaves().map(|leaf| self.path_to(leaf)).collect()
    }
}

/// The constant parent-child edge list shared by every computation graph of
/// this shape, in (parent, child) order with children ascending.
pub fn tree_adjacency(shape: TreeShape) -> Vec<(u32, u32)> {
    let t = shape.node_count();
    let mut edges = Vec::with_capacity(t - 1);
    for child in 1..t {
        let parent = shape.parent(child).unwrap();
        edges.push((parent as u32, child as u32));
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_count_formula() {
        assert_eq!(TreeShape::new(2, 2).unwrap().node_count(), 7);
        assert_eq!(TreeShape::new(1, 3).unwrap().node_count(), 4);
        assert_eq!(TreeShape::new(3, 2).unwrap().node_count(), 13);
        assert_eq!(TreeShape::new(5, 2).unwrap().node_count(), 31);
        // (s^(L+1) - 1) / (s - 1) checked directly.
        for s in 2..=5usize {
            for l in 1..=3usize {
                let shape = TreeShape::new(s, l).unwrap();
                let expect = (s.pow(l as u32 + 1) - 1) / (s - 1);
                assert_eq!(shape.node_count(), expect);
            }
        }
    }

    #[test]
    fn adjacency_is_forced_by_bfs_indexing() {
        let edges = tree_adjacency(TreeShape::new(2, 2).unwrap());
        assert_eq!(edges, vec![(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (2, 6)]);
        let path = tree_adjacency(TreeShape::new(1, 3).unwrap());
        assert_eq!(path, vec![(0, 1), (1, 2), (2, 3)]);
        let wide = tree_adjacency(TreeShape::new(3, 2).unwrap());
        assert_eq!(wide.len(), 12);
        assert_eq!(TreeShape::new(3, 2).unwrap().node_count(), 13);
    }

    #[test]
    fn layers_and_parents_are_consistent() {
        let shape = TreeShape::new(2, 2).unwrap();
        let layers: Vec<usize> = (0..7).map(|t| shape.layer_of(t)).collect();
        assert_eq!(layers, vec![0, 1, 1, 2, 2, 2, 2]);
        for t in 1..7 {
            let p = shape.parent(t).unwrap();
            assert_eq!(shape.layer_of(p) + 1, shape.layer_of(t));
            assert!(shape.children(p).contains(&t));
        }
    }

    #[test]
    fn paths_cover_every_position() {
        // s=2, L=2 gives exactly the four forced paths.
        let shape = TreeShape::new(2, 2).unwrap();
        assert_eq!(
            shape.all_paths(),
            vec![
                vec![0, 1, 3],
                vec![0, 1, 4],
                vec![0, 2, 5],
                vec![0, 2, 6],
            ]
        );
        // s=3, L=2: 9 paths; the root appears 9 times, layer-1 positions 3 times.
        let shape = TreeShape::new(3, 2).unwrap();
        let paths = shape.all_paths();
        assert_eq!(paths.len(), 9);
        let mut count = vec![0usize; shape.node_count()];
        for p in &paths {
            assert_eq!(p.len(), 3);
            for &t in p {
                count[t] += 1;
            }
        }
        assert_eq!(count[0], 9);
        for t in 1..4 {
            assert_eq!(count[t], 3);
        }
        for t in shape.leaves() {
            assert_eq!(count[t], 1);
        }
    }

    #[test]
    fn single_fanout_is_one_path() {
        let shape = TreeShape::new(1, 3).unwrap();
        assert_eq!(shape.all_paths(), vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn degenerate_shapes_rejected() {
        assert!(TreeShape::new(0, 2).is_err());
        assert!(TreeShape::new(2, 0).is_err());
    }
}
