use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rooted tree over workers `0..p`.
///
/// Workers are laid out in heap order starting at `root`: the node at
/// position `k` (counting from the root, wrapping around `p`) has children at
/// positions `k*fanout+1 ..= k*fanout+fanout`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeTopology {
    p: usize,
    fanout: usize,
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

impl TreeTopology {
    pub fn new(p: usize, fanout: usize, root: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("a tree needs at least one worker".into()));
        }
        if fanout == 0 {
            return Err(Error::Config("tree fanout must be at least 1".into()));
        }
        if root >= p {
            return Err(Error::Config(format!("root {root} out of range for {p} workers")));
        }
        let id = |pos: usize| (root + pos) % p;
        let pos = |id: usize| (id + p - root) % p;
        let mut parent = vec![None; p];
        let mut children = vec![Vec::new(); p];
        for w in 0..p {
            let k = pos(w);
            if k > 0 {
                parent[w] = Some(id((k - 1) / fanout));
            }
            let first = k * fanout + 1;
            children[w] = (first..first + fanout).filter(|&c| c < p).map(id).collect();
            children[w].sort_unstable();
        }
        Ok(TreeTopology { p, fanout, root, parent, children })
    }

    /// Fanout-2 tree rooted at worker 0.
    pub fn binary(p: usize) -> Result<Self> {
        Self::new(p, 2, 0)
    }

    pub fn size(&self) -> usize {
        self.p
    }

    pub fn fanout(&self) -> usize {
        self.fanout
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, w: usize) -> Option<usize> {
        self.parent[w]
    }

    /// Children in ascending worker id.
    pub fn children(&self, w: usize) -> &[usize] {
        &self.children[w]
    }

    /// `[w, parent(w), ..., root]`
    pub fn path_to_root(&self, w: usize) -> Vec<usize> {
        let mut path = vec![w];
        let mut cur = w;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path
    }

    /// Every worker id in the subtree of `w`, ascending.
    pub fn subtree(&self, w: usize) -> Vec<usize> {
        let mut out = vec![w];
        let mut i = 0;
        while i < out.len() {
            out.extend_from_slice(&self.children[out[i]]);
            i += 1;
        }
        out.sort_unstable();
        out
    }
}
