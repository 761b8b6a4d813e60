//! Fill-reducing orderings on the symmetric adjacency graph of a matrix.
//!
//! Every function returns `perm` with `perm[k]` = original index eliminated
//! at step `k`.

use std::collections::VecDeque;

use super::SparseMatrix;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Ordering {
    Natural,
    ReverseCuthillMcKee,
    #[default]
    NestedDissection,
}

/// Undirected graph in compressed adjacency form, self loops removed.
#[derive(Clone, Debug)]
pub struct Graph {
    xadj: Vec<usize>,
    adj: Vec<usize>,
}

impl Graph {
    /// Graph of the pattern of `A + Aᵀ`.
    pub fn from_matrix<T: Real>(a: &SparseMatrix<T>) -> Self {
        let n = a.nrows();
        let mut deg = vec![0usize; n];
        for i in 0..n {
            for &j in a.row(i).0 {
                if j != i && j < n {
                    deg[i] += 1;
                    deg[j] += 1;
                }
            }
        }
        let mut xadj = vec![0usize; n + 1];
        for i in 0..n {
            xadj[i + 1] = xadj[i] + deg[i];
        }
        let mut fill = xadj.clone();
        let mut adj = vec![0usize; xadj[n]];
        for i in 0..n {
            for &j in a.row(i).0 {
                if j != i && j < n {
                    adj[fill[i]] = j;
                    fill[i] += 1;
                    adj[fill[j]] = i;
                    fill[j] += 1;
                }
            }
        }
        for i in 0..n {
            let s = &mut adj[xadj[i]..xadj[i + 1]];
            s.sort_unstable();
        }
        // drop duplicates created by symmetric storage
        let mut out_x = vec![0usize; n + 1];
        let mut out = Vec::with_capacity(adj.len() / 2 + n);
        for i in 0..n {
            let mut last = usize::MAX;
            for &j in &adj[xadj[i]..xadj[i + 1]] {
                if j != last {
                    out.push(j);
                    last = j;
                }
            }
            out_x[i + 1] = out.len();
        }
        Self { xadj: out_x, adj: out }
    }

    pub fn from_adjacency(lists: &[Vec<usize>]) -> Self {
        let n = lists.len();
        let mut b = super::TripletBuilder::<f64>::new(n, n);
        for (i, l) in lists.iter().enumerate() {
            for &j in l {
                b.push(i, j, 1.0);
            }
        }
        Self::from_matrix(&b.build())
    }

    pub fn len(&self) -> usize {
        self.xadj.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adj[self.xadj[v]..self.xadj[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.xadj[v + 1] - self.xadj[v]
    }
}

/// Pattern of `A + Aᵀ` as a matrix (values are meaningless).
pub fn symmetrized_pattern<T: Real>(a: &SparseMatrix<T>) -> SparseMatrix<T> {
    let t = a.transpose();
    SparseMatrix::linear_combination(&[(T::one(), a), (T::one(), &t)]).expect("square matrix")
}

pub fn compute<T: Real>(a: &SparseMatrix<T>, kind: Ordering) -> Vec<usize> {
    let n = a.nrows();
    match kind {
        Ordering::Natural => (0..n).collect(),
        Ordering::ReverseCuthillMcKee => reverse_cuthill_mckee(&Graph::from_matrix(a)),
        Ordering::NestedDissection => nested_dissection(&Graph::from_matrix(a)),
    }
}

/// Restricted-BFS workspace shared by both orderings. A vertex belongs to
/// the active subgraph iff `stamp[v] == current`.
struct Workspace {
    stamp: Vec<u32>,
    current: u32,
    level: Vec<u32>,
    queue: Vec<usize>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self { stamp: vec![0; n], current: 0, level: vec![u32::MAX; n], queue: Vec::with_capacity(n) }
    }

    fn activate(&mut self, nodes: &[usize]) {
        self.current += 1;
        if self.current == u32::MAX {
            self.stamp.iter_mut().for_each(|s| *s = 0);
            self.current = 1;
        }
        for &v in nodes {
            self.stamp[v] = self.current;
        }
    }

    #[inline]
    fn active(&self, v: usize) -> bool {
        self.stamp[v] == self.current
    }

    /// BFS from `root` inside the active set. Leaves the visit order in
    /// `queue`, levels in `level`, and returns the number of levels.
    fn bfs(&mut self, g: &Graph, root: usize, nodes: &[usize]) -> usize {
        for &v in nodes {
            self.level[v] = u32::MAX;
        }
        self.queue.clear();
        self.queue.push(root);
        self.level[root] = 0;
        let mut head = 0;
        let mut depth = 0;
        while head < self.queue.len() {
            let v = self.queue[head];
            head += 1;
            let lv = self.level[v];
            depth = depth.max(lv as usize + 1);
            for &w in g.neighbors(v) {
                if self.active(w) && self.level[w] == u32::MAX {
                    self.level[w] = lv + 1;
                    self.queue.push(w);
                }
            }
        }
        depth
    }

    fn active_degree(&self, g: &Graph, v: usize) -> usize {
        g.neighbors(v).iter().filter(|&&w| self.active(w)).count()
    }

    /// George-Liu pseudo-peripheral node of the component containing
    /// `start`, with the BFS from it left in the workspace.
    fn pseudo_peripheral(&mut self, g: &Graph, start: usize, nodes: &[usize]) -> (usize, usize) {
        let mut root = start;
        let mut depth = self.bfs(g, root, nodes);
        loop {
            let last = self.level[*self.queue.last().unwrap()];
            let cand = self
                .queue
                .iter()
                .rev()
                .take_while(|&&v| self.level[v] == last)
                .copied()
                .min_by_key(|&v| (self.active_degree(g, v), v))
                .unwrap();
            let d = self.bfs(g, cand, nodes);
            if d > depth {
                root = cand;
                depth = d;
            } else {
                // restore the BFS of the chosen root
                self.bfs(g, root, nodes);
                return (root, depth);
            }
        }
    }
}

pub fn reverse_cuthill_mckee(g: &Graph) -> Vec<usize> {
    let n = g.len();
    let mut ws = Workspace::new(n);
    let all: Vec<usize> = (0..n).collect();
    ws.activate(&all);
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (g.degree(v), v));
    for &seed in &by_degree {
        if placed[seed] {
            continue;
        }
        let comp = component(g, seed, &mut placed);
        ws.activate(&comp);
        let (root, _) = ws.pseudo_peripheral(g, seed, &comp);
        cuthill_mckee_from(g, root, &mut ws, &mut order);
    }
    order.reverse();
    order
}

fn component(g: &Graph, seed: usize, placed: &mut [bool]) -> Vec<usize> {
    let mut comp = vec![seed];
    placed[seed] = true;
    let mut head = 0;
    while head < comp.len() {
        let v = comp[head];
        head += 1;
        for &w in g.neighbors(v) {
            if !placed[w] {
                placed[w] = true;
                comp.push(w);
            }
        }
    }
    comp
}

/// Cuthill-McKee visit of the active set from `root`, neighbors in order of
/// increasing degree.
fn cuthill_mckee_from(g: &Graph, root: usize, ws: &mut Workspace, out: &mut Vec<usize>) {
    let active = ws.current;
    let visited_mark = active.wrapping_add(u32::MAX / 2);
    let start = out.len();
    let mut q = VecDeque::new();
    q.push_back(root);
    ws.stamp[root] = visited_mark;
    let mut nbrs = Vec::new();
    while let Some(v) = q.pop_front() {
        out.push(v);
        nbrs.clear();
        nbrs.extend(g.neighbors(v).iter().copied().filter(|&w| ws.stamp[w] == active));
        nbrs.sort_by_key(|&w| (g.degree(w), w));
        for &w in &nbrs {
            ws.stamp[w] = visited_mark;
            q.push_back(w);
        }
    }
    for &v in &out[start..] {
        ws.stamp[v] = active;
    }
}

const ND_LEAF: usize = 64;

/// Nested dissection with BFS level-set separators.
///
/// Each subgraph is split at the middle level of a BFS from a
/// pseudo-peripheral node; separator vertices without a neighbor on the far
/// side are moved back to the near side. Separators are eliminated last.
pub fn nested_dissection(g: &Graph) -> Vec<usize> {
    let n = g.len();
    let mut ws = Workspace::new(n);
    let mut order = Vec::with_capacity(n);
    let mut placed = vec![false; n];
    for seed in 0..n {
        if placed[seed] {
            continue;
        }
        let comp = component(g, seed, &mut placed);
        dissect(g, comp, &mut ws, &mut order);
    }
    debug_assert_eq!(order.len(), n);
    order
}

fn dissect(g: &Graph, nodes: Vec<usize>, ws: &mut Workspace, out: &mut Vec<usize>) {
    // explicit stack: (nodes, separator to append after both halves)
    enum Task {
        Split(Vec<usize>),
        Emit(Vec<usize>),
    }
    let mut stack = vec![Task::Split(nodes)];
    while let Some(task) = stack.pop() {
        let nodes = match task {
            Task::Emit(sep) => {
                out.extend_from_slice(&sep);
                continue;
            }
            Task::Split(nodes) => nodes,
        };
        ws.activate(&nodes);
        if nodes.len() <= ND_LEAF {
            leaf_order(g, &nodes, ws, out);
            continue;
        }
        let (_, depth) = ws.pseudo_peripheral(g, nodes[0], &nodes);
        if ws.queue.len() < nodes.len() {
            // disconnected: split off the reached component, the rest is
            // handled on its own
            let reached = ws.queue.clone();
            let rest: Vec<usize> = nodes.iter().copied().filter(|&v| ws.level[v] == u32::MAX).collect();
            stack.push(Task::Split(rest));
            stack.push(Task::Split(reached));
            continue;
        }
        if depth < 3 {
            leaf_order(g, &nodes, ws, out);
            continue;
        }
        // level whose cumulative count first reaches half
        let mut counts = vec![0usize; depth];
        for &v in &nodes {
            counts[ws.level[v] as usize] += 1;
        }
        let half = nodes.len() / 2;
        let mut acc = 0;
        let mut mid = 1;
        for (l, &c) in counts.iter().enumerate() {
            acc += c;
            if acc >= half {
                mid = l;
                break;
            }
        }
        let mid = mid.clamp(1, depth - 2) as u32;
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut sep = Vec::new();
        for &v in &nodes {
            let l = ws.level[v];
            if l < mid {
                a.push(v);
            } else if l > mid {
                b.push(v);
            } else if g.neighbors(v).iter().any(|&w| ws.active(w) && ws.level[w] == mid + 1) {
                sep.push(v);
            } else {
                a.push(v);
            }
        }
        stack.push(Task::Emit(sep));
        stack.push(Task::Split(b));
        stack.push(Task::Split(a));
    }
}

/// Small subgraphs: reverse Cuthill-McKee restricted to the active set.
fn leaf_order(g: &Graph, nodes: &[usize], ws: &mut Workspace, out: &mut Vec<usize>) {
    let start = out.len();
    let mut remaining: Vec<usize> = nodes.to_vec();
    remaining.sort_by_key(|&v| (ws.active_degree(g, v), v));
    for &seed in &remaining {
        if !ws.active(seed) {
            continue;
        }
        cuthill_mckee_from(g, seed, ws, out);
        // retire the visited component
        let visited: Vec<usize> = out[start..].iter().copied().filter(|&v| ws.active(v)).collect();
        for v in visited {
            ws.stamp[v] = 0;
        }
    }
    out[start..].reverse();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_graph(n: usize) -> Graph {
        let id = |i: usize, j: usize| j * n + i;
        let mut lists = vec![Vec::new(); n * n];
        for j in 0..n {
            for i in 0..n {
                if i + 1 < n {
                    lists[id(i, j)].push(id(i + 1, j));
                }
                if j + 1 < n {
                    lists[id(i, j)].push(id(i, j + 1));
                }
            }
        }
        Graph::from_adjacency(&lists)
    }

    fn is_permutation(p: &[usize], n: usize) -> bool {
        let mut seen = vec![false; n];
        p.len() == n && p.iter().all(|&v| v < n && !std::mem::replace(&mut seen[v], true))
    }

    #[test]
    fn orderings_are_permutations() {
        for n in [1usize, 2, 7, 40] {
            let g = grid_graph(n);
            assert!(is_permutation(&reverse_cuthill_mckee(&g), n * n));
            assert!(is_permutation(&nested_dissection(&g), n * n));
        }
    }

    #[test]
    fn handles_disconnected_graphs() {
        let lists = vec![vec![1], vec![], vec![], vec![4], vec![], vec![]];
        let g = Graph::from_adjacency(&lists);
        assert!(is_permutation(&nested_dissection(&g), 6));
        assert!(is_permutation(&reverse_cuthill_mckee(&g), 6));
    }

    #[test]
    fn rcm_bandwidth_on_path() {
        // a shuffled path should come back with bandwidth 1
        let n = 30;
        let shuffle: Vec<usize> = (0..n).map(|i| (i * 7) % n).collect();
        let mut lists = vec![Vec::new(); n];
        for k in 0..n - 1 {
            lists[shuffle[k]].push(shuffle[k + 1]);
        }
        let g = Graph::from_adjacency(&lists);
        let p = reverse_cuthill_mckee(&g);
        let mut inv = vec![0; n];
        for (k, &v) in p.iter().enumerate() {
            inv[v] = k;
        }
        for v in 0..n {
            for &w in g.neighbors(v) {
                assert!(inv[v].abs_diff(inv[w]) == 1);
            }
        }
    }
}
