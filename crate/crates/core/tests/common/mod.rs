//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use tsr_core::grammar::{NodeKind, TableNode, TableTree};

/// Every ordered tree with `n` nodes, as preorder parent arrays (`p[0] = 0`).
pub fn shapes(n: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, stack: &mut Vec<usize>, parents: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if left == 0 {
            out.push(parents.clone());
            return;
        }
        // Open a child under each possible ancestor on the rightmost path.
        for depth in 0..stack.len() {
            let saved: Vec<usize> = stack.drain(depth + 1..).collect();
            let me = parents.len();
            parents.push(stack[depth]);
            stack.push(me);
            rec(left - 1, stack, parents, out);
            stack.pop();
            parents.pop();
            stack.extend(saved);
        }
    }
    if n == 0 {
        return vec![];
    }
    let mut out = Vec::new();
    rec(n - 1, &mut vec![0], &mut vec![0], &mut out);
    out
}

/// Ancestor relation and preorder position for a parent array.
struct Rel {
    anc: Vec<Vec<bool>>,
}

impl Rel {
    fn new(p: &[usize]) -> Self {
        let n = p.len();
        let mut anc = vec![vec![false; n]; n];
        for v in 1..n {
            let mut u = p[v];
            loop {
                anc[u][v] = true;
                if u == 0 {
                    break;
                }
                u = p[u];
            }
        }
        Self { anc }
    }
    /// `a` lies entirely left of `b`: earlier in preorder and not an ancestor.
    fn left(&self, a: usize, b: usize) -> bool {
        a < b && !self.anc[a][b]
    }
}

fn compatible(r1: &Rel, r2: &Rel, (i1, j1): (usize, usize), (i2, j2): (usize, usize)) -> bool {
    if (i1 == i2) != (j1 == j2) {
        return false;
    }
    r1.anc[i1][i2] == r2.anc[j1][j2]
        && r1.anc[i2][i1] == r2.anc[j2][j1]
        && r1.left(i1, i2) == r2.left(j1, j2)
        && r1.left(i2, i1) == r2.left(j2, j1)
}

/// All edit mappings between two shapes that cannot be extended by another
/// pair. Pair `(i, j)` is bit `i * n2 + j`.
pub fn maximal_mappings(p1: &[usize], p2: &[usize]) -> Vec<u64> {
    let (n1, n2) = (p1.len(), p2.len());
    assert!(n1 * n2 <= 64);
    let (r1, r2) = (Rel::new(p1), Rel::new(p2));
    let mut all = Vec::new();
    fn rec(i: usize, n1: usize, n2: usize, r1: &Rel, r2: &Rel, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == n1 {
            out.push(cur.clone());
            return;
        }
        rec(i + 1, n1, n2, r1, r2, cur, out);
        for j in 0..n2 {
            if cur.iter().all(|&q| compatible(r1, r2, q, (i, j))) {
                cur.push((i, j));
                rec(i + 1, n1, n2, r1, r2, cur, out);
                cur.pop();
            }
        }
    }
    rec(0, n1, n2, &r1, &r2, &mut Vec::new(), &mut all);
    all.into_iter()
        .filter(|m| {
            !(0..n1).any(|i| (0..n2).any(|j| !m.contains(&(i, j)) && m.iter().all(|&q| compatible(&r1, &r2, q, (i, j)))))
        })
        .map(|m| m.iter().fold(0u64, |acc, &(i, j)| acc | 1 << (i * n2 + j)))
        .collect()
}

/// Minimum mapping cost: unmapped nodes cost 1, mapped pairs cost 1 unless
/// labels agree. `equal` has bit `i * n2 + j` set when the labels agree.
pub fn min_cost(maps: &[u64], n1: usize, n2: usize, equal: u64) -> usize {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("popcnt") {
        // SAFETY: the CPU supports the instruction, checked just above.
        return unsafe { min_cost_popcnt(maps, n1, n2, equal) };
    }
    min_cost_portable(maps, n1, n2, equal)
}

#[inline(always)]
fn min_cost_portable(maps: &[u64], n1: usize, n2: usize, equal: u64) -> usize {
    let best = maps.iter().map(|&m| m.count_ones() + (m & equal).count_ones()).max().unwrap_or(0);
    n1 + n2 - best as usize
}

// The exhaustive sweep spends much of its time here; baseline x86-64 has no popcount instruction.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn min_cost_popcnt(maps: &[u64], n1: usize, n2: usize, equal: u64) -> usize {
    min_cost_portable(maps, n1, n2, equal)
}

pub fn equal_mask<L: PartialEq>(l1: &[L], l2: &[L]) -> u64 {
    let mut e = 0u64;
    for (i, a) in l1.iter().enumerate() {
        for (j, b) in l2.iter().enumerate() {
            if a == b {
                e |= 1 << (i * l2.len() + j);
            }
        }
    }
    e
}

/// Brute-force edit distance between two labeled trees given in preorder.
pub fn oracle_ted<L: PartialEq>(p1: &[usize], l1: &[L], p2: &[usize], l2: &[L]) -> usize {
    min_cost(&maximal_mappings(p1, p2), p1.len(), p2.len(), equal_mask(l1, l2))
}

/// Preorder parents and labels of a table tree, root included.
pub fn flatten(tree: &TableTree) -> (Vec<usize>, Vec<(NodeKind, u8, u8)>) {
    fn walk(n: &TableNode, parent: usize, p: &mut Vec<usize>, l: &mut Vec<(NodeKind, u8, u8)>) {
        let me = p.len();
        p.push(parent);
        l.push((n.kind, n.rowspan.unwrap_or(1), n.colspan.unwrap_or(1)));
        for c in &n.children {
            walk(c, me, p, l);
        }
    }
    let (mut p, mut l) = (Vec::new(), Vec::new());
    walk(&tree.root, 0, &mut p, &mut l);
    (p, l)
}

/// Restricted-growth strings of length `n` over at most `k` symbols: one
/// representative per relabeling class.
pub fn canonical_labelings(n: usize, k: u8) -> Vec<Vec<u8>> {
    fn rec(n: usize, k: u8, cur: &mut Vec<u8>, used: u8, out: &mut Vec<Vec<u8>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for s in 0..(used + 1).min(k) {
            cur.push(s);
            rec(n, k, cur, used.max(s + 1), out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, k, &mut Vec::new(), 0, &mut out);
    out
}

pub mod decode;
pub mod grad;
