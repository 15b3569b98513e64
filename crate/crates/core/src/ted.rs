//! Zhang–Shasha edit distance between ordered labeled trees with unit costs.

/// Ordered tree flattened in postorder.
///
/// `lml[i]` is the postorder index of the leftmost leaf descendant of node `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PostorderTree<L> {
    labels: Vec<L>,
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<L: PartialEq> PostorderTree<L> {
    /// Builds from a parent array in preorder (`parents[0]` is the root and is ignored).
    pub fn from_preorder_parents(parents: &[usize], labels: Vec<L>) -> Self {
        let n = parents.len();
        assert_eq!(labels.len(), n);
        let mut children = vec![Vec::new(); n];
        for (i, &p) in parents.iter().enumerate().skip(1) {
            children[p].push(i);
        }
        let mut order = Vec::with_capacity(n);
        fn walk(v: usize, children: &[Vec<usize>], order: &mut Vec<usize>) {
            for &c in &children[v] {
                walk(c, children, order);
            }
            order.push(v);
        }
        if n > 0 {
            walk(0, &children, &mut order);
        }
        let mut post_of = vec![0; n];
        for (k, &v) in order.iter().enumerate() {
            post_of[v] = k;
        }
        let mut slots: Vec<Option<L>> = labels.into_iter().map(Some).collect();
        let post_labels = order.iter().map(|&v| slots[v].take().unwrap()).collect();
        let mut lml = vec![0; n];
        for &v in &order {
            lml[post_of[v]] = match children[v].first() {
                Some(&c) => lml[post_of[c]],
                None => post_of[v],
            };
        }
        Self::from_parts(post_labels, lml)
    }

    fn from_parts(labels: Vec<L>, lml: Vec<usize>) -> Self {
        let n = labels.len();
        // A keyroot is the highest node with a given leftmost leaf.
        let mut seen = vec![false; n];
        let mut keyroots = Vec::new();
        for i in (0..n).rev() {
            if !seen[lml[i]] {
                seen[lml[i]] = true;
                keyroots.push(i);
            }
        }
        keyroots.reverse();
        Self { labels, lml, keyroots }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Reusable scratch buffers for repeated distance computations.
#[derive(Default)]
pub struct ZhangShasha {
    treedist: Vec<usize>,
    forest: Vec<usize>,
}

impl ZhangShasha {
    pub fn new() -> Self {
        Self::default()
    }

    /// Minimum number of insertions, deletions and relabels turning `a` into `b`.
    pub fn distance<L: PartialEq>(&mut self, a: &PostorderTree<L>, b: &PostorderTree<L>) -> usize {
        let (n, m) = (a.len(), b.len());
        if n == 0 || m == 0 {
            return n + m;
        }
        self.treedist.clear();
        self.treedist.resize(n * m, 0);
        self.forest.resize((n + 1) * (m + 1), 0);

        for &i in &a.keyroots {
            for &j in &b.keyroots {
                self.forest_distance(a, b, i, j);
            }
        }
        self.treedist[(n - 1) * m + (m - 1)]
    }

    fn forest_distance<L: PartialEq>(&mut self, a: &PostorderTree<L>, b: &PostorderTree<L>, i: usize, j: usize) {
        let m = b.len();
        let (li, lj) = (a.lml[i], b.lml[j]);
        let rows = i - li + 2;
        let cols = j - lj + 2;
        let fd = &mut self.forest;
        let td = &mut self.treedist;
        // fd[x][y]: distance between forests a[li..li+x) and b[lj..lj+y).
        fd[0] = 0;
        for x in 1..rows {
            fd[x * cols] = fd[(x - 1) * cols] + 1;
        }
        for y in 1..cols {
            fd[y] = fd[y - 1] + 1;
        }
        for x in 1..rows {
            let ax = li + x - 1;
            for y in 1..cols {
                let by = lj + y - 1;
                let del = fd[(x - 1) * cols + y] + 1;
                let ins = fd[x * cols + y - 1] + 1;
                let v = if a.lml[ax] == li && b.lml[by] == lj {
                    let relabel = usize::from(a.labels[ax] != b.labels[by]);
                    let v = del.min(ins).min(fd[(x - 1) * cols + y - 1] + relabel);
                    td[ax * m + by] = v;
                    v
                } else {
                    let px = a.lml[ax] - li;
                    let py = b.lml[by] - lj;
                    del.min(ins).min(fd[px * cols + py] + td[ax * m + by])
                };
                fd[x * cols + y] = v;
            }
        }
    }
}
