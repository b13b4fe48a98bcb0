//! Rooted bifurcating dated trees.
//!
//! Leaves carry labels `0..n` in taxon order and internal nodes carry labels
//! from the pool `n..2n-1`. Children of every internal node are stored in a
//! canonical order (the child holding the smaller leaf index first) so two
//! trees with the same labelled topology and ages are structurally identical.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

/// Fixed-width bitset over leaf indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LeafSet {
    words: Vec<u64>,
}

impl LeafSet {
    pub fn empty(n_leaves: usize) -> Self {
        LeafSet { words: vec![0; n_leaves.div_ceil(64).max(1)] }
    }

    pub fn singleton(n_leaves: usize, leaf: usize) -> Self {
        let mut s = Self::empty(n_leaves);
        s.insert(leaf);
        s
    }

    pub fn full(n_leaves: usize) -> Self {
        let mut s = Self::empty(n_leaves);
        for i in 0..n_leaves {
            s.insert(i);
        }
        s
    }

    pub fn from_indices(n_leaves: usize, leaves: impl IntoIterator<Item = usize>) -> Self {
        let mut s = Self::empty(n_leaves);
        for i in leaves {
            s.insert(i);
        }
        s
    }

    pub fn insert(&mut self, leaf: usize) {
        self.words[leaf / 64] |= 1 << (leaf % 64);
    }

    pub fn contains(&self, leaf: usize) -> bool {
        self.words.get(leaf / 64).is_some_and(|w| w >> (leaf % 64) & 1 == 1)
    }

    pub fn union_with(&mut self, other: &LeafSet) {
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_subset(&self, other: &LeafSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn is_disjoint(&self, other: &LeafSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    pub fn complement(&self, n_leaves: usize) -> LeafSet {
        let mut out = Self::empty(n_leaves);
        for i in 0..n_leaves {
            if !self.contains(i) {
                out.insert(i);
            }
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(k, &w)| {
            (0..64).filter(move |b| w >> b & 1 == 1).map(move |b| k * 64 + b)
        })
    }

    pub fn first(&self) -> Option<usize> {
        self.words
            .iter()
            .enumerate()
            .find(|(_, &w)| w != 0)
            .map(|(k, w)| k * 64 + w.trailing_zeros() as usize)
    }

    /// Hex encoding with leaf `i` as bit `i`, most significant digit first,
    /// padded to `ceil(n/4)` digits.
    pub fn to_hex(&self, n_leaves: usize) -> String {
        let digits = n_leaves.div_ceil(4).max(1);
        let mut out = String::with_capacity(digits);
        for d in (0..digits).rev() {
            let mut nibble = 0u8;
            for b in 0..4 {
                if self.contains(d * 4 + b) {
                    nibble |= 1 << b;
                }
            }
            out.push(char::from_digit(nibble as u32, 16).unwrap());
        }
        out
    }
}

/// A non-trivial bipartition of the leaves, stored as the side holding leaf 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Split(LeafSet);

impl Split {
    /// Canonicalises `side`; returns `None` for trivial bipartitions.
    pub fn new(side: LeafSet, n_leaves: usize) -> Option<Split> {
        let k = side.len();
        if k < 2 || n_leaves - k < 2 {
            return None;
        }
        Some(if side.contains(0) { Split(side) } else { Split(side.complement(n_leaves)) })
    }

    pub fn side(&self) -> &LeafSet {
        &self.0
    }
}

/// Requires a set of leaves to form a clade, optionally with bounds on the
/// age of its most recent common ancestor.
#[derive(Clone, Debug, PartialEq)]
pub struct CladeConstraint {
    pub leaves: LeafSet,
    pub age: Option<(f64, f64)>,
}

impl CladeConstraint {
    pub fn new(leaves: LeafSet, n_leaves: usize, age: Option<(f64, f64)>) -> Result<Self, TreeError> {
        let k = leaves.len();
        if k == 0 || k >= n_leaves {
            return Err(TreeError::Invalid("clade constraint must be a nonempty proper subset".into()));
        }
        if let Some((lo, hi)) = age {
            if !(lo <= hi) {
                return Err(TreeError::Invalid("clade age bounds need lo <= hi".into()));
            }
        }
        Ok(CladeConstraint { leaves, age })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("invalid tree: {0}")]
    Invalid(String),
    #[error("trees have different taxa")]
    TaxaMismatch,
    #[error("invalid edit: {0}")]
    Edit(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("newick error at byte {position}: {message}")]
pub struct NewickError {
    pub position: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub parent: Option<usize>,
    pub children: Option<[usize; 2]>,
    pub age: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    taxa: Arc<Vec<String>>,
    nodes: Vec<Node>,
    root: usize,
}

impl Tree {
    /// Assembles a tree from raw node records, validating and canonicalising it.
    pub fn from_parts(taxa: Arc<Vec<String>>, nodes: Vec<Node>, root: usize) -> Result<Tree, TreeError> {
        let mut t = Tree { taxa, nodes, root };
        t.validate()?;
        t.canonicalize();
        Ok(t)
    }

    pub fn n_leaves(&self) -> usize {
        self.taxa.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn taxa(&self) -> &Arc<Vec<String>> {
        &self.taxa
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.nodes[i].parent
    }

    pub fn children(&self, i: usize) -> Option<[usize; 2]> {
        self.nodes[i].children
    }

    pub fn age(&self, i: usize) -> f64 {
        self.nodes[i].age
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        i < self.n_leaves()
    }

    pub fn sibling(&self, i: usize) -> Option<usize> {
        let p = self.parent(i)?;
        let [a, b] = self.children(p).expect("parent is internal");
        Some(if a == i { b } else { a })
    }

    /// Δ_i: length of the branch above `i`; zero at the root.
    pub fn branch_length(&self, i: usize) -> f64 {
        match self.parent(i) {
            Some(p) => self.age(p) - self.age(i),
            None => 0.0,
        }
    }

    /// Δ: total length of all branches below the root.
    pub fn total_length(&self) -> f64 {
        (0..self.n_nodes()).map(|i| self.branch_length(i)).sum()
    }

    pub fn internal_nodes(&self) -> std::ops::Range<usize> {
        self.n_leaves()..self.n_nodes()
    }

    /// Sets an age without checking the time ordering; callers re-check with
    /// [`Tree::times_valid`].
    pub fn set_age(&mut self, i: usize, age: f64) {
        self.nodes[i].age = age;
    }

    pub fn youngest_leaf_age(&self) -> f64 {
        (0..self.n_leaves()).map(|i| self.age(i)).fold(f64::INFINITY, f64::min)
    }

    /// True iff every node is strictly younger than its parent and all ages are finite.
    pub fn times_valid(&self) -> bool {
        self.nodes.iter().all(|nd| {
            nd.age.is_finite() && nd.parent.is_none_or(|p| nd.age < self.nodes[p].age)
        })
    }

    pub fn is_ancestor(&self, anc: usize, mut desc: usize) -> bool {
        while let Some(p) = self.parent(desc) {
            if p == anc {
                return true;
            }
            desc = p;
        }
        false
    }

    /// Nodes in post-order (children before parents), children visited in stored order.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_nodes());
        self.postorder_into(&mut out);
        out
    }

    pub fn postorder_into(&self, out: &mut Vec<usize>) {
        out.clear();
        let mut stack = vec![(self.root, false)];
        while let Some((v, expanded)) = stack.pop() {
            match self.children(v) {
                Some([a, b]) if !expanded => {
                    stack.push((v, true));
                    stack.push((b, false));
                    stack.push((a, false));
                }
                _ => out.push(v),
            }
        }
    }

    /// Nodes of the subtree rooted at `i`, including `i`.
    pub fn subtree_nodes(&self, i: usize) -> Vec<usize> {
        let mut out = vec![];
        let mut stack = vec![i];
        while let Some(v) = stack.pop() {
            out.push(v);
            if let Some([a, b]) = self.children(v) {
                stack.push(b);
                stack.push(a);
            }
        }
        out
    }

    /// Leaf set below every node, indexed by node label.
    pub fn leafsets(&self) -> Vec<LeafSet> {
        let n = self.n_leaves();
        let mut sets = vec![LeafSet::empty(n); self.n_nodes()];
        for v in self.postorder() {
            match self.children(v) {
                None => sets[v].insert(v),
                Some([a, b]) => {
                    let mut s = sets[a].clone();
                    s.union_with(&sets[b]);
                    sets[v] = s;
                }
            }
        }
        sets
    }

    /// Map from the leaf set of each internal node to its label.
    pub fn clades(&self) -> HashMap<LeafSet, usize> {
        let sets = self.leafsets();
        self.internal_nodes().map(|v| (sets[v].clone(), v)).collect()
    }

    /// Non-trivial splits of the unrooted tree.
    pub fn splits(&self) -> BTreeSet<Split> {
        let n = self.n_leaves();
        let sets = self.leafsets();
        self.internal_nodes()
            .filter(|&v| v != self.root)
            .filter_map(|v| Split::new(sets[v].clone(), n))
            .collect()
    }

    /// Most recent common ancestor of a nonempty leaf set.
    pub fn mrca(&self, leaves: &LeafSet, sets: &[LeafSet]) -> usize {
        let mut v = leaves.first().expect("nonempty leaf set");
        while !leaves.is_subset(&sets[v]) {
            v = self.parent(v).expect("root holds every leaf");
        }
        v
    }

    pub fn satisfies(&self, constraints: &[CladeConstraint]) -> bool {
        if constraints.is_empty() {
            return true;
        }
        let sets = self.leafsets();
        constraints.iter().all(|c| {
            let m = self.mrca(&c.leaves, &sets);
            sets[m] == c.leaves && c.age.is_none_or(|(lo, hi)| lo <= self.age(m) && self.age(m) <= hi)
        })
    }

    /// Checks every structural and temporal invariant.
    pub fn validate(&self) -> Result<(), TreeError> {
        let n = self.n_leaves();
        let bad = |m: String| Err(TreeError::Invalid(m));
        if n < 2 {
            return bad("need at least two leaves".into());
        }
        if self.nodes.len() != 2 * n - 1 {
            return bad(format!("expected {} nodes, found {}", 2 * n - 1, self.nodes.len()));
        }
        if self.root < n || self.root >= self.nodes.len() || self.nodes[self.root].parent.is_some() {
            return bad("root must be a parentless internal node".into());
        }
        for (i, nd) in self.nodes.iter().enumerate() {
            match (i < n, nd.children) {
                (true, Some(_)) => return bad(format!("leaf {i} has children")),
                (false, None) => return bad(format!("internal node {i} has no children")),
                (false, Some([a, b])) => {
                    if a == b || a >= self.nodes.len() || b >= self.nodes.len() {
                        return bad(format!("node {i} has malformed children"));
                    }
                    if self.nodes[a].parent != Some(i) || self.nodes[b].parent != Some(i) {
                        return bad(format!("node {i} has inconsistent child pointers"));
                    }
                }
                _ => {}
            }
            if i != self.root {
                match nd.parent {
                    None => return bad(format!("node {i} is detached")),
                    Some(p) if p >= self.nodes.len() || !self.nodes[p].children.is_some_and(|c| c.contains(&i)) => {
                        return bad(format!("node {i} has inconsistent parent pointer"));
                    }
                    _ => {}
                }
            }
        }
        // Reachability from the root rules out cycles given consistent pointers.
        if self.postorder_bounded().len() != self.nodes.len() {
            return bad("tree is not connected".into());
        }
        if !self.times_valid() {
            return bad("every node must be strictly younger than its parent".into());
        }
        Ok(())
    }

    fn postorder_bounded(&self) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        let mut out = vec![];
        let mut stack = vec![self.root];
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v], true) {
                return vec![];
            }
            out.push(v);
            if let Some([a, b]) = self.nodes[v].children {
                stack.push(a);
                stack.push(b);
            }
        }
        out
    }

    fn canonicalize(&mut self) {
        let n = self.n_leaves();
        let mut min_leaf = vec![usize::MAX; self.n_nodes()];
        for v in self.postorder() {
            match self.nodes[v].children {
                None => min_leaf[v] = v,
                Some([a, b]) => {
                    min_leaf[v] = min_leaf[a].min(min_leaf[b]);
                    if min_leaf[b] < min_leaf[a] {
                        self.nodes[v].children = Some([b, a]);
                    }
                }
            }
        }
        debug_assert!(min_leaf.iter().all(|&m| m < n));
    }

    fn replace_child(&mut self, parent: usize, old: usize, new: usize) {
        let ch = self.nodes[parent].children.as_mut().expect("internal");
        if ch[0] == old {
            ch[0] = new;
        } else {
            debug_assert_eq!(ch[1], old);
            ch[1] = new;
        }
    }

    /// Exchanges the parents of `i` and `j`.
    ///
    /// Siblings give back the same tree. Fails when either node is the root,
    /// one is an ancestor of the other, or the new ages would be inconsistent.
    pub fn apply_swap(&self, i: usize, j: usize) -> Result<Tree, TreeError> {
        let (pi, pj) = match (self.parent(i), self.parent(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(TreeError::Edit("cannot swap the root")),
        };
        if i == j || self.is_ancestor(i, j) || self.is_ancestor(j, i) {
            return Err(TreeError::Edit("swap nodes must be unrelated"));
        }
        if pi == pj {
            return Ok(self.clone());
        }
        if !(self.age(j) < self.age(pi) && self.age(i) < self.age(pj)) {
            return Err(TreeError::Edit("swap violates node ages"));
        }
        let mut t = self.clone();
        t.replace_child(pi, i, j);
        t.replace_child(pj, j, i);
        t.nodes[i].parent = Some(pj);
        t.nodes[j].parent = Some(pi);
        t.canonicalize();
        debug_assert!(t.validate().is_ok());
        Ok(t)
    }

    /// Prunes the parent `p` of `i` and regrafts it on the branch above `j`
    /// at age `new_age`. The pruned node keeps its label.
    ///
    /// `j` may be `sib(i)`, which keeps the topology and only moves `p`.
    pub fn apply_spr(&self, i: usize, j: usize, new_age: f64) -> Result<Tree, TreeError> {
        let p = self.parent(i).ok_or(TreeError::Edit("cannot prune the root"))?;
        let h = self.sibling(i).expect("non-root has a sibling");
        if j == i || j == p || self.is_ancestor(i, j) {
            return Err(TreeError::Edit("destination must lie outside the pruned subtree"));
        }
        let mut t = self.clone();
        match t.parent(p) {
            Some(g) => {
                t.replace_child(g, p, h);
                t.nodes[h].parent = Some(g);
            }
            None => {
                t.nodes[h].parent = None;
                t.root = h;
            }
        }
        let q = t.parent(j);
        let upper = q.map_or(f64::INFINITY, |q| t.age(q));
        if !(new_age > t.age(i) && new_age > t.age(j) && new_age < upper && new_age.is_finite()) {
            return Err(TreeError::Edit("regraft age outside the destination branch"));
        }
        match q {
            Some(q) => t.replace_child(q, j, p),
            None => t.root = p,
        }
        t.nodes[p] = Node { parent: q, children: Some([i, j]), age: new_age };
        t.nodes[i].parent = Some(p);
        t.nodes[j].parent = Some(p);
        t.canonicalize();
        debug_assert!(t.validate().is_ok());
        Ok(t)
    }

    /// Relabels internal nodes; `perm[old] = new`. Leaves must map to themselves.
    pub fn relabel(&self, perm: &[usize]) -> Tree {
        let mut nodes = self.nodes.clone();
        for (old, nd) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = Node {
                parent: nd.parent.map(|p| perm[p]),
                children: nd.children.map(|[a, b]| [perm[a], perm[b]]),
                age: nd.age,
            };
        }
        let mut t = Tree { taxa: self.taxa.clone(), nodes, root: perm[self.root] };
        t.canonicalize();
        t
    }

    /// Same tree with leaves reindexed to follow `names`.
    pub fn with_taxa_order(&self, names: &[String]) -> Result<Tree, TreeError> {
        let n = self.n_leaves();
        if names.len() != n {
            return Err(TreeError::TaxaMismatch);
        }
        let index: HashMap<&str, usize> = names.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let mut perm: Vec<usize> = (0..self.n_nodes()).collect();
        for (old, name) in self.taxa.iter().enumerate() {
            perm[old] = *index.get(name.as_str()).ok_or(TreeError::TaxaMismatch)?;
        }
        let mut t = self.relabel(&perm);
        t.taxa = Arc::new(names.to_vec());
        t.canonicalize();
        Ok(t)
    }

    /// Serialises to rooted Newick with branch lengths.
    pub fn to_newick(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![Emit::Node(self.root)];
        while let Some(e) = stack.pop() {
            match e {
                Emit::Text(s) => out.push_str(s),
                Emit::Length(v) => {
                    if let Some(p) = self.parent(v) {
                        out.push(':');
                        out.push_str(&format!("{}", self.age(p) - self.age(v)));
                    }
                }
                Emit::Node(v) => match self.children(v) {
                    None => {
                        out.push_str(&quote_name(&self.taxa[v]));
                        stack.push(Emit::Length(v));
                    }
                    Some([a, b]) => {
                        out.push('(');
                        stack.push(Emit::Length(v));
                        stack.push(Emit::Text(")"));
                        stack.push(Emit::Node(b));
                        stack.push(Emit::Text(","));
                        stack.push(Emit::Node(a));
                    }
                },
            }
        }
        out.push(';');
        out
    }

    /// Ages and pointers compared bit for bit, labels included.
    pub fn identical(&self, other: &Tree) -> bool {
        self.root == other.root
            && self.taxa == other.taxa
            && self.nodes.len() == other.nodes.len()
            && self.nodes.iter().zip(&other.nodes).all(|(a, b)| {
                a.parent == b.parent && a.children == b.children && a.age.to_bits() == b.age.to_bits()
            })
    }
}

enum Emit {
    Node(usize),
    Length(usize),
    Text(&'static str),
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_newick())
    }
}

const NEWICK_SPECIAL: &[char] = &['(', ')', '[', ']', '\'', ':', ';', ',', ' ', '\t', '\n', '\r'];

fn quote_name(name: &str) -> String {
    if name.contains(NEWICK_SPECIAL) {
        format!("'{}'", name.replace('\'', "''"))
    } else {
        name.to_string()
    }
}

/// Exact equality of dated topologies: same clades with bitwise-equal ages.
/// Internal labels are ignored.
pub fn tree_equal(x: &Tree, y: &Tree) -> bool {
    if x.taxa != y.taxa {
        return false;
    }
    if (0..x.n_leaves()).any(|i| x.age(i).to_bits() != y.age(i).to_bits()) {
        return false;
    }
    let yc = y.clades();
    x.clades()
        .iter()
        .all(|(set, &vx)| yc.get(set).is_some_and(|&vy| x.age(vx).to_bits() == y.age(vy).to_bits()))
}

/// Relabels the internal nodes of `y` against `x`.
///
/// Every internal node of `y` whose clade also occurs in `x` takes `x`'s label.
/// The remaining nodes inside a matched clade take the labels `x` uses inside
/// that clade (minus those claimed by nested matched clades), in ascending
/// order, assigned along an in-order traversal of `y`. The traversal uses the
/// canonical child order, so the result depends only on the topology of `y`
/// and the operation is idempotent.
///
/// Returns the relabelled tree and the permutation `perm[old] = new`.
pub fn housekeeping(x: &Tree, y: &Tree) -> Result<(Tree, Vec<usize>), TreeError> {
    if x.taxa != y.taxa {
        return Err(TreeError::TaxaMismatch);
    }
    let n = x.n_leaves();
    let xc = x.clades();
    let ysets = y.leafsets();
    let mut perm: Vec<usize> = (0..y.n_nodes()).collect();
    let mut matched = vec![false; y.n_nodes()];
    for v in y.internal_nodes() {
        if let Some(&lx) = xc.get(&ysets[v]) {
            matched[v] = true;
            perm[v] = lx;
        }
    }
    debug_assert!(matched[y.root()]);

    for v in y.internal_nodes().filter(|&v| matched[v]) {
        // Unmatched internal nodes of y hanging off v, and the matched clades bounding them.
        let mut region = vec![];
        let mut nested = vec![];
        let mut stack = vec![(v, false)];
        // In-order: left subtree, node, right subtree.
        while let Some((u, expanded)) = stack.pop() {
            let Some([a, b]) = y.children(u) else { continue };
            if u != v && matched[u] {
                nested.push(u);
                continue;
            }
            if expanded {
                if u != v {
                    region.push(u);
                }
                continue;
            }
            stack.push((b, false));
            stack.push((u, true));
            stack.push((a, false));
        }
        if region.is_empty() {
            continue;
        }
        let mut excluded = vec![false; x.n_nodes()];
        let xv = perm[v];
        excluded[xv] = true;
        for &u in &nested {
            for w in x.subtree_nodes(perm[u]) {
                excluded[w] = true;
            }
        }
        let pool: Vec<usize> = x.subtree_nodes(xv).into_iter().filter(|&w| w >= n && !excluded[w]).collect();
        let mut pool = pool;
        pool.sort_unstable();
        debug_assert_eq!(pool.len(), region.len());
        for (u, label) in region.into_iter().zip(pool) {
            perm[u] = label;
        }
    }
    Ok((y.relabel(&perm), perm))
}

/// Uniformly random coalescent topology with ages rescaled so the root sits
/// at `root_age` and the leaves at 0.
///
/// With clade constraints, each merge is drawn uniformly among pairs whose
/// union stays compatible with every constraint.
pub fn random_tree<R: Rng + ?Sized>(
    taxa: Arc<Vec<String>>,
    root_age: f64,
    constraints: &[CladeConstraint],
    rng: &mut R,
) -> Result<Tree, TreeError> {
    let n = taxa.len();
    if n < 2 {
        return Err(TreeError::Invalid("need at least two leaves".into()));
    }
    if !(root_age > 0.0 && root_age.is_finite()) {
        return Err(TreeError::Invalid("root age must be positive".into()));
    }
    let mut nodes = vec![Node { parent: None, children: None, age: 0.0 }; 2 * n - 1];
    let mut lineages: Vec<(usize, LeafSet)> = (0..n).map(|i| (i, LeafSet::singleton(n, i))).collect();
    let mut t = 0.0;
    let mut next = n;
    while lineages.len() > 1 {
        let k = lineages.len();
        let rate = (k * (k - 1)) as f64 / 2.0;
        t += -(1.0 - rng.random::<f64>()).ln() / rate;
        let mut pairs = vec![];
        for a in 0..k {
            for b in a + 1..k {
                let mut u = lineages[a].1.clone();
                u.union_with(&lineages[b].1);
                let ok = constraints.iter().all(|c| u.is_subset(&c.leaves) || c.leaves.is_subset(&u) || u.is_disjoint(&c.leaves));
                if ok {
                    pairs.push((a, b, u));
                }
            }
        }
        if pairs.is_empty() {
            return Err(TreeError::Invalid("clade constraints are incompatible".into()));
        }
        let (a, b, u) = pairs.swap_remove(rng.random_range(0..pairs.len()));
        let (la, lb) = (lineages[a].0, lineages[b].0);
        nodes[next] = Node { parent: None, children: Some([la, lb]), age: t };
        nodes[la].parent = Some(next);
        nodes[lb].parent = Some(next);
        lineages.swap_remove(b);
        lineages[a] = (next, u);
        next += 1;
    }
    for nd in nodes.iter_mut().skip(n) {
        nd.age *= root_age / t;
    }
    let root = 2 * n - 2;
    nodes[root].age = root_age;
    Tree::from_parts(taxa, nodes, root)
}

struct PNode {
    name: Option<String>,
    length: Option<f64>,
    children: Vec<usize>,
    pos: usize,
}

fn err(position: usize, message: impl Into<String>) -> NewickError {
    NewickError { position, message: message.into() }
}

/// Parses rooted Newick with branch lengths on every non-root node.
///
/// Ages are reconstructed from root-to-tip depths with the youngest leaf at 0.
/// Internal node labels and a root branch length are accepted and ignored.
pub fn parse_newick(text: &str) -> Result<Tree, NewickError> {
    let bytes = text.as_bytes();
    let mut arena: Vec<PNode> = vec![];
    let mut open: Vec<usize> = vec![];
    // Node just completed and still able to take a label or length.
    let mut current: Option<usize> = None;
    let mut expect_node = true;
    let mut pos = 0;
    let mut finished = false;

    while pos < bytes.len() {
        let c = bytes[pos];
        if c.is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        if finished {
            return Err(err(pos, "trailing characters after ';'"));
        }
        match c {
            b'(' => {
                if !expect_node {
                    return Err(err(pos, "unexpected '('"));
                }
                arena.push(PNode { name: None, length: None, children: vec![], pos });
                open.push(arena.len() - 1);
                pos += 1;
            }
            b',' | b')' => {
                let (Some(cur), Some(&parent)) = (current, open.last()) else {
                    return Err(err(pos, format!("unexpected '{}'", c as char)));
                };
                arena[parent].children.push(cur);
                current = None;
                pos += 1;
                if c == b',' {
                    expect_node = true;
                } else {
                    open.pop();
                    current = Some(parent);
                    expect_node = false;
                    // Optional internal label directly after ')'.
                    let (label, next) = read_name(bytes, pos)?;
                    if label.is_some() {
                        pos = next;
                    }
                }
            }
            b':' => {
                let Some(cur) = current else { return Err(err(pos, "branch length without a node")) };
                if arena[cur].length.is_some() {
                    return Err(err(pos, "duplicate branch length"));
                }
                let start = pos + 1;
                let mut end = start;
                while end < bytes.len() && matches!(bytes[end], b'0'..=b'9' | b'.' | b'e' | b'E' | b'+' | b'-') {
                    end += 1;
                }
                let len: f64 = text[start..end].parse().map_err(|_| err(start, "malformed branch length"))?;
                arena[cur].length = Some(len);
                pos = end;
            }
            b';' => {
                if !open.is_empty() || current.is_none() {
                    return Err(err(pos, "unbalanced parentheses before ';'"));
                }
                finished = true;
                pos += 1;
            }
            b'[' => return Err(err(pos, "comments are not supported")),
            _ => {
                if !expect_node {
                    return Err(err(pos, "unexpected name"));
                }
                let (name, next) = read_name(bytes, pos)?;
                let name = name.ok_or_else(|| err(pos, "unexpected character"))?;
                arena.push(PNode { name: Some(name), length: None, children: vec![], pos });
                current = Some(arena.len() - 1);
                expect_node = false;
                pos = next;
            }
        }
        if expect_node && current.is_some() {
            current = None;
        }
    }
    if !finished {
        return Err(err(bytes.len(), "missing ';'"));
    }
    let root = current.expect("checked at ';'");
    build_tree(arena, root)
}

fn read_name(bytes: &[u8], start: usize) -> Result<(Option<String>, usize), NewickError> {
    let mut pos = start;
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if pos < bytes.len() && bytes[pos] == b'\'' {
        let mut out = Vec::new();
        let mut k = pos + 1;
        loop {
            match bytes.get(k) {
                None => return Err(err(pos, "unterminated quoted name")),
                Some(b'\'') if bytes.get(k + 1) == Some(&b'\'') => {
                    out.push(b'\'');
                    k += 2;
                }
                Some(b'\'') => break,
                Some(&b) => {
                    out.push(b);
                    k += 1;
                }
            }
        }
        let s = String::from_utf8(out).map_err(|_| err(pos, "name is not valid UTF-8"))?;
        return Ok((Some(s), k + 1));
    }
    let begin = pos;
    while pos < bytes.len() && !NEWICK_SPECIAL.contains(&(bytes[pos] as char)) {
        pos += 1;
    }
    if pos == begin {
        return Ok((None, start));
    }
    let s = std::str::from_utf8(&bytes[begin..pos]).map_err(|_| err(begin, "name is not valid UTF-8"))?;
    Ok((Some(s.to_string()), pos))
}

fn build_tree(arena: Vec<PNode>, root: usize) -> Result<Tree, NewickError> {
    let mut leaf_names: Vec<String> = vec![];
    let mut seen: HashMap<String, ()> = HashMap::new();
    for nd in &arena {
        if nd.children.is_empty() {
            let name = nd.name.clone().unwrap_or_default();
            if name.is_empty() {
                return Err(err(nd.pos, "leaf without a name"));
            }
            if seen.insert(name.clone(), ()).is_some() {
                return Err(err(nd.pos, format!("duplicate leaf name '{name}'")));
            }
            leaf_names.push(name);
        } else if nd.children.len() != 2 {
            return Err(err(nd.pos, format!("node of degree {} (trees must be bifurcating)", nd.children.len())));
        }
    }
    let n = leaf_names.len();
    if n < 2 {
        return Err(err(0, "need at least two leaves"));
    }
    // Leaves in order of appearance; internal nodes in order of closing.
    let mut label = vec![usize::MAX; arena.len()];
    let mut next_leaf = 0;
    for (k, nd) in arena.iter().enumerate() {
        if nd.children.is_empty() {
            label[k] = next_leaf;
            next_leaf += 1;
        }
    }
    let mut depth = vec![0.0f64; arena.len()];
    let mut parent = vec![usize::MAX; arena.len()];
    let mut order = vec![];
    let mut stack = vec![root];
    while let Some(v) = stack.pop() {
        order.push(v);
        for &c in &arena[v].children {
            let len = arena[c].length.ok_or_else(|| err(arena[c].pos, "missing branch length"))?;
            if !(len > 0.0 && len.is_finite()) {
                return Err(err(arena[c].pos, "branch lengths must be positive and finite"));
            }
            depth[c] = depth[v] + len;
            parent[c] = v;
            stack.push(c);
        }
    }
    let mut next_internal = n;
    for &v in order.iter().rev() {
        if !arena[v].children.is_empty() {
            label[v] = next_internal;
            next_internal += 1;
        }
    }
    let max_depth = arena
        .iter()
        .enumerate()
        .filter(|(_, nd)| nd.children.is_empty())
        .map(|(k, _)| depth[k])
        .fold(0.0, f64::max);
    let mut nodes = vec![Node { parent: None, children: None, age: 0.0 }; 2 * n - 1];
    for &v in &order {
        let l = label[v];
        nodes[l].age = max_depth - depth[v];
        if v != root {
            nodes[l].parent = Some(label[parent[v]]);
        }
        if let [a, b] = arena[v].children[..] {
            nodes[l].children = Some([label[a], label[b]]);
        }
    }
    for &v in &order {
        if v != root && !(nodes[label[v]].age < nodes[label[parent[v]]].age) {
            return Err(err(arena[v].pos, "branch too short to resolve node ages"));
        }
    }
    Tree::from_parts(Arc::new(leaf_names), nodes, next_internal - 1).map_err(|e| err(0, e.to_string()))
}
