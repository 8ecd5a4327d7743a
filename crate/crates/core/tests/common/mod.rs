//! Helpers shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use tga::event::{BehaviorSequence, BehaviorType};
use tga::graph::{Direction, TransitionGraph, TransitionView};

/// A random valid sequence. Half of the sequences tie each item to one
/// category; the rest draw the category per event.
pub fn random_sequence(rng: &mut impl Rng, len: usize, n_items: u64, n_cats: u64) -> BehaviorSequence {
    let fixed = rng.gen::<bool>();
    let cat_of: Vec<u64> = (0..n_items).map(|_| rng.gen_range(0..n_cats)).collect();
    let mut s = BehaviorSequence::new();
    let mut ts = rng.gen_range(0..1_000_000u64);
    for _ in 0..len {
        let item = rng.gen_range(0..n_items);
        let cat = if fixed { cat_of[item as usize] } else { rng.gen_range(0..n_cats) };
        let b = BehaviorType::ALL[rng.gen_range(0..4)];
        s.push(item, cat, b, ts);
        // Ties are allowed.
        ts += rng.gen_range(0..3);
    }
    s
}

fn qualifies(seq: &BehaviorSequence, view: TransitionView, a: usize, b: usize) -> bool {
    let (x, y) = (&seq.events()[a], &seq.events()[b]);
    match view {
        TransitionView::Item => x.item_id == y.item_id,
        TransitionView::Category => x.category_id == y.category_id && x.item_id != y.item_id,
        TransitionView::Neighbor => b == a + 1,
    }
}

/// Positions of every item and every category, so nearest-partner queries
/// scan only events that share the key.
struct Occurrences {
    by_item: HashMap<u64, Vec<usize>>,
    by_cat: HashMap<u64, Vec<usize>>,
    /// Index of each position in its item list and its category list.
    rank: Vec<(usize, usize)>,
}

impl Occurrences {
    fn new(seq: &BehaviorSequence) -> Self {
        let mut by_item: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut by_cat: HashMap<u64, Vec<usize>> = HashMap::new();
        let mut rank = Vec::with_capacity(seq.len());
        for (p, e) in seq.events().iter().enumerate() {
            let a = by_item.entry(e.item_id).or_default();
            let b = by_cat.entry(e.category_id).or_default();
            rank.push((a.len(), b.len()));
            a.push(p);
            b.push(p);
        }
        Self { by_item, by_cat, rank }
    }

    fn nearest(&self, seq: &BehaviorSequence, view: TransitionView, a: usize, later: bool) -> Option<usize> {
        let e = &seq.events()[a];
        let (list, r) = match view {
            TransitionView::Neighbor => {
                return if later { Some(a + 1).filter(|&b| b < seq.len()) } else { a.checked_sub(1) };
            }
            TransitionView::Item => (&self.by_item[&e.item_id], self.rank[a].0),
            TransitionView::Category => (&self.by_cat[&e.category_id], self.rank[a].1),
        };
        let ok = |&&b: &&usize| qualifies(seq, view, a.min(b), a.max(b));
        if later {
            list[r + 1..].iter().find(ok).copied()
        } else {
            list[..r].iter().rev().find(ok).copied()
        }
    }
}

/// Every way `g` departs from the construction rules for `seq`, found by
/// direct scans of the events rather than by the builder's last-seen maps.
pub fn graph_violations(seq: &BehaviorSequence, g: &TransitionGraph) -> Vec<String> {
    let n = seq.len();
    let ev = seq.events();
    let mut out = Vec::new();
    if g.num_nodes() != n {
        out.push(format!("{} nodes for {n} events", g.num_nodes()));
        return out;
    }
    if g.num_edges() > 3 * n.saturating_sub(1) {
        out.push(format!("{} edges exceed 3(n-1)", g.num_edges()));
    }
    let occ = Occurrences::new(seq);
    let nearest_later = |view, a| occ.nearest(seq, view, a, true);
    let nearest_earlier = |view, b| occ.nearest(seq, view, b, false);
    let mut indeg = vec![[0u8; 3]; n];
    let mut outdeg = vec![[0u8; 3]; n];
    let mut have = BTreeSet::new();
    for e in g.edges() {
        if e.src >= e.dst || e.dst >= n {
            out.push(format!("edge {}->{} is not forward", e.src, e.dst));
            continue;
        }
        if !qualifies(seq, e.view, e.src, e.dst) {
            out.push(format!("edge {}->{} breaks the {} predicate", e.src, e.dst, e.view));
        }
        if e.src_behavior != ev[e.src].behavior || e.dst_behavior != ev[e.dst].behavior {
            out.push(format!("edge {}->{} carries wrong behaviors", e.src, e.dst));
        }
        indeg[e.dst][e.view.index()] += 1;
        outdeg[e.src][e.view.index()] += 1;
        have.insert((e.src, e.dst, e.view.index()));
    }
    for v in 0..n {
        for view in TransitionView::ALL {
            let k = view.index();
            if indeg[v][k] > 1 || outdeg[v][k] > 1 {
                out.push(format!("node {v} has degree above one in {view}"));
            }
            // Required edge: v's nearest later partner whose nearest earlier partner is v.
            if let Some(w) = nearest_later(view, v) {
                if nearest_earlier(view, w) == Some(v) && !have.contains(&(v, w, k)) {
                    out.push(format!("missing {view} edge {v}->{w}"));
                }
            }
            let slots = [Direction::In, Direction::Out].map(|d| g.slot(v, view, d).is_some());
            if slots != [indeg[v][k] == 1, outdeg[v][k] == 1] {
                out.push(format!("node {v} adjacency disagrees with the edge list in {view}"));
            }
        }
        match g.neighbor_slots(v) {
            Ok(s) if s.len() <= 6 => {}
            Ok(s) => out.push(format!("node {v} has {} slots", s.len())),
            Err(e) => out.push(format!("node {v}: {e}")),
        }
    }
    for e in g.edges() {
        if e.src < e.dst && e.dst < n {
            let ok = nearest_later(e.view, e.src) == Some(e.dst) && nearest_earlier(e.view, e.dst) == Some(e.src);
            if !ok {
                out.push(format!("{} edge {}->{} is not a mutual nearest pair", e.view, e.src, e.dst));
            }
        }
    }
    let path = g.edges_in_view(TransitionView::Neighbor).count();
    if path != n.saturating_sub(1) {
        out.push(format!("neighbor view has {path} edges, expected {}", n.saturating_sub(1)));
    }
    out
}

/// The four-event sequence used throughout the docs: items A, B, A, C with
/// categories X, X, X, Y.
pub fn four_events() -> BehaviorSequence {
    let mut s = BehaviorSequence::new();
    s.push(1, 10, BehaviorType::Click, 10);
    s.push(2, 10, BehaviorType::Click, 20);
    s.push(1, 10, BehaviorType::Cart, 30);
    s.push(3, 11, BehaviorType::Click, 40);
    s
}
