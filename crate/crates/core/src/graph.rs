//! Compilation of a behavior sequence into a sparse three-view transition graph.
//!
//! Every event is a node. Under each view a node keeps at most one incoming
//! edge (from its nearest qualifying earlier event) and at most one outgoing
//! edge (to its nearest qualifying later event):
//!
//! * `Item`: both events touch the same item.
//! * `Category`: same category, different items.
//! * `Neighbor`: consecutive positions.
//!
//! An edge `p -> j` exists only when `p` is the nearest qualifying predecessor
//! of `j` *and* `j` is the nearest qualifying successor of `p`. For the item and
//! neighbor views the two conditions always coincide; for the category view
//! the mutual requirement is what keeps the out-degree at one.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use crate::error::{Error, Result};
use crate::event::{BehaviorSequence, BehaviorType, Event};

pub const NUM_VIEWS: usize = 3;
/// Adjacency slots per node: two directions under each view.
pub const NUM_SLOTS: usize = 2 * NUM_VIEWS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TransitionView {
    Item = 0,
    Category = 1,
    Neighbor = 2,
}

impl TransitionView {
    pub const ALL: [TransitionView; NUM_VIEWS] = [
        TransitionView::Item,
        TransitionView::Category,
        TransitionView::Neighbor,
    ];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransitionView::Item => "item",
            TransitionView::Category => "category",
            TransitionView::Neighbor => "neighbor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "item" => Some(TransitionView::Item),
            "category" | "cat" => Some(TransitionView::Category),
            "neighbor" => Some(TransitionView::Neighbor),
            _ => None,
        }
    }
}

impl fmt::Display for TransitionView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    /// The focus node receives the edge.
    In = 0,
    /// The focus node sends the edge.
    Out = 1,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::In, Direction::Out];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::In => "in",
            Direction::Out => "out",
        }
    }
}

/// A subset of the three views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ViewSet([bool; NUM_VIEWS]);

impl ViewSet {
    pub const fn all() -> Self {
        ViewSet([true; NUM_VIEWS])
    }

    pub const fn none() -> Self {
        ViewSet([false; NUM_VIEWS])
    }

    pub fn contains(&self, v: TransitionView) -> bool {
        self.0[v.index()]
    }

    pub fn with(mut self, v: TransitionView, on: bool) -> Self {
        self.0[v.index()] = on;
        self
    }

    pub fn without(self, v: TransitionView) -> Self {
        self.with(v, false)
    }

    pub fn iter(&self) -> impl Iterator<Item = TransitionView> + '_ {
        TransitionView::ALL.into_iter().filter(|v| self.contains(*v))
    }

    /// Parses a comma separated list such as `item,neighbor`. Empty or `none` is the empty set.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Some(Self::none());
        }
        if s == "all" {
            return Some(Self::all());
        }
        let mut set = Self::none();
        for part in s.split(',') {
            set = set.with(TransitionView::parse(part.trim())?, true);
        }
        Some(set)
    }
}

impl Default for ViewSet {
    fn default() -> Self {
        Self::all()
    }
}

impl serde::Serialize for ViewSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ViewSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ViewSet::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown view list {s:?}")))
    }
}

impl fmt::Display for ViewSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(|v| v.as_str()).collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphOptions {
    pub views: ViewSet,
    /// Largest allowed position gap for item and category edges. `None` means unbounded.
    pub max_gap: Option<usize>,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            views: ViewSet::all(),
            max_gap: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TransitionEdge {
    pub src: usize,
    pub dst: usize,
    pub view: TransitionView,
    pub src_behavior: BehaviorType,
    pub dst_behavior: BehaviorType,
}

/// One filled adjacency slot seen from a focus node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub view: TransitionView,
    pub direction: Direction,
    pub peer: usize,
    pub edge: usize,
    pub src_behavior: BehaviorType,
    pub dst_behavior: BehaviorType,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TransitionGraph {
    num_nodes: usize,
    edges: Vec<TransitionEdge>,
    /// Edge index per node and slot `2 * view + direction`.
    adjacency: Vec<[Option<u32>; NUM_SLOTS]>,
}

#[inline]
fn slot_index(view: TransitionView, dir: Direction) -> usize {
    2 * view.index() + dir as usize
}

/// Hash-map operations performed by a graph build; linear in the sequence length.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildCounters {
    pub map_ops: u64,
}

impl TransitionGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[TransitionEdge] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges_in_view(&self, view: TransitionView) -> impl Iterator<Item = &TransitionEdge> {
        self.edges.iter().filter(move |e| e.view == view)
    }

    /// Edge index stored in a node's slot, if filled.
    pub fn slot(&self, node: usize, view: TransitionView, dir: Direction) -> Option<usize> {
        self.adjacency[node][slot_index(view, dir)].map(|e| e as usize)
    }

    fn from_edges(num_nodes: usize, edges: Vec<TransitionEdge>) -> Self {
        let mut adjacency = vec![[None; NUM_SLOTS]; num_nodes];
        for (i, e) in edges.iter().enumerate() {
            let out = &mut adjacency[e.src][slot_index(e.view, Direction::Out)];
            debug_assert!(out.is_none(), "second outgoing {:?} edge at {}", e.view, e.src);
            *out = Some(i as u32);
            let inc = &mut adjacency[e.dst][slot_index(e.view, Direction::In)];
            debug_assert!(inc.is_none(), "second incoming {:?} edge at {}", e.view, e.dst);
            *inc = Some(i as u32);
        }
        Self {
            num_nodes,
            edges,
            adjacency,
        }
    }

    /// The same graph with every edge of `view` removed.
    pub fn without_view(&self, view: TransitionView) -> Self {
        self.restricted_to(ViewSet::all().without(view))
    }

    /// The same graph keeping only edges whose view is in `views`.
    pub fn restricted_to(&self, views: ViewSet) -> Self {
        let edges = self
            .edges
            .iter()
            .copied()
            .filter(|e| views.contains(e.view))
            .collect();
        Self::from_edges(self.num_nodes, edges)
    }

    /// Filled slots of `node` in the order item-in, item-out, category-in,
    /// category-out, neighbor-in, neighbor-out.
    pub fn neighbor_slots(&self, node: usize) -> Result<Vec<Slot>> {
        if node >= self.num_nodes {
            return Err(Error::NodeOutOfRange {
                index: node,
                num_nodes: self.num_nodes,
            });
        }
        Ok(self.slots_unchecked(node).collect())
    }

    pub(crate) fn slots_unchecked(&self, node: usize) -> impl Iterator<Item = Slot> + '_ {
        let adj = &self.adjacency[node];
        TransitionView::ALL.into_iter().flat_map(move |view| {
            Direction::ALL.into_iter().filter_map(move |direction| {
                adj[slot_index(view, direction)].map(|ei| {
                    let e = &self.edges[ei as usize];
                    Slot {
                        view,
                        direction,
                        peer: if direction == Direction::In { e.src } else { e.dst },
                        edge: ei as usize,
                        src_behavior: e.src_behavior,
                        dst_behavior: e.dst_behavior,
                    }
                })
            })
        })
    }

    /// Average number of incident edges per node for each view, indexed by view.
    pub fn edge_stats(&self) -> [f64; NUM_VIEWS] {
        let mut counts = [0usize; NUM_VIEWS];
        for e in &self.edges {
            counts[e.view.index()] += 1;
        }
        if self.num_nodes == 0 {
            return [0.0; NUM_VIEWS];
        }
        counts.map(|c| 2.0 * c as f64 / self.num_nodes as f64)
    }

    /// Text dump, one `src dst view src_beh dst_beh` line per edge sorted by (src, view, dst).
    pub fn dump(&self) -> String {
        let mut edges = self.edges.clone();
        edges.sort_by_key(|e| (e.src, e.view, e.dst));
        let mut out = String::new();
        for e in edges {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                e.src, e.dst, e.view, e.src_behavior, e.dst_behavior
            );
        }
        out
    }
}

/// Nearest earlier event with the same category but a different item, in O(1)
/// per query: the most recent event and the most recent event whose item differs
/// from it.
#[derive(Clone, Copy)]
struct CategoryRecent {
    latest: (usize, u64),
    other: Option<(usize, u64)>,
}

impl CategoryRecent {
    fn query(&self, item: u64) -> Option<usize> {
        if self.latest.1 != item {
            Some(self.latest.0)
        } else {
            self.other.map(|(p, _)| p)
        }
    }

    fn update(&mut self, pos: usize, item: u64) {
        if self.latest.1 != item {
            self.other = Some(self.latest);
        }
        self.latest = (pos, item);
    }
}

/// Nearest qualifying event scanning in `order`, for every position.
fn nearest_item(events: &[Event], order: impl Iterator<Item = usize>, counters: &mut BuildCounters) -> Vec<Option<usize>> {
    let mut out = vec![None; events.len()];
    let mut last: HashMap<u64, usize> = HashMap::new();
    for j in order {
        let item = events[j].item_id;
        out[j] = last.insert(item, j);
        counters.map_ops += 1;
    }
    out
}

fn nearest_category(events: &[Event], order: impl Iterator<Item = usize>, counters: &mut BuildCounters) -> Vec<Option<usize>> {
    let mut out = vec![None; events.len()];
    let mut recent: HashMap<u64, CategoryRecent> = HashMap::new();
    for j in order {
        let e = &events[j];
        counters.map_ops += 1;
        match recent.get_mut(&e.category_id) {
            Some(r) => {
                out[j] = r.query(e.item_id);
                r.update(j, e.item_id);
            }
            None => {
                recent.insert(
                    e.category_id,
                    CategoryRecent {
                        latest: (j, e.item_id),
                        other: None,
                    },
                );
            }
        }
    }
    out
}

/// Builds the transition graph of `seq` with every view enabled.
pub fn build_graph(seq: &BehaviorSequence) -> TransitionGraph {
    build_graph_with(seq, &GraphOptions::default())
}

pub fn build_graph_with(seq: &BehaviorSequence, opts: &GraphOptions) -> TransitionGraph {
    build_graph_counted(seq, opts).0
}

/// Builds the graph and reports how much map work it took.
pub fn build_graph_counted(
    seq: &BehaviorSequence,
    opts: &GraphOptions,
) -> (TransitionGraph, BuildCounters) {
    let events = seq.events();
    let n = events.len();
    let mut counters = BuildCounters::default();
    let mut edges = Vec::with_capacity(3 * n.saturating_sub(1));
    let within_gap = |p: usize, j: usize| opts.max_gap.map_or(true, |g| j - p <= g);

    let mut push_mutual = |view: TransitionView, prev: &[Option<usize>], next: &[Option<usize>]| {
        for j in 0..n {
            if let Some(p) = prev[j] {
                if next[p] == Some(j) && within_gap(p, j) {
                    edges.push(TransitionEdge {
                        src: p,
                        dst: j,
                        view,
                        src_behavior: events[p].behavior,
                        dst_behavior: events[j].behavior,
                    });
                }
            }
        }
    };

    if opts.views.contains(TransitionView::Item) {
        let prev = nearest_item(events, 0..n, &mut counters);
        let next = nearest_item(events, (0..n).rev(), &mut counters);
        push_mutual(TransitionView::Item, &prev, &next);
    }
    if opts.views.contains(TransitionView::Category) {
        let prev = nearest_category(events, 0..n, &mut counters);
        let next = nearest_category(events, (0..n).rev(), &mut counters);
        push_mutual(TransitionView::Category, &prev, &next);
    }
    if opts.views.contains(TransitionView::Neighbor) {
        for j in 1..n {
            edges.push(TransitionEdge {
                src: j - 1,
                dst: j,
                view: TransitionView::Neighbor,
                src_behavior: events[j - 1].behavior,
                dst_behavior: events[j].behavior,
            });
        }
    }
    (TransitionGraph::from_edges(n, edges), counters)
}
