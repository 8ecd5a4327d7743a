//! Compile a short multi-behavior history into its three-view transition
//! graph and inspect edges, adjacency slots and per-view edge statistics.

use tga::event::{BehaviorSequence, BehaviorType};
use tga::graph::{build_graph, GraphOptions, TransitionView, ViewSet};

fn main() -> tga::Result<()> {
    // (item, category, behavior, timestamp)
    let mut seq = BehaviorSequence::new();
    seq.push(1, 10, BehaviorType::Click, 10);
    seq.push(2, 10, BehaviorType::Click, 20);
    seq.push(1, 10, BehaviorType::Cart, 30);
    seq.push(3, 11, BehaviorType::Click, 40);

    let g = build_graph(&seq);
    println!("{} nodes, {} edges", g.num_nodes(), g.num_edges());
    print!("{}", g.dump());

    for node in 0..g.num_nodes() {
        let slots: Vec<String> = g
            .neighbor_slots(node)?
            .iter()
            .map(|s| format!("{}-{}->{}", s.view, s.direction.as_str(), s.peer))
            .collect();
        println!("node {node}: {}", slots.join(", "));
    }

    let stats = g.edge_stats();
    for v in TransitionView::ALL {
        println!("{v}: {:.2} incident edges per node", stats[v.index()]);
    }

    // Dropping a view removes its edges before anything is encoded.
    let opts = GraphOptions {
        views: ViewSet::all().without(TransitionView::Item),
        max_gap: None,
    };
    let g = tga::graph::build_graph_with(&seq, &opts);
    println!("without the item view: {} edges", g.num_edges());
    Ok(())
}
