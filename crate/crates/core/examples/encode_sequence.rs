//! Embed a history, run the transition-aware encoder layer by layer and look
//! at widths, messages and per-node attention over the neighbor set.

use tga::embedding::{embed_sequence, EmbeddingConfig, EmbeddingTables, TimeEncoding};
use tga::encoder::{count_flops_for_slots, EncoderConfig, GraphPlan, TgaEncoder};
use tga::event::{BehaviorSequence, BehaviorType};
use tga::graph::build_graph;
use tga::numerics::{ParamStore, Tape};

fn main() -> tga::Result<()> {
    let d = 64;
    let emb_cfg = EmbeddingConfig {
        d,
        item_vocab: 4096,
        time_buckets: 32,
        max_positions: 256,
        time_encoding: TimeEncoding::Recency,
    };
    let enc_cfg = EncoderConfig::new(d, 3);
    let mut store = ParamStore::<f64>::new(1);
    let tables = EmbeddingTables::register(&mut store, &emb_cfg);
    let encoder = TgaEncoder::register(&mut store, enc_cfg.clone())?;

    let mut seq = BehaviorSequence::new();
    let behaviors = [BehaviorType::Click, BehaviorType::Click, BehaviorType::Cart, BehaviorType::Purchase];
    for i in 0..12u64 {
        seq.push(100 + i % 5, i % 3, behaviors[(i % 4) as usize], 1_700_000_000 + 600 * i);
    }
    let graph = build_graph(&seq);

    let mut tape = Tape::new(&store);
    let ns = embed_sequence(&mut tape, &tables, &emb_cfg, &seq)?;
    println!("node states {:?}, edge input width {}", tape.shape(ns.states), enc_cfg.edge_input_dim());
    let traces = encoder.encode_traced(&mut tape, &ns, &graph)?;
    for (l, t) in traces.iter().enumerate() {
        println!(
            "layer {l}: messages {:?}, attended {:?}, output {:?}",
            tape.shape(t.messages),
            tape.shape(t.attended),
            tape.shape(t.output)
        );
    }

    // Attention of head 0 at node 5 over its filled slots.
    let plan = GraphPlan::new(&graph, &enc_cfg);
    let slots = graph.neighbor_slots(5)?;
    let weights = encoder.node_attention(&tape, &traces[0], &plan, 5, 0);
    for (s, w) in slots.iter().zip(weights) {
        println!("  {}-{} from node {}: {w:.3}", s.view, s.direction.as_str(), s.peer);
    }

    println!(
        "multiply-adds for this sequence: {}",
        count_flops_for_slots(&enc_cfg, seq.len(), plan.num_slots())
    );
    Ok(())
}
