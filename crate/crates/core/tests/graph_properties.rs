mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tga::graph::{build_graph, build_graph_with, GraphOptions, TransitionView, ViewSet};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn built_graphs_follow_the_rules(seed in any::<u64>(), len in 0usize..200, items in 1u64..12, cats in 1u64..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, items, cats);
        let g = build_graph(&seq);
        let v = common::graph_violations(&seq, &g);
        prop_assert!(v.is_empty(), "{:?}", v);
        prop_assert_eq!(build_graph(&seq), g);
    }

    #[test]
    fn views_build_independently(seed in any::<u64>(), len in 1usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, 8, 3);
        let full = build_graph(&seq);
        for off in TransitionView::ALL {
            let opts = GraphOptions { views: ViewSet::all().without(off), ..GraphOptions::default() };
            prop_assert_eq!(build_graph_with(&seq, &opts), full.without_view(off));
        }
    }

    #[test]
    fn max_gap_only_drops_long_edges(seed in any::<u64>(), len in 1usize..120, gap in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = common::random_sequence(&mut rng, len, 6, 3);
        let full = build_graph(&seq);
        let capped = build_graph_with(&seq, &GraphOptions { max_gap: Some(gap), ..GraphOptions::default() });
        let kept: Vec<_> = full
            .edges()
            .iter()
            .filter(|e| e.view == TransitionView::Neighbor || e.dst - e.src <= gap)
            .copied()
            .collect();
        prop_assert_eq!(capped.edges(), &kept[..]);
    }
}

#[test]
fn four_event_walkthrough() {
    let g = build_graph(&common::four_events());
    assert_eq!(
        g.dump(),
        "0 2 item click cart\n0 1 category click click\n0 1 neighbor click click\n\
         1 2 category click cart\n1 2 neighbor click cart\n2 3 neighbor cart click\n"
    );
}
