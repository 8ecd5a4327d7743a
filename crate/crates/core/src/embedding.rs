//! Per-event node representations: item, behavior, time and position
//! embeddings concatenated into one row of width `4d`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{hash_bucket, BehaviorSequence, NUM_BEHAVIORS};
use crate::numerics::{Init, ParamId, ParamStore, Scalar, Tape, Var};

/// Standard deviation of embedding table initialization.
pub const EMBEDDING_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoding {
    /// Log bucket of the gap to the most recent event of the sequence.
    Recency,
    /// Log bucket of the raw timestamp.
    AbsoluteBucket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub d: usize,
    pub item_vocab: usize,
    pub time_buckets: usize,
    pub max_positions: usize,
    pub time_encoding: TimeEncoding,
}

impl EmbeddingConfig {
    /// Node width, four embeddings side by side.
    pub fn node_dim(&self) -> usize {
        4 * self.d
    }
}

/// `floor(log2(1 + (reference - timestamp)))`, clamped to `buckets - 1`.
/// A timestamp after the reference counts as a zero gap.
pub fn bucket(timestamp: u64, reference: u64, buckets: usize) -> usize {
    if timestamp > reference {
        log::debug!("timestamp {timestamp} after reference {reference}; using gap 0");
    }
    let gap = reference.saturating_sub(timestamp);
    // floor(log2(1 + gap)) is the bit length of (1 + gap) minus one.
    let b = (64 - (gap.saturating_add(1)).leading_zeros() - 1) as usize;
    b.min(buckets.saturating_sub(1))
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTables {
    pub item: ParamId,
    pub behavior: ParamId,
    pub time: ParamId,
    pub position: ParamId,
}

impl EmbeddingTables {
    pub fn register<F: Scalar>(store: &mut ParamStore<F>, cfg: &EmbeddingConfig) -> Self {
        let init = Init::Normal(EMBEDDING_INIT_STD);
        Self {
            item: store.register("emb.item", cfg.item_vocab, cfg.d, init),
            behavior: store.register("emb.behavior", NUM_BEHAVIORS, cfg.d, init),
            time: store.register("emb.time", cfg.time_buckets, cfg.d, init),
            position: store.register("emb.position", cfg.max_positions, cfg.d, init),
        }
    }
}

/// Node representations of one sequence on a tape.
#[derive(Debug, Clone, Copy)]
pub struct NodeStates {
    /// `L x 4d` current node rows.
    pub states: Var,
    /// `L x d` raw time embeddings, shared by every layer.
    pub time: Var,
    /// `L x d` raw position embeddings, shared by every layer.
    pub position: Var,
    pub len: usize,
}

/// Table row indices of every event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupRows {
    pub item: Vec<usize>,
    pub behavior: Vec<usize>,
    pub time: Vec<usize>,
    pub position: Vec<usize>,
}

pub fn lookup_rows(seq: &BehaviorSequence, cfg: &EmbeddingConfig) -> Result<LookupRows> {
    let reference = seq.last_timestamp().unwrap_or(0);
    let n = seq.len();
    let mut rows = LookupRows {
        item: Vec::with_capacity(n),
        behavior: Vec::with_capacity(n),
        time: Vec::with_capacity(n),
        position: Vec::with_capacity(n),
    };
    for e in seq.events() {
        if e.position >= cfg.max_positions {
            return Err(Error::PositionOverflow {
                position: e.position,
                max: cfg.max_positions,
            });
        }
        rows.item.push(hash_bucket(e.item_id, cfg.item_vocab));
        rows.behavior.push(e.behavior.code());
        rows.time.push(match cfg.time_encoding {
            TimeEncoding::Recency => bucket(e.timestamp, reference, cfg.time_buckets),
            TimeEncoding::AbsoluteBucket => bucket(0, e.timestamp, cfg.time_buckets),
        });
        rows.position.push(e.position);
    }
    Ok(rows)
}

/// Looks up and concatenates the four embeddings of every event.
pub fn embed_sequence<F: Scalar>(
    tape: &mut Tape<'_, F>,
    tables: &EmbeddingTables,
    cfg: &EmbeddingConfig,
    seq: &BehaviorSequence,
) -> Result<NodeStates> {
    let rows = lookup_rows(seq, cfg)?;
    let item_t = tape.param(tables.item);
    let beh_t = tape.param(tables.behavior);
    let time_t = tape.param(tables.time);
    let pos_t = tape.param(tables.position);
    let item = tape.gather_rows(item_t, Arc::new(rows.item));
    let behavior = tape.gather_rows(beh_t, Arc::new(rows.behavior));
    let time = tape.gather_rows(time_t, Arc::new(rows.time));
    let position = tape.gather_rows(pos_t, Arc::new(rows.position));
    let states = tape.concat_cols(&[item, behavior, time, position]);
    debug_assert_eq!(tape.shape(states), (seq.len(), cfg.node_dim()));
    Ok(NodeStates {
        states,
        time,
        position,
        len: seq.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::BehaviorType;

    fn cfg(d: usize) -> EmbeddingConfig {
        EmbeddingConfig {
            d,
            item_vocab: 50,
            time_buckets: 32,
            max_positions: 16,
            time_encoding: TimeEncoding::Recency,
        }
    }

    #[test]
    fn bucket_values() {
        assert_eq!(bucket(100, 100, 32), 0);
        assert_eq!(bucket(99, 100, 32), 1);
        // floor(log2(3601)): 2^11 = 2048 <= 3601 < 4096 = 2^12.
        assert_eq!(bucket(0, 3600, 32), 11);
        assert_eq!(bucket(0, u64::MAX, 32), 31);
        assert_eq!(bucket(200, 100, 32), 0);
    }

    #[test]
    fn bucket_matches_float_log() {
        for gap in [0u64, 1, 2, 3, 7, 8, 1000, 86_400, 1 << 40] {
            let expect = ((1.0 + gap as f64).log2()).floor() as usize;
            assert_eq!(bucket(0, gap, 64), expect, "gap {gap}");
        }
    }

    #[test]
    fn row_width_is_four_d() {
        for d in [1, 3, 64] {
            let c = cfg(d);
            let mut store = ParamStore::<f64>::new(0);
            let tables = EmbeddingTables::register(&mut store, &c);
            let mut seq = BehaviorSequence::new();
            seq.push(1, 1, BehaviorType::Click, 10);
            seq.push(2, 1, BehaviorType::Cart, 20);
            let mut tape = Tape::new(&store);
            let ns = embed_sequence(&mut tape, &tables, &c, &seq).unwrap();
            assert_eq!(tape.shape(ns.states), (2, 4 * d));
            assert_eq!(tape.shape(ns.time), (2, d));
        }
    }

    #[test]
    fn empty_sequence_gives_empty_matrix() {
        let c = cfg(64);
        let mut store = ParamStore::<f64>::new(0);
        let tables = EmbeddingTables::register(&mut store, &c);
        let mut tape = Tape::new(&store);
        let ns = embed_sequence(&mut tape, &tables, &c, &BehaviorSequence::new()).unwrap();
        assert_eq!(tape.shape(ns.states), (0, 256));
    }

    #[test]
    fn identical_lookups_give_identical_rows() {
        let c = cfg(4);
        let mut store = ParamStore::<f64>::new(0);
        let tables = EmbeddingTables::register(&mut store, &c);
        let mut seq = BehaviorSequence::new();
        seq.push(7, 1, BehaviorType::Click, 10);
        seq.push(7, 1, BehaviorType::Click, 10);
        let rows = lookup_rows(&seq, &c).unwrap();
        assert_eq!(rows.item[0], rows.item[1]);
        let mut tape = Tape::new(&store);
        let ns = embed_sequence(&mut tape, &tables, &c, &seq).unwrap();
        let m = tape.value(ns.states);
        // Positions differ, everything else matches.
        assert_eq!(m.row(0)[..12], m.row(1)[..12]);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let c = cfg(2);
        let mut store = ParamStore::<f64>::new(0);
        let tables = EmbeddingTables::register(&mut store, &c);
        let mut seq = BehaviorSequence::new();
        for t in 0..17 {
            seq.push(1, 1, BehaviorType::Click, t);
        }
        let mut tape = Tape::new(&store);
        assert!(matches!(
            embed_sequence(&mut tape, &tables, &c, &seq),
            Err(Error::PositionOverflow { position: 16, max: 16 })
        ));
    }

    #[test]
    fn gradient_touches_only_looked_up_rows() {
        let c = cfg(3);
        let mut store = ParamStore::<f64>::new(0);
        let tables = EmbeddingTables::register(&mut store, &c);
        let mut seq = BehaviorSequence::new();
        seq.push(5, 1, BehaviorType::Favorite, 10);
        let rows = lookup_rows(&seq, &c).unwrap();
        let mut grads = store.new_gradients();
        let mut tape = Tape::new(&store);
        let ns = embed_sequence(&mut tape, &tables, &c, &seq).unwrap();
        let loss = tape.sum(ns.states);
        tape.backward(loss, &mut grads).unwrap();
        for (table, row) in [
            (tables.item, rows.item[0]),
            (tables.behavior, rows.behavior[0]),
            (tables.time, rows.time[0]),
            (tables.position, rows.position[0]),
        ] {
            let g = grads.get(table);
            for r in 0..g.rows() {
                let expect = if r == row { 1.0 } else { 0.0 };
                assert!(g.row(r).iter().all(|&x| x == expect), "table row {r}");
            }
        }
    }
}
