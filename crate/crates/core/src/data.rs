//! Synthetic planted-pattern data, JSONL ingestion and batching.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{truncate_to_recent, BehaviorSequence, BehaviorType, Candidate, Event, Sample, NUM_BEHAVIORS};

/// How the conversion label depends on the history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlantedRule {
    /// Some item of the candidate's category is clicked and, at its next
    /// occurrence, added to cart.
    ItemClickCart,
    /// A click on the candidate item is followed exactly `spacing` positions
    /// later by a cart.
    SpacedClickCart { spacing: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Categories a user mostly browses.
    pub categories_per_user: usize,
    /// Probability that an event leaves the user's categories.
    pub p_off_mix: f64,
    /// Base rates of click, cart, favorite, purchase.
    pub behavior_rates: [f64; NUM_BEHAVIORS],
    pub p_convert_when_pattern: f64,
    pub p_convert_base: f64,
    pub rule: PlantedRule,
    /// Probability of writing one instance of the pattern into a sequence.
    pub plant_rate: f64,
    /// Probability of writing a near miss of the pattern into a sequence.
    pub distractor_rate: f64,
    pub profile_dim: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            seq_len_min: 64,
            seq_len_max: 256,
            n_items: 2000,
            n_categories: 50,
            categories_per_user: 4,
            p_off_mix: 0.1,
            behavior_rates: [0.76, 0.02, 0.14, 0.08],
            p_convert_when_pattern: 0.7,
            p_convert_base: 0.1,
            rule: PlantedRule::ItemClickCart,
            plant_rate: 0.3,
            distractor_rate: 0.3,
            profile_dim: 16,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    /// Short sequences where the label is set by a click on the candidate
    /// item followed three positions later by a cart. Every sequence also
    /// carries a near miss (spacing two or four), so the click alone says
    /// nothing. Over neighbor edges no node is within one hop of both ends,
    /// while the node after the click sees the click at one hop and the cart
    /// at two.
    pub fn depth_probe() -> Self {
        Self {
            seq_len_min: 16,
            seq_len_max: 32,
            n_items: 200,
            n_categories: 20,
            categories_per_user: 4,
            behavior_rates: [0.7, 0.1, 0.1, 0.1],
            p_convert_when_pattern: 1.0,
            p_convert_base: 0.0,
            rule: PlantedRule::SpacedClickCart { spacing: 3 },
            plant_rate: 0.5,
            distractor_rate: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.p_convert_when_pattern, self.p_convert_base);
        // Equal rates are allowed: they give a generator without signal.
        if !(0.0 <= q && q <= p && p <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= p_convert_base ({q}) <= p_convert_when_pattern ({p}) <= 1"
            )));
        }
        if self.seq_len_min > self.seq_len_max {
            return Err(Error::Config("seq_len_min exceeds seq_len_max".into()));
        }
        if self.n_categories == 0 || self.n_items < self.n_categories {
            return Err(Error::Config("need n_items >= n_categories > 0".into()));
        }
        if self.categories_per_user == 0 || self.categories_per_user > self.n_categories {
            return Err(Error::Config("categories_per_user must be in 1..=n_categories".into()));
        }
        if self.behavior_rates.iter().any(|&r| r < 0.0) || self.behavior_rates.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("behavior rates must be non-negative and not all zero".into()));
        }
        if let PlantedRule::SpacedClickCart { spacing } = self.rule {
            if spacing == 0 || spacing + 2 > self.seq_len_min {
                return Err(Error::Config(format!("spacing {spacing} does not fit seq_len_min")));
            }
            if self.categories_per_user < 2 {
                return Err(Error::Config("spaced rule needs two categories per user".into()));
            }
        }
        for (name, r) in [
            ("plant_rate", self.plant_rate),
            ("distractor_rate", self.distractor_rate),
            ("p_off_mix", self.p_off_mix),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be a probability")));
            }
        }
        Ok(())
    }

    fn items_in(&self, cat: u64) -> u64 {
        let (n, c) = (self.n_items as u64, self.n_categories as u64);
        n / c + u64::from(cat < n % c)
    }
}

/// Item `i` belongs to category `i mod n_categories`.
pub fn item_category(item: u64, n_categories: usize) -> u64 {
    item % n_categories as u64
}

/// A generated sample with the ground truth of its pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub sample: Sample,
    pub has_pattern: bool,
}

/// Whether `rule` holds for the sample's history and candidate.
pub fn has_pattern(rule: PlantedRule, seq: &BehaviorSequence, cand: &Candidate) -> bool {
    let ev = seq.events();
    match rule {
        PlantedRule::ItemClickCart => {
            let mut last: HashMap<u64, BehaviorType> = HashMap::new();
            for e in ev {
                if let Some(prev) = last.insert(e.item_id, e.behavior) {
                    if e.category_id == cand.cat && prev == BehaviorType::Click && e.behavior == BehaviorType::Cart {
                        return true;
                    }
                }
            }
            false
        }
        PlantedRule::SpacedClickCart { spacing } => ev.windows(spacing + 1).any(|w| {
            let (a, b) = (&w[0], &w[spacing]);
            a.behavior == BehaviorType::Click && a.item_id == cand.item && b.behavior == BehaviorType::Cart
        }),
    }
}

/// Deterministic sample stream for one configuration.
pub struct Generator {
    cfg: GeneratorConfig,
    rng: ChaCha8Rng,
    remaining: usize,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let remaining = cfg.n_users;
        Ok(Self { cfg, rng, remaining })
    }

    fn random_item(&mut self, cat: u64) -> u64 {
        let k = self.rng.gen_range(0..self.cfg.items_in(cat));
        cat + k * self.cfg.n_categories as u64
    }

    fn behavior(&mut self) -> BehaviorType {
        let total: f64 = self.cfg.behavior_rates.iter().sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (b, &r) in BehaviorType::ALL.iter().zip(&self.cfg.behavior_rates) {
            if u < r {
                return *b;
            }
            u -= r;
        }
        BehaviorType::Click
    }

    fn draw(&mut self) -> Generated {
        let cfg = self.cfg.clone();
        let n_cat = cfg.n_categories as u64;
        let mut all: Vec<u64> = (0..n_cat).collect();
        all.shuffle(&mut self.rng);
        let mix: Vec<u64> = all[..cfg.categories_per_user].to_vec();
        let len = self.rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);

        let mut events = Vec::with_capacity(len);
        let mut ts: u64 = self.rng.gen_range(1_600_000_000..1_700_000_000);
        let max_log_gap = 86_400f64.ln();
        for position in 0..len {
            if position > 0 {
                ts += self.rng.gen_range(0.0..max_log_gap).exp().round() as u64;
            }
            let cat = if self.rng.gen::<f64>() < cfg.p_off_mix {
                self.rng.gen_range(0..n_cat)
            } else {
                *mix.choose(&mut self.rng).expect("non-empty mix")
            };
            let item_id = self.random_item(cat);
            events.push(Event {
                item_id,
                category_id: cat,
                behavior: self.behavior(),
                timestamp: ts,
                position,
            });
        }

        let cand_cat = *mix.choose(&mut self.rng).expect("non-empty mix");
        let candidate = Candidate {
            item: self.random_item(cand_cat),
            cat: cand_cat,
        };
        let others: Vec<u64> = mix.iter().copied().filter(|&c| c != cand_cat).collect();

        if self.rng.gen::<f64>() < cfg.distractor_rate {
            self.plant(&mut events, candidate, &others, true);
        }
        if self.rng.gen::<f64>() < cfg.plant_rate {
            self.plant(&mut events, candidate, &others, false);
        }

        let sequence = BehaviorSequence::from_raw(events);
        let has = has_pattern(cfg.rule, &sequence, &candidate);
        let p = if has { cfg.p_convert_when_pattern } else { cfg.p_convert_base };
        let label = u8::from(self.rng.gen::<f64>() < p);
        let user_profile = (0..cfg.profile_dim).map(|_| self.rng.sample(StandardNormal)).collect();
        Generated {
            sample: Sample {
                user_profile,
                sequence,
                candidate,
                label,
            },
            has_pattern: has,
        }
    }

    /// Writes one instance of the pattern, or a near miss, into `events`.
    fn plant(&mut self, events: &mut [Event], cand: Candidate, others: &[u64], near_miss: bool) {
        let n = events.len();
        let cand_cat = cand.cat;
        match self.cfg.rule {
            PlantedRule::ItemClickCart => {
                if n < 2 {
                    return;
                }
                let gap = self.rng.gen_range(2..=24).min(n - 1);
                let i = self.rng.gen_range(0..n - gap);
                let j = i + gap;
                let item = self.random_item(cand_cat);
                // A near miss uses the right item pair with the behaviors swapped.
                let (first, second) = if near_miss {
                    (BehaviorType::Cart, BehaviorType::Click)
                } else {
                    (BehaviorType::Click, BehaviorType::Cart)
                };
                for e in &mut events[i + 1..j] {
                    if e.item_id == item {
                        e.item_id = if self.cfg.items_in(cand_cat) > 1 {
                            loop {
                                let other = self.random_item(cand_cat);
                                if other != item {
                                    break other;
                                }
                            }
                        } else {
                            e.behavior = BehaviorType::Favorite;
                            item
                        };
                    }
                }
                for (k, b) in [(i, first), (j, second)] {
                    events[k].item_id = item;
                    events[k].category_id = cand_cat;
                    events[k].behavior = b;
                }
            }
            PlantedRule::SpacedClickCart { spacing } => {
                let spacing = if near_miss {
                    if self.rng.gen::<bool>() {
                        spacing - 1
                    } else {
                        spacing + 1
                    }
                } else {
                    spacing
                };
                if spacing == 0 || n <= spacing {
                    return;
                }
                let i = self.rng.gen_range(0..n - spacing);
                let other = *others.choose(&mut self.rng).expect("two categories");
                let (a, b) = (cand.item, self.random_item(other));
                events[i] = Event {
                    item_id: a,
                    category_id: cand_cat,
                    behavior: BehaviorType::Click,
                    ..events[i]
                };
                events[i + spacing] = Event {
                    item_id: b,
                    category_id: other,
                    behavior: BehaviorType::Cart,
                    ..events[i + spacing]
                };
            }
        }
    }
}

impl Iterator for Generator {
    type Item = Generated;

    fn next(&mut self) -> Option<Generated> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        Some(self.draw())
    }
}

/// All samples of a configuration, in stream order.
pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<Sample>> {
    Ok(Generator::new(cfg.clone())?.map(|g| g.sample).collect())
}

/// Fraction of samples carrying the pattern, estimated from `n` fresh draws.
pub fn estimate_prevalence(cfg: &GeneratorConfig, n: usize, seed: u64) -> Result<f64> {
    let cfg = GeneratorConfig {
        n_users: n,
        seed,
        ..cfg.clone()
    };
    let hits = Generator::new(cfg)?.filter(|g| g.has_pattern).count();
    Ok(hits as f64 / n.max(1) as f64)
}

/// AUC of the ideal scorer, which sees only whether the pattern is present.
/// Labels are 1 with probability `p` when it is and `q` when it is not;
/// `prevalence` is the pattern rate. Ties between equal scores count half.
pub fn bayes_auc(p: f64, q: f64, prevalence: f64) -> f64 {
    let pi = prevalence;
    let pos = p * pi + q * (1.0 - pi);
    let neg = (1.0 - p) * pi + (1.0 - q) * (1.0 - pi);
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    // Probability that a positive (resp. negative) carries the pattern.
    let a = p * pi / pos;
    let b = (1.0 - p) * pi / neg;
    a * (1.0 - b) + 0.5 * (a * b + (1.0 - a) * (1.0 - b))
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonEvent {
    item: u64,
    cat: u64,
    beh: String,
    ts: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSample {
    profile: Vec<f64>,
    events: Vec<JsonEvent>,
    candidate: Candidate,
    label: u8,
}

fn to_json(s: &Sample) -> JsonSample {
    JsonSample {
        profile: s.user_profile.clone(),
        events: s
            .sequence
            .events()
            .iter()
            .map(|e| JsonEvent {
                item: e.item_id,
                cat: e.category_id,
                beh: e.behavior.as_str().to_string(),
                ts: e.timestamp,
            })
            .collect(),
        candidate: s.candidate,
        label: s.label,
    }
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, &to_json(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parses one JSONL sample. Positions come from array order and histories
/// longer than `max_seq_len` keep their most recent events.
pub fn parse_sample(line: &str, max_seq_len: usize) -> std::result::Result<Sample, String> {
    let js: JsonSample = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if js.label > 1 {
        return Err(format!("label must be 0 or 1, got {}", js.label));
    }
    let mut events = Vec::with_capacity(js.events.len());
    for (position, e) in js.events.into_iter().enumerate() {
        let behavior: BehaviorType = e.beh.parse().map_err(|err: Error| err.to_string())?;
        events.push(Event {
            item_id: e.item,
            category_id: e.cat,
            behavior,
            timestamp: e.ts,
            position,
        });
    }
    let seq = BehaviorSequence::from_raw(events);
    if let Err(v) = crate::event::validate_sequence(&seq) {
        return Err(v.to_string());
    }
    Ok(Sample {
        user_profile: js.profile,
        sequence: truncate_to_recent(&seq, max_seq_len),
        candidate: js.candidate,
        label: js.label,
    })
}

pub fn read_jsonl(reader: impl BufRead, name: &str, max_seq_len: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    let mut profile_dim = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(name, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let s = parse_sample(&line, max_seq_len).map_err(parse_err)?;
        match profile_dim {
            None => profile_dim = Some(s.user_profile.len()),
            Some(p) if p != s.user_profile.len() => {
                return Err(parse_err(format!(
                    "profile has {} values, earlier lines have {p}",
                    s.user_profile.len()
                )))
            }
            Some(_) => {}
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, max_seq_len: usize) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), &path.display().to_string(), max_seq_len)
}

/// Consecutive batches in input order; the last one may be short.
pub fn batches(samples: &[Sample], size: usize) -> impl Iterator<Item = &[Sample]> {
    samples.chunks(size.max(1))
}
