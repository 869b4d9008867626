//! Seeded two-variant process used for self-contained experiments.
//!
//! Every case starts with `register`. The fast variant continues with
//! `quick check`, `approve`, `notify`, `close`; the slow one with
//! `full review`, `escalate`, `decide`, `close`. Gaps between events are
//! fixed per variant, so the variant and the prefix length together
//! determine the remaining time exactly.

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eventlog::{AttrKind, AttrScope, AttrValue, AttributeSchema, Event, EventLog, Trace};

pub const FAST_PATH: [&str; 5] = ["register", "quick check", "approve", "notify", "close"];
pub const SLOW_PATH: [&str; 5] = ["register", "full review", "escalate", "decide", "close"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub cases: usize,
    pub seed: u64,
    /// Hours between consecutive events of a fast case.
    pub fast_gap_hours: f64,
    /// Hours between consecutive events of a slow case.
    pub slow_gap_hours: f64,
    /// Probability that a case follows the slow variant.
    pub slow_share: f64,
    /// Hours between the starts of consecutive cases.
    pub arrival_hours: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            cases: 30,
            seed: 7,
            fast_gap_hours: 6.0,
            slow_gap_hours: 48.0,
            slow_share: 0.5,
            arrival_hours: 5.0,
        }
    }
}

fn origin() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 1, 8, 0, 0).single().expect("valid origin")
}

/// Generates the log. Cases carry a categorical `channel` (case scope,
/// independent of the variant) and a numeric `cost` per event.
pub fn generate_two_variant_log(config: &SyntheticConfig) -> Result<EventLog> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut schema = AttributeSchema::default();
    schema.insert("channel", AttrKind::Categorical, AttrScope::Case);
    schema.insert("cost", AttrKind::Numeric, AttrScope::Event);
    let channels = ["web", "phone", "mail"];
    let mut traces = Vec::with_capacity(config.cases);
    for c in 0..config.cases {
        let case_id = format!("case-{c:04}");
        let slow = rng.random_bool(config.slow_share.clamp(0.0, 1.0));
        let (path, gap) = if slow {
            (SLOW_PATH, config.slow_gap_hours)
        } else {
            (FAST_PATH, config.fast_gap_hours)
        };
        let channel = channels[rng.random_range(0..channels.len())];
        let start = origin() + Duration::seconds((c as f64 * config.arrival_hours * 3600.0).round() as i64);
        let events = path
            .iter()
            .enumerate()
            .map(|(i, activity)| {
                let at = start + Duration::seconds((i as f64 * gap * 3600.0).round() as i64);
                let cost = (rng.random_range(10.0..100.0f64) * 100.0).round() / 100.0;
                Event::new(case_id.clone(), *activity, at)
                    .with_attr("channel", AttrValue::Str(channel.into()))
                    .with_attr("cost", AttrValue::Num(cost))
            })
            .collect();
        traces.push(Trace::new(case_id, events)?);
    }
    EventLog::new(traces, schema)
}
