//! Synthetic inputs for the benchmarks.

use std::collections::BTreeMap;

use beyondrec::corpus::{Interaction, InteractionLog};
use beyondrec::experiments::{prepare_log, Prepared};
use beyondrec::ids::{ItemId, UserId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A 5-core-filtered dataset whose item draws skew toward low ids.
pub fn world(users: usize, items: usize, seed: u64) -> Prepared {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let catalog: BTreeMap<ItemId, String> = (0..items)
        .map(|i| (ItemId::from(format!("p{i:05}")), format!("Product {i} {}", ["Serum", "Balm", "Gel", "Mist"][i % 4])))
        .collect();
    let mut events = Vec::new();
    for u in 0..users {
        for t in 0..rng.random_range(8..=20) {
            let i = (rng.random::<f64>().powi(2) * items as f64) as usize;
            events.push(Interaction {
                user: UserId::from(format!("u{u:06}")),
                item: ItemId::from(format!("p{i:05}")),
                ts: t,
            });
        }
    }
    let log = InteractionLog::new(events, catalog).expect("synthetic log is valid");
    prepare_log(&log, 5).expect("synthetic log survives filtering")
}

/// A numbered-list response naming `titles`, with commentary on every line.
pub fn response(titles: &[&str]) -> String {
    let mut out = String::from("Based on the history, here are my picks:\n\n");
    for (n, t) in titles.iter().enumerate() {
        out.push_str(&format!("{}. **{t}** - matches earlier purchases\n", n + 1));
    }
    out
}
