//! Event logs, leave-one-out datasets, social structure and synthetic data.

pub mod dataset;
pub mod events;
pub mod sim;
pub mod social;
pub mod tef;
pub mod window;

pub use dataset::{build_dataset, Dataset, Event, Split, MIN_SEQUENCE_LEN, SECONDS_PER_DAY};
pub use events::{
    format_events, head_fraction, parse_events, parse_events_str, parse_social, parse_social_str, write_events,
    write_social, EventRecord, FractionMode, ParsedEvents,
};
pub use sim::{simulate_hawkes, simulate_hawkes_on_graph, Cause, HawkesSimConfig, SimEvent, SimOutput, UserIntensity};
pub use social::{sample_friends, SocialGraph};
pub use tef::compute_tef;
pub use window::{training_cutoff, window_friend_events, FriendWindows};
