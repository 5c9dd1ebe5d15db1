use super::dataset::Dataset;

/// Concatenated friend event windows, `friends.len() * window` slots long.
///
/// Each friend contributes its most recent `window` events no later than the
/// cutoff, left-padded with the padding item.
#[derive(Clone, Debug, PartialEq)]
pub struct FriendWindows {
    pub window: usize,
    pub friends: Vec<usize>,
    pub items: Vec<usize>,
    pub times: Vec<f64>,
    /// `true` marks a padding slot.
    pub pad: Vec<bool>,
}

impl FriendWindows {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Friend owning slot `k`.
    pub fn owner(&self, k: usize) -> usize {
        self.friends[k / self.window]
    }
}

/// Latest time a user's context may see: the last training event.
pub fn training_cutoff(dataset: &Dataset, user: usize) -> f64 {
    dataset.last_train_time(user)
}

pub fn window_friend_events(dataset: &Dataset, friends: &[usize], window: usize, cutoff: f64) -> FriendWindows {
    let window = window.max(1);
    let pad_item = dataset.padding_item();
    let n = friends.len() * window;
    let mut out = FriendWindows {
        window,
        friends: friends.to_vec(),
        items: Vec::with_capacity(n),
        times: Vec::with_capacity(n),
        pad: Vec::with_capacity(n),
    };
    for &f in friends {
        let seq = &dataset.sequences[f];
        let visible = seq.partition_point(|e| e.time <= cutoff);
        let start = visible.saturating_sub(window);
        let real = &seq[start..visible];
        for _ in real.len()..window {
            out.items.push(pad_item);
            out.times.push(0.0);
            out.pad.push(true);
        }
        for e in real {
            out.items.push(e.item);
            out.times.push(e.time);
            out.pad.push(false);
        }
    }
    out
}
