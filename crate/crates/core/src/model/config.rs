use std::str::FromStr;

use crate::error::{Error, Result};

/// Which components are switched off. At most one flag may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Skip the graph layer; raw embeddings feed everything downstream.
    pub no_ge: bool,
    /// Skip mutual excitation; self excitation reads raw event embeddings.
    pub no_mt: bool,
    /// Replace self excitation by causal mean pooling.
    pub no_st: bool,
    /// Drop the `β·Δt + μ` terms and the point-process loss.
    pub no_tc: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = ["default", "no_ge", "no_mt", "no_st", "no_tc"];

    pub fn variant(name: &str) -> Result<Self> {
        let mut a = Self::default();
        match name {
            "default" => {}
            "no_ge" => a.no_ge = true,
            "no_mt" => a.no_mt = true,
            "no_st" => a.no_st = true,
            "no_tc" => a.no_tc = true,
            _ => return Err(Error::config("model.ablation", format!("unknown variant `{name}`"))),
        }
        Ok(a)
    }

    pub fn name(&self) -> &'static str {
        match (self.no_ge, self.no_mt, self.no_st, self.no_tc) {
            (true, _, _, _) => "no_ge",
            (_, true, _, _) => "no_mt",
            (_, _, true, _) => "no_st",
            (_, _, _, true) => "no_tc",
            _ => "default",
        }
    }

    /// Row label in ablation tables.
    pub fn label(&self) -> &'static str {
        match self.name() {
            "no_ge" => "w/o GE",
            "no_mt" => "w/o MT",
            "no_st" => "w/o ST",
            "no_tc" => "w/o TC",
            _ => "Default",
        }
    }

    fn count(&self) -> usize {
        [self.no_ge, self.no_mt, self.no_st, self.no_tc].iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Friends sampled per user (M).
    pub friends: usize,
    /// Events kept per friend window (l_m).
    pub window: usize,
    /// Most recent own events fed to the model.
    pub max_len: usize,
    pub max_order: usize,
    /// Cap on meta-path neighbours per item and order.
    pub neighbour_cap: usize,
    /// Feed `ln(1 + Δt)` to the attention logits instead of raw intervals.
    pub log_intervals: bool,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 40,
            friends: 10,
            window: 10,
            max_len: 50,
            max_order: 2,
            neighbour_cap: 50,
            log_intervals: false,
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (v, f) in [
            (self.d, "model.d"),
            (self.friends, "model.friends"),
            (self.window, "model.window"),
            (self.max_len, "model.max_len"),
            (self.neighbour_cap, "model.neighbour_cap"),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be >= 1"));
            }
        }
        if !(1..=4).contains(&self.max_order) {
            return Err(Error::config("model.max_order", "must lie in 1..=4"));
        }
        if self.ablation.count() > 1 {
            return Err(Error::config("model.ablation", "at most one ablation may be active"));
        }
        Ok(())
    }

    /// Sets one `model.*` key. Returns `false` for keys outside this namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "model.d" => self.d = parse(key, value)?,
            "model.friends" => self.friends = parse(key, value)?,
            "model.window" => self.window = parse(key, value)?,
            "model.max_len" => self.max_len = parse(key, value)?,
            "model.max_order" => self.max_order = parse(key, value)?,
            "model.neighbour_cap" => self.neighbour_cap = parse(key, value)?,
            "model.log_intervals" => self.log_intervals = parse(key, value)?,
            "model.ablation" => self.ablation = Ablation::variant(value.trim())?,
            "model.seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.d", self.d.to_string()),
            ("model.friends", self.friends.to_string()),
            ("model.window", self.window.to_string()),
            ("model.max_len", self.max_len.to_string()),
            ("model.max_order", self.max_order.to_string()),
            ("model.neighbour_cap", self.neighbour_cap.to_string()),
            ("model.log_intervals", self.log_intervals.to_string()),
            ("model.ablation", self.ablation.name().to_string()),
            ("model.seed", self.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::config("model", format!("bad line `{line}`")))?;
            if !c.set(k.trim(), v)? {
                return Err(Error::config(k.trim(), "unknown key"));
            }
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = ModelConfig {
            d: 8,
            ablation: Ablation::variant("no_st").unwrap(),
            log_intervals: true,
            ..Default::default()
        };
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn invalid_values_name_the_field() {
        let c = ModelConfig { d: 0, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().contains("model.d"));
        let c =
            ModelConfig { ablation: Ablation { no_mt: true, no_st: true, ..Default::default() }, ..Default::default() };
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().set("model.d", "x").is_err());
    }
}
