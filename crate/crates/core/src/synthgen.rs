//! Synthetic sponsored-search logs with planted sequential click behaviour.
//!
//! Each user has a handful of interest topics and, per topic, a fixed slate of
//! ads ordered by relevance. A page (one query) shows the head of the slate:
//! one or two mainline ads, the first in the top slot, and sometimes a
//! sidebar ad. Clicks follow a logistic model:
//!
//! ```text
//! logit = base_bias + position_bias[class] + relevance_weight * relevance
//!       + dwell_weight * log1p(dwell at the user's last impression of this ad)
//!       + quickback_penalty * 2^(-hours since last quick back on this ad / half-life)
//!       + topic_lift * [topic first seen in an earlier session]
//! ```
//!
//! Clicked impressions draw a log-normal dwell; "unsatisfied" clicks (more
//! likely for low relevance) are shifted down so many fall under the
//! quick-back threshold.

use std::collections::HashMap;

use rand_distr::{Distribution, Exp, LogNormal, Normal};
use thiserror::Error;

use crate::config::{self, ConfigError, KeyValue};
use crate::datamodel::{round6, ImpressionRecord, Position, PositionClass};
use crate::numkernel::{sigmoid, Rng};

const STREAM_USER: u64 = 0x05E5;
const STREAM_SHUFFLE: u64 = 0x5F1E;
const SECONDS_PER_DAY: u64 = 86_400;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GenError {
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Generator parameters. Counts must be positive; see [`GenConfig::check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_users: usize,
    pub min_impressions: usize,
    pub max_impressions: usize,
    pub n_ads: usize,
    pub n_topics: usize,
    pub seed: u64,
    pub topics_per_user: usize,
    pub slate_size: usize,
    /// Chance a page shows an off-slate ad in place of a slate ad.
    pub slate_swap_rate: f64,
    pub topic_stickiness: f64,
    pub new_topic_rate: f64,
    pub second_mainline_rate: f64,
    pub sidebar_rate: f64,
    pub base_timestamp: u64,
    pub span_days: u64,
    pub min_gap_seconds: f64,
    pub base_bias: f64,
    pub position_bias_top: f64,
    pub position_bias_mainline: f64,
    pub position_bias_sidebar: f64,
    pub relevance_weight: f64,
    pub relevance_noise: f64,
    pub dwell_weight: f64,
    pub quickback_penalty: f64,
    pub quickback_halflife_hours: f64,
    pub topic_lift: f64,
    pub dwell_log_mean: f64,
    pub dwell_log_sd: f64,
    pub unsatisfied_logit: f64,
    pub satisfaction_coupling: f64,
    pub unsatisfied_log_shift: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 5000,
            min_impressions: 20,
            max_impressions: 200,
            n_ads: 2000,
            n_topics: 40,
            seed: 1,
            topics_per_user: 3,
            slate_size: 4,
            slate_swap_rate: 0.05,
            topic_stickiness: 0.7,
            new_topic_rate: 0.05,
            second_mainline_rate: 0.5,
            sidebar_rate: 0.5,
            base_timestamp: 1_383_955_200,
            span_days: 14,
            min_gap_seconds: 30.0,
            base_bias: -2.2,
            position_bias_top: 0.8,
            position_bias_mainline: 0.0,
            position_bias_sidebar: -1.5,
            relevance_weight: 1.5,
            relevance_noise: 0.1,
            dwell_weight: 0.35,
            quickback_penalty: -2.5,
            quickback_halflife_hours: 24.0,
            topic_lift: 0.6,
            dwell_log_mean: 60f64.ln(),
            dwell_log_sd: 0.8,
            unsatisfied_logit: 0.0,
            satisfaction_coupling: 3.0,
            unsatisfied_log_shift: 2.0,
        }
    }
}

impl GenConfig {
    pub fn position_bias(&self, class: PositionClass) -> f64 {
        match class {
            PositionClass::TopFirst => self.position_bias_top,
            PositionClass::Mainline => self.position_bias_mainline,
            PositionClass::Sidebar => self.position_bias_sidebar,
        }
    }

    pub fn span_seconds(&self) -> u64 {
        self.span_days * SECONDS_PER_DAY
    }

    /// Midpoint of the time range; records before it form the training half.
    pub fn split_timestamp(&self) -> u64 {
        self.base_timestamp + self.span_seconds() / 2
    }

    fn ads_per_topic(&self) -> usize {
        self.n_ads / self.n_topics
    }

    /// Switches off every planted sequential effect.
    pub fn without_sequential_effects(mut self) -> Self {
        self.dwell_weight = 0.0;
        self.quickback_penalty = 0.0;
        self.topic_lift = 0.0;
        self
    }
}

fn invalid(key: &str, reason: &str) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.to_string(),
    }
}

impl KeyValue for GenConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let real = |v: &str| config::value::<f64>(key, v, "a real number");
        let count = |v: &str| config::value::<usize>(key, v, "a count");
        match key {
            "n_users" => self.n_users = count(v)?,
            "min_impressions" => self.min_impressions = count(v)?,
            "max_impressions" => self.max_impressions = count(v)?,
            "n_ads" => self.n_ads = count(v)?,
            "n_topics" => self.n_topics = count(v)?,
            "seed" => self.seed = config::value(key, v, "an unsigned integer")?,
            "topics_per_user" => self.topics_per_user = count(v)?,
            "slate_size" => self.slate_size = count(v)?,
            "slate_swap_rate" => self.slate_swap_rate = real(v)?,
            "topic_stickiness" => self.topic_stickiness = real(v)?,
            "new_topic_rate" => self.new_topic_rate = real(v)?,
            "second_mainline_rate" => self.second_mainline_rate = real(v)?,
            "sidebar_rate" => self.sidebar_rate = real(v)?,
            "base_timestamp" => self.base_timestamp = config::value(key, v, "an unsigned integer")?,
            "span_days" => self.span_days = config::value(key, v, "an unsigned integer")?,
            "min_gap_seconds" => self.min_gap_seconds = real(v)?,
            "base_bias" => self.base_bias = real(v)?,
            "position_bias_top" => self.position_bias_top = real(v)?,
            "position_bias_mainline" => self.position_bias_mainline = real(v)?,
            "position_bias_sidebar" => self.position_bias_sidebar = real(v)?,
            "relevance_weight" => self.relevance_weight = real(v)?,
            "relevance_noise" => self.relevance_noise = real(v)?,
            "dwell_weight" => self.dwell_weight = real(v)?,
            "quickback_penalty" => self.quickback_penalty = real(v)?,
            "quickback_halflife_hours" => self.quickback_halflife_hours = real(v)?,
            "topic_lift" => self.topic_lift = real(v)?,
            "dwell_log_mean" => self.dwell_log_mean = real(v)?,
            "dwell_log_sd" => self.dwell_log_sd = real(v)?,
            "unsatisfied_logit" => self.unsatisfied_logit = real(v)?,
            "satisfaction_coupling" => self.satisfaction_coupling = real(v)?,
            "unsatisfied_log_shift" => self.unsatisfied_log_shift = real(v)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    fn check(&self) -> Result<(), ConfigError> {
        for (key, n) in [
            ("n_users", self.n_users),
            ("min_impressions", self.min_impressions),
            ("max_impressions", self.max_impressions),
            ("n_ads", self.n_ads),
            ("n_topics", self.n_topics),
            ("topics_per_user", self.topics_per_user),
            ("slate_size", self.slate_size),
        ] {
            if n == 0 {
                return Err(invalid(key, "must be positive"));
            }
        }
        if self.span_days == 0 {
            return Err(invalid("span_days", "must be positive"));
        }
        if self.min_impressions > self.max_impressions {
            return Err(invalid("min_impressions", "exceeds max_impressions"));
        }
        if self.topics_per_user > self.n_topics {
            return Err(invalid("topics_per_user", "exceeds n_topics"));
        }
        if self.slate_size < 3 || self.ads_per_topic() < self.slate_size + 1 {
            return Err(invalid("slate_size", "needs 3 <= slate_size < n_ads / n_topics"));
        }
        for (key, p) in [
            ("slate_swap_rate", self.slate_swap_rate),
            ("topic_stickiness", self.topic_stickiness),
            ("new_topic_rate", self.new_topic_rate),
            ("second_mainline_rate", self.second_mainline_rate),
            ("sidebar_rate", self.sidebar_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(key, "must be a probability"));
            }
        }
        let reals = [
            ("min_gap_seconds", self.min_gap_seconds),
            ("base_bias", self.base_bias),
            ("position_bias_top", self.position_bias_top),
            ("position_bias_mainline", self.position_bias_mainline),
            ("position_bias_sidebar", self.position_bias_sidebar),
            ("relevance_weight", self.relevance_weight),
            ("relevance_noise", self.relevance_noise),
            ("dwell_log_mean", self.dwell_log_mean),
            ("unsatisfied_logit", self.unsatisfied_logit),
            ("satisfaction_coupling", self.satisfaction_coupling),
            ("unsatisfied_log_shift", self.unsatisfied_log_shift),
        ];
        if let Some((key, _)) = reals.iter().find(|(_, v)| !v.is_finite()) {
            return Err(invalid(key, "must be finite"));
        }
        if !(self.dwell_weight >= 0.0 && self.dwell_weight.is_finite()) {
            return Err(invalid("dwell_weight", "must be >= 0"));
        }
        if !(self.quickback_penalty <= 0.0 && self.quickback_penalty.is_finite()) {
            return Err(invalid("quickback_penalty", "must be <= 0"));
        }
        if !(self.quickback_halflife_hours > 0.0 && self.quickback_halflife_hours.is_finite()) {
            return Err(invalid("quickback_halflife_hours", "must be > 0"));
        }
        if !(self.topic_lift >= 0.0 && self.topic_lift.is_finite()) {
            return Err(invalid("topic_lift", "must be >= 0"));
        }
        if !(self.dwell_log_sd > 0.0 && self.dwell_log_sd.is_finite()) {
            return Err(invalid("dwell_log_sd", "must be > 0"));
        }
        if self.relevance_noise < 0.0 || self.min_gap_seconds < 0.0 {
            return Err(invalid("relevance_noise", "noise and gaps must be >= 0"));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_users", self.n_users.to_string()),
            ("min_impressions", self.min_impressions.to_string()),
            ("max_impressions", self.max_impressions.to_string()),
            ("n_ads", self.n_ads.to_string()),
            ("n_topics", self.n_topics.to_string()),
            ("seed", self.seed.to_string()),
            ("topics_per_user", self.topics_per_user.to_string()),
            ("slate_size", self.slate_size.to_string()),
            ("slate_swap_rate", self.slate_swap_rate.to_string()),
            ("topic_stickiness", self.topic_stickiness.to_string()),
            ("new_topic_rate", self.new_topic_rate.to_string()),
            ("second_mainline_rate", self.second_mainline_rate.to_string()),
            ("sidebar_rate", self.sidebar_rate.to_string()),
            ("base_timestamp", self.base_timestamp.to_string()),
            ("span_days", self.span_days.to_string()),
            ("min_gap_seconds", self.min_gap_seconds.to_string()),
            ("base_bias", self.base_bias.to_string()),
            ("position_bias_top", self.position_bias_top.to_string()),
            ("position_bias_mainline", self.position_bias_mainline.to_string()),
            ("position_bias_sidebar", self.position_bias_sidebar.to_string()),
            ("relevance_weight", self.relevance_weight.to_string()),
            ("relevance_noise", self.relevance_noise.to_string()),
            ("dwell_weight", self.dwell_weight.to_string()),
            ("quickback_penalty", self.quickback_penalty.to_string()),
            ("quickback_halflife_hours", self.quickback_halflife_hours.to_string()),
            ("topic_lift", self.topic_lift.to_string()),
            ("dwell_log_mean", self.dwell_log_mean.to_string()),
            ("dwell_log_sd", self.dwell_log_sd.to_string()),
            ("unsatisfied_logit", self.unsatisfied_logit.to_string()),
            ("satisfaction_coupling", self.satisfaction_coupling.to_string()),
            ("unsatisfied_log_shift", self.unsatisfied_log_shift.to_string()),
        ]
    }
}

/// What the generator remembers about one user. Changes only through
/// [`LatentUserState::observe`], in timestamp order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatentUserState {
    /// Dwell at the user's most recent impression of each ad (0 if unclicked).
    pub last_dwell: HashMap<u64, f64>,
    /// Time of the last quick back on each ad, cleared by a satisfied click.
    pub last_quickback: HashMap<u64, u64>,
    /// Session in which each topic was first seen.
    pub topics_seen: HashMap<u32, u64>,
}

impl LatentUserState {
    pub fn observe(&mut self, rec: &ImpressionRecord) {
        self.last_dwell.insert(rec.ad_id, if rec.clicked { rec.dwell_seconds } else { 0.0 });
        if rec.clicked {
            if rec.is_quick_back() {
                self.last_quickback.insert(rec.ad_id, rec.timestamp);
            } else {
                self.last_quickback.remove(&rec.ad_id);
            }
        }
        self.topics_seen.entry(rec.query_topic).or_insert(rec.session_id);
    }
}

/// The exact click probability used when sampling `ctx.clicked`; only the
/// context fields (timestamp, session, position, ad, topic, relevance) are read.
pub fn true_probability(cfg: &GenConfig, state: &LatentUserState, ctx: &ImpressionRecord) -> f64 {
    let mut z = cfg.base_bias + cfg.position_bias(ctx.position.class()) + cfg.relevance_weight * ctx.relevance;
    if let Some(&d) = state.last_dwell.get(&ctx.ad_id) {
        z += cfg.dwell_weight * d.ln_1p();
    }
    if let Some(&t) = state.last_quickback.get(&ctx.ad_id) {
        let hours = ctx.timestamp.saturating_sub(t) as f64 / 3600.0;
        z += cfg.quickback_penalty * (-std::f64::consts::LN_2 * hours / cfg.quickback_halflife_hours).exp();
    }
    if matches!(state.topics_seen.get(&ctx.query_topic), Some(&s) if s != ctx.session_id) {
        z += cfg.topic_lift;
    }
    sigmoid(z)
}

/// Generated records, ordered by user then sequence order, with the true
/// click probability of each.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedLog {
    pub records: Vec<ImpressionRecord>,
    pub true_probs: Vec<f64>,
}

impl GeneratedLog {
    /// Splits at `ts`: records strictly before go to the first half.
    pub fn split_at(&self, ts: u64) -> (GeneratedLog, GeneratedLog) {
        let mut a = GeneratedLog {
            records: Vec::new(),
            true_probs: Vec::new(),
        };
        let mut b = a.clone();
        for (r, &p) in self.records.iter().zip(&self.true_probs) {
            let half = if r.timestamp < ts { &mut a } else { &mut b };
            half.records.push(r.clone());
            half.true_probs.push(p);
        }
        (a, b)
    }

    pub fn ctr(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().filter(|r| r.clicked).count() as f64 / self.records.len() as f64
    }
}

struct Slate {
    ads: Vec<u64>,
    relevance: Vec<f64>,
}

struct UserGen<'a> {
    cfg: &'a GenConfig,
    rng: Rng,
    user_id: u64,
    topics: Vec<u32>,
    slates: HashMap<u32, Slate>,
}

impl UserGen<'_> {
    fn ad_of_topic(&self, topic: u32, k: usize) -> u64 {
        topic as u64 + (k * self.cfg.n_topics) as u64
    }

    fn slate(&mut self, topic: u32) -> &Slate {
        if !self.slates.contains_key(&topic) {
            let per_topic = self.cfg.ads_per_topic();
            let mut picks: Vec<usize> = (0..per_topic).collect();
            self.rng.shuffle(&mut picks);
            let mut rel: Vec<f64> = (0..self.cfg.slate_size).map(|_| self.rng.uniform()).collect();
            rel.sort_by(|a, b| b.total_cmp(a));
            let ads = picks[..self.cfg.slate_size].iter().map(|&k| self.ad_of_topic(topic, k)).collect();
            self.slates.insert(topic, Slate { ads, relevance: rel });
        }
        &self.slates[&topic]
    }

    fn pick_topic(&mut self, last: Option<u32>) -> u32 {
        if let Some(t) = last {
            if self.rng.bernoulli(self.cfg.topic_stickiness) {
                return t;
            }
        }
        if self.rng.bernoulli(self.cfg.new_topic_rate) {
            let t = self.rng.below(self.cfg.n_topics) as u32;
            if !self.topics.contains(&t) {
                self.topics.push(t);
            }
            return t;
        }
        self.topics[self.rng.below(self.topics.len())]
    }

    fn run(mut self, out: &mut GeneratedLog) {
        let cfg = self.cfg;
        let n = self.rng.range_inclusive(cfg.min_impressions as u64, cfg.max_impressions as u64) as usize;
        while self.topics.len() < cfg.topics_per_user {
            let t = self.rng.below(cfg.n_topics) as u32;
            if !self.topics.contains(&t) {
                self.topics.push(t);
            }
        }
        let mean_page = 1.0 + cfg.second_mainline_rate + cfg.sidebar_rate;
        let pages = (n as f64 / mean_page).max(1.0);
        let mean_gap = (cfg.span_seconds() as f64 / (pages + 1.0) - cfg.min_gap_seconds).max(1.0);
        let gap = Exp::new(1.0 / mean_gap).expect("positive rate");
        let noise = Normal::new(0.0, cfg.relevance_noise).expect("finite sd");
        let satisfied = LogNormal::new(cfg.dwell_log_mean, cfg.dwell_log_sd).expect("finite sd");
        let unsatisfied =
            LogNormal::new(cfg.dwell_log_mean - cfg.unsatisfied_log_shift, cfg.dwell_log_sd).expect("finite sd");

        let mut state = LatentUserState::default();
        let mut t = cfg.base_timestamp as f64 + self.rng.uniform() * mean_gap;
        let mut last_topic = None;
        let mut page_no = 0u64;
        let mut produced = 0;
        while produced < n {
            let topic = self.pick_topic(last_topic);
            last_topic = Some(topic);
            let n_main = if self.rng.bernoulli(cfg.second_mainline_rate) { 2 } else { 1 };
            let n_side = usize::from(self.rng.bernoulli(cfg.sidebar_rate));
            let size = (n_main + n_side).min(n - produced);
            let swap_rate = cfg.slate_swap_rate;
            let per_topic = cfg.ads_per_topic();
            let slate_ads = self.slate(topic).ads.clone();
            let slate_rel = self.slate(topic).relevance.clone();
            let session_id = (self.user_id << 24) | page_no;
            let timestamp = t as u64;
            let mut shown: Vec<u64> = Vec::with_capacity(size);
            for k in 0..size {
                let (mut ad, mut base_rel) = (slate_ads[k], slate_rel[k]);
                if self.rng.bernoulli(swap_rate) {
                    loop {
                        let k = self.rng.below(per_topic);
                        let cand = self.ad_of_topic(topic, k);
                        if !slate_ads[..size].contains(&cand) && !shown.contains(&cand) {
                            ad = cand;
                            break;
                        }
                    }
                    base_rel = self.rng.uniform() * slate_rel[size - 1];
                }
                shown.push(ad);
                let position = match k {
                    0 => Position::TopFirst,
                    k if k < n_main => Position::Mainline(k as u32 + 1),
                    k => Position::Sidebar((k - n_main) as u32 + 1),
                };
                let relevance = round6((base_rel + noise.sample(&mut self.rng)).clamp(0.0, 1.0));
                let mut rec = ImpressionRecord {
                    user_id: self.user_id,
                    timestamp,
                    session_id,
                    position,
                    ad_id: ad,
                    query_topic: topic,
                    relevance,
                    clicked: false,
                    dwell_seconds: 0.0,
                };
                let p = true_probability(cfg, &state, &rec);
                rec.clicked = self.rng.uniform() < p;
                if rec.clicked {
                    let unsat_p = sigmoid(cfg.unsatisfied_logit - cfg.satisfaction_coupling * (relevance - 0.5));
                    let dwell = if self.rng.bernoulli(unsat_p) {
                        unsatisfied.sample(&mut self.rng)
                    } else {
                        satisfied.sample(&mut self.rng)
                    };
                    rec.dwell_seconds = round6(dwell.max(1.0));
                }
                out.records.push(rec);
                out.true_probs.push(p);
            }
            // update after the whole page: ads on one page are distinct and
            // share a session, so per-record order does not matter
            for rec in &out.records[out.records.len() - size..] {
                state.observe(rec);
            }
            produced += size;
            page_no += 1;
            t += cfg.min_gap_seconds + gap.sample(&mut self.rng);
        }
    }
}

/// Generates the whole log. Users are independent given per-user derived
/// seeds; output is ordered by user id then sequence order.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedLog, GenError> {
    cfg.check()?;
    let root = Rng::new(cfg.seed).derive(STREAM_USER);
    let mut out = GeneratedLog {
        records: Vec::new(),
        true_probs: Vec::new(),
    };
    for user in 0..cfg.n_users as u64 {
        UserGen {
            cfg,
            rng: root.derive(user),
            user_id: user,
            topics: Vec::new(),
            slates: HashMap::new(),
        }
        .run(&mut out);
    }
    Ok(out)
}

/// Re-derives the true probabilities of an ordered record stream by
/// replaying it through fresh latent states.
pub fn replay_probabilities(cfg: &GenConfig, records: &[ImpressionRecord]) -> Vec<f64> {
    let mut states: HashMap<u64, LatentUserState> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    let mut i = 0;
    while i < records.len() {
        let mut j = i + 1;
        while j < records.len()
            && records[j].user_id == records[i].user_id
            && records[j].session_id == records[i].session_id
        {
            j += 1;
        }
        let state = states.entry(records[i].user_id).or_default();
        out.extend(records[i..j].iter().map(|r| true_probability(cfg, state, r)));
        for r in &records[i..j] {
            state.observe(r);
        }
        i = j;
    }
    out
}

/// Control corpus: within each user, the impression payloads (position, ad,
/// topic, relevance, click, dwell) are permuted across the user's
/// (timestamp, session) slots. Per-impression signals survive; sequential
/// ones do not.
pub fn shuffle_within_users(records: &[ImpressionRecord], seed: u64) -> Vec<ImpressionRecord> {
    let root = Rng::new(seed).derive(STREAM_SHUFFLE);
    let mut by_user: std::collections::BTreeMap<u64, Vec<&ImpressionRecord>> = Default::default();
    for r in records {
        by_user.entry(r.user_id).or_default().push(r);
    }
    let mut out = Vec::with_capacity(records.len());
    for (user, recs) in by_user {
        let mut order: Vec<usize> = (0..recs.len()).collect();
        root.derive(user).shuffle(&mut order);
        for (slot, &src) in recs.iter().zip(&order) {
            let payload = recs[src];
            out.push(ImpressionRecord {
                timestamp: slot.timestamp,
                session_id: slot.session_id,
                ..payload.clone()
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{build_sequences, write_log};

    fn small() -> GenConfig {
        GenConfig {
            n_users: 200,
            ..GenConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = small();
        assert_eq!(GenConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(matches!(GenConfig::from_kv("n_user = 3"), Err(ConfigError::UnknownKey { key }) if key == "n_user"));
        assert!(matches!(GenConfig::from_kv("n_users = 0"), Err(ConfigError::Invalid { key, .. }) if key == "n_users"));
        assert!(GenConfig::from_kv("quickback_penalty = 1").is_err());
        assert!(GenConfig::from_kv("min_impressions = 50\nmax_impressions = 10").is_err());
    }

    #[test]
    fn records_are_valid_and_ordered() {
        let log = generate(&small()).unwrap();
        assert_eq!(log.records.len(), log.true_probs.len());
        for r in &log.records {
            r.validate().unwrap();
        }
        assert!(log.true_probs.iter().all(|&p| p > 0.0 && p < 1.0));
        let flat: Vec<ImpressionRecord> = build_sequences(log.records.clone())
            .into_iter()
            .flat_map(|s| s.impressions)
            .collect();
        assert_eq!(flat, log.records);
        let mut per_user: HashMap<u64, usize> = HashMap::new();
        for r in &log.records {
            *per_user.entry(r.user_id).or_default() += 1;
        }
        assert_eq!(per_user.len(), 200);
        assert!(per_user.values().all(|&n| (20..=200).contains(&n)));
    }

    #[test]
    fn same_seed_same_bytes() {
        let bytes = |cfg: &GenConfig| {
            let mut b = Vec::new();
            write_log(&generate(cfg).unwrap().records, &mut b).unwrap();
            b
        };
        let cfg = GenConfig { n_users: 50, ..small() };
        assert_eq!(bytes(&cfg), bytes(&cfg));
        assert_ne!(bytes(&cfg), bytes(&GenConfig { seed: 2, ..cfg.clone() }));
    }

    #[test]
    fn zero_weights_give_constant_probability() {
        let cfg = GenConfig {
            position_bias_top: 0.0,
            position_bias_sidebar: 0.0,
            relevance_weight: 0.0,
            ..small().without_sequential_effects()
        };
        let log = generate(&cfg).unwrap();
        let want = sigmoid(cfg.base_bias);
        assert!(log.true_probs.iter().all(|&p| p == want));
    }

    #[test]
    fn replay_reproduces_probabilities() {
        let cfg = small();
        let log = generate(&cfg).unwrap();
        let replayed = replay_probabilities(&cfg, &log.records);
        assert_eq!(replayed, log.true_probs);
    }

    #[test]
    fn no_planted_effect_means_no_quickback_gap() {
        // satisfaction must not depend on relevance here, otherwise quick-backed
        // ads are the less relevant ones and their next CTR is lower anyway
        let cfg = GenConfig {
            n_users: 1500,
            satisfaction_coupling: 0.0,
            ..GenConfig::default().without_sequential_effects()
        };
        let log = generate(&cfg).unwrap();
        let (qb, sat) = ctr_after_click(&log.records);
        let se = (qb.1 * (1.0 - qb.1) / qb.0 as f64 + sat.1 * (1.0 - sat.1) / sat.0 as f64).sqrt();
        assert!(qb.0 > 1000 && sat.0 > 1000);
        assert!((qb.1 - sat.1).abs() < 2.0 * se, "{qb:?} {sat:?}");
    }

    /// (count, CTR) of the next same-ad impression after a quick-back click
    /// and after a satisfied click.
    pub(crate) fn ctr_after_click(records: &[ImpressionRecord]) -> ((usize, f64), (usize, f64)) {
        let mut last: HashMap<(u64, u64), Option<bool>> = HashMap::new();
        let mut n = [0usize; 2];
        let mut c = [0usize; 2];
        for r in records {
            let key = (r.user_id, r.ad_id);
            if let Some(Some(quick)) = last.get(&key) {
                let k = usize::from(!*quick);
                n[k] += 1;
                c[k] += usize::from(r.clicked);
            }
            last.insert(key, r.clicked.then(|| r.is_quick_back()));
        }
        ((n[0], c[0] as f64 / n[0] as f64), (n[1], c[1] as f64 / n[1] as f64))
    }

    #[test]
    fn split_and_shuffle() {
        let cfg = small();
        let log = generate(&cfg).unwrap();
        let (train, test) = log.split_at(cfg.split_timestamp());
        assert_eq!(train.records.len() + test.records.len(), log.records.len());
        assert!(train.records.iter().all(|r| r.timestamp < cfg.split_timestamp()));
        assert!(test.records.iter().all(|r| r.timestamp >= cfg.split_timestamp()));
        assert!(!train.records.is_empty() && !test.records.is_empty());

        let shuffled = shuffle_within_users(&log.records, 3);
        assert_eq!(shuffled.len(), log.records.len());
        let key = |r: &ImpressionRecord| (r.user_id, r.ad_id, r.clicked, r.relevance.to_bits());
        let mut a: Vec<_> = log.records.iter().map(key).collect();
        let mut b: Vec<_> = shuffled.iter().map(key).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_ne!(shuffled, log.records);
        assert_eq!(shuffled, shuffle_within_users(&log.records, 3));
    }
}
