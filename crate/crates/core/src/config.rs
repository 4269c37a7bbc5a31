//! Plain-text `key = value` configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key may be
//! overridden by an environment variable named `ACR_` followed by the key in
//! upper case with `.` and `:` replaced by `_`, e.g. `ACR_LEARNING_RATE` or
//! `ACR_UPSTREAM_SIGNAL_CYCLE_LENGTH`.
//!
//! Corridor keys:
//!
//! | key | value |
//! |-----|-------|
//! | `seed`, `duration`, `matching_rate` | numbers |
//! | `upstream_lanes`, `downstream_lanes`, `unmonitored` | comma-separated lane ids |
//! | `link_length`, `free_flow_speed` | meters, meters per second |
//! | `upstream_signal.cycle_length`, `upstream_signal.cycle_origin` | seconds |
//! | `upstream_signal.phases` | `TH:0-50,LT:55-80` |
//! | `downstream_signal.*` | as for the upstream signal |
//! | `demand.<lane>` | `<phase>:<vph>,...` |
//! | `lane_choice.<lane>` | probabilities over downstream lanes |
//! | `phase_lane_choice.<phase>.<lane>` | probabilities over downstream lanes |
//! | `downstream_phase.<lane>` | phase label |
//! | `merge_choice`, `midblock_merge_rate`, `merge_travel_fraction` | |
//! | `travel_time.median`, `travel_time.dispersion` | seconds, log-scale spread |
//! | `recognition_upstream`, `recognition_downstream`, `saturation_headway` | |
//!
//! Experiment keys: `train_duration`, `test_duration`, `lanes`, the
//! hyperparameters `hidden` (e.g. `32,32`), `learning_rate`, `lr_decay`,
//! `epochs`, `batch_size`, `mc_train`, `prior_std`, `kl_scale`, `patience`,
//! `validation_fraction`, `sigma_floor`, `init_range`, `init_rho`,
//! `optimizer` (`adam` or `sgd`), `trace_draws`, the sample options `augment_k`,
//! `max_hop_span`, `open_interval`, and the reconstruction options `step`,
//! `samples`, `taper_scale`.
//!
//! A group of map keys such as `demand.*` replaces the whole default group.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::bacl::Optimizer;
use crate::curve::{LaneId, PhaseWindow, SignalTiming};
use crate::error::{invalid_config, Error, Result};
use crate::experiment::ExperimentConfig;
use crate::simulator::{PhaseRate, UpstreamDemand};

pub const ENV_PREFIX: &str = "ACR_";

const SCALAR_KEYS: &[&str] = &[
    "seed",
    "duration",
    "matching_rate",
    "upstream_lanes",
    "downstream_lanes",
    "unmonitored",
    "link_length",
    "free_flow_speed",
    "upstream_signal.cycle_length",
    "upstream_signal.cycle_origin",
    "upstream_signal.phases",
    "downstream_signal.cycle_length",
    "downstream_signal.cycle_origin",
    "downstream_signal.phases",
    "merge_choice",
    "midblock_merge_rate",
    "merge_travel_fraction",
    "travel_time.median",
    "travel_time.dispersion",
    "recognition_upstream",
    "recognition_downstream",
    "saturation_headway",
    "train_duration",
    "test_duration",
    "lanes",
    "hidden",
    "learning_rate",
    "lr_decay",
    "epochs",
    "batch_size",
    "mc_train",
    "prior_std",
    "kl_scale",
    "patience",
    "validation_fraction",
    "sigma_floor",
    "init_range",
    "init_rho",
    "optimizer",
    "trace_draws",
    "augment_k",
    "max_hop_span",
    "open_interval",
    "step",
    "samples",
    "taper_scale",
];

/// Ordered key/value pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
            }
            if entries.insert(k.to_owned(), v.trim().to_owned()).is_some() {
                return Err(Error::Parse { line: i + 1, msg: format!("duplicate key {k}") });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.insert(key.into(), value.into());
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Environment variable name that overrides `key`.
    pub fn env_name(key: &str) -> String {
        let body: String = key
            .chars()
            .map(|c| if c == '.' || c == ':' { '_' } else { c.to_ascii_uppercase() })
            .collect();
        format!("{ENV_PREFIX}{body}")
    }

    /// Applies `ACR_*` overrides to known scalar keys and to keys already
    /// present. Returns the overridden keys.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Vec<String> {
        let mut names: BTreeMap<String, String> =
            SCALAR_KEYS.iter().map(|k| (Self::env_name(k), (*k).to_owned())).collect();
        names.extend(self.entries.keys().map(|k| (Self::env_name(k), k.clone())));
        let mut applied = Vec::new();
        for (name, value) in vars {
            if let Some(key) = names.get(&name) {
                self.entries.insert(key.clone(), value);
                applied.push(key.clone());
            }
        }
        applied.sort();
        applied
    }

    /// Applies every key to `base`. Unknown keys are an error.
    pub fn experiment_config(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut r = Reader { rest: self.entries.clone() };
        let mut cfg = base;
        let sim = &mut cfg.corridor;
        r.num("seed", &mut sim.seed)?;
        r.num("duration", &mut sim.duration)?;
        r.num("matching_rate", &mut sim.target_matching_rate)?;
        if let Some(v) = r.take("upstream_lanes") {
            sim.layout.upstream_lanes = lanes(&v);
        }
        if let Some(v) = r.take("downstream_lanes") {
            sim.layout.downstream_lanes = lanes(&v);
        }
        if let Some(v) = r.take("unmonitored") {
            sim.layout.unmonitored = lanes(&v);
        }
        r.num("link_length", &mut sim.layout.link_length)?;
        r.num("free_flow_speed", &mut sim.layout.free_flow_speed)?;
        r.signal("upstream_signal", &mut sim.upstream_signal)?;
        r.signal("downstream_signal", &mut sim.downstream_signal)?;
        if let Some(v) = r.take("merge_choice") {
            sim.merge_choice = floats(&v)?;
        }
        r.num("midblock_merge_rate", &mut sim.midblock_merge_rate)?;
        r.num("merge_travel_fraction", &mut sim.merge_travel_fraction)?;
        r.num("travel_time.median", &mut sim.travel_time.median)?;
        r.num("travel_time.dispersion", &mut sim.travel_time.dispersion)?;
        r.num("recognition_upstream", &mut sim.recognition_upstream)?;
        r.num("recognition_downstream", &mut sim.recognition_downstream)?;
        r.num("saturation_headway", &mut sim.saturation_headway)?;

        let demand = r.group("demand.");
        if !demand.is_empty() {
            sim.demand = demand
                .into_iter()
                .map(|(lane, v)| Ok(UpstreamDemand { lane: lane.into(), rates: phase_rates(&v)? }))
                .collect::<Result<_>>()?;
        }
        let choice = r.group("lane_choice.");
        if !choice.is_empty() {
            sim.lane_choice = choice.into_iter().map(|(l, v)| Ok((LaneId::from(l), floats(&v)?))).collect::<Result<_>>()?;
        }
        let phased = r.group("phase_lane_choice.");
        if !phased.is_empty() {
            sim.phase_lane_choice.clear();
            for (k, v) in phased {
                let Some((phase, lane)) = k.split_once('.') else {
                    return Err(invalid_config(format!("phase_lane_choice.{k} must name a phase and a lane")));
                };
                sim.phase_lane_choice.entry(phase.to_owned()).or_default().insert(lane.into(), floats(&v)?);
            }
        }
        let phases = r.group("downstream_phase.");
        if !phases.is_empty() {
            sim.downstream_phase = phases.into_iter().map(|(l, v)| (LaneId::from(l), v)).collect();
        }

        r.num("train_duration", &mut cfg.train_duration)?;
        r.num("test_duration", &mut cfg.test_duration)?;
        if let Some(v) = r.take("lanes") {
            cfg.lanes = lanes(&v);
        }
        let h = &mut cfg.hyper;
        if let Some(v) = r.take("hidden") {
            h.hidden = if v.is_empty() {
                Vec::new()
            } else {
                v.split(',').map(|s| parse::<usize>("hidden", s)).collect::<Result<_>>()?
            };
        }
        r.num("learning_rate", &mut h.learning_rate)?;
        r.num("lr_decay", &mut h.lr_decay)?;
        r.num("epochs", &mut h.epochs)?;
        r.num("batch_size", &mut h.batch_size)?;
        r.num("mc_train", &mut h.mc_train)?;
        r.num("prior_std", &mut h.prior_std)?;
        r.num("kl_scale", &mut h.kl_scale)?;
        r.num("patience", &mut h.patience)?;
        r.num("validation_fraction", &mut h.validation_fraction)?;
        r.num("sigma_floor", &mut h.sigma_floor)?;
        r.num("init_range", &mut h.init_range)?;
        r.num("init_rho", &mut h.init_rho)?;
        r.num("trace_draws", &mut h.trace_draws)?;
        if let Some(v) = r.take("optimizer") {
            h.optimizer = match v.to_ascii_lowercase().as_str() {
                "adam" => Optimizer::Adam,
                "sgd" => Optimizer::Sgd,
                _ => return Err(invalid_config(format!("optimizer must be adam or sgd, got {v}"))),
            };
        }
        r.num("augment_k", &mut cfg.samples.augment_k)?;
        r.num("max_hop_span", &mut cfg.samples.max_hop_span)?;
        r.num("open_interval", &mut cfg.samples.open_interval)?;
        r.num("step", &mut cfg.recon.step)?;
        r.num("samples", &mut cfg.recon.samples)?;
        r.num("taper_scale", &mut cfg.recon.taper_scale)?;

        if !r.rest.is_empty() {
            let keys: Vec<&str> = r.rest.keys().map(String::as_str).collect();
            return Err(invalid_config(format!("unknown keys: {}", keys.join(", "))));
        }
        cfg.corridor.validate()?;
        cfg.hyper.validate()?;
        cfg.recon.validate()?;
        Ok(cfg)
    }
}

struct Reader {
    rest: BTreeMap<String, String>,
}

impl Reader {
    fn take(&mut self, key: &str) -> Option<String> {
        self.rest.remove(key)
    }

    fn num<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key) {
            *slot = parse(key, &v)?;
        }
        Ok(())
    }

    /// Removes every key under `prefix`, returning the suffixes.
    fn group(&mut self, prefix: &str) -> BTreeMap<String, String> {
        let keys: Vec<String> = self.rest.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        keys.into_iter()
            .map(|k| {
                let v = self.rest.remove(&k).unwrap_or_default();
                (k[prefix.len()..].to_owned(), v)
            })
            .collect()
    }

    fn signal(&mut self, prefix: &str, slot: &mut SignalTiming) -> Result<()> {
        self.num(&format!("{prefix}.cycle_length"), &mut slot.cycle_length)?;
        self.num(&format!("{prefix}.cycle_origin"), &mut slot.cycle_origin)?;
        if let Some(v) = self.take(&format!("{prefix}.phases")) {
            slot.phases = phase_windows(&v)?;
        }
        Ok(())
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| invalid_config(format!("cannot parse {key} = {v:?}")))
}

fn lanes(v: &str) -> Vec<LaneId> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(LaneId::from).collect()
}

fn floats(v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|s| parse::<f64>("list", s)).collect()
}

/// `TH:0-50,LT:55-80`
fn phase_windows(v: &str) -> Result<Vec<PhaseWindow>> {
    v.split(',')
        .map(|item| {
            let bad = || invalid_config(format!("phase window {item:?} must look like LABEL:START-END"));
            let (label, range) = item.trim().split_once(':').ok_or_else(bad)?;
            let (a, b) = range.split_once('-').ok_or_else(bad)?;
            Ok(PhaseWindow { label: label.trim().to_owned(), start: parse("phase start", a)?, end: parse("phase end", b)? })
        })
        .collect()
}

/// `LT:720` or `TH:400,RT:100`
fn phase_rates(v: &str) -> Result<Vec<PhaseRate>> {
    v.split(',')
        .map(|item| {
            let (phase, vph) = item
                .trim()
                .split_once(':')
                .ok_or_else(|| invalid_config(format!("demand {item:?} must look like PHASE:VPH")))?;
            Ok(PhaseRate { phase: phase.trim().to_owned(), vph: parse("vph", vph)? })
        })
        .collect()
}
