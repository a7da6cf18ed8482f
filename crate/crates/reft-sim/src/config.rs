//! Run configuration: a sectioned key-value file plus `section.key=value`
//! command-line overrides.
//!
//! Every knob has a default, so an empty file is a valid configuration.
//! `dump` renders the effective configuration in canonical form — parsing
//! the dump reproduces the configuration exactly, which is what makes the
//! config digest meaningful.

use crate::error::{Error, Result};
use crate::has::{HasParams, PlannerMode};
use crate::protection::ProtectionConfig;
use crate::topology::ClusterSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSection {
    pub dp_size: u32,
    pub pp_size: u32,
    pub tp_size: u32,
    pub gpus_per_node: u32,
    pub d2h_bandwidth: f64,
    pub internode_bandwidth: f64,
    pub nfs_bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Snapshot volume per pipeline stage; one entry applies to every
    /// stage, otherwise give exactly `pp_size` entries.
    pub stage_bytes: Vec<u64>,
    /// Total optimizer state per stage (sharded over the group when the
    /// stage-1 optimizer layout is on).
    pub optimizer_bytes: u64,
    /// Per-stage microbatch compute time; one entry = uniform stages.
    pub microbatch_compute_time: Vec<f64>,
    pub num_microbatches: u32,
    pub fwd_fraction: f64,
    pub zero1: bool,
    /// Learning rate used when replaying optimizer updates.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HasSection {
    pub mode: PlannerMode,
    pub chunk_bytes: u64,
    pub comm_fraction: f64,
    pub separate_interconnect: bool,
    pub alpha_compute: f64,
    pub alpha_network: f64,
    pub bubble_budget_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionSection {
    pub arc: bool,
    pub aec: bool,
    pub aor: bool,
    /// Gradient steps retained for optimizer replay.
    pub grad_history: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreSection {
    /// Host-buffer budget as a multiple of one full snapshot set.
    pub capacity_factor: f64,
    pub nfs_every_rounds: u32,
    pub nfs_write_s: f64,
    pub nfs_path: Option<String>,
    pub tmpfs_dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureSection {
    /// Weibull scale of hardware losses, per node per day.
    pub lambda_hw: f64,
    /// Weibull scale of software interruptions, per node per day.
    pub lambda_sw: f64,
    pub weibull_c: f64,
    /// Optional failure script CSV; when set, sampling is skipped.
    pub script: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSection {
    pub iterations: u32,
    pub snapshot_interval: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub cluster: ClusterSection,
    pub model: ModelSection,
    pub has: HasSection,
    pub protection: ProtectionSection,
    pub store: StoreSection,
    pub failure: FailureSection,
    pub run: RunSection,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cluster: ClusterSection {
                dp_size: 2,
                pp_size: 4,
                tp_size: 1,
                gpus_per_node: 1,
                d2h_bandwidth: 1.6e10,
                internode_bandwidth: 1e10,
                nfs_bandwidth: 7e7,
            },
            model: ModelSection {
                stage_bytes: vec![650_000_000],
                optimizer_bytes: 1_300_000_000,
                microbatch_compute_time: vec![0.5],
                num_microbatches: 8,
                fwd_fraction: 1.0 / 3.0,
                zero1: true,
                learning_rate: 0.05,
            },
            has: HasSection {
                mode: PlannerMode::Profiled,
                chunk_bytes: crate::has::DEFAULT_CHUNK_BYTES,
                comm_fraction: crate::has::DEFAULT_COMM_FRACTION,
                separate_interconnect: false,
                alpha_compute: 0.0,
                alpha_network: 0.0,
                bubble_budget_s: None,
            },
            protection: ProtectionSection { arc: true, aec: false, aor: true, grad_history: 2 },
            store: StoreSection {
                capacity_factor: 3.0,
                nfs_every_rounds: 0,
                nfs_write_s: 0.0,
                nfs_path: None,
                tmpfs_dir: None,
            },
            failure: FailureSection {
                lambda_hw: 1.1e-4,
                lambda_sw: 1.1e-4,
                weibull_c: 1.3,
                script: None,
            },
            run: RunSection { iterations: 20, snapshot_interval: 1 },
        }
    }
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{section}.{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_f64(section: &str, key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .map_err(|_| Error::Config(format!("{section}.{key}: expected a number, got {v:?}")))
        .and_then(|x| {
            if x.is_finite() {
                Ok(x)
            } else {
                Err(Error::Config(format!("{section}.{key}: {v:?} is not finite")))
            }
        })
}

fn parse_u32(section: &str, key: &str, v: &str) -> Result<u32> {
    v.parse::<u32>()
        .map_err(|_| Error::Config(format!("{section}.{key}: expected a whole number, got {v:?}")))
}

/// Byte counts accept either integer literals or exact scientific notation
/// (`6.5e8`).
fn parse_u64(section: &str, key: &str, v: &str) -> Result<u64> {
    if let Ok(n) = v.parse::<u64>() {
        return Ok(n);
    }
    let x = parse_f64(section, key, v)?;
    if x < 0.0 || x.fract() != 0.0 || x > 9.007199254740992e15 {
        return Err(Error::Config(format!(
            "{section}.{key}: {v:?} is not an exact nonnegative byte count"
        )));
    }
    Ok(x as u64)
}

fn parse_f64_list(section: &str, key: &str, v: &str) -> Result<Vec<f64>> {
    let out: Result<Vec<f64>> = v
        .split(',')
        .map(|p| parse_f64(section, key, p.trim()))
        .collect();
    let out = out?;
    if out.is_empty() {
        return Err(Error::Config(format!("{section}.{key}: empty list")));
    }
    Ok(out)
}

fn parse_u64_list(section: &str, key: &str, v: &str) -> Result<Vec<u64>> {
    let out: Result<Vec<u64>> = v
        .split(',')
        .map(|p| parse_u64(section, key, p.trim()))
        .collect();
    let out = out?;
    if out.is_empty() {
        return Err(Error::Config(format!("{section}.{key}: empty list")));
    }
    Ok(out)
}

impl SimConfig {
    /// Parse a config file's text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = SimConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: unterminated section header {raw:?}", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one `section.key=value` override.
    pub fn apply_set(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not section.key=value")))?;
        self.set(section.trim(), key.trim(), value.trim())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let s = section;
        let k = key;
        match (section, key) {
            ("cluster", "dp_size") => self.cluster.dp_size = parse_u32(s, k, value)?,
            ("cluster", "pp_size") => self.cluster.pp_size = parse_u32(s, k, value)?,
            ("cluster", "tp_size") => self.cluster.tp_size = parse_u32(s, k, value)?,
            ("cluster", "gpus_per_node") => self.cluster.gpus_per_node = parse_u32(s, k, value)?,
            ("cluster", "d2h_bandwidth") => self.cluster.d2h_bandwidth = parse_f64(s, k, value)?,
            ("cluster", "internode_bandwidth") => {
                self.cluster.internode_bandwidth = parse_f64(s, k, value)?
            }
            ("cluster", "nfs_bandwidth") => self.cluster.nfs_bandwidth = parse_f64(s, k, value)?,

            ("model", "stage_bytes") => self.model.stage_bytes = parse_u64_list(s, k, value)?,
            ("model", "optimizer_bytes") => self.model.optimizer_bytes = parse_u64(s, k, value)?,
            ("model", "microbatch_compute_time") => {
                self.model.microbatch_compute_time = parse_f64_list(s, k, value)?
            }
            ("model", "num_microbatches") => {
                self.model.num_microbatches = parse_u32(s, k, value)?
            }
            ("model", "fwd_fraction") => self.model.fwd_fraction = parse_f64(s, k, value)?,
            ("model", "zero1") => self.model.zero1 = parse_bool(s, k, value)?,
            ("model", "learning_rate") => self.model.learning_rate = parse_f64(s, k, value)?,

            ("has", "mode") => {
                self.has.mode = match value {
                    "profiled" => PlannerMode::Profiled,
                    "closed_form" => PlannerMode::ClosedForm,
                    _ => {
                        return Err(Error::Config(format!(
                            "has.mode: expected profiled or closed_form, got {value:?}"
                        )))
                    }
                }
            }
            ("has", "chunk_bytes") => self.has.chunk_bytes = parse_u64(s, k, value)?,
            ("has", "comm_fraction") => self.has.comm_fraction = parse_f64(s, k, value)?,
            ("has", "separate_interconnect") => {
                self.has.separate_interconnect = parse_bool(s, k, value)?
            }
            ("has", "alpha_compute") => self.has.alpha_compute = parse_f64(s, k, value)?,
            ("has", "alpha_network") => self.has.alpha_network = parse_f64(s, k, value)?,
            ("has", "bubble_budget_s") => {
                self.has.bubble_budget_s =
                    if value.is_empty() { None } else { Some(parse_f64(s, k, value)?) }
            }

            ("protection", "arc") => self.protection.arc = parse_bool(s, k, value)?,
            ("protection", "aec") => self.protection.aec = parse_bool(s, k, value)?,
            ("protection", "aor") => self.protection.aor = parse_bool(s, k, value)?,
            ("protection", "grad_history") => {
                self.protection.grad_history = parse_u32(s, k, value)?
            }

            ("store", "capacity_factor") => self.store.capacity_factor = parse_f64(s, k, value)?,
            ("store", "nfs_every_rounds") => {
                self.store.nfs_every_rounds = parse_u32(s, k, value)?
            }
            ("store", "nfs_write_s") => self.store.nfs_write_s = parse_f64(s, k, value)?,
            ("store", "nfs_path") => {
                self.store.nfs_path = (!value.is_empty()).then(|| value.to_string())
            }
            ("store", "tmpfs_dir") => {
                self.store.tmpfs_dir = (!value.is_empty()).then(|| value.to_string())
            }

            ("failure", "lambda_hw") => self.failure.lambda_hw = parse_f64(s, k, value)?,
            ("failure", "lambda_sw") => self.failure.lambda_sw = parse_f64(s, k, value)?,
            ("failure", "weibull_c") => self.failure.weibull_c = parse_f64(s, k, value)?,
            ("failure", "script") => {
                self.failure.script = (!value.is_empty()).then(|| value.to_string())
            }

            ("run", "iterations") => self.run.iterations = parse_u32(s, k, value)?,
            ("run", "snapshot_interval") => {
                self.run.snapshot_interval = parse_u32(s, k, value)?
            }

            ("", _) => {
                return Err(Error::Config(format!(
                    "key {key:?} appears before any [section] header"
                )))
            }
            _ => {
                return Err(Error::Config(format!("unknown key {section}.{key}")));
            }
        }
        Ok(())
    }

    /// Canonical rendering of the effective configuration. Parsing the
    /// dump reproduces this configuration exactly.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let join_f64 =
            |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let join_u64 =
            |v: &[u64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");

        out.push_str("[cluster]\n");
        out.push_str(&format!("dp_size = {}\n", self.cluster.dp_size));
        out.push_str(&format!("pp_size = {}\n", self.cluster.pp_size));
        out.push_str(&format!("tp_size = {}\n", self.cluster.tp_size));
        out.push_str(&format!("gpus_per_node = {}\n", self.cluster.gpus_per_node));
        out.push_str(&format!("d2h_bandwidth = {}\n", self.cluster.d2h_bandwidth));
        out.push_str(&format!("internode_bandwidth = {}\n", self.cluster.internode_bandwidth));
        out.push_str(&format!("nfs_bandwidth = {}\n", self.cluster.nfs_bandwidth));

        out.push_str("\n[model]\n");
        out.push_str(&format!("stage_bytes = {}\n", join_u64(&self.model.stage_bytes)));
        out.push_str(&format!("optimizer_bytes = {}\n", self.model.optimizer_bytes));
        out.push_str(&format!(
            "microbatch_compute_time = {}\n",
            join_f64(&self.model.microbatch_compute_time)
        ));
        out.push_str(&format!("num_microbatches = {}\n", self.model.num_microbatches));
        out.push_str(&format!("fwd_fraction = {}\n", self.model.fwd_fraction));
        out.push_str(&format!("zero1 = {}\n", self.model.zero1));
        out.push_str(&format!("learning_rate = {}\n", self.model.learning_rate));

        out.push_str("\n[has]\n");
        out.push_str(&format!(
            "mode = {}\n",
            match self.has.mode {
                PlannerMode::Profiled => "profiled",
                PlannerMode::ClosedForm => "closed_form",
            }
        ));
        out.push_str(&format!("chunk_bytes = {}\n", self.has.chunk_bytes));
        out.push_str(&format!("comm_fraction = {}\n", self.has.comm_fraction));
        out.push_str(&format!("separate_interconnect = {}\n", self.has.separate_interconnect));
        out.push_str(&format!("alpha_compute = {}\n", self.has.alpha_compute));
        out.push_str(&format!("alpha_network = {}\n", self.has.alpha_network));
        if let Some(b) = self.has.bubble_budget_s {
            out.push_str(&format!("bubble_budget_s = {b}\n"));
        }

        out.push_str("\n[protection]\n");
        out.push_str(&format!("arc = {}\n", self.protection.arc));
        out.push_str(&format!("aec = {}\n", self.protection.aec));
        out.push_str(&format!("aor = {}\n", self.protection.aor));
        out.push_str(&format!("grad_history = {}\n", self.protection.grad_history));

        out.push_str("\n[store]\n");
        out.push_str(&format!("capacity_factor = {}\n", self.store.capacity_factor));
        out.push_str(&format!("nfs_every_rounds = {}\n", self.store.nfs_every_rounds));
        out.push_str(&format!("nfs_write_s = {}\n", self.store.nfs_write_s));
        if let Some(p) = &self.store.nfs_path {
            out.push_str(&format!("nfs_path = {p}\n"));
        }
        if let Some(p) = &self.store.tmpfs_dir {
            out.push_str(&format!("tmpfs_dir = {p}\n"));
        }

        out.push_str("\n[failure]\n");
        out.push_str(&format!("lambda_hw = {}\n", self.failure.lambda_hw));
        out.push_str(&format!("lambda_sw = {}\n", self.failure.lambda_sw));
        out.push_str(&format!("weibull_c = {}\n", self.failure.weibull_c));
        if let Some(p) = &self.failure.script {
            out.push_str(&format!("script = {p}\n"));
        }

        out.push_str("\n[run]\n");
        out.push_str(&format!("iterations = {}\n", self.run.iterations));
        out.push_str(&format!("snapshot_interval = {}\n", self.run.snapshot_interval));
        out
    }

    /// FNV-1a fingerprint of the canonical dump.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.dump().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x1_0000_0000_01b3);
        }
        h
    }

    /// Per-stage snapshot volume expanded to `pp_size` entries.
    pub fn stage_bytes_vec(&self) -> Result<Vec<u64>> {
        let pp = self.cluster.pp_size as usize;
        match self.model.stage_bytes.len() {
            1 => Ok(vec![self.model.stage_bytes[0]; pp]),
            n if n == pp => Ok(self.model.stage_bytes.clone()),
            n => Err(Error::Config(format!(
                "model.stage_bytes has {n} entries; expected 1 or pp_size ({pp})"
            ))),
        }
    }

    /// Per-stage compute time expanded to `pp_size` entries.
    pub fn compute_time_vec(&self) -> Result<Vec<f64>> {
        let pp = self.cluster.pp_size as usize;
        match self.model.microbatch_compute_time.len() {
            1 => Ok(vec![self.model.microbatch_compute_time[0]; pp]),
            n if n == pp => Ok(self.model.microbatch_compute_time.clone()),
            n => Err(Error::Config(format!(
                "model.microbatch_compute_time has {n} entries; expected 1 or pp_size ({pp})"
            ))),
        }
    }

    pub fn to_cluster_spec(&self) -> Result<ClusterSpec> {
        let spec = ClusterSpec {
            dp_size: self.cluster.dp_size,
            pp_size: self.cluster.pp_size,
            tp_size: self.cluster.tp_size,
            gpus_per_node: self.cluster.gpus_per_node,
            d2h_bandwidth: self.cluster.d2h_bandwidth,
            internode_bandwidth: self.cluster.internode_bandwidth,
            nfs_bandwidth: self.cluster.nfs_bandwidth,
            microbatch_compute_time: self.compute_time_vec()?,
            num_microbatches: self.model.num_microbatches,
            zero1_enabled: self.model.zero1,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_has_params(&self) -> HasParams {
        HasParams {
            mode: self.has.mode,
            chunk_bytes: self.has.chunk_bytes,
            comm_fraction: self.has.comm_fraction,
            separate_interconnect: self.has.separate_interconnect,
            alpha_compute: self.has.alpha_compute,
            alpha_network: self.has.alpha_network,
            bubble_budget_s: self.has.bubble_budget_s,
        }
    }

    pub fn to_protection(&self) -> ProtectionConfig {
        ProtectionConfig {
            arc: self.protection.arc,
            aec: self.protection.aec,
            aor: self.protection.aor,
        }
    }
}
