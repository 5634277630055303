//! Expert rollouts and the on-disk dataset format.
//!
//! Timing convention: the record at step `t` holds `(t, s_t, a_t, r_t, c_t)`
//! where `c_t` is the context value that drove the transition *into* `s_t`
//! (`s_t = f(s_{t-1}, a_{t-1}, c_t, eps)`), the demonstrator acts on the same
//! record's context (`a_t = pi(s_t, c_t) + zeta`), and `r_t = g(s_t, a_t, c_t)`.
//!
//! Episodes are keyed by index with seeds derived from (master seed, index),
//! so generation order never affects content.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::envsim::context::{ContextKind, ContextProcess};
use crate::envsim::spec::{EnvKind, EnvSpec, ExpertParams, RewardVariant};
use crate::error::{CoreError, Result};
use crate::numerics::{write_atomic, Rng, Tensor};

/// One time step of a recorded trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    /// Ground-truth context; synthetic rollouts always record it, but a
    /// dataset as a whole may omit it (all records or none).
    pub c_true: Option<Vec<f64>>,
    pub done: bool,
}

/// A collection of episodes together with the environment that produced them
/// and the master generation seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: EnvSpec,
    pub seed: u64,
    pub episodes: Vec<Vec<StepRecord>>,
}

impl Dataset {
    /// Whether ground-truth contexts are recorded (checked uniform by
    /// [`Dataset::validate`]).
    pub fn contexts_recorded(&self) -> bool {
        self.episodes
            .first()
            .and_then(|ep| ep.first())
            .map(|rec| rec.c_true.is_some())
            .unwrap_or(false)
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(|ep| ep.len()).sum()
    }

    /// Checks dimensional conformance, step indexing, termination flags, and
    /// uniform presence of ground-truth contexts.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let with_c = self.contexts_recorded();
        for (idx, ep) in self.episodes.iter().enumerate() {
            if ep.is_empty() {
                return Err(CoreError::contract(format!("episode {idx} is empty")));
            }
            for (t, rec) in ep.iter().enumerate() {
                if rec.t != t {
                    return Err(CoreError::contract(format!(
                        "episode {idx}: record {t} carries step index {}",
                        rec.t
                    )));
                }
                if rec.s.len() != self.spec.d_s || rec.a.len() != self.spec.d_a {
                    return Err(CoreError::shape(format!(
                        "episode {idx} step {t}: state/action dims do not match the env"
                    )));
                }
                match (&rec.c_true, with_c) {
                    (Some(c), true) => {
                        if c.len() != self.spec.d_c() {
                            return Err(CoreError::shape(format!(
                                "episode {idx} step {t}: context dim {} != {}",
                                c.len(),
                                self.spec.d_c()
                            )));
                        }
                    }
                    (None, false) => {}
                    _ => {
                        return Err(CoreError::contract(
                            "ground-truth context must be recorded in every record or none",
                        ));
                    }
                }
                if rec.done != (t == ep.len() - 1) {
                    return Err(CoreError::contract(format!(
                        "episode {idx}: done flag set at step {t} of {}",
                        ep.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Writes the dataset as an `ADLD-DATA v1` text file (atomically).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("ADLD-DATA v1\n");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        write_spec(&self.spec, &mut kv);
        kv("c_recorded", flag(self.contexts_recorded()).to_string());
        for (idx, ep) in self.episodes.iter().enumerate() {
            let _ = writeln!(out, "episode {idx} len {}", ep.len());
            for rec in ep {
                let mut line = rec.t.to_string();
                for v in &rec.s {
                    let _ = write!(line, "\t{v}");
                }
                for v in &rec.a {
                    let _ = write!(line, "\t{v}");
                }
                let _ = write!(line, "\t{}", rec.r);
                if let Some(c) = &rec.c_true {
                    for v in c {
                        let _ = write!(line, "\t{v}");
                    }
                }
                let _ = write!(line, "\t{}", flag(rec.done));
                out.push_str(&line);
                out.push('\n');
            }
        }
        write_atomic(path, out.as_bytes())
    }

    /// Reads a file written by [`Dataset::save`]; round-trip is bit-exact.
    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::format(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        match lines.next() {
            Some("ADLD-DATA v1") => {}
            Some(other) => {
                return Err(CoreError::format(format!(
                    "expected header `ADLD-DATA v1`, found {other:?}"
                )))
            }
            None => return Err(CoreError::format("empty dataset file")),
        }

        // Spec block: key=value lines until the first `episode` line.
        let mut fields = BTreeMap::new();
        let mut pending: Option<&str> = None;
        for line in lines.by_ref() {
            if line.starts_with("episode ") {
                pending = Some(line);
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::format(format!("malformed spec line {line:?}")))?;
            if fields.insert(k.to_string(), v.to_string()).is_some() {
                return Err(CoreError::format(format!("duplicate spec key {k:?}")));
            }
        }
        let seed: u64 = take(&mut fields, "seed")?
            .parse()
            .map_err(|_| CoreError::format("seed is not an integer"))?;
        let spec = read_spec(&mut fields)?;
        let with_c = parse_flag(&take(&mut fields, "c_recorded")?)?;
        if let Some(k) = fields.keys().next() {
            return Err(CoreError::format(format!("unknown spec key {k:?}")));
        }

        let mut episodes = Vec::new();
        loop {
            let header = match pending.take() {
                Some(line) => line,
                None => match lines.next() {
                    Some(line) => line,
                    None => break,
                },
            };
            let parts: Vec<&str> = header.split(' ').collect();
            let (idx, len) = match parts.as_slice() {
                ["episode", idx, "len", len] => {
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| CoreError::format("bad episode index"))?;
                    let len: usize = len
                        .parse()
                        .map_err(|_| CoreError::format("bad episode length"))?;
                    (idx, len)
                }
                _ => {
                    return Err(CoreError::format(format!(
                        "malformed episode header {header:?}"
                    )))
                }
            };
            if idx != episodes.len() {
                return Err(CoreError::format(format!(
                    "episode {idx} out of order (expected {})",
                    episodes.len()
                )));
            }
            let mut ep = Vec::with_capacity(len);
            for _ in 0..len {
                let line = lines
                    .next()
                    .ok_or_else(|| CoreError::format("truncated file: episode cut short"))?;
                ep.push(parse_record(line, &spec, with_c)?);
            }
            episodes.push(ep);
        }

        let d = Dataset {
            spec,
            seed,
            episodes,
        };
        d.validate()?;
        Ok(d)
    }
}

/// Rolls out `n_episodes` expert episodes. Deterministic in the master seed;
/// each episode draws from its own derived stream, keyed by episode index.
pub fn generate_dataset(spec: &EnvSpec, n_episodes: usize, rng: &Rng) -> Result<Dataset> {
    spec.validate()?;
    if n_episodes == 0 {
        return Err(CoreError::contract("need at least one episode"));
    }
    let episodes = (0..n_episodes)
        .map(|idx| rollout_episode(spec, idx, &mut rng.derive(idx as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        seed: rng.seed_value(),
        episodes,
    })
}

/// As [`generate_dataset`] with a fresh stream seeded from `seed`.
pub fn generate_dataset_seeded(spec: &EnvSpec, n_episodes: usize, seed: u64) -> Result<Dataset> {
    generate_dataset(spec, n_episodes, &Rng::seed(seed))
}

fn rollout_episode(spec: &EnvSpec, episode: usize, rng: &mut Rng) -> Result<Vec<StepRecord>> {
    let mut records = Vec::with_capacity(spec.horizon);
    let mut c_prev = vec![0.0; spec.d_c()];
    let mut s = spec.reset_state();
    let mut a_prev = vec![0.0; spec.d_a];
    for t in 0..spec.horizon {
        let c = spec.context.next(t, episode, Some(&c_prev), rng)?;
        if t > 0 {
            s = spec.transition(&s, &a_prev, &c, rng)?;
        }
        let a = spec.expert_action(&s, &c, rng)?;
        let mut r = spec.reward_of(&s, &a, &c, t)?;
        if spec.sigma_r > 0.0 {
            r += spec.sigma_r * rng.normal();
        }
        records.push(StepRecord {
            t,
            s: s.clone(),
            a: a.clone(),
            r,
            c_true: Some(c.clone()),
            done: t == spec.horizon - 1,
        });
        a_prev = a;
        c_prev = c;
    }
    Ok(records)
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn parse_flag(s: &str) -> Result<bool> {
    match s {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(CoreError::format(format!("flag must be 0 or 1, got {other:?}"))),
    }
}

fn write_spec(spec: &EnvSpec, kv: &mut dyn FnMut(&str, String)) {
    kv("kind", spec.kind.as_str().to_string());
    kv("d_s", spec.d_s.to_string());
    kv("d_a", spec.d_a.to_string());
    kv("dt", spec.dt.to_string());
    kv("drag", spec.drag.to_string());
    kv("mass", spec.mass.to_string());
    kv("a_mat", fmt_mat(&spec.a_mat));
    kv("a0_mat", fmt_mat(&spec.a0_mat));
    kv("a1_mat", fmt_mat(&spec.a1_mat));
    kv("b_mat", fmt_mat(&spec.b_mat));
    kv("bc_mat", fmt_mat(&spec.bc_mat));
    kv("sigma_s", spec.sigma_s.to_string());
    kv("sigma_r", spec.sigma_r.to_string());
    kv("context_kind", spec.context.kind.as_str().to_string());
    kv("context_offset", spec.context.offset.to_string());
    kv("context_amplitude", spec.context.amplitude.to_string());
    kv("context_frequency", spec.context.frequency.to_string());
    kv("context_rho", spec.context.rho_c.to_string());
    kv("context_sigma", spec.context.sigma_c.to_string());
    kv("context_dim", spec.context.dim.to_string());
    kv("horizon", spec.horizon.to_string());
    kv("reward", spec.reward.as_str().to_string());
    kv("v_star", spec.v_star.to_string());
    kv("v_star_channel", fmt_channel(spec.v_star_channel));
    kv("wind_channel", fmt_channel(spec.wind_channel));
    kv("expert_k_p", spec.expert.k_p.to_string());
    kv("expert_gain", fmt_mat(&spec.expert.gain));
    kv("expert_gain_ctx", fmt_mat(&spec.expert.gain_ctx));
    kv("expert_noise", spec.expert.noise.to_string());
}

fn read_spec(fields: &mut BTreeMap<String, String>) -> Result<EnvSpec> {
    let spec = EnvSpec {
        kind: EnvKind::parse(&take(fields, "kind")?)?,
        d_s: take_usize(fields, "d_s")?,
        d_a: take_usize(fields, "d_a")?,
        dt: take_f64(fields, "dt")?,
        drag: take_f64(fields, "drag")?,
        mass: take_f64(fields, "mass")?,
        a_mat: parse_mat(&take(fields, "a_mat")?)?,
        a0_mat: parse_mat(&take(fields, "a0_mat")?)?,
        a1_mat: parse_mat(&take(fields, "a1_mat")?)?,
        b_mat: parse_mat(&take(fields, "b_mat")?)?,
        bc_mat: parse_mat(&take(fields, "bc_mat")?)?,
        sigma_s: take_f64(fields, "sigma_s")?,
        sigma_r: take_f64(fields, "sigma_r")?,
        context: ContextProcess {
            kind: ContextKind::parse(&take(fields, "context_kind")?)?,
            offset: take_f64(fields, "context_offset")?,
            amplitude: take_f64(fields, "context_amplitude")?,
            frequency: take_f64(fields, "context_frequency")?,
            rho_c: take_f64(fields, "context_rho")?,
            sigma_c: take_f64(fields, "context_sigma")?,
            dim: take_usize(fields, "context_dim")?,
        },
        horizon: take_usize(fields, "horizon")?,
        reward: RewardVariant::parse(&take(fields, "reward")?)?,
        v_star: take_f64(fields, "v_star")?,
        v_star_channel: parse_channel(&take(fields, "v_star_channel")?)?,
        wind_channel: parse_channel(&take(fields, "wind_channel")?)?,
        expert: ExpertParams {
            k_p: take_f64(fields, "expert_k_p")?,
            gain: parse_mat(&take(fields, "expert_gain")?)?,
            gain_ctx: parse_mat(&take(fields, "expert_gain_ctx")?)?,
            noise: take_f64(fields, "expert_noise")?,
        },
    };
    Ok(spec)
}

fn take(fields: &mut BTreeMap<String, String>, key: &str) -> Result<String> {
    fields
        .remove(key)
        .ok_or_else(|| CoreError::format(format!("missing spec key {key:?}")))
}

fn take_f64(fields: &mut BTreeMap<String, String>, key: &str) -> Result<f64> {
    parse_f64(&take(fields, key)?)
}

fn take_usize(fields: &mut BTreeMap<String, String>, key: &str) -> Result<usize> {
    take(fields, key)?
        .parse()
        .map_err(|_| CoreError::format(format!("{key} is not an integer")))
}

fn parse_f64(s: &str) -> Result<f64> {
    let v: f64 = s
        .parse()
        .map_err(|_| CoreError::format(format!("bad float {s:?}")))?;
    if !v.is_finite() {
        return Err(CoreError::format(format!("non-finite float {s:?}")));
    }
    Ok(v)
}

fn fmt_mat(t: &Tensor) -> String {
    let mut out = format!("{} {}", t.dims()[0], t.dims()[1]);
    for v in t.data() {
        let _ = write!(out, " {v}");
    }
    out
}

fn parse_mat(s: &str) -> Result<Tensor> {
    let mut parts = s.split(' ');
    let rows: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| CoreError::format("matrix missing row count"))?;
    let cols: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| CoreError::format("matrix missing column count"))?;
    let data = parts.map(parse_f64).collect::<Result<Vec<_>>>()?;
    if data.len() != rows * cols {
        return Err(CoreError::format(format!(
            "matrix {rows}x{cols} needs {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    Tensor::matrix(rows, cols, data)
}

fn fmt_channel(ch: Option<usize>) -> String {
    match ch {
        Some(i) => i.to_string(),
        None => "none".to_string(),
    }
}

fn parse_channel(s: &str) -> Result<Option<usize>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| CoreError::format(format!("bad channel {s:?}")))
}

fn parse_record(line: &str, spec: &EnvSpec, with_c: bool) -> Result<StepRecord> {
    let mut parts = line.split('\t');
    let t: usize = parts
        .next()
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| CoreError::format(format!("bad step index in {line:?}")))?;
    let mut grab = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| {
                parts
                    .next()
                    .ok_or_else(|| CoreError::format("truncated record line"))
                    .and_then(parse_f64)
            })
            .collect()
    };
    let s = grab(spec.d_s)?;
    let a = grab(spec.d_a)?;
    let r = grab(1)?[0];
    let c_true = if with_c {
        Some(grab(spec.d_c())?)
    } else {
        None
    };
    let done = parse_flag(
        parts
            .next()
            .ok_or_else(|| CoreError::format("record line missing done flag"))?,
    )?;
    if parts.next().is_some() {
        return Err(CoreError::format(format!(
            "record line has trailing fields: {line:?}"
        )));
    }
    Ok(StepRecord {
        t,
        s,
        a,
        r,
        c_true,
        done,
    })
}
