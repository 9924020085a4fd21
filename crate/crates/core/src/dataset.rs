//! Batch datasets: collection under the uniform behavior policy with
//! rejection sampling on episode outcome, prefixes, and a checksummed text
//! format.
//!
//! Episodes are stored contiguously. Successful episodes always come first,
//! so `episode_id < n_successful` identifies them and every prefix keeps
//! them.
//!
//! File layout: `key=value` manifest lines, a blank line, then one row per
//! transition, `episode_id,step,terminal,action,cost,s[0..d),s'[0..d)`.
//! Reals use Rust's shortest round-trip formatting, so save/load is exact.
//! `checksum` is the FNV-1a 64 hash of the bytes after the blank line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{simulate, Env, UniformRandom};
use crate::error::{Error, Result};
use crate::rng::{child_rng, PRNG_NAME};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MAX_DRAWS: u64 = 10_000_000;
pub const UNIFORM_POLICY: &str = "uniform_random";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub env: String,
    pub physics_hash: String,
    pub policy: String,
    pub seed: u64,
    pub n_trajectories: usize,
    pub n_successful: usize,
    /// Episode length cap used during collection.
    pub horizon: usize,
    pub prng: String,
    /// Episodes simulated to fill the dataset (including rejected ones).
    pub draws: u64,
}

impl Manifest {
    /// Manifest for hand-built datasets.
    pub fn synthetic(env: &str, horizon: usize) -> Self {
        Manifest {
            env: env.to_string(),
            physics_hash: String::new(),
            policy: "synthetic".into(),
            seed: 0,
            n_trajectories: 0,
            n_successful: 0,
            horizon,
            prng: PRNG_NAME.into(),
            draws: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    /// Index of the first transition.
    pub start: usize,
    pub len: usize,
    pub success: bool,
}

/// A borrowed view of one transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub cost: f64,
    pub next_state: &'a [f64],
    pub step: usize,
    pub terminal: bool,
    pub episode_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    manifest: Manifest,
    dim: usize,
    states: Vec<f64>,
    next_states: Vec<f64>,
    actions: Vec<usize>,
    costs: Vec<f64>,
    steps: Vec<usize>,
    terminals: Vec<bool>,
    episode_ids: Vec<usize>,
    episodes: Vec<Episode>,
}

/// Incremental construction, one episode at a time.
#[derive(Clone, Debug)]
pub struct DatasetBuilder {
    data: Dataset,
    open_start: usize,
}

impl DatasetBuilder {
    pub fn new(dim: usize, manifest: Manifest) -> Self {
        DatasetBuilder {
            data: Dataset {
                manifest,
                dim,
                states: Vec::new(),
                next_states: Vec::new(),
                actions: Vec::new(),
                costs: Vec::new(),
                steps: Vec::new(),
                terminals: Vec::new(),
                episode_ids: Vec::new(),
                episodes: Vec::new(),
            },
            open_start: 0,
        }
    }

    pub fn push(&mut self, state: &[f64], action: usize, cost: f64, next_state: &[f64], step: usize, terminal: bool) -> Result<()> {
        let d = &mut self.data;
        if state.len() != d.dim || next_state.len() != d.dim {
            return Err(Error::shape(format!("transition states must have {} coordinates", d.dim)));
        }
        if !(0.0..=1.0).contains(&cost) {
            return Err(Error::data(format!("cost {cost} is not in [0, 1]")));
        }
        if state.iter().chain(next_state).any(|x| !x.is_finite()) {
            return Err(Error::data("non-finite state coordinate"));
        }
        d.states.extend_from_slice(state);
        d.next_states.extend_from_slice(next_state);
        d.actions.push(action);
        d.costs.push(cost);
        d.steps.push(step);
        d.terminals.push(terminal);
        d.episode_ids.push(d.episodes.len());
        Ok(())
    }

    /// Closes the current episode.
    pub fn end_episode(&mut self, success: bool) {
        let d = &mut self.data;
        let start = self.open_start;
        d.episodes.push(Episode { start, len: d.actions.len() - start, success });
        self.open_start = d.actions.len();
    }

    /// Finishes the dataset; the manifest counts are recomputed. Fails if
    /// successful episodes are not all in front.
    pub fn finish(mut self) -> Result<Dataset> {
        if self.open_start != self.data.actions.len() {
            self.end_episode(false);
        }
        let d = &mut self.data;
        d.manifest.n_trajectories = d.episodes.len();
        d.manifest.n_successful = d.episodes.iter().filter(|e| e.success).count();
        if d.episodes.iter().skip(d.manifest.n_successful).any(|e| e.success) {
            return Err(Error::data("successful episodes must precede the others"));
        }
        Ok(self.data)
    }
}

impl Dataset {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn n_trajectories(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_successful(&self) -> usize {
        self.manifest.n_successful
    }

    pub fn get(&self, i: usize) -> Transition<'_> {
        let d = self.dim;
        Transition {
            state: &self.states[i * d..(i + 1) * d],
            action: self.actions[i],
            cost: self.costs[i],
            next_state: &self.next_states[i * d..(i + 1) * d],
            step: self.steps[i],
            terminal: self.terminals[i],
            episode_id: self.episode_ids[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition<'_>> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    /// Row-major states, `len() x dim()`.
    pub fn states(&self) -> &[f64] {
        &self.states
    }

    pub fn next_states(&self) -> &[f64] {
        &self.next_states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    /// The first `n` episodes.
    pub fn take_prefix(&self, n: usize) -> Result<Dataset> {
        if n > self.n_trajectories() {
            return Err(Error::data(format!("asked for {n} trajectories, dataset has {}", self.n_trajectories())));
        }
        let end = self.episodes.get(n).map_or(self.len(), |e| e.start);
        let d = self.dim;
        let episodes = self.episodes[..n].to_vec();
        let mut manifest = self.manifest.clone();
        manifest.n_trajectories = n;
        manifest.n_successful = episodes.iter().filter(|e| e.success).count();
        Ok(Dataset {
            manifest,
            dim: d,
            states: self.states[..end * d].to_vec(),
            next_states: self.next_states[..end * d].to_vec(),
            actions: self.actions[..end].to_vec(),
            costs: self.costs[..end].to_vec(),
            steps: self.steps[..end].to_vec(),
            terminals: self.terminals[..end].to_vec(),
            episode_ids: self.episode_ids[..end].to_vec(),
            episodes,
        })
    }

    /// Transition indices grouped by step index.
    pub fn indices_by_step(&self) -> Vec<Vec<usize>> {
        let max = self.steps.iter().copied().max().map_or(0, |m| m + 1);
        let mut out = vec![Vec::new(); max];
        for (i, &h) in self.steps.iter().enumerate() {
            out[h].push(i);
        }
        out
    }

    fn body(&self) -> String {
        let d = self.dim;
        let mut out = String::with_capacity(self.len() * (24 + 40 * d));
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{},{},{},{},{}",
                self.episode_ids[i],
                self.steps[i],
                u8::from(self.terminals[i]),
                self.actions[i],
                self.costs[i]
            );
            for x in self.states[i * d..(i + 1) * d].iter().chain(&self.next_states[i * d..(i + 1) * d]) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    /// The full file contents.
    pub fn to_text(&self) -> String {
        let body = self.body();
        let m = &self.manifest;
        let mut head = String::new();
        let columns = {
            let mut c = String::from("episode_id,step,terminal,action,cost");
            (0..self.dim).for_each(|j| write!(c, ",s{j}").unwrap());
            (0..self.dim).for_each(|j| write!(c, ",next_s{j}").unwrap());
            c
        };
        for (k, v) in [
            ("format_version", FORMAT_VERSION.to_string()),
            ("env", m.env.clone()),
            ("physics_hash", m.physics_hash.clone()),
            ("policy", m.policy.clone()),
            ("seed", m.seed.to_string()),
            ("n_trajectories", m.n_trajectories.to_string()),
            ("n_successful", m.n_successful.to_string()),
            ("horizon", m.horizon.to_string()),
            ("prng", m.prng.clone()),
            ("draws", m.draws.to_string()),
            ("dim", self.dim.to_string()),
            ("n_transitions", self.len().to_string()),
            ("columns", columns),
            ("checksum", format!("{:016x}", fnv1a64(body.as_bytes()))),
        ] {
            let _ = writeln!(head, "{k}={v}");
        }
        head.push('\n');
        head + &body
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format { path: path.to_path_buf(), msg },
            other => other,
        })
    }

    /// Loads a dataset and refuses it unless it was collected in `env`.
    pub fn load_for_env(path: impl AsRef<Path>, env: &str) -> Result<Dataset> {
        let data = Self::load(path)?;
        if data.manifest.env != env {
            return Err(Error::config(format!("dataset was collected in {:?}, config expects {env:?}", data.manifest.env)));
        }
        Ok(data)
    }

    pub fn from_text(text: &str) -> Result<Dataset> {
        let bad = |msg: String| Error::Format { path: Default::default(), msg };
        let (head, body) = text.split_once("\n\n").ok_or_else(|| bad("missing blank line after the manifest".into()))?;
        let mut kv = BTreeMap::new();
        for line in head.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("manifest line without '=': {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not an integer"))) };

        let version = num("format_version")?;
        if version != FORMAT_VERSION as u64 {
            return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
        }
        let expected = get("checksum")?;
        let actual = format!("{:016x}", fnv1a64(body.as_bytes()));
        if expected != actual {
            return Err(bad(format!("checksum mismatch (manifest {expected}, body {actual})")));
        }
        let manifest = Manifest {
            env: get("env")?.to_string(),
            physics_hash: get("physics_hash")?.to_string(),
            policy: get("policy")?.to_string(),
            seed: num("seed")?,
            n_trajectories: num("n_trajectories")? as usize,
            n_successful: num("n_successful")? as usize,
            horizon: num("horizon")? as usize,
            prng: get("prng")?.to_string(),
            draws: num("draws")?,
        };
        let dim = num("dim")? as usize;
        let n = num("n_transitions")? as usize;

        let mut b = DatasetBuilder::new(dim, manifest.clone());
        let mut success = Vec::new();
        let mut state = vec![0.0; dim];
        let mut next = vec![0.0; dim];
        let mut rows = 0;
        let mut current: Option<usize> = None;
        for (lineno, line) in body.lines().enumerate() {
            let row_err = |what: &str| bad(format!("row {}: {what}", lineno + 1));
            let mut fields = line.split(',');
            let mut int = |name: &str| -> Result<usize> {
                fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| row_err(name))
            };
            let (ep, step, term, action) = (int("episode_id")?, int("step")?, int("terminal")?, int("action")?);
            let mut real = || -> Result<f64> { fields.next().and_then(|f| f.parse().ok()).ok_or_else(|| row_err("real field")) };
            let cost = real()?;
            for x in state.iter_mut().chain(next.iter_mut()) {
                *x = real()?;
            }
            if fields.next().is_some() {
                return Err(row_err("too many fields"));
            }
            if term > 1 {
                return Err(row_err("terminal must be 0 or 1"));
            }
            match current {
                Some(c) if c == ep => {}
                Some(c) if ep == c + 1 => {
                    success.push(c < manifest.n_successful);
                    b.end_episode(c < manifest.n_successful);
                }
                None if ep == 0 => {}
                _ => return Err(row_err("episode ids must be contiguous from 0")),
            }
            current = Some(ep);
            b.push(&state, action, cost, &next, step, term == 1).map_err(|e| row_err(&e.to_string()))?;
            rows += 1;
        }
        if let Some(c) = current {
            b.end_episode(c < manifest.n_successful);
        }
        if rows != n {
            return Err(bad(format!("manifest says {n} transitions, body has {rows}")));
        }
        let mut data = b.finish()?;
        // episodes without transitions are not representable in rows
        if data.n_trajectories() != manifest.n_trajectories || data.n_successful() != manifest.n_successful {
            return Err(bad("episode counts disagree with the manifest".into()));
        }
        data.manifest = manifest;
        Ok(data)
    }
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSpec {
    pub n_trajectories: usize,
    /// Exact number of successful episodes to keep; 0 keeps whatever i.i.d. draws give.
    pub required_successes: usize,
    pub seed: u64,
    /// Episode length cap; `None` uses the environment's.
    pub horizon: Option<usize>,
    pub max_draws: u64,
}

impl CollectSpec {
    pub fn new(n_trajectories: usize, required_successes: usize, seed: u64) -> Self {
        CollectSpec { n_trajectories, required_successes, seed, horizon: None, max_draws: DEFAULT_MAX_DRAWS }
    }
}

/// Collects episodes of the uniform-random policy.
///
/// Episode `i` is simulated from stream `i` of the seed. With
/// `required_successes = r > 0`, draws continue until the first `r`
/// successful and the first `n - r` unsuccessful episodes (in draw order)
/// are found; other draws are discarded. With `r = 0` the first `n` draws
/// are kept. Successful episodes are then moved to the front, preserving
/// draw order within each group.
pub fn collect(env: &Env, spec: &CollectSpec) -> Result<Dataset> {
    let (n, r) = (spec.n_trajectories, spec.required_successes);
    if r > n {
        return Err(Error::config(format!("{r} required successes exceed {n} trajectories")));
    }
    let horizon = spec.horizon.unwrap_or_else(|| env.max_steps());
    if horizon == 0 {
        return Err(Error::config("collection horizon must be positive"));
    }

    type Row = ([f64; 2], usize, f64, [f64; 2], usize, bool);
    let mut wins: Vec<Vec<Row>> = Vec::new();
    let mut losses: Vec<Vec<Row>> = Vec::new();
    let mut buf: Vec<Row> = Vec::with_capacity(horizon);
    let mut draws = 0u64;
    while wins.len() + losses.len() < n {
        if draws >= spec.max_draws {
            return Err(Error::Collection { draws, successes: wins.len(), failures: losses.len() });
        }
        let mut rng = child_rng(spec.seed, draws);
        draws += 1;
        buf.clear();
        let (_, success, _) = simulate(env, &UniformRandom, &mut rng, horizon, |s, a, out, h| {
            buf.push((s.x, a, out.cost, out.next.x, h, out.terminal));
        })?;
        if r == 0 {
            if success { &mut wins } else { &mut losses }.push(buf.clone());
        } else if success && wins.len() < r {
            wins.push(buf.clone());
        } else if !success && losses.len() < n - r {
            losses.push(buf.clone());
        }
    }

    let manifest = Manifest {
        env: env.name().into(),
        physics_hash: env.physics_hash(),
        policy: UNIFORM_POLICY.into(),
        seed: spec.seed,
        n_trajectories: n,
        n_successful: wins.len(),
        horizon,
        prng: PRNG_NAME.into(),
        draws,
    };
    let mut b = DatasetBuilder::new(2, manifest);
    for (group, success) in [(&wins, true), (&losses, false)] {
        for ep in group.iter() {
            for (s, a, c, s2, h, t) in ep {
                b.push(s, *a, *c, s2, *h, *t)?;
            }
            b.end_episode(success);
        }
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;

    fn small_pendulum(n: usize, seed: u64) -> Dataset {
        collect(&Env::new(EnvKind::Pendulum), &CollectSpec::new(n, 0, seed)).unwrap()
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn iid_collection() {
        let d = small_pendulum(50, 1);
        assert_eq!(d.n_trajectories(), 50);
        assert_eq!(d.manifest().draws, 50);
        assert_eq!(d.n_successful(), 0);
        let total: usize = d.episodes().iter().map(|e| e.len).sum();
        assert_eq!(total, d.len());
        assert!(d.costs().iter().all(|c| (0.0..=1.0).contains(c)));
        assert_eq!(d, small_pendulum(50, 1));
        assert_ne!(d, small_pendulum(50, 2));
    }

    #[test]
    fn mountain_car_single_success_in_front() {
        let env = Env::new(EnvKind::MountainCar);
        let d = collect(&env, &CollectSpec::new(1000, 1, 3)).unwrap();
        assert_eq!(d.n_trajectories(), 1000);
        assert_eq!(d.n_successful(), 1);
        assert!(d.episodes()[0].success);
        assert!(d.episodes()[1..].iter().all(|e| !e.success));
        // recount from the transitions: a successful episode ends absorbed with zero cost
        let recount = d
            .episodes()
            .iter()
            .filter(|e| {
                let last = d.get(e.start + e.len - 1);
                last.cost == 0.0 && last.terminal
            })
            .count();
        assert_eq!(recount, 1);
        assert!(d.manifest().draws > 1000);
        assert!(d.episodes().iter().all(|e| e.len == 800));
    }

    #[test]
    fn all_required_on_always_succeeding_env() {
        let mut env = Env::new(EnvKind::Pendulum);
        env.set_param("max_steps", "5").unwrap();
        env.set_param("noise", "0").unwrap();
        env.set_param("force", "0").unwrap();
        env.set_param("start_spread", "0").unwrap();
        let d = collect(&env, &CollectSpec::new(7, 7, 0)).unwrap();
        assert_eq!(d.n_successful(), 7);
        assert_eq!(d.manifest().draws, 7);
    }

    #[test]
    fn collection_budget() {
        let env = Env::new(EnvKind::Pendulum);
        let spec = CollectSpec { max_draws: 100, ..CollectSpec::new(10, 2, 0) };
        match collect(&env, &spec) {
            Err(Error::Collection { draws, successes, failures }) => {
                assert_eq!((draws, successes, failures), (100, 0, 8));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(collect(&env, &CollectSpec::new(3, 4, 0)).is_err());
    }

    #[test]
    fn prefixes() {
        let d = small_pendulum(40, 5);
        assert_eq!(d.take_prefix(40).unwrap(), d);
        let p = d.take_prefix(10).unwrap();
        assert_eq!(p.n_trajectories(), 10);
        assert_eq!(p.len(), d.episodes()[..10].iter().map(|e| e.len).sum::<usize>());
        assert_eq!(p.get(p.len() - 1), d.get(p.len() - 1));
        assert!(d.take_prefix(41).is_err());
        assert_eq!(d.take_prefix(0).unwrap().len(), 0);

        let env = Env::new(EnvKind::MountainCar);
        let mc = collect(&env, &CollectSpec { horizon: Some(800), ..CollectSpec::new(20, 1, 3) }).unwrap();
        let only = mc.take_prefix(mc.n_successful()).unwrap();
        assert!(only.episodes().iter().all(|e| e.success));
    }

    #[test]
    fn uniform_action_marginal() {
        let d = collect(&Env::new(EnvKind::MountainCar), &CollectSpec { horizon: Some(800), ..CollectSpec::new(150, 0, 9) }).unwrap();
        let n = d.len() as f64;
        assert!(n >= 1e5);
        for a in 0..3 {
            let k = d.actions().iter().filter(|&&x| x == a).count() as f64;
            let sd = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
            assert!((k - n / 3.0).abs() <= 3.0 * sd, "action {a}: {k} of {n}");
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let d = small_pendulum(30, 8);
        let text = d.to_text();
        let back = Dataset::from_text(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), text);
        for (a, b) in d.states().iter().zip(back.states()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corruption_is_detected() {
        let d = small_pendulum(10, 8);
        let text = d.to_text();
        let body_start = text.find("\n\n").unwrap() + 2;
        let mut bytes = text.clone().into_bytes();
        let i = body_start + 7;
        bytes[i] = if bytes[i] == b'1' { b'2' } else { b'1' };
        let corrupt = String::from_utf8(bytes).unwrap();
        assert!(matches!(Dataset::from_text(&corrupt), Err(Error::Format { .. })));
        let wrong_version = text.replacen("format_version=1", "format_version=2", 1);
        assert!(matches!(Dataset::from_text(&wrong_version), Err(Error::Format { .. })));
        assert!(Dataset::from_text("garbage").is_err());
    }

    #[test]
    fn save_load_and_env_guard() {
        let dir = std::env::temp_dir().join(format!("fqilab-ds-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.csv");
        let d = small_pendulum(12, 4);
        d.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), d);
        assert_eq!(Dataset::load_for_env(&path, "pendulum").unwrap(), d);
        assert!(matches!(Dataset::load_for_env(&path, "mountain_car"), Err(Error::Config(_))));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn builder_validation() {
        let mut b = DatasetBuilder::new(1, Manifest::synthetic("toy", 1));
        assert!(b.push(&[0.0], 0, 1.5, &[1.0], 0, true).is_err());
        assert!(b.push(&[0.0, 1.0], 0, 0.5, &[1.0], 0, true).is_err());
        b.push(&[0.0], 0, 0.5, &[1.0], 0, true).unwrap();
        b.end_episode(false);
        b.push(&[1.0], 1, 0.0, &[0.0], 0, true).unwrap();
        b.end_episode(true);
        assert!(b.finish().is_err());
    }
}
