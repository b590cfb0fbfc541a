//! Synthetic packet streams with known ground-truth law parameters.
//!
//! Sources are born, stay active for a contiguous run of windows and then
//! disappear. The run lengths are chosen so that, in the stationary regime,
//! a source active in window `w` is active again in window `w + t` with
//! probability exactly `β/(β+t^α)`, whichever reference window is picked.
//! Each source carries a Zipf–Mandelbrot distributed intensity: the number
//! of packets it emits in every window it is active.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::ingest::{Addr, PacketRecord};
use crate::laws;
use crate::stats::{CAUCHY_ALPHA_MAX, CAUCHY_BETA_MAX, ZM_DELTA_RANGE, ZM_LAMBDA_RANGE};

/// First destination identifier of observer A's destination pool.
pub const DEST_BASE: Addr = 1 << 40;
/// First destination identifier used by observer B's sensor.
pub const OBSERVER_B_DEST_BASE: Addr = 1 << 41;
const OBSERVER_B_SENSORS: u64 = 256;
const OBSERVER_B_STREAM: u64 = 0x0b5e_7e7b;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GenError {
    #[error("invalid Zipf-Mandelbrot parameters: {0}")]
    ZipfMandelbrot(String),
    #[error("invalid modified Cauchy parameters: {0}")]
    Cauchy(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error(
        "infeasible scenario: {n_sources} sources emit about {expected:.0} packets per window, \
         below n_valid = {n_valid}; need at least {required} sources"
    )]
    PopulationTooSmall {
        n_sources: u64,
        n_valid: u64,
        expected: f64,
        required: u64,
    },
    #[error("window {window} has {active} active sources, more than n_valid = {n_valid}")]
    WindowOverfull { window: u64, active: u64, n_valid: u64 },
    #[error("two-observer generation needs observer_b_rule = model_visibility")]
    NoObserverB,
}

/// Truncated Zipf–Mandelbrot law on `1..=d_max`, sampled by inverse CDF.
#[derive(Debug, Clone)]
pub struct ZipfMandelbrotTable {
    cdf: Vec<f64>,
    mean: f64,
}

impl ZipfMandelbrotTable {
    pub fn new(delta: f64, lambda: f64, d_max: u64) -> Result<Self, GenError> {
        if !(delta > -1.0) || !delta.is_finite() {
            return Err(GenError::ZipfMandelbrot(format!("delta = {delta} must exceed -1")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(GenError::ZipfMandelbrot(format!("lambda = {lambda} must be positive")));
        }
        if d_max < 1 {
            return Err(GenError::ZipfMandelbrot("d_max must be at least 1".into()));
        }
        let weights: Vec<f64> = (1..=d_max).map(|d| laws::zipf_mandelbrot(d as f64, delta, lambda)).collect();
        let norm: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut mean = 0.0;
        let mut cdf = Vec::with_capacity(weights.len());
        for (i, w) in weights.iter().enumerate() {
            acc += w / norm;
            mean += (i + 1) as f64 * w / norm;
            cdf.push(acc);
        }
        *cdf.last_mut().unwrap() = 1.0;
        Ok(Self { cdf, mean })
    }

    pub fn d_max(&self) -> u64 {
        self.cdf.len() as u64
    }

    /// Normalised probability of degree `d`.
    pub fn mass(&self, d: u64) -> f64 {
        match d {
            0 => 0.0,
            1 => self.cdf[0],
            d if d <= self.d_max() => self.cdf[d as usize - 1] - self.cdf[d as usize - 2],
            _ => 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let i = self.cdf.partition_point(|&c| c <= u);
        (i as u64 + 1).min(self.d_max())
    }
}

/// Draws one degree from the truncated law. Builds the mass table on every
/// call; use [`ZipfMandelbrotTable`] for repeated sampling.
pub fn sample_zipf_mandelbrot<R: Rng + ?Sized>(delta: f64, lambda: f64, d_max: u64, rng: &mut R) -> Result<u64, GenError> {
    Ok(ZipfMandelbrotTable::new(delta, lambda, d_max)?.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZipfMandelbrotParams {
    pub delta: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CauchyParams {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverBRule {
    #[default]
    None,
    ModelVisibility,
}

/// Destination pool with Zipf–Mandelbrot popularity over its ranks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DestinationPool {
    pub size: u64,
    pub delta: f64,
    pub lambda: f64,
}

impl Default for DestinationPool {
    fn default() -> Self {
        Self {
            size: 1 << 16,
            delta: 1.0,
            lambda: 1.5,
        }
    }
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    /// Expected number of active sources in a window.
    pub n_sources: u64,
    /// Per-source intensity law.
    pub zm: ZipfMandelbrotParams,
    /// Largest per-source intensity.
    pub d_max: u64,
    /// Revisit law.
    pub cauchy: CauchyParams,
    pub n_windows: u64,
    pub n_valid: u64,
    pub seed: u64,
    #[serde(default)]
    pub observer_b_rule: ObserverBRule,
    #[serde(default)]
    pub destinations: DestinationPool,
    /// Wall-clock span assigned to each window.
    pub window_us: u64,
    pub start_us: u64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            n_sources: 10_400,
            zm: ZipfMandelbrotParams { delta: 1.0, lambda: 2.0 },
            d_max: 10_000,
            cauchy: CauchyParams { alpha: 0.8, beta: 10.0 },
            n_windows: 16,
            n_valid: 1 << 17,
            seed: 1,
            observer_b_rule: ObserverBRule::None,
            destinations: DestinationPool::default(),
            window_us: 1_000_000,
            start_us: 0,
        }
    }
}

impl SyntheticScenario {
    /// Checks parameter bounds and population feasibility. Returns the
    /// intensity table on success.
    pub fn validate(&self) -> Result<ZipfMandelbrotTable, GenError> {
        let zm = self.zm;
        if !(zm.delta > ZM_DELTA_RANGE.0 && zm.delta <= ZM_DELTA_RANGE.1) {
            return Err(GenError::ZipfMandelbrot(format!("delta = {} outside (-1, 10]", zm.delta)));
        }
        if !(zm.lambda > ZM_LAMBDA_RANGE.0 && zm.lambda <= ZM_LAMBDA_RANGE.1) {
            return Err(GenError::ZipfMandelbrot(format!("lambda = {} outside (0, 6]", zm.lambda)));
        }
        let c = self.cauchy;
        if !(c.alpha > 0.0 && c.alpha <= CAUCHY_ALPHA_MAX) || !(c.beta > 0.0 && c.beta <= CAUCHY_BETA_MAX) {
            return Err(GenError::Cauchy(format!("alpha = {}, beta = {} outside (0,2] x (0,1e6]", c.alpha, c.beta)));
        }
        for (name, v) in [
            ("n_sources", self.n_sources),
            ("n_windows", self.n_windows),
            ("n_valid", self.n_valid),
            ("d_max", self.d_max),
            ("destination pool size", self.destinations.size),
            ("window_us", self.window_us),
        ] {
            if v == 0 {
                return Err(GenError::Scenario(format!("{name} must be positive")));
            }
        }
        let table = ZipfMandelbrotTable::new(zm.delta, zm.lambda, self.d_max)?;
        let expected = self.n_sources as f64 * table.mean();
        if expected < self.n_valid as f64 {
            return Err(GenError::PopulationTooSmall {
                n_sources: self.n_sources,
                n_valid: self.n_valid,
                expected,
                required: (self.n_valid as f64 / table.mean()).ceil() as u64,
            });
        }
        if self.n_sources > self.n_valid {
            return Err(GenError::Scenario(format!(
                "n_sources = {} exceeds n_valid = {}; every active source needs a packet",
                self.n_sources, self.n_valid
            )));
        }
        Ok(table)
    }
}

/// Lifetime law realising the revisit curve `C(t) = β/(β+t^α)`.
///
/// A stationary population of sources with i.i.d. lifetimes `L` satisfies
/// `P(active at w+t | active at w) = Σ_{u≥t} P(L>u) / E[L]`, which equals
/// `C(t)` when `P(L>u) = (C(u) − C(u+1)) / (1 − C(1))`. That survival
/// function must be non-increasing, i.e. `C` discretely convex.
#[derive(Debug, Clone)]
struct Lifetimes {
    /// `C(t)` for `t = 0..=horizon+1`.
    revisit: Vec<f64>,
    /// `P(L > u)` for `u = 0..=horizon`.
    survival: Vec<f64>,
    mean: f64,
}

impl Lifetimes {
    fn new(p: CauchyParams, horizon: u64) -> Result<Self, GenError> {
        let revisit: Vec<f64> = (0..=horizon + 1)
            .map(|t| laws::modified_cauchy(t as f64, p.alpha, p.beta))
            .collect();
        let mean = 1.0 / (1.0 - revisit[1]);
        let survival: Vec<f64> = (0..=horizon as usize).map(|u| mean * (revisit[u] - revisit[u + 1])).collect();
        if let Some(u) = (1..survival.len()).find(|&u| survival[u] > survival[u - 1] * (1.0 + 1e-12)) {
            return Err(GenError::Cauchy(format!(
                "alpha = {}, beta = {}: revisit curve is not convex at lag {u}, no stationary lifetime law reproduces it",
                p.alpha, p.beta
            )));
        }
        Ok(Self { revisit, survival, mean })
    }

    /// Remaining run (≥ 1) of a source active at the start of the stream.
    fn residual<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = 1.0 - rng.random::<f64>();
        // number of t >= 0 with C(t) > u
        self.revisit.partition_point(|&c| c > u).max(1) as u64
    }

    /// Full run length (≥ 1) of a newly born source.
    fn lifetime<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let v: f64 = 1.0 - rng.random::<f64>();
        // number of u >= 0 with P(L > u) >= v
        self.survival.partition_point(|&s| s >= v).max(1) as u64
    }
}

/// Ground truth for one generated source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTruth {
    pub id: Addr,
    pub intensity: u64,
    pub first_window: u64,
    /// Exclusive.
    pub end_window: u64,
}

/// What the fill step did to one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowTruth {
    pub window: u64,
    pub active_sources: u64,
    /// Packets emitted before trimming or topping up.
    pub emitted: u64,
    pub trimmed: u64,
    pub topped_up: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer_b_sources: Option<u64>,
}

/// JSON sidecar describing a generated stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: SyntheticScenario,
    pub mean_intensity: f64,
    pub mean_lifetime_windows: f64,
    pub total_sources: u64,
    pub windows: Vec<WindowTruth>,
}

impl GroundTruth {
    /// Fraction of packets added or removed by the fill step.
    pub fn perturbation(&self) -> f64 {
        let changed: u64 = self.windows.iter().map(|w| w.trimmed + w.topped_up).sum();
        changed as f64 / (self.scenario.n_valid * self.scenario.n_windows) as f64
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub records: Vec<PacketRecord>,
    pub sources: Vec<SourceTruth>,
    pub truth: GroundTruth,
}

impl GeneratedStream {
    /// Packets per source in window `w`.
    pub fn window_records(&self, w: u64) -> &[PacketRecord] {
        let n = self.truth.scenario.n_valid as usize;
        &self.records[w as usize * n..(w as usize + 1) * n]
    }
}

#[derive(Debug, Clone)]
pub struct TwoObserverStreams {
    pub a: GeneratedStream,
    pub b: Vec<PacketRecord>,
}

/// Generates observer A's stream: exactly `n_windows × n_valid` records.
pub fn generate_stream(s: &SyntheticScenario) -> Result<GeneratedStream, GenError> {
    let intensity = s.validate()?;
    let lifetimes = Lifetimes::new(s.cauchy, s.n_windows)?;
    let dest = ZipfMandelbrotTable::new(s.destinations.delta, s.destinations.lambda, s.destinations.size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);

    let mut sources: Vec<SourceTruth> = Vec::new();
    let mut spawn = |rng: &mut ChaCha8Rng, first: u64, run: u64| {
        sources.push(SourceTruth {
            id: sources.len() as Addr + 1,
            intensity: intensity.sample(rng),
            first_window: first,
            end_window: (first + run).min(s.n_windows),
        });
    };
    let initial = poisson(&mut rng, s.n_sources as f64);
    for _ in 0..initial {
        let run = lifetimes.residual(&mut rng);
        spawn(&mut rng, 0, run);
    }
    let birth_rate = s.n_sources as f64 / lifetimes.mean;
    for w in 1..s.n_windows {
        for _ in 0..poisson(&mut rng, birth_rate) {
            let run = lifetimes.lifetime(&mut rng);
            spawn(&mut rng, w, run);
        }
    }

    let n_valid = s.n_valid as usize;
    let mut records = Vec::with_capacity(n_valid * s.n_windows as usize);
    let mut windows = Vec::with_capacity(s.n_windows as usize);
    let mut born = 0usize;
    let mut active: Vec<usize> = Vec::new();
    for w in 0..s.n_windows {
        while born < sources.len() && sources[born].first_window == w {
            active.push(born);
            born += 1;
        }
        active.retain(|&i| sources[i].end_window > w);
        if active.len() > n_valid {
            return Err(GenError::WindowOverfull {
                window: w,
                active: active.len() as u64,
                n_valid: s.n_valid,
            });
        }
        let mut counts: Vec<u64> = active.iter().map(|&i| sources[i].intensity).collect();
        let emitted: u64 = counts.iter().sum();
        let mut truth = WindowTruth {
            window: w,
            active_sources: active.len() as u64,
            emitted,
            trimmed: 0,
            topped_up: 0,
            observer_b_sources: None,
        };
        if emitted > s.n_valid {
            // Uniform removal over packets whose loss keeps their source present.
            let excess = (emitted - s.n_valid) as usize;
            let mut slots = Vec::with_capacity((emitted - active.len() as u64) as usize);
            for (i, &c) in counts.iter().enumerate() {
                slots.extend(std::iter::repeat_n(i as u32, c as usize - 1));
            }
            for k in index::sample(&mut rng, slots.len(), excess) {
                counts[slots[k] as usize] -= 1;
            }
            truth.trimmed = excess as u64;
        } else if emitted < s.n_valid {
            let missing = s.n_valid - emitted;
            let pick = WeightedIndex::new(&counts).expect("active sources have positive intensity");
            for _ in 0..missing {
                counts[pick.sample(&mut rng)] += 1;
            }
            truth.topped_up = missing;
        }
        let mut packets: Vec<(Addr, Addr)> = Vec::with_capacity(n_valid);
        for (&i, &c) in active.iter().zip(&counts) {
            for _ in 0..c {
                packets.push((sources[i].id, DEST_BASE + dest.sample(&mut rng) as Addr - 1));
            }
        }
        packets.shuffle(&mut rng);
        let base = s.start_us + w * s.window_us;
        for (j, (src, dst)) in packets.into_iter().enumerate() {
            let offset = (j as u128 * s.window_us as u128 / n_valid as u128) as u64;
            records.push(PacketRecord::new(base + offset, src, dst));
        }
        windows.push(truth);
    }
    let perturbed: u64 = windows.iter().map(|w| w.trimmed + w.topped_up).sum();
    log::info!(
        "generated {} windows from {} sources; fill step changed {} of {} packets",
        s.n_windows,
        sources.len(),
        perturbed,
        records.len()
    );

    Ok(GeneratedStream {
        records,
        truth: GroundTruth {
            scenario: s.clone(),
            mean_intensity: intensity.mean(),
            mean_lifetime_windows: lifetimes.mean,
            total_sources: sources.len() as u64,
            windows,
        },
        sources,
    })
}

/// Generates observer A as [`generate_stream`] and a second observer B that
/// sees each A source in a window with probability
/// `min(1, log2 d / log2 √n_valid)`, `d` being its packet count in that window.
/// B's records fall inside A's window time spans, one packet per visible source.
pub fn generate_two_observers(s: &SyntheticScenario) -> Result<TwoObserverStreams, GenError> {
    if s.observer_b_rule != ObserverBRule::ModelVisibility {
        return Err(GenError::NoObserverB);
    }
    if s.n_valid < 4 {
        return Err(GenError::Scenario("two-observer scenarios need n_valid >= 4".into()));
    }
    let mut a = generate_stream(s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(OBSERVER_B_STREAM);
    let mut b = Vec::new();
    for w in 0..s.n_windows {
        let mut per_source = std::collections::BTreeMap::<Addr, u64>::new();
        for r in a.window_records(w) {
            *per_source.entry(r.src).or_insert(0) += 1;
        }
        let visible: Vec<Addr> = per_source
            .into_iter()
            .filter(|&(_, d)| rng.random::<f64>() < laws::visibility::<f64>(d, s.n_valid))
            .map(|(src, _)| src)
            .collect();
        let base = s.start_us + w * s.window_us;
        let mut window_b: Vec<PacketRecord> = visible
            .iter()
            .map(|&src| {
                PacketRecord::new(
                    base + rng.random_range(0..s.window_us),
                    src,
                    OBSERVER_B_DEST_BASE + rng.random_range(0..OBSERVER_B_SENSORS) as Addr,
                )
            })
            .collect();
        window_b.sort_by_key(|r| (r.timestamp, r.src));
        a.truth.windows[w as usize].observer_b_sources = Some(visible.len() as u64);
        b.extend(window_b);
    }
    Ok(TwoObserverStreams { a, b })
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as u64
}
