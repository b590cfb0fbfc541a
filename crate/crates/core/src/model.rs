//! The combined source-observability model and the per-site fit that
//! produces its parameters.
//!
//! The model score for a source sending `d` packets in a window of `N_V`
//! packets, looked for again after lag `t`, is the product
//!
//! ```text
//! N_V^γ · 1/(d+δ)^λ · β/(β+t^α) · min(1, log2 d / log2 √N_V)
//! ```
//!
//! It is a proportionality, so [`observability_score`] also reports it
//! normalised against the reference query `d = √N_V, t = 0`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::anonymize::{anonymize, AnonymizationKey};
use crate::laws;
use crate::ingest::{Addr, Window};
use crate::matrix::{aggregates, build_matrix, degree_values, DegreeQuantity, Quantity, TrafficMatrix};
use crate::num::Real;
use crate::stats::{
    fit_modified_cauchy, fit_window_scaling, fit_zipf_mandelbrot, histogram, self_correlation, CauchyFit,
    DegreeHistogram, ScalingFit, SourceSet, StatsError, ZipfMandelbrotFit, CAUCHY_ALPHA_MAX, CAUCHY_BETA_MAX,
    ZM_DELTA_RANGE, ZM_LAMBDA_RANGE,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("d + delta = {0} is not positive")]
    Domain(String),
    #[error("invalid query: {0}")]
    Query(String),
    #[error("parameter {name} = {value} outside its fitter bounds")]
    OutOfBounds { name: &'static str, value: String },
    #[error("model json: {0}")]
    Json(String),
}

/// Which sub-fit of the site model failed.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SiteFitError {
    #[error("no windows to fit")]
    NoWindows,
    #[error("window scaling fit failed: {0}")]
    Scaling(StatsError),
    #[error("Zipf-Mandelbrot distribution fit failed: {0}")]
    Distribution(StatsError),
    #[error("modified Cauchy self-correlation fit failed: {0}")]
    Correlation(StatsError),
}

impl SiteFitError {
    /// Short name of the failing law.
    pub fn law(&self) -> &'static str {
        match self {
            SiteFitError::NoWindows => "input",
            SiteFitError::Scaling(_) => "scaling",
            SiteFitError::Distribution(_) => "zipf_mandelbrot",
            SiteFitError::Correlation(_) => "cauchy",
        }
    }
}

/// Which measured quantities feed each law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bindings {
    pub scaling: Quantity,
    pub distribution: DegreeQuantity,
}

impl Default for Bindings {
    fn default() -> Self {
        Self {
            scaling: Quantity::UniqueSources,
            distribution: DegreeQuantity::SourceFanout,
        }
    }
}

/// Sub-fit details kept alongside the headline parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Provenance<T> {
    pub windows: usize,
    pub n_valid: u64,
    /// Mean wall-clock span of a window; converts lags (in windows) to µs.
    pub mean_window_us: T,
    pub scaling: ScalingFit<T>,
    pub zipf_mandelbrot: ZipfMandelbrotFit<T>,
    pub cauchy: CauchyFit<T>,
    /// Leave-one-source-group-out standard errors. Sources persist across
    /// windows, so the fitters' own errors, which treat every bin or lag as
    /// independent, are too small; these resample the independent units.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jackknife: Option<ParameterErrors<T>>,
}

impl<T: Real> Provenance<T> {
    /// Standard errors reported by the individual fitters.
    pub fn fit_errors(&self) -> ParameterErrors<T> {
        ParameterErrors {
            groups: 0,
            gamma: self.scaling.std_error_gamma,
            delta: self.zipf_mandelbrot.std_error.delta,
            lambda: self.zipf_mandelbrot.std_error.lambda,
            alpha: self.cauchy.std_error.alpha,
            beta: self.cauchy.std_error.beta,
        }
    }
}

/// One standard error per fitted parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ParameterErrors<T> {
    /// Number of jackknife groups, 0 for fitter errors.
    pub groups: usize,
    pub gamma: T,
    pub delta: T,
    pub lambda: T,
    pub alpha: T,
    pub beta: T,
}

/// The five site parameters and how they were obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParameters<T> {
    #[serde(default)]
    pub site_label: String,
    pub gamma: T,
    pub coefficient: T,
    pub delta: T,
    pub lambda: T,
    pub scale: T,
    pub alpha: T,
    pub beta: T,
    pub t_half: T,
    #[serde(default)]
    pub bindings: Bindings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance<T>>,
}

impl<T: Real> ModelParameters<T> {
    /// Bare parameter set without provenance.
    pub fn new(gamma: T, delta: T, lambda: T, alpha: T, beta: T) -> Result<Self, ModelError> {
        let p = ModelParameters {
            site_label: String::new(),
            gamma,
            coefficient: T::one(),
            delta,
            lambda,
            scale: T::one(),
            alpha,
            beta,
            t_half: laws::half_life(alpha, beta),
            bindings: Bindings::default(),
            provenance: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let check = |name: &'static str, v: T, lo: f64, lo_open: bool, hi: f64| {
            let (lo, hi) = (T::lit(lo), T::lit(hi));
            let above = if lo_open { v > lo } else { v >= lo };
            if above && v <= hi {
                Ok(())
            } else {
                Err(ModelError::OutOfBounds {
                    name,
                    value: v.to_string(),
                })
            }
        };
        check("gamma", self.gamma, 0.0, false, 1.0)?;
        check("delta", self.delta, ZM_DELTA_RANGE.0, true, ZM_DELTA_RANGE.1)?;
        check("lambda", self.lambda, ZM_LAMBDA_RANGE.0, true, ZM_LAMBDA_RANGE.1)?;
        check("alpha", self.alpha, 0.0, true, CAUCHY_ALPHA_MAX)?;
        check("beta", self.beta, 0.0, true, CAUCHY_BETA_MAX)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model parameters serialise")
    }

    /// Parses and validates; `t_half` is recomputed from α and β.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let mut p: Self = serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        p.validate()?;
        p.t_half = laws::half_life(p.alpha, p.beta);
        Ok(p)
    }
}

/// A prediction query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ObservabilityQuery<T> {
    pub n_valid: u64,
    pub d: u64,
    pub t: T,
}

impl<T: Real> ObservabilityQuery<T> {
    pub fn new(n_valid: u64, d: u64, t: T) -> Result<Self, ModelError> {
        if n_valid < 4 {
            return Err(ModelError::Query(format!("n_valid = {n_valid} must be at least 4")));
        }
        if d < 1 {
            return Err(ModelError::Query("d must be at least 1".into()));
        }
        if !(t >= T::zero()) || !t.is_finite() {
            return Err(ModelError::Query(format!("t = {t} must be finite and non-negative")));
        }
        Ok(Self { n_valid, d, t })
    }
}

/// The four model factors, individually.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Factors<T> {
    /// `N_V^γ`
    pub window: T,
    /// `1/(d+δ)^λ`
    pub degree: T,
    /// `β/(β+t^α)`
    pub revisit: T,
    /// `min(1, log2 d / log2 √N_V)`
    pub visibility: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Observability<T> {
    pub raw_score: T,
    /// Raw score of the reference query `d = √N_V, t = 0`.
    pub reference_score: T,
    /// `min(1, raw_score / reference_score)`
    pub probability: T,
    pub factors: Factors<T>,
    /// Set when `d = 1`, where the visibility factor (and so the score) is 0.
    pub zero_visibility: bool,
}

pub fn observability_score<T: Real>(
    p: &ModelParameters<T>,
    q: &ObservabilityQuery<T>,
) -> Result<Observability<T>, ModelError> {
    let d = T::from_count(q.d);
    if !(d + p.delta > T::zero()) {
        return Err(ModelError::Domain((d + p.delta).to_string()));
    }
    let n = T::from_count(q.n_valid);
    let factors = Factors {
        window: n.powf(p.gamma),
        degree: laws::zipf_mandelbrot(d, p.delta, p.lambda),
        revisit: laws::modified_cauchy(q.t, p.alpha, p.beta),
        visibility: laws::visibility(q.d, q.n_valid),
    };
    let raw_score = factors.window * factors.degree * factors.revisit * factors.visibility;
    let reference_score = factors.window * laws::zipf_mandelbrot(n.sqrt(), p.delta, p.lambda);
    let probability = if reference_score > T::zero() {
        (raw_score / reference_score).min(T::one())
    } else {
        T::zero()
    };
    Ok(Observability {
        raw_score,
        reference_score,
        probability,
        factors,
        zero_visibility: q.d == 1,
    })
}

/// `coefficient · n_valid^γ`
pub fn expected_quantity<T: Real>(f: &ScalingFit<T>, n_valid: u64) -> T {
    laws::window_scaling(f.coefficient, f.gamma, T::from_count(n_valid))
}

/// `β/(β+t^α)`
pub fn revisit_probability<T: Real>(c: &CauchyFit<T>, t: T) -> T {
    laws::modified_cauchy(t, c.alpha, c.beta)
}

/// `min(1, log2 d / log2 √n_valid)`; exactly 1 once `d ≥ √n_valid`.
///
/// # Panics
/// If `d == 0` or `n_valid < 4`.
pub fn second_observer_probability<T: Real>(d: u64, n_valid: u64) -> T {
    assert!(d >= 1 && n_valid >= 4, "need d >= 1 and n_valid >= 4");
    laws::visibility(d, n_valid)
}

/// Settings for [`fit_site_model`].
#[derive(Debug, Clone)]
pub struct SiteModelConfig {
    pub site_label: String,
    pub bindings: Bindings,
    /// Largest self-correlation lag in windows; defaults to `min(windows-1, 32)`.
    pub max_lag: Option<usize>,
    /// Window sizes used for the scaling fit are `N_V · 2^k` for
    /// `k = 0..=scaling_octaves` while at least one merged window exists.
    pub scaling_octaves: u32,
    /// Relabel identifiers before any measurement.
    pub anonymize: Option<AnonymizationKey>,
    /// Source groups for the leave-one-group-out standard errors; 0 or 1
    /// disables them.
    pub jackknife_groups: usize,
}

impl Default for SiteModelConfig {
    fn default() -> Self {
        Self {
            site_label: String::new(),
            bindings: Bindings::default(),
            max_lag: None,
            scaling_octaves: 10,
            anonymize: None,
            jackknife_groups: 16,
        }
    }
}

/// What the three fitters consume.
#[derive(Debug, Clone)]
pub struct SiteSample {
    /// `(N_V, quantity)` for every window and merged window.
    pub scaling_samples: Vec<(u64, f64)>,
    pub distribution: Option<DegreeHistogram>,
    pub source_sets: Vec<SourceSet>,
}

/// Per-window measurements shared by the three fitters.
#[derive(Debug, Clone)]
pub struct SiteMeasurements {
    pub n_valid: u64,
    pub mean_window_us: f64,
    pub full: SiteSample,
    /// The same measurements with one source group left out each time.
    pub jackknife: Vec<SiteSample>,
}

/// Deterministic group of a source identifier.
pub fn source_group(a: Addr, groups: usize) -> usize {
    // splitmix64 finaliser over the folded address
    let mut x = (a as u64) ^ ((a >> 64) as u64).rotate_left(29);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    (x % groups as u64) as usize
}

fn sample(matrices: &[TrafficMatrix], base: usize, bindings: Bindings) -> SiteSample {
    let mut dist_values = Vec::new();
    let mut source_sets = Vec::with_capacity(base);
    for m in &matrices[..base] {
        dist_values.extend(degree_values(m, bindings.distribution));
        source_sets.push(m.entries().iter().map(|e| e.0).collect());
    }
    SiteSample {
        scaling_samples: matrices
            .iter()
            .map(|m| (m.n_valid(), aggregates(m).get(bindings.scaling) as f64))
            .collect(),
        distribution: histogram(dist_values).ok(),
        source_sets,
    }
}

/// Leave-one-group-out samples. Quantities that add up over sources are
/// tallied per group in one pass; the rest are recomputed on the reduced
/// matrices.
fn jackknife_samples(
    matrices: &[TrafficMatrix],
    base: usize,
    bindings: Bindings,
    full: &SiteSample,
    groups: usize,
) -> Vec<SiteSample> {
    let group = |s: Addr| source_group(s, groups);
    let mut reps: Vec<SiteSample> = (0..groups)
        .map(|_| SiteSample {
            scaling_samples: Vec::with_capacity(matrices.len()),
            distribution: None,
            source_sets: Vec::with_capacity(base),
        })
        .collect();

    for (m, &(n, total)) in matrices.iter().zip(&full.scaling_samples) {
        match bindings.scaling {
            Quantity::ValidPackets | Quantity::UniqueLinks | Quantity::UniqueSources => {
                let mut per_group = vec![0u64; groups];
                for row in m.entries().chunk_by(|a, b| a.0 == b.0) {
                    per_group[group(row[0].0)] += match bindings.scaling {
                        Quantity::ValidPackets => row.iter().map(|e| e.2).sum(),
                        Quantity::UniqueLinks => row.len() as u64,
                        _ => 1,
                    };
                }
                for (r, c) in reps.iter_mut().zip(per_group) {
                    r.scaling_samples.push((n, total - c as f64));
                }
            }
            q => {
                for (g, r) in reps.iter_mut().enumerate() {
                    let kept = m.retain(|s, _| group(s) != g);
                    r.scaling_samples.push((n, aggregates(&kept).get(q) as f64));
                }
            }
        }
    }

    match bindings.distribution {
        q @ (DegreeQuantity::DestPackets | DegreeQuantity::DestFanin) => {
            for (g, r) in reps.iter_mut().enumerate() {
                let values = matrices[..base]
                    .iter()
                    .flat_map(|m| degree_values(&m.retain(|s, _| group(s) != g), q));
                r.distribution = histogram(values).ok();
            }
        }
        q => {
            let mut per_group = vec![DegreeHistogram::default(); groups];
            for m in &matrices[..base] {
                for row in m.entries().chunk_by(|a, b| a.0 == b.0) {
                    let h = &mut per_group[group(row[0].0)];
                    let ok = match q {
                        DegreeQuantity::SourcePackets => h.add(row.iter().map(|e| e.2).sum()),
                        DegreeQuantity::SourceFanout => h.add(row.len() as u64),
                        _ => row.iter().try_for_each(|e| h.add(e.2)),
                    };
                    ok.expect("matrix degrees are positive");
                }
            }
            for (g, r) in reps.iter_mut().enumerate() {
                let mut h = DegreeHistogram::default();
                for (k, part) in per_group.iter().enumerate() {
                    if k != g {
                        h.merge(part);
                    }
                }
                r.distribution = (h.total() > 0).then_some(h);
            }
        }
    }

    for set in &full.source_sets {
        for (g, r) in reps.iter_mut().enumerate() {
            r.source_sets
                .push(set.as_slice().iter().copied().filter(|&s| group(s) != g).collect());
        }
    }
    reps
}

/// Builds matrices for every window (and merged windows for the scaling
/// ladder) and extracts what the fitters need.
pub fn measure_site(windows: &[Window], config: &SiteModelConfig) -> Result<SiteMeasurements, SiteFitError> {
    let first = windows.first().ok_or(SiteFitError::NoWindows)?;
    let n_valid = first.n_valid() as u64;
    let mut matrices: Vec<TrafficMatrix> = windows
        .iter()
        .map(|w| {
            let m = build_matrix(w);
            match &config.anonymize {
                Some(k) => anonymize(&m, k),
                None => m,
            }
        })
        .collect();
    let base = matrices.len();
    // each octave joins adjacent pairs of the previous one
    let mut level = 0..base;
    for _ in 0..config.scaling_octaves {
        let start = matrices.len();
        for i in level.clone().step_by(2) {
            if i + 1 < level.end {
                let merged = matrices[i].merge(&matrices[i + 1]);
                matrices.push(merged);
            }
        }
        if matrices.len() == start {
            break;
        }
        level = start..matrices.len();
    }
    let full = sample(&matrices, base, config.bindings);
    let groups = config.jackknife_groups;
    let jackknife = if groups > 1 {
        jackknife_samples(&matrices, base, config.bindings, &full, groups)
    } else {
        Vec::new()
    };
    let mean_window_us = windows.iter().map(|w| w.duration_us() as f64).sum::<f64>() / windows.len() as f64;
    Ok(SiteMeasurements {
        n_valid,
        mean_window_us,
        full,
        jackknife,
    })
}

/// Fits all three laws to a series of equal-size windows.
pub fn fit_site_model<T: Real>(
    windows: &[Window],
    config: &SiteModelConfig,
) -> Result<ModelParameters<T>, SiteFitError> {
    let m = measure_site(windows, config)?;
    fit_measurements(&m, config)
}

struct LawFits<T> {
    scaling: ScalingFit<T>,
    zm: ZipfMandelbrotFit<T>,
    cauchy: CauchyFit<T>,
}

impl<T: Real> LawFits<T> {
    fn values(&self) -> [T; 5] {
        [self.scaling.gamma, self.zm.delta, self.zm.lambda, self.cauchy.alpha, self.cauchy.beta]
    }
}

fn fit_sample<T: Real>(s: &SiteSample, config: &SiteModelConfig) -> Result<LawFits<T>, SiteFitError> {
    let samples: Vec<(u64, T)> = s.scaling_samples.iter().map(|&(n, q)| (n, T::lit(q))).collect();
    let scaling = fit_window_scaling(config.bindings.scaling, &samples).map_err(SiteFitError::Scaling)?;

    let hist = s
        .distribution
        .as_ref()
        .ok_or(SiteFitError::Distribution(StatsError::EmptyHistogram))?;
    let zm = fit_zipf_mandelbrot::<T>(hist).map_err(SiteFitError::Distribution)?;

    let windows = s.source_sets.len();
    let max_lag = config.max_lag.unwrap_or(32).min(windows.saturating_sub(1));
    let sc = self_correlation::<T>(&s.source_sets, max_lag).map_err(SiteFitError::Correlation)?;
    let cauchy = fit_modified_cauchy(&sc.curve).map_err(SiteFitError::Correlation)?;
    Ok(LawFits { scaling, zm, cauchy })
}

pub fn fit_measurements<T: Real>(
    m: &SiteMeasurements,
    config: &SiteModelConfig,
) -> Result<ModelParameters<T>, SiteFitError> {
    let fits = fit_sample::<T>(&m.full, config)?;
    let jackknife = jackknife_errors(&m.jackknife, config);
    let LawFits { scaling, zm, cauchy } = fits;
    Ok(ModelParameters {
        site_label: config.site_label.clone(),
        gamma: scaling.gamma,
        coefficient: scaling.coefficient,
        delta: zm.delta,
        lambda: zm.lambda,
        scale: zm.scale,
        alpha: cauchy.alpha,
        beta: cauchy.beta,
        t_half: cauchy.t_half,
        bindings: config.bindings,
        provenance: Some(Provenance {
            windows: m.full.source_sets.len(),
            n_valid: m.n_valid,
            mean_window_us: T::lit(m.mean_window_us),
            scaling,
            zipf_mandelbrot: zm,
            cauchy,
            jackknife,
        }),
    })
}

fn jackknife_errors<T: Real>(replicates: &[SiteSample], config: &SiteModelConfig) -> Option<ParameterErrors<T>> {
    if replicates.len() < 2 {
        return None;
    }
    let mut values = Vec::with_capacity(replicates.len());
    for (g, r) in replicates.iter().enumerate() {
        match fit_sample::<T>(r, config) {
            Ok(f) => values.push(f.values()),
            Err(e) => {
                log::warn!("jackknife replicate {g} failed ({e}); reporting fit standard errors only");
                return None;
            }
        }
    }
    let g = T::from_count(values.len() as u64);
    let se: [T; 5] = std::array::from_fn(|k| {
        let mean = values.iter().map(|v| v[k]).fold(T::zero(), |a, b| a + b) / g;
        let ss = values.iter().map(|v| (v[k] - mean).powi(2)).fold(T::zero(), |a, b| a + b);
        ((g - T::one()) / g * ss).sqrt()
    });
    Some(ParameterErrors {
        groups: values.len(),
        gamma: se[0],
        delta: se[1],
        lambda: se[2],
        alpha: se[3],
        beta: se[4],
    })
}

/// Parameter-wise agreement check between two fits of the same site:
/// `|a − b| ≤ k · sqrt(se_a² + se_b²)` for each parameter, using the
/// jackknife standard errors when both fits carry them and the fitters'
/// own standard errors otherwise. Returns the names of parameters that
/// disagree.
pub fn disagreeing_parameters<T: Real>(a: &ModelParameters<T>, b: &ModelParameters<T>, k: T) -> Vec<&'static str> {
    let (Some(pa), Some(pb)) = (&a.provenance, &b.provenance) else {
        return vec!["provenance"];
    };
    let (ea, eb) = match (pa.jackknife, pb.jackknife) {
        (Some(ja), Some(jb)) => (ja, jb),
        _ => (pa.fit_errors(), pb.fit_errors()),
    };
    let rows: BTreeMap<&'static str, (T, T, T, T)> = BTreeMap::from([
        ("gamma", (a.gamma, b.gamma, ea.gamma, eb.gamma)),
        ("delta", (a.delta, b.delta, ea.delta, eb.delta)),
        ("lambda", (a.lambda, b.lambda, ea.lambda, eb.lambda)),
        ("alpha", (a.alpha, b.alpha, ea.alpha, eb.alpha)),
        ("beta", (a.beta, b.beta, ea.beta, eb.beta)),
    ]);
    rows.into_iter()
        .filter(|(_, (x, y, sx, sy))| (*x - *y).abs() > k * (*sx * *sx + *sy * *sy).sqrt())
        .map(|(name, _)| name)
        .collect()
}
