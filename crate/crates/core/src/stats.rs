//! Degree histograms, correlation curves and the fitters for the three
//! empirical traffic laws.
//!
//! All fitters are deterministic: a fixed coarse grid locates the basin and
//! golden-section search refines it, so identical inputs give bit-identical
//! parameters. Where a law is linear in some parameters once the others are
//! fixed, those are solved in closed form inside the search.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::ingest::Addr;
use crate::laws;
use crate::matrix::Quantity;
use crate::num::{golden_min, invert, Real};

/// Degrees above this are tallied in power-of-two bins.
pub const EXACT_DEGREE_LIMIT: u64 = 1_000_000;

const REFINE_TOL: f64 = 1e-6;
const REFINE_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("degree 0 is not a valid histogram value")]
    ZeroDegree,
    #[error("underdetermined fit: need at least {needed} {what}, got {got}")]
    Underdetermined {
        needed: usize,
        got: usize,
        what: &'static str,
    },
    #[error("degenerate window-size spread: {0}")]
    DegenerateSpread(String),
    #[error("non-positive quantity {value} at n_valid = {n_valid}; cannot take logarithm")]
    NonPositive { n_valid: u64, value: String },
    #[error("self-correlation needs at least 2 windows and max_lag < windows (windows = {windows}, max_lag = {max_lag})")]
    BadLagRange { windows: usize, max_lag: usize },
    #[error("every reference window has an empty source set")]
    AllWindowsSkipped,
    #[error("no aligned windows between observers")]
    NoAlignedWindows,
    #[error("window size {0} too small for the visibility model (need at least 4)")]
    WindowTooSmall(u64),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
}

/// Sorted, deduplicated set of source identifiers seen in one window.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SourceSet(Vec<Addr>);

impl SourceSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, a: Addr) -> bool {
        self.0.binary_search(&a).is_ok()
    }

    pub fn as_slice(&self) -> &[Addr] {
        &self.0
    }

    pub fn intersection_len(&self, other: &SourceSet) -> usize {
        let (a, b) = (&self.0, &other.0);
        let (mut i, mut j, mut n) = (0, 0, 0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }

    pub fn union(&self, other: &SourceSet) -> SourceSet {
        self.0.iter().chain(&other.0).copied().collect()
    }
}

impl FromIterator<Addr> for SourceSet {
    fn from_iter<I: IntoIterator<Item = Addr>>(iter: I) -> Self {
        let mut v: Vec<_> = iter.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        SourceSet(v)
    }
}

/// Occurrence counts per degree value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreeHistogram {
    /// Exact bins, one per degree up to [`EXACT_DEGREE_LIMIT`].
    bins: BTreeMap<u64, u64>,
    /// Power-of-two bins `[2^k, 2^(k+1))` for larger degrees, keyed by `k`.
    log_bins: BTreeMap<u32, u64>,
    total: u64,
}

/// One histogram bin as seen by the fitters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramPoint<T> {
    /// Bin centre (the degree itself for exact bins).
    pub degree: T,
    pub count: u64,
    /// Number of integer degrees the bin covers.
    pub width: u64,
}

/// Tallies positive degree values.
pub fn histogram(values: impl IntoIterator<Item = u64>) -> Result<DegreeHistogram, StatsError> {
    let mut h = DegreeHistogram::default();
    for v in values {
        h.add(v)?;
    }
    if h.total == 0 {
        return Err(StatsError::EmptyHistogram);
    }
    Ok(h)
}

impl DegreeHistogram {
    pub fn add(&mut self, d: u64) -> Result<(), StatsError> {
        self.add_count(d, 1)
    }

    pub fn add_count(&mut self, d: u64, count: u64) -> Result<(), StatsError> {
        if d == 0 {
            return Err(StatsError::ZeroDegree);
        }
        if count == 0 {
            return Ok(());
        }
        if d <= EXACT_DEGREE_LIMIT {
            *self.bins.entry(d).or_insert(0) += count;
        } else {
            *self.log_bins.entry(63 - d.leading_zeros()).or_insert(0) += count;
        }
        self.total += count;
        Ok(())
    }

    pub fn merge(&mut self, other: &DegreeHistogram) {
        for (&d, &c) in &other.bins {
            *self.bins.entry(d).or_insert(0) += c;
        }
        for (&k, &c) in &other.log_bins {
            *self.log_bins.entry(k).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Exact-bin count for `d` (0 if absent or log-binned).
    pub fn count(&self, d: u64) -> u64 {
        self.bins.get(&d).copied().unwrap_or(0)
    }

    /// One-sigma Poisson uncertainty of a bin count.
    pub fn sigma(&self, d: u64) -> f64 {
        (self.count(d) as f64).sqrt()
    }

    pub fn exact_bins(&self) -> &BTreeMap<u64, u64> {
        &self.bins
    }

    /// Number of nonempty bins.
    pub fn distinct(&self) -> usize {
        self.bins.len() + self.log_bins.len()
    }

    /// All nonempty bins in increasing degree order.
    pub fn points<T: Real>(&self) -> Vec<HistogramPoint<T>> {
        let exact = self.bins.iter().map(|(&d, &count)| HistogramPoint {
            degree: T::from_count(d),
            count,
            width: 1,
        });
        let logs = self.log_bins.iter().map(|(&k, &count)| {
            let lo = 1u64 << k;
            HistogramPoint {
                // geometric centre of [2^k, 2^(k+1))
                degree: T::from_count(lo) * T::SQRT_2(),
                count,
                width: lo,
            }
        });
        exact.chain(logs).collect()
    }

    /// TSV rows `x value sigma n`: degree, probability per unit degree, its
    /// one-sigma error, and the raw bin count.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x\tvalue\tsigma\tn")?;
        let total = self.total as f64;
        for p in self.points::<f64>() {
            let norm = total * p.width as f64;
            let c = p.count as f64;
            writeln!(out, "{}\t{}\t{}\t{}", p.degree, c / norm, c.sqrt() / norm, p.count)?;
        }
        Ok(())
    }
}

/// Fitted Zipf–Mandelbrot law `p(d) ≈ scale / (d + δ)^λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ZipfMandelbrotFit<T> {
    pub delta: T,
    pub lambda: T,
    pub scale: T,
    /// Count-weighted RMSE of `ln p(d)`.
    pub residual: T,
    pub std_error: ZipfMandelbrotStdError<T>,
    pub bins: usize,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ZipfMandelbrotStdError<T> {
    pub delta: T,
    pub lambda: T,
}

impl<T: Real> ZipfMandelbrotFit<T> {
    /// Model probability at degree `d`.
    pub fn probability(&self, d: T) -> T {
        self.scale * laws::zipf_mandelbrot(d, self.delta, self.lambda)
    }
}

/// Search bounds for the Zipf–Mandelbrot fit: δ ∈ (−1, 10], λ ∈ (0, 6].
pub const ZM_DELTA_RANGE: (f64, f64) = (-1.0, 10.0);
pub const ZM_LAMBDA_RANGE: (f64, f64) = (0.0, 6.0);

struct LogLinear<T> {
    intercept: T,
    slope: T,
    sse: T,
}

/// Weighted least squares `y ≈ a + b·x` with `b` clamped to `[b_lo, b_hi]`.
fn weighted_line<T: Real>(xs: &[T], ys: &[T], ws: &[T], b_lo: T, b_hi: T) -> LogLinear<T> {
    let sw = ws.iter().fold(T::zero(), |a, &w| a + w);
    let mx = xs.iter().zip(ws).fold(T::zero(), |a, (&x, &w)| a + w * x) / sw;
    let my = ys.iter().zip(ws).fold(T::zero(), |a, (&y, &w)| a + w * y) / sw;
    let (mut sxx, mut sxy) = (T::zero(), T::zero());
    for ((&x, &y), &w) in xs.iter().zip(ys).zip(ws) {
        sxx = sxx + w * (x - mx) * (x - mx);
        sxy = sxy + w * (x - mx) * (y - my);
    }
    let slope = if sxx > T::zero() { sxy / sxx } else { T::zero() };
    let slope = slope.max(b_lo).min(b_hi);
    let intercept = my - slope * mx;
    let sse = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .fold(T::zero(), |a, ((&x, &y), &w)| {
            let r = y - intercept - slope * x;
            a + w * r * r
        });
    LogLinear { intercept, slope, sse }
}

/// Fits `p(d) ∝ 1/(d+δ)^λ` by count-weighted least squares in log space.
///
/// For each trial δ the optimal `ln scale` and λ solve a weighted linear
/// regression of `ln p(d)` on `ln(d+δ)`, so the search is one-dimensional in
/// δ: a grid of step 0.01 over (−1, 10], then golden-section refinement.
pub fn fit_zipf_mandelbrot<T: Real>(h: &DegreeHistogram) -> Result<ZipfMandelbrotFit<T>, StatsError> {
    let pts = h.points::<T>();
    if pts.len() < 3 {
        return Err(StatsError::Underdetermined {
            needed: 3,
            got: pts.len(),
            what: "distinct degrees",
        });
    }
    let total = T::from_count(h.total);
    let ds: Vec<T> = pts.iter().map(|p| p.degree).collect();
    let ys: Vec<T> = pts
        .iter()
        .map(|p| (T::from_count(p.count) / (total * T::from_count(p.width))).ln())
        .collect();
    let ws: Vec<T> = pts.iter().map(|p| T::from_count(p.count)).collect();
    let min_degree = ds[0];

    let delta_floor = T::lit(ZM_DELTA_RANGE.0).max(T::one() - min_degree) + T::lit(1e-9);
    let delta_hi = T::lit(ZM_DELTA_RANGE.1);
    let lambda_lo = T::lit(1e-9);
    let lambda_hi = T::lit(ZM_LAMBDA_RANGE.1);

    let mut xs = vec![T::zero(); ds.len()];
    let mut profile = |delta: T| -> LogLinear<T> {
        for (x, &d) in xs.iter_mut().zip(&ds) {
            *x = (d + delta).ln();
        }
        // y = a - λ x  ⇒ slope = -λ
        weighted_line(&xs, &ys, &ws, -lambda_hi, -lambda_lo)
    };

    let steps = 1100;
    let step = (delta_hi - T::lit(ZM_DELTA_RANGE.0)) / T::from_count(steps);
    let grid: Vec<T> = (1..=steps)
        .map(|k| T::lit(ZM_DELTA_RANGE.0) + step * T::from_count(k))
        .filter(|&d| d > delta_floor)
        .collect();
    let mut best = (0usize, T::infinity());
    for (i, &d) in grid.iter().enumerate() {
        let sse = profile(d).sse;
        if sse < best.1 {
            best = (i, sse);
        }
    }
    let lo = if best.0 == 0 { delta_floor } else { grid[best.0 - 1] };
    let hi = grid.get(best.0 + 1).copied().unwrap_or(delta_hi);
    let (mut delta, refined) = golden_min(lo, hi, T::lit(REFINE_TOL), REFINE_MAX_ITER, |d| profile(d).sse);
    if best.1 < refined {
        delta = grid[best.0];
    }
    let line = profile(delta);
    let lambda = -line.slope;
    let scale = line.intercept.exp();
    let sw = ws.iter().fold(T::zero(), |a, &w| a + w);

    // Covariance of (ln scale, λ, δ) from the weighted Gauss-Newton normal matrix.
    let mut jtj = [[T::zero(); 3]; 3];
    for (&d, &w) in ds.iter().zip(&ws) {
        let j = [T::one(), -(d + delta).ln(), -lambda / (d + delta)];
        for a in 0..3 {
            for b in 0..3 {
                jtj[a][b] = jtj[a][b] + w * j[a] * j[b];
            }
        }
    }
    let dof = pts.len().saturating_sub(3);
    let std_error = match (invert(jtj), dof) {
        (Some(cov), dof) if dof > 0 => {
            let s2 = line.sse / T::from_count(dof as u64);
            ZipfMandelbrotStdError {
                delta: (cov[2][2] * s2).abs().sqrt(),
                lambda: (cov[1][1] * s2).abs().sqrt(),
            }
        }
        _ => ZipfMandelbrotStdError {
            delta: T::infinity(),
            lambda: T::infinity(),
        },
    };

    Ok(ZipfMandelbrotFit {
        delta,
        lambda,
        scale,
        residual: (line.sse / sw).sqrt(),
        std_error,
        bins: pts.len(),
        samples: h.total,
    })
}

/// Fitted window-size scaling law `quantity ≈ coefficient · N_V^γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ScalingFit<T> {
    pub quantity: Quantity,
    pub gamma: T,
    pub coefficient: T,
    /// Log-space RMSE.
    pub residual: T,
    /// Unclamped least-squares slope.
    pub raw_gamma: T,
    pub clamped: bool,
    pub std_error_gamma: T,
    pub samples: usize,
}

/// Least-squares line in `(ln N_V, ln quantity)`; γ is clamped to `[0, 1]`.
pub fn fit_window_scaling<T: Real>(quantity: Quantity, samples: &[(u64, T)]) -> Result<ScalingFit<T>, StatsError> {
    let mut sizes: Vec<u64> = samples.iter().map(|s| s.0).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() == 1 {
        return Err(StatsError::DegenerateSpread(format!("all samples at n_valid = {}", sizes[0])));
    }
    if sizes.len() < 3 {
        return Err(StatsError::Underdetermined {
            needed: 3,
            got: sizes.len(),
            what: "distinct window sizes",
        });
    }
    if sizes[0] == 0 || sizes[sizes.len() - 1] / sizes[0] < 4 {
        return Err(StatsError::DegenerateSpread(format!(
            "window sizes {}..{} span less than two octaves",
            sizes[0],
            sizes[sizes.len() - 1]
        )));
    }
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for &(n, q) in samples {
        if !(q > T::zero()) {
            return Err(StatsError::NonPositive {
                n_valid: n,
                value: q.to_string(),
            });
        }
        xs.push(T::from_count(n).ln());
        ys.push(q.ln());
    }
    let ws = vec![T::one(); xs.len()];
    let raw = weighted_line(&xs, &ys, &ws, -T::infinity(), T::infinity());
    let fit = weighted_line(&xs, &ys, &ws, T::zero(), T::one());
    let n = T::from_count(xs.len() as u64);
    let mx = xs.iter().fold(T::zero(), |a, &x| a + x) / n;
    let sxx = xs.iter().fold(T::zero(), |a, &x| a + (x - mx) * (x - mx));
    let std_error_gamma = if xs.len() > 2 {
        (fit.sse / T::from_count(xs.len() as u64 - 2) / sxx).sqrt()
    } else {
        T::infinity()
    };
    Ok(ScalingFit {
        quantity,
        gamma: fit.slope,
        coefficient: fit.intercept.exp(),
        residual: (fit.sse / n).sqrt(),
        raw_gamma: raw.slope,
        clamped: fit.slope != raw.slope,
        std_error_gamma,
        samples: samples.len(),
    })
}

/// One measured point of a correlation curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CorrelationPoint<T> {
    pub lag: T,
    pub probability: T,
    /// Number of Bernoulli trials behind the probability.
    pub n: u64,
}

/// Measured probability versus lag (or versus `log2 d` bucket).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CorrelationCurve<T> {
    points: Vec<CorrelationPoint<T>>,
}

impl<T: Real> CorrelationCurve<T> {
    /// Validates probabilities in `[0, 1]` and strictly increasing lags.
    pub fn new(points: Vec<CorrelationPoint<T>>) -> Result<Self, StatsError> {
        for (i, p) in points.iter().enumerate() {
            if !(p.probability >= T::zero() && p.probability <= T::one()) {
                return Err(StatsError::InvalidCurve(format!("probability {} out of [0,1]", p.probability)));
            }
            if i > 0 && !(points[i - 1].lag < p.lag) {
                return Err(StatsError::InvalidCurve("lags not strictly increasing".into()));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[CorrelationPoint<T>] {
        &self.points
    }

    /// Binomial one-sigma error of point `i`.
    pub fn sigma(&self, i: usize) -> T {
        let p = self.points[i].probability;
        if self.points[i].n == 0 {
            return T::zero();
        }
        (p * (T::one() - p) / T::from_count(self.points[i].n)).sqrt()
    }

    /// TSV rows `x value sigma n`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x\tvalue\tsigma\tn")?;
        for (i, p) in self.points.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", p.lag, p.probability, self.sigma(i), p.n)?;
        }
        Ok(())
    }

    /// TSV rows `x value sigma n <name>` with one extra value per point.
    pub fn write_tsv_with<W: Write>(&self, name: &str, extra: &[T], mut out: W) -> io::Result<()> {
        assert_eq!(extra.len(), self.points.len(), "one extra value per point");
        writeln!(out, "x\tvalue\tsigma\tn\t{name}")?;
        for (i, p) in self.points.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}\t{}", p.lag, p.probability, self.sigma(i), p.n, extra[i])?;
        }
        Ok(())
    }
}

/// Self-correlation curve plus the reference windows that were skipped
/// because their source set was empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SelfCorrelation<T> {
    pub curve: CorrelationCurve<T>,
    pub skipped_windows: Vec<usize>,
}

/// Probability of seeing a source again `t` windows later: the mean over
/// reference windows `w` of `|S_w ∩ S_{w+t}| / |S_w|`, for `t = 0..=max_lag`.
pub fn self_correlation<T: Real>(windows: &[SourceSet], max_lag: usize) -> Result<SelfCorrelation<T>, StatsError> {
    if windows.len() < 2 || max_lag >= windows.len() {
        return Err(StatsError::BadLagRange {
            windows: windows.len(),
            max_lag,
        });
    }
    let skipped: Vec<usize> = (0..windows.len()).filter(|&w| windows[w].is_empty()).collect();
    if skipped.len() == windows.len() {
        return Err(StatsError::AllWindowsSkipped);
    }
    let mut points = Vec::with_capacity(max_lag + 1);
    points.push(CorrelationPoint {
        lag: T::zero(),
        probability: T::one(),
        n: windows.iter().map(|s| s.len() as u64).sum(),
    });
    for t in 1..=max_lag {
        let (mut sum, mut refs, mut trials) = (T::zero(), 0u64, 0u64);
        for w in 0..windows.len() - t {
            let base = &windows[w];
            if base.is_empty() {
                continue;
            }
            let hits = base.intersection_len(&windows[w + t]);
            sum = sum + T::from_count(hits as u64) / T::from_count(base.len() as u64);
            refs += 1;
            trials += base.len() as u64;
        }
        if refs == 0 {
            continue;
        }
        points.push(CorrelationPoint {
            lag: T::from_count(t as u64),
            probability: (sum / T::from_count(refs)).min(T::one()),
            n: trials,
        });
    }
    if points.len() == 1 {
        return Err(StatsError::AllWindowsSkipped);
    }
    Ok(SelfCorrelation {
        curve: CorrelationCurve::new(points)?,
        skipped_windows: skipped,
    })
}

/// Standard error of each self-correlation point with sources, rather than
/// source-window pairs, as the independent units.
///
/// A source present over many windows contributes correlated trials to many
/// reference windows, so the binomial [`CorrelationCurve::sigma`] understates
/// the scatter of the estimate. This is the linearised variance of the
/// mean-of-ratios estimator clustered by source. `windows` must be the sets
/// `sc` was computed from.
pub fn clustered_sigma<T: Real>(windows: &[SourceSet], sc: &SelfCorrelation<T>) -> Vec<T> {
    let mut presence: HashMap<Addr, Vec<u32>> = HashMap::new();
    for (w, set) in windows.iter().enumerate() {
        for &src in set.as_slice() {
            presence.entry(src).or_default().push(w as u32);
        }
    }
    let inv_size: Vec<T> = windows
        .iter()
        .map(|s| if s.is_empty() { T::zero() } else { T::from_count(s.len() as u64).recip() })
        .collect();
    sc.curve
        .points()
        .iter()
        .map(|p| {
            let t = p.lag.to_usize().expect("lags are window counts");
            if t == 0 {
                return T::zero();
            }
            let last = windows.len() - t;
            let refs = windows[..last].iter().filter(|s| !s.is_empty()).count();
            let mut var = T::zero();
            for windows_seen in presence.values() {
                let (mut a, mut b) = (T::zero(), T::zero());
                for &w in windows_seen.iter().take_while(|&&w| (w as usize) < last) {
                    let w = w as usize;
                    b = b + inv_size[w];
                    if windows_seen.binary_search(&((w + t) as u32)).is_ok() {
                        a = a + inv_size[w];
                    }
                }
                let r = a - b * p.probability;
                var = var + r * r;
            }
            var.sqrt() / T::from_count(refs as u64)
        })
        .collect()
}

/// Fitted modified Cauchy decay `β / (β + t^α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", from = "CauchyFitWire<T>")]
pub struct CauchyFit<T> {
    pub alpha: T,
    pub beta: T,
    /// Always `beta^(1/alpha)`.
    pub t_half: T,
    /// Sample-size weighted RMSE of the probabilities.
    pub residual: T,
    pub std_error: CauchyStdError<T>,
    pub points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CauchyStdError<T> {
    pub alpha: T,
    pub beta: T,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real")]
struct CauchyFitWire<T> {
    alpha: T,
    beta: T,
    residual: T,
    std_error: CauchyStdError<T>,
    points: usize,
}

impl<T: Real> From<CauchyFitWire<T>> for CauchyFit<T> {
    fn from(w: CauchyFitWire<T>) -> Self {
        CauchyFit {
            alpha: w.alpha,
            beta: w.beta,
            t_half: laws::half_life(w.alpha, w.beta),
            residual: w.residual,
            std_error: w.std_error,
            points: w.points,
        }
    }
}

impl<T: Real> CauchyFit<T> {
    pub fn new(alpha: T, beta: T) -> Self {
        CauchyFit {
            alpha,
            beta,
            t_half: laws::half_life(alpha, beta),
            residual: T::zero(),
            std_error: CauchyStdError {
                alpha: T::zero(),
                beta: T::zero(),
            },
            points: 0,
        }
    }
}

/// Search bounds for the modified Cauchy fit: α ∈ (0, 2], β ∈ (0, 10⁶].
pub const CAUCHY_ALPHA_MAX: f64 = 2.0;
pub const CAUCHY_BETA_MAX: f64 = 1e6;
const CAUCHY_LN_BETA_MIN: f64 = -14.0;

/// Fits the modified Cauchy law to a curve by sample-size weighted least
/// squares over the points with lag ≥ 1.
///
/// The search profiles out β: for every trial α the best `ln β` is found by
/// grid plus golden section, and α itself is located on a grid of step 0.005
/// over (0, 2] and then refined the same way.
pub fn fit_modified_cauchy<T: Real>(curve: &CorrelationCurve<T>) -> Result<CauchyFit<T>, StatsError> {
    let pts: Vec<_> = curve.points.iter().filter(|p| p.lag >= T::one() && p.n > 0).collect();
    if pts.len() < 3 {
        return Err(StatsError::Underdetermined {
            needed: 3,
            got: pts.len(),
            what: "curve points with lag >= 1",
        });
    }
    let ln_t: Vec<T> = pts.iter().map(|p| p.lag.ln()).collect();
    let ys: Vec<T> = pts.iter().map(|p| p.probability).collect();
    let ws: Vec<T> = pts.iter().map(|p| T::from_count(p.n)).collect();
    let sw = ws.iter().fold(T::zero(), |a, &w| a + w);

    let sse = |alpha: T, ln_beta: T| -> T {
        let beta = ln_beta.exp();
        ln_t.iter().zip(&ys).zip(&ws).fold(T::zero(), |acc, ((&lt, &y), &w)| {
            let r = y - beta / (beta + (alpha * lt).exp());
            acc + w * r * r
        })
    };
    let ln_beta_lo = T::lit(CAUCHY_LN_BETA_MIN);
    let ln_beta_hi = T::lit(CAUCHY_BETA_MAX).ln();
    let beta_steps = 140u64;
    let beta_step = (ln_beta_hi - ln_beta_lo) / T::from_count(beta_steps);
    let best_ln_beta = |alpha: T| -> (T, T) {
        let mut best = (0u64, T::infinity());
        for k in 0..=beta_steps {
            let e = sse(alpha, ln_beta_lo + beta_step * T::from_count(k));
            if e < best.1 {
                best = (k, e);
            }
        }
        let lo = ln_beta_lo + beta_step * T::from_count(best.0.saturating_sub(1));
        let hi = ln_beta_lo + beta_step * T::from_count((best.0 + 1).min(beta_steps));
        golden_min(lo, hi, T::lit(REFINE_TOL * 1e-3), REFINE_MAX_ITER, |lb| sse(alpha, lb))
    };

    let alpha_steps = 400u64;
    let alpha_step = T::lit(CAUCHY_ALPHA_MAX) / T::from_count(alpha_steps);
    let mut best = (1u64, T::infinity());
    for k in 1..=alpha_steps {
        let (_, e) = best_ln_beta(alpha_step * T::from_count(k));
        if e < best.1 {
            best = (k, e);
        }
    }
    let lo = alpha_step * T::from_count(best.0 - 1) + T::lit(1e-9);
    let hi = alpha_step * T::from_count((best.0 + 1).min(alpha_steps));
    let (mut alpha, mut err) = golden_min(lo, hi, T::lit(REFINE_TOL * 1e-3), REFINE_MAX_ITER, |a| best_ln_beta(a).1);
    if best.1 < err {
        alpha = alpha_step * T::from_count(best.0);
        err = best.1;
    }
    let (ln_beta, _) = best_ln_beta(alpha);
    let beta = ln_beta.exp();

    let mut jtj = [[T::zero(); 2]; 2];
    for (&lt, &w) in ln_t.iter().zip(&ws) {
        let g = (alpha * lt).exp();
        let den = (beta + g) * (beta + g);
        let j = [-beta * g * lt / den, g / den];
        for a in 0..2 {
            for b in 0..2 {
                jtj[a][b] = jtj[a][b] + w * j[a] * j[b];
            }
        }
    }
    let dof = pts.len() - 2;
    let std_error = match invert(jtj) {
        Some(cov) if dof > 0 => {
            let s2 = err / T::from_count(dof as u64);
            CauchyStdError {
                alpha: (cov[0][0] * s2).abs().sqrt(),
                beta: (cov[1][1] * s2).abs().sqrt(),
            }
        }
        _ => CauchyStdError {
            alpha: T::infinity(),
            beta: T::infinity(),
        },
    };

    Ok(CauchyFit {
        alpha,
        beta,
        t_half: laws::half_life(alpha, beta),
        residual: (err / sw).sqrt(),
        std_error,
        points: pts.len(),
    })
}

/// Two-observer visibility by `log2 d` bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct CrossCorrelation<T> {
    /// `lag` holds the bucket index `k` for `d ∈ [2^k, 2^(k+1))`.
    pub curve: CorrelationCurve<T>,
    /// Model visibility averaged over the sources in each bucket.
    pub expected: Vec<T>,
    pub n_valid: u64,
    pub aligned_windows: usize,
}

impl<T: Real> CrossCorrelation<T> {
    /// TSV rows `x value sigma n model`.
    pub fn write_tsv<W: Write>(&self, out: W) -> io::Result<()> {
        self.curve.write_tsv_with("model", &self.expected, out)
    }
}

/// Fraction of observer-A sources, bucketed by their packet count `d`, that
/// observer B also saw in the aligned window. Windows are aligned by index;
/// several B entries with the same index are merged.
pub fn cross_correlation<T: Real>(
    observer_a: &[(u64, BTreeMap<Addr, u64>)],
    observer_b: &[(u64, SourceSet)],
    n_valid: u64,
) -> Result<CrossCorrelation<T>, StatsError> {
    if n_valid < 4 {
        return Err(StatsError::WindowTooSmall(n_valid));
    }
    let mut b_by_window: HashMap<u64, SourceSet> = HashMap::new();
    for (w, set) in observer_b {
        b_by_window
            .entry(*w)
            .and_modify(|s| *s = s.union(set))
            .or_insert_with(|| set.clone());
    }
    // bucket -> (trials, hits, summed model probability)
    let mut buckets: BTreeMap<u32, (u64, u64, T)> = BTreeMap::new();
    let mut aligned = 0;
    for (w, sources) in observer_a {
        let Some(seen) = b_by_window.get(w) else { continue };
        aligned += 1;
        for (&src, &d) in sources {
            if d == 0 {
                continue;
            }
            let e = buckets.entry(63 - d.leading_zeros()).or_insert((0, 0, T::zero()));
            e.0 += 1;
            e.1 += seen.contains(src) as u64;
            e.2 = e.2 + laws::visibility::<T>(d, n_valid);
        }
    }
    if aligned == 0 {
        return Err(StatsError::NoAlignedWindows);
    }
    let mut points = Vec::with_capacity(buckets.len());
    let mut expected = Vec::with_capacity(buckets.len());
    for (k, (n, hits, model)) in buckets {
        points.push(CorrelationPoint {
            lag: T::from_count(k as u64),
            probability: T::from_count(hits) / T::from_count(n),
            n,
        });
        expected.push(model / T::from_count(n));
    }
    Ok(CrossCorrelation {
        curve: CorrelationCurve::new(points)?,
        expected,
        n_valid,
        aligned_windows: aligned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn histogram_tallies() {
        let h = histogram([1, 1, 2]).unwrap();
        assert_eq!(h.count(1), 2);
        assert_eq!(h.count(2), 1);
        assert_eq!(h.total(), 3);
        let h = histogram([5]).unwrap();
        assert_eq!(h.sigma(5), 1.0);
    }

    #[test]
    fn histogram_errors() {
        assert_eq!(histogram(std::iter::empty()), Err(StatsError::EmptyHistogram));
        assert_eq!(histogram([0]), Err(StatsError::ZeroDegree));
    }

    #[test]
    fn large_degrees_are_log_binned() {
        let h = histogram([1, EXACT_DEGREE_LIMIT, EXACT_DEGREE_LIMIT + 1, 3 << 20]).unwrap();
        assert_eq!(h.distinct(), 4);
        let pts = h.points::<f64>();
        assert_eq!(pts[2].width, 1 << 19);
        assert_eq!(pts[3].width, 1 << 21);
        assert_eq!(h.total(), 4);
    }

    #[test]
    fn histogram_tsv_layout() {
        let h = histogram([1, 1, 2, 4]).unwrap();
        let mut out = Vec::new();
        h.write_tsv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text, "x\tvalue\tsigma\tn\n1\t0.5\t0.3535533905932738\t2\n2\t0.25\t0.25\t1\n4\t0.25\t0.25\t1\n");
    }

    #[test]
    fn zm_fit_needs_three_degrees() {
        let h = histogram([1, 1, 2]).unwrap();
        assert!(matches!(
            fit_zipf_mandelbrot::<f64>(&h),
            Err(StatsError::Underdetermined { needed: 3, got: 2, .. })
        ));
    }

    /// Histogram with counts proportional to the exact law; the generate-
    /// from-model oracle.
    fn model_histogram(delta: f64, lambda: f64, d_max: u64, total: f64) -> DegreeHistogram {
        let mut h = DegreeHistogram::default();
        for d in 1..=d_max {
            let c = (total * (d as f64 + delta).powf(-lambda)).round() as u64;
            h.add_count(d, c).unwrap();
        }
        h
    }

    #[test]
    fn zm_fit_recovers_generating_law() {
        let h = model_histogram(0.0, 2.0, 10_000, 1e12);
        let fit = fit_zipf_mandelbrot::<f64>(&h).unwrap();
        assert!((fit.lambda - 2.0).abs() < 0.05, "{fit:?}");
        assert!(fit.delta.abs() < 0.1, "{fit:?}");

        let h = model_histogram(1.5, 1.7, 5_000, 1e12);
        let fit = fit_zipf_mandelbrot::<f64>(&h).unwrap();
        assert!((fit.lambda - 1.7).abs() < 0.01, "{fit:?}");
        assert!((fit.delta - 1.5).abs() < 0.02, "{fit:?}");
        assert!(fit.residual < 1e-3);
    }

    #[test]
    fn zm_fit_runs_in_f32() {
        let h = model_histogram(1.0, 2.0, 2_000, 1e9);
        let fit = fit_zipf_mandelbrot::<f32>(&h).unwrap();
        assert!((fit.lambda - 2.0).abs() < 0.05, "{fit:?}");
        assert!((fit.delta - 1.0).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn zm_fit_is_deterministic() {
        let h = model_histogram(0.3, 2.4, 3_000, 1e8);
        let a = fit_zipf_mandelbrot::<f64>(&h).unwrap();
        let b = fit_zipf_mandelbrot::<f64>(&h).unwrap();
        assert_eq!(a.delta.to_bits(), b.delta.to_bits());
        assert_eq!(a.lambda.to_bits(), b.lambda.to_bits());
    }

    fn ladder(c: f64, g: f64) -> Vec<(u64, f64)> {
        (17..=27).map(|k| (1u64 << k, c * ((1u64 << k) as f64).powf(g))).collect()
    }

    #[test]
    fn scaling_fits_are_exact_on_power_laws() {
        for (c, g) in [(5.0, 0.2), (2.0, 0.5), (0.03, 1.0)] {
            let fit = fit_window_scaling(Quantity::UniqueSources, &ladder(c, g)).unwrap();
            assert!(((fit.gamma - g) / g).abs() < 1e-6, "{fit:?}");
            assert!(((fit.coefficient - c) / c).abs() < 1e-6, "{fit:?}");
            assert!(fit.residual < 1e-9);
            assert!(!fit.clamped);
        }
    }

    #[test]
    fn scaling_slope_is_clamped_and_flagged() {
        let fit = fit_window_scaling(Quantity::MaxLinkPackets, &ladder(0.5, 1.3)).unwrap();
        assert_eq!(fit.gamma, 1.0);
        assert!(fit.clamped);
        assert!((fit.raw_gamma - 1.3).abs() < 1e-9);
    }

    #[test]
    fn scaling_rejects_degenerate_inputs() {
        let same = [(1024, 3.0), (1024, 4.0), (1024, 5.0)];
        assert!(matches!(
            fit_window_scaling(Quantity::UniqueSources, &same),
            Err(StatsError::DegenerateSpread(_))
        ));
        let narrow = [(1024, 3.0), (1500, 4.0), (2048, 5.0)];
        assert!(matches!(
            fit_window_scaling(Quantity::UniqueSources, &narrow),
            Err(StatsError::DegenerateSpread(_))
        ));
        let two = [(1024, 3.0), (8192, 4.0)];
        assert!(matches!(
            fit_window_scaling(Quantity::UniqueSources, &two),
            Err(StatsError::Underdetermined { .. })
        ));
        let zero = [(1024, 0.0), (4096, 4.0), (8192, 5.0)];
        assert!(matches!(
            fit_window_scaling(Quantity::UniqueSources, &zero),
            Err(StatsError::NonPositive { .. })
        ));
    }

    fn sets(v: &[&[Addr]]) -> Vec<SourceSet> {
        v.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn clustered_sigma_by_hand() {
        let w = sets(&[&[1, 2], &[1], &[1, 2]]);
        let sc = self_correlation::<f64>(&w, 1).unwrap();
        assert_eq!(sc.curve.points()[1].probability, 0.75);
        let s = clustered_sigma(&w, &sc);
        assert_eq!(s[0], 0.0);
        // residuals +-0.375 for the two sources, two reference windows
        assert!((s[1] - (2.0 * 0.375_f64 * 0.375).sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn self_correlation_perfect_persistence() {
        let w = sets(&[&[1, 2, 3][..]; 5]);
        let c = self_correlation::<f64>(&w, 4).unwrap();
        assert!(c.curve.points().iter().all(|p| p.probability == 1.0));
        assert_eq!(c.curve.points().len(), 5);
    }

    #[test]
    fn self_correlation_zero_persistence() {
        let w = sets(&[&[1, 2], &[3, 4], &[5, 6], &[7]]);
        let c = self_correlation::<f64>(&w, 3).unwrap();
        let p = c.curve.points();
        assert_eq!(p[0].probability, 1.0);
        assert!(p[1..].iter().all(|p| p.probability == 0.0));
    }

    #[test]
    fn self_correlation_mean_of_ratios() {
        let w = sets(&[&[1, 2], &[1, 3, 4, 5], &[3]]);
        let c = self_correlation::<f64>(&w, 1).unwrap();
        // window 0: 1/2, window 1: 1/4
        assert_eq!(c.curve.points()[1].probability, 0.375);
        assert_eq!(c.curve.points()[1].n, 6);
    }

    #[test]
    fn self_correlation_skips_empty_windows() {
        let w = sets(&[&[1], &[], &[1]]);
        let c = self_correlation::<f64>(&w, 2).unwrap();
        assert_eq!(c.skipped_windows, vec![1]);
        assert_eq!(c.curve.points()[2].probability, 1.0);
        assert_eq!(self_correlation::<f64>(&sets(&[&[], &[]]), 1), Err(StatsError::AllWindowsSkipped));
        assert!(self_correlation::<f64>(&sets(&[&[1]]), 0).is_err());
        assert!(self_correlation::<f64>(&sets(&[&[1], &[1]]), 2).is_err());
    }

    fn exact_curve(alpha: f64, beta: f64, lags: u64) -> CorrelationCurve<f64> {
        CorrelationCurve::new(
            (0..=lags)
                .map(|t| CorrelationPoint {
                    lag: t as f64,
                    probability: laws::modified_cauchy(t as f64, alpha, beta),
                    n: 1000,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cauchy_fit_recovers_exact_curve() {
        let fit = fit_modified_cauchy(&exact_curve(1.0, 5.0, 32)).unwrap();
        assert!((fit.alpha - 1.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.beta - 5.0).abs() < 1e-4, "{fit:?}");
        assert!((fit.t_half - 5.0).abs() < 1e-3);
        let fit = fit_modified_cauchy(&exact_curve(0.8, 10.0, 32)).unwrap();
        assert!((fit.alpha - 0.8).abs() < 1e-4, "{fit:?}");
        assert!((fit.beta - 10.0).abs() < 1e-4, "{fit:?}");
    }

    #[test]
    fn cauchy_fit_underdetermined() {
        assert!(matches!(
            fit_modified_cauchy(&exact_curve(1.0, 5.0, 2)),
            Err(StatsError::Underdetermined { .. })
        ));
    }

    #[test]
    fn cauchy_fit_json_recomputes_t_half() {
        let fit = fit_modified_cauchy(&exact_curve(0.5, 3.0, 20)).unwrap();
        let mut json: serde_json::Value = serde_json::to_value(fit).unwrap();
        json["t_half"] = serde_json::json!(-1.0);
        let back: CauchyFit<f64> = serde_json::from_value(json).unwrap();
        assert_eq!(back.t_half, fit.t_half);
        assert_eq!(back, fit);
    }

    #[test]
    fn curve_validation() {
        let bad = vec![
            CorrelationPoint { lag: 1.0, probability: 0.5, n: 1 },
            CorrelationPoint { lag: 1.0, probability: 0.4, n: 1 },
        ];
        assert!(CorrelationCurve::new(bad).is_err());
        let bad = vec![CorrelationPoint { lag: 1.0, probability: 1.5, n: 1 }];
        assert!(CorrelationCurve::new(bad).is_err());
    }

    #[test]
    fn cross_correlation_buckets() {
        let a = vec![
            (0u64, BTreeMap::from([(1, 1), (2, 2), (3, 3), (4, 40)])),
            (1u64, BTreeMap::from([(1, 5)])),
        ];
        let b = vec![(0u64, [2, 4].into_iter().collect::<SourceSet>())];
        let cc = cross_correlation::<f64>(&a, &b, 1 << 10).unwrap();
        let p = cc.curve.points();
        assert_eq!(cc.aligned_windows, 1);
        assert_eq!(p.len(), 3);
        assert_eq!((p[0].lag, p[0].probability, p[0].n), (0.0, 0.0, 1));
        assert_eq!((p[1].lag, p[1].probability, p[1].n), (1.0, 0.5, 2));
        assert_eq!((p[2].lag, p[2].probability), (5.0, 1.0));
        assert_eq!(cc.expected[0], 0.0);
        assert_eq!(cc.expected[2], 1.0);
        assert_eq!(
            cross_correlation::<f64>(&a, &[(9, SourceSet::default())], 1 << 10),
            Err(StatsError::NoAlignedWindows)
        );
    }

    proptest! {
        #[test]
        fn histogram_conserves_total(values in prop::collection::vec(1u64..50, 1..300)) {
            let h = histogram(values.iter().copied()).unwrap();
            prop_assert_eq!(h.total(), values.len() as u64);
            prop_assert_eq!(h.exact_bins().values().sum::<u64>(), values.len() as u64);
        }

        #[test]
        fn self_correlation_bounds(raw in prop::collection::vec(prop::collection::vec(0u128..20, 0..15), 2..10)) {
            let windows: Vec<SourceSet> = raw.iter().map(|v| v.iter().copied().collect()).collect();
            if let Ok(c) = self_correlation::<f64>(&windows, windows.len() - 1) {
                prop_assert_eq!(c.curve.points()[0].probability, 1.0);
                for p in c.curve.points() {
                    prop_assert!((0.0..=1.0).contains(&p.probability));
                }
            }
        }

        #[test]
        fn source_set_intersection(a in prop::collection::vec(0u128..30, 0..30), b in prop::collection::vec(0u128..30, 0..30)) {
            let (sa, sb): (SourceSet, SourceSet) = (a.iter().copied().collect(), b.iter().copied().collect());
            let brute = sa.as_slice().iter().filter(|x| sb.contains(**x)).count();
            prop_assert_eq!(sa.intersection_len(&sb), brute);
        }
    }
}
