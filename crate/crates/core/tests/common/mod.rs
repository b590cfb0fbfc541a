//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use netobs_core::ingest::{Addr, PacketRecord, Window};
use netobs_core::NetworkAggregates;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A window of `n` packets whose endpoints are drawn from `0..space`, with
/// a skew towards small identifiers so that repeated links are common.
pub fn random_window<R: Rng>(rng: &mut R, index: u64, n: usize, space: u64) -> Window {
    let pick = |rng: &mut R| -> Addr {
        let u: f64 = rng.random();
        ((u * u * u) * space as f64) as Addr % space as Addr
    };
    let records: Vec<PacketRecord> = (0..n as u64)
        .map(|t| {
            let src = pick(rng);
            let dst = pick(rng);
            PacketRecord::new(index * 1_000_000 + t, src, dst)
        })
        .collect();
    Window {
        index,
        start_us: records.first().map_or(0, |r| r.timestamp),
        end_us: records.last().map_or(0, |r| r.timestamp),
        records,
    }
}

/// Same as [`random_window`] but over the full 128-bit identifier space.
pub fn random_wide_window<R: Rng>(rng: &mut R, index: u64, n: usize) -> Window {
    let hubs: Vec<Addr> = (0..64).map(|_| rng.random()).collect();
    let records = (0..n as u64)
        .map(|t| {
            let src = if rng.random_bool(0.5) { hubs[rng.random_range(0..hubs.len())] } else { rng.random() };
            let dst = hubs[rng.random_range(0..hubs.len())];
            PacketRecord::new(t, src, dst)
        })
        .collect();
    Window {
        index,
        start_us: 0,
        end_us: n as u64,
        records,
    }
}

/// Dense `space × space` count matrix of a window.
pub struct Dense {
    pub space: usize,
    pub counts: Vec<u64>,
}

impl Dense {
    pub fn from_window(w: &Window, space: usize) -> Self {
        let mut counts = vec![0u64; space * space];
        for r in &w.records {
            counts[r.src as usize * space + r.dst as usize] += 1;
        }
        Self { space, counts }
    }

    pub fn at(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.space + j]
    }

    /// Row sums, row nonzeros, column sums, column nonzeros.
    pub fn degrees(&self) -> (Vec<u64>, Vec<u64>, Vec<u64>, Vec<u64>) {
        let n = self.space;
        let mut rs = vec![0; n];
        let mut rn = vec![0; n];
        let mut cs = vec![0; n];
        let mut cn = vec![0; n];
        for i in 0..n {
            for j in 0..n {
                let a = self.at(i, j);
                rs[i] += a;
                cs[j] += a;
                rn[i] += (a > 0) as u64;
                cn[j] += (a > 0) as u64;
            }
        }
        (rs, rn, cs, cn)
    }

    pub fn aggregates(&self) -> NetworkAggregates {
        let (rs, rn, cs, cn) = self.degrees();
        let max = |v: &[u64]| v.iter().copied().max().unwrap_or(0);
        let nonzero = |v: &[u64]| v.iter().filter(|&&x| x > 0).count() as u64;
        NetworkAggregates {
            valid_packets: self.counts.iter().sum(),
            unique_links: nonzero(&self.counts),
            max_link_packets: max(&self.counts),
            unique_sources: nonzero(&rs),
            max_source_packets: max(&rs),
            max_source_fanout: max(&rn),
            unique_destinations: nonzero(&cs),
            max_dest_packets: max(&cs),
            max_dest_fanin: max(&cn),
        }
    }
}

/// Ordinary least-squares slope and intercept of `y` on `x`.
pub fn ols(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}
