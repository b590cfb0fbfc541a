//! Hypersparse traffic matrices and the aggregate network quantities
//! computed from them.
//!
//! A [`TrafficMatrix`] stores only its nonzero `(src, dst) -> count` entries,
//! sorted by `(src, dst)`, so memory is proportional to the number of
//! distinct links regardless of how wide the address space is. Every
//! reduction here (row/column sums, nonzero counts, maxima) is invariant
//! under relabelling of rows and columns, which is what lets them run on
//! anonymized data unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ingest::{Addr, Window};

#[derive(Debug, thiserror::Error)]
pub enum MatrixError {
    #[error("zero count stored for ({src}, {dst})")]
    ZeroCount { src: Addr, dst: Addr },
    #[error("duplicate entry ({src}, {dst})")]
    DuplicateEntry { src: Addr, dst: Addr },
    #[error("entry counts sum to {sum}, sidecar says n_valid = {n_valid}")]
    SumMismatch { sum: u64, n_valid: u64 },
    #[error("malformed matrix line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

/// Packet counts between sources and destinations for one window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficMatrix {
    entries: Vec<(Addr, Addr, u64)>,
    n_valid: u64,
    window_n_valid: u64,
    window_index: u64,
    time_span: (u64, u64),
}

/// Accumulates packets for a single matrix. Additions are buffered and
/// collapsed by one sort in [`MatrixBuilder::finish`].
#[derive(Debug, Default)]
pub struct MatrixBuilder {
    pending: Vec<(Addr, Addr, u64)>,
    total: u64,
}

impl MatrixBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            pending: Vec::with_capacity(n),
            total: 0,
        }
    }

    pub fn add(&mut self, src: Addr, dst: Addr) {
        self.add_count(src, dst, 1);
    }

    pub fn add_count(&mut self, src: Addr, dst: Addr, count: u64) {
        if count == 0 {
            return;
        }
        self.pending.push((src, dst, count));
        self.total += count;
    }

    pub fn finish(self, window_index: u64, time_span: (u64, u64)) -> TrafficMatrix {
        let mut pending = self.pending;
        pending.sort_unstable_by_key(|&(s, d, _)| (s, d));
        let mut entries: Vec<(Addr, Addr, u64)> = Vec::with_capacity(pending.len());
        for (s, d, c) in pending {
            match entries.last_mut() {
                Some(last) if last.0 == s && last.1 == d => last.2 += c,
                _ => entries.push((s, d, c)),
            }
        }
        entries.shrink_to_fit();
        TrafficMatrix {
            entries,
            n_valid: self.total,
            window_n_valid: self.total,
            window_index,
            time_span,
        }
    }
}

/// Builds the traffic matrix of a window.
pub fn build_matrix(window: &Window) -> TrafficMatrix {
    let mut pairs: Vec<(Addr, Addr)> = window.records.iter().map(|r| (r.src, r.dst)).collect();
    pairs.sort_unstable();
    let entries: Vec<_> = pairs
        .chunk_by(|a, b| a == b)
        .map(|run| (run[0].0, run[0].1, run.len() as u64))
        .collect();
    let n = pairs.len() as u64;
    TrafficMatrix {
        entries,
        n_valid: n,
        window_n_valid: n,
        window_index: window.index,
        time_span: (window.start_us, window.end_us),
    }
}

impl TrafficMatrix {
    /// Assembles a matrix from explicit entries, validating the stored
    /// invariants. `window_n_valid` defaults to the entry sum.
    pub fn from_entries(
        entries: impl IntoIterator<Item = (Addr, Addr, u64)>,
        window_index: u64,
        time_span: (u64, u64),
        window_n_valid: Option<u64>,
    ) -> Result<Self, MatrixError> {
        let mut entries: Vec<_> = entries.into_iter().collect();
        entries.sort_unstable_by_key(|&(s, d, _)| (s, d));
        let mut sum = 0u64;
        for (i, &(src, dst, c)) in entries.iter().enumerate() {
            if c == 0 {
                return Err(MatrixError::ZeroCount { src, dst });
            }
            if i > 0 && entries[i - 1].0 == src && entries[i - 1].1 == dst {
                return Err(MatrixError::DuplicateEntry { src, dst });
            }
            sum += c;
        }
        Ok(Self {
            entries,
            n_valid: sum,
            window_n_valid: window_n_valid.unwrap_or(sum),
            window_index,
            time_span,
        })
    }

    /// Sorted `(src, dst, count)` triples.
    pub fn entries(&self) -> &[(Addr, Addr, u64)] {
        &self.entries
    }

    /// Total packets stored in this matrix.
    pub fn n_valid(&self) -> u64 {
        self.n_valid
    }

    /// N_V of the window this matrix (or its parent, for subranges) came from.
    pub fn window_n_valid(&self) -> u64 {
        self.window_n_valid
    }

    pub fn window_index(&self) -> u64 {
        self.window_index
    }

    pub fn time_span(&self) -> (u64, u64) {
        self.time_span
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, src: Addr, dst: Addr) -> u64 {
        self.entries
            .binary_search_by_key(&(src, dst), |&(s, d, _)| (s, d))
            .map_or(0, |i| self.entries[i].2)
    }

    /// Entrywise sum of two matrices, e.g. consecutive windows joined into one
    /// larger window. Keeps `self`'s index and spans both time ranges.
    pub fn merge(&self, other: &TrafficMatrix) -> TrafficMatrix {
        let (a, b) = (&self.entries, &other.entries);
        let mut entries = Vec::with_capacity(a.len() + b.len());
        let (mut i, mut j) = (0, 0);
        while i < a.len() && j < b.len() {
            let (ka, kb) = ((a[i].0, a[i].1), (b[j].0, b[j].1));
            match ka.cmp(&kb) {
                std::cmp::Ordering::Less => {
                    entries.push(a[i]);
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    entries.push(b[j]);
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    entries.push((ka.0, ka.1, a[i].2 + b[j].2));
                    i += 1;
                    j += 1;
                }
            }
        }
        entries.extend_from_slice(&a[i..]);
        entries.extend_from_slice(&b[j..]);
        let n_valid = self.n_valid + other.n_valid;
        TrafficMatrix {
            entries,
            n_valid,
            window_n_valid: n_valid,
            window_index: self.window_index,
            time_span: (
                self.time_span.0.min(other.time_span.0),
                self.time_span.1.max(other.time_span.1),
            ),
        }
    }

    /// Rebuilds with every identifier passed through `relabel`, keeping counts.
    /// `relabel` must be injective.
    pub fn relabel(&self, mut relabel: impl FnMut(Addr) -> Addr) -> TrafficMatrix {
        let mut cache: HashMap<Addr, Addr> = HashMap::new();
        let mut map = |a: Addr| *cache.entry(a).or_insert_with(|| relabel(a));
        let mut entries: Vec<_> = self.entries.iter().map(|&(s, d, c)| (map(s), map(d), c)).collect();
        entries.sort_unstable_by_key(|&(s, d, _)| (s, d));
        TrafficMatrix { entries, ..*self }
    }

    pub(crate) fn retain(&self, keep: impl Fn(Addr, Addr) -> bool) -> TrafficMatrix {
        let entries: Vec<_> = self.entries.iter().copied().filter(|&(s, d, _)| keep(s, d)).collect();
        TrafficMatrix {
            n_valid: entries.iter().map(|e| e.2).sum(),
            entries,
            ..*self
        }
    }

    /// Writes the `src dst count` TSV body.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for &(s, d, c) in &self.entries {
            writeln!(out, "{s}\t{d}\t{c}")?;
        }
        Ok(())
    }

    pub fn sidecar(&self) -> MatrixSidecar {
        MatrixSidecar {
            n_valid: self.n_valid,
            window_n_valid: self.window_n_valid,
            window_index: self.window_index,
            time_span: [self.time_span.0, self.time_span.1],
        }
    }

    /// Reads a matrix back from its TSV body and JSON sidecar.
    pub fn read_tsv<R: BufRead>(tsv: R, sidecar: &MatrixSidecar) -> Result<Self, MatrixError> {
        let mut entries = Vec::new();
        for (i, line) in tsv.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split('\t');
            let mut next = |what: &str| -> Result<u128, MatrixError> {
                it.next()
                    .and_then(|f| u128::from_str(f.trim()).ok())
                    .ok_or_else(|| MatrixError::Malformed {
                        line: i + 1,
                        reason: format!("bad {what}"),
                    })
            };
            let (s, d, c) = (next("src")?, next("dst")?, next("count")?);
            let c = u64::try_from(c).map_err(|_| MatrixError::Malformed {
                line: i + 1,
                reason: "count exceeds 64 bits".into(),
            })?;
            entries.push((s, d, c));
        }
        let m = Self::from_entries(
            entries,
            sidecar.window_index,
            (sidecar.time_span[0], sidecar.time_span[1]),
            Some(sidecar.window_n_valid),
        )?;
        if m.n_valid != sidecar.n_valid {
            return Err(MatrixError::SumMismatch {
                sum: m.n_valid,
                n_valid: sidecar.n_valid,
            });
        }
        Ok(m)
    }
}

/// JSON metadata written next to a matrix TSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixSidecar {
    pub n_valid: u64,
    pub window_n_valid: u64,
    pub window_index: u64,
    pub time_span: [u64; 2],
}

/// Diagonal support of a subrange selector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RangeMask {
    members: BTreeSet<Addr>,
}

impl RangeMask {
    pub fn new(members: impl IntoIterator<Item = Addr>) -> Self {
        Self {
            members: members.into_iter().collect(),
        }
    }

    pub fn contains(&self, a: Addr) -> bool {
        self.members.contains(&a)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Addr> + '_ {
        self.members.iter().copied()
    }
}

impl FromIterator<Addr> for RangeMask {
    fn from_iter<I: IntoIterator<Item = Addr>>(iter: I) -> Self {
        Self::new(iter)
    }
}

/// Traffic with both endpoints inside the mask (`A_r A A_r`).
pub fn subrange_include(m: &TrafficMatrix, r: &RangeMask) -> TrafficMatrix {
    m.retain(|s, d| r.contains(s) && r.contains(d))
}

/// Everything except the masked subrange (`A - A_r A A_r`).
pub fn subrange_exclude(m: &TrafficMatrix, r: &RangeMask) -> TrafficMatrix {
    m.retain(|s, d| !(r.contains(s) && r.contains(d)))
}

/// The scalar network quantities of one traffic matrix.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkAggregates {
    pub valid_packets: u64,
    pub unique_links: u64,
    pub max_link_packets: u64,
    pub unique_sources: u64,
    pub max_source_packets: u64,
    pub max_source_fanout: u64,
    pub unique_destinations: u64,
    pub max_dest_packets: u64,
    pub max_dest_fanin: u64,
}

/// Names a field of [`NetworkAggregates`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    ValidPackets,
    UniqueLinks,
    MaxLinkPackets,
    UniqueSources,
    MaxSourcePackets,
    MaxSourceFanout,
    UniqueDestinations,
    MaxDestPackets,
    MaxDestFanin,
}

impl Quantity {
    pub const ALL: [Quantity; 9] = [
        Quantity::ValidPackets,
        Quantity::UniqueLinks,
        Quantity::MaxLinkPackets,
        Quantity::UniqueSources,
        Quantity::MaxSourcePackets,
        Quantity::MaxSourceFanout,
        Quantity::UniqueDestinations,
        Quantity::MaxDestPackets,
        Quantity::MaxDestFanin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::ValidPackets => "valid_packets",
            Quantity::UniqueLinks => "unique_links",
            Quantity::MaxLinkPackets => "max_link_packets",
            Quantity::UniqueSources => "unique_sources",
            Quantity::MaxSourcePackets => "max_source_packets",
            Quantity::MaxSourceFanout => "max_source_fanout",
            Quantity::UniqueDestinations => "unique_destinations",
            Quantity::MaxDestPackets => "max_dest_packets",
            Quantity::MaxDestFanin => "max_dest_fanin",
        }
    }
}

impl FromStr for Quantity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| format!("unknown quantity `{s}`"))
    }
}

impl NetworkAggregates {
    pub fn get(&self, q: Quantity) -> u64 {
        match q {
            Quantity::ValidPackets => self.valid_packets,
            Quantity::UniqueLinks => self.unique_links,
            Quantity::MaxLinkPackets => self.max_link_packets,
            Quantity::UniqueSources => self.unique_sources,
            Quantity::MaxSourcePackets => self.max_source_packets,
            Quantity::MaxSourceFanout => self.max_source_fanout,
            Quantity::UniqueDestinations => self.unique_destinations,
            Quantity::MaxDestPackets => self.max_dest_packets,
            Quantity::MaxDestFanin => self.max_dest_fanin,
        }
    }
}

/// Computes every aggregate in one pass over the sorted entries plus one
/// sort of the column entries.
pub fn aggregates(m: &TrafficMatrix) -> NetworkAggregates {
    let mut agg = NetworkAggregates {
        valid_packets: m.n_valid,
        unique_links: m.entries.len() as u64,
        ..Default::default()
    };
    let mut columns: Vec<(Addr, u64)> = Vec::with_capacity(m.entries.len());
    let mut row: Option<(Addr, u64, u64)> = None;
    let close_row = |agg: &mut NetworkAggregates, row: Option<(Addr, u64, u64)>| {
        if let Some((_, packets, fanout)) = row {
            agg.unique_sources += 1;
            agg.max_source_packets = agg.max_source_packets.max(packets);
            agg.max_source_fanout = agg.max_source_fanout.max(fanout);
        }
    };
    for &(s, d, c) in &m.entries {
        agg.max_link_packets = agg.max_link_packets.max(c);
        match &mut row {
            Some((src, packets, fanout)) if *src == s => {
                *packets += c;
                *fanout += 1;
            }
            _ => {
                close_row(&mut agg, row);
                row = Some((s, c, 1));
            }
        }
        columns.push((d, c));
    }
    close_row(&mut agg, row);
    columns.sort_unstable_by_key(|e| e.0);
    for col in columns.chunk_by(|a, b| a.0 == b.0) {
        agg.unique_destinations += 1;
        agg.max_dest_packets = agg.max_dest_packets.max(col.iter().map(|e| e.1).sum());
        agg.max_dest_fanin = agg.max_dest_fanin.max(col.len() as u64);
    }
    agg
}

/// Per-entity degree maps: row/column sums and nonzero counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DegreeVectors {
    pub source_packets: BTreeMap<Addr, u64>,
    pub source_fanout: BTreeMap<Addr, u64>,
    pub dest_packets: BTreeMap<Addr, u64>,
    pub dest_fanin: BTreeMap<Addr, u64>,
    pub link_packets: BTreeMap<(Addr, Addr), u64>,
}

/// The five distribution-bearing network quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegreeQuantity {
    SourcePackets,
    SourceFanout,
    LinkPackets,
    DestFanin,
    DestPackets,
}

impl DegreeQuantity {
    pub const ALL: [DegreeQuantity; 5] = [
        DegreeQuantity::SourcePackets,
        DegreeQuantity::SourceFanout,
        DegreeQuantity::LinkPackets,
        DegreeQuantity::DestFanin,
        DegreeQuantity::DestPackets,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegreeQuantity::SourcePackets => "source_packets",
            DegreeQuantity::SourceFanout => "source_fanout",
            DegreeQuantity::LinkPackets => "link_packets",
            DegreeQuantity::DestFanin => "dest_fanin",
            DegreeQuantity::DestPackets => "dest_packets",
        }
    }
}

impl FromStr for DegreeQuantity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        DegreeQuantity::ALL
            .into_iter()
            .find(|q| q.name() == s)
            .ok_or_else(|| format!("unknown degree quantity `{s}`"))
    }
}

impl DegreeVectors {
    /// Degree values of one quantity, in key order.
    pub fn values(&self, q: DegreeQuantity) -> Vec<u64> {
        match q {
            DegreeQuantity::SourcePackets => self.source_packets.values().copied().collect(),
            DegreeQuantity::SourceFanout => self.source_fanout.values().copied().collect(),
            DegreeQuantity::LinkPackets => self.link_packets.values().copied().collect(),
            DegreeQuantity::DestFanin => self.dest_fanin.values().copied().collect(),
            DegreeQuantity::DestPackets => self.dest_packets.values().copied().collect(),
        }
    }
}

/// Degree values of one quantity without building every degree map. Source
/// and link values come out in key order; destination values in no
/// particular order.
pub fn degree_values(m: &TrafficMatrix, q: DegreeQuantity) -> Vec<u64> {
    match q {
        DegreeQuantity::LinkPackets => m.entries.iter().map(|e| e.2).collect(),
        DegreeQuantity::SourcePackets | DegreeQuantity::SourceFanout => {
            let per_entry = |c: u64| if q == DegreeQuantity::SourcePackets { c } else { 1 };
            let mut out: Vec<u64> = Vec::new();
            let mut current = None;
            for &(s, _, c) in &m.entries {
                if current == Some(s) {
                    *out.last_mut().unwrap() += per_entry(c);
                } else {
                    out.push(per_entry(c));
                    current = Some(s);
                }
            }
            out
        }
        DegreeQuantity::DestPackets | DegreeQuantity::DestFanin => {
            let mut cols: HashMap<Addr, u64> = HashMap::new();
            for &(_, d, c) in &m.entries {
                *cols.entry(d).or_insert(0) += if q == DegreeQuantity::DestPackets { c } else { 1 };
            }
            cols.into_values().collect()
        }
    }
}

pub fn degree_vectors(m: &TrafficMatrix) -> DegreeVectors {
    let mut v = DegreeVectors::default();
    for &(s, d, c) in &m.entries {
        *v.source_packets.entry(s).or_insert(0) += c;
        *v.source_fanout.entry(s).or_insert(0) += 1;
        *v.dest_packets.entry(d).or_insert(0) += c;
        *v.dest_fanin.entry(d).or_insert(0) += 1;
        v.link_packets.insert((s, d), c);
    }
    v
}
