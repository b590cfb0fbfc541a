//! Batch drivers that chain ingest, windowing, matrix construction and the
//! statistics into the tables written by the command-line tool.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::anonymize::{AnonymizationKey, KeyedPermutation};
use crate::ingest::{window_stream, Addr, IngestError, PacketFilter, PacketRecord, StreamSummary, Window, WindowSpec};
use crate::matrix::{aggregates, build_matrix, degree_vectors, DegreeQuantity, NetworkAggregates, Quantity};
use crate::stats::{DegreeHistogram, SourceSet};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("no complete window of {n_valid} valid packets ({consumed} valid packets read)")]
    NoWindows { n_valid: usize, consumed: u64 },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: io::Error },
}

/// How records become windows.
#[derive(Debug, Clone)]
pub struct WindowOptions {
    pub spec: WindowSpec,
    pub filter: PacketFilter,
    /// Relabel identifiers with the keyed permutation before measuring.
    pub anonymize: Option<AnonymizationKey>,
}

impl WindowOptions {
    pub fn new(spec: WindowSpec) -> Self {
        Self {
            spec,
            filter: PacketFilter::accept_all(),
            anonymize: None,
        }
    }
}

/// Filters and windows a fallible record stream, handing each complete
/// window to `f` (already anonymized when a key is set). Stops at the first
/// record error.
pub fn for_each_window<I, F>(records: I, opts: &WindowOptions, mut f: F) -> Result<StreamSummary, PipelineError>
where
    I: IntoIterator<Item = Result<PacketRecord, IngestError>>,
    F: FnMut(Window),
{
    let perm = opts.anonymize.as_ref().map(KeyedPermutation::new);
    let mut error = None;
    let summary = {
        let valid = records
            .into_iter()
            .map_while(|r| r.map_err(|e| error = Some(e)).ok())
            .filter(|r| opts.filter.accepts(r));
        let mut windows = window_stream(valid, opts.spec);
        for mut w in windows.by_ref() {
            if let Some(p) = &perm {
                for r in &mut w.records {
                    r.src = p.permute(r.src);
                    r.dst = p.permute(r.dst);
                }
            }
            f(w);
        }
        windows.summary()
    };
    if let Some(e) = error {
        return Err(e.into());
    }
    if summary.windows == 0 {
        return Err(PipelineError::NoWindows {
            n_valid: opts.spec.n_valid(),
            consumed: summary.consumed,
        });
    }
    if summary.dropped > 0 {
        log::info!("dropped {} trailing packets of an incomplete window", summary.dropped);
    }
    Ok(summary)
}

/// Collects every complete window.
pub fn load_windows<I>(records: I, opts: &WindowOptions) -> Result<(Vec<Window>, StreamSummary), PipelineError>
where
    I: IntoIterator<Item = Result<PacketRecord, IngestError>>,
{
    let mut windows = Vec::new();
    let summary = for_each_window(records, opts, |w| windows.push(w))?;
    Ok((windows, summary))
}

/// Aggregates of one window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRow {
    pub window: u64,
    pub start_us: u64,
    pub end_us: u64,
    pub aggregates: NetworkAggregates,
}

/// Per-window aggregates plus degree histograms pooled over all windows.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub rows: Vec<WindowRow>,
    pub histograms: Vec<(DegreeQuantity, DegreeHistogram)>,
    pub summary: StreamSummary,
}

pub fn analyze<I>(records: I, opts: &WindowOptions) -> Result<Analysis, PipelineError>
where
    I: IntoIterator<Item = Result<PacketRecord, IngestError>>,
{
    let mut rows = Vec::new();
    let mut histograms: Vec<(DegreeQuantity, DegreeHistogram)> =
        DegreeQuantity::ALL.iter().map(|&q| (q, DegreeHistogram::default())).collect();
    let summary = for_each_window(records, opts, |w| {
        let m = build_matrix(&w);
        rows.push(WindowRow {
            window: w.index,
            start_us: w.start_us,
            end_us: w.end_us,
            aggregates: aggregates(&m),
        });
        let dv = degree_vectors(&m);
        for (q, h) in &mut histograms {
            for d in dv.values(*q) {
                h.add(d).expect("matrix degrees are positive");
            }
        }
    })?;
    Ok(Analysis {
        rows,
        histograms,
        summary,
    })
}

/// TSV with one row per window: `window start_us end_us` then every
/// aggregate in [`Quantity::ALL`] order.
pub fn write_aggregates_tsv<W: Write>(rows: &[WindowRow], mut out: W) -> io::Result<()> {
    write!(out, "window\tstart_us\tend_us")?;
    for q in Quantity::ALL {
        write!(out, "\t{}", q.name())?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{}\t{}\t{}", r.window, r.start_us, r.end_us)?;
        for q in Quantity::ALL {
            write!(out, "\t{}", r.aggregates.get(q))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

impl Analysis {
    /// Writes `aggregates.tsv` and one `hist_<quantity>.tsv` per degree
    /// quantity into `dir`; returns the paths written.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        let mut written = Vec::new();
        let path = dir.join("aggregates.tsv");
        write_file(&path, |out| write_aggregates_tsv(&self.rows, out))?;
        written.push(path);
        for (q, h) in &self.histograms {
            let path = dir.join(format!("hist_{}.tsv", q.name()));
            write_file(&path, |out| h.write_tsv(out))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Creates `path` and writes it through a buffered writer.
pub fn write_file<F>(path: &Path, f: F) -> Result<(), PipelineError>
where
    F: FnOnce(&mut BufWriter<File>) -> io::Result<()>,
{
    let wrap = |source| PipelineError::Write {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(wrap)?);
    f(&mut out).map_err(wrap)?;
    out.flush().map_err(wrap)
}

/// Distinct sources of each window.
pub fn source_sets(windows: &[Window]) -> Vec<SourceSet> {
    windows.iter().map(|w| w.records.iter().map(|r| r.src).collect()).collect()
}

/// Packets per source in each window, keyed by window index.
pub fn source_counts(windows: &[Window]) -> Vec<(u64, BTreeMap<Addr, u64>)> {
    windows
        .iter()
        .map(|w| {
            let mut counts = BTreeMap::new();
            for r in &w.records {
                *counts.entry(r.src).or_insert(0) += 1;
            }
            (w.index, counts)
        })
        .collect()
}

/// Assigns each second-observer record to the last observer-A window that
/// started at or before its timestamp and returns the per-window source
/// sets. Records earlier than the first A window are ignored. `b` must be
/// in time order.
pub fn align_to_windows<I>(
    windows: &[Window],
    b: I,
    anonymize: Option<&AnonymizationKey>,
) -> Result<Vec<(u64, SourceSet)>, PipelineError>
where
    I: IntoIterator<Item = Result<PacketRecord, IngestError>>,
{
    let perm = anonymize.map(KeyedPermutation::new);
    let starts: Vec<u64> = windows.iter().map(|w| w.start_us).collect();
    let mut per_window: Vec<Vec<Addr>> = vec![Vec::new(); windows.len()];
    for r in b {
        let r = r?;
        let i = starts.partition_point(|&s| s <= r.timestamp);
        if i == 0 {
            continue;
        }
        let src = perm.as_ref().map_or(r.src, |p| p.permute(r.src));
        per_window[i - 1].push(src);
    }
    Ok(windows
        .iter()
        .zip(per_window)
        .map(|(w, srcs)| (w.index, srcs.into_iter().collect()))
        .collect())
}
