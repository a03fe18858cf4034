//! Line-oriented posterior archive.
//!
//! Draws stream to disk as the sampler produces them, so posterior storage
//! never scales with `n`. The layout is:
//!
//! ```text
//! flexcausal-forest v1 tau trees=<K> draws=<D> p=<Ptau>
//! standardize mean=<m> sd=<s>
//! mu trees=<M> p=<Pmu>                  (only when the mu forest is saved)
//! d<i>:sigma=<noise sd, original outcome units>
//! d<i>:stau=<comma-separated split probabilities, tau forest>
//! d<i>:smu=<comma-separated split probabilities, mu forest>
//! <K tau tree lines>
//! <M mu tree lines>                     (only when the mu forest is saved)
//! ...                                   (repeated per draw)
//! ```
//!
//! Tree lines use the forest text grammar (`n<idx>:v<var>:c<cut>` /
//! `:s<hex>` internals, `l<idx>:m<mean>` leaves); floating-point values are
//! written with the shortest round-trip decimal form, so a parse/serialize
//! cycle is bit-exact. Files may optionally be gzip-compressed; the reader
//! detects the magic bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;

use crate::trees::{parse_tree, serialize_tree, ForestHeader, ForestTag, ParseError, RegressionTree};

use super::{FitState, SamplerError};

/// Archive-level header: the tau forest shape, the outcome
/// standardization constants, and the optional mu forest shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveHeader {
    pub tau_trees: usize,
    pub tau_p: usize,
    pub draws: usize,
    pub y_mean: f64,
    pub y_sd: f64,
    /// `(trees, p)` of the saved mu forest, when present.
    pub mu: Option<(usize, usize)>,
}

impl ArchiveHeader {
    fn header_lines(&self) -> Vec<String> {
        let tau = ForestHeader {
            tag: ForestTag::Tau,
            trees: self.tau_trees,
            draws: self.draws,
            p: self.tau_p,
        };
        let mut lines = vec![
            tau.to_line(),
            format!("standardize mean={} sd={}", self.y_mean, self.y_sd),
        ];
        if let Some((trees, p)) = self.mu {
            lines.push(format!("mu trees={trees} p={p}"));
        }
        lines
    }
}

enum Sink {
    Plain(BufWriter<File>),
    Gzip(GzEncoder<BufWriter<File>>),
}

impl Write for Sink {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        match self {
            Sink::Plain(w) => w.write(buf),
            Sink::Gzip(w) => w.write(buf),
        }
    }
    fn flush(&mut self) -> std::io::Result<()> {
        match self {
            Sink::Plain(w) => w.flush(),
            Sink::Gzip(w) => w.flush(),
        }
    }
}

/// Incremental archive writer used by the fit driver.
pub struct ArchiveWriter {
    sink: Sink,
    header: ArchiveHeader,
}

impl ArchiveWriter {
    pub fn create(path: &Path, header: &ArchiveHeader, gzip: bool) -> Result<Self, SamplerError> {
        let file = BufWriter::new(File::create(path)?);
        let mut sink = if gzip {
            Sink::Gzip(GzEncoder::new(file, flate2::Compression::default()))
        } else {
            Sink::Plain(file)
        };
        for line in header.header_lines() {
            writeln!(sink, "{line}")?;
        }
        Ok(ArchiveWriter {
            sink,
            header: header.clone(),
        })
    }

    /// Append one posterior draw from the live sampler state.
    pub fn write_draw(&mut self, index: usize, state: &FitState) -> Result<(), SamplerError> {
        writeln!(self.sink, "d{index}:sigma={}", state.sigma_original_units())?;
        writeln!(
            self.sink,
            "d{index}:stau={}",
            join_f64(&state.tau_forest.split_probs.s)
        )?;
        writeln!(
            self.sink,
            "d{index}:smu={}",
            join_f64(&state.mu_forest.split_probs.s)
        )?;
        for tree in &state.tau_forest.trees {
            writeln!(self.sink, "{}", serialize_tree(tree))?;
        }
        if self.header.mu.is_some() {
            for tree in &state.mu_forest.trees {
                writeln!(self.sink, "{}", serialize_tree(tree))?;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<(), SamplerError> {
        match self.sink {
            Sink::Plain(mut w) => w.flush()?,
            Sink::Gzip(enc) => {
                enc.finish()?.flush()?;
            }
        }
        Ok(())
    }
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_f64_list(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|t| t.parse().ok()).collect()
}

/// A completed archive on disk; reopen with [`PosteriorArchive::reader`]
/// to stream draws.
#[derive(Debug, Clone)]
pub struct PosteriorArchive {
    pub path: PathBuf,
    pub header: ArchiveHeader,
}

impl PosteriorArchive {
    pub fn open(path: &Path) -> Result<Self, SamplerError> {
        let mut reader = ArchiveReader::open_raw(path)?;
        Ok(PosteriorArchive {
            path: path.to_path_buf(),
            header: reader.take_header()?,
        })
    }

    pub fn reader(&self) -> Result<ArchiveReader, SamplerError> {
        let mut r = ArchiveReader::open_raw(&self.path)?;
        r.take_header()?;
        Ok(r)
    }
}

/// One posterior draw read back from an archive.
#[derive(Debug, Clone)]
pub struct DrawRecord {
    pub index: usize,
    /// Noise sd in original outcome units.
    pub sigma: f64,
    pub split_probs_tau: Vec<f64>,
    pub split_probs_mu: Vec<f64>,
    pub tau_trees: Vec<RegressionTree>,
    /// Present only when the archive saved the mu forest.
    pub mu_trees: Option<Vec<RegressionTree>>,
}

/// Streaming reader over archive draws.
pub struct ArchiveReader {
    lines: std::io::Lines<BufReader<Box<dyn Read>>>,
    header: Option<ArchiveHeader>,
    /// Look-ahead line buffered while probing for the optional mu header.
    pending: Option<String>,
    draw_index: usize,
}

fn parse_err(reason: impl Into<String>) -> SamplerError {
    SamplerError::Parse(ParseError {
        offset: 0,
        reason: reason.into(),
    })
}

impl ArchiveReader {
    fn open_raw(path: &Path) -> Result<Self, SamplerError> {
        let mut file = File::open(path)?;
        let mut magic = [0u8; 2];
        let got = file.read(&mut magic)?;
        drop(file);
        let file = File::open(path)?;
        let inner: Box<dyn Read> = if got == 2 && magic == [0x1f, 0x8b] {
            Box::new(GzDecoder::new(file))
        } else {
            Box::new(file)
        };
        Ok(ArchiveReader {
            lines: BufReader::new(inner).lines(),
            header: None,
            pending: None,
            draw_index: 0,
        })
    }

    fn next_line(&mut self) -> Result<Option<String>, SamplerError> {
        match self.lines.next() {
            None => Ok(None),
            Some(line) => Ok(Some(line?)),
        }
    }

    fn take_line(&mut self) -> Result<Option<String>, SamplerError> {
        if let Some(line) = self.pending.take() {
            return Ok(Some(line));
        }
        self.next_line()
    }

    fn take_header(&mut self) -> Result<ArchiveHeader, SamplerError> {
        let tau_line = self
            .next_line()?
            .ok_or_else(|| parse_err("empty archive"))?;
        let tau = ForestHeader::parse(&tau_line)?;
        if tau.tag != ForestTag::Tau {
            return Err(parse_err("archive must start with a tau forest header"));
        }
        let std_line = self
            .next_line()?
            .ok_or_else(|| parse_err("missing standardize line"))?;
        let (y_mean, y_sd) = parse_standardize(&std_line)?;
        // The mu line is optional; when absent the next line is a draw.
        let mut mu = None;
        let mut pending = None;
        if let Some(line) = self.next_line()? {
            if let Some(rest) = line.strip_prefix("mu trees=") {
                let (trees_s, p_s) = rest
                    .split_once(" p=")
                    .ok_or_else(|| parse_err("bad mu header line"))?;
                let trees = trees_s
                    .parse()
                    .map_err(|_| parse_err("bad mu tree count"))?;
                let p = p_s.parse().map_err(|_| parse_err("bad mu p"))?;
                mu = Some((trees, p));
            } else {
                pending = Some(line);
            }
        }
        let header = ArchiveHeader {
            tau_trees: tau.trees,
            tau_p: tau.p,
            draws: tau.draws,
            y_mean,
            y_sd,
            mu,
        };
        self.header = Some(header.clone());
        self.pending = pending;
        Ok(header)
    }

    pub fn header(&self) -> Option<&ArchiveHeader> {
        self.header.as_ref()
    }

    /// Read the next draw; `Ok(None)` at end of archive.
    pub fn next_draw(&mut self) -> Result<Option<DrawRecord>, SamplerError> {
        let header = self
            .header
            .clone()
            .ok_or_else(|| parse_err("header not read"))?;
        let sigma_line = match self.take_line()? {
            None => return Ok(None),
            Some(l) => l,
        };
        let index = self.draw_index;
        let prefix = format!("d{index}:sigma=");
        let sigma: f64 = sigma_line
            .strip_prefix(&prefix)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(format!("expected {prefix}<value>")))?;
        let stau_line = self
            .take_line()?
            .ok_or_else(|| parse_err("missing stau line"))?;
        let split_probs_tau = stau_line
            .strip_prefix(&format!("d{index}:stau="))
            .and_then(parse_f64_list)
            .ok_or_else(|| parse_err("bad stau line"))?;
        let smu_line = self
            .take_line()?
            .ok_or_else(|| parse_err("missing smu line"))?;
        let split_probs_mu = smu_line
            .strip_prefix(&format!("d{index}:smu="))
            .and_then(parse_f64_list)
            .ok_or_else(|| parse_err("bad smu line"))?;
        let mut tau_trees = Vec::with_capacity(header.tau_trees);
        for _ in 0..header.tau_trees {
            let line = self
                .take_line()?
                .ok_or_else(|| parse_err("truncated draw: missing tau tree"))?;
            tau_trees.push(parse_tree(&line)?);
        }
        let mu_trees = match header.mu {
            None => None,
            Some((m, _)) => {
                let mut trees = Vec::with_capacity(m);
                for _ in 0..m {
                    let line = self
                        .take_line()?
                        .ok_or_else(|| parse_err("truncated draw: missing mu tree"))?;
                    trees.push(parse_tree(&line)?);
                }
                Some(trees)
            }
        };
        self.draw_index += 1;
        Ok(Some(DrawRecord {
            index,
            sigma,
            split_probs_tau,
            split_probs_mu,
            tau_trees,
            mu_trees,
        }))
    }
}

fn parse_standardize(line: &str) -> Result<(f64, f64), SamplerError> {
    let rest = line
        .strip_prefix("standardize mean=")
        .ok_or_else(|| parse_err("bad standardize line"))?;
    let (mean_s, sd_s) = rest
        .split_once(" sd=")
        .ok_or_else(|| parse_err("bad standardize line"))?;
    let mean = mean_s
        .parse()
        .map_err(|_| parse_err("bad standardize mean"))?;
    let sd: f64 = sd_s.parse().map_err(|_| parse_err("bad standardize sd"))?;
    if !(sd > 0.0) {
        return Err(parse_err("standardize sd must be positive"));
    }
    Ok((mean, sd))
}
