//! CSV outputs of a run.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::backbone::BLOCKS;
use crate::error::{Error, Result};
use crate::meta::EvalReport;
use crate::routing::{Criterion, LayerMask, LayerReuse, RoutingMask};

pub const METRICS_HEADER: &str = "iter,task,loss_pre,loss_post,qloss,qacc,sel_l1,sel_l2,sel_l3,sel_l4,jac_l1,jac_l2,jac_l3,jac_l4,ms";
pub const MASKS_HEADER: &str = "iter,task,layer,channels,selected";
pub const VAL_HEADER: &str = "iter,episodes,mean,std,ci95";
pub const STATS_HEADER: &str = "layer,channels,selection_fraction,mean_jaccard,ever_selected";
pub const REUSE_HEADER: &str = "step,layer,jaccard,ever_selected";

/// One task of one meta-iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub iteration: usize,
    pub task: usize,
    pub support_loss_pre: f64,
    pub support_loss_post: f64,
    pub query_loss: f64,
    pub query_accuracy: f64,
    /// `|Ω_l|` per conv layer.
    pub selected: [usize; BLOCKS],
    /// Jaccard similarity with the previous task's mask; NaN for the first task.
    pub jaccard: [f64; BLOCKS],
    pub ms: u64,
}

impl EpisodeRecord {
    pub fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{}",
            self.iteration, self.task, self.support_loss_pre, self.support_loss_post, self.query_loss, self.query_accuracy
        );
        for v in self.selected {
            let _ = write!(s, ",{v}");
        }
        for v in self.jaccard {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{}", self.ms);
        s
    }
}

/// Buffered line writer that reports failures against its path.
pub struct CsvWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            inner: BufWriter::new(file),
        };
        w.line(header)?;
        Ok(w)
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.inner, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn mask_lines(iteration: usize, task: usize, mask: &RoutingMask) -> Vec<String> {
    mask.layers
        .iter()
        .map(|l| {
            let ids: Vec<String> = l.selected.iter().map(|j| j.to_string()).collect();
            format!("{iteration},{task},{},{},{}", l.layer, l.channels, ids.join(" "))
        })
        .collect()
}

pub fn val_line(iteration: usize, r: &EvalReport) -> String {
    format!("{iteration},{},{},{},{}", r.episodes, r.mean, r.std, r.ci95)
}

/// Reads a `masks.csv` back into masks ordered as written.
pub fn read_masks(path: &Path) -> Result<Vec<RoutingMask>> {
    let bad = |line: usize, why: &str| Error::Ingestion {
        path: path.to_path_buf(),
        reason: format!("line {line}: {why}"),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h == MASKS_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(bad(1, "missing masks header")),
    }
    let mut masks: Vec<RoutingMask> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let n = n + 2;
        let f: Vec<&str> = line.splitn(5, ',').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "not an integer"));
        let key = (num(f[0])?, num(f[1])?);
        let selected = f[4].split_whitespace().map(&num).collect::<Result<Vec<_>>>()?;
        let layer = LayerMask {
            layer: num(f[2])?,
            channels: num(f[3])?,
            selected,
        };
        if current != Some(key) {
            masks.push(RoutingMask {
                layers: Vec::new(),
                criterion: Criterion::GammaSigned,
                p_schedule: Vec::new(),
                task: Some(key.1),
            });
            current = Some(key);
        }
        masks.last_mut().unwrap().layers.push(layer);
    }
    Ok(masks)
}

pub fn stats_lines(stats: &[LayerReuse]) -> Vec<String> {
    stats
        .iter()
        .map(|s| {
            format!(
                "{},{},{},{},{}",
                s.layer,
                s.channels,
                s.selection_fraction,
                s.mean_jaccard,
                s.final_ever_selected()
            )
        })
        .collect()
}

/// Per-step series for plotting: consecutive Jaccard and cumulative coverage.
pub fn reuse_lines(stats: &[LayerReuse]) -> Vec<String> {
    let mut out = Vec::new();
    for s in stats {
        for (i, (j, e)) in s.consecutive_jaccard.iter().zip(&s.ever_selected[1..]).enumerate() {
            out.push(format!("{},{},{j},{e}", i + 1, s.layer));
        }
    }
    out
}
