//! Ablation grids: train and score a list of config variants over shared
//! seeds, then tabulate and plot.
//!
//! Grid file: unsectioned `key = value` lines form the base run config, plus
//! an optional `seeds = a,b,c` (default `0,1,2`). Each `[name]` section is one
//! variant whose lines override the base:
//!
//! ```text
//! train.epochs = 20
//! seeds = 0,1,2
//!
//! [baseline]
//! model.use_dqinit = false
//! model.use_qamem = false
//!
//! [both]
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::bench::{bench_model, BenchSettings};
use crate::config::{parse_sections, Entry, QaMemVariant, RunConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar};
use crate::train::train;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];
pub const REPORT_CSV: &str = "ablation.csv";
pub const REPORT_PLOT: &str = "ablation.svg";

#[derive(Debug, Clone)]
pub struct GridVariant {
    pub name: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub variants: Vec<GridVariant>,
    pub seeds: Vec<u64>,
}

impl Grid {
    /// A one-variant grid.
    pub fn single(name: &str, config: RunConfig, seeds: Vec<u64>) -> Self {
        Self {
            variants: vec![GridVariant {
                name: name.to_string(),
                config,
            }],
            seeds,
        }
    }

    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let sections = parse_sections(text, source_name)?;
        let mut base = RunConfig::default();
        let mut seeds = DEFAULT_SEEDS.to_vec();
        let mut base_entries: Vec<Entry> = Vec::new();
        for e in &sections[0].entries {
            if e.key == "seeds" {
                seeds = e
                    .value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Parse {
                        source_name: source_name.into(),
                        line: e.line,
                        detail: format!("bad seed list `{}`", e.value),
                    })?;
            } else {
                base_entries.push(e.clone());
            }
        }
        base.apply_entries(&base_entries, source_name)?;
        if seeds.is_empty() {
            return Err(Error::config("ablation grid needs at least one seed"));
        }
        let mut variants = Vec::new();
        for s in &sections[1..] {
            let name = s.name.clone().expect("named section");
            if variants.iter().any(|v: &GridVariant| v.name == name) {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line: s.line,
                    detail: format!("duplicate variant `[{name}]`"),
                });
            }
            let mut config = base.clone();
            config.apply_entries(&s.entries, source_name)?;
            config.validate()?;
            variants.push(GridVariant { name, config });
        }
        if variants.is_empty() {
            base.validate()?;
            variants.push(GridVariant {
                name: "base".into(),
                config: base,
            });
        }
        Ok(Self { variants, seeds })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// One report row: a variant's mean over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub stride: usize,
    pub decoder_layers: usize,
    pub use_dqinit: bool,
    pub use_qamem: bool,
    pub qamem_variant: QaMemVariant,
    pub seeds: Vec<u64>,
    /// Test NME% of each seed's best checkpoint.
    pub nme_per_seed: Vec<f64>,
    pub nme_mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub nme_std: f64,
    /// Inference throughput of the first seed's model.
    pub images_per_sec: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<AblationRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

struct SeedResult {
    nme: f64,
    params: usize,
    images_per_sec: Option<f64>,
}

fn run_seed<T: Scalar>(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, bench: bool) -> Result<SeedResult> {
    let outcome = train::<T>(cfg, data, out)?;
    let best = &outcome.best;
    let nme = best.history[best.epoch - 1].test_nme_percent;
    let images_per_sec = if bench {
        let settings = BenchSettings {
            batch: 4,
            warmup: 1,
            runs: 3,
        };
        Some(bench_model(&best.model, cfg.model.qamem_variant, settings, 0)?.images_per_sec)
    } else {
        None
    };
    Ok(SeedResult {
        nme,
        params: best.model.param_count(),
        images_per_sec,
    })
}

/// Trains every variant under every seed (`train.seed` set to the seed).
/// With `out_dir`, each run's metrics and best checkpoint go to
/// `out_dir/<variant>/seed<k>/`, and the CSV and plot to `out_dir`.
pub fn ablate(grid: &Grid, out_dir: Option<&Path>, mut log: impl FnMut(&str)) -> Result<BenchReport> {
    let mut datasets: HashMap<String, Dataset> = HashMap::new();
    let mut report = BenchReport::default();
    for v in &grid.variants {
        let key = v.config.data.hash();
        if !datasets.contains_key(&key) {
            datasets.insert(key.clone(), Dataset::generate(&v.config.data)?);
        }
        let data = &datasets[&key];
        let mut nme_per_seed = Vec::new();
        let mut images_per_sec = 0.0;
        let mut param_count = 0;
        for (k, &seed) in grid.seeds.iter().enumerate() {
            let mut cfg = v.config.clone();
            cfg.train.seed = seed;
            let dir = out_dir.map(|d| d.join(&v.name).join(format!("seed{seed}")));
            let r = match cfg.train.precision {
                Precision::F32 => run_seed::<f32>(&cfg, data, dir.as_deref(), k == 0)?,
                Precision::F64 => run_seed::<f64>(&cfg, data, dir.as_deref(), k == 0)?,
            };
            log(&format!("{} seed {seed}: test NME {:.4}%", v.name, r.nme));
            nme_per_seed.push(r.nme);
            param_count = r.params;
            if let Some(ips) = r.images_per_sec {
                images_per_sec = ips;
            }
        }
        let (nme_mean, nme_std) = mean_std(&nme_per_seed);
        let m = &v.config.model;
        report.rows.push(AblationRow {
            name: v.name.clone(),
            stride: m.stride,
            decoder_layers: m.num_decoder_layers,
            use_dqinit: m.use_dqinit,
            use_qamem: m.use_qamem,
            qamem_variant: m.qamem_variant,
            seeds: grid.seeds.clone(),
            nme_per_seed,
            nme_mean,
            nme_std,
            images_per_sec,
            param_count,
        });
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(REPORT_CSV);
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let svg = dir.join(REPORT_PLOT);
        fs::write(&svg, report.plot_svg()).map_err(|e| Error::io(&svg, e))?;
    }
    Ok(report)
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,stride,decoder_layers,use_dqinit,use_qamem,qamem_variant,seeds,nme_percent_per_seed,nme_percent_mean,nme_percent_std,images_per_sec,param_count\n",
        );
        let join = |v: &[String]| v.join(";");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.name,
                r.stride,
                r.decoder_layers,
                r.use_dqinit,
                r.use_qamem,
                r.qamem_variant.as_str(),
                join(&r.seeds.iter().map(u64::to_string).collect::<Vec<_>>()),
                join(&r.nme_per_seed.iter().map(f64::to_string).collect::<Vec<_>>()),
                r.nme_mean,
                r.nme_std,
                r.images_per_sec,
                r.param_count
            );
        }
        out
    }

    /// Two panels: mean NME% against decoder layer count, and against
    /// stride. Rows sharing every other setting are joined by a line.
    pub fn plot_svg(&self) -> String {
        const W: f64 = 360.0;
        const H: f64 = 260.0;
        const PAD: f64 = 46.0;
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
        let (lo, hi) = self.rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r.nme_mean - r.nme_std), hi.max(r.nme_mean + r.nme_std))
        });
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n",
            2.0 * W
        );
        type Axis = (&'static str, fn(&AblationRow) -> f64, fn(&AblationRow) -> String);
        let panels: [Axis; 2] = [
            ("decoder layers", |r| r.decoder_layers as f64, |r| format!("s{} dq{} qa{}", r.stride, r.use_dqinit as u8, r.use_qamem as u8)),
            ("stride (log2)", |r| (r.stride as f64).log2(), |r| format!("L{} dq{} qa{}", r.decoder_layers, r.use_dqinit as u8, r.use_qamem as u8)),
        ];
        for (p, (label, x_of, series_of)) in panels.iter().enumerate() {
            let ox = p as f64 * W;
            let xs: Vec<f64> = self.rows.iter().map(x_of).collect();
            let (x0, x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            let (x0, x1) = if x1 > x0 { (x0, x1) } else { (x0 - 1.0, x0 + 1.0) };
            let sx = |x: f64| ox + PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
            let sy = |y: f64| H - PAD - (y - lo) / (hi - lo) * (H - 2.0 * PAD);
            let _ = writeln!(
                svg,
                "<rect x=\"{}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
                ox + PAD,
                W - 2.0 * PAD,
                H - 2.0 * PAD
            );
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>", ox + W / 2.0, H - 12.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">NME (%)</text>", ox + W / 2.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.2}</text>", ox + PAD - 4.0, PAD + 4.0);
            let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{lo:.2}</text>", ox + PAD - 4.0, H - PAD);
            let mut series: Vec<(String, Vec<&AblationRow>)> = Vec::new();
            for r in &self.rows {
                let key = series_of(r);
                match series.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, v)) => v.push(r),
                    None => series.push((key, vec![r])),
                }
            }
            for (i, (key, rows)) in series.iter_mut().enumerate() {
                let color = colors[i % colors.len()];
                rows.sort_by(|a, b| x_of(a).total_cmp(&x_of(b)));
                let pts: Vec<String> = rows.iter().map(|r| format!("{:.1},{:.1}", sx(x_of(r)), sy(r.nme_mean))).collect();
                if pts.len() > 1 {
                    let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\"/>", pts.join(" "));
                }
                for r in rows.iter() {
                    let (x, y) = (sx(x_of(r)), sy(r.nme_mean));
                    let _ = writeln!(
                        svg,
                        "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/><circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"><title>{}: {:.3}</title></circle>",
                        sy(r.nme_mean - r.nme_std),
                        sy(r.nme_mean + r.nme_std),
                        r.name,
                        r.nme_mean
                    );
                }
                let _ = writeln!(
                    svg,
                    "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{key}</text>",
                    ox + PAD + 4.0,
                    PAD + 12.0 * (i as f64 + 1.0)
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}
