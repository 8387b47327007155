//! Evaluation artifacts: the method × fraction accuracy grid and per-mask
//! layer/role density heatmaps, emitted as CSV, JSON, and dependency-free SVG.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ablation::{apply_mask, select_by_score, select_random, MaskMethod, NeuronMask};
use crate::attribution::ScoreTable;
use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward, NeuronId, Parameters, Role};

/// Fraction of test examples whose argmax class matches the label; argmax
/// ties break toward the lowest class index.
pub fn accuracy(params: &Parameters, test_set: &Dataset) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let results: Vec<Result<bool>> = test_set
        .examples()
        .par_iter()
        .map(|ex| {
            let trace = forward(params, ex, None)?;
            let probs = trace.probabilities();
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best == ex.label)
        })
        .collect();
    let mut correct = 0usize;
    for r in results {
        if r? {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_set.len() as f64)
}

pub const GRID_METHODS: [MaskMethod; 3] = [
    MaskMethod::Random,
    MaskMethod::Activation,
    MaskMethod::IntegratedGradients,
];

/// Test accuracy per (selection method, preserved fraction). Random cells are
/// the mean over the replicate seeds; per-seed values are retained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyGrid {
    pub fractions: Vec<f64>,
    /// Row order matches [`GRID_METHODS`]: random, activation, ig.
    pub cells: Vec<Vec<f64>>,
    pub random_seeds: Vec<u64>,
    /// `random_per_seed[seed_index][fraction_index]`.
    pub random_per_seed: Vec<Vec<f64>>,
}

impl AccuracyGrid {
    pub fn cell(&self, method: MaskMethod, fraction_index: usize) -> f64 {
        let row = GRID_METHODS
            .iter()
            .position(|m| *m == method)
            .expect("grid method");
        self.cells[row][fraction_index]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,fraction,accuracy\n");
        for (row, method) in GRID_METHODS.iter().enumerate() {
            for (col, f) in self.fractions.iter().enumerate() {
                out.push_str(&format!("{},{},{}\n", method.as_str(), f, self.cells[row][col]));
            }
        }
        out
    }
}

/// Evaluates every (method, fraction) submodel. A fraction of exactly 1.0
/// keeps every neuron, so that column equals the full-model accuracy in all
/// rows.
pub fn build_grid(
    trained: &Parameters,
    test_set: &Dataset,
    activation: &ScoreTable,
    ig: &ScoreTable,
    fractions: &[f64],
    random_seeds: &[u64],
) -> Result<AccuracyGrid> {
    if random_seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one random seed".into()));
    }
    let cfg = trained.config();
    let mut random_per_seed = vec![vec![0.0; fractions.len()]; random_seeds.len()];
    let mut cells = vec![vec![0.0; fractions.len()]; 3];

    for (col, &fraction) in fractions.iter().enumerate() {
        let mut random_mean = 0.0;
        for (si, &seed) in random_seeds.iter().enumerate() {
            let mask = select_random(cfg.num_layers, cfg.embed_dim, fraction, seed)?;
            let acc = accuracy(&apply_mask(trained, &mask)?, test_set)?;
            random_per_seed[si][col] = acc;
            random_mean += acc;
        }
        cells[0][col] = random_mean / random_seeds.len() as f64;

        for (row, scores) in [(1, activation), (2, ig)] {
            let mask = select_by_score(scores, fraction)?;
            cells[row][col] = accuracy(&apply_mask(trained, &mask)?, test_set)?;
        }
    }

    Ok(AccuracyGrid {
        fractions: fractions.to_vec(),
        cells,
        random_seeds: random_seeds.to_vec(),
        random_per_seed,
    })
}

/// Binned keep-label densities per (layer, role) row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub layer: usize,
    pub role: String,
    pub bins: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapDensity {
    pub bin_size: usize,
    pub embed_dim: usize,
    pub rows: Vec<HeatmapRow>,
}

impl HeatmapDensity {
    /// Size of bin `b` in a row (the last bin may be partial).
    pub fn bin_len(&self, b: usize) -> usize {
        let start = b * self.bin_size;
        self.bin_size.min(self.embed_dim - start)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,role,bin,density\n");
        for row in &self.rows {
            for (b, v) in row.bins.iter().enumerate() {
                out.push_str(&format!("{},{},{},{}\n", row.layer, row.role, b, v));
            }
        }
        out
    }
}

/// Chunks each (layer, role) row's neurons, in canonical unit order, into
/// bins of `bin_size`; each bin value is the mean of its 0/1 keep-labels.
pub fn heatmap(mask: &NeuronMask, bin_size: usize) -> Result<HeatmapDensity> {
    if bin_size == 0 {
        return Err(Error::InvalidConfig("bin_size must be >= 1".into()));
    }
    let d = mask.embed_dim();
    let mut rows = Vec::new();
    for layer in 0..mask.num_layers() {
        for role in Role::ALL {
            let mut bins = Vec::new();
            let mut unit = 0;
            while unit < d {
                let end = (unit + bin_size).min(d);
                let kept = (unit..end)
                    .filter(|&u| {
                        mask.keeps(NeuronId {
                            layer,
                            role,
                            unit: u,
                        })
                    })
                    .count();
                bins.push(kept as f64 / (end - unit) as f64);
                unit = end;
            }
            rows.push(HeatmapRow {
                layer,
                role: role.short().to_string(),
                bins,
            });
        }
    }
    Ok(HeatmapDensity {
        bin_size,
        embed_dim: d,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
pub struct HeatmapEntry {
    pub method: String,
    pub fraction: f64,
    pub heatmap: HeatmapDensity,
}

#[derive(Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub methods: Vec<String>,
    pub grid: AccuracyGrid,
    pub bin_size: usize,
    pub heatmaps: Vec<HeatmapEntry>,
}

fn density_color(v: f64) -> String {
    // Darker = lower density.
    let c = (40.0 + 215.0 * v.clamp(0.0, 1.0)).round() as u8;
    format!("rgb({c},{c},{c})")
}

/// Renders one heatmap as a plain SVG: a grid of rectangles, row labels
/// `L<layer>/<role>`, and a numeric color legend. Byte-stable for identical
/// inputs.
pub fn heatmap_svg(hm: &HeatmapDensity, title: &str) -> String {
    const CELL_W: usize = 40;
    const CELL_H: usize = 24;
    const LABEL_W: usize = 70;
    const TOP: usize = 28;
    const LEGEND_H: usize = 44;

    let max_bins = hm.rows.iter().map(|r| r.bins.len()).max().unwrap_or(0);
    let width = LABEL_W + max_bins * CELL_W + 10;
    let height = TOP + hm.rows.len() * CELL_H + LEGEND_H;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"11\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{LABEL_W}\" y=\"16\" font-size=\"12\">{title}</text>\n"
    ));
    for (ri, row) in hm.rows.iter().enumerate() {
        let y = TOP + ri * CELL_H;
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{}\">L{}/{}</text>\n",
            y + CELL_H / 2 + 4,
            row.layer,
            row.role
        ));
        for (bi, &v) in row.bins.iter().enumerate() {
            let x = LABEL_W + bi * CELL_W;
            svg.push_str(&format!(
                "<rect class=\"cell\" x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" \
                 fill=\"{}\" stroke=\"#ffffff\"/>\n",
                density_color(v)
            ));
        }
    }
    // Legend.
    let ly = TOP + hm.rows.len() * CELL_H + 12;
    for (i, v) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
        let x = LABEL_W + i * (CELL_W + 18);
        svg.push_str(&format!(
            "<rect class=\"legend\" x=\"{x}\" y=\"{ly}\" width=\"14\" height=\"14\" \
             fill=\"{}\" stroke=\"#888888\"/>\n",
            density_color(v)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{v:.2}</text>\n",
            x + 17,
            ly + 12
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `grid.csv`, per-heatmap CSV and SVG files, and a combined
/// `report.json` into `out_dir`. Pure function of its inputs: rerunning on
/// identical inputs produces identical bytes.
pub fn emit(
    grid: &AccuracyGrid,
    heatmaps: &[(MaskMethod, f64, HeatmapDensity)],
    bin_size: usize,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let grid_path = out_dir.join("grid.csv");
    fs::write(&grid_path, grid.to_csv())?;
    written.push(grid_path);

    let mut entries = Vec::new();
    for (method, fraction, hm) in heatmaps {
        let stem = format!("heatmap_{}_{}", method.as_str(), fraction);
        let csv_path = out_dir.join(format!("{stem}.csv"));
        fs::write(&csv_path, hm.to_csv())?;
        written.push(csv_path);
        let svg_path = out_dir.join(format!("{stem}.svg"));
        let title = format!("{} @ {}", method.as_str(), fraction);
        fs::write(&svg_path, heatmap_svg(hm, &title))?;
        written.push(svg_path);
        entries.push(HeatmapEntry {
            method: method.as_str().to_string(),
            fraction: *fraction,
            heatmap: hm.clone(),
        });
    }

    let report = Report {
        schema_version: 1,
        methods: GRID_METHODS.iter().map(|m| m.as_str().to_string()).collect(),
        grid: grid.clone(),
        bin_size,
        heatmaps: entries,
    };
    let report_path = out_dir.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    written.push(report_path);
    Ok(written)
}
