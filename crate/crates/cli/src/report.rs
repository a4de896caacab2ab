use std::fmt::Write as _;
use std::io::BufWriter;
use std::path::Path;

use rfprint_core::authmetrics::{format_improvement, ConfusionMatrix};
use serde::{Deserialize, Serialize};

/// Headline numbers of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n_devices: usize,
    pub ttsd_pct: f64,
    pub ttod_raw_pct: f64,
    pub ttod_translated_pct: f64,
    pub ttod_max_rule_pct: f64,
    pub ttod_improvement_x: Option<f64>,
    pub rrp_raw_pct: f64,
    pub rrp_max_rule_pct: f64,
    pub rrp_improvement_x: Option<f64>,
    pub max_rule_violations: u64,
    pub chance_pct: f64,
    pub mean_impersonation_pct: f64,
    pub max_impersonation_pct: f64,
}

impl Summary {
    /// Baseline / translated / improvement rows with TTOD and RRP columns.
    pub fn to_markdown(&self) -> String {
        let x = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), format_improvement);
        let mut s = String::new();
        let n = self.n_devices;
        writeln!(s, "| Model | TTOD% ({n} devices) | RRP% ({n} devices) |").unwrap();
        writeln!(s, "|---|---|---|").unwrap();
        writeln!(
            s,
            "| Baseline | {:.0}% | {:.0}% |",
            self.ttod_raw_pct, self.rrp_raw_pct
        )
        .unwrap();
        writeln!(
            s,
            "| Translators + Max Rule | {:.0}% | {:.0}% |",
            self.ttod_max_rule_pct, self.rrp_max_rule_pct
        )
        .unwrap();
        writeln!(
            s,
            "| **Improvement** | **{}** | **{}** |",
            x(self.ttod_improvement_x),
            x(self.rrp_improvement_x)
        )
        .unwrap();
        writeln!(s).unwrap();
        writeln!(s, "- Same-domain accuracy (TTSD): {:.2}%", self.ttsd_pct).unwrap();
        writeln!(
            s,
            "- TTOD with each device's own translator: {:.2}%",
            self.ttod_translated_pct
        )
        .unwrap();
        writeln!(
            s,
            "- Max-Rule score violations: {}",
            self.max_rule_violations
        )
        .unwrap();
        writeln!(
            s,
            "- Impersonation through foreign translators: mean {:.2}%, max {:.2}% (chance {:.2}%)",
            self.mean_impersonation_pct, self.max_impersonation_pct, self.chance_pct
        )
        .unwrap();
        s
    }
}

const CELL: usize = 24;

/// Grayscale heatmap of row-normalized counts; black is 0, white is 1.
pub fn write_heatmap(cm: &ConfusionMatrix, path: &Path) -> std::io::Result<()> {
    let n = cm.n_classes();
    let side = (n * CELL).max(1);
    let mut pixels = vec![0u8; side * side];
    for (i, row) in cm.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &c) in row.iter().enumerate() {
            let v = (255 * c).checked_div(total).unwrap_or(0) as u8;
            for y in i * CELL..(i + 1) * CELL {
                pixels[y * side + j * CELL..y * side + (j + 1) * CELL].fill(v);
            }
        }
    }
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), side as u32, side as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(std::io::Error::other)?;
    w.write_image_data(&pixels).map_err(std::io::Error::other)?;
    Ok(())
}
