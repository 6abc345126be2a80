use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::arch::ArchSpec;
use super::model::FeatureShape;
use crate::backbone::Position;
use crate::error::{invalid, Error, Result};

pub const CONVENTION: &str = "1 multiply-accumulate = 1 FLOP; BN, ReLU and pooling free; \
conv layers bias-free with BN (2 params per output channel); classifier with bias, applied per snippet; \
clip total = U x per-snippet cost, spatial crops excluded";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            _ => Err(invalid("format", format!("expected table or json, got {s:?}"))),
        }
    }
}

/// One layer of one snippet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLine {
    pub name: String,
    pub kind: String,
    /// `[C, T, H, W]`
    pub output: FeatureShape,
    pub macs: u64,
    pub params: u64,
    /// Part of the classifier head rather than the backbone.
    pub head: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaOverheadLine {
    pub name: String,
    /// `[C, T, H, W]` of the host feature, per snippet.
    pub host: FeatureShape,
    pub aggregated_channels: usize,
    /// Per clip: the module sees all `U` snippets at once.
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsaOverhead {
    pub position: Position,
    pub lines: Vec<DsaOverheadLine>,
    pub macs: u64,
    pub params: u64,
}

impl DsaOverhead {
    pub(crate) fn from_lines(position: Position, lines: Vec<DsaOverheadLine>) -> Self {
        Self {
            position,
            macs: lines.iter().map(|l| l.macs).sum(),
            params: lines.iter().map(|l| l.params).sum(),
            lines,
        }
    }
}

/// Integer-exact cost of one clip. `lines` hold per-snippet costs; clip
/// totals multiply the MACs by `snippets`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub arch: String,
    /// `frames×snippets×resolution²`
    pub input: String,
    pub frames: usize,
    pub resolution: usize,
    pub snippets: usize,
    pub classes: usize,
    pub convention: String,
    pub lines: Vec<CostLine>,
    pub per_snippet_macs: u64,
    pub backbone_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    pub params: u64,
    pub gmacs: f64,
    pub mparams: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsa: Option<DsaOverhead>,
}

impl CostReport {
    pub(crate) fn from_lines(
        arch: &ArchSpec,
        frames: usize,
        resolution: usize,
        snippets: usize,
        lines: Vec<CostLine>,
    ) -> Self {
        let u = snippets as u64;
        let sum = |head: bool| lines.iter().filter(|l| l.head == head).map(|l| l.macs).sum::<u64>();
        let (backbone, head) = (sum(false), sum(true));
        let params = lines.iter().map(|l| l.params).sum();
        let total = u * (backbone + head);
        Self {
            arch: arch.name.clone(),
            input: format!("{frames}×{snippets}×{resolution}²"),
            frames,
            resolution,
            snippets,
            classes: arch.classes,
            convention: CONVENTION.to_string(),
            per_snippet_macs: backbone + head,
            backbone_macs: u * backbone,
            head_macs: u * head,
            total_macs: total,
            params,
            gmacs: total as f64 / 1e9,
            mparams: params as f64 / 1e6,
            dsa: None,
            lines,
        }
    }

    pub fn with_dsa(mut self, overhead: DsaOverhead) -> Self {
        self.dsa = Some(overhead);
        self
    }

    /// `(macs, params)` of the DSA modules relative to the base network.
    pub fn dsa_relative(&self) -> Option<(f64, f64)> {
        let d = self.dsa.as_ref()?;
        Some((
            d.macs as f64 / self.total_macs as f64,
            d.params as f64 / self.params as f64,
        ))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn shape(s: &FeatureShape) -> String {
    format!("{}×{}×{}×{}", s[0], s[1], s[2], s[3])
}

fn render_table(r: &CostReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<20} {:<8} {:>18} {:>16} {:>12}",
        "layer", "kind", "output", "MACs", "params"
    );
    if r.lines.is_empty() && r.dsa.is_none() {
        return out;
    }
    for l in &r.lines {
        let _ = writeln!(
            out,
            "{:<20} {:<8} {:>18} {:>16} {:>12}",
            l.name,
            l.kind,
            shape(&l.output),
            l.macs,
            l.params
        );
    }
    let _ = writeln!(
        out,
        "{:<20} {:<8} {:>18} {:>16} {:>12}",
        "total/snippet", "", "", r.per_snippet_macs, r.params
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "arch           {}", r.arch);
    let _ = writeln!(
        out,
        "input          {} (frames×snippets×res²), {} classes",
        r.input, r.classes
    );
    let _ = writeln!(out, "backbone MACs  {}", r.backbone_macs);
    let _ = writeln!(out, "head MACs      {}", r.head_macs);
    let _ = writeln!(out, "total MACs     {} ({:.2} GFLOPs)", r.total_macs, r.gmacs);
    let _ = writeln!(out, "params         {} ({:.2} M)", r.params, r.mparams);
    let _ = writeln!(out, "convention     {}", r.convention);
    if let Some(d) = &r.dsa {
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<20} {:>18} {:>6} {:>16} {:>12}",
            format!("dsa @ {:?}", d.position),
            "host",
            "C1",
            "MACs",
            "params"
        );
        for l in &d.lines {
            let _ = writeln!(
                out,
                "{:<20} {:>18} {:>6} {:>16} {:>12}",
                l.name,
                shape(&l.host),
                l.aggregated_channels,
                l.macs,
                l.params
            );
        }
        let _ = writeln!(
            out,
            "{:<20} {:>18} {:>6} {:>16} {:>12}",
            "total", "", "", d.macs, d.params
        );
        if let Some((m, p)) = r.dsa_relative() {
            let _ = writeln!(out, "overhead       {:.6}% MACs, {:.6}% params", 100.0 * m, 100.0 * p);
        }
    }
    out
}

pub fn render(report: &CostReport, format: Format) -> String {
    match format {
        Format::Table => render_table(report),
        Format::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("cost reports serialize");
            s.push('\n');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{arch_cost, dsa_overhead, DsaPlacementSpec};
    use crate::dsa::DsaConfig;

    fn r50() -> CostReport {
        let arch = ArchSpec::builtin("i3d_r50").unwrap();
        let o = dsa_overhead(&arch, &DsaPlacementSpec::default(), &DsaConfig::default(), 4, 224, 4).unwrap();
        arch_cost(&arch, 4, 224, 4).unwrap().with_dsa(o)
    }

    #[test]
    fn empty_report_is_header_only() {
        let t = render(&CostReport::default(), Format::Table);
        assert_eq!(t.lines().count(), 1);
        assert!(t.starts_with("layer"));
    }

    #[test]
    fn totals_line_equals_column_sums() {
        let r = r50();
        let t = render(&r, Format::Table);
        let total = t.lines().find(|l| l.starts_with("total/snippet")).unwrap();
        let nums: Vec<u64> = total.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
        let body: Vec<Vec<u64>> = t
            .lines()
            .skip(1)
            .take(r.lines.len())
            .map(|l| {
                let f: Vec<&str> = l.split_whitespace().collect();
                f[f.len() - 2..].iter().map(|x| x.parse().unwrap()).collect()
            })
            .collect();
        assert_eq!(nums[0], body.iter().map(|v| v[0]).sum::<u64>());
        assert_eq!(nums[1], body.iter().map(|v| v[1]).sum::<u64>());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let r = r50();
        let text = render(&r, Format::Json);
        let back = CostReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(render(&back, Format::Json), text);
    }

    #[test]
    fn rendering_is_stable() {
        assert_eq!(render(&r50(), Format::Table), render(&r50(), Format::Table));
        assert!("yaml".parse::<Format>().is_err());
    }
}
