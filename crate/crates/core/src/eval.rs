//! Replay of mixture specs through a separator, per-condition scoring and
//! comparison reports with drop rates for missing visual cues.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::data::{read_jsonl, render_mixture, write_jsonl, MixtureSpec, RenderedMixture, SourceBank};
use crate::error::{Error, Result};
use crate::losses::score_streams;
use crate::model::AvSepNet;

/// Anything that turns a rendered mixture into `n` estimates, guided speakers first.
pub trait Separate {
    fn separate(&self, mixture: &RenderedMixture, n: usize) -> Result<Vec<Waveform>>;
}

impl Separate for AvSepNet<f32> {
    fn separate(&self, m: &RenderedMixture, n: usize) -> Result<Vec<Waveform>> {
        AvSepNet::separate(self, &m.mix, &m.visuals, n)
    }
}

/// Returns the references: the upper bound of every metric.
pub struct OracleSeparator;

impl Separate for OracleSeparator {
    fn separate(&self, m: &RenderedMixture, _n: usize) -> Result<Vec<Waveform>> {
        m.ref_waveforms()
    }
}

/// Returns the mixture for every stream.
pub struct PassthroughSeparator;

impl Separate for PassthroughSeparator {
    fn separate(&self, m: &RenderedMixture, n: usize) -> Result<Vec<Waveform>> {
        Ok(vec![m.mix.clone(); n])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionRow {
    pub n_speakers: usize,
    pub guided: usize,
    pub frame_mask_rate: f64,
    pub samples: usize,
    pub si_sdr: f64,
    pub si_sdri: f64,
    /// Mean over visually guided streams only.
    pub guided_si_sdr: Option<f64>,
    /// Mean over streams without a cue only.
    pub unguided_si_sdr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverallRow {
    pub samples: usize,
    pub si_sdr: f64,
    pub si_sdri: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ConditionRow>,
    pub overall: OverallRow,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine {
    Condition(ConditionRow),
    Overall(OverallRow),
}

fn rate_key(rate: f64) -> i64 {
    (rate * 1e6).round() as i64
}

#[derive(Default)]
struct Acc {
    samples: usize,
    sdr: Vec<f64>,
    sdri: Vec<f64>,
    guided: Vec<f64>,
    unguided: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Renders and separates every spec and aggregates per `(N, P, frame mask rate)`.
/// Row means run over all streams of all mixtures of the condition.
pub fn evaluate(
    separator: &dyn Separate,
    specs: &[MixtureSpec],
    bank: &SourceBank,
    clip_samples: usize,
    fps: f64,
) -> Result<EvalReport> {
    let mut groups: BTreeMap<(usize, usize, i64), (f64, Acc)> = BTreeMap::new();
    for spec in specs {
        let r = render_mixture(spec, bank, clip_samples, fps)?;
        let n = spec.n_speakers;
        let p = spec.guided();
        let est = separator.separate(&r, n)?;
        if est.len() != n {
            return Err(Error::Data(format!("{}: separator returned {} streams for {n}", spec.sample_id, est.len())));
        }
        let refs = r.ref_waveforms()?;
        let scores = score_streams(&est, &refs, &r.mix, p)?;
        let (_, acc) = groups.entry((n, p, rate_key(spec.frame_mask_rate))).or_insert((spec.frame_mask_rate, Acc::default()));
        acc.samples += 1;
        for (i, (sdr, sdri)) in scores.into_iter().enumerate() {
            acc.sdr.push(sdr);
            acc.sdri.push(sdri);
            if i < p {
                acc.guided.push(sdr);
            } else {
                acc.unguided.push(sdr);
            }
        }
    }
    let rows: Vec<ConditionRow> = groups
        .into_iter()
        .map(|((n, p, _), (rate, a))| ConditionRow {
            n_speakers: n,
            guided: p,
            frame_mask_rate: rate,
            samples: a.samples,
            si_sdr: mean(&a.sdr),
            si_sdri: mean(&a.sdri),
            guided_si_sdr: (!a.guided.is_empty()).then(|| mean(&a.guided)),
            unguided_si_sdr: (!a.unguided.is_empty()).then(|| mean(&a.unguided)),
        })
        .collect();
    Ok(EvalReport { overall: overall(&rows), rows })
}

/// Sample-count-weighted mean of the rows.
pub fn overall(rows: &[ConditionRow]) -> OverallRow {
    let samples: usize = rows.iter().map(|r| r.samples).sum();
    let w = |f: fn(&ConditionRow) -> f64| {
        if samples == 0 {
            0.0
        } else {
            rows.iter().map(|r| f(r) * r.samples as f64).sum::<f64>() / samples as f64
        }
    };
    OverallRow { samples, si_sdr: w(|r| r.si_sdr), si_sdri: w(|r| r.si_sdri) }
}

impl EvalReport {
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut lines: Vec<ReportLine> = self.rows.iter().cloned().map(ReportLine::Condition).collect();
        lines.push(ReportLine::Overall(self.overall.clone()));
        write_jsonl(path, &lines)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let lines: Vec<ReportLine> = read_jsonl(path)?;
        let mut rows = Vec::new();
        let mut overall_row = None;
        for l in lines {
            match l {
                ReportLine::Condition(r) => rows.push(r),
                ReportLine::Overall(o) if overall_row.is_none() => overall_row = Some(o),
                ReportLine::Overall(_) => {
                    return Err(Error::Format(format!("{}: more than one overall line", path.display())))
                }
            }
        }
        let overall = overall_row.ok_or_else(|| Error::Format(format!("{}: no overall line", path.display())))?;
        Ok(Self { rows, overall })
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{:>2} {:>2} {:>6} {:>7} {:>9} {:>9} {:>9} {:>9}", "N", "P", "rate", "samples", "SI-SDR", "SI-SDRi", "guided", "unguided")
            .unwrap();
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        for r in &self.rows {
            writeln!(
                out,
                "{:>2} {:>2} {:>6.2} {:>7} {:>9.3} {:>9.3} {:>9} {:>9}",
                r.n_speakers,
                r.guided,
                r.frame_mask_rate,
                r.samples,
                r.si_sdr,
                r.si_sdri,
                opt(r.guided_si_sdr),
                opt(r.unguided_si_sdr)
            )
            .unwrap();
        }
        writeln!(out, "{:>2} {:>2} {:>6} {:>7} {:>9.3} {:>9.3}", "OA", "", "", self.overall.samples, self.overall.si_sdr, self.overall.si_sdri)
            .unwrap();
        out
    }
}

/// Performance lost when one cue is missing, for a matched pair of conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropRate {
    pub n_speakers: usize,
    pub frame_mask_rate: f64,
    pub complete_si_sdr: f64,
    pub absent_si_sdr: f64,
    /// `1 - absent / complete`.
    pub drop_rate: f64,
    /// `absent - complete`, in dB.
    pub delta_si_sdr: f64,
    pub complete_si_sdri: f64,
    pub absent_si_sdri: f64,
    pub delta_si_sdri: f64,
}

/// Merges reports; a condition present in two reports is an error.
pub fn merge_reports(reports: &[EvalReport]) -> Result<Vec<ConditionRow>> {
    let mut seen: BTreeMap<(usize, usize, i64), ConditionRow> = BTreeMap::new();
    for r in reports {
        for row in &r.rows {
            let key = (row.n_speakers, row.guided, rate_key(row.frame_mask_rate));
            if seen.insert(key, row.clone()).is_some() {
                return Err(Error::Format(format!(
                    "condition N={} P={} rate={} appears in more than one report",
                    row.n_speakers, row.guided, row.frame_mask_rate
                )));
            }
        }
    }
    Ok(seen.into_values().collect())
}

/// Drop rates for every `(N, rate)` that has both a `P = N` and a `P = N - 1` row.
pub fn drop_rates(rows: &[ConditionRow]) -> Vec<DropRate> {
    let find = |n: usize, p: usize, rate: f64| {
        rows.iter().find(|r| r.n_speakers == n && r.guided == p && rate_key(r.frame_mask_rate) == rate_key(rate))
    };
    let mut out = Vec::new();
    for c in rows.iter().filter(|r| r.guided == r.n_speakers && r.n_speakers > 0) {
        if let Some(a) = find(c.n_speakers, c.n_speakers - 1, c.frame_mask_rate) {
            out.push(DropRate {
                n_speakers: c.n_speakers,
                frame_mask_rate: c.frame_mask_rate,
                complete_si_sdr: c.si_sdr,
                absent_si_sdr: a.si_sdr,
                drop_rate: 1.0 - a.si_sdr / c.si_sdr,
                delta_si_sdr: a.si_sdr - c.si_sdr,
                complete_si_sdri: c.si_sdri,
                absent_si_sdri: a.si_sdri,
                delta_si_sdri: a.si_sdri - c.si_sdri,
            });
        }
    }
    out
}

/// Per-N tables followed by the drop-rate section when a matched pair exists.
pub fn render_comparison(reports: &[EvalReport]) -> Result<(String, Vec<DropRate>)> {
    let rows = merge_reports(reports)?;
    let mut out = String::new();
    let mut by_n: BTreeMap<usize, Vec<&ConditionRow>> = BTreeMap::new();
    for r in &rows {
        by_n.entry(r.n_speakers).or_default().push(r);
    }
    for (n, group) in &by_n {
        writeln!(out, "N = {n}").unwrap();
        writeln!(out, "{:>2} {:>6} {:>7} {:>9} {:>9}", "P", "rate", "samples", "SI-SDR", "SI-SDRi").unwrap();
        for r in group {
            writeln!(out, "{:>2} {:>6.2} {:>7} {:>9.3} {:>9.3}", r.guided, r.frame_mask_rate, r.samples, r.si_sdr, r.si_sdri)
                .unwrap();
        }
        writeln!(out).unwrap();
    }
    let drops = drop_rates(&rows);
    if !drops.is_empty() {
        writeln!(out, "Drop with one visual cue missing").unwrap();
        writeln!(
            out,
            "{:>2} {:>6} {:>9} {:>9} {:>8} {:>9} {:>9}",
            "N", "rate", "complete", "absent", "drop%", "dSI-SDR", "dSI-SDRi"
        )
        .unwrap();
        for d in &drops {
            writeln!(
                out,
                "{:>2} {:>6.2} {:>9.3} {:>9.3} {:>8.2} {:>9.3} {:>9.3}",
                d.n_speakers,
                d.frame_mask_rate,
                d.complete_si_sdr,
                d.absent_si_sdr,
                100.0 * d.drop_rate,
                d.delta_si_sdr,
                d.delta_si_sdri
            )
            .unwrap();
        }
    }
    Ok((out, drops))
}
