//! Identity metrics: cosine similarity, the copy-paste score, ranking
//! filters and per-run evaluation against the oracle embedder.

pub mod embed;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{contract, Result};
use crate::image::{Image, Rect};

pub use embed::{Embedding, OracleEmbedder, EMBED_DIM, EPS_COS};

/// Denominator floor of the copy-paste score.
pub const CP_EPS: f64 = 1e-3;
pub const SIM_GT_MIN: f64 = 0.40;
pub const SIM_REF_MIN: f64 = 0.50;

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `a . b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract("cosine of vectors with different lengths"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(contract("cosine with a zero-norm vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Angular distance on the unit sphere.
pub fn angle(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(cosine_sim(a, b)?.acos())
}

/// Reference, ground-truth and generated embeddings of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTriple {
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub g: Vec<f64>,
}

impl EmbeddingTriple {
    pub fn new(r: Vec<f64>, t: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        for (name, v) in [("r", &r), ("t", &t), ("g", &g)] {
            if (norm(v) - 1.0).abs() > 1e-9 {
                return Err(contract(format!("{name} is not unit-norm")));
            }
        }
        if r.len() != t.len() || r.len() != g.len() {
            return Err(contract("triple vectors differ in length"));
        }
        Ok(Self { r, t, g })
    }
}

/// `(theta_gt - theta_gr) / max(theta_tr, eps)`: `-1` when the generation
/// matches the ground truth, `+1` when it matches the reference.
pub fn copy_paste_metric(triple: &EmbeddingTriple, eps: f64) -> Result<f64> {
    if eps <= 0.0 {
        return Err(contract("copy-paste epsilon must be positive"));
    }
    let gt = angle(&triple.g, &triple.t)?;
    let gr = angle(&triple.g, &triple.r)?;
    let tr = angle(&triple.t, &triple.r)?;
    Ok((gt - gr) / tr.max(eps))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankingThresholds {
    pub sim_gt_min: f64,
    pub sim_ref_min: f64,
}

impl Default for RankingThresholds {
    fn default() -> Self {
        Self {
            sim_gt_min: SIM_GT_MIN,
            sim_ref_min: SIM_REF_MIN,
        }
    }
}

/// One identity slot of one evaluated case.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub case_id: usize,
    pub identity_idx: usize,
    pub sim_gt: f64,
    pub sim_ref: f64,
    pub cp: f64,
    pub cp_eligible: bool,
    pub quality_eligible: bool,
    /// Set when the slot could not be scored.
    pub excluded: Option<String>,
}

impl EvalRecord {
    pub fn scored(case_id: usize, identity_idx: usize, sim_gt: f64, sim_ref: f64, cp: f64) -> Self {
        Self {
            case_id,
            identity_idx,
            sim_gt,
            sim_ref,
            cp,
            cp_eligible: false,
            quality_eligible: false,
            excluded: None,
        }
    }

    pub fn flag(&mut self, th: &RankingThresholds) {
        let ok = self.excluded.is_none();
        self.cp_eligible = ok && self.sim_gt > th.sim_gt_min;
        self.quality_eligible = ok && self.sim_ref > th.sim_ref_min;
    }
}

/// CP-eligible and quality-eligible views.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RankingViews {
    pub cp: Vec<EvalRecord>,
    pub quality: Vec<EvalRecord>,
}

pub fn ranking_filter(records: &[EvalRecord], th: &RankingThresholds) -> RankingViews {
    let mut views = RankingViews::default();
    for r in records {
        let mut r = r.clone();
        r.flag(th);
        if r.cp_eligible {
            views.cp.push(r.clone());
        }
        if r.quality_eligible {
            views.quality.push(r);
        }
    }
    views
}

/// What one generated image is scored against.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub case_id: usize,
    pub generated: Image,
    pub ground_truth: Image,
    /// Per identity: its box (if known) and its reference patch.
    pub identities: Vec<(Option<Rect>, Image)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub mean_sim_gt: f64,
    pub mean_sim_ref: f64,
    pub mean_cp: f64,
}

impl Aggregate {
    pub fn of<'a>(records: impl IntoIterator<Item = &'a EvalRecord>) -> Self {
        let mut a = Self::default();
        for r in records.into_iter().filter(|r| r.excluded.is_none()) {
            a.count += 1;
            a.mean_sim_gt += r.sim_gt;
            a.mean_sim_ref += r.sim_ref;
            a.mean_cp += r.cp;
        }
        if a.count > 0 {
            let n = a.count as f64;
            a.mean_sim_gt /= n;
            a.mean_sim_ref /= n;
            a.mean_cp /= n;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub overall: Aggregate,
    pub views: RankingViews,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,identity_idx,sim_gt,sim_ref,cp,cp_eligible,quality_eligible\n");
        let flag = |b: bool| if b { "yes" } else { "ignored" };
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.case_id,
                r.identity_idx,
                r.sim_gt,
                r.sim_ref,
                r.cp,
                flag(r.cp_eligible),
                flag(r.quality_eligible)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn score_slot(
    embedder: &OracleEmbedder,
    case: &EvalCase,
    rect: Rect,
    reference: &Image,
) -> Result<(f64, f64, f64)> {
    let g = embedder.embed(&case.generated.crop_rect(&rect)?)?;
    let t = embedder.embed(&case.ground_truth.crop_rect(&rect)?)?;
    let r = embedder.embed(reference)?;
    let sim_gt = cosine_sim(&t, &g)?;
    let sim_ref = cosine_sim(&r, &g)?;
    let cp = copy_paste_metric(&EmbeddingTriple { r, t, g }, CP_EPS)?;
    Ok((sim_gt, sim_ref, cp))
}

/// Scores every identity slot. Slots without a usable crop are kept in
/// the record list, flagged and excluded from aggregates and views.
pub fn evaluate_run(cases: &[EvalCase], embedder: &OracleEmbedder, th: &RankingThresholds) -> EvalReport {
    let mut records = Vec::new();
    for case in cases {
        let (h, w) = (case.generated.height(), case.generated.width());
        for (i, (rect, reference)) in case.identities.iter().enumerate() {
            let outcome = match rect {
                None => Err("no location".to_string()),
                Some(r) if !r.fits_in(h, w) => Err(format!("box {r:?} outside the image")),
                Some(r) => score_slot(embedder, case, *r, reference).map_err(|e| e.to_string()),
            };
            let mut rec = match outcome {
                Ok((gt, rf, cp)) => EvalRecord::scored(case.case_id, i, gt, rf, cp),
                Err(reason) => {
                    log::warn!("case {} identity {i} excluded: {reason}", case.case_id);
                    EvalRecord {
                        excluded: Some(reason),
                        ..EvalRecord::scored(case.case_id, i, f64::NAN, f64::NAN, f64::NAN)
                    }
                }
            };
            rec.flag(th);
            records.push(rec);
        }
    }
    let views = ranking_filter(&records, th);
    EvalReport {
        overall: Aggregate::of(&records),
        records,
        views,
    }
}
