//! Matched training runs that differ along one axis.

use std::fmt::Write as _;
use std::fs;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{config, Result};
use crate::metrics::RankingThresholds;

use super::config::ExperimentConfig;
use super::data::heldout_scenes;
use super::eval::evaluate_model;
use super::manifest::Manifest;
use super::train::{run_train, worker_threads};

pub const LAMBDA_SWEEP: [f64; 6] = [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationSuite {
    AttentionMask,
    Curriculum,
    LambdaSweep,
    Components,
}

impl FromStr for AblationSuite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention_mask" => Ok(Self::AttentionMask),
            "curriculum" => Ok(Self::Curriculum),
            "lambda_sweep" => Ok(Self::LambdaSweep),
            "components" => Ok(Self::Components),
            other => Err(config(format!(
                "unknown suite `{other}`; expected attention_mask, curriculum, lambda_sweep or components"
            ))),
        }
    }
}

impl AblationSuite {
    pub fn name(self) -> &'static str {
        match self {
            Self::AttentionMask => "attention_mask",
            Self::Curriculum => "curriculum",
            Self::LambdaSweep => "lambda_sweep",
            Self::Components => "components",
        }
    }

    /// Named configs of the suite, derived from `base`.
    pub fn variants(self, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Self::AttentionMask => vec![
                ("isolated".into(), with(&|c| c.isolated_attention = true)),
                ("all_visible".into(), with(&|c| c.isolated_attention = false)),
            ],
            Self::Curriculum => vec![
                (
                    "curriculum".into(),
                    with(&|c| {
                        c.replacement = true;
                        c.curriculum_milestones.clear();
                        c.curriculum_probs = crate::flow::DEFAULT_PROBS.to_vec();
                    }),
                ),
                (
                    "fixed_p0.5".into(),
                    with(&|c| {
                        c.replacement = true;
                        c.curriculum_milestones.clear();
                        c.curriculum_probs = vec![0.5];
                    }),
                ),
            ],
            Self::LambdaSweep => LAMBDA_SWEEP
                .iter()
                .map(|&l| (format!("lambda_{l}"), with(&|c| c.lambda = l)))
                .collect(),
            Self::Components => {
                let b = with(&|c| {
                    c.identity_modulation = false;
                    c.replacement = false;
                    c.degrade = false;
                    c.lambda = 0.0;
                });
                let c_ = ExperimentConfig { identity_modulation: true, ..b.clone() };
                let d = ExperimentConfig { replacement: true, degrade: true, ..c_.clone() };
                let full = ExperimentConfig { lambda: 0.1, ..d.clone() };
                vec![
                    ("b_location_pruning".into(), b),
                    ("c_plus_modulation".into(), c_),
                    ("d_plus_replacement".into(), d),
                    ("full_plus_fs".into(), full),
                ]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub lambda: f64,
    pub mean_sim_gt: f64,
    pub mean_sim_ref: f64,
    pub mean_cp: f64,
    pub cp_eligible: usize,
    pub quality_eligible: usize,
    pub localization: f64,
    pub heldout_l_fs: f64,
    pub final_l_fm: f64,
}

fn run_variant(name: &str, cfg: &ExperimentConfig, th: &RankingThresholds) -> Result<AblationRow> {
    log::info!("ablation variant {name}");
    let outcome = run_train(cfg, None)?;
    let scenes = heldout_scenes(cfg)?;
    let ev = evaluate_model(&outcome.model, cfg, &scenes, cfg.seed, th)?;
    ev.report.write_csv(cfg.out.join("eval_report.csv"))?;
    let o = &ev.report.overall;
    Ok(AblationRow {
        variant: name.to_string(),
        lambda: cfg.lambda,
        mean_sim_gt: o.mean_sim_gt,
        mean_sim_ref: o.mean_sim_ref,
        mean_cp: o.mean_cp,
        cp_eligible: ev.report.views.cp.len(),
        quality_eligible: ev.report.views.quality.len(),
        localization: ev.localization,
        heldout_l_fs: ev.heldout_l_fs,
        final_l_fm: outcome.records.last().map_or(f64::NAN, |r| r.l_fm),
    })
}

pub fn rows_to_csv(suite: AblationSuite, rows: &[AblationRow]) -> String {
    let mut s = String::from(
        "suite,variant,lambda,mean_sim_gt,mean_sim_ref,mean_cp,cp_eligible,quality_eligible,localization,heldout_l_fs,final_l_fm\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            suite.name(),
            r.variant,
            r.lambda,
            r.mean_sim_gt,
            r.mean_sim_ref,
            r.mean_cp,
            r.cp_eligible,
            r.quality_eligible,
            r.localization,
            r.heldout_l_fs,
            r.final_l_fm
        );
    }
    s
}

/// Trains and evaluates every variant under `base.out/<suite>/<variant>`
/// and writes `base.out/ablation_<suite>.csv`.
pub fn run_ablation(suite: AblationSuite, base: &ExperimentConfig, th: &RankingThresholds) -> Result<Vec<AblationRow>> {
    base.validate()?;
    Manifest::new(&format!("ablate {}", suite.name()), base).write(&base.out, base)?;
    let variants: Vec<(String, ExperimentConfig)> = suite
        .variants(base)
        .into_iter()
        .map(|(n, mut c)| {
            c.out = base.out.join(suite.name()).join(&n);
            (n, c)
        })
        .collect();
    let threads = worker_threads();
    let rows: Vec<Result<AblationRow>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| config(format!("thread pool: {e}")))?;
        pool.install(|| variants.par_iter().map(|(n, c)| run_variant(n, c, th)).collect())
    } else {
        variants.iter().map(|(n, c)| run_variant(n, c, th)).collect()
    };
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    fs::write(base.out.join(format!("ablation_{}.csv", suite.name())), rows_to_csv(suite, &rows))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_shapes() {
        let base = ExperimentConfig::default();
        let am = AblationSuite::AttentionMask.variants(&base);
        assert_eq!(am.len(), 2);
        assert!(am[0].1.isolated_attention && !am[1].1.isolated_attention);
        let ls: Vec<f64> = AblationSuite::LambdaSweep.variants(&base).iter().map(|v| v.1.lambda).collect();
        assert_eq!(ls, LAMBDA_SWEEP.to_vec());
        let comp = AblationSuite::Components.variants(&base);
        assert_eq!(comp.len(), 4);
        assert!(!comp[0].1.identity_modulation && !comp[0].1.replacement && comp[0].1.lambda == 0.0);
        assert!(comp[1].1.identity_modulation && !comp[1].1.replacement);
        assert!(comp[2].1.replacement && comp[2].1.degrade && comp[2].1.lambda == 0.0);
        assert_eq!(comp[3].1.lambda, 0.1);
        let cur = AblationSuite::Curriculum.variants(&base);
        assert_eq!(cur[1].1.curriculum().unwrap().probability(0), 0.5);
        assert_eq!(cur[0].1.curriculum().unwrap().probability(0), 0.0);
        assert!("bogus".parse::<AblationSuite>().is_err());
    }
}
