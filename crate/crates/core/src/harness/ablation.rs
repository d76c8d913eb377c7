//! Ablation drivers. Each returns one [`CellResult`] per (setting, seed);
//! [`summarize`] aggregates over seeds.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{mean_std, split_name, EvalReport, PromptProvider, ProviderKind, Workbench};
use crate::envs::{Family, TaskSplit, Tier};
use crate::guidance::{GradientVariant, GuidanceConfig};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub ablation: String,
    pub family: String,
    pub provider: String,
    pub setting: String,
    pub seed: u64,
    /// Mean over evaluation tasks of the per-task mean episode return.
    pub mean_return: f64,
    /// Standard deviation of the per-task mean returns.
    pub std_return: f64,
    pub tasks: usize,
    pub failed: usize,
}

impl CellResult {
    fn from_report(
        ablation: &str,
        split: &TaskSplit,
        setting: &str,
        seed: u64,
        rep: &EvalReport,
    ) -> Self {
        let ok: Vec<f64> = rep
            .tasks
            .iter()
            .filter(|t| t.error.is_none())
            .map(|t| t.mean_return)
            .collect();
        let (m, s) = mean_std(&ok);
        Self {
            ablation: ablation.into(),
            family: split_name(split),
            provider: rep.provider.to_string(),
            setting: setting.into(),
            seed,
            mean_return: m,
            std_return: s,
            tasks: rep.tasks.len(),
            failed: rep.failed(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub ablation: String,
    pub family: String,
    pub provider: String,
    pub setting: String,
    pub seeds: usize,
    /// Mean over seeds of [`CellResult::mean_return`].
    pub mean_return: f64,
    /// Standard deviation over seeds.
    pub std_return: f64,
    /// `(mean − baseline) / |baseline|` against the denoising-only row of
    /// the same family; guidance ablation only.
    pub relative_return: Option<f64>,
}

/// Groups cells by (ablation, family, provider, setting) in first-seen order.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String, String), Vec<f64>> = BTreeMap::new();
    for c in cells {
        let key = (
            c.ablation.clone(),
            c.family.clone(),
            c.provider.clone(),
            c.setting.clone(),
        );
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(c.mean_return);
    }
    let mut rows: Vec<SummaryRow> = order
        .into_iter()
        .map(|key| {
            let v = &groups[&key];
            let (m, s) = mean_std(v);
            SummaryRow {
                ablation: key.0,
                family: key.1,
                provider: key.2,
                setting: key.3,
                seeds: v.len(),
                mean_return: m,
                std_return: s,
                relative_return: None,
            }
        })
        .collect();
    let baselines: BTreeMap<String, f64> = rows
        .iter()
        .filter(|r| r.ablation == "guidance" && r.setting == GradientVariant::DmOnly.name())
        .map(|r| (r.family.clone(), r.mean_return))
        .collect();
    for r in rows.iter_mut().filter(|r| r.ablation == "guidance") {
        if let Some(&b) = baselines.get(&r.family) {
            r.relative_return = Some(if b.abs() > 1e-12 {
                (r.mean_return - b) / b.abs()
            } else {
                r.mean_return - b
            });
        }
    }
    rows
}

/// Mean over seeds and fine-tune data tiers of the spread (max − min) of
/// the mean return across initialisation tiers.
pub fn init_spread(cells: &[CellResult], provider: ProviderKind) -> f64 {
    let mut by: BTreeMap<(u64, String), Vec<f64>> = BTreeMap::new();
    for c in cells
        .iter()
        .filter(|c| c.ablation == "init" && c.provider == provider.name())
    {
        let data = c
            .setting
            .split(',')
            .find_map(|p| p.strip_prefix("data="))
            .unwrap_or("")
            .to_string();
        by.entry((c.seed, data)).or_default().push(c.mean_return);
    }
    let spreads: Vec<f64> = by
        .values()
        .map(|v| {
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        })
        .collect();
    mean_std(&spreads).0
}

fn diffuser_report(
    wb: &mut Workbench,
    split: &TaskSplit,
    seed: u64,
    tiers: (Tier, Tier),
    gc: &GuidanceConfig,
) -> Result<EvalReport> {
    let mut models = BTreeMap::new();
    for &task in split.eval_tasks() {
        let d = wb.finetuned(split, seed, task, tiers.0, tiers.1, gc)?;
        models.insert(task, Rc::new(d));
    }
    let run = wb.run(split, seed)?;
    let p = wb.diffuser_provider(split.family, models);
    Ok(wb.evaluate(&run, &p))
}

/// Gradient rules at `λ = 1` on each family's standard split.
pub fn ablation_guidance(wb: &mut Workbench, families: &[Family]) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    let tier = wb.config.data.fewshot_tier;
    for &family in families {
        let split = TaskSplit::standard(family);
        for seed in wb.config.seeds.clone() {
            for variant in GradientVariant::ALL {
                let gc = GuidanceConfig {
                    variant,
                    lambda: 1.0,
                    ..wb.config.guidance.clone()
                };
                let rep = diffuser_report(wb, &split, seed, (tier, tier), &gc)?;
                log::info!("guidance {family} seed {seed} {variant}: {:.3}", rep.mean());
                cells.push(CellResult::from_report(
                    "guidance",
                    &split,
                    variant.name(),
                    seed,
                    &rep,
                ));
            }
        }
    }
    Ok(cells)
}

/// Projected rule over the configured `λ` grid.
pub fn ablation_lambda(wb: &mut Workbench, family: Family) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    let split = TaskSplit::standard(family);
    let tier = wb.config.data.fewshot_tier;
    for seed in wb.config.seeds.clone() {
        for lambda in wb.config.lambda_grid.clone() {
            let gc = GuidanceConfig {
                variant: GradientVariant::Projected,
                lambda,
                ..wb.config.guidance.clone()
            };
            let rep = diffuser_report(wb, &split, seed, (tier, tier), &gc)?;
            log::info!("lambda {family} seed {seed} {lambda}: {:.3}", rep.mean());
            cells.push(CellResult::from_report(
                "lambda",
                &split,
                &format!("lambda={lambda}"),
                seed,
                &rep,
            ));
        }
    }
    Ok(cells)
}

/// Initial-prompt tier × fine-tune data tier for the soft-prompt and
/// diffuser providers.
pub fn ablation_init_grid(wb: &mut Workbench, family: Family) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    let split = TaskSplit::standard(family);
    let gc = wb.config.guidance.clone();
    for seed in wb.config.seeds.clone() {
        let run = wb.run(&split, seed)?;
        for init in Tier::ALL {
            for data in Tier::ALL {
                let setting = format!("init={init},data={data}");
                let prompts = wb.soft_prompts(&run, init, data)?;
                let p = PromptProvider::Fixed {
                    kind: ProviderKind::SoftPrompt,
                    prompts,
                };
                let rep = wb.evaluate(&run, &p);
                cells.push(CellResult::from_report(
                    "init", &split, &setting, seed, &rep,
                ));
                let rep = diffuser_report(wb, &split, seed, (init, data), &gc)?;
                log::info!(
                    "init {family} seed {seed} {setting}: diffuser {:.3}",
                    rep.mean()
                );
                cells.push(CellResult::from_report(
                    "init", &split, &setting, seed, &rep,
                ));
            }
        }
    }
    Ok(cells)
}

/// Few-shot and zero-shot evaluation on the dir-2d OOD split.
pub fn ood_zeroshot(wb: &mut Workbench) -> Result<Vec<CellResult>> {
    let mut cells = Vec::new();
    let split = TaskSplit::dir2d_ood();
    let tier = wb.config.data.fewshot_tier;
    let gc = wb.config.guidance.clone();
    for seed in wb.config.seeds.clone() {
        let run = wb.run(&split, seed)?;
        let expert = PromptProvider::Trajectory {
            tier,
            data: &run.data,
        };
        let rep = wb.evaluate(&run, &expert);
        cells.push(CellResult::from_report(
            "ood", &split, "few-shot", seed, &rep,
        ));
        let soft = PromptProvider::Fixed {
            kind: ProviderKind::SoftPrompt,
            prompts: wb.soft_prompts(&run, tier, tier)?,
        };
        let rep = wb.evaluate(&run, &soft);
        cells.push(CellResult::from_report(
            "ood", &split, "few-shot", seed, &rep,
        ));
        let rep = diffuser_report(wb, &split, seed, (tier, tier), &gc)?;
        cells.push(CellResult::from_report(
            "ood", &split, "few-shot", seed, &rep,
        ));

        let rep = wb.evaluate(&run, &PromptProvider::None);
        cells.push(CellResult::from_report(
            "ood",
            &split,
            "zero-shot",
            seed,
            &rep,
        ));
        let base = wb.phase1(&split, seed)?;
        let models = split
            .eval_tasks()
            .iter()
            .map(|&t| (t, base.clone()))
            .collect();
        let p = wb.diffuser_provider(split.family, models);
        let rep = wb.evaluate(&run, &p);
        log::info!("ood seed {seed}: zero-shot diffuser {:.3}", rep.mean());
        cells.push(CellResult::from_report(
            "ood",
            &split,
            "zero-shot",
            seed,
            &rep,
        ));
    }
    Ok(cells)
}
