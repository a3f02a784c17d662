use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::run::{run, Ablation, Data, RunConfig, RunOutput, Summary};
use super::world::World;
use crate::error::{Error, Result};

/// The four TRA/LRL cells, in table order: neither, TRA, LRL, both.
pub fn table_cells() -> [Ablation; 4] {
    [
        Ablation::new(false, false),
        Ablation::new(true, false),
        Ablation::new(false, true),
        Ablation::new(true, true),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std })
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub ablation: Ablation,
    pub runs: Vec<RunOutput>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub interaction_accuracy: Stat,
    pub rule_violation_rate: Stat,
    pub unseen_accuracy: Option<Stat>,
}

impl CellResult {
    pub fn summaries(&self) -> impl Iterator<Item = &Summary> {
        self.runs.iter().map(|r| &r.summary)
    }

    pub fn stats(&self) -> CellStats {
        let col = |f: &dyn Fn(&Summary) -> f64| -> Stat {
            Stat::of(&self.summaries().map(f).collect::<Vec<_>>()).expect("cells hold at least one run")
        };
        let unseen: Option<Vec<f64>> = self.summaries().map(|s| s.metrics.unseen_accuracy).collect();
        CellStats {
            interaction_accuracy: col(&|s| s.metrics.interaction_accuracy),
            rule_violation_rate: col(&|s| s.metrics.rule_violation_rate),
            unseen_accuracy: unseen.and_then(|u| Stat::of(&u)),
        }
    }

    pub const HEADER: &'static str = "cell,tra,lrl,vp,op,seeds,interaction_accuracy_mean,interaction_accuracy_std,\
rule_violation_rate_mean,rule_violation_rate_std,unseen_accuracy_mean,unseen_accuracy_std";

    pub fn csv(&self) -> String {
        let a = &self.ablation;
        let st = self.stats();
        let (um, us) = match st.unseen_accuracy {
            Some(u) => (format!("{:.6}", u.mean), format!("{:.6}", u.std)),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{}",
            a.label().replace(' ', ";"),
            a.tra,
            a.lrl,
            a.use_vp(),
            a.use_op(),
            self.runs.len(),
            st.interaction_accuracy.mean,
            st.interaction_accuracy.std,
            st.rule_violation_rate.mean,
            st.rule_violation_rate.std,
            um,
            us
        )
    }
}

/// Runs every cell under every seed of `cfg` on the same data. Jobs are spread
/// over `workers` threads; results do not depend on scheduling.
pub fn ablate(
    cfg: &RunConfig,
    world: &World,
    data: &Data,
    cells: &[Ablation],
    workers: usize,
) -> Result<Vec<CellResult>> {
    if cells.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one cell and one seed".into()));
    }
    let mut cell_cfgs = Vec::with_capacity(cells.len());
    for &ablation in cells {
        let c = RunConfig { ablation, ..cfg.clone() };
        c.validate()?;
        cell_cfgs.push(c);
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutput>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len()) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(c, seed)) = jobs.get(k) else { break };
                let out = run(&cell_cfgs[c], world, data, seed, |_| {});
                slots.lock().expect("no worker panics while holding the lock")[k] = Some(out);
            });
        }
    });
    let mut outputs = slots.into_inner().expect("workers joined").into_iter();
    let mut results = Vec::with_capacity(cells.len());
    for &ablation in cells {
        let mut runs = Vec::with_capacity(cfg.seeds.len());
        for _ in &cfg.seeds {
            runs.push(outputs.next().flatten().expect("every job ran")?);
        }
        results.push(CellResult { ablation, runs });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert_eq!(Stat::of(&[4.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }
}
