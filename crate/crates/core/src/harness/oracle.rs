use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mask::{retained_count, Ticket};
use crate::nn::ModelState;
use crate::objectives::{objective_value, teacher_stats, ObjectiveKind};

/// Largest enumeration the oracle accepts.
pub const DEFAULT_BUDGET: u128 = 5_000_000;

/// `C(n, k)`, saturating.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = c.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    c
}

/// Calls `f` with every `k`-subset of `0..n` in lexicographic order.
pub fn for_each_combination(n: usize, k: usize, mut f: impl FnMut(&[usize]) -> Result<()>) -> Result<()> {
    if k > n {
        return Ok(());
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        f(&idx)?;
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return Ok(());
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleEntry {
    pub retained: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub best: Ticket,
    /// Every mask with its objective, sorted by value then by indices.
    pub table: Vec<OracleEntry>,
}

impl OracleResult {
    /// Fraction of table entries strictly better than `value`.
    pub fn rank_fraction(&self, value: f64) -> f64 {
        let better = self.table.iter().filter(|e| e.value < value).count();
        better as f64 / self.table.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,value,retained\n");
        for (i, e) in self.table.iter().enumerate() {
            let idx: Vec<String> = e.retained.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{},{}\n", i, e.value, idx.join(" ")));
        }
        out
    }
}

/// Evaluates the objective for every mask with exactly `round(κd)` ones on
/// a fixed batch, with hard binary overlays and no noise.
pub fn brute_force_oracle(
    model: &ModelState,
    batch: &Batch,
    kappa: f64,
    kind: ObjectiveKind,
    budget: u128,
) -> Result<OracleResult> {
    let d = model.d();
    let n = retained_count(kappa, d)?;
    let count = binomial(d, n);
    if count > budget {
        return Err(Error::BudgetExceeded { count, budget });
    }
    let teacher = if kind.needs_teacher() {
        Some(teacher_stats(model, batch, kind == ObjectiveKind::GradMatch)?)
    } else {
        None
    };
    let mut table = Vec::with_capacity(count as usize);
    let mut overlay = vec![0.0; d];
    for_each_combination(d, n, |idx| {
        overlay.iter_mut().for_each(|v| *v = 0.0);
        for &i in idx {
            overlay[i] = 1.0;
        }
        let value = objective_value(kind, model, batch, Some(&overlay), teacher.as_ref())?;
        table.push(OracleEntry {
            retained: idx.to_vec(),
            value,
        });
        Ok(())
    })?;
    table.sort_by(|a, b| a.value.total_cmp(&b.value).then_with(|| a.retained.cmp(&b.retained)));
    let mut mask = vec![false; d];
    for &i in &table[0].retained {
        mask[i] = true;
    }
    let best = Ticket::new(mask, model.layout(), kappa, "oracle")?;
    Ok(OracleResult { best, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};
    use crate::nn::Arch;

    #[test]
    fn binomials() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(12, 6), 924);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(60, 30), 118_264_581_564_861_424);
    }

    #[test]
    fn enumerates_every_subset_once() {
        let mut seen = Vec::new();
        for_each_combination(4, 2, |c| {
            seen.push(c.to_vec());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
    }

    fn tiny() -> (ModelState, Batch) {
        let data = synthetic_blobs(&BlobSpec::new(2, 2, 60, 1)).unwrap();
        let m = ModelState::for_dataset(Arch::TinyMlp, &data, 2).unwrap();
        let b = data.full_batch(&data.train);
        (m, b)
    }

    #[test]
    fn tiny_table_is_complete_and_sorted() {
        let (m, b) = tiny();
        let r = brute_force_oracle(&m, &b, 0.5, ObjectiveKind::TaskLoss, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.table.len(), 924);
        assert!(r.table.windows(2).all(|w| w[0].value <= w[1].value));
        assert_eq!(r.best.retained(), 6);
        assert_eq!(r.rank_fraction(r.table[0].value), 0.0);
    }

    #[test]
    fn full_density_is_dense_objective() {
        let (m, b) = tiny();
        let r = brute_force_oracle(&m, &b, 1.0, ObjectiveKind::TaskLoss, DEFAULT_BUDGET).unwrap();
        assert_eq!(r.table.len(), 1);
        assert_eq!(r.table[0].value, m.forward(&b, None, false).unwrap().loss);
    }

    #[test]
    fn budget_is_enforced() {
        let (m, b) = tiny();
        assert!(matches!(
            brute_force_oracle(&m, &b, 0.5, ObjectiveKind::TaskLoss, 100),
            Err(Error::BudgetExceeded { count: 924, budget: 100 })
        ));
    }
}
