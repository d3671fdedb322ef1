use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::baselines::{
    grasp_scores, magnitude_prune, prune_by_scores, random_prune, reinit, run_ltr, scoring_batch, shuffle_layerwise,
    snip_scores, synflow_prune, BaselineMethod,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{invert_clamp, Ticket};
use crate::nn::{train, ModelState, Trainer};
use crate::search::{draw_objective, evaluate_ticket, pretrain, run_cts, RunMetrics};

pub const CSV_SCHEMA: &str = "schema=1";
pub const CSV_HEADER: [&str; 10] = [
    CSV_SCHEMA,
    "method",
    "sparsity",
    "density",
    "seed",
    "test_accuracy",
    "test_loss",
    "draw_objective",
    "draw_accuracy",
    "status",
];

/// One row of results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub sparsity: f64,
    /// Achieved density of the ticket.
    pub density: f64,
    pub seed: u64,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub draw_objective: f64,
    pub draw_accuracy: f64,
    /// Search plus training time; kept out of the main CSV.
    pub wall_time_s: f64,
    pub layer_densities: Vec<(String, f64)>,
    /// `ok`, or the error that stopped the cell.
    pub status: String,
}

impl MetricsRecord {
    pub fn from_run(method: &str, sparsity: f64, seed: u64, ticket: &Ticket, m: &RunMetrics, wall: f64) -> Self {
        MetricsRecord {
            method: method.to_string(),
            sparsity,
            density: ticket.density,
            seed,
            test_accuracy: m.final_eval.accuracy,
            test_loss: m.final_eval.loss,
            draw_objective: m.draw_objective,
            draw_accuracy: m.draw.accuracy,
            wall_time_s: wall,
            layer_densities: ticket.layer_densities(),
            status: "ok".into(),
        }
    }

    fn failed(method: &str, sparsity: f64, seed: u64, err: &Error) -> Self {
        MetricsRecord {
            method: method.to_string(),
            sparsity,
            density: f64::NAN,
            seed,
            test_accuracy: f64::NAN,
            test_loss: f64::NAN,
            draw_objective: f64::NAN,
            draw_accuracy: f64::NAN,
            wall_time_s: 0.0,
            layer_densities: Vec::new(),
            status: format!("error: {err}"),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn csv_row(&self) -> Vec<String> {
        vec![
            "1".into(),
            self.method.clone(),
            self.sparsity.to_string(),
            self.density.to_string(),
            self.seed.to_string(),
            self.test_accuracy.to_string(),
            self.test_loss.to_string(),
            self.draw_objective.to_string(),
            self.draw_accuracy.to_string(),
            self.status.clone(),
        ]
    }
}

/// A ticket, its rewound weights and its trained result.
#[derive(Clone, Debug)]
pub struct BaselineOutcome {
    pub ticket: Ticket,
    pub pre: Trainer,
    pub model: ModelState,
    pub metrics: RunMetrics,
}

/// Pre-trains to the rewind step, draws a ticket with `method` there and
/// retrains it. LTR instead runs its own rounds to the nearest geometric
/// density.
pub fn run_baseline(
    cfg: &ExperimentConfig,
    method: BaselineMethod,
    kappa: f64,
    seed: u64,
    data: &Dataset,
) -> Result<BaselineOutcome> {
    let arch = cfg.task.arch;
    let search = cfg.search_for(kappa, seed);
    let kind = search.objective;
    let pre = pretrain(arch, data, &search.train, seed)?;
    if method == BaselineMethod::Ltr {
        let ltr = cfg.ltr_for(kappa, seed);
        let rounds = run_ltr(&ltr, arch, data)?;
        let last = rounds.into_iter().last().expect("round zero always exists");
        let metrics = RunMetrics {
            draw_objective: draw_objective(&pre.model, data, kind, &last.ticket, search.train.batch_size)?,
            draw: pre.model.evaluate(data, &data.test, Some(&last.ticket.as_overlay()))?,
            final_eval: last.model.evaluate(data, &data.test, None)?,
        };
        return Ok(BaselineOutcome {
            ticket: last.ticket,
            pre,
            model: last.model,
            metrics,
        });
    }
    let model = &pre.model;
    let layout = model.layout();
    let batch = || scoring_batch(data, cfg.baseline.scoring_batch_factor * search.train.batch_size, seed);
    let ticket = match method {
        BaselineMethod::Snip => prune_by_scores(&snip_scores(model, &batch())?, kappa, layout)?,
        BaselineMethod::Grasp => prune_by_scores(&grasp_scores(model, &batch())?, kappa, layout)?,
        BaselineMethod::Synflow => synflow_prune(model, kappa, cfg.baseline.synflow_iterations)?,
        BaselineMethod::Magnitude => magnitude_prune(model, kappa)?,
        BaselineMethod::Random => random_prune(layout, kappa, seed)?,
        BaselineMethod::Ltr => unreachable!(),
    };
    let (model, metrics) = evaluate_ticket(&pre, &ticket, data, kind)?;
    Ok(BaselineOutcome {
        ticket,
        pre,
        model,
        metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub method: String,
    pub sparsity: f64,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}_s{}_seed{}", self.method, self.sparsity, self.seed)
    }
}

/// Methods × sparsities × repeats, in output order.
pub fn grid(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for method in &cfg.methods {
        for &sparsity in &cfg.sparsities {
            for r in 0..cfg.repeats {
                cells.push(Cell {
                    method: method.clone(),
                    sparsity,
                    seed: cfg.seed + r as u64,
                });
            }
        }
    }
    cells
}

/// Rows of a cell and the named tickets behind them.
pub type CellOutput = (Vec<MetricsRecord>, Vec<(String, Ticket)>);

/// Records and tickets of one cell. Sanity mode appends ablation rows that
/// share the base run's seed and rewound weights.
pub fn run_cell(cfg: &ExperimentConfig, data: &Dataset, cell: &Cell) -> Result<CellOutput> {
    let kappa = 1.0 - cell.sparsity;
    let start = Instant::now();
    let mut records = Vec::new();
    let mut tickets = Vec::new();
    if cell.method == "cts" {
        let search = cfg.search_for(kappa, cell.seed);
        let out = run_cts(&search, cfg.task.arch, data)?;
        let wall = start.elapsed().as_secs_f64();
        records.push(MetricsRecord::from_run("cts", cell.sparsity, cell.seed, &out.ticket, &out.metrics, wall));
        tickets.push(("cts".to_string(), out.ticket.clone()));
        if cfg.sanity {
            let ablations = [
                ("cts+shuffle", shuffle_layerwise(&out.ticket, cell.seed ^ 0x5AFE)?),
                ("cts+invert", invert_clamp(&out.distribution, kappa)?),
            ];
            for (name, ticket) in ablations {
                let t0 = Instant::now();
                let (_, m) = evaluate_ticket(&out.pre, &ticket, data, search.objective)?;
                let wall = t0.elapsed().as_secs_f64();
                records.push(MetricsRecord::from_run(name, cell.sparsity, cell.seed, &ticket, &m, wall));
                tickets.push((name.to_string(), ticket));
            }
            if search.train.rewind_step == 0 {
                let t0 = Instant::now();
                let fresh = reinit(&out.rewound, cell.seed ^ 0x2E17)?;
                let (draw_objective, draw) = (
                    draw_objective(&fresh, data, search.objective, &out.ticket, search.train.batch_size)?,
                    fresh.evaluate(data, &data.test, Some(&out.ticket.as_overlay()))?,
                );
                let trained = train(fresh, data, &search.train, Some(&out.ticket))?;
                let m = RunMetrics {
                    draw_objective,
                    draw,
                    final_eval: trained.evaluate(data, &data.test, None)?,
                };
                let wall = t0.elapsed().as_secs_f64();
                records.push(MetricsRecord::from_run("cts+reinit", cell.sparsity, cell.seed, &out.ticket, &m, wall));
            }
        }
    } else {
        let method: BaselineMethod = cell.method.parse()?;
        let out = run_baseline(cfg, method, kappa, cell.seed, data)?;
        let wall = start.elapsed().as_secs_f64();
        records.push(MetricsRecord::from_run(&cell.method, cell.sparsity, cell.seed, &out.ticket, &out.metrics, wall));
        tickets.push((cell.method.clone(), out.ticket));
    }
    Ok((records, tickets))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    records: Vec<MetricsRecord>,
    tickets: Vec<String>,
}

struct Layout {
    cells: PathBuf,
    tickets: PathBuf,
}

impl Layout {
    fn new(out: &Path) -> Result<Self> {
        let l = Layout {
            cells: out.join("cells"),
            tickets: out.join("tickets"),
        };
        fs::create_dir_all(&l.cells)?;
        fs::create_dir_all(&l.tickets)?;
        Ok(l)
    }

    fn cell_json(&self, cell: &Cell) -> PathBuf {
        self.cells.join(format!("{}.json", cell.id()))
    }

    fn cell_sum(&self, cell: &Cell) -> PathBuf {
        self.cells.join(format!("{}.sha256", cell.id()))
    }

    fn ticket(&self, cell: &Cell, name: &str) -> PathBuf {
        self.tickets.join(format!("{}_s{}_seed{}.json", name, cell.sparsity, cell.seed))
    }

    /// A cached cell whose record and tickets all match the stored checksum.
    fn cached(&self, cell: &Cell) -> Option<Vec<MetricsRecord>> {
        let body = fs::read(self.cell_json(cell)).ok()?;
        let stored = fs::read_to_string(self.cell_sum(cell)).ok()?;
        let file: CellFile = serde_json::from_slice(&body).ok()?;
        let mut hasher = Sha256::new();
        hasher.update(&body);
        for name in &file.tickets {
            hasher.update(fs::read(self.ticket(cell, name)).ok()?);
        }
        let sum: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        (stored.trim() == sum).then_some(file.records)
    }

    fn store(&self, cell: &Cell, records: &[MetricsRecord], tickets: &[(String, Ticket)]) -> Result<()> {
        let mut ticket_bytes = Vec::new();
        for (name, t) in tickets {
            let text = t.to_json();
            fs::write(self.ticket(cell, name), &text)?;
            ticket_bytes.push(text.into_bytes());
        }
        let file = CellFile {
            records: records.to_vec(),
            tickets: tickets.iter().map(|(n, _)| n.clone()).collect(),
        };
        let body = serde_json::to_vec_pretty(&file).map_err(|e| Error::Format(e.to_string()))?;
        let mut hasher = Sha256::new();
        hasher.update(&body);
        for t in &ticket_bytes {
            hasher.update(t);
        }
        let sum: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
        fs::write(self.cell_json(cell), body)?;
        fs::write(self.cell_sum(cell), sum + "\n")?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub records: Vec<MetricsRecord>,
    pub failures: usize,
    /// Cells answered from a verified cache.
    pub reused: usize,
    pub csv_path: PathBuf,
}

/// Serializes records to the versioned CSV.
pub fn records_to_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in records {
        w.write_record(r.csv_row()).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn layers_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "sparsity", "seed", "layer", "density"]).map_err(csv_err)?;
    for r in records {
        for (layer, d) in &r.layer_densities {
            w.write_record([
                r.method.clone(),
                r.sparsity.to_string(),
                r.seed.to_string(),
                layer.clone(),
                d.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Runs the grid into `out`: `results.csv` (deterministic), `layers.csv`
/// (per-layer densities), `timings.csv` (wall times), plus per-cell records
/// and ticket files. Cells with a valid cached record are skipped; failed
/// cells become error rows and the rest continue.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let layout = Layout::new(out)?;
    let cells = grid(cfg);
    // Rows of each cell and whether they came from the cache.
    type Slot = Option<(Vec<MetricsRecord>, bool)>;
    let results: Mutex<Vec<Slot>> = Mutex::new(vec![None; cells.len()]);
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let outcome = match layout.cached(cell) {
            Some(records) => (records, true),
            None => match run_cell(cfg, data, cell) {
                Ok((records, tickets)) => match layout.store(cell, &records, &tickets) {
                    Ok(()) => (records, false),
                    Err(e) => (vec![MetricsRecord::failed(&cell.method, cell.sparsity, cell.seed, &e)], false),
                },
                Err(e) => (vec![MetricsRecord::failed(&cell.method, cell.sparsity, cell.seed, &e)], false),
            },
        };
        results.lock().expect("no poisoned workers")[i] = Some(outcome);
    };
    let workers = cfg.workers.clamp(1, cells.len().max(1));
    if workers == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    let mut records = Vec::new();
    let mut reused = 0;
    for (r, cached) in results.into_inner().expect("no poisoned workers").into_iter().flatten() {
        reused += cached as usize;
        records.extend(r);
    }
    let failures = records.iter().filter(|r| !r.is_ok()).count();
    let csv_path = out.join("results.csv");
    fs::write(&csv_path, records_to_csv(&records)?)?;
    fs::write(out.join("layers.csv"), layers_csv(&records)?)?;
    let mut timings = String::from("method,sparsity,seed,wall_time_s\n");
    for r in &records {
        timings.push_str(&format!("{},{},{},{}\n", r.method, r.sparsity, r.seed, r.wall_time_s));
    }
    fs::write(out.join("timings.csv"), timings)?;
    Ok(ExperimentSummary {
        records,
        failures,
        reused,
        csv_path,
    })
}

pub fn checksum(bytes: &[u8]) -> String {
    sha256_hex(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_blobs, BlobSpec};
    use crate::nn::{LrSchedule, TrainConfig};

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            methods: vec!["cts".into(), "magnitude".into()],
            sparsities: vec![0.8],
            repeats: 2,
            train: TrainConfig {
                steps: 20,
                rewind_step: 4,
                batch_size: 32,
                lr: LrSchedule::constant(0.05),
                ..TrainConfig::default()
            },
            search: crate::search::SearchConfig {
                search_steps: 5,
                ..Default::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn data() -> Dataset {
        synthetic_blobs(&BlobSpec::new(3, 6, 200, 1)).unwrap()
    }

    #[test]
    fn empty_grid_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            sparsities: vec![],
            ..small_cfg()
        };
        let s = run_experiment(&cfg, &data(), dir.path()).unwrap();
        assert!(s.records.is_empty());
        let text = fs::read_to_string(&s.csv_path).unwrap();
        assert_eq!(text, CSV_HEADER.join(",") + "\n");
    }

    #[test]
    fn repeats_resume_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.methods.push("synflow".into());
        cfg.baseline.synflow_iterations = 3;
        let s = run_experiment(&cfg, &data(), dir.path()).unwrap();
        assert_eq!(s.records.len(), 6);
        assert_eq!(s.failures, 0);
        let seeds: Vec<u64> = s.records.iter().filter(|r| r.method == "cts").map(|r| r.seed).collect();
        assert_eq!(seeds, vec![0, 1]);
        let first = fs::read(&s.csv_path).unwrap();

        let again = run_experiment(&cfg, &data(), dir.path()).unwrap();
        assert_eq!(again.reused, 6);
        assert_eq!(fs::read(&again.csv_path).unwrap(), first);

        // A tampered ticket invalidates its cell, which is recomputed.
        let t = dir.path().join("tickets/magnitude_s0.8_seed0.json");
        fs::write(&t, "{}").unwrap();
        let third = run_experiment(&cfg, &data(), dir.path()).unwrap();
        assert_eq!(third.reused, 5);
        assert_eq!(fs::read(&third.csv_path).unwrap(), first);
    }

    #[test]
    fn failing_cell_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        // At this sparsity no weight survives, so every cell fails.
        let cfg = ExperimentConfig {
            methods: vec!["random".into()],
            sparsities: vec![0.99999999],
            repeats: 1,
            ..small_cfg()
        };
        let s = run_experiment(&cfg, &data(), dir.path()).unwrap();
        assert_eq!(s.failures, 1);
        assert!(s.records[0].status.starts_with("error: "));
    }

    #[test]
    fn sanity_rows_share_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg();
        cfg.methods = vec!["cts".into()];
        cfg.repeats = 1;
        cfg.sanity = true;
        cfg.train.rewind_step = 0;
        let s = run_experiment(&cfg, &data(), dir.path()).unwrap();
        let names: Vec<&str> = s.records.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, vec!["cts", "cts+shuffle", "cts+invert", "cts+reinit"]);
        assert!(s.records.iter().all(|r| r.seed == 0 && r.is_ok()));
    }
}
