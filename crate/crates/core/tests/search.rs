use ndarray::Array2;
use pcs::ckptstore::BlockSource;
use pcs::data::{gen_blobs, split, Dataset, SplitSpec};
use pcs::netcore::{init_model, Architecture, Block};
use pcs::orchestrator::{run_search, warm_up, EvalContext, Objective, SearchConfig, SearchOptions};
use pcs::seed::rng_from_seed;
use pcs::surrogate::{FitConfig, Memory, Surrogate};
use rand::Rng as _;

/// Five "epochs" of independently initialized blocks.
struct Snapshots {
    arch: Architecture,
    epochs: Vec<usize>,
    blocks: Vec<Vec<Block>>,
}

impl Snapshots {
    fn new() -> Self {
        let arch = Architecture::uniform(2, 3, 2, 6).unwrap();
        let epochs = vec![1, 2, 3, 4, 5];
        let blocks = epochs.iter().map(|&e| init_model(&arch, e as u64).unwrap().blocks).collect();
        Self { arch, epochs, blocks }
    }
}

impl BlockSource for Snapshots {
    fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn candidate_epochs(&self) -> &[usize] {
        &self.epochs
    }

    fn block(&self, block: usize, candidate: usize) -> pcs::Result<Block> {
        Ok(self.blocks[candidate][block].clone())
    }
}

fn splits() -> (Dataset, Dataset, Dataset) {
    let d = gen_blobs(120, 3, 2, 0.1, 4).unwrap();
    split(&d, &SplitSpec { train_fraction: 0.5, val_fraction: 0.25, test_fraction: 0.25, seed: 2 }).unwrap()
}

/// Outputs `sum(P * W_o) / |P|` for a fixed `W_o` per output.
struct Linear {
    w: Vec<Array2<f64>>,
}

impl Surrogate for Linear {
    fn n_outputs(&self) -> usize {
        self.w.len()
    }

    fn predict(&self, pc: &Array2<f64>) -> pcs::Result<Vec<f64>> {
        Ok(self.w.iter().map(|w| (pc * w).mean().unwrap()).collect())
    }

    fn objective_gradient(&self, pc: &Array2<f64>, weights: &[f64]) -> pcs::Result<Array2<f64>> {
        let mut g = Array2::zeros(pc.raw_dim());
        for (w, c) in self.w.iter().zip(weights) {
            g = g + w * (*c / pc.len() as f64);
        }
        Ok(g)
    }

    fn fit(&mut self, _: &Memory, _: &FitConfig) -> pcs::Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

fn planted(n_outputs: usize, seed: u64) -> Linear {
    let mut rng = rng_from_seed(seed);
    Linear { w: (0..n_outputs).map(|_| Array2::from_shape_fn((3, 5), |_| rng.random::<f64>())).collect() }
}

fn frozen_descent(objective: Objective) {
    let source = Snapshots::new();
    let (train, val, _) = splits();
    let cfg = SearchConfig { steps: 20, selection_lr: 1e-2, ..SearchConfig::default() };
    let ctx = EvalContext::new(&source, &train, &val, &cfg);
    let mut psi = planted(objective.n_outputs(), 9);
    let mut memory = Memory::new(64).unwrap();
    let options = SearchOptions { train_surrogate: false, gumbel_noise: false };
    let out = run_search(&ctx, &cfg, objective, &mut psi, &mut memory, options).unwrap();
    assert_eq!(out.history.len(), 20);
    assert_eq!(out.predicted.len(), 20);
    assert!(out.aborted.is_none());
    for w in out.predicted.windows(2) {
        assert!(w[1] < w[0], "{:?}", out.predicted);
    }
}

#[test]
fn planted_surrogate_descends_on_err_and_ece() {
    frozen_descent(Objective::ErrEce);
}

#[test]
fn planted_surrogate_descends_on_nll() {
    frozen_descent(Objective::Nll);
}

#[test]
fn single_step_pushes_one_entry() {
    let source = Snapshots::new();
    let (train, val, _) = splits();
    let cfg = SearchConfig { steps: 1, population: 3, estimator_steps: 5, ..SearchConfig::default() };
    let ctx = EvalContext::new(&source, &train, &val, &cfg);
    let mut w = warm_up(&ctx, &cfg, Objective::ErrEce).unwrap();
    assert_eq!(w.memory.len(), 3);
    let out = run_search(&ctx, &cfg, Objective::ErrEce, &mut w.estimator, &mut w.memory, SearchOptions::default())
        .unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(w.memory.len(), 4);
    assert_ne!(out.final_logits, Array2::<f64>::zeros((3, 5)));
}

#[test]
fn search_is_deterministic() {
    let source = Snapshots::new();
    let (train, val, _) = splits();
    let cfg = SearchConfig { steps: 4, population: 4, estimator_steps: 10, ..SearchConfig::default() };
    let ctx = EvalContext::new(&source, &train, &val, &cfg);
    let run = || {
        let mut w = warm_up(&ctx, &cfg, Objective::ErrEce).unwrap();
        run_search(&ctx, &cfg, Objective::ErrEce, &mut w.estimator, &mut w.memory, SearchOptions::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.best, b.best);
    assert_eq!(a.final_logits, b.final_logits);
}
