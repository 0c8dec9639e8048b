//! Small linear-regression tasks for exercising the mask machinery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TaskObjective;
use crate::error::Result;
use crate::grad::{GradVector, Layout, ParamVector, SegmentKind, Tape, Tensor};

pub struct LinearTasks {
    pub layout: Layout,
    inputs: Vec<Tensor>,
    targets: Vec<Tensor>,
}

impl LinearTasks {
    /// `n_tasks` regression problems on a 2→4 linear map (8 parameters).
    pub fn new(n_tasks: usize, seed: u64) -> Self {
        let mut layout = Layout::new();
        layout.push("w", 2, 4, SegmentKind::LinearWeight);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n_tasks {
            let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
            inputs.push(Tensor::new(6, 2, x).unwrap());
            targets.push(Tensor::new(6, 4, y).unwrap());
        }
        Self {
            layout,
            inputs,
            targets,
        }
    }

    pub fn input(&self, task: usize) -> &Tensor {
        &self.inputs[task]
    }

    pub fn target(&self, task: usize) -> &Tensor {
        &self.targets[task]
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..self.layout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        ParamVector::from_values(self.layout.clone(), v).unwrap()
    }
}

impl TaskObjective for LinearTasks {
    fn num_tasks(&self) -> usize {
        self.inputs.len()
    }

    fn loss_and_grad(&mut self, task: usize, params: &ParamVector) -> Result<(f64, GradVector)> {
        let mut tape = Tape::eval();
        let x = tape.input(self.inputs[task].clone());
        let w = tape.param(params, &self.layout.segments()[0])?;
        let y = tape.matmul(x, w)?;
        let loss = tape.mse(y, &self.targets[task], &[1.0; 6])?;
        let grad = tape.backward(loss)?;
        Ok((tape.scalar(loss), grad))
    }
}
