//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::ParameterSet;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Perturbation applied in each direction.
    pub step: f32,
    pub tolerance: f32,
    /// Denominator floor of the relative error, so gradients far below the
    /// loss's own rounding level are judged on an absolute scale.
    pub floor: f32,
    /// Check at most this many coordinates per parameter (sampled with
    /// `seed`); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<ParamCheck>,
    pub tolerance: f32,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error < self.tolerance as f64)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares analytic gradients of `builder`'s scalar loss against central
/// differences for every parameter in `params`.
pub fn gradient_check<F>(params: &ParameterSet, mut builder: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut entries = Vec::new();
    if params.is_empty() {
        return Ok(GradCheckReport {
            entries,
            tolerance: cfg.tolerance,
        });
    }
    let mut g = Graph::new();
    let loss = builder(&mut g, params)?;
    let grads = g.backward(loss)?;
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let zeros = vec![0.0; n];
        let analytic = grads.get(&name).unwrap_or(&zeros).to_vec();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut worst = (0.0f64, 0usize);
        for &i in &coords {
            let orig = params.get(&name)?.values()[i];
            let plus = orig + cfg.step;
            let minus = orig - cfg.step;
            work.get_mut(&name)?.values_mut()[i] = plus;
            let lp = eval(&mut builder, &work)?;
            work.get_mut(&name)?.values_mut()[i] = minus;
            let lm = eval(&mut builder, &work)?;
            work.get_mut(&name)?.values_mut()[i] = orig;
            let numeric = (lp - lm) / (plus as f64 - minus as f64);
            let a = analytic[i] as f64;
            let denom = a.abs().max(numeric.abs()).max(cfg.floor as f64);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, i);
            }
        }
        entries.push(ParamCheck {
            name,
            max_rel_error: worst.0,
            worst_coord: worst.1,
            coords_checked: coords.len(),
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerance: cfg.tolerance,
    })
}

fn eval<F>(builder: &mut F, params: &ParameterSet) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::inference();
    let loss = builder(&mut g, params)?;
    Ok(g.value(loss)[0] as f64)
}
