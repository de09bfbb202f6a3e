//! Low-rank adapters in SVD form, `dW = P diag(lambda * mask) Q`, with
//! sensitivity-based rank pruning under a decaying budget.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, ParamStore, Tape, Tensor, Var};

/// Prefix of every adapter parameter name.
pub const PARAM_PREFIX: &str = "adapter.";

/// Linear-in-step decay of the average active rank.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub start_step: usize,
    pub end_step: usize,
    pub target_rank: usize,
    pub prune_interval: usize,
}

impl BudgetSchedule {
    /// Decay over the middle 60% of `total_steps`, pruning every 50 steps.
    pub fn for_run(total_steps: usize, target_rank: usize) -> Result<Self> {
        let s = Self {
            start_step: (total_steps as f64 * 0.2).round() as usize,
            end_step: (total_steps as f64 * 0.8).round() as usize,
            target_rank,
            prune_interval: 50,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.end_step <= self.start_step {
            return Err(Error::Config(format!(
                "budget end step {} must be after start step {}",
                self.end_step, self.start_step
            )));
        }
        if self.prune_interval == 0 {
            return Err(Error::Config("prune interval must be positive".into()));
        }
        Ok(())
    }

    /// Allowed number of active rank-1 components at `step` for
    /// `n_triplets` adapters of initial rank `rank`.
    pub fn budget(&self, step: usize, n_triplets: usize, rank: usize) -> usize {
        let progress = if step <= self.start_step {
            0.0
        } else if step >= self.end_step {
            1.0
        } else {
            (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64
        };
        let avg = rank as f64 - (rank as f64 - self.target_rank as f64) * progress;
        (avg * n_triplets as f64).round() as usize
    }

    fn is_prune_step(&self, step: usize) -> bool {
        step > self.start_step && (step.is_multiple_of(self.prune_interval) || step >= self.end_step)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Numerator of the branch scaling `alpha / rank`.
    pub alpha: f64,
    pub dropout: f32,
    /// Projection names or the groups `all`, `vision`, `language`.
    pub targets: Vec<String>,
    pub seed: u64,
    /// `None` keeps every component (plain LoRA).
    pub budget: Option<BudgetSchedule>,
    pub importance_decay: f64,
    /// Weight of the orthogonality penalty; 0 disables it.
    pub orthogonality: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec!["all".into()],
            seed: 42,
            budget: None,
            importance_decay: 0.85,
            orthogonality: 0.1,
        }
    }
}

impl AdapterConfig {
    /// No pruning, no orthogonality penalty.
    pub fn plain_lora(mut self) -> Self {
        self.budget = None;
        self.orthogonality = 0.0;
        self
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("adapter target list is empty".into()));
        }
        if let Some(b) = &self.budget {
            b.validate()?;
            if b.target_rank > self.rank {
                return Err(Error::Config(format!(
                    "target rank {} exceeds initial rank {}",
                    b.target_rank, self.rank
                )));
            }
        }
        Ok(())
    }
}

/// Shape of an adaptable projection `x (.. x in) -> (.. x out)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProjectionShape {
    pub input: usize,
    pub output: usize,
}

/// Bookkeeping for one adapted projection. The matrices live in the
/// owning [`AdapterSet`]'s parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterTriplet {
    pub target: String,
    pub input: usize,
    pub output: usize,
    pub mask: Vec<bool>,
    pub importance: Vec<f64>,
}

impl AdapterTriplet {
    pub fn p_name(&self) -> String {
        format!("{PARAM_PREFIX}{}.p", self.target)
    }

    pub fn lambda_name(&self) -> String {
        format!("{PARAM_PREFIX}{}.lambda", self.target)
    }

    pub fn q_name(&self) -> String {
        format!("{PARAM_PREFIX}{}.q", self.target)
    }

    pub fn active_rank(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn parameter_count(&self) -> usize {
        self.mask.len() * (self.input + self.output + 1)
    }
}

/// All adapters attached to one backbone.
#[derive(Clone, Debug)]
pub struct AdapterSet {
    pub config: AdapterConfig,
    triplets: BTreeMap<String, AdapterTriplet>,
    pub params: ParamStore,
}

fn expand_targets(
    requested: &[String],
    available: &BTreeMap<String, ProjectionShape>,
) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for t in requested {
        let matched: Vec<&String> = match t.as_str() {
            "all" => available.keys().collect(),
            "vision" => available.keys().filter(|k| k.starts_with("vis.")).collect(),
            "language" => available.keys().filter(|k| k.starts_with("lm.")).collect(),
            name if available.contains_key(name) => vec![available.get_key_value(name).unwrap().0],
            other => {
                return Err(Error::Config(format!(
                    "unknown adapter target `{other}`; valid targets are all, vision, language, {}",
                    available.keys().cloned().collect::<Vec<_>>().join(", ")
                )))
            }
        };
        for m in matched {
            if !out.contains(m) {
                out.push(m.clone());
            }
        }
    }
    out.sort();
    Ok(out)
}

impl AdapterSet {
    /// Creates adapters for the requested projections. `lambda` starts at
    /// zero so the adapted model initially equals the base model; `P` and
    /// `Q` are drawn with variance `1/out` and `1/in`.
    pub fn attach(available: &BTreeMap<String, ProjectionShape>, config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let targets = expand_targets(&config.targets, available)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let mut triplets = BTreeMap::new();
        let r = config.rank;
        for target in targets {
            let shape = available[&target];
            let t = AdapterTriplet {
                target: target.clone(),
                input: shape.input,
                output: shape.output,
                mask: vec![true; r],
                importance: vec![0.0; r],
            };
            let p = Tensor::randn(&[shape.output, r], (1.0 / shape.output as f32).sqrt(), &mut rng);
            let q = Tensor::randn(&[r, shape.input], (1.0 / shape.input as f32).sqrt(), &mut rng);
            params.insert(t.p_name(), p, true);
            params.insert(t.lambda_name(), Tensor::zeros(&[1, r]), true);
            params.insert(t.q_name(), q, true);
            triplets.insert(target, t);
        }
        Ok(Self {
            config,
            triplets,
            params,
        })
    }

    pub fn get(&self, target: &str) -> Option<&AdapterTriplet> {
        self.triplets.get(target)
    }

    pub fn triplets(&self) -> impl Iterator<Item = &AdapterTriplet> {
        self.triplets.values()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn active_rank_total(&self) -> usize {
        self.triplets.values().map(AdapterTriplet::active_rank).sum()
    }

    pub fn average_active_rank(&self) -> f64 {
        if self.triplets.is_empty() {
            return 0.0;
        }
        self.active_rank_total() as f64 / self.triplets.len() as f64
    }

    pub fn parameter_count(&self) -> usize {
        self.triplets.values().map(AdapterTriplet::parameter_count).sum()
    }

    /// Adds the adapter branch for `target` to `base_out = x W (+ b)`:
    /// `base_out + s * drop(x) Q^T diag(lambda * mask) P^T`.
    /// Returns `base_out` unchanged when `target` has no adapter.
    pub fn apply(
        &self,
        tape: &mut Tape,
        target: &str,
        x: Var,
        base_out: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let Some(t) = self.triplets.get(target) else {
            return Ok(base_out);
        };
        let p = tape.param(&self.params, &t.p_name())?;
        let lambda = tape.param(&self.params, &t.lambda_name())?;
        let q = tape.param(&self.params, &t.q_name())?;
        let mask = Tensor::new(
            vec![1, t.mask.len()],
            t.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )?;
        let mask = tape.constant(mask);
        let gate = tape.mul(lambda, mask)?;
        let input = match dropout_rng {
            Some(rng) => tape.dropout(x, self.config.dropout, rng)?,
            None => x,
        };
        let h = tape.matmul_nt(input, q)?;
        let h = tape.mul_row(h, gate)?;
        let h = tape.matmul_nt(h, p)?;
        let h = tape.scale(h, self.config.scaling());
        tape.add(base_out, h)
    }

    /// `weight * sum over adapters of (||P^T P - I||^2 + ||Q Q^T - I||^2)`,
    /// or `None` when the weight is zero.
    pub fn orthogonality_penalty(&self, tape: &mut Tape) -> Result<Option<Var>> {
        if self.config.orthogonality == 0.0 || self.triplets.is_empty() {
            return Ok(None);
        }
        let r = self.config.rank;
        let eye = tape.constant(Tensor::eye(r));
        let mut total: Option<Var> = None;
        for t in self.triplets.values() {
            let p = tape.param(&self.params, &t.p_name())?;
            let q = tape.param(&self.params, &t.q_name())?;
            let ptp = tape.matmul_tn(p, p)?;
            let qqt = tape.matmul_nt(q, q)?;
            let dp = tape.sub(ptp, eye)?;
            let dq = tape.sub(qqt, eye)?;
            let sp = tape.sum_squares(dp);
            let sq = tape.sum_squares(dq);
            let both = tape.add(sp, sq)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, both)?,
                None => both,
            });
        }
        Ok(total.map(|v| tape.scale(v, self.config.orthogonality)))
    }

    /// Updates importance from the gradients currently stored in
    /// `self.params`, then prunes to the budget at `step`. Newly masked
    /// entries have their value, gradient and optimizer moments zeroed.
    pub fn update_importance_and_prune(&mut self, step: usize, opt: &mut OptimizerState) -> Result<usize> {
        let decay = self.config.importance_decay;
        for t in self.triplets.values_mut() {
            let lambda = self.params.get(&t.lambda_name())?.data().to_vec();
            let grad = self
                .params
                .grad(&t.lambda_name())
                .ok_or_else(|| Error::Contract(format!("no gradient for `{}`", t.lambda_name())))?
                .data()
                .to_vec();
            for k in 0..t.mask.len() {
                if t.mask[k] {
                    let s = (lambda[k] as f64 * grad[k] as f64).abs();
                    t.importance[k] = decay * t.importance[k] + (1.0 - decay) * s;
                }
            }
        }
        let Some(budget) = self.config.budget else {
            return Ok(0);
        };
        if !budget.is_prune_step(step) {
            return Ok(0);
        }
        let allowed = budget.budget(step, self.triplets.len(), self.config.rank);
        let active = self.active_rank_total();
        if active <= allowed {
            return Ok(0);
        }
        let mut candidates: Vec<(f64, String, usize)> = self
            .triplets
            .values()
            .flat_map(|t| {
                (0..t.mask.len())
                    .filter(|&k| t.mask[k])
                    .map(|k| (t.importance[k], t.target.clone(), k))
            })
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let n_prune = active - allowed;
        let mut pruned: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (_, target, k) in candidates.into_iter().take(n_prune) {
            pruned.entry(target).or_default().push(k);
        }
        for (target, ks) in &pruned {
            let t = self.triplets.get_mut(target).expect("candidate target");
            for &k in ks {
                t.mask[k] = false;
            }
            let name = t.lambda_name();
            self.params.get_mut(&name)?.data_mut().iter_mut().enumerate().for_each(|(k, v)| {
                if ks.contains(&k) {
                    *v = 0.0;
                }
            });
            if let Some(g) = self.params.grad(&name).cloned() {
                let mut g = g;
                for &k in ks {
                    g.data_mut()[k] = 0.0;
                }
                self.params.set_grad(&name, g)?;
            }
            opt.reset_elements(&name, ks);
        }
        Ok(n_prune)
    }

    /// Zeroes masked `lambda` entries. Call after each optimizer step.
    pub fn enforce_masks(&mut self) -> Result<()> {
        for t in self.triplets.values() {
            let lambda = self.params.get_mut(&t.lambda_name())?;
            for (v, &m) in lambda.data_mut().iter_mut().zip(&t.mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    /// Rebuilds a set from its serialized parts.
    pub fn from_parts(
        config: AdapterConfig,
        triplets: Vec<AdapterTriplet>,
        params: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        let mut map = BTreeMap::new();
        for t in triplets {
            for name in [t.p_name(), t.lambda_name(), t.q_name()] {
                if !params.contains(&name) {
                    return Err(Error::Data(format!("adapter checkpoint lacks `{name}`")));
                }
            }
            map.insert(t.target.clone(), t);
        }
        Ok(Self {
            config,
            triplets: map,
            params,
        })
    }
}
